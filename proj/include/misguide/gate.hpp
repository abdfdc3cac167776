#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include "misguide/matrix.hpp"
#include "misguide/nets.hpp"
#include "misguide/ood.hpp"
#include "misguide/rng.hpp"

namespace misguide {

enum class LabelMode { Soft, Hard };

std::string to_string(LabelMode mode);
LabelMode label_mode_from_string(const std::string& s);

struct DefenseConfig {
  // Probability that an OOD-flagged query gets a random response.
  double p = 0.7;
  LabelMode label_mode = LabelMode::Soft;
  // Key the response randomness on the query content instead of its arrival index.
  bool consistent_responses = true;
  double random_logit_scale = 10.0;
  std::uint64_t master_seed = 0;

  void validate() const;  // throws OutOfRange
};

struct GateResponse {
  std::vector<double> logits;
  int label = 0;  // argmax of logits, lowest index on ties
  // Internal trace. Never part of any client-facing payload.
  bool was_ood = false;
  bool was_randomized = false;
};

struct GateStats {
  std::uint64_t queries_total = 0;
  std::uint64_t ood_flagged = 0;
  std::uint64_t randomized = 0;
};

/// Confident random prediction: scale * one_hot(k) + N(0, 1) noise with k
/// uniform over the classes.
std::vector<double> random_logits(std::size_t num_classes, RngStream& rng, double scale);

/// The defended prediction path. Embeds each query with the frozen
/// extractor, scores it against the ID Gaussians, and for OOD-flagged
/// queries substitutes a random prediction with probability p.
///
/// Safe for concurrent respond() calls; set_p publishes a new config
/// snapshot that later calls observe.
class Gate {
 public:
  Gate(std::shared_ptr<const Mlp> victim, std::shared_ptr<const Mlp> extractor,
       std::shared_ptr<const OodParams> ood, DefenseConfig cfg);

  GateResponse respond(std::span<const double> x);
  std::vector<GateResponse> respond_batch(const Matrix& batch);

  RngStream derive_query_rng(std::span<const double> x, std::uint64_t query_index) const;

  void set_p(double new_p);
  DefenseConfig config() const;
  GateStats stats() const;

  std::size_t input_dim() const { return victim_->input_dim(); }
  std::size_t num_classes() const { return victim_->output_dim(); }

 private:
  GateResponse decide(std::span<const double> x, std::span<const double> victim_logits, double score,
                      const DefenseConfig& cfg);

  std::shared_ptr<const Mlp> victim_;
  std::shared_ptr<const Mlp> extractor_;
  std::shared_ptr<const OodParams> ood_;

  mutable std::mutex cfg_mutex_;
  std::shared_ptr<const DefenseConfig> cfg_;

  std::atomic<std::uint64_t> total_{0};
  std::atomic<std::uint64_t> ood_flagged_{0};
  std::atomic<std::uint64_t> randomized_{0};
  std::atomic<std::uint64_t> next_index_{0};
};

}  // namespace misguide
