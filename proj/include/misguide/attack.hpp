#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "misguide/datagen.hpp"
#include "misguide/gate.hpp"
#include "misguide/nets.hpp"

namespace misguide {

// What an attacker gets back: logits in soft mode, labels in hard mode.
struct OracleReply {
  Matrix logits;
  std::vector<int> labels;
};

/// Black-box prediction API with query accounting. The target (a defended
/// gate or a bare victim) is private: attackers can only call query().
class Oracle {
 public:
  Oracle(std::shared_ptr<Gate> gate, std::uint64_t budget, Bounds input_bounds);
  Oracle(std::shared_ptr<const Mlp> victim, LabelMode mode, std::uint64_t budget, Bounds input_bounds);

  /// Throws BudgetExhausted (without consuming anything) when the batch does
  /// not fit in the remaining budget.
  OracleReply query(const Matrix& batch);

  LabelMode label_mode() const noexcept { return mode_; }
  std::uint64_t budget() const noexcept { return budget_; }
  std::uint64_t used() const noexcept { return used_; }
  std::uint64_t remaining() const noexcept { return budget_ - used_; }
  std::uint64_t calls() const noexcept { return calls_; }
  std::size_t input_dim() const noexcept { return input_dim_; }
  std::size_t num_classes() const noexcept { return num_classes_; }
  // Published input domain (e.g. pixel range); not secret.
  const Bounds& input_bounds() const noexcept { return bounds_; }

 private:
  std::shared_ptr<Gate> gate_;
  std::shared_ptr<const Mlp> victim_;
  LabelMode mode_;
  std::uint64_t budget_;
  std::uint64_t used_ = 0;
  std::uint64_t calls_ = 0;
  std::size_t input_dim_;
  std::size_t num_classes_;
  Bounds bounds_;
};

enum class AttackMethod { Dfme, Disguide, Knockoff };

std::string to_string(AttackMethod m);
AttackMethod attack_method_from_string(const std::string& s);

struct AttackConfig {
  AttackMethod method = AttackMethod::Dfme;
  LabelMode label_mode = LabelMode::Soft;
  std::uint64_t budget = 200'000;
  std::size_t batch_size = 256;
  std::size_t noise_dim = 32;
  std::vector<std::size_t> generator_hidden{64, 64};
  std::vector<std::size_t> clone_hidden{32, 32};
  double lambda = 1.0;         // class-diversity weight (DisGUIDE)
  std::size_t generator_steps = 1;
  std::size_t clone_steps = 5;
  std::size_t zo_directions = 1;
  double zo_step = 1e-3;
  double clone_lr = 0.05;
  double generator_lr = 1e-3;
  std::size_t knockoff_epochs = 100;
  // Trajectory resolution, in queries.
  std::uint64_t eval_every = 20'000;
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError
};

struct CloneReport {
  Mlp clone;
  AttackConfig config;
  std::uint64_t queries_used = 0;
  std::vector<std::pair<std::uint64_t, double>> trajectory;  // (queries used, clone test accuracy)
  // Entropy of the batch-mean clone prediction over the last generator batches
  // (DisGUIDE only).
  std::optional<double> final_batch_entropy;

  double final_accuracy() const { return trajectory.empty() ? 0.0 : trajectory.back().second; }
};

/// Data-free extraction with a zeroth-order generator update: each generator
/// sample spends 1 + zo_directions queries.
CloneReport run_dfme(Oracle& oracle, const AttackConfig& cfg, const Dataset* eval = nullptr);

/// Two clones; the generator is trained through the clones only, maximising
/// their disagreement plus lambda times the entropy of the batch-mean
/// prediction. Reports clone #1.
CloneReport run_disguide(Oracle& oracle, const AttackConfig& cfg, const Dataset* eval = nullptr);

/// Queries each surrogate sample once (up to the budget), then distils.
CloneReport run_knockoff(Oracle& oracle, const Dataset& surrogate, const AttackConfig& cfg,
                         const Dataset* eval = nullptr);

CloneReport run_attack(Oracle& oracle, const AttackConfig& cfg, const Dataset* surrogate,
                       const Dataset* eval = nullptr);

nlohmann::json attack_config_to_json(const AttackConfig& cfg);
// Missing keys keep their defaults; unknown keys throw ConfigError.
AttackConfig attack_config_from_json(const nlohmann::json& j);

std::string report_to_json(const CloneReport& report);
CloneReport report_from_json(const std::string& text);
void save_report(const CloneReport& report, const std::filesystem::path& path);

}  // namespace misguide
