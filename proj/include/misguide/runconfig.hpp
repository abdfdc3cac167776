#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "misguide/attack.hpp"
#include "misguide/gate.hpp"
#include "misguide/nets.hpp"
#include "misguide/serve.hpp"
#include "misguide/testbed.hpp"

namespace misguide {

/// Full pipeline configuration. Every field has a default, so an empty
/// document reproduces the synth-10 desk benchmark.
struct RunConfig {
  // Drives data generation and victim/extractor training.
  std::uint64_t seed = 7;

  struct Data {
    std::size_t train_per_class = 500;
    std::size_t test_per_class = 200;
    double bound = 5.0;
    double surrogate_offset = 10.0;
    std::size_t surrogate_per_class = 200;
    // OOD pools used by the report.
    double ood_shift = 10.0;
    std::size_t ood_pool_per_class = 200;
    // Optional precomputed embeddings; replace the synthetic mixture.
    std::string train_csv;
    std::string test_csv;
    std::string surrogate_csv;
  } data;

  struct Model {
    std::vector<std::size_t> hidden{64, 64};
    std::size_t epochs = 30;
    std::size_t batch_size = 128;
    double learning_rate = 0.05;
    double momentum = 0.9;
  } victim;

  struct Extractor : Model {
    std::size_t background_clusters = 5;
  } extractor;

  struct Ood {
    double ridge = kDefaultRidge;
    double percentile = kDefaultPercentile;
    double calibration_fraction = 0.2;
  } ood;

  DefenseConfig defense;
  AttackConfig attack;

  struct Sweep {
    std::vector<double> p_values{0.0, 0.3, 0.5, 0.7, 1.0};
    std::vector<std::uint64_t> seeds{0, 1, 2};
    // "<method>-<mode>", e.g. "disguide-hard".
    std::vector<std::string> attackers{"dfme-soft", "disguide-soft", "disguide-hard", "knockoff-soft"};
    unsigned workers = 1;
    double benign_threshold_fraction = 0.9;
  } sweep;

  ServerConfig serve;
};

/// Parses and validates; throws ConfigInvalid listing every problem found
/// (unknown keys, wrong types, out-of-range values, unreadable paths).
RunConfig parse_run_config(const std::string& text);
std::vector<std::string> validate(const RunConfig& cfg);

nlohmann::ordered_json to_json(const RunConfig& cfg);
// Canonical effective-config text; its hash identifies a run.
std::string effective_config_text(const RunConfig& cfg);

TestbedConfig testbed_config(const RunConfig& cfg);

std::pair<AttackMethod, LabelMode> parse_attacker(const std::string& name);

}  // namespace misguide
