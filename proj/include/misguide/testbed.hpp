#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "misguide/datagen.hpp"
#include "misguide/gate.hpp"
#include "misguide/nets.hpp"
#include "misguide/ood.hpp"

namespace misguide {

/// Everything needed to stand up a defended victim on a synthetic mixture.
struct TestbedConfig {
  std::uint64_t data_seed = 7;
  std::size_t train_per_class = 500;
  std::size_t test_per_class = 200;
  double bound = 5.0;
  std::vector<std::size_t> victim_hidden{64, 64};
  std::vector<std::size_t> extractor_hidden{64, 64};
  std::size_t background_clusters = 5;
  TrainConfig victim_train{};
  TrainConfig extractor_train{};
  double ridge = kDefaultRidge;
  double percentile = kDefaultPercentile;
  // Share of the ID training set held out for threshold calibration.
  double calibration_fraction = 0.2;
  // Shift (in class-scale units) of the Knockoff surrogate mixture.
  double surrogate_offset = 10.0;
  std::size_t surrogate_per_class = 200;
};

struct TestbedData {
  MixtureSpec spec;
  Dataset train;
  Dataset test;
  Dataset surrogate;
};

struct Testbed {
  TestbedData data;
  std::shared_ptr<const Mlp> victim;
  std::shared_ptr<const Mlp> extractor;
  std::shared_ptr<const OodParams> ood;
  double victim_accuracy = 0.0;

  std::shared_ptr<Gate> make_gate(const DefenseConfig& cfg) const;
};

TestbedData make_testbed_data(const TestbedConfig& cfg);
// ID classes plus background clusters, labels C..C+k-1 for the background.
Dataset extractor_training_set(const MixtureSpec& spec, std::size_t background_clusters, std::uint64_t seed,
                               std::size_t per_class);
Mlp train_victim(const Dataset& train, const TestbedConfig& cfg);
Mlp train_extractor(const MixtureSpec& spec, const Dataset& train, const TestbedConfig& cfg);
// Fits on one split of the training set and calibrates on the other.
OodParams fit_and_calibrate(const Mlp& extractor, const Dataset& train, const TestbedConfig& cfg);
OodParams fit_ood_params(const Mlp& extractor, const Dataset& fit_set, const TestbedConfig& cfg);
std::pair<Dataset, Dataset> calibration_split(const Dataset& train, const TestbedConfig& cfg);

Testbed build_testbed(const TestbedConfig& cfg);

}  // namespace misguide
