#include "misguide/testbed.hpp"

#include "misguide/rng.hpp"

namespace misguide {

namespace {
enum : std::uint64_t {
  kStreamBackground = 21,
  kSeedTrainDraw = 101,
  kSeedTestDraw = 202,
  kSeedSurrogateDraw = 303,
  kSeedBackgroundDraw = 404,
  kSeedCalibSplit = 505,
  kSeedVictimInit = 606,
  kSeedExtractorInit = 707,
};

std::vector<std::size_t> dims_of(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out) {
  std::vector<std::size_t> dims{in};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(out);
  return dims;
}
}  // namespace

std::shared_ptr<Gate> Testbed::make_gate(const DefenseConfig& cfg) const {
  return std::make_shared<Gate>(victim, extractor, ood, cfg);
}

TestbedData make_testbed_data(const TestbedConfig& cfg) {
  TestbedData d;
  d.spec = synth10_spec(cfg.data_seed, cfg.train_per_class, cfg.bound);
  d.train = make_mixture(d.spec, cfg.data_seed ^ kSeedTrainDraw, DatasetRole::IdTrain);
  MixtureSpec test_spec = d.spec;
  test_spec.samples_per_class = cfg.test_per_class;
  d.test = make_mixture(test_spec, cfg.data_seed ^ kSeedTestDraw, DatasetRole::IdTest);
  MixtureSpec sur_spec = d.spec;
  sur_spec.samples_per_class = cfg.surrogate_per_class;
  d.surrogate = make_ood_pool(sur_spec, OodKind::shifted_means(cfg.surrogate_offset), cfg.data_seed ^ kSeedSurrogateDraw);
  return d;
}

Dataset extractor_training_set(const MixtureSpec& spec, std::size_t background_clusters, std::uint64_t seed,
                               std::size_t per_class) {
  MixtureSpec broad = spec;
  broad.samples_per_class = per_class;
  double radius = norm2(spec.means.front());
  auto extra = sphere_means(background_clusters, spec.dim, radius, seed, kStreamBackground);
  broad.means.insert(broad.means.end(), extra.begin(), extra.end());
  broad.scales.insert(broad.scales.end(), background_clusters, spec.scales.front());
  broad.num_classes = spec.num_classes + background_clusters;
  broad.heldout_means.clear();
  return make_mixture(broad, seed ^ kSeedBackgroundDraw, DatasetRole::IdTrain);
}

Mlp train_victim(const Dataset& train, const TestbedConfig& cfg) {
  auto init = Mlp::he_init(dims_of(train.dim(), cfg.victim_hidden, train.num_classes), cfg.victim_train.seed ^ kSeedVictimInit);
  return train_classifier(std::move(init), train, cfg.victim_train).model;
}

Mlp train_extractor(const MixtureSpec& spec, const Dataset& train, const TestbedConfig& cfg) {
  // The real ID training samples plus fresh background clusters.
  Dataset background = extractor_training_set(spec, cfg.background_clusters, cfg.data_seed, cfg.train_per_class);
  Dataset extra{background.inputs.slice_rows(spec.num_classes * cfg.train_per_class, background.size()), {},
                background.num_classes, DatasetRole::IdTrain};
  extra.labels.assign(background.labels.begin() + static_cast<std::ptrdiff_t>(spec.num_classes * cfg.train_per_class),
                      background.labels.end());
  Dataset broad = concat(train, extra);
  broad.role = DatasetRole::IdTrain;
  auto init = Mlp::he_init(dims_of(train.dim(), cfg.extractor_hidden, broad.num_classes),
                           cfg.extractor_train.seed ^ kSeedExtractorInit);
  return train_classifier(std::move(init), broad, cfg.extractor_train).model;
}

std::pair<Dataset, Dataset> calibration_split(const Dataset& train, const TestbedConfig& cfg) {
  return split(train, cfg.calibration_fraction, cfg.data_seed ^ kSeedCalibSplit);
}

OodParams fit_ood_params(const Mlp& extractor, const Dataset& fit_set, const TestbedConfig& cfg) {
  return fit(extractor.penultimate(fit_set.inputs), fit_set.labels, fit_set.num_classes, cfg.ridge);
}

OodParams fit_and_calibrate(const Mlp& extractor, const Dataset& train, const TestbedConfig& cfg) {
  auto [fit_set, calib_set] = calibration_split(train, cfg);
  return calibrate(fit_ood_params(extractor, fit_set, cfg), extractor.penultimate(calib_set.inputs), cfg.percentile);
}

Testbed build_testbed(const TestbedConfig& cfg) {
  Testbed tb;
  tb.data = make_testbed_data(cfg);
  auto victim = std::make_shared<const Mlp>(train_victim(tb.data.train, cfg));
  auto extractor = std::make_shared<const Mlp>(train_extractor(tb.data.spec, tb.data.train, cfg));
  tb.ood = std::make_shared<const OodParams>(fit_and_calibrate(*extractor, tb.data.train, cfg));
  tb.victim_accuracy = accuracy(*victim, tb.data.test);
  tb.victim = std::move(victim);
  tb.extractor = std::move(extractor);
  return tb;
}

}  // namespace misguide
