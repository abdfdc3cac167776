#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "misguide/matrix.hpp"

namespace misguide {

enum class DatasetRole { IdTrain, IdTest, OodPool };

std::string to_string(DatasetRole role);

struct Bounds {
  std::vector<double> lo;
  std::vector<double> hi;

  static Bounds uniform(std::size_t dim, double lo, double hi);
  std::size_t dim() const noexcept { return lo.size(); }
};

/// Spherical Gaussian mixture: one component per class.
struct MixtureSpec {
  std::size_t num_classes = 0;
  std::size_t dim = 0;
  std::vector<std::vector<double>> means;
  std::vector<double> scales;
  std::size_t samples_per_class = 0;
  Bounds bounds;
  // Components that exist in the world but never appear in ID data; used by
  // the heldout_classes OOD pool.
  std::vector<std::vector<double>> heldout_means;

  void validate() const;  // throws InvalidSpec
};

/// Labeled samples. OOD pools carry labels too: the source component for
/// shifted/heldout pools, 0 for the uniform cube (no semantics there).
struct Dataset {
  Matrix inputs;
  std::vector<int> labels;
  std::size_t num_classes = 0;
  DatasetRole role = DatasetRole::IdTrain;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t dim() const noexcept { return inputs.cols(); }
  std::vector<std::size_t> class_counts() const;
};

/// Default desk benchmark: C=10, d=32, means on a radius-5 sphere, unit scale.
/// Means (and the reserved heldout components) depend only on `seed`.
MixtureSpec synth10_spec(std::uint64_t seed, std::size_t samples_per_class = 500,
                         double bound = 5.0);

// Means drawn uniformly on a sphere of the given radius.
std::vector<std::vector<double>> sphere_means(std::size_t count, std::size_t dim, double radius,
                                              std::uint64_t seed, std::uint64_t stream);

Dataset make_mixture(const MixtureSpec& spec, std::uint64_t seed,
                     DatasetRole role = DatasetRole::IdTrain);

struct OodKind {
  enum class Type { UniformCube, ShiftedMeans, HeldoutClasses } type = Type::UniformCube;
  // Shift length for ShiftedMeans, in units of the mean class scale.
  double offset = 0.0;

  static OodKind uniform_cube() { return {Type::UniformCube, 0.0}; }
  static OodKind shifted_means(double offset) { return {Type::ShiftedMeans, offset}; }
  static OodKind heldout_classes() { return {Type::HeldoutClasses, 0.0}; }
};

/// Pool of num_classes * samples_per_class OOD samples (heldout: per reserved class).
Dataset make_ood_pool(const MixtureSpec& spec, const OodKind& kind, std::uint64_t seed);

/// CSV with header f0..f{d-1},label. Numbers written as %.17g.
void save_table(const Dataset& ds, const std::filesystem::path& path);
Dataset load_table(const std::filesystem::path& path, DatasetRole role = DatasetRole::IdTrain);
Dataset parse_table(const std::string& text, DatasetRole role = DatasetRole::IdTrain);
std::string format_table(const Dataset& ds);

/// Stratified split into (train, test). Throws TooFewSamples when a class has
/// fewer than two samples.
std::pair<Dataset, Dataset> split(const Dataset& ds, double test_fraction, std::uint64_t seed);

Dataset concat(const Dataset& a, const Dataset& b);

}  // namespace misguide
