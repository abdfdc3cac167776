#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "misguide/matrix.hpp"

namespace misguide {

inline constexpr double kDefaultRidge = 1e-3;
inline constexpr double kDefaultPercentile = 95.0;

/// Class-conditional Gaussian model of in-distribution embeddings.
///
/// sigma holds the unbiased sample covariance of each class. The Cholesky
/// factors are of the regularized covariance
///     sigma_c + ridge * (trace(sigma_c) / e) * I
/// and are the only thing used for scoring. Distances are squared Mahalanobis
/// distances, so t_distance is in squared units too.
struct OodParams {
  std::size_t num_classes = 0;
  std::size_t dim = 0;
  double ridge = kDefaultRidge;
  std::vector<std::vector<double>> mu;
  std::vector<Matrix> sigma;
  std::vector<Matrix> chol_factors;
  std::optional<double> t_distance;

  bool calibrated() const noexcept { return t_distance.has_value(); }
};

/// Per-class mean and covariance (divisor n_c - 1), then factorization.
OodParams fit(const Matrix& embeddings, std::span<const int> labels, std::size_t num_classes,
              double ridge = kDefaultRidge);

// Recomputes chol_factors from sigma and ridge.
void refactor(OodParams& p);

struct MahaResult {
  double distance;  // squared, minimized over classes
  std::size_t nearest_class;
};

MahaResult maha_nearest(const OodParams& p, std::span<const double> x_emd);
double maha_score(const OodParams& p, std::span<const double> x_emd);
std::vector<double> maha_scores(const OodParams& p, const Matrix& embeddings);

/// Sets t_distance to the q-th percentile (linear interpolation) of the
/// scores of the given ID embeddings.
OodParams calibrate(OodParams p, const Matrix& id_embeddings, double percentile = kDefaultPercentile);

// Linear-interpolation percentile (numpy "linear" convention), q in [0, 100].
double percentile(std::vector<double> values, double q);

/// Strict inequality: a score exactly at the threshold counts as ID.
bool is_ood(const OodParams& p, std::span<const double> x_emd);

/// Maximum softmax probability. Lower values indicate OOD; use -msp (or
/// 1 - msp) as the OOD-positive score.
double msp_score(std::span<const double> probs);

/// P(ood > id) + 0.5 P(ood == id), via average ranks.
double auroc(std::span<const double> scores_ood, std::span<const double> scores_id);

std::string ood_to_json(const OodParams& p);
OodParams ood_from_json(const std::string& text);
void save_ood(const OodParams& p, const std::filesystem::path& path);
OodParams load_ood(const std::filesystem::path& path);

}  // namespace misguide
