#include "misguide/ood.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "misguide/errors.hpp"
#include "misguide/io.hpp"
#include "misguide/linalg.hpp"

namespace misguide {

namespace {
constexpr int kOodFormatVersion = 1;

void require_fitted(const OodParams& p) {
  if (p.num_classes == 0 || p.chol_factors.size() != p.num_classes) throw NotFitted("OOD parameters are not fitted");
}

Matrix regularized(const Matrix& sigma, double ridge) {
  Matrix out = sigma;
  const std::size_t e = sigma.rows();
  double trace = 0.0;
  for (std::size_t i = 0; i < e; ++i) trace += sigma(i, i);
  const double add = ridge * trace / static_cast<double>(e);
  for (std::size_t i = 0; i < e; ++i) out(i, i) += add;
  return out;
}
}  // namespace

void refactor(OodParams& p) {
  if (!(p.ridge >= 0.0)) throw std::invalid_argument("ridge must be non-negative");
  p.chol_factors.clear();
  p.chol_factors.reserve(p.num_classes);
  for (std::size_t c = 0; c < p.num_classes; ++c) {
    try {
      p.chol_factors.push_back(cholesky(regularized(p.sigma[c], p.ridge)));
    } catch (const NotPositiveDefinite& e) {
      throw SingularCovariance(c, e.what());
    }
  }
}

OodParams fit(const Matrix& embeddings, std::span<const int> labels, std::size_t num_classes, double ridge) {
  if (labels.size() != embeddings.rows()) throw DimensionMismatch("fit: one label per embedding row required");
  if (num_classes == 0) throw std::invalid_argument("fit: num_classes must be positive");
  const std::size_t e = embeddings.cols();

  OodParams p;
  p.num_classes = num_classes;
  p.dim = e;
  p.ridge = ridge;
  p.mu.assign(num_classes, std::vector<double>(e, 0.0));
  std::vector<std::size_t> counts(num_classes, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
      throw std::invalid_argument("fit: label out of range");
    }
    const auto c = static_cast<std::size_t>(labels[i]);
    counts[c]++;
    auto x = embeddings.row(i);
    for (std::size_t j = 0; j < e; ++j) p.mu[c][j] += x[j];
  }
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (counts[c] < 2) throw ClassTooSmall(c, "needs at least 2 samples, has " + std::to_string(counts[c]));
    for (auto& v : p.mu[c]) v /= static_cast<double>(counts[c]);
  }

  p.sigma.assign(num_classes, Matrix(e, e));
  std::vector<double> centered(e);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto c = static_cast<std::size_t>(labels[i]);
    auto x = embeddings.row(i);
    for (std::size_t j = 0; j < e; ++j) centered[j] = x[j] - p.mu[c][j];
    Matrix& s = p.sigma[c];
    // Upper triangle only; mirrored below.
    for (std::size_t a = 0; a < e; ++a) {
      const double ca = centered[a];
      if (ca == 0.0) continue;
      auto row = s.row(a);
      for (std::size_t b = a; b < e; ++b) row[b] += ca * centered[b];
    }
  }
  for (std::size_t c = 0; c < num_classes; ++c) {
    Matrix& s = p.sigma[c];
    const double inv = 1.0 / static_cast<double>(counts[c] - 1);
    for (std::size_t a = 0; a < e; ++a) {
      for (std::size_t b = a; b < e; ++b) {
        s(a, b) *= inv;
        s(b, a) = s(a, b);
      }
    }
  }
  refactor(p);
  return p;
}

MahaResult maha_nearest(const OodParams& p, std::span<const double> x_emd) {
  require_fitted(p);
  if (x_emd.size() != p.dim) {
    throw DimensionMismatch("embedding has length " + std::to_string(x_emd.size()) + ", expected " +
                            std::to_string(p.dim));
  }
  MahaResult best{std::numeric_limits<double>::infinity(), 0};
  std::vector<double> r(p.dim);
  for (std::size_t c = 0; c < p.num_classes; ++c) {
    for (std::size_t j = 0; j < p.dim; ++j) r[j] = x_emd[j] - p.mu[c][j];
    // (x-mu)ᵀ Σ⁻¹ (x-mu) = |L⁻¹ (x-mu)|² with Σ = L Lᵀ.
    forward_substitute(p.chol_factors[c], r);
    const double d = dot(r, r);
    if (d < best.distance) best = {d, c};
  }
  return best;
}

double maha_score(const OodParams& p, std::span<const double> x_emd) { return maha_nearest(p, x_emd).distance; }

std::vector<double> maha_scores(const OodParams& p, const Matrix& embeddings) {
  std::vector<double> out(embeddings.rows());
  for (std::size_t i = 0; i < embeddings.rows(); ++i) out[i] = maha_score(p, embeddings.row(i));
  return out;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw EmptyInput("percentile of empty list");
  if (!(q >= 0.0 && q <= 100.0)) throw OutOfRange("percentile must lie in [0, 100]");
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

OodParams calibrate(OodParams p, const Matrix& id_embeddings, double q) {
  require_fitted(p);
  if (id_embeddings.rows() < 20) throw TooFewSamples("calibration needs at least 20 ID embeddings");
  if (!(q >= 0.0 && q <= 100.0)) throw OutOfRange("percentile must lie in [0, 100]");
  p.t_distance = percentile(maha_scores(p, id_embeddings), q);
  return p;
}

bool is_ood(const OodParams& p, std::span<const double> x_emd) {
  if (!p.calibrated()) throw NotCalibrated("t_distance has not been calibrated");
  return maha_score(p, x_emd) > *p.t_distance;
}

double msp_score(std::span<const double> probs) {
  if (probs.empty()) throw EmptyInput("msp of empty vector");
  const double sum = std::accumulate(probs.begin(), probs.end(), 0.0);
  if (std::abs(sum - 1.0) > 1e-6) throw NotNormalized("probabilities sum to " + std::to_string(sum));
  return *std::max_element(probs.begin(), probs.end());
}

double auroc(std::span<const double> scores_ood, std::span<const double> scores_id) {
  if (scores_ood.empty() || scores_id.empty()) throw EmptyInput("auroc needs non-empty score lists");
  struct Item {
    double score;
    bool ood;
  };
  std::vector<Item> items;
  items.reserve(scores_ood.size() + scores_id.size());
  for (double s : scores_ood) items.push_back({s, true});
  for (double s : scores_id) items.push_back({s, false});
  std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.score < b.score; });

  // Doubled rank sums stay integral under tie averaging.
  std::uint64_t twice_rank_sum = 0;
  for (std::size_t i = 0; i < items.size();) {
    std::size_t j = i + 1;
    while (j < items.size() && items[j].score == items[i].score) ++j;
    const std::uint64_t twice_avg_rank = (i + 1) + j;  // ranks i+1..j
    for (std::size_t k = i; k < j; ++k)
      if (items[k].ood) twice_rank_sum += twice_avg_rank;
    i = j;
  }
  const std::uint64_t n1 = scores_ood.size();
  const std::uint64_t n0 = scores_id.size();
  const std::uint64_t twice_u = twice_rank_sum - n1 * (n1 + 1);
  return static_cast<double>(twice_u) / static_cast<double>(2 * n1 * n0);
}

std::string ood_to_json(const OodParams& p) {
  require_fitted(p);
  nlohmann::json j;
  j["format_version"] = kOodFormatVersion;
  j["C"] = p.num_classes;
  j["e"] = p.dim;
  j["ridge"] = p.ridge;
  j["distance_units"] = "squared_mahalanobis";
  j["t_distance"] = p.t_distance ? nlohmann::json(*p.t_distance) : nlohmann::json(nullptr);
  j["mu"] = p.mu;
  auto& sig = j["sigma"] = nlohmann::json::array();
  for (const auto& s : p.sigma) sig.push_back(s.storage());
  return j.dump();
}

OodParams ood_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("OOD params file is not valid JSON: ") + e.what());
  }
  try {
    if (j.at("format_version").get<int>() != kOodFormatVersion) throw FormatError("unsupported OOD format_version");
    OodParams p;
    p.num_classes = j.at("C").get<std::size_t>();
    p.dim = j.at("e").get<std::size_t>();
    p.ridge = j.at("ridge").get<double>();
    if (!j.at("t_distance").is_null()) p.t_distance = j.at("t_distance").get<double>();
    p.mu = j.at("mu").get<std::vector<std::vector<double>>>();
    if (p.mu.size() != p.num_classes) throw FormatError("mu must have C entries");
    for (const auto& m : p.mu)
      if (m.size() != p.dim) throw FormatError("mu entries must have length e");
    const auto& sig = j.at("sigma");
    if (sig.size() != p.num_classes) throw FormatError("sigma must have C entries");
    for (const auto& s : sig) {
      auto flat = s.get<std::vector<double>>();
      if (flat.size() != p.dim * p.dim) throw FormatError("sigma entries must have e*e values");
      p.sigma.emplace_back(p.dim, p.dim, std::move(flat));
    }
    refactor(p);
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed OOD params file: ") + e.what());
  }
}

void save_ood(const OodParams& p, const std::filesystem::path& path) { write_file_atomic(path, ood_to_json(p)); }

OodParams load_ood(const std::filesystem::path& path) { return ood_from_json(read_file(path)); }

}  // namespace misguide
