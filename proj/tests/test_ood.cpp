#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "misguide/datagen.hpp"
#include "misguide/errors.hpp"
#include "misguide/linalg.hpp"
#include "misguide/ood.hpp"
#include "misguide/rng.hpp"
#include "misguide/testbed.hpp"
#include "support.hpp"

using namespace misguide;

namespace {

// Hand-built parameters with given covariances and no ridge.
OodParams manual_params(std::vector<std::vector<double>> mu, std::vector<Matrix> sigma) {
  OodParams p;
  p.num_classes = mu.size();
  p.dim = mu.front().size();
  p.ridge = 0.0;
  p.mu = std::move(mu);
  p.sigma = std::move(sigma);
  refactor(p);
  return p;
}

Dataset three_class_gaussians(std::size_t per_class, std::uint64_t seed, std::size_t dim = 4) {
  MixtureSpec s;
  s.num_classes = 3;
  s.dim = dim;
  s.means = sphere_means(3, dim, 6.0, 99, 0);
  s.scales = {1.0, 0.7, 1.3};
  s.samples_per_class = per_class;
  s.bounds = Bounds::uniform(dim, -100, 100);
  return make_mixture(s, seed);
}

}  // namespace

TEST_CASE("fit: two-point class gives the midpoint mean and unbiased covariance") {
  Matrix x{{0, 0}, {2, 0}, {0, 1}, {0, 3}};
  std::vector<int> y{0, 0, 1, 1};
  OodParams p = fit(x, y, 2, 1e-3);
  CHECK(p.mu[0] == std::vector<double>{1, 0});
  CHECK(p.mu[1] == std::vector<double>{0, 2});
  CHECK(p.sigma[0] == Matrix{{2, 0}, {0, 0}});
  CHECK(p.sigma[1] == Matrix{{0, 0}, {0, 2}});
  // Rank deficient without a ridge.
  CHECK_THROWS_AS(fit(x, y, 2, 0.0), SingularCovariance);
}

TEST_CASE("fit: classes with fewer than two samples are rejected") {
  Matrix x{{0, 0}, {2, 0}, {1, 1}};
  std::vector<int> y{0, 0, 1};
  CHECK_THROWS_AS(fit(x, y, 2), ClassTooSmall);
  std::vector<int> wrong{0, 0};
  CHECK_THROWS_AS(fit(x, wrong, 2), DimensionMismatch);
}

TEST_CASE("fit: means land within 4 sigma / sqrt(n) of the generating means") {
  const std::size_t n = 500;
  Dataset ds = three_class_gaussians(n, 3);
  OodParams p = fit(ds.inputs, ds.labels, 3);
  auto means = sphere_means(3, 4, 6.0, 99, 0);
  const double scales[] = {1.0, 0.7, 1.3};
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t k = 0; k < 4; ++k)
      CHECK(std::fabs(p.mu[c][k] - means[c][k]) <= 4.0 * scales[c] / std::sqrt(double(n)));
}

TEST_CASE("maha: zero at the mean, 25 at (3,4) under identity covariance") {
  OodParams p = manual_params({{0, 0}}, {Matrix::identity(2)});
  CHECK(maha_score(p, std::vector<double>{0, 0}) == 0.0);
  CHECK(maha_score(p, std::vector<double>{3, 4}) == doctest::Approx(25.0).epsilon(1e-12));

  OodParams two = manual_params({{0, 0}, {10, 0}}, {Matrix::identity(2), Matrix::identity(2)});
  auto r = maha_nearest(two, std::vector<double>{9, 0});
  CHECK(r.nearest_class == 1);
  CHECK(r.distance == doctest::Approx(1.0));
  CHECK_THROWS_AS(maha_score(two, std::vector<double>{1, 2, 3}), DimensionMismatch);
  CHECK_THROWS_AS(maha_score(OodParams{}, std::vector<double>{1}), NotFitted);
}

TEST_CASE("maha agrees with an explicit-inverse oracle") {
  RngStream rng(404, 1);
  int cases = 0;
  for (std::size_t e : {1u, 2u, 3u, 5u, 8u, 16u, 32u, 64u}) {
    for (int rep = 0; rep < 13 && cases < 100; ++rep, ++cases) {
      Matrix s = oracle::random_spd(e, rng);
      std::vector<double> mu(e), x(e);
      for (auto& v : mu) v = rng.gaussian();
      for (auto& v : x) v = 3.0 * rng.gaussian();
      OodParams p = manual_params({mu}, {s});
      const double got = maha_score(p, x);
      const double want = oracle::quad_form(oracle::inverse(s), x, mu);
      CHECK(got >= 0.0);
      CHECK(oracle::rel_err(got, want) <= 1e-8);
    }
  }
  CHECK(cases == 100);
}

TEST_CASE("maha: ridge uses the trace-scaled identity") {
  Matrix s{{4, 0}, {0, 1}};
  OodParams p = manual_params({{0, 0}}, {s});
  p.ridge = 0.5;
  refactor(p);
  // tr/e = 2.5, so the regularized covariance is diag(5.25, 2.25).
  CHECK(maha_score(p, std::vector<double>{1, 1}) == doctest::Approx(1 / 5.25 + 1 / 2.25).epsilon(1e-12));
}

TEST_CASE("percentile follows the linear-interpolation convention") {
  CHECK(percentile({1, 2, 3, 4}, 50) == doctest::Approx(2.5));
  CHECK(percentile({4, 1, 3, 2}, 25) == doctest::Approx(1.75));
  CHECK(percentile({1, 2, 3, 4}, 0) == 1.0);
  CHECK(percentile({1, 2, 3, 4}, 100) == 4.0);
  CHECK(percentile({7}, 95) == 7.0);
  CHECK_THROWS_AS(percentile({}, 50), EmptyInput);
  CHECK_THROWS_AS(percentile({1, 2}, 101), OutOfRange);
  CHECK_THROWS_AS(percentile({1, 2}, -1), OutOfRange);
}

TEST_CASE("calibrate: q=100 is the max ID score, q=0 flags everything but the minimum") {
  Dataset ds = three_class_gaussians(200, 5);
  OodParams p = fit(ds.inputs, ds.labels, 3);
  auto scores = maha_scores(p, ds.inputs);
  OodParams hi = calibrate(p, ds.inputs, 100);
  CHECK(*hi.t_distance == *std::max_element(scores.begin(), scores.end()));
  for (std::size_t i = 0; i < ds.size(); ++i) CHECK_FALSE(is_ood(hi, ds.inputs.row(i)));

  OodParams lo = calibrate(p, ds.inputs, 0);
  const double mn = *std::min_element(scores.begin(), scores.end());
  CHECK(*lo.t_distance == mn);
  std::size_t flagged = 0, at_min = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    flagged += is_ood(lo, ds.inputs.row(i));
    at_min += scores[i] == mn;
  }
  CHECK(flagged == ds.size() - at_min);

  Dataset fresh = three_class_gaussians(200, 6);
  std::size_t fresh_flagged = 0;
  for (std::size_t i = 0; i < fresh.size(); ++i) fresh_flagged += is_ood(lo, fresh.inputs.row(i));
  CHECK(double(fresh_flagged) / fresh.size() >= 0.99);
}

TEST_CASE("calibrate: q=95 gives about 5% false positives on held-out ID data") {
  Dataset fit_set = three_class_gaussians(400, 11);
  Dataset cal_set = three_class_gaussians(400, 12);
  Dataset held = three_class_gaussians(1000, 13);
  OodParams p = calibrate(fit(fit_set.inputs, fit_set.labels, 3), cal_set.inputs, 95);
  std::size_t flagged = 0;
  for (std::size_t i = 0; i < held.size(); ++i) flagged += is_ood(p, held.inputs.row(i));
  const double fpr = double(flagged) / held.size();
  MESSAGE("held-out FPR " << fpr);
  // Binomial spread of the held-out count plus the quantile error of the calibration set.
  const double band = 3.0 * (oracle::binomial_sigma(0.05, held.size()) + oracle::binomial_sigma(0.05, cal_set.size()));
  CHECK(std::fabs(fpr - 0.05) <= band);
}

TEST_CASE("calibrate: errors") {
  Dataset ds = three_class_gaussians(10, 5);
  OodParams p = fit(ds.inputs, ds.labels, 3);
  Matrix few(19, 4);
  CHECK_THROWS_AS(calibrate(p, few, 95), TooFewSamples);
  CHECK_THROWS_AS(calibrate(p, ds.inputs, 120), OutOfRange);
  CHECK_THROWS_AS(calibrate(OodParams{}, ds.inputs, 95), NotFitted);
}

TEST_CASE("is_ood: strict inequality and NotCalibrated") {
  OodParams p = manual_params({{0, 0}}, {Matrix::identity(2)});
  CHECK_THROWS_AS(is_ood(p, std::vector<double>{0, 0}), NotCalibrated);
  p.t_distance = 1.0;
  CHECK_FALSE(is_ood(p, std::vector<double>{0, 0}));
  CHECK_FALSE(is_ood(p, std::vector<double>{1, 0}));  // exactly at t
  CHECK(is_ood(p, std::vector<double>{1, 1e-6}));
}

TEST_CASE("is_ood: monotone in the threshold") {
  Dataset ds = three_class_gaussians(100, 21);
  Dataset probe = three_class_gaussians(100, 22);
  OodParams p = fit(ds.inputs, ds.labels, 3);
  std::size_t prev = probe.size() + 1;
  for (double t : {0.0, 1.0, 2.0, 4.0, 8.0, 16.0, 64.0}) {
    p.t_distance = t;
    std::size_t flagged = 0;
    for (std::size_t i = 0; i < probe.size(); ++i) flagged += is_ood(p, probe.inputs.row(i));
    CHECK(flagged <= prev);
    prev = flagged;
  }
}

TEST_CASE("maha is invariant under an invertible affine map of the embedding space") {
  Dataset ds = three_class_gaussians(200, 31);
  Dataset probe = three_class_gaussians(20, 32);
  RngStream rng(33, 0);
  const std::size_t e = ds.dim();
  Matrix a = oracle::random_spd(e, rng);  // invertible
  std::vector<double> b(e);
  for (auto& v : b) v = rng.gaussian();
  auto transform = [&](const Matrix& m) {
    Matrix out = matmul_bt(m, a);
    for (std::size_t i = 0; i < out.rows(); ++i)
      for (std::size_t k = 0; k < e; ++k) out(i, k) += b[k];
    return out;
  };
  OodParams p = fit(ds.inputs, ds.labels, 3, 0.0);
  OodParams q = fit(transform(ds.inputs), ds.labels, 3, 0.0);
  Matrix probe_t = transform(probe.inputs);
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double d0 = maha_score(p, probe.inputs.row(i));
    const double d1 = maha_score(q, probe_t.row(i));
    CHECK(oracle::rel_err(d0, d1) <= 1e-6);
  }
}

TEST_CASE("fit is invariant to the order of the training rows") {
  Dataset ds = three_class_gaussians(150, 41);
  std::vector<std::size_t> perm(ds.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  RngStream rng(42, 0);
  rng.shuffle(std::span<std::size_t>(perm));
  Matrix xs(ds.size(), ds.dim());
  std::vector<int> ys(ds.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    auto src = ds.inputs.row(perm[i]);
    std::copy(src.begin(), src.end(), xs.row(i).begin());
    ys[i] = ds.labels[perm[i]];
  }
  OodParams p = fit(ds.inputs, ds.labels, 3);
  OodParams q = fit(xs, ys, 3);
  Dataset probe = three_class_gaussians(20, 43);
  for (std::size_t i = 0; i < probe.size(); ++i)
    CHECK(oracle::rel_err(maha_score(p, probe.inputs.row(i)), maha_score(q, probe.inputs.row(i))) <= 1e-12);
}

TEST_CASE("msp: examples and normalization check") {
  CHECK(msp_score(std::vector<double>{0.1, 0.7, 0.2}) == doctest::Approx(0.7));
  CHECK(msp_score(std::vector<double>{0.25, 0.25, 0.25, 0.25}) == doctest::Approx(0.25));
  CHECK(msp_score(std::vector<double>{1.0}) == 1.0);
  CHECK_THROWS_AS(msp_score(std::vector<double>{0.5, 0.6}), NotNormalized);
  CHECK_THROWS_AS(msp_score(std::vector<double>{}), EmptyInput);
}

TEST_CASE("auroc: examples") {
  CHECK(auroc(std::vector<double>{3, 4}, std::vector<double>{1, 2}) == 1.0);
  CHECK(auroc(std::vector<double>{1, 2}, std::vector<double>{3, 4}) == 0.0);
  CHECK(auroc(std::vector<double>{1, 1}, std::vector<double>{1, 1}) == 0.5);
  CHECK(auroc(std::vector<double>{2, 0}, std::vector<double>{1}) == 0.5);
  CHECK_THROWS_AS(auroc(std::vector<double>{}, std::vector<double>{1}), EmptyInput);
  CHECK_THROWS_AS(auroc(std::vector<double>{1}, std::vector<double>{}), EmptyInput);
}

TEST_CASE("auroc matches the pairwise oracle and is complementary") {
  RngStream rng(55, 0);
  for (int rep = 0; rep < 600; ++rep) {
    const std::size_t na = 1 + rng.choice(12), nb = 1 + rng.choice(12);
    std::vector<double> a(na), b(nb);
    // Few distinct values so ties are common.
    for (auto& v : a) v = static_cast<double>(rng.choice(6));
    for (auto& v : b) v = static_cast<double>(rng.choice(6));
    const double got = auroc(a, b);
    CHECK(got == doctest::Approx(oracle::auroc_pairs(a, b)).epsilon(1e-12));
    CHECK(got + auroc(b, a) == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("OOD params JSON round trip keeps scores within 1e-10") {
  Dataset ds = three_class_gaussians(100, 61, 6);
  OodParams p = calibrate(fit(ds.inputs, ds.labels, 3), ds.inputs, 95);
  auto path = std::filesystem::temp_directory_path() / "misguide_test_ood.json";
  save_ood(p, path);
  OodParams back = load_ood(path);
  std::filesystem::remove(path);
  REQUIRE(back.calibrated());
  CHECK(*back.t_distance == *p.t_distance);
  CHECK(back.ridge == p.ridge);
  Dataset probe = three_class_gaussians(30, 62, 6);
  double worst = 0;
  for (std::size_t i = 0; i < probe.size(); ++i)
    worst = std::max(worst, std::fabs(maha_score(p, probe.inputs.row(i)) - maha_score(back, probe.inputs.row(i))));
  CHECK(worst <= 1e-10);
  CHECK_THROWS_AS(ood_from_json("{\"format_version\": 1}"), FormatError);
  CHECK_THROWS_AS(ood_from_json("not json"), FormatError);
}

TEST_CASE("shifted-means pool at 10 sigma: at least 99% flagged in embedding space") {
  TestbedConfig cfg;
  TestbedData d = make_testbed_data(cfg);
  Mlp extractor = train_extractor(d.spec, d.train, cfg);
  OodParams p = fit_and_calibrate(extractor, d.train, cfg);
  MixtureSpec pool_spec = d.spec;
  pool_spec.samples_per_class = 200;
  Dataset pool = make_ood_pool(pool_spec, OodKind::shifted_means(10.0), 1234);
  Matrix emb = extractor.penultimate(pool.inputs);
  std::size_t flagged = 0;
  for (std::size_t i = 0; i < emb.rows(); ++i) flagged += is_ood(p, emb.row(i));
  const double frac = double(flagged) / emb.rows();
  MESSAGE("flagged fraction " << frac);
  CHECK(frac >= 0.99);
}
