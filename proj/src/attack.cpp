#include "misguide/attack.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

#include "misguide/errors.hpp"
#include "misguide/io.hpp"

namespace misguide {

namespace {

constexpr int kReportFormatVersion = 1;

enum : std::uint64_t {
  kStreamNoise = 11,
  kStreamProbe = 12,
  kStreamOrder = 13,
  kSeedGenerator = 0x6E6,
  kSeedClone = 0xC10E,
  kSeedClone2 = 0xC10E2,
};

std::vector<std::size_t> clone_dims(const Oracle& o, const AttackConfig& cfg) {
  std::vector<std::size_t> dims{o.input_dim()};
  dims.insert(dims.end(), cfg.clone_hidden.begin(), cfg.clone_hidden.end());
  dims.push_back(o.num_classes());
  return dims;
}

GeneratorModel make_generator(const Oracle& o, const AttackConfig& cfg) {
  std::vector<std::size_t> dims{cfg.noise_dim};
  dims.insert(dims.end(), cfg.generator_hidden.begin(), cfg.generator_hidden.end());
  dims.push_back(o.input_dim());
  return GeneratorModel(Mlp::he_init(std::move(dims), cfg.seed ^ kSeedGenerator), o.input_bounds());
}

// Records (queries, accuracy) every eval_every queries.
class Tracker {
 public:
  Tracker(const Dataset* eval, std::uint64_t every) : eval_(eval), every_(every), next_(every) {}

  void observe(const Mlp& clone, std::uint64_t used) {
    if (eval_ == nullptr || used < next_) return;
    points_.emplace_back(used, accuracy(clone, *eval_));
    while (next_ <= used) next_ += every_;
  }

  std::vector<std::pair<std::uint64_t, double>> finish(const Mlp& clone, std::uint64_t used) {
    if (eval_ != nullptr && (points_.empty() || points_.back().first != used)) {
      points_.emplace_back(used, accuracy(clone, *eval_));
    }
    return std::move(points_);
  }

 private:
  const Dataset* eval_;
  std::uint64_t every_;
  std::uint64_t next_;
  std::vector<std::pair<std::uint64_t, double>> points_;
};

void check_finite(double loss, const char* what) {
  if (!std::isfinite(loss)) throw Diverged(std::string(what) + " loss became non-finite");
}

// Trains a clone on one batch of oracle replies.
double clone_step(Mlp& clone, SgdMomentum& opt, const Matrix& x, const OracleReply& reply, LabelMode mode) {
  ForwardCache cache = forward_cached(clone, x);
  Matrix grad;
  const double loss = mode == LabelMode::Soft ? l1_loss(cache.logits(), reply.logits, &grad)
                                              : cross_entropy(cache.logits(), reply.labels, &grad);
  check_finite(loss, "clone");
  opt.step(clone, backward(clone, cache, grad));
  return loss;
}

// Per-sample mean absolute logit gap.
std::vector<double> per_sample_l1(const Matrix& a, const Matrix& b) {
  std::vector<double> out(a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) s += std::abs(a(i, j) - b(i, j));
    out[i] = s / static_cast<double>(a.cols());
  }
  return out;
}

double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

}  // namespace

Oracle::Oracle(std::shared_ptr<Gate> gate, std::uint64_t budget, Bounds input_bounds)
    : gate_(std::move(gate)), budget_(budget), bounds_(std::move(input_bounds)) {
  if (!gate_) throw std::invalid_argument("oracle needs a gate");
  mode_ = gate_->config().label_mode;
  input_dim_ = gate_->input_dim();
  num_classes_ = gate_->num_classes();
  if (bounds_.dim() != input_dim_) throw DimensionMismatch("oracle bounds do not match input dim");
}

Oracle::Oracle(std::shared_ptr<const Mlp> victim, LabelMode mode, std::uint64_t budget, Bounds input_bounds)
    : victim_(std::move(victim)), mode_(mode), budget_(budget), bounds_(std::move(input_bounds)) {
  if (!victim_) throw std::invalid_argument("oracle needs a victim");
  input_dim_ = victim_->input_dim();
  num_classes_ = victim_->output_dim();
  if (bounds_.dim() != input_dim_) throw DimensionMismatch("oracle bounds do not match input dim");
}

OracleReply Oracle::query(const Matrix& batch) {
  const std::uint64_t n = batch.rows();
  if (n > remaining()) {
    throw BudgetExhausted("query of " + std::to_string(n) + " exceeds remaining budget " +
                          std::to_string(remaining()));
  }
  OracleReply reply;
  if (gate_) {
    auto responses = gate_->respond_batch(batch);
    if (mode_ == LabelMode::Soft) {
      reply.logits = Matrix(n, num_classes_);
      for (std::size_t i = 0; i < n; ++i)
        std::copy(responses[i].logits.begin(), responses[i].logits.end(), reply.logits.row(i).begin());
    } else {
      reply.labels.reserve(n);
      for (const auto& r : responses) reply.labels.push_back(r.label);
    }
  } else {
    Matrix logits = victim_->forward(batch);
    if (mode_ == LabelMode::Soft) {
      reply.logits = std::move(logits);
    } else {
      reply.labels.reserve(n);
      for (std::size_t i = 0; i < n; ++i) reply.labels.push_back(static_cast<int>(argmax(logits.row(i))));
    }
  }
  used_ += n;
  ++calls_;
  return reply;
}

std::string to_string(AttackMethod m) {
  switch (m) {
    case AttackMethod::Dfme: return "dfme";
    case AttackMethod::Disguide: return "disguide";
    case AttackMethod::Knockoff: return "knockoff";
  }
  return "unknown";
}

AttackMethod attack_method_from_string(const std::string& s) {
  if (s == "dfme") return AttackMethod::Dfme;
  if (s == "disguide") return AttackMethod::Disguide;
  if (s == "knockoff") return AttackMethod::Knockoff;
  throw ConfigError("unknown attack method '" + s + "'");
}

void AttackConfig::validate() const {
  if (budget == 0) throw ConfigError("budget must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (noise_dim == 0) throw ConfigError("noise_dim must be positive");
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be non-negative");
  if (!(zo_step > 0.0)) throw ConfigError("zo_step must be positive");
  if (method == AttackMethod::Dfme && zo_directions == 0) {
    throw ConfigError("zo_directions must be >= 1: the zeroth-order estimator is undefined without probes");
  }
  if (clone_steps == 0) throw ConfigError("clone_steps must be positive");
  if (!(clone_lr > 0.0) || !(generator_lr > 0.0)) throw ConfigError("learning rates must be positive");
  if (eval_every == 0) throw ConfigError("eval_every must be positive");
  for (auto h : clone_hidden)
    if (h == 0) throw ConfigError("clone_hidden widths must be positive");
  for (auto h : generator_hidden)
    if (h == 0) throw ConfigError("generator_hidden widths must be positive");
}

CloneReport run_dfme(Oracle& oracle, const AttackConfig& cfg, const Dataset* eval) {
  cfg.validate();
  if (oracle.label_mode() != LabelMode::Soft) throw ConfigError("dfme requires a soft-label oracle");

  GeneratorModel gen = make_generator(oracle, cfg);
  Mlp clone = Mlp::he_init(clone_dims(oracle, cfg), cfg.seed ^ kSeedClone);
  SgdMomentum clone_opt(cfg.clone_lr, 0.9, 5e-4);
  Adam gen_opt(cfg.generator_lr);
  RngStream noise(cfg.seed, kStreamNoise);
  RngStream probe(cfg.seed, kStreamProbe);
  Tracker tracker(eval, cfg.eval_every);

  const std::size_t d = oracle.input_dim();
  const std::size_t m = cfg.zo_directions;
  const double eps = cfg.zo_step;

  bool exhausted = false;
  while (!exhausted) {
    for (std::size_t g = 0; g < cfg.generator_steps; ++g) {
      const std::size_t b = std::min<std::uint64_t>(cfg.batch_size, oracle.remaining() / (m + 1));
      if (b == 0) {
        exhausted = true;
        break;
      }
      Matrix z = gen.sample_noise(b, noise);
      Matrix x = gen.generate(z);
      const auto base = per_sample_l1(clone.forward(x), oracle.query(x).logits);

      // Forward-difference estimate of d(loss)/dx, spending b queries per direction.
      Matrix grad_x(b, d);
      for (std::size_t k = 0; k < m; ++k) {
        Matrix dirs(b, d);
        for (std::size_t i = 0; i < b; ++i) {
          auto u = dirs.row(i);
          for (auto& v : u) v = probe.gaussian();
          const double nu = norm2(u);
          for (auto& v : u) v /= nu;
        }
        Matrix xp = x;
        for (std::size_t k2 = 0; k2 < xp.size(); ++k2) xp.values()[k2] += eps * dirs.values()[k2];
        const auto shifted = per_sample_l1(clone.forward(xp), oracle.query(xp).logits);
        for (std::size_t i = 0; i < b; ++i) {
          const double coef = static_cast<double>(d) / static_cast<double>(m) * (shifted[i] - base[i]) / eps;
          auto gx = grad_x.row(i);
          auto u = dirs.row(i);
          for (std::size_t j = 0; j < d; ++j) gx[j] += coef * u[j];
        }
      }
      // The generator maximises the loss: descend on its negative.
      const double scale = -1.0 / static_cast<double>(b);
      for (auto& v : grad_x.values()) v *= scale;
      MlpGradients gg = gen.backward(z, grad_x);
      if (!std::isfinite(gg.max_abs())) throw Diverged("generator gradient became non-finite");
      gen_opt.step(gen.net(), gg);
    }
    if (exhausted) break;

    for (std::size_t c = 0; c < cfg.clone_steps; ++c) {
      const std::size_t b = std::min<std::uint64_t>(cfg.batch_size, oracle.remaining());
      if (b == 0) {
        exhausted = true;
        break;
      }
      Matrix x = gen.generate(gen.sample_noise(b, noise));
      clone_step(clone, clone_opt, x, oracle.query(x), LabelMode::Soft);
    }
    tracker.observe(clone, oracle.used());
  }

  CloneReport report{clone, cfg, oracle.used(), {}, std::nullopt};
  report.trajectory = tracker.finish(clone, oracle.used());
  report.clone = std::move(clone);
  return report;
}

CloneReport run_disguide(Oracle& oracle, const AttackConfig& cfg, const Dataset* eval) {
  cfg.validate();
  const LabelMode mode = oracle.label_mode();

  GeneratorModel gen = make_generator(oracle, cfg);
  Mlp clone1 = Mlp::he_init(clone_dims(oracle, cfg), cfg.seed ^ kSeedClone);
  Mlp clone2 = Mlp::he_init(clone_dims(oracle, cfg), cfg.seed ^ kSeedClone2);
  SgdMomentum opt1(cfg.clone_lr, 0.9, 5e-4);
  SgdMomentum opt2(cfg.clone_lr, 0.9, 5e-4);
  Adam gen_opt(cfg.generator_lr);
  RngStream noise(cfg.seed, kStreamNoise);
  Tracker tracker(eval, cfg.eval_every);

  const std::size_t num_classes = oracle.num_classes();
  std::vector<double> recent_entropy;

  bool exhausted = false;
  while (!exhausted) {
    for (std::size_t g = 0; g < cfg.generator_steps; ++g) {
      const std::size_t b = cfg.batch_size;
      Matrix z = gen.sample_noise(b, noise);
      Matrix x = gen.generate(z);
      ForwardCache c1 = forward_cached(clone1, x);
      ForwardCache c2 = forward_cached(clone2, x);
      Matrix p1 = softmax_rows(c1.logits());
      Matrix p2 = softmax_rows(c2.logits());

      std::vector<double> pbar(num_classes, 0.0);
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < num_classes; ++j) pbar[j] += 0.5 * (p1(i, j) + p2(i, j)) / static_cast<double>(b);
      recent_entropy.push_back(entropy(pbar));
      if (recent_entropy.size() > 10) recent_entropy.erase(recent_entropy.begin());

      // Generator objective (minimised): J = -L_D + lambda * L_div with
      // L_D = mean |p1 - p2| and L_div = sum_j pbar_j log pbar_j (negative
      // entropy), i.e. maximise disagreement and class diversity.
      Matrix g1(b, num_classes), g2(b, num_classes);
      const double inv_bc = 1.0 / static_cast<double>(b * num_classes);
      for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < num_classes; ++j) {
          const double diff = p1(i, j) - p2(i, j);
          const double sgn = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
          const double div = cfg.lambda * (std::log(std::max(pbar[j], 1e-300)) + 1.0) * 0.5 / static_cast<double>(b);
          g1(i, j) = -sgn * inv_bc + div;
          g2(i, j) = sgn * inv_bc + div;
        }
      }
      // Through the softmax: dJ/dlogit = p * (g - <g, p>).
      auto through_softmax = [](Matrix& gp, const Matrix& p) {
        for (std::size_t i = 0; i < gp.rows(); ++i) {
          const double inner = dot(gp.row(i), p.row(i));
          for (std::size_t j = 0; j < gp.cols(); ++j) gp(i, j) = p(i, j) * (gp(i, j) - inner);
        }
      };
      through_softmax(g1, p1);
      through_softmax(g2, p2);
      Matrix gx = backward(clone1, c1, g1).input;
      Matrix gx2 = backward(clone2, c2, g2).input;
      for (std::size_t k = 0; k < gx.size(); ++k) gx.values()[k] += gx2.values()[k];
      MlpGradients gg = gen.backward(z, gx);
      if (!std::isfinite(gg.max_abs())) throw Diverged("generator gradient became non-finite");
      gen_opt.step(gen.net(), gg);
    }

    for (std::size_t c = 0; c < cfg.clone_steps; ++c) {
      const std::size_t b = std::min<std::uint64_t>(cfg.batch_size, oracle.remaining());
      if (b == 0) {
        exhausted = true;
        break;
      }
      Matrix x = gen.generate(gen.sample_noise(b, noise));
      OracleReply reply = oracle.query(x);
      clone_step(clone1, opt1, x, reply, mode);
      clone_step(clone2, opt2, x, reply, mode);
    }
    tracker.observe(clone1, oracle.used());
  }

  CloneReport report{clone1, cfg, oracle.used(), {}, std::nullopt};
  report.trajectory = tracker.finish(clone1, oracle.used());
  if (!recent_entropy.empty()) {
    report.final_batch_entropy =
        std::accumulate(recent_entropy.begin(), recent_entropy.end(), 0.0) / static_cast<double>(recent_entropy.size());
  }
  return report;
}

CloneReport run_knockoff(Oracle& oracle, const Dataset& surrogate, const AttackConfig& cfg, const Dataset* eval) {
  cfg.validate();
  if (surrogate.size() == 0) throw EmptyDataset("knockoff surrogate set is empty");
  if (surrogate.dim() != oracle.input_dim()) throw DimensionMismatch("surrogate dim does not match oracle");
  const LabelMode mode = oracle.label_mode();

  std::vector<std::size_t> order(surrogate.size());
  std::iota(order.begin(), order.end(), 0);
  RngStream rng(cfg.seed, kStreamOrder);
  rng.shuffle(std::span<std::size_t>(order));
  order.resize(std::min<std::uint64_t>(order.size(), oracle.remaining()));

  Matrix x = surrogate.inputs.gather_rows(order);
  const std::size_t n = x.rows();
  Matrix targets(n, oracle.num_classes());
  std::vector<int> labels;
  for (std::size_t start = 0; start < n; start += cfg.batch_size) {
    const std::size_t end = std::min(n, start + cfg.batch_size);
    OracleReply reply = oracle.query(x.slice_rows(start, end));
    if (mode == LabelMode::Soft) {
      Matrix probs = softmax_rows(reply.logits);
      for (std::size_t i = start; i < end; ++i) {
        auto src = probs.row(i - start);
        std::copy(src.begin(), src.end(), targets.row(i).begin());
      }
    } else {
      labels.insert(labels.end(), reply.labels.begin(), reply.labels.end());
    }
  }

  Mlp clone = Mlp::he_init(clone_dims(oracle, cfg), cfg.seed ^ kSeedClone);
  SgdMomentum opt(cfg.clone_lr, 0.9, 5e-4);
  std::vector<std::size_t> idx(n);
  std::vector<std::pair<std::uint64_t, double>> trajectory;
  const std::size_t mb = std::min<std::size_t>(cfg.batch_size, 128);
  for (std::size_t epoch = 0; epoch < cfg.knockoff_epochs; ++epoch) {
    std::iota(idx.begin(), idx.end(), 0);
    rng.shuffle(std::span<std::size_t>(idx));
    for (std::size_t start = 0; start < n; start += mb) {
      const std::size_t end = std::min(n, start + mb);
      std::span<const std::size_t> sel(idx.data() + start, end - start);
      Matrix xb = x.gather_rows(sel);
      ForwardCache cache = forward_cached(clone, xb);
      Matrix grad;
      double loss;
      if (mode == LabelMode::Soft) {
        loss = soft_cross_entropy(cache.logits(), targets.gather_rows(sel), &grad);
      } else {
        std::vector<int> yb;
        yb.reserve(sel.size());
        for (auto i : sel) yb.push_back(labels[i]);
        loss = cross_entropy(cache.logits(), yb, &grad);
      }
      check_finite(loss, "clone");
      opt.step(clone, backward(clone, cache, grad));
    }
  }
  if (eval != nullptr) trajectory.emplace_back(oracle.used(), accuracy(clone, *eval));

  CloneReport report{std::move(clone), cfg, oracle.used(), std::move(trajectory), std::nullopt};
  return report;
}

CloneReport run_attack(Oracle& oracle, const AttackConfig& cfg, const Dataset* surrogate, const Dataset* eval) {
  switch (cfg.method) {
    case AttackMethod::Dfme: return run_dfme(oracle, cfg, eval);
    case AttackMethod::Disguide: return run_disguide(oracle, cfg, eval);
    case AttackMethod::Knockoff:
      if (surrogate == nullptr) throw ConfigError("knockoff requires a surrogate dataset");
      return run_knockoff(oracle, *surrogate, cfg, eval);
  }
  throw ConfigError("unknown attack method");
}

nlohmann::json attack_config_to_json(const AttackConfig& c) {
  return {
      {"method", to_string(c.method)},
      {"label_mode", to_string(c.label_mode)},
      {"budget", c.budget},
      {"batch_size", c.batch_size},
      {"noise_dim", c.noise_dim},
      {"generator_hidden", c.generator_hidden},
      {"clone_hidden", c.clone_hidden},
      {"lambda", c.lambda},
      {"generator_steps", c.generator_steps},
      {"clone_steps", c.clone_steps},
      {"zo_directions", c.zo_directions},
      {"zo_step", c.zo_step},
      {"clone_lr", c.clone_lr},
      {"generator_lr", c.generator_lr},
      {"knockoff_epochs", c.knockoff_epochs},
      {"eval_every", c.eval_every},
      {"seed", c.seed},
  };
}

AttackConfig attack_config_from_json(const nlohmann::json& j) {
  static const std::set<std::string> known{
      "method", "label_mode", "budget", "batch_size", "noise_dim", "generator_hidden",
      "clone_hidden", "lambda", "generator_steps", "clone_steps", "zo_directions", "zo_step",
      "clone_lr", "generator_lr", "knockoff_epochs", "eval_every", "seed"};
  if (!j.is_object()) throw ConfigError("attack config must be an object");
  for (const auto& [key, _] : j.items())
    if (!known.contains(key)) throw ConfigError("unknown attack key '" + key + "'");
  AttackConfig c;
  try {
    if (j.contains("method")) c.method = attack_method_from_string(j["method"].get<std::string>());
    if (j.contains("label_mode")) c.label_mode = label_mode_from_string(j["label_mode"].get<std::string>());
    if (j.contains("budget")) c.budget = j["budget"].get<std::uint64_t>();
    if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<std::size_t>();
    if (j.contains("noise_dim")) c.noise_dim = j["noise_dim"].get<std::size_t>();
    if (j.contains("generator_hidden")) c.generator_hidden = j["generator_hidden"].get<std::vector<std::size_t>>();
    if (j.contains("clone_hidden")) c.clone_hidden = j["clone_hidden"].get<std::vector<std::size_t>>();
    if (j.contains("lambda")) c.lambda = j["lambda"].get<double>();
    if (j.contains("generator_steps")) c.generator_steps = j["generator_steps"].get<std::size_t>();
    if (j.contains("clone_steps")) c.clone_steps = j["clone_steps"].get<std::size_t>();
    if (j.contains("zo_directions")) c.zo_directions = j["zo_directions"].get<std::size_t>();
    if (j.contains("zo_step")) c.zo_step = j["zo_step"].get<double>();
    if (j.contains("clone_lr")) c.clone_lr = j["clone_lr"].get<double>();
    if (j.contains("generator_lr")) c.generator_lr = j["generator_lr"].get<double>();
    if (j.contains("knockoff_epochs")) c.knockoff_epochs = j["knockoff_epochs"].get<std::size_t>();
    if (j.contains("eval_every")) c.eval_every = j["eval_every"].get<std::uint64_t>();
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("attack config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("attack config: ") + e.what());
  }
  return c;
}

std::string report_to_json(const CloneReport& r) {
  nlohmann::json j;
  j["format_version"] = kReportFormatVersion;
  j["config"] = attack_config_to_json(r.config);
  j["seed"] = r.config.seed;
  j["queries_used"] = r.queries_used;
  auto& t = j["trajectory"] = nlohmann::json::array();
  for (const auto& [q, acc] : r.trajectory) t.push_back({{"queries_used", q}, {"clone_accuracy", acc}});
  if (r.final_batch_entropy) j["final_batch_entropy"] = *r.final_batch_entropy;
  j["clone"] = nlohmann::json::parse(model_to_json(r.clone));
  return j.dump(2);
}

CloneReport report_from_json(const std::string& text) {
  try {
    auto j = nlohmann::json::parse(text);
    if (j.at("format_version").get<int>() != kReportFormatVersion) throw FormatError("unsupported report format_version");
    CloneReport r{model_from_json(j.at("clone").dump()), attack_config_from_json(j.at("config")),
                  j.at("queries_used").get<std::uint64_t>(), {}, std::nullopt};
    for (const auto& p : j.at("trajectory")) {
      r.trajectory.emplace_back(p.at("queries_used").get<std::uint64_t>(), p.at("clone_accuracy").get<double>());
    }
    if (j.contains("final_batch_entropy")) r.final_batch_entropy = j["final_batch_entropy"].get<double>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed clone report: ") + e.what());
  }
}

void save_report(const CloneReport& report, const std::filesystem::path& path) {
  write_file_atomic(path, report_to_json(report));
}

}  // namespace misguide
