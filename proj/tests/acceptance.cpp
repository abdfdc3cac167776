// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <httplib.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "support.hpp"
#include "misguide/evalkit.hpp"
#include "misguide/nets.hpp"
#include "misguide/ood.hpp"
#include "misguide/runconfig.hpp"
#include "misguide/serve.hpp"

using namespace misguide;
using nlohmann::json;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) pass = false;
    if (!detail.empty()) detail += "; ";
    detail += (ok ? "" : "FAILED ") + what;
  }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

struct Timer {
  std::chrono::steady_clock::time_point wall = std::chrono::steady_clock::now();
  std::clock_t cpu = std::clock();
  double wall_s() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - wall).count(); }
  double cpu_s() const { return static_cast<double>(std::clock() - cpu) / CLOCKS_PER_SEC; }
};

int failures = 0;
std::map<int, std::string> summary;

void report(int id, const char* title, const Outcome& o, const Timer& t) {
  if (!o.pass) ++failures;
  char head[160];
  std::snprintf(head, sizeof head, "%s criterion %d (%s): ", o.pass ? "PASS" : "FAIL", id, title);
  char tail[80];
  std::snprintf(tail, sizeof tail, " [%.1fs wall, %.1fs cpu]", t.wall_s(), t.cpu_s());
  summary[id] = head + o.detail + tail;
  std::printf("%s\n", summary[id].c_str());
}

Matrix stack(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows() + b.rows(), a.cols());
  std::copy(a.values().begin(), a.values().end(), out.values().begin());
  std::copy(b.values().begin(), b.values().end(), out.values().begin() + static_cast<std::ptrdiff_t>(a.size()));
  return out;
}

// Vertices of the input box: as far from the ID clusters as a query can get.
Matrix box_corners(std::size_t n, const Bounds& bounds, std::uint64_t seed) {
  RngStream rng(seed, 3);
  Matrix out(n, bounds.dim());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < bounds.dim(); ++k) out(i, k) = rng.choice(2) ? bounds.hi[k] : bounds.lo[k];
  return out;
}

double central(double& w, const std::function<double()>& f) {
  const double h = 1e-5 * std::max(1.0, std::fabs(w));
  const double keep = w;
  w = keep + h;
  const double up = f();
  w = keep - h;
  const double down = f();
  w = keep;
  return (up - down) / (2.0 * h);
}

// ---------------------------------------------------------------------------

void oracle_equivalences() {
  Timer t;
  Outcome o;

  Timer maha_t;
  RngStream rng(1, 1);
  double worst = 0.0;
  int cases = 0;
  for (std::size_t e : {1u, 2u, 4u, 8u, 16u, 24u, 32u, 48u, 64u, 64u}) {
    for (int rep = 0; rep < 10; ++rep, ++cases) {
      Matrix s = oracle::random_spd(e, rng);
      std::vector<double> mu(e), x(e);
      for (auto& v : mu) v = rng.gaussian();
      for (auto& v : x) v = 3.0 * rng.gaussian();
      OodParams p;
      p.num_classes = 1;
      p.dim = e;
      p.ridge = 0.0;
      p.mu = {mu};
      p.sigma = {s};
      refactor(p);
      worst = std::max(worst, oracle::rel_err(maha_score(p, x), oracle::quad_form(oracle::inverse(s), x, mu)));
    }
  }
  const double maha_time = maha_t.wall_s();
  o.require(cases == 100 && worst <= 1e-8, "maha " + std::to_string(cases) + " cases worst rel " + fmt("%.2e", worst));
  o.require(maha_time < 5.0, "maha runtime " + fmt("%.2fs", maha_time));

  int mismatches = 0;
  for (int rep = 0; rep < 2000; ++rep) {
    const std::size_t na = 1 + rng.choice(12), nb = 1 + rng.choice(12);
    std::vector<double> a(na), b(nb);
    for (auto& v : a) v = static_cast<double>(rng.choice(8));
    for (auto& v : b) v = static_cast<double>(rng.choice(8));
    mismatches += auroc(a, b) != oracle::auroc_pairs(a, b);
  }
  o.require(mismatches == 0, "auroc 2000 cases, " + std::to_string(mismatches) + " mismatches");

  double worst_fd = 0.0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Mlp m = Mlp::he_init({2, 4, 3}, seed);
    RngStream r(seed, 9);
    for (auto& layer : m.layers())
      for (auto& b : layer.bias) b = 0.1 * r.gaussian();
    Matrix x = oracle::random_matrix(5, 2, r);
    Matrix u = oracle::random_matrix(5, 3, r);
    MlpGradients g = backward(m, x, u);
    auto f = [&] {
      Matrix y = m.forward(x);
      double acc = 0.0;
      for (std::size_t i = 0; i < y.size(); ++i) acc += y.values()[i] * u.values()[i];
      return acc;
    };
    auto cmp = [&](double analytic, double numeric) {
      const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-6});
      worst_fd = std::max(worst_fd, std::fabs(analytic - numeric) / denom);
    };
    for (std::size_t l = 0; l < m.num_layers(); ++l) {
      auto& layer = m.layers()[l];
      for (std::size_t i = 0; i < layer.weight.size(); ++i)
        cmp(g.layers[l].weight.values()[i], central(layer.weight.values()[i], f));
      for (std::size_t i = 0; i < layer.bias.size(); ++i) cmp(g.layers[l].bias[i], central(layer.bias[i], f));
    }
  }
  o.require(worst_fd <= 1e-4, "mlp backward worst rel " + fmt("%.2e", worst_fd));
  report(1, "oracle equivalences", o, t);
}

void gate_semantics(const Testbed& tb) {
  Timer t;
  Outcome o;
  MixtureSpec id_spec = tb.data.spec;
  id_spec.samples_per_class = 500;
  MixtureSpec cube_spec = tb.data.spec;
  cube_spec.samples_per_class = 500;
  Matrix mixed = stack(make_mixture(id_spec, 9001).inputs, make_ood_pool(cube_spec, OodKind::uniform_cube(), 9002).inputs);
  const Matrix victim_logits = tb.victim->forward(mixed);

  DefenseConfig cfg;
  cfg.p = 0.0;
  auto g0 = tb.make_gate(cfg);
  auto r0 = g0->respond_batch(mixed);
  std::size_t diff0 = 0, flagged0 = 0;
  for (std::size_t i = 0; i < mixed.rows(); ++i) {
    auto w = victim_logits.row(i);
    diff0 += r0[i].logits != std::vector<double>(w.begin(), w.end());
    flagged0 += r0[i].was_ood;
  }
  o.require(diff0 == 0, "p=0 passthrough on " + std::to_string(mixed.rows()) + " queries (" +
                            std::to_string(flagged0) + " flagged), " + std::to_string(diff0) + " differ");

  for (double p : {0.3, 0.7, 1.0}) {
    cfg.p = p;
    auto g = tb.make_gate(cfg);
    auto r = g->respond_batch(mixed);
    const Matrix emb = tb.extractor->penultimate(mixed);
    std::size_t id_count = 0, diff = 0;
    for (std::size_t i = 0; i < mixed.rows(); ++i) {
      if (maha_score(*tb.ood, emb.row(i)) > *tb.ood->t_distance) continue;
      ++id_count;
      auto w = victim_logits.row(i);
      diff += r[i].logits != std::vector<double>(w.begin(), w.end());
    }
    o.require(diff == 0, "ID fidelity p=" + fmt("%.1f", p) + " on " + std::to_string(id_count) + " queries, " +
                             std::to_string(diff) + " differ");
  }

  Timer rate_t;
  cfg.p = 0.7;
  auto g = tb.make_gate(cfg);
  Matrix far = box_corners(10000, tb.data.spec.bounds, 9003);
  std::size_t randomized = 0, flagged = 0;
  for (const auto& r : g->respond_batch(far)) {
    randomized += r.was_randomized;
    flagged += r.was_ood;
  }
  const double frac = static_cast<double>(randomized) / far.rows();
  o.require(std::fabs(frac - 0.7) <= 0.015,
            "far-OOD randomized fraction " + fmt("%.4f", frac) + " (" + std::to_string(flagged) + "/10000 flagged)");
  o.require(rate_t.wall_s() < 30.0, "rate runtime " + fmt("%.2fs", rate_t.wall_s()));
  report(2, "gate semantics", o, t);
}

void ood_quality(const Testbed& tb, const RunConfig& rc) {
  Timer t;
  Outcome o;
  MixtureSpec pool_spec = tb.data.spec;
  pool_spec.samples_per_class = rc.data.ood_pool_per_class;
  Dataset uniform = make_ood_pool(pool_spec, OodKind::uniform_cube(), 9101);
  Dataset shifted = make_ood_pool(pool_spec, OodKind::shifted_means(rc.data.ood_shift), 9102);

  auto maha_of = [&](const Matrix& x) { return maha_scores(*tb.ood, tb.extractor->penultimate(x)); };
  auto msp_of = [&](const Matrix& x) {
    Matrix probs = softmax_rows(tb.victim->forward(x));
    std::vector<double> s(probs.rows());
    for (std::size_t i = 0; i < probs.rows(); ++i) s[i] = -msp_score(probs.row(i));
    return s;
  };
  const auto id_maha = maha_of(tb.data.test.inputs);
  const auto id_msp = msp_of(tb.data.test.inputs);
  const double au_uniform = auroc(maha_of(uniform.inputs), id_maha);
  const double au_shifted = auroc(maha_of(shifted.inputs), id_maha);
  const double msp_shifted = auroc(msp_of(shifted.inputs), id_msp);
  o.require(au_uniform >= 0.95, "Mahalanobis AUROC uniform " + fmt("%.4f", au_uniform));
  o.require(au_shifted >= 0.95, "Mahalanobis AUROC shifted " + fmt("%.4f", au_shifted));
  o.require(au_shifted >= msp_shifted, "MSP AUROC shifted " + fmt("%.4f", msp_shifted));
  o.require(t.wall_s() < 120.0, "runtime " + fmt("%.1fs", t.wall_s()));
  report(3, "OOD quality", o, t);
}

struct AttackerRows {
  std::string name;
  std::map<double, SweepRow> by_p;
  double cpu_main = 0.0;  // CPU seconds of the p=0 and p=0.7 cells
};

std::vector<AttackerRows> run_sweeps(const Testbed& tb, const RunConfig& rc, bool& budget_ok, std::string& budget_detail) {
  std::vector<AttackerRows> out;
  std::size_t runs = 0;
  std::uint64_t max_used = 0;
  for (const auto& name : rc.sweep.attackers) {
    AttackerRows a;
    a.name = name;
    AttackConfig attack = rc.attack;
    std::tie(attack.method, attack.label_mode) = parse_attacker(name);
    SweepOptions opts;
    opts.workers = rc.sweep.workers;
    opts.log = [](const std::string& line) { std::fprintf(stderr, "%s\n", line.c_str()); };
    auto run = [&](std::vector<double> ps) {
      for (auto& row : sweep_p(ps, attack, rc.defense, rc.sweep.seeds, tb, opts)) {
        runs += row.seeds.size();
        max_used = std::max(max_used, row.queries_used);
        if (row.queries_used > attack.budget) budget_ok = false;
        a.by_p[row.p] = row;
      }
    };
    const std::clock_t c0 = std::clock();
    run({0.0, 0.7});
    a.cpu_main = static_cast<double>(std::clock() - c0) / CLOCKS_PER_SEC;
    run({0.3, 0.5, 1.0});
    out.push_back(std::move(a));
  }
  budget_detail = std::to_string(runs) + " runs, max queries " + std::to_string(max_used) + " of " +
                  std::to_string(rc.attack.budget);
  return out;
}

void defense_efficacy(const Testbed& tb, const std::vector<AttackerRows>& rows) {
  Timer t;
  Outcome o;
  double cpu = 0.0;
  for (const auto& a : rows) {
    const double c0 = a.by_p.at(0.0).clone_mean, c7 = a.by_p.at(0.7).clone_mean;
    o.require(c7 <= 0.5 * c0, a.name + " clone p=0 " + fmt("%.3f", c0) + " p=0.7 " + fmt("%.3f", c7));
    cpu += a.cpu_main;
  }
  const double benign = rows.front().by_p.at(0.7).benign_mean;
  o.require(tb.victim_accuracy - benign <= 0.02,
            "benign p=0.7 " + fmt("%.4f", benign) + " vs victim " + fmt("%.4f", tb.victim_accuracy));
  o.require(cpu < 900.0, "attack cpu " + fmt("%.0fs", cpu));
  report(4, "defense efficacy", o, t);
}

void sweep_shape(const std::vector<AttackerRows>& rows) {
  Timer t;
  Outcome o;
  for (const auto& a : rows) {
    std::vector<double> ps, clone;
    for (const auto& [p, row] : a.by_p) {
      ps.push_back(p);
      clone.push_back(row.clone_mean);
    }
    const double rho = spearman(ps, clone);
    const SweepRow& r7 = a.by_p.at(0.7);
    const double gap = r7.benign_mean - r7.clone_mean;
    o.require(rho <= -0.8, a.name + " spearman " + fmt("%.2f", rho));
    o.require(gap >= 0.30, a.name + " gap at p=0.7 " + fmt("%.3f", gap));
  }
  report(5, "p-sweep shape", o, t);
}

void benign_formula(const Testbed& tb) {
  Timer t;
  Outcome o;
  MixtureSpec spec = tb.data.spec;
  spec.samples_per_class = 1000;
  Dataset queries = make_mixture(spec, 9201, DatasetRole::IdTest);
  const Matrix emb = tb.extractor->penultimate(queries.inputs);
  std::size_t flagged = 0;
  for (std::size_t i = 0; i < emb.rows(); ++i) flagged += is_ood(*tb.ood, emb.row(i));
  const double fpr = static_cast<double>(flagged) / queries.size();
  const double acc = accuracy(*tb.victim, queries);
  for (double p : {0.5, 1.0}) {
    DefenseConfig cfg;
    cfg.p = p;
    cfg.label_mode = LabelMode::Hard;
    auto gate = tb.make_gate(cfg);
    const double got = benign_accuracy(*gate, queries, 1);
    const double want = expected_defended_accuracy(p, fpr, acc, queries.num_classes);
    o.require(std::fabs(got - want) <= 0.015,
              "p=" + fmt("%.1f", p) + " measured " + fmt("%.4f", got) + " formula " + fmt("%.4f", want));
  }
  o.detail += "; FPR " + fmt("%.4f", fpr);
  report(6, "benign-accuracy formula", o, t);
}

bool has_trace_key(const json& j) {
  static const char* banned[] = {"was_ood", "was_randomized", "ood", "randomized", "score", "distance", "flagged"};
  if (j.is_object()) {
    for (const auto& [k, v] : j.items()) {
      for (const char* b : banned)
        if (k == b) return true;
      if (has_trace_key(v)) return true;
    }
  } else if (j.is_array()) {
    for (const auto& v : j)
      if (has_trace_key(v)) return true;
  }
  return false;
}

void persistence_and_service(const Testbed& tb) {
  Timer t;
  Outcome o;
  const auto dir = std::filesystem::temp_directory_path() / "misguide_acceptance";
  std::filesystem::create_directories(dir);
  save_ood(*tb.ood, dir / "ood.json");
  save_model(*tb.victim, dir / "victim.json");
  save_model(*tb.extractor, dir / "extractor.json");
  OodParams ood = load_ood(dir / "ood.json");
  Mlp victim = load_model(dir / "victim.json");
  Mlp extractor = load_model(dir / "extractor.json");
  std::filesystem::remove_all(dir);

  MixtureSpec s = tb.data.spec;
  s.samples_per_class = 100;
  Matrix probe = stack(make_mixture(s, 9301).inputs, make_ood_pool(s, OodKind::uniform_cube(), 9302).inputs);
  const auto a = maha_scores(*tb.ood, tb.extractor->penultimate(probe));
  const auto b = maha_scores(ood, extractor.penultimate(probe));
  double drift = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) drift = std::max(drift, std::fabs(a[i] - b[i]));
  const Matrix la = tb.victim->forward(probe), lb = victim.forward(probe);
  double logit_drift = 0.0;
  for (std::size_t i = 0; i < la.size(); ++i) logit_drift = std::max(logit_drift, std::fabs(la.values()[i] - lb.values()[i]));
  o.require(drift <= 1e-10 && ood.t_distance == tb.ood->t_distance, "score drift " + fmt("%.2e", drift));
  o.require(logit_drift <= 1e-10, "logit drift " + fmt("%.2e", logit_drift));

  // Same request log against two fresh single-worker servers.
  std::vector<std::string> bodies;
  for (std::size_t i = 0; i < 200; i += 10) {
    json req{{"inputs", json::array()}};
    for (std::size_t k = i; k < i + 10; ++k) {
      auto r = probe.row(k);
      req["inputs"].push_back(std::vector<double>(r.begin(), r.end()));
      auto q = probe.row(probe.rows() - 1 - k);
      req["inputs"].push_back(std::vector<double>(q.begin(), q.end()));
    }
    bodies.push_back(req.dump());
  }
  auto transcript = [&](LabelMode mode) {
    DefenseConfig cfg;
    cfg.p = 0.7;
    cfg.label_mode = mode;
    cfg.consistent_responses = true;
    ServerConfig sc;
    sc.port = 0;
    sc.single_worker = true;
    sc.admin_token = "token";
    Server server(tb.make_gate(cfg), sc);
    httplib::Client cli("127.0.0.1", server.start());
    cli.set_tcp_nodelay(true);
    std::string log;
    for (const auto& body : bodies) {
      auto r = cli.Post("/v1/predict", body, "application/json");
      log += r ? std::to_string(r->status) + " " + r->body + "\n" : "transport error\n";
    }
    auto st = cli.Get("/v1/stats", httplib::Headers{{kAdminTokenHeader, "token"}});
    log += st ? st->body : "transport error";
    server.stop();
    return log;
  };
  const std::string soft1 = transcript(LabelMode::Soft), soft2 = transcript(LabelMode::Soft);
  const std::string hard1 = transcript(LabelMode::Hard), hard2 = transcript(LabelMode::Hard);
  o.require(soft1 == soft2 && hard1 == hard2 && soft1.find("transport error") == std::string::npos,
            "transcripts of " + std::to_string(bodies.size()) + " requests byte-identical");

  // Schema guard over the wire.
  DefenseConfig cfg;
  cfg.p = 0.7;
  ServerConfig sc;
  sc.port = 0;
  sc.admin_token = "token";
  Server server(tb.make_gate(cfg), sc);
  httplib::Client cli("127.0.0.1", server.start());
  cli.set_keep_alive(true);
  cli.set_tcp_nodelay(true);
  RngStream rng(9401, 0);
  const std::size_t d = tb.victim->input_dim();
  std::size_t leaks = 0, bad_status = 0, ok = 0;
  for (int i = 0; i < 10000; ++i) {
    json req = json::object();
    const std::size_t kind = rng.choice(10);
    json inputs = json::array();
    const std::size_t n = 1 + rng.choice(3);
    for (std::size_t k = 0; k < n; ++k) {
      std::vector<double> row(kind == 7 ? d + 1 : d);
      for (auto& v : row) v = rng.uniform(-8.0, 8.0);
      inputs.push_back(row);
    }
    if (kind == 8) inputs[0][0] = "x";
    if (kind != 9) req["inputs"] = inputs;
    if (rng.choice(4) == 0) req["debug"] = true;
    auto r = cli.Post("/v1/predict", req.dump(), "application/json");
    if (!r) {
      ++bad_status;
      continue;
    }
    if (r->status == 200) ++ok;
    if (r->status >= 500) ++bad_status;
    json body = json::parse(r->body, nullptr, false);
    if (body.is_discarded() || has_trace_key(body)) ++leaks;
    if (r->has_header("X-OOD") || r->has_header("X-Randomized")) ++leaks;
  }
  server.stop();
  o.require(leaks == 0 && bad_status == 0,
            "fuzz 10000 requests (" + std::to_string(ok) + " ok), " + std::to_string(leaks) + " trace leaks, " +
                std::to_string(bad_status) + " server errors");
  report(7, "persistence and service", o, t);
}

}  // namespace

int main() {
  Timer total;
  std::setvbuf(stdout, nullptr, _IOLBF, 0);
  RunConfig rc;
  oracle_equivalences();

  Timer build_t;
  const Testbed tb = build_testbed(testbed_config(rc));
  std::printf("info testbed built victim_accuracy=%.4f t_distance=%.3f (%.1fs)\n", tb.victim_accuracy,
              *tb.ood->t_distance, build_t.wall_s());

  gate_semantics(tb);
  ood_quality(tb, rc);
  benign_formula(tb);
  persistence_and_service(tb);

  Timer sweep_t;
  bool budget_ok = true;
  std::string budget_detail;
  std::vector<AttackerRows> rows;
  Outcome budget;
  try {
    rows = run_sweeps(tb, rc, budget_ok, budget_detail);
  } catch (const std::logic_error& e) {
    budget_ok = false;
    budget_detail = e.what();
  }
  if (!rows.empty()) {
    for (const auto& a : rows) {
      std::printf("info attacker=%s clone/benign:", a.name.c_str());
      for (const auto& [p, row] : a.by_p) std::printf(" p%.1f=%.3f/%.4f", p, row.clone_mean, row.benign_mean);
      std::printf("\n");
    }
    defense_efficacy(tb, rows);
    sweep_shape(rows);
    // Module invariant: every attacker loses at least 10 points at p=0.7.
    Outcome order;
    for (const auto& a : rows) {
      const double drop = a.by_p.at(0.0).clone_mean - a.by_p.at(0.7).clone_mean;
      order.require(drop >= 0.10, a.name + " drop " + fmt("%.3f", drop));
    }
    if (!order.pass) ++failures;
    std::printf("%s invariant (defended ordering): %s\n", order.pass ? "PASS" : "FAIL", order.detail.c_str());
  } else {
    Outcome none;
    none.require(false, "sweep aborted: " + budget_detail);
    report(4, "defense efficacy", none, sweep_t);
    report(5, "p-sweep shape", none, sweep_t);
  }
  budget.require(budget_ok, budget_detail);
  report(8, "budget integrity", budget, sweep_t);

  std::printf("\nsummary\n");
  for (const auto& [id, line] : summary) std::printf("%s\n", line.c_str());
  std::printf("%s: %d criteria failed (%.0fs total)\n", failures == 0 ? "ALL PASS" : "SOME FAILED", failures,
              total.wall_s());
  return failures == 0 ? 0 : 1;
}
