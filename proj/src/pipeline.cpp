#include "misguide/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

#include "misguide/errors.hpp"
#include "misguide/evalkit.hpp"
#include "misguide/io.hpp"
#include "misguide/rng.hpp"

namespace misguide {

namespace {
using nlohmann::json;
using ojson = nlohmann::ordered_json;

enum : std::uint64_t {
  kSeedUniformPool = 0x55AA01,
  kSeedShiftedPool = 0x55AA02,
  kSeedCsvSurrogate = 0x55AA03,
};

const std::map<std::string, std::string>& producers() {
  static const std::map<std::string, std::string> m{
      {artifact::kDataSpec, "gen-data"},         {artifact::kTrain, "gen-data"},
      {artifact::kTest, "gen-data"},             {artifact::kSurrogate, "gen-data"},
      {artifact::kOodUniform, "gen-data"},       {artifact::kOodShifted, "gen-data"},
      {artifact::kVictim, "train-victim"},       {artifact::kExtractor, "train-extractor"},
      {artifact::kOod, "fit-ood"},               {artifact::kClone, "attack"},
      {artifact::kAttackReport, "attack"},       {artifact::kSweepJson, "sweep"},
      {artifact::kSweepCsv, "sweep"},            {artifact::kReport, "report"},
  };
  return m;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t hash_text(const std::string& s) {
  return hash_bytes(std::span(reinterpret_cast<const unsigned char*>(s.data()), s.size()));
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

json spec_to_json(const MixtureSpec& s) {
  return json{{"num_classes", s.num_classes},
              {"dim", s.dim},
              {"means", s.means},
              {"scales", s.scales},
              {"samples_per_class", s.samples_per_class},
              {"bounds", {{"lo", s.bounds.lo}, {"hi", s.bounds.hi}}},
              {"heldout_means", s.heldout_means}};
}

MixtureSpec spec_from_json(const std::string& text) {
  try {
    auto j = json::parse(text);
    MixtureSpec s;
    s.num_classes = j.at("num_classes").get<std::size_t>();
    s.dim = j.at("dim").get<std::size_t>();
    s.means = j.at("means").get<std::vector<std::vector<double>>>();
    s.scales = j.at("scales").get<std::vector<double>>();
    s.samples_per_class = j.at("samples_per_class").get<std::size_t>();
    s.bounds.lo = j.at("bounds").at("lo").get<std::vector<double>>();
    s.bounds.hi = j.at("bounds").at("hi").get<std::vector<double>>();
    s.heldout_means = j.at("heldout_means").get<std::vector<std::vector<double>>>();
    s.validate();
    return s;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed data spec: ") + e.what());
  }
}

// Summary mixture for externally supplied embeddings: class means, pooled
// per-class spread, and the observed range widened by 10% on each side.
MixtureSpec spec_from_data(const Dataset& train, std::size_t per_class) {
  const std::size_t d = train.dim();
  const std::size_t C = train.num_classes;
  MixtureSpec s;
  s.num_classes = C;
  s.dim = d;
  s.samples_per_class = per_class;
  s.means.assign(C, std::vector<double>(d, 0.0));
  std::vector<double> sq(C, 0.0);
  auto counts = train.class_counts();
  for (std::size_t i = 0; i < train.size(); ++i) {
    auto row = train.inputs.row(i);
    auto c = static_cast<std::size_t>(train.labels[i]);
    for (std::size_t k = 0; k < d; ++k) s.means[c][k] += row[k] / static_cast<double>(counts[c]);
  }
  for (std::size_t i = 0; i < train.size(); ++i) {
    auto row = train.inputs.row(i);
    auto c = static_cast<std::size_t>(train.labels[i]);
    for (std::size_t k = 0; k < d; ++k) sq[c] += (row[k] - s.means[c][k]) * (row[k] - s.means[c][k]);
  }
  for (std::size_t c = 0; c < C; ++c) {
    s.scales.push_back(std::sqrt(sq[c] / static_cast<double>(std::max<std::size_t>(1, counts[c]) * d)));
    if (!(s.scales.back() > 0.0)) s.scales.back() = 1.0;
  }
  s.bounds.lo.assign(d, 0.0);
  s.bounds.hi.assign(d, 0.0);
  for (std::size_t k = 0; k < d; ++k) {
    double lo = train.inputs(0, k), hi = lo;
    for (std::size_t i = 1; i < train.size(); ++i) {
      lo = std::min(lo, train.inputs(i, k));
      hi = std::max(hi, train.inputs(i, k));
    }
    const double pad = hi > lo ? 0.1 * (hi - lo) : 1.0;
    s.bounds.lo[k] = lo - pad;
    s.bounds.hi[k] = hi + pad;
  }
  return s;
}

MixtureSpec load_spec(const RunDir& run) { return spec_from_json(read_file(run.require(artifact::kDataSpec))); }

Testbed load_testbed(const RunDir& run) {
  Testbed tb;
  tb.data.spec = load_spec(run);
  tb.data.train = load_table(run.require(artifact::kTrain), DatasetRole::IdTrain);
  tb.data.test = load_table(run.require(artifact::kTest), DatasetRole::IdTest);
  tb.data.test.num_classes = tb.data.spec.num_classes;
  tb.data.surrogate = load_table(run.require(artifact::kSurrogate), DatasetRole::OodPool);
  tb.victim = std::make_shared<const Mlp>(load_model(run.require(artifact::kVictim)));
  tb.extractor = std::make_shared<const Mlp>(load_model(run.require(artifact::kExtractor)));
  auto ood = load_ood(run.require(artifact::kOod));
  if (!ood.calibrated()) {
    throw NotCalibrated(run.path(artifact::kOod).string() + " has no threshold yet (run calibrate)");
  }
  tb.ood = std::make_shared<const OodParams>(std::move(ood));
  tb.victim_accuracy = accuracy(*tb.victim, tb.data.test);
  return tb;
}

void save_json(RunDir& run, const std::string& name, const std::string& text, const std::string& producer) {
  write_file_atomic(run.path(name), text);
  run.record(name, producer);
}

void save_dataset(RunDir& run, const std::string& name, const Dataset& ds) {
  save_json(run, name, format_table(ds), "gen-data");
}
}  // namespace

std::uint64_t config_hash(const RunConfig& cfg) { return hash_text(effective_config_text(cfg)); }

RunDir::RunDir(std::filesystem::path dir, RunConfig cfg, Logger log)
    : dir_(std::move(dir)), cfg_(std::move(cfg)), log_(std::move(log)) {
  std::error_code ec;
  std::filesystem::create_directories(dir_, ec);
  if (ec) throw IoError("cannot create run directory " + dir_.string() + ": " + ec.message());

  const std::string hash = hex64(config_hash(cfg_));
  manifest_ = ojson{{"tool_version", kToolVersion}, {"config_hash", hash}, {"artifacts", json::object()}};
  if (std::filesystem::exists(path(artifact::kManifest))) {
    auto old = json::parse(read_file(path(artifact::kManifest)), nullptr, false);
    if (!old.is_discarded() && old.value("config_hash", "") == hash && old.contains("artifacts")) {
      manifest_["artifacts"] = old["artifacts"];
    } else {
      this->log("warn event=manifest_reset reason=config_changed dir=" + dir_.string());
    }
  }
  write_file_atomic(path(artifact::kConfig), effective_config_text(cfg_));
  write_manifest();
}

std::filesystem::path RunDir::require(const std::string& name) const {
  auto p = path(name);
  if (!std::filesystem::is_regular_file(p)) {
    auto it = producers().find(name);
    std::string hint = it == producers().end() ? "" : " (run " + it->second + " first)";
    throw MissingArtifact("missing artifact " + p.string() + hint);
  }
  return p;
}

void RunDir::record(const std::string& name, const std::string& producer) {
  // Sorted keys keep the manifest independent of step order.
  json artifacts = manifest_["artifacts"];
  artifacts[name] = json{{"producer", producer}, {"fnv1a64", hex64(hash_text(read_file(path(name))))}};
  manifest_["artifacts"] = artifacts;
  write_manifest();
  log("info event=artifact name=" + name + " producer=" + producer);
}

void RunDir::log(const std::string& line) const {
  if (log_) log_(line);
}

void RunDir::write_manifest() const { write_file_atomic(path(artifact::kManifest), manifest_.dump(2) + "\n"); }

void gen_data(RunDir& run) {
  const RunConfig& cfg = run.config();
  TestbedData d;
  if (cfg.data.train_csv.empty()) {
    d = make_testbed_data(testbed_config(cfg));
  } else {
    d.train = load_table(cfg.data.train_csv, DatasetRole::IdTrain);
    d.test = load_table(cfg.data.test_csv, DatasetRole::IdTest);
    if (d.test.num_classes > d.train.num_classes) throw FormatError("test labels exceed the training label range");
    if (d.test.dim() != d.train.dim()) throw DimensionMismatch("train and test tables have different widths");
    d.test.num_classes = d.train.num_classes;
    d.spec = spec_from_data(d.train, cfg.data.train_per_class);
    if (cfg.data.surrogate_csv.empty()) {
      MixtureSpec s = d.spec;
      s.samples_per_class = cfg.data.surrogate_per_class;
      d.surrogate = make_ood_pool(s, OodKind::shifted_means(cfg.data.surrogate_offset), cfg.seed ^ kSeedCsvSurrogate);
    } else {
      d.surrogate = load_table(cfg.data.surrogate_csv, DatasetRole::OodPool);
      if (d.surrogate.dim() != d.train.dim()) throw DimensionMismatch("surrogate table width differs from train");
    }
  }
  MixtureSpec pool_spec = d.spec;
  pool_spec.samples_per_class = cfg.data.ood_pool_per_class;
  Dataset uniform = make_ood_pool(pool_spec, OodKind::uniform_cube(), cfg.seed ^ kSeedUniformPool);
  Dataset shifted = make_ood_pool(pool_spec, OodKind::shifted_means(cfg.data.ood_shift), cfg.seed ^ kSeedShiftedPool);

  save_json(run, artifact::kDataSpec, spec_to_json(d.spec).dump(2) + "\n", "gen-data");
  save_dataset(run, artifact::kTrain, d.train);
  save_dataset(run, artifact::kTest, d.test);
  save_dataset(run, artifact::kSurrogate, d.surrogate);
  save_dataset(run, artifact::kOodUniform, uniform);
  save_dataset(run, artifact::kOodShifted, shifted);
  run.log("info event=gen-data classes=" + std::to_string(d.spec.num_classes) + " dim=" +
          std::to_string(d.spec.dim) + " train=" + std::to_string(d.train.size()) +
          " test=" + std::to_string(d.test.size()) + " surrogate=" + std::to_string(d.surrogate.size()));
}

void train_victim_step(RunDir& run) {
  Dataset train = load_table(run.require(artifact::kTrain), DatasetRole::IdTrain);
  Mlp victim = train_victim(train, testbed_config(run.config()));
  save_json(run, artifact::kVictim, model_to_json(victim), "train-victim");
  Dataset test = load_table(run.require(artifact::kTest), DatasetRole::IdTest);
  run.log("info event=train-victim test_accuracy=" + fmt(accuracy(victim, test)));
}

void train_extractor_step(RunDir& run) {
  MixtureSpec spec = load_spec(run);
  Dataset train = load_table(run.require(artifact::kTrain), DatasetRole::IdTrain);
  Mlp extractor = train_extractor(spec, train, testbed_config(run.config()));
  save_json(run, artifact::kExtractor, model_to_json(extractor), "train-extractor");
  run.log("info event=train-extractor outputs=" + std::to_string(extractor.output_dim()));
}

void fit_ood_step(RunDir& run) {
  Mlp extractor = load_model(run.require(artifact::kExtractor));
  Dataset train = load_table(run.require(artifact::kTrain), DatasetRole::IdTrain);
  const TestbedConfig tc = testbed_config(run.config());
  auto [fit_set, calib_set] = calibration_split(train, tc);
  OodParams p = fit_ood_params(extractor, fit_set, tc);
  save_json(run, artifact::kOod, ood_to_json(p), "fit-ood");
  run.log("info event=fit-ood fit_rows=" + std::to_string(fit_set.size()) + " embed_dim=" + std::to_string(p.dim));
}

void calibrate_step(RunDir& run) {
  OodParams p = load_ood(run.require(artifact::kOod));
  Mlp extractor = load_model(run.require(artifact::kExtractor));
  Dataset train = load_table(run.require(artifact::kTrain), DatasetRole::IdTrain);
  const TestbedConfig tc = testbed_config(run.config());
  auto calib_set = calibration_split(train, tc).second;
  p = calibrate(std::move(p), extractor.penultimate(calib_set.inputs), tc.percentile);
  save_json(run, artifact::kOod, ood_to_json(p), "calibrate");
  run.log("info event=calibrate calib_rows=" + std::to_string(calib_set.size()) +
          " percentile=" + fmt(tc.percentile) + " t_distance=" + fmt(*p.t_distance));
}

void attack_step(RunDir& run) {
  const RunConfig& cfg = run.config();
  Testbed tb = load_testbed(run);
  DefenseConfig dc = cfg.defense;
  dc.label_mode = cfg.attack.label_mode;
  Oracle oracle(tb.make_gate(dc), cfg.attack.budget, tb.data.spec.bounds);
  CloneReport report = run_attack(oracle, cfg.attack, &tb.data.surrogate, &tb.data.test);
  if (report.queries_used > cfg.attack.budget) throw std::logic_error("attack exceeded its query budget");
  save_json(run, artifact::kClone, model_to_json(report.clone), "attack");
  save_json(run, artifact::kAttackReport, report_to_json(report), "attack");
  run.log("info event=attack method=" + to_string(cfg.attack.method) + " mode=" + to_string(cfg.attack.label_mode) +
          " p=" + fmt(dc.p) + " queries=" + std::to_string(report.queries_used) +
          " clone_accuracy=" + fmt(clone_accuracy(report.clone, tb.data.test)) +
          " victim_accuracy=" + fmt(tb.victim_accuracy));
}

void sweep_step(RunDir& run) {
  const RunConfig& cfg = run.config();
  Testbed tb = load_testbed(run);
  SweepOptions opts;
  opts.workers = cfg.sweep.workers;
  opts.log = [&run](const std::string& line) { run.log(line); };
  std::vector<SweepRow> rows;
  for (const auto& name : cfg.sweep.attackers) {
    AttackConfig ac = cfg.attack;
    std::tie(ac.method, ac.label_mode) = parse_attacker(name);
    auto part = sweep_p(cfg.sweep.p_values, ac, cfg.defense, cfg.sweep.seeds, tb, opts);
    rows.insert(rows.end(), part.begin(), part.end());
  }
  emit_report(rows, run.path(artifact::kSweepCsv), ReportFormat::Csv);
  run.record(artifact::kSweepCsv, "sweep");
  emit_report(rows, run.path(artifact::kSweepJson), ReportFormat::Json);
  run.record(artifact::kSweepJson, "sweep");
}

void report_step(RunDir& run) {
  const RunConfig& cfg = run.config();
  Testbed tb = load_testbed(run);
  const double t = *tb.ood->t_distance;

  auto id_scores = maha_scores(*tb.ood, tb.extractor->penultimate(tb.data.test.inputs));
  std::size_t fp = 0;
  for (double s : id_scores) fp += s > t;
  const double fpr = static_cast<double>(fp) / static_cast<double>(id_scores.size());

  auto msp_of = [&](const Matrix& x) {
    auto probs = softmax_rows(tb.victim->forward(x));
    std::vector<double> out;
    for (std::size_t i = 0; i < probs.rows(); ++i) out.push_back(-msp_score(probs.row(i)));
    return out;
  };
  const auto msp_id = msp_of(tb.data.test.inputs);

  ojson j;
  j["format_version"] = 1;
  j["victim_accuracy"] = tb.victim_accuracy;
  j["t_distance"] = t;
  j["id_false_positive_rate"] = fpr;
  run.log("info event=report victim_accuracy=" + fmt(tb.victim_accuracy) + " t_distance=" + fmt(t) +
          " id_fpr=" + fmt(fpr));

  ojson pools = ojson::array();
  for (const auto& [name, file] : {std::pair{"uniform", artifact::kOodUniform}, {"shifted", artifact::kOodShifted}}) {
    Dataset pool = load_table(run.require(file), DatasetRole::OodPool);
    auto sc = maha_scores(*tb.ood, tb.extractor->penultimate(pool.inputs));
    std::size_t flagged = 0;
    for (double s : sc) flagged += s > t;
    const double maha = auroc(sc, id_scores);
    const double msp = auroc(msp_of(pool.inputs), msp_id);
    const double rate = static_cast<double>(flagged) / static_cast<double>(sc.size());
    pools.push_back(ojson{{"pool", name}, {"mahalanobis_auroc", maha}, {"msp_auroc", msp}, {"flagged_fraction", rate}});
    run.log(std::string("info event=report_ood pool=") + name + " mahalanobis_auroc=" + fmt(maha) +
            " msp_auroc=" + fmt(msp) + " flagged=" + fmt(rate));
  }
  j["ood_pools"] = pools;

  DefenseConfig dc = cfg.defense;
  dc.label_mode = LabelMode::Hard;
  auto gate = tb.make_gate(dc);
  const double benign = benign_accuracy(*gate, tb.data.test, dc.master_seed);
  const double expected = expected_defended_accuracy(dc.p, fpr, tb.victim_accuracy, tb.data.spec.num_classes);
  j["defense_p"] = dc.p;
  j["benign_accuracy"] = benign;
  j["benign_accuracy_expected"] = expected;
  run.log("info event=report_benign p=" + fmt(dc.p) + " benign_accuracy=" + fmt(benign) + " expected=" + fmt(expected));

  const double threshold = cfg.sweep.benign_threshold_fraction * tb.victim_accuracy;
  j["benign_threshold"] = threshold;
  if (std::filesystem::is_regular_file(run.path(artifact::kSweepJson))) {
    auto rows = parse_report_json(read_file(run.path(artifact::kSweepJson)));
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> curves;
    ojson out_rows = ojson::array();
    for (const auto& r : rows) {
      const std::string who = to_string(r.method) + "-" + to_string(r.label_mode);
      curves[who].first.push_back(r.p);
      curves[who].second.push_back(r.clone_mean);
      const bool ok = meets_benign_threshold(r, threshold);
      out_rows.push_back(ojson{{"attacker", who},
                               {"p", r.p},
                               {"clone_mean", r.clone_mean},
                               {"benign_mean", r.benign_mean},
                               {"benign_ok", ok}});
      if (!ok) run.log("warn event=benign_below_threshold attacker=" + who + " p=" + fmt(r.p));
    }
    ojson shape = ojson::object();
    for (const auto& [who, xy] : curves) {
      if (xy.first.size() < 2) continue;
      const double rho = spearman(xy.first, xy.second);
      shape[who] = rho;
      run.log("info event=report_sweep attacker=" + who + " spearman_p_clone=" + fmt(rho));
    }
    j["sweep_rows"] = out_rows;
    j["sweep_spearman"] = shape;
  }
  save_json(run, artifact::kReport, j.dump(2) + "\n", "report");
}

std::unique_ptr<Server> make_server(RunDir& run) {
  Testbed tb = load_testbed(run);
  return std::make_unique<Server>(tb.make_gate(run.config().defense), run.config().serve);
}

}  // namespace misguide
