#include "misguide/evalkit.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <mutex>
#include <numeric>
#include <stdexcept>
#include <thread>

#include <json.hpp>

#include "misguide/errors.hpp"
#include "misguide/io.hpp"
#include "misguide/rng.hpp"

namespace misguide {

namespace {
constexpr int kSweepFormatVersion = 1;

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i + 1;
    while (j < idx.size() && v[idx[j]] == v[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) ranks[idx[k]] = r;
    i = j;
  }
  return ranks;
}

struct CellResult {
  double clone = 0.0;
  double benign = 0.0;
  std::uint64_t queries = 0;
};
}  // namespace

double clone_accuracy(const Mlp& clone, const Dataset& victim_test) {
  if (victim_test.size() == 0) throw EmptyDataset("clone_accuracy on empty test set");
  if (victim_test.dim() != clone.input_dim()) throw DimensionMismatch("clone input dim does not match test set");
  return accuracy(clone, victim_test);
}

double benign_accuracy(Gate& gate, const Dataset& id_test, std::uint64_t seed) {
  if (id_test.size() == 0) throw EmptyDataset("benign_accuracy on empty test set");
  std::vector<std::size_t> order(id_test.size());
  std::iota(order.begin(), order.end(), 0);
  RngStream rng(seed, 0xBE9);
  rng.shuffle(std::span<std::size_t>(order));
  auto responses = gate.respond_batch(id_test.inputs.gather_rows(order));
  std::size_t hit = 0;
  for (std::size_t i = 0; i < order.size(); ++i) hit += responses[i].label == id_test.labels[order[i]];
  return static_cast<double>(hit) / static_cast<double>(order.size());
}

double expected_defended_accuracy(double p, double fpr, double victim_accuracy, std::size_t num_classes) {
  return (1.0 - p * fpr) * victim_accuracy + p * fpr / static_cast<double>(num_classes);
}

std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("spearman needs two equal-length lists (n >= 2)");
  auto rx = average_ranks(x);
  auto ry = average_ranks(y);
  auto [mx, sx] = mean_std(rx);
  auto [my, sy] = mean_std(ry);
  if (sx == 0.0 || sy == 0.0) return 0.0;
  double cov = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) cov += (rx[i] - mx) * (ry[i] - my);
  cov /= static_cast<double>(rx.size() - 1);
  return cov / (sx * sy);
}

bool meets_benign_threshold(const SweepRow& row, double threshold) { return row.benign_mean >= threshold; }

std::vector<SweepRow> sweep_p(std::vector<double> p_values, const AttackConfig& attack, const DefenseConfig& defense,
                              const std::vector<std::uint64_t>& seeds, const Testbed& testbed,
                              const SweepOptions& options) {
  if (seeds.empty()) throw std::invalid_argument("sweep needs at least one seed");
  if (p_values.empty()) throw std::invalid_argument("sweep needs at least one p value");
  for (double p : p_values)
    if (!(p >= 0.0 && p <= 1.0)) throw OutOfRange("sweep p values must lie in [0, 1]");
  attack.validate();

  std::sort(p_values.begin(), p_values.end());
  const std::size_t before = p_values.size();
  p_values.erase(std::unique(p_values.begin(), p_values.end()), p_values.end());
  if (p_values.size() != before && options.log) {
    options.log("warn event=sweep_duplicate_p dropped=" + std::to_string(before - p_values.size()));
  }

  const std::size_t n_cells = p_values.size() * seeds.size();
  std::vector<CellResult> cells(n_cells);
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;

  auto run_cell = [&](std::size_t k) {
    const double p = p_values[k / seeds.size()];
    const std::uint64_t seed = seeds[k % seeds.size()];
    DefenseConfig dc = defense;
    dc.p = p;
    dc.label_mode = attack.label_mode;
    dc.master_seed = mix64(defense.master_seed ^ mix64(seed));
    AttackConfig ac = attack;
    ac.seed = seed;

    auto gate = testbed.make_gate(dc);
    Oracle oracle(gate, ac.budget, testbed.data.spec.bounds);
    CloneReport report = run_attack(oracle, ac, &testbed.data.surrogate, &testbed.data.test);
    if (report.queries_used > ac.budget || oracle.used() > ac.budget) {
      throw std::logic_error("attack exceeded its query budget");
    }
    auto benign_gate = testbed.make_gate(dc);
    cells[k] = {clone_accuracy(report.clone, testbed.data.test), benign_accuracy(*benign_gate, testbed.data.test, seed),
                report.queries_used};
    if (options.log) {
      char buf[200];
      std::snprintf(buf, sizeof buf, "info event=sweep_cell method=%s mode=%s p=%.3g seed=%llu clone=%.4f benign=%.4f",
                    to_string(ac.method).c_str(), to_string(ac.label_mode).c_str(), p,
                    static_cast<unsigned long long>(seed), cells[k].clone, cells[k].benign);
      options.log(buf);
    }
  };

  auto worker = [&] {
    for (std::size_t k = next.fetch_add(1); k < n_cells; k = next.fetch_add(1)) {
      try {
        run_cell(k);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const unsigned workers = std::max(1u, std::min<unsigned>(options.workers, static_cast<unsigned>(n_cells)));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  std::vector<SweepRow> rows;
  for (std::size_t i = 0; i < p_values.size(); ++i) {
    SweepRow row;
    row.p = p_values[i];
    row.method = attack.method;
    row.label_mode = attack.label_mode;
    row.seeds = seeds;
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      const auto& c = cells[i * seeds.size() + s];
      row.clone_per_seed.push_back(c.clone);
      row.benign_per_seed.push_back(c.benign);
      row.queries_used = std::max(row.queries_used, c.queries);
    }
    std::tie(row.clone_mean, row.clone_std) = mean_std(row.clone_per_seed);
    std::tie(row.benign_mean, row.benign_std) = mean_std(row.benign_per_seed);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string format_report(const std::vector<SweepRow>& rows, ReportFormat format) {
  if (rows.empty()) throw EmptyInput("refusing to emit an empty report");
  if (format == ReportFormat::Csv) {
    std::string out = "p,method,mode,seeds,clone_mean,clone_std,benign_mean,benign_std,queries\n";
    char buf[64];
    auto num = [&](double v) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      return std::string(buf);
    };
    for (const auto& r : rows) {
      std::string seeds;
      for (std::size_t i = 0; i < r.seeds.size(); ++i) seeds += (i ? ";" : "") + std::to_string(r.seeds[i]);
      out += num(r.p) + "," + to_string(r.method) + "," + to_string(r.label_mode) + "," + seeds + "," +
             num(r.clone_mean) + "," + num(r.clone_std) + "," + num(r.benign_mean) + "," + num(r.benign_std) + "," +
             std::to_string(r.queries_used) + "\n";
    }
    return out;
  }
  nlohmann::ordered_json j;
  j["format_version"] = kSweepFormatVersion;
  auto& arr = j["rows"] = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json o;
    o["p"] = r.p;
    o["method"] = to_string(r.method);
    o["mode"] = to_string(r.label_mode);
    o["seeds"] = r.seeds;
    o["clone_mean"] = r.clone_mean;
    o["clone_std"] = r.clone_std;
    o["benign_mean"] = r.benign_mean;
    o["benign_std"] = r.benign_std;
    o["queries"] = r.queries_used;
    o["clone_per_seed"] = r.clone_per_seed;
    o["benign_per_seed"] = r.benign_per_seed;
    arr.push_back(std::move(o));
  }
  return j.dump(2) + "\n";
}

void emit_report(const std::vector<SweepRow>& rows, const std::filesystem::path& path, ReportFormat format) {
  write_file_atomic(path, format_report(rows, format));
}

std::vector<SweepRow> parse_report_json(const std::string& text) {
  try {
    auto j = nlohmann::json::parse(text);
    if (j.at("format_version").get<int>() != kSweepFormatVersion) throw FormatError("unsupported sweep format_version");
    std::vector<SweepRow> rows;
    for (const auto& o : j.at("rows")) {
      SweepRow r;
      r.p = o.at("p").get<double>();
      r.method = attack_method_from_string(o.at("method").get<std::string>());
      r.label_mode = label_mode_from_string(o.at("mode").get<std::string>());
      r.seeds = o.at("seeds").get<std::vector<std::uint64_t>>();
      r.clone_mean = o.at("clone_mean").get<double>();
      r.clone_std = o.at("clone_std").get<double>();
      r.benign_mean = o.at("benign_mean").get<double>();
      r.benign_std = o.at("benign_std").get<double>();
      r.queries_used = o.at("queries").get<std::uint64_t>();
      r.clone_per_seed = o.value("clone_per_seed", std::vector<double>{});
      r.benign_per_seed = o.value("benign_per_seed", std::vector<double>{});
      rows.push_back(std::move(r));
    }
    return rows;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed sweep report: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("malformed sweep report: ") + e.what());
  }
}

}  // namespace misguide
