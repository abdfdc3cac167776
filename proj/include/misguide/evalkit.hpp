#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "misguide/attack.hpp"
#include "misguide/datagen.hpp"
#include "misguide/gate.hpp"
#include "misguide/nets.hpp"
#include "misguide/testbed.hpp"

namespace misguide {

/// Fraction of samples where the clone's argmax equals the true label.
double clone_accuracy(const Mlp& clone, const Dataset& victim_test);

/// Hard-label accuracy of the gate's responses on ID data, including any
/// misguided false positives. The seed fixes the query order.
double benign_accuracy(Gate& gate, const Dataset& id_test, std::uint64_t seed);

// Analytic expectation of benign_accuracy given the ID false-positive rate.
double expected_defended_accuracy(double p, double fpr, double victim_accuracy, std::size_t num_classes);

struct SweepRow {
  double p = 0.0;
  AttackMethod method = AttackMethod::Dfme;
  LabelMode label_mode = LabelMode::Soft;
  std::vector<std::uint64_t> seeds;
  double clone_mean = 0.0;
  double clone_std = 0.0;
  double benign_mean = 0.0;
  double benign_std = 0.0;
  std::uint64_t queries_used = 0;  // max over seeds
  std::vector<double> clone_per_seed;
  std::vector<double> benign_per_seed;

  friend bool operator==(const SweepRow&, const SweepRow&) = default;
};

struct SweepOptions {
  unsigned workers = 1;
  // Receives one line per notable event (e.g. dropped duplicate p values).
  std::function<void(const std::string&)> log;
};

/// One fresh gate and one fresh attack per (p, seed); rows sorted by p.
/// Every run is checked against the query budget.
std::vector<SweepRow> sweep_p(std::vector<double> p_values, const AttackConfig& attack, const DefenseConfig& defense,
                              const std::vector<std::uint64_t>& seeds, const Testbed& testbed,
                              const SweepOptions& options = {});

// Sample mean and standard deviation (n - 1 divisor; 0 for a single value).
std::pair<double, double> mean_std(const std::vector<double>& v);
double spearman(const std::vector<double>& x, const std::vector<double>& y);

// Benign accuracy must stay at or above the threshold (usually 0.9 of the victim's).
bool meets_benign_threshold(const SweepRow& row, double threshold);

enum class ReportFormat { Csv, Json };

std::string format_report(const std::vector<SweepRow>& rows, ReportFormat format);
void emit_report(const std::vector<SweepRow>& rows, const std::filesystem::path& path, ReportFormat format);
std::vector<SweepRow> parse_report_json(const std::string& text);

}  // namespace misguide
