#include "misguide/datagen.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "misguide/errors.hpp"
#include "misguide/io.hpp"
#include "misguide/rng.hpp"

namespace misguide {

namespace {

enum : std::uint64_t {
  kStreamMeans = 1,
  kStreamHeldout = 2,
  kStreamSamples = 3,
  kStreamShift = 4,
  kStreamSplit = 5,
};

double clamp_to(double v, double lo, double hi) { return std::min(std::max(v, lo), hi); }

void draw_component(const std::vector<double>& mean, double scale, const Bounds& bounds,
                    RngStream& rng, std::span<double> out) {
  for (std::size_t j = 0; j < out.size(); ++j) {
    out[j] = clamp_to(mean[j] + scale * rng.gaussian(), bounds.lo[j], bounds.hi[j]);
  }
}

}  // namespace

std::string to_string(DatasetRole role) {
  switch (role) {
    case DatasetRole::IdTrain: return "id_train";
    case DatasetRole::IdTest: return "id_test";
    case DatasetRole::OodPool: return "ood_pool";
  }
  return "unknown";
}

Bounds Bounds::uniform(std::size_t dim, double lo, double hi) {
  return Bounds{std::vector<double>(dim, lo), std::vector<double>(dim, hi)};
}

void MixtureSpec::validate() const {
  if (num_classes < 2) throw InvalidSpec("num_classes must be >= 2");
  if (dim < 2) throw InvalidSpec("dim must be >= 2");
  if (means.size() != num_classes) throw InvalidSpec("need one mean per class");
  if (scales.size() != num_classes) throw InvalidSpec("need one scale per class");
  if (bounds.lo.size() != dim || bounds.hi.size() != dim) throw InvalidSpec("bounds must have dim entries");
  for (std::size_t j = 0; j < dim; ++j)
    if (!(bounds.lo[j] < bounds.hi[j])) throw InvalidSpec("bounds must satisfy lo < hi");
  auto check_mean = [&](const std::vector<double>& m) {
    if (m.size() != dim) throw InvalidSpec("mean has wrong dimension");
    for (std::size_t j = 0; j < dim; ++j)
      if (!(m[j] >= bounds.lo[j] && m[j] <= bounds.hi[j])) throw InvalidSpec("mean outside bounds");
  };
  for (const auto& m : means) check_mean(m);
  for (const auto& m : heldout_means) check_mean(m);
  for (double s : scales)
    if (!(s > 0.0)) throw InvalidSpec("scales must be positive");
}

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(num_classes, 0);
  for (int y : labels) counts.at(static_cast<std::size_t>(y))++;
  return counts;
}

std::vector<std::vector<double>> sphere_means(std::size_t count, std::size_t dim, double radius,
                                              std::uint64_t seed, std::uint64_t stream) {
  RngStream rng(seed, stream);
  std::vector<std::vector<double>> means(count, std::vector<double>(dim));
  for (auto& m : means) {
    for (auto& v : m) v = rng.gaussian();
    const double n = norm2(m);
    for (auto& v : m) v *= radius / n;
  }
  return means;
}

MixtureSpec synth10_spec(std::uint64_t seed, std::size_t samples_per_class, double bound) {
  MixtureSpec spec;
  spec.num_classes = 10;
  spec.dim = 32;
  spec.means = sphere_means(10, 32, 5.0, seed, kStreamMeans);
  spec.heldout_means = sphere_means(3, 32, 5.0, seed, kStreamHeldout);
  spec.scales.assign(10, 1.0);
  spec.samples_per_class = samples_per_class;
  spec.bounds = Bounds::uniform(32, -bound, bound);
  return spec;
}

Dataset make_mixture(const MixtureSpec& spec, std::uint64_t seed, DatasetRole role) {
  spec.validate();
  const std::size_t n = spec.num_classes * spec.samples_per_class;
  Dataset ds{Matrix(n, spec.dim), std::vector<int>(n), spec.num_classes, role};
  RngStream rng(seed, kStreamSamples);
  std::size_t i = 0;
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    for (std::size_t k = 0; k < spec.samples_per_class; ++k, ++i) {
      draw_component(spec.means[c], spec.scales[c], spec.bounds, rng, ds.inputs.row(i));
      ds.labels[i] = static_cast<int>(c);
    }
  }
  return ds;
}

Dataset make_ood_pool(const MixtureSpec& spec, const OodKind& kind, std::uint64_t seed) {
  spec.validate();
  const std::size_t d = spec.dim;
  RngStream rng(seed, kStreamSamples);
  Dataset ds;
  ds.role = DatasetRole::OodPool;
  ds.num_classes = spec.num_classes;

  switch (kind.type) {
    case OodKind::Type::UniformCube: {
      const std::size_t n = spec.num_classes * spec.samples_per_class;
      ds.inputs = Matrix(n, d);
      ds.labels.assign(n, 0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) ds.inputs(i, j) = rng.uniform(spec.bounds.lo[j], spec.bounds.hi[j]);
      break;
    }
    case OodKind::Type::ShiftedMeans: {
      if (!(kind.offset > 0.0)) throw InvalidSpec("shifted_means offset must be positive");
      double mean_scale = 0.0;
      for (double s : spec.scales) mean_scale += s / static_cast<double>(spec.scales.size());
      // One shared shift direction for all classes.
      auto dir = sphere_means(1, d, kind.offset * mean_scale, seed, kStreamShift).front();
      const std::size_t n = spec.num_classes * spec.samples_per_class;
      ds.inputs = Matrix(n, d);
      ds.labels.resize(n);
      std::size_t i = 0;
      for (std::size_t c = 0; c < spec.num_classes; ++c) {
        std::vector<double> mean = spec.means[c];
        for (std::size_t j = 0; j < d; ++j) mean[j] += dir[j];
        for (std::size_t k = 0; k < spec.samples_per_class; ++k, ++i) {
          draw_component(mean, spec.scales[c], spec.bounds, rng, ds.inputs.row(i));
          ds.labels[i] = static_cast<int>(c);
        }
      }
      break;
    }
    case OodKind::Type::HeldoutClasses: {
      if (spec.heldout_means.empty()) throw InvalidSpec("heldout_classes requires reserved classes");
      double mean_scale = 0.0;
      for (double s : spec.scales) mean_scale += s / static_cast<double>(spec.scales.size());
      const std::size_t h = spec.heldout_means.size();
      const std::size_t n = h * spec.samples_per_class;
      ds.inputs = Matrix(n, d);
      ds.labels.resize(n);
      ds.num_classes = h;
      std::size_t i = 0;
      for (std::size_t c = 0; c < h; ++c) {
        for (std::size_t k = 0; k < spec.samples_per_class; ++k, ++i) {
          draw_component(spec.heldout_means[c], mean_scale, spec.bounds, rng, ds.inputs.row(i));
          ds.labels[i] = static_cast<int>(c);
        }
      }
      break;
    }
  }
  return ds;
}

std::string format_table(const Dataset& ds) {
  std::string out;
  out.reserve(ds.size() * ds.dim() * 24 + 64);
  for (std::size_t j = 0; j < ds.dim(); ++j) out += "f" + std::to_string(j) + ",";
  out += "label\n";
  char buf[32];
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (double v : ds.inputs.row(i)) {
      std::snprintf(buf, sizeof buf, "%.17g,", v);
      out += buf;
    }
    out += std::to_string(ds.labels[i]);
    out += '\n';
  }
  return out;
}

void save_table(const Dataset& ds, const std::filesystem::path& path) {
  write_file_atomic(path, format_table(ds));
}

namespace {

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  while (true) {
    std::size_t pos = line.find(',', start);
    cells.push_back(line.substr(start, pos == std::string_view::npos ? pos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return cells;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

bool parse_real(std::string_view cell, double& out) {
  cell = trim(cell);
  if (cell.empty()) return false;
  // strtod accepts the %.17g forms including exponents; from_chars for double
  // is not available on every toolchain we target.
  std::string tmp(cell);
  char* end = nullptr;
  out = std::strtod(tmp.c_str(), &end);
  return end == tmp.c_str() + tmp.size() && std::isfinite(out);
}

}  // namespace

Dataset parse_table(const std::string& text, DatasetRole role) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) throw ParseError(1, "missing header");
  ++line_no;
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);  // BOM
  auto header = split_commas(trim(line));
  if (header.empty() || trim(header.back()) != "label") throw MissingLabel("header has no trailing label column");
  const std::size_t d = header.size() - 1;
  for (std::size_t j = 0; j < d; ++j) {
    if (trim(header[j]) != "f" + std::to_string(j)) {
      throw ParseError(1, "expected column f" + std::to_string(j));
    }
  }

  std::vector<double> values;
  std::vector<int> labels;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto cells = split_commas(trim(line));
    if (cells.size() != d + 1) {
      if (cells.size() == d) throw MissingLabel("line " + std::to_string(line_no) + ": label missing");
      throw ParseError(line_no, "expected " + std::to_string(d + 1) + " cells, got " +
                                    std::to_string(cells.size()));
    }
    for (std::size_t j = 0; j < d; ++j) {
      double v;
      if (!parse_real(cells[j], v)) throw ParseError(line_no, "non-numeric cell in column f" + std::to_string(j));
      values.push_back(v);
    }
    auto lab = trim(cells[d]);
    if (lab.empty()) throw MissingLabel("line " + std::to_string(line_no) + ": empty label");
    int y = 0;
    auto [ptr, ec] = std::from_chars(lab.data(), lab.data() + lab.size(), y);
    if (ec != std::errc() || ptr != lab.data() + lab.size() || y < 0) {
      throw ParseError(line_no, "label is not a non-negative integer");
    }
    labels.push_back(y);
  }

  Dataset ds;
  ds.inputs = Matrix(labels.size(), d, std::move(values));
  ds.num_classes = labels.empty() ? 0 : static_cast<std::size_t>(*std::max_element(labels.begin(), labels.end())) + 1;
  ds.labels = std::move(labels);
  ds.role = role;
  return ds;
}

Dataset load_table(const std::filesystem::path& path, DatasetRole role) {
  return parse_table(read_file(path), role);
}

std::pair<Dataset, Dataset> split(const Dataset& ds, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw std::invalid_argument("test_fraction must lie in (0, 1)");
  std::vector<std::vector<std::size_t>> by_class(ds.num_classes);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class.at(static_cast<std::size_t>(ds.labels[i])).push_back(i);

  RngStream rng(seed, kStreamSplit);
  std::vector<std::size_t> train_idx, test_idx;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& idx = by_class[c];
    if (idx.empty()) continue;
    if (idx.size() < 2) throw TooFewSamples("class " + std::to_string(c) + " has fewer than 2 samples");
    rng.shuffle(std::span<std::size_t>(idx));
    auto n_test = static_cast<std::size_t>(std::lround(test_fraction * static_cast<double>(idx.size())));
    n_test = std::clamp<std::size_t>(n_test, 1, idx.size() - 1);
    test_idx.insert(test_idx.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
    train_idx.insert(train_idx.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
  }
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(test_idx.begin(), test_idx.end());

  auto take = [&](const std::vector<std::size_t>& idx, DatasetRole role) {
    Dataset out{ds.inputs.gather_rows(idx), {}, ds.num_classes, role};
    out.labels.reserve(idx.size());
    for (auto i : idx) out.labels.push_back(ds.labels[i]);
    return out;
  };
  const DatasetRole test_role = ds.role == DatasetRole::OodPool ? DatasetRole::OodPool : DatasetRole::IdTest;
  return {take(train_idx, ds.role), take(test_idx, test_role)};
}

Dataset concat(const Dataset& a, const Dataset& b) {
  if (a.dim() != b.dim()) throw DimensionMismatch("concat: input dims differ");
  std::vector<double> values(a.inputs.storage());
  values.insert(values.end(), b.inputs.storage().begin(), b.inputs.storage().end());
  Dataset out{Matrix(a.size() + b.size(), a.dim(), std::move(values)), a.labels,
              std::max(a.num_classes, b.num_classes), a.role};
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  return out;
}

}  // namespace misguide
