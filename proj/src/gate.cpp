#include "misguide/gate.hpp"

#include <stdexcept>

#include "misguide/errors.hpp"

namespace misguide {

namespace {
constexpr std::uint64_t kContentKeySalt = 0xC0A7E1715EEDULL;
constexpr std::uint64_t kIndexKeySalt = 0x1D3C0A7E2B5FULL;
}  // namespace

std::string to_string(LabelMode mode) { return mode == LabelMode::Soft ? "soft" : "hard"; }

LabelMode label_mode_from_string(const std::string& s) {
  if (s == "soft") return LabelMode::Soft;
  if (s == "hard") return LabelMode::Hard;
  throw std::invalid_argument("label mode must be 'soft' or 'hard', got '" + s + "'");
}

void DefenseConfig::validate() const {
  if (!(p >= 0.0 && p <= 1.0)) throw OutOfRange("p must lie in [0, 1], got " + std::to_string(p));
  if (!(random_logit_scale > 0.0)) throw OutOfRange("random_logit_scale must be positive");
}

std::vector<double> random_logits(std::size_t num_classes, RngStream& rng, double scale) {
  if (num_classes < 2) throw std::invalid_argument("random_logits needs at least 2 classes");
  const std::size_t k = rng.choice(num_classes);
  std::vector<double> out(num_classes);
  for (std::size_t j = 0; j < num_classes; ++j) out[j] = rng.gaussian() + (j == k ? scale : 0.0);
  return out;
}

Gate::Gate(std::shared_ptr<const Mlp> victim, std::shared_ptr<const Mlp> extractor,
           std::shared_ptr<const OodParams> ood, DefenseConfig cfg)
    : victim_(std::move(victim)), extractor_(std::move(extractor)), ood_(std::move(ood)) {
  if (!victim_ || !extractor_ || !ood_) throw std::invalid_argument("gate needs victim, extractor and OOD params");
  if (!ood_->calibrated()) throw NotCalibrated("gate requires calibrated OOD parameters");
  if (victim_->input_dim() != extractor_->input_dim()) throw DimensionMismatch("victim and extractor inputs differ");
  if (extractor_->layer_dims()[extractor_->layer_dims().size() - 2] != ood_->dim) {
    throw DimensionMismatch("extractor embedding width does not match OOD params");
  }
  cfg.validate();
  cfg_ = std::make_shared<const DefenseConfig>(cfg);
}

DefenseConfig Gate::config() const {
  std::lock_guard lock(cfg_mutex_);
  return *cfg_;
}

void Gate::set_p(double new_p) {
  std::lock_guard lock(cfg_mutex_);
  DefenseConfig next = *cfg_;
  next.p = new_p;
  next.validate();
  cfg_ = std::make_shared<const DefenseConfig>(next);
}

GateStats Gate::stats() const {
  // Read in the reverse of the increment order so the snapshot always
  // satisfies randomized <= ood_flagged <= queries_total.
  GateStats s;
  s.randomized = randomized_.load();
  s.ood_flagged = ood_flagged_.load();
  s.queries_total = total_.load();
  return s;
}

namespace {
RngStream query_stream(const DefenseConfig& cfg, std::span<const double> x, std::uint64_t query_index) {
  if (cfg.consistent_responses) return RngStream(cfg.master_seed, hash_reals(x) ^ kContentKeySalt);
  return RngStream(cfg.master_seed, mix64(query_index ^ kIndexKeySalt));
}
}  // namespace

RngStream Gate::derive_query_rng(std::span<const double> x, std::uint64_t query_index) const {
  return query_stream(config(), x, query_index);
}

GateResponse Gate::decide(std::span<const double> x, std::span<const double> victim_logits, double score,
                          const DefenseConfig& cfg) {
  const std::uint64_t index = next_index_.fetch_add(1);
  GateResponse r;
  r.was_ood = score > *ood_->t_distance;
  if (r.was_ood) {
    RngStream rng = query_stream(cfg, x, index);
    // u in [0, 1): u < p gives exactly "never" at p = 0 and "always" at p = 1.
    const double u = rng.uniform01();
    if (u < cfg.p) {
      r.logits = random_logits(victim_->output_dim(), rng, cfg.random_logit_scale);
      r.was_randomized = true;
    }
  }
  if (!r.was_randomized) r.logits.assign(victim_logits.begin(), victim_logits.end());
  r.label = static_cast<int>(argmax(r.logits));

  total_.fetch_add(1);
  if (r.was_ood) ood_flagged_.fetch_add(1);
  if (r.was_randomized) randomized_.fetch_add(1);
  return r;
}

GateResponse Gate::respond(std::span<const double> x) {
  if (x.size() != input_dim()) {
    throw DimensionMismatch("query has length " + std::to_string(x.size()) + ", expected " +
                            std::to_string(input_dim()));
  }
  Matrix one(1, x.size(), std::vector<double>(x.begin(), x.end()));
  return std::move(respond_batch(one).front());
}

std::vector<GateResponse> Gate::respond_batch(const Matrix& batch) {
  if (batch.cols() != input_dim()) {
    throw DimensionMismatch("queries have " + std::to_string(batch.cols()) + " columns, expected " +
                            std::to_string(input_dim()));
  }
  const DefenseConfig cfg = config();
  const Matrix emb = extractor_->penultimate(batch);
  const Matrix logits = victim_->forward(batch);
  std::vector<GateResponse> out;
  out.reserve(batch.rows());
  for (std::size_t i = 0; i < batch.rows(); ++i) {
    out.push_back(decide(batch.row(i), logits.row(i), maha_score(*ood_, emb.row(i)), cfg));
  }
  return out;
}

}  // namespace misguide
