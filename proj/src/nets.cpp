#include "misguide/nets.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "misguide/errors.hpp"
#include "misguide/io.hpp"

namespace misguide {

namespace {

constexpr int kModelFormatVersion = 1;

void check_dims(const std::vector<std::size_t>& dims) {
  if (dims.size() < 2) throw std::invalid_argument("an MLP needs at least input and output dims");
  for (auto d : dims)
    if (d == 0) throw std::invalid_argument("layer dims must be positive");
}

// out = x · w + b
Matrix affine(const Matrix& x, const DenseLayer& layer) {
  Matrix out = matmul(x, layer.weight);
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += layer.bias[j];
  }
  return out;
}

void relu_inplace(Matrix& m) {
  for (auto& v : m.values()) v = v > 0.0 ? v : 0.0;
}

void check_input(const Mlp& m, const Matrix& batch) {
  if (batch.cols() != m.input_dim()) {
    throw DimensionMismatch("batch has " + std::to_string(batch.cols()) + " columns, model expects " +
                            std::to_string(m.input_dim()));
  }
}

std::vector<DenseLayer> zero_layers(const std::vector<DenseLayer>& like) {
  std::vector<DenseLayer> out;
  out.reserve(like.size());
  for (const auto& l : like) {
    out.push_back({Matrix(l.weight.rows(), l.weight.cols()), std::vector<double>(l.bias.size(), 0.0)});
  }
  return out;
}

}  // namespace

Mlp::Mlp(std::vector<std::size_t> layer_dims) : dims_(std::move(layer_dims)) {
  check_dims(dims_);
  for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
    layers_.push_back({Matrix(dims_[l], dims_[l + 1]), std::vector<double>(dims_[l + 1], 0.0)});
  }
}

Mlp Mlp::he_init(std::vector<std::size_t> layer_dims, std::uint64_t seed) {
  Mlp m(std::move(layer_dims));
  RngStream rng(seed, 0x1417);
  for (auto& layer : m.layers_) {
    const double sd = std::sqrt(2.0 / static_cast<double>(layer.weight.rows()));
    for (auto& w : layer.weight.values()) w = sd * rng.gaussian();
  }
  return m;
}

Matrix Mlp::forward(const Matrix& batch) const {
  check_input(*this, batch);
  Matrix a = batch;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    a = affine(a, layers_[l]);
    if (l + 1 < layers_.size()) relu_inplace(a);
  }
  return a;
}

Matrix Mlp::penultimate(const Matrix& batch) const {
  check_input(*this, batch);
  if (layers_.size() < 2) throw DimensionMismatch("penultimate requires at least two layers");
  Matrix a = batch;
  for (std::size_t l = 0; l + 1 < layers_.size(); ++l) {
    a = affine(a, layers_[l]);
    relu_inplace(a);
  }
  return a;
}

Matrix Mlp::head(const Matrix& hidden) const {
  const auto& last = layers_.back();
  if (hidden.cols() != last.weight.rows()) throw DimensionMismatch("head: hidden width mismatch");
  return affine(hidden, last);
}

bool Mlp::all_finite() const noexcept {
  for (const auto& l : layers_) {
    if (!l.weight.all_finite()) return false;
    for (double b : l.bias)
      if (!std::isfinite(b)) return false;
  }
  return true;
}

bool operator==(const Mlp& a, const Mlp& b) {
  if (a.dims_ != b.dims_) return false;
  for (std::size_t l = 0; l < a.layers_.size(); ++l) {
    if (!(a.layers_[l].weight == b.layers_[l].weight) || a.layers_[l].bias != b.layers_[l].bias) return false;
  }
  return true;
}

ForwardCache forward_cached(const Mlp& m, const Matrix& batch) {
  check_input(m, batch);
  ForwardCache cache;
  cache.activations.reserve(m.num_layers() + 1);
  cache.activations.push_back(batch);
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    Matrix a = affine(cache.activations.back(), m.layers()[l]);
    if (l + 1 < m.num_layers()) relu_inplace(a);
    cache.activations.push_back(std::move(a));
  }
  return cache;
}

MlpGradients MlpGradients::zeros_like(const Mlp& m) {
  return MlpGradients{zero_layers(m.layers()), Matrix()};
}

MlpGradients& MlpGradients::operator+=(const MlpGradients& other) {
  for (std::size_t l = 0; l < layers.size(); ++l) {
    auto dst = layers[l].weight.values();
    auto src = other.layers[l].weight.values();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    for (std::size_t k = 0; k < layers[l].bias.size(); ++k) layers[l].bias[k] += other.layers[l].bias[k];
  }
  return *this;
}

double MlpGradients::max_abs() const noexcept {
  double m = 0.0;
  for (const auto& l : layers) {
    for (double v : l.weight.values()) m = std::max(m, std::abs(v));
    for (double v : l.bias) m = std::max(m, std::abs(v));
  }
  return m;
}

MlpGradients backward(const Mlp& m, const ForwardCache& cache, const Matrix& upstream) {
  const Matrix& logits = cache.logits();
  if (upstream.rows() != logits.rows() || upstream.cols() != logits.cols()) {
    throw DimensionMismatch("upstream gradient shape does not match logits");
  }
  MlpGradients g = MlpGradients::zeros_like(m);
  Matrix delta = upstream;  // dLoss/d(pre-activation) of the current layer
  for (std::size_t l = m.num_layers(); l-- > 0;) {
    const Matrix& a_in = cache.activations[l];
    const DenseLayer& layer = m.layers()[l];
    DenseLayer& gl = g.layers[l];
    for (std::size_t i = 0; i < delta.rows(); ++i) {
      auto d = delta.row(i);
      auto x = a_in.row(i);
      for (std::size_t o = 0; o < d.size(); ++o) gl.bias[o] += d[o];
      for (std::size_t k = 0; k < x.size(); ++k) {
        const double xk = x[k];
        if (xk == 0.0) continue;
        auto w = gl.weight.row(k);
        for (std::size_t o = 0; o < d.size(); ++o) w[o] += xk * d[o];
      }
    }
    // Propagate to the layer input: delta · weightᵀ.
    Matrix prev = matmul_bt(delta, layer.weight);
    if (l > 0) {
      // ReLU mask from the stored post-activation values.
      auto pv = prev.values();
      auto av = a_in.values();
      for (std::size_t k = 0; k < pv.size(); ++k)
        if (av[k] <= 0.0) pv[k] = 0.0;
    } else {
      g.input = prev;
    }
    delta = std::move(prev);
  }
  return g;
}

MlpGradients backward(const Mlp& m, const Matrix& batch, const Matrix& upstream) {
  return backward(m, forward_cached(m, batch), upstream);
}

std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> p(logits.begin(), logits.end());
  if (p.empty()) return p;
  const double mx = *std::max_element(p.begin(), p.end());
  double s = 0.0;
  for (auto& v : p) {
    v = std::exp(v - mx);
    s += v;
  }
  for (auto& v : p) v /= s;
  return p;
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto s = softmax(logits.row(i));
    std::copy(s.begin(), s.end(), p.row(i).begin());
  }
  return p;
}

std::vector<int> predict_labels(const Mlp& m, const Matrix& batch) {
  Matrix logits = m.forward(batch);
  std::vector<int> out(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) out[i] = static_cast<int>(argmax(logits.row(i)));
  return out;
}

double cross_entropy(const Matrix& logits, std::span<const int> labels, Matrix* grad) {
  if (labels.size() != logits.rows()) throw DimensionMismatch("cross_entropy: label count mismatch");
  const double inv_n = 1.0 / static_cast<double>(logits.rows());
  if (grad) *grad = Matrix(logits.rows(), logits.cols());
  double loss = 0.0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto p = softmax(logits.row(i));
    const auto y = static_cast<std::size_t>(labels[i]);
    loss -= std::log(std::max(p[y], 1e-300));
    if (grad) {
      auto g = grad->row(i);
      for (std::size_t j = 0; j < p.size(); ++j) g[j] = (p[j] - (j == y ? 1.0 : 0.0)) * inv_n;
    }
  }
  return loss * inv_n;
}

double soft_cross_entropy(const Matrix& logits, const Matrix& target_probs, Matrix* grad) {
  if (target_probs.rows() != logits.rows() || target_probs.cols() != logits.cols()) {
    throw DimensionMismatch("soft_cross_entropy: target shape mismatch");
  }
  const double inv_n = 1.0 / static_cast<double>(logits.rows());
  if (grad) *grad = Matrix(logits.rows(), logits.cols());
  double loss = 0.0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto p = softmax(logits.row(i));
    auto t = target_probs.row(i);
    for (std::size_t j = 0; j < p.size(); ++j) {
      if (t[j] > 0.0) loss -= t[j] * std::log(std::max(p[j], 1e-300));
      if (grad) (*grad)(i, j) = (p[j] - t[j]) * inv_n;
    }
  }
  return loss * inv_n;
}

double l1_loss(const Matrix& pred, const Matrix& target, Matrix* grad) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) {
    throw DimensionMismatch("l1_loss: shape mismatch");
  }
  const double inv = 1.0 / static_cast<double>(pred.size());
  if (grad) *grad = Matrix(pred.rows(), pred.cols());
  double loss = 0.0;
  auto pv = pred.values();
  auto tv = target.values();
  for (std::size_t k = 0; k < pv.size(); ++k) {
    const double diff = pv[k] - tv[k];
    loss += std::abs(diff);
    if (grad) grad->values()[k] = diff > 0.0 ? inv : (diff < 0.0 ? -inv : 0.0);
  }
  return loss * inv;
}

void SgdMomentum::step(Mlp& m, const MlpGradients& g) {
  if (velocity_.empty()) velocity_ = zero_layers(m.layers());
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    auto& layer = m.layers()[l];
    auto w = layer.weight.values();
    auto gw = g.layers[l].weight.values();
    auto vw = velocity_[l].weight.values();
    for (std::size_t k = 0; k < w.size(); ++k) {
      vw[k] = momentum_ * vw[k] + gw[k] + weight_decay_ * w[k];
      w[k] -= lr_ * vw[k];
    }
    auto& b = layer.bias;
    auto& vb = velocity_[l].bias;
    for (std::size_t k = 0; k < b.size(); ++k) {
      vb[k] = momentum_ * vb[k] + g.layers[l].bias[k];
      b[k] -= lr_ * vb[k];
    }
  }
}

void Adam::step(Mlp& m, const MlpGradients& g) {
  if (m1_.empty()) {
    m1_ = zero_layers(m.layers());
    m2_ = zero_layers(m.layers());
  }
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  auto update = [&](std::span<double> w, std::span<const double> gw, std::span<double> a, std::span<double> b) {
    for (std::size_t k = 0; k < w.size(); ++k) {
      a[k] = b1_ * a[k] + (1.0 - b1_) * gw[k];
      b[k] = b2_ * b[k] + (1.0 - b2_) * gw[k] * gw[k];
      w[k] -= lr_ * (a[k] / c1) / (std::sqrt(b[k] / c2) + eps_);
    }
  };
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    update(m.layers()[l].weight.values(), g.layers[l].weight.values(), m1_[l].weight.values(),
           m2_[l].weight.values());
    update(m.layers()[l].bias, g.layers[l].bias, m1_[l].bias, m2_[l].bias);
  }
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("momentum must lie in [0, 1)");
}

TrainResult train_classifier(Mlp m, const Dataset& ds, const TrainConfig& cfg) {
  cfg.validate();
  if (ds.role != DatasetRole::IdTrain) throw std::invalid_argument("train_classifier expects an id_train dataset");
  if (ds.size() == 0) throw EmptyDataset("training set is empty");
  if (ds.dim() != m.input_dim()) throw DimensionMismatch("dataset dim does not match model input");

  SgdMomentum opt(cfg.learning_rate, cfg.momentum);
  std::vector<std::size_t> order(ds.size());
  std::vector<double> history;
  RngStream rng(cfg.seed, 0x7A11);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(std::span<std::size_t>(order));
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::span<const std::size_t> idx(order.data() + start, end - start);
      Matrix x = ds.inputs.gather_rows(idx);
      std::vector<int> y;
      y.reserve(idx.size());
      for (auto i : idx) y.push_back(ds.labels[i]);
      ForwardCache cache = forward_cached(m, x);
      Matrix grad;
      const double loss = cross_entropy(cache.logits(), y, &grad);
      if (!std::isfinite(loss)) {
        throw Diverged("loss became non-finite in epoch " + std::to_string(epoch));
      }
      total += loss * static_cast<double>(idx.size());
      opt.step(m, backward(m, cache, grad));
    }
    const double mean = total / static_cast<double>(order.size());
    if (!std::isfinite(mean) || !m.all_finite()) {
      throw Diverged("training diverged in epoch " + std::to_string(epoch));
    }
    history.push_back(mean);
  }
  return {std::move(m), std::move(history)};
}

double accuracy(const Mlp& m, const Dataset& ds) {
  if (ds.size() == 0) throw EmptyDataset("accuracy on empty dataset");
  auto pred = predict_labels(m, ds.inputs);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == ds.labels[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

GeneratorModel::GeneratorModel(Mlp net, Bounds bounds) : net_(std::move(net)), bounds_(std::move(bounds)) {
  if (bounds_.dim() != net_.output_dim()) throw DimensionMismatch("generator output dim != bounds dim");
}

GeneratorModel GeneratorModel::he_init(std::size_t noise_dim, std::size_t hidden, const Bounds& bounds,
                                       std::uint64_t seed) {
  return GeneratorModel(Mlp::he_init({noise_dim, hidden, hidden, bounds.dim()}, seed), bounds);
}

Matrix GeneratorModel::generate(const Matrix& z) const {
  if (!z.all_finite()) throw std::invalid_argument("generator noise must be finite");
  Matrix out = net_.forward(z);
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) {
      const double center = 0.5 * (bounds_.lo[j] + bounds_.hi[j]);
      const double half = 0.5 * (bounds_.hi[j] - bounds_.lo[j]);
      r[j] = std::clamp(center + half * std::tanh(r[j]), bounds_.lo[j], bounds_.hi[j]);
    }
  }
  return out;
}

MlpGradients GeneratorModel::backward(const Matrix& z, const Matrix& upstream) const {
  ForwardCache cache = forward_cached(net_, z);
  Matrix g = upstream;
  const Matrix& pre = cache.logits();
  if (g.rows() != pre.rows() || g.cols() != pre.cols()) throw DimensionMismatch("generator upstream shape");
  for (std::size_t i = 0; i < g.rows(); ++i) {
    for (std::size_t j = 0; j < g.cols(); ++j) {
      const double half = 0.5 * (bounds_.hi[j] - bounds_.lo[j]);
      const double t = std::tanh(pre(i, j));
      g(i, j) *= half * (1.0 - t * t);
    }
  }
  return misguide::backward(net_, cache, g);
}

Matrix GeneratorModel::sample_noise(std::size_t n, RngStream& rng) const {
  Matrix z(n, noise_dim());
  for (auto& v : z.values()) v = rng.gaussian();
  return z;
}

std::string model_to_json(const Mlp& m) {
  nlohmann::json j;
  j["format_version"] = kModelFormatVersion;
  j["layer_dims"] = m.layer_dims();
  j["weight_layout"] = "in_by_out_row_major";
  auto& layers = j["layers"] = nlohmann::json::array();
  for (const auto& l : m.layers()) {
    layers.push_back({{"weight", l.weight.storage()}, {"bias", l.bias}});
  }
  return j.dump();
}

Mlp model_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model file is not valid JSON: ") + e.what());
  }
  try {
    if (j.at("format_version").get<int>() != kModelFormatVersion) throw FormatError("unsupported model format_version");
    Mlp m(j.at("layer_dims").get<std::vector<std::size_t>>());
    const auto& layers = j.at("layers");
    if (layers.size() != m.num_layers()) throw FormatError("layer count does not match layer_dims");
    for (std::size_t l = 0; l < m.num_layers(); ++l) {
      auto w = layers[l].at("weight").get<std::vector<double>>();
      auto b = layers[l].at("bias").get<std::vector<double>>();
      auto& dst = m.layers()[l];
      if (w.size() != dst.weight.size() || b.size() != dst.bias.size()) throw FormatError("layer shape mismatch");
      dst.weight = Matrix(dst.weight.rows(), dst.weight.cols(), std::move(w));
      dst.bias = std::move(b);
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed model file: ") + e.what());
  }
}

void save_model(const Mlp& m, const std::filesystem::path& path) { write_file_atomic(path, model_to_json(m)); }

Mlp load_model(const std::filesystem::path& path) { return model_from_json(read_file(path)); }

}  // namespace misguide
