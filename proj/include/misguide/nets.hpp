#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "misguide/datagen.hpp"
#include "misguide/matrix.hpp"
#include "misguide/rng.hpp"

namespace misguide {

/// Fully connected layer. weight is stored (in x out) so a batch forward is
/// x · weight + bias.
struct DenseLayer {
  Matrix weight;
  std::vector<double> bias;
};

/// Feed-forward ReLU network with a linear (logit) output layer.
class Mlp {
 public:
  Mlp() = default;
  // All-zero parameters.
  explicit Mlp(std::vector<std::size_t> layer_dims);
  // He-normal weights, zero biases.
  static Mlp he_init(std::vector<std::size_t> layer_dims, std::uint64_t seed);

  const std::vector<std::size_t>& layer_dims() const noexcept { return dims_; }
  std::size_t input_dim() const { return dims_.front(); }
  std::size_t output_dim() const { return dims_.back(); }
  std::size_t num_layers() const noexcept { return layers_.size(); }

  std::vector<DenseLayer>& layers() noexcept { return layers_; }
  const std::vector<DenseLayer>& layers() const noexcept { return layers_; }

  Matrix forward(const Matrix& batch) const;
  // Activations of the last hidden layer (after ReLU).
  Matrix penultimate(const Matrix& batch) const;
  // Applies only the output layer to penultimate activations.
  Matrix head(const Matrix& hidden) const;

  bool all_finite() const noexcept;
  friend bool operator==(const Mlp&, const Mlp&);

 private:
  std::vector<std::size_t> dims_;
  std::vector<DenseLayer> layers_;
};

// Per-layer activations from a forward pass: [input, hidden..., logits].
struct ForwardCache {
  std::vector<Matrix> activations;
  const Matrix& logits() const { return activations.back(); }
};

ForwardCache forward_cached(const Mlp& m, const Matrix& batch);

// Same shapes as the model's layers.
struct MlpGradients {
  std::vector<DenseLayer> layers;
  Matrix input;  // dLoss/dInput

  static MlpGradients zeros_like(const Mlp& m);
  MlpGradients& operator+=(const MlpGradients& other);
  double max_abs() const noexcept;
};

/// Parameter (and input) gradients of sum_i <upstream_i, logits_i>.
MlpGradients backward(const Mlp& m, const ForwardCache& cache, const Matrix& upstream);
MlpGradients backward(const Mlp& m, const Matrix& batch, const Matrix& upstream);

std::vector<double> softmax(std::span<const double> logits);
Matrix softmax_rows(const Matrix& logits);
std::vector<int> predict_labels(const Mlp& m, const Matrix& batch);

// Losses return the batch-mean value and write dLoss/dlogits into grad.
double cross_entropy(const Matrix& logits, std::span<const int> labels, Matrix* grad);
double soft_cross_entropy(const Matrix& logits, const Matrix& target_probs, Matrix* grad);
double l1_loss(const Matrix& pred, const Matrix& target, Matrix* grad);

class SgdMomentum {
 public:
  SgdMomentum(double learning_rate, double momentum, double weight_decay = 0.0)
      : lr_(learning_rate), momentum_(momentum), weight_decay_(weight_decay) {}
  void step(Mlp& m, const MlpGradients& g);
  void set_learning_rate(double lr) { lr_ = lr; }

 private:
  double lr_, momentum_, weight_decay_;
  std::vector<DenseLayer> velocity_;
};

class Adam {
 public:
  explicit Adam(double learning_rate, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(learning_rate), b1_(beta1), b2_(beta2), eps_(eps) {}
  void step(Mlp& m, const MlpGradients& g);

 private:
  double lr_, b1_, b2_, eps_;
  std::uint64_t t_ = 0;
  std::vector<DenseLayer> m1_, m2_;
};

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 128;
  double learning_rate = 0.05;
  double momentum = 0.9;
  std::uint64_t seed = 0;

  void validate() const;
};

struct TrainResult {
  Mlp model;
  std::vector<double> loss_history;  // mean loss per epoch
};

/// Mini-batch SGD with momentum on cross-entropy. Throws Diverged when the loss
/// becomes non-finite.
TrainResult train_classifier(Mlp m, const Dataset& ds, const TrainConfig& cfg);

double accuracy(const Mlp& m, const Dataset& ds);

/// Query generator: z -> center + half_width * tanh(net(z)).
class GeneratorModel {
 public:
  GeneratorModel(Mlp net, Bounds bounds);
  static GeneratorModel he_init(std::size_t noise_dim, std::size_t hidden, const Bounds& bounds,
                                std::uint64_t seed);

  std::size_t noise_dim() const { return net_.input_dim(); }
  std::size_t output_dim() const { return net_.output_dim(); }
  const Mlp& net() const noexcept { return net_; }
  Mlp& net() noexcept { return net_; }
  const Bounds& bounds() const noexcept { return bounds_; }

  Matrix generate(const Matrix& z) const;
  // Gradients of sum_i <upstream_i, generate(z)_i> w.r.t. the net parameters.
  MlpGradients backward(const Matrix& z, const Matrix& upstream) const;
  Matrix sample_noise(std::size_t n, RngStream& rng) const;

 private:
  Mlp net_;
  Bounds bounds_;
};

std::string model_to_json(const Mlp& m);
Mlp model_from_json(const std::string& text);
void save_model(const Mlp& m, const std::filesystem::path& path);
Mlp load_model(const std::filesystem::path& path);

}  // namespace misguide
