#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "genreplay/rng.hpp"
#include "genreplay/tensor.hpp"

namespace genreplay {

enum class Mode { Train, Eval };

/// A differentiable module. forward() caches whatever backward() needs, so a
/// layer instance supports one in-flight forward/backward pair at a time.
/// backward() returns the gradient with respect to the input and accumulates
/// parameter gradients.
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor forward(const Tensor& x, Mode mode) = 0;
  virtual Tensor backward(const Tensor& grad_out) = 0;
  virtual std::string kind() const = 0;

  /// Trainable tensors and their gradient buffers, own parameters only.
  virtual void collect_params(std::vector<Tensor*>& params, std::vector<Tensor*>& grads) {
    (void)params;
    (void)grads;
  }
  /// Persistent non-trainable tensors (running statistics).
  virtual void collect_state(std::vector<Tensor*>& state) { (void)state; }
  /// Visits this layer and, for composites, every sublayer in order.
  virtual void for_each(const std::function<void(Layer&)>& fn) { fn(*this); }
};

class Conv2d : public Layer {
 public:
  Conv2d(int in_ch, int out_ch, int kernel, int stride, int pad, Rng& rng);
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& gy) override;
  std::string kind() const override { return "conv2d"; }
  void collect_params(std::vector<Tensor*>& p, std::vector<Tensor*>& g) override {
    p.push_back(&weight);
    p.push_back(&bias);
    g.push_back(&gweight);
    g.push_back(&gbias);
  }

  int in_ch, out_ch, kernel, stride, pad;
  Tensor weight;  // (out_ch, in_ch, k, k)
  Tensor bias;    // (out_ch)
  Tensor gweight, gbias;

 private:
  Tensor input_;
};

class ConvTranspose2d : public Layer {
 public:
  ConvTranspose2d(int in_ch, int out_ch, int kernel, int stride, int pad, int out_pad, Rng& rng);
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& gy) override;
  std::string kind() const override { return "conv_transpose2d"; }
  void collect_params(std::vector<Tensor*>& p, std::vector<Tensor*>& g) override {
    p.push_back(&weight);
    p.push_back(&bias);
    g.push_back(&gweight);
    g.push_back(&gbias);
  }

  int in_ch, out_ch, kernel, stride, pad, out_pad;
  Tensor weight;  // (in_ch, out_ch, k, k)
  Tensor bias;    // (out_ch)
  Tensor gweight, gbias;

 private:
  Tensor input_;
};

class Linear : public Layer {
 public:
  Linear(int in_features, int out_features, Rng& rng);
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& gy) override;
  std::string kind() const override { return "linear"; }
  void collect_params(std::vector<Tensor*>& p, std::vector<Tensor*>& g) override {
    p.push_back(&weight);
    p.push_back(&bias);
    g.push_back(&gweight);
    g.push_back(&gbias);
  }

  int in_features, out_features;
  Tensor weight;  // (out, in)
  Tensor bias;    // (out)
  Tensor gweight, gbias;

 private:
  Tensor input_;
};

/// Per-channel batch normalization over NCHW input. Keeps exponential running
/// statistics (biased variance). Every forward also captures the batch
/// statistics of its input, in both modes, so activation-statistic losses can
/// read them; set_stat_grads() injects d(loss)/d(batch stats) contributions
/// that the next backward() folds into the input gradient.
class BatchNorm2d : public Layer {
 public:
  explicit BatchNorm2d(int channels, double momentum = 0.1, double eps = 1e-5);
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& gy) override;
  std::string kind() const override { return "batchnorm2d"; }
  void collect_params(std::vector<Tensor*>& p, std::vector<Tensor*>& g) override {
    p.push_back(&gamma);
    p.push_back(&beta);
    g.push_back(&ggamma);
    g.push_back(&gbeta);
  }
  void collect_state(std::vector<Tensor*>& state) override {
    state.push_back(&running_mean);
    state.push_back(&running_var);
  }

  const Tensor& batch_mean() const { return batch_mean_; }
  const Tensor& batch_var() const { return batch_var_; }
  void set_stat_grads(Tensor dmean, Tensor dvar);

  int channels;
  double momentum, eps;
  Tensor gamma, beta, ggamma, gbeta;
  Tensor running_mean, running_var;

 private:
  Tensor input_;
  Tensor batch_mean_, batch_var_;
  Mode mode_ = Mode::Train;
  std::optional<Tensor> stat_gmean_, stat_gvar_;
};

class ReLU : public Layer {
 public:
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& gy) override;
  std::string kind() const override { return "relu"; }

 private:
  Tensor input_;
};

class LeakyReLU : public Layer {
 public:
  explicit LeakyReLU(double slope = 0.2) : slope(slope) {}
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& gy) override;
  std::string kind() const override { return "leaky_relu"; }
  double slope;

 private:
  Tensor input_;
};

class Tanh : public Layer {
 public:
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& gy) override;
  std::string kind() const override { return "tanh"; }

 private:
  Tensor output_;
};

/// (N,C,H,W) -> (N,C) spatial mean.
class GlobalAvgPool : public Layer {
 public:
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& gy) override;
  std::string kind() const override { return "global_avg_pool"; }

 private:
  std::vector<int> in_shape_;
};

/// Reshapes (N, ...) to (N, dims...) preserving element count.
class Reshape : public Layer {
 public:
  explicit Reshape(std::vector<int> dims) : dims_(std::move(dims)) {}
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& gy) override;
  std::string kind() const override { return "reshape"; }

 private:
  std::vector<int> dims_;
  std::vector<int> in_shape_;
};

class Sequential : public Layer {
 public:
  template <typename L, typename... Args>
  L& emplace(Args&&... args) {
    auto layer = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *layer;
    layers.push_back(std::move(layer));
    return ref;
  }
  void append(std::unique_ptr<Layer> layer) { layers.push_back(std::move(layer)); }

  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& gy) override;
  std::string kind() const override { return "sequential"; }
  void for_each(const std::function<void(Layer&)>& fn) override;

  std::vector<std::unique_ptr<Layer>> layers;
};

/// conv-bn-relu-conv-bn plus identity (or projected) shortcut, relu on the sum.
class ResidualBlock : public Layer {
 public:
  ResidualBlock(int in_ch, int out_ch, int stride, Rng& rng);
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& gy) override;
  std::string kind() const override { return "residual_block"; }
  void for_each(const std::function<void(Layer&)>& fn) override;

 private:
  Conv2d conv1_;
  BatchNorm2d bn1_;
  ReLU relu1_;
  Conv2d conv2_;
  BatchNorm2d bn2_;
  std::unique_ptr<Conv2d> proj_;
  std::unique_ptr<BatchNorm2d> proj_bn_;
  Tensor sum_;  // pre-activation sum, cached for the final relu backward
};

// Whole-module helpers (recursive over composites).
std::vector<Tensor*> collect_params(Layer& root);
std::vector<Tensor*> collect_grads(Layer& root);
std::vector<Tensor*> collect_state(Layer& root);
std::vector<BatchNorm2d*> collect_bn_layers(Layer& root);
void zero_grads(Layer& root);
int param_count(Layer& root);

}  // namespace genreplay
