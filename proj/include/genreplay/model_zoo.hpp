#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "genreplay/nn.hpp"
#include "genreplay/rng.hpp"
#include "genreplay/tensor.hpp"

namespace genreplay {

/// Stored per-channel batch-normalization statistics.
struct BnStats {
  Tensor mean;      // (channels)
  Tensor variance;  // (channels)
  int channel_count = 0;
};

struct InputShape {
  int channels = 3, height = 0, width = 0;
};

/// Shared trunk plus one linear head per task, concatenated at the logit
/// level. Heads are appended as tasks arrive; earlier logit columns are never
/// re-ordered.
class Classifier {
 public:
  /// arch_id: "desk:CxHxW", "resnet18:CxHxW" or "resnet34:CxHxW".
  Classifier(std::string arch_id, uint64_t init_seed);

  Tensor forward(const Tensor& images, Mode mode);
  /// Backward for the most recent forward; returns d(loss)/d(images).
  Tensor backward(const Tensor& dlogits);

  void expand_head(int k_new, uint64_t init_seed);

  std::vector<BnStats> extract_bn_stats() const;
  std::vector<BatchNorm2d*> bn_layers() { return collect_bn_layers(*trunk_); }

  const std::string& arch_id() const { return arch_id_; }
  const std::vector<int>& head_widths() const { return head_widths_; }
  int num_heads() const { return static_cast<int>(heads_.size()); }
  int total_classes() const;
  int feature_dim() const { return feature_dim_; }
  const InputShape& input_shape() const { return input_shape_; }

  std::vector<Tensor*> params();
  std::vector<Tensor*> grads();
  std::vector<Tensor*> state();
  void zero_grads();

  Linear& head(int i) { return *heads_[static_cast<size_t>(i)]; }

  Classifier clone() const;
  std::string param_digest() const;

  void save(const std::filesystem::path& path, const std::string& config_hash = "") const;
  static Classifier load(const std::filesystem::path& path);
  static std::string peek_meta_json(const std::filesystem::path& path);

 private:
  std::string arch_id_;
  InputShape input_shape_;
  int feature_dim_ = 0;
  std::unique_ptr<Sequential> trunk_;
  std::vector<std::unique_ptr<Linear>> heads_;
  std::vector<int> head_widths_;
  Tensor features_;  // cached by forward for head backward
};

struct GenerationConfig {
  int noise_dim = 0;
  InputShape out_shape;
  int covered_classes = 0;
};

/// Noise-to-image network with a saturating (tanh) output.
class Generator {
 public:
  /// arch_id: "deskgen:Z:CxHxW" or "dcgan:Z:CxHxW".
  Generator(std::string arch_id, uint64_t init_seed);

  /// Deterministic eval-mode generation; output values lie in [-1, 1].
  Tensor generate(const Tensor& noise);

  /// Training-mode forward (batch-statistic normalization in BN layers).
  Tensor forward_train(const Tensor& noise);
  Tensor backward(const Tensor& dimages);

  const std::string& arch_id() const { return arch_id_; }
  const GenerationConfig& config() const { return config_; }
  void set_covered_classes(int k) { config_.covered_classes = k; }

  std::vector<Tensor*> params() { return collect_params(*net_); }
  std::vector<Tensor*> grads() { return collect_grads(*net_); }
  std::vector<Tensor*> state() { return collect_state(*net_); }
  void zero_grads() { genreplay::zero_grads(*net_); }

  Generator clone() const;
  std::string param_digest() const;

  void save(const std::filesystem::path& path, const std::string& config_hash = "") const;
  static Generator load(const std::filesystem::path& path);

 private:
  Tensor check_noise(const Tensor& noise) const;
  std::string arch_id_;
  GenerationConfig config_;
  std::unique_ptr<Sequential> net_;
};

InputShape parse_input_shape(const std::string& spec);

/// Generator arch paired with a classifier arch of the same tier/input.
std::string matching_generator_arch(const std::string& classifier_arch_id, int noise_dim);

}  // namespace genreplay
