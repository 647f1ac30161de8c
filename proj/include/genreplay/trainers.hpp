#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "genreplay/evaluation.hpp"
#include "genreplay/inheritance_losses.hpp"
#include "genreplay/model_zoo.hpp"
#include "genreplay/recording_losses.hpp"
#include "genreplay/rng.hpp"
#include "genreplay/task_stream.hpp"

namespace genreplay {

// ---------------------------------------------------------------------------
// Optimizers

class SgdMomentum {
 public:
  SgdMomentum(std::vector<Tensor*> params, std::vector<Tensor*> grads, double lr, double momentum);
  void step();
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

 private:
  std::vector<Tensor*> params_, grads_;
  std::vector<Tensor> velocity_;
  double lr_, momentum_;
};

/// Momentum-free adaptive optimizer (RMSProp-style accumulator).
class RmsProp {
 public:
  RmsProp(std::vector<Tensor*> params, std::vector<Tensor*> grads, double lr, double rho = 0.99,
          double eps = 1e-8);
  void step();

 private:
  std::vector<Tensor*> params_, grads_;
  std::vector<Tensor> sq_accum_;
  double lr_, rho_, eps_;
};

// ---------------------------------------------------------------------------
// Configs

struct RecordingConfig {
  int epochs = 500;
  int steps_per_epoch = 100;  // one "epoch" of noise-driven training
  int batch_size = 512;
  double learning_rate = 0.01;
  std::string optimizer_id = "rmsprop";
  RecordingLossWeights weights;
  DivergenceSpace divergence_space = DivergenceSpace::Output;
  int noise_dim = 100;
  uint64_t seed = 0;
  void validate() const;
};

struct Ratio {
  int num = 1, den = 1;
  void validate() const;
  static Ratio parse(const std::string& text);  // "3:1"
  std::string str() const { return std::to_string(num) + ":" + std::to_string(den); }
};

struct InheritanceConfig {
  int epochs = 150;
  double learning_rate = 0.01;
  double momentum = 0.9;
  int new_batch_size = 128;      // real portion per step
  Ratio replay_ratio;            // generated:new per class
  DistillConfig distill;
  int rejection_budget = 50;     // oversampling factor for the class quota
  uint64_t seed = 0;
  void validate() const;
};

struct InitialConfig {
  int epochs = 150;
  int batch_size = 128;
  double learning_rate = 0.01;
  double momentum = 0.9;
  uint64_t seed = 0;
  void validate() const;
};

// ---------------------------------------------------------------------------
// Batches

/// Deterministic class-balanced minibatch stream over a task's train split.
class BalancedBatchIterator {
 public:
  BalancedBatchIterator(const Subset& split, const std::vector<int>& class_set, int batch_size,
                        uint64_t seed);
  int steps_per_epoch() const { return steps_per_epoch_; }
  int per_class() const { return per_class_; }
  /// Subset rows for the next batch, grouped by class in class_set order.
  std::vector<int> next();
  /// Within-head labels aligned with next()'s row order.
  const std::vector<int>& batch_labels() const { return batch_labels_; }

 private:
  const Subset* split_;
  std::vector<std::vector<int>> by_class_;  // subset rows per class
  std::vector<int> cursor_;
  int per_class_ = 0, steps_per_epoch_ = 0, step_in_epoch_ = 0;
  std::vector<int> batch_labels_;
  Rng rng_;
  void reshuffle();
};

/// Mixed generated+real batch: generated rows first, then real rows.
struct ReplayBatch {
  Tensor images;
  Tensor teacher_logits_gen;   // old-model logits on the generated portion
  Tensor teacher_logits_real;  // old-model logits on the real portion
  std::vector<int> labels;     // within-head labels for the real portion
  std::vector<int> pseudo_labels;  // old-class pseudo labels of the generated portion
  int generated_count = 0;
  int real_count = 0;
};

/// Fills a per-old-class quota (ratio x per-class count of the real batch) by
/// rejection sampling on the old classifier's pseudo-labels. Throws
/// BalanceError naming the starving classes when the budget is exhausted.
ReplayBatch build_balanced_batch(Generator& generator, Classifier& old_classifier,
                                 const Tensor& new_images, const std::vector<int>& new_labels,
                                 const Ratio& ratio, Rng& rng, int rejection_budget = 50);

// ---------------------------------------------------------------------------
// Stage I: knowledge recording

struct RecordingResult {
  Generator generator;
  RecordingLossTerms final_terms;
  int steps = 0;
};

/// Trains a fresh generator against the frozen classifier by minimizing the
/// recording loss on freshly sampled noise each step. The classifier's
/// parameters are not modified.
RecordingResult record_knowledge(Classifier& old_classifier, const RecordingConfig& cfg,
                                 const std::filesystem::path& log_csv = {});

// ---------------------------------------------------------------------------
// Stage II: knowledge inheritance

struct InheritanceResult {
  Classifier classifier;
  std::vector<InheritanceLossTerms> trace;  // one entry per optimization step
};

/// Full replay trainer: expands the head, then trains on ReplayBatches with
/// (1-l4)*ce + l4*(gkd+nkd). `generator` may be null (replay disabled) and
/// nkd may be switched off; the frozen old classifier is the distillation
/// teacher throughout.
InheritanceResult inherit_knowledge(const Classifier& old_classifier, Generator* generator,
                                    const TaskSpec& new_task, const InheritanceConfig& cfg,
                                    int task_index, bool use_nkd = true,
                                    const std::filesystem::path& log_csv = {});

/// Plain new-task finetuning (cross-entropy only), no distillation machinery.
InheritanceResult finetune_task(const Classifier& old_classifier, const TaskSpec& new_task,
                                const InheritanceConfig& cfg,
                                const std::filesystem::path& log_csv = {});

/// Regularization-only baseline: (1-l4)*ce + l4*nkd on new data.
InheritanceResult lwf_task(const Classifier& old_classifier, const TaskSpec& new_task,
                           const InheritanceConfig& cfg, int task_index,
                           const std::filesystem::path& log_csv = {});

/// Trains the non-incremental first-task model from scratch.
Classifier train_initial(const std::string& arch_id, const TaskSpec& task1,
                         const InitialConfig& cfg, const std::filesystem::path& log_csv = {});

// ---------------------------------------------------------------------------
// Sequence driver

enum class Method { Finetune, Lwf, Ours, Variant };

struct MethodFlags {
  bool use_replay = true;  // generated-data path (gkd)
  bool use_bn = true;      // bn-alignment term in recording
  bool use_div = true;     // pair-diversity term in recording
  bool use_nkd = true;     // new-data distillation
  void validate() const;   // div requires bn
  std::string label() const;
  static MethodFlags for_method(Method m);
};

struct SequenceConfigs {
  MethodFlags flags;
  InitialConfig init;
  RecordingConfig record;
  InheritanceConfig inherit;
  uint64_t seed = 0;
};

struct StageInfo {
  std::string name;  // "record-2", "inherit-2", ...
  double seconds = 0.0;
  int steps = 0;
};

struct SequenceResult {
  std::vector<Classifier> checkpoints;  // state after each task
  MetricsTable metrics;
  std::vector<StageInfo> stages;
};

/// Runs record+inherit for every task after the first, evaluating on all seen
/// classes after each task. `artifact_dir`, when set, receives stage logs and
/// a generated-sample grid per incremental step.
SequenceResult run_sequence(Classifier initial, const TaskSequence& sequence,
                            const SequenceConfigs& cfgs,
                            const std::filesystem::path& artifact_dir = {});

}  // namespace genreplay
