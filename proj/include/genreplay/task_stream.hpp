#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "genreplay/tensor.hpp"

namespace genreplay {

/// Materialized labeled image collection. Labels are global class ids,
/// indices into class_names.
struct Dataset {
  Tensor images;  // (N, C, H, W), values in [-1, 1]
  std::vector<int> labels;
  std::vector<std::string> class_names;
  std::string digest;  // content digest, set at construction/load

  int size() const { return static_cast<int>(labels.size()); }
  int num_classes() const { return static_cast<int>(class_names.size()); }
  Tensor image(int i) const;
  std::string compute_digest() const;
};

/// Index view over a dataset (train/eval split of one or more tasks).
struct Subset {
  std::shared_ptr<const Dataset> data;
  std::vector<int> indices;
  int size() const { return static_cast<int>(indices.size()); }
  int label(int i) const { return data->labels[static_cast<size_t>(indices[static_cast<size_t>(i)])]; }
  Tensor gather_images(const std::vector<int>& rows) const;
};

struct TaskSpec {
  int task_index = 0;
  std::vector<int> class_set;  // ordered global class ids
  Subset train_split;
  Subset eval_split;
};

struct TaskSequence {
  std::vector<TaskSpec> tasks;
  std::string protocol_name;
  uint64_t seed = 0;

  int num_tasks() const { return static_cast<int>(tasks.size()); }
  /// Classes of tasks [0, upto] in task order.
  std::vector<int> classes_through(int upto) const;
  std::string manifest_json() const;
};

/// Bidirectional mapping between global class ids and (task, head offset).
class LabelMap {
 public:
  void register_task(const std::vector<int>& class_set);
  std::pair<int, int> map_label(int global_id) const;  // (task_index, head_offset)
  int to_column(int global_id) const;                  // flat logit column
  int from_column(int column) const;                   // back to global id
  int num_tasks() const { return static_cast<int>(head_offsets_.size()); }
  int total_classes() const { return static_cast<int>(column_to_global_.size()); }
  const std::vector<int>& head_offsets() const { return head_offsets_; }
  static LabelMap for_sequence(const TaskSequence& seq, int through_task);

 private:
  std::map<int, std::pair<int, int>> global_to_head_;
  std::vector<int> head_offsets_;  // cumulative class count at the start of each task
  std::vector<int> column_to_global_;
};

enum class SplitProtocol { EqualPhase, HalfThenEqual };

struct ProtocolSpec {
  SplitProtocol kind = SplitProtocol::EqualPhase;
  int phases = 2;
  std::string name() const;
  static ProtocolSpec parse(const std::string& text);  // "equal-phase(5)" or "half-then-equal"
};

/// Shuffles class ids by seed (unless shuffle=false) and splits them
/// contiguously according to the protocol. Returns class sets only.
std::vector<std::vector<int>> split_classes(int num_classes, const ProtocolSpec& protocol,
                                            uint64_t seed, bool shuffle = true);

/// Binds a class-set skeleton to concrete datasets.
TaskSequence materialize_tasks(std::shared_ptr<const Dataset> train,
                               std::shared_ptr<const Dataset> eval,
                               const std::vector<std::vector<int>>& skeleton,
                               const ProtocolSpec& protocol, uint64_t seed);

// --- Dataset sources ------------------------------------------------------

struct SyntheticSpec {
  int num_classes = 10;
  int per_class_train = 200;
  int per_class_eval = 60;
  int channels = 3;
  int height = 12;
  int width = 12;
  int confusable_pairs = 0;  // leading 2*p classes form p near-identical pairs
  double noise = 0.18;
  uint64_t seed = 1234;      // dataset identity; independent of run seeds
};

struct DatasetPair {
  std::shared_ptr<const Dataset> train;
  std::shared_ptr<const Dataset> eval;
};

/// Procedural blob dataset: each class is a localized colored pattern plus
/// pixel noise and jitter. Confusable pairs share pattern and position and
/// differ only by a small low-contrast marker.
DatasetPair make_synthetic_dataset(const SyntheticSpec& spec);

/// Loads a class-per-directory tree of PGM/PPM images:
///   root/<class_name>/<image>.(pgm|ppm), plus optional manifest.json fixing
///   class order. Splits: root/train/..., root/eval/...
DatasetPair load_directory_dataset(const std::filesystem::path& root);

/// Writes a dataset pair in the directory layout above.
void save_directory_dataset(const std::filesystem::path& root, const DatasetPair& data);

/// Resolves a descriptor: "synth:tenclass", "synth:fineblobs",
/// "synth:blobs?classes=8&train=100&...", or "dir:/path/to/root".
DatasetPair open_dataset(const std::string& descriptor);

}  // namespace genreplay
