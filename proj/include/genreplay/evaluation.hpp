#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "genreplay/model_zoo.hpp"
#include "genreplay/task_stream.hpp"

namespace genreplay {

inline constexpr const char* kMetricsSchema = "genreplay-metrics v1";

struct MetricsRow {
  int task_index = 1;  // 1-based
  int seen_classes = 0;
  double top1_all = 0.0;
  std::optional<double> top1_old;  // absent for the first task
  double top1_new = 0.0;
  std::map<int, double> per_class;
};

struct MetricsTable {
  std::string method;
  std::string seed_label;  // seed number, or "mean"
  std::vector<MetricsRow> rows;

  std::string to_csv() const;
  std::string to_json() const;
  static MetricsTable from_csv(const std::string& text);
  static MetricsTable mean_over(const std::vector<MetricsTable>& tables);
};

/// Percentage of examples whose argmax over the class_scope logit columns
/// equals the true label. Labels must lie inside class_scope.
double top1(Classifier& model, const Subset& eval_split, const std::vector<int>& class_scope,
            const LabelMap& label_map, int eval_batch = 256);

struct PerClassAccuracy {
  std::map<int, double> accuracy;   // global class id -> percentage
  std::vector<int> skipped;         // classes with no eval examples
};

PerClassAccuracy per_class_accuracy(Classifier& model, const Subset& eval_split,
                                    const std::vector<int>& class_scope, const LabelMap& label_map,
                                    int eval_batch = 256);

/// Mean over the images of the old model's softmax restricted to the given
/// old classes; entries sum to 1.
std::vector<double> projected_probabilities(Classifier& old_model, const Tensor& new_images,
                                            const std::vector<int>& old_class_scope,
                                            const LabelMap& old_label_map, int eval_batch = 256);

struct ForgettingEntry {
  int class_id = 0;
  double before = 0.0, after = 0.0, delta = 0.0;
};

struct ForgettingReport {
  std::vector<ForgettingEntry> entries;            // sorted by delta, largest drop first
  std::map<std::string, double> group_deltas;      // mean delta per class group
  std::string to_csv() const;
};

/// delta = after - before per class; optional class->group labeling adds
/// group aggregates.
ForgettingReport forgetting_report(const std::map<int, double>& before,
                                   const std::map<int, double>& after,
                                   const std::map<int, std::string>* class_groups = nullptr);

}  // namespace genreplay
