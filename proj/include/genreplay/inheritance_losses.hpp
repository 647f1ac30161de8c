#pragma once

#include <vector>

#include "genreplay/tensor.hpp"

namespace genreplay {

struct DistillConfig {
  double temperature = 2.0;
  enum class Lambda4Mode { TaskIndexSchedule, Fixed } lambda4_mode = Lambda4Mode::TaskIndexSchedule;
  double fixed_lambda4 = 0.0;
  void validate() const;
};

/// Mean cross-entropy between softmax(new-head logits) and one-hot labels.
/// Labels are within-head indices.
double cross_entropy_loss(const Tensor& new_logits, const std::vector<int>& labels,
                          Tensor* dlogits = nullptr);

/// Mean cross-entropy between the temperature-softened teacher and student
/// distributions over the same columns; minimized exactly when the student
/// reproduces the teacher's softened distribution.
double kd_loss(const Tensor& teacher_logits, const Tensor& student_logits, double temperature,
               Tensor* dstudent = nullptr);

/// Distillation weight for the 1-based incremental step index:
/// task_index/(task_index+1) under the schedule, the fixed value otherwise.
double lambda4(int task_index, const DistillConfig& cfg);

struct InheritanceLossTerms {
  double ce = 0.0;
  double gkd = 0.0;
  double nkd = 0.0;
  double lam4 = 0.0;
  double total = 0.0;
};

/// (1 - lam4) * ce + lam4 * (gkd + nkd).
InheritanceLossTerms inheritance_loss(double ce, double gkd, double nkd, double lam4);

}  // namespace genreplay
