#include "genreplay/inheritance_losses.hpp"

#include <cmath>

#include "genreplay/errors.hpp"
#include "genreplay/probability.hpp"

namespace genreplay {

void DistillConfig::validate() const {
  if (!(temperature > 0.0)) throw ConfigError("distillation temperature must be > 0");
  if (lambda4_mode == Lambda4Mode::Fixed && (fixed_lambda4 < 0.0 || fixed_lambda4 > 1.0))
    throw ConfigError("fixed lambda4 must lie in [0, 1]");
}

double cross_entropy_loss(const Tensor& new_logits, const std::vector<int>& labels,
                          Tensor* dlogits) {
  int n = new_logits.dim(0), k = new_logits.dim(1);
  if (static_cast<int>(labels.size()) != n)
    throw DimensionError("cross_entropy_loss: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(n) + " rows");
  for (int i = 0; i < n; ++i) {
    int y = labels[static_cast<size_t>(i)];
    if (y < 0 || y >= k)
      throw LookupError("label " + std::to_string(y) + " out of range [0," + std::to_string(k) +
                        ") at row " + std::to_string(i));
  }
  Tensor p = row_softmax(new_logits);
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    int y = labels[static_cast<size_t>(i)];
    loss -= clamped_log(p.at(i, y));
    if (dlogits) {
      for (int j = 0; j < k; ++j)
        dlogits->at(i, j) += (p.at(i, j) - (j == y ? 1.0 : 0.0)) / n;
    }
  }
  return loss / n;
}

double kd_loss(const Tensor& teacher_logits, const Tensor& student_logits, double temperature,
               Tensor* dstudent) {
  if (!(temperature > 0.0)) throw ConfigError("kd_loss temperature must be > 0");
  if (teacher_logits.shape() != student_logits.shape())
    throw DimensionError("kd_loss shape mismatch: teacher " + teacher_logits.shape_str() +
                         " vs student " + student_logits.shape_str());
  int n = teacher_logits.dim(0), k = teacher_logits.dim(1);
  if (n == 0) throw DataError("kd_loss on empty batch");
  Tensor p = row_softmax(teacher_logits, temperature);
  Tensor q = row_softmax(student_logits, temperature);
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < k; ++j) {
      loss -= p.at(i, j) * clamped_log(q.at(i, j));
      if (dstudent) dstudent->at(i, j) += (q.at(i, j) - p.at(i, j)) / (temperature * n);
    }
  }
  return loss / n;
}

double lambda4(int task_index, const DistillConfig& cfg) {
  if (task_index < 1) throw ConfigError("lambda4 task_index must be >= 1");
  cfg.validate();
  if (cfg.lambda4_mode == DistillConfig::Lambda4Mode::Fixed) return cfg.fixed_lambda4;
  return static_cast<double>(task_index) / (task_index + 1.0);
}

InheritanceLossTerms inheritance_loss(double ce, double gkd, double nkd, double lam4) {
  if (lam4 < 0.0 || lam4 > 1.0) throw ConfigError("lambda4 must lie in [0, 1]");
  InheritanceLossTerms t;
  t.ce = ce;
  t.gkd = gkd;
  t.nkd = nkd;
  t.lam4 = lam4;
  t.total = (1.0 - lam4) * ce + lam4 * (gkd + nkd);
  return t;
}

}  // namespace genreplay
