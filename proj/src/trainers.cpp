#include "genreplay/trainers.hpp"

#include <chrono>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "genreplay/errors.hpp"
#include "genreplay/io.hpp"
#include "genreplay/probability.hpp"

namespace genreplay {

// ---------------------------------------------------------------------------
// Optimizers

SgdMomentum::SgdMomentum(std::vector<Tensor*> params, std::vector<Tensor*> grads, double lr,
                         double momentum)
    : params_(std::move(params)), grads_(std::move(grads)), lr_(lr), momentum_(momentum) {
  for (Tensor* p : params_) velocity_.emplace_back(p->shape());
}

void SgdMomentum::step() {
  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = *params_[i];
    const Tensor& g = *grads_[i];
    Tensor& v = velocity_[i];
    for (int j = 0; j < p.size(); ++j) {
      v[j] = momentum_ * v[j] + g[j];
      p[j] -= lr_ * v[j];
    }
  }
}

RmsProp::RmsProp(std::vector<Tensor*> params, std::vector<Tensor*> grads, double lr, double rho,
                 double eps)
    : params_(std::move(params)), grads_(std::move(grads)), lr_(lr), rho_(rho), eps_(eps) {
  for (Tensor* p : params_) sq_accum_.emplace_back(p->shape());
}

void RmsProp::step() {
  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = *params_[i];
    const Tensor& g = *grads_[i];
    Tensor& s = sq_accum_[i];
    for (int j = 0; j < p.size(); ++j) {
      s[j] = rho_ * s[j] + (1.0 - rho_) * g[j] * g[j];
      p[j] -= lr_ * g[j] / (std::sqrt(s[j]) + eps_);
    }
  }
}

// ---------------------------------------------------------------------------
// Config validation

void RecordingConfig::validate() const {
  if (epochs < 1) throw ConfigError("recording epochs must be >= 1");
  if (steps_per_epoch < 1) throw ConfigError("recording steps_per_epoch must be >= 1");
  if (batch_size < 2) throw ConfigError("recording batch_size must be >= 2");
  if (!(learning_rate > 0)) throw ConfigError("recording learning_rate must be > 0");
  if (noise_dim < 1) throw ConfigError("noise_dim must be >= 1");
  weights.validate();
}

void Ratio::validate() const {
  if (num < 1 || den < 1 || num < den)
    throw ConfigError("replay ratio " + str() + " must satisfy num >= den >= 1");
}

Ratio Ratio::parse(const std::string& text) {
  Ratio r;
  if (std::sscanf(text.c_str(), "%d:%d", &r.num, &r.den) != 2)
    throw ConfigError("bad ratio '" + text + "', expected N:M");
  r.validate();
  return r;
}

void InheritanceConfig::validate() const {
  if (epochs < 1) throw ConfigError("inheritance epochs must be >= 1");
  if (!(learning_rate > 0)) throw ConfigError("inheritance learning_rate must be > 0");
  if (new_batch_size < 1) throw ConfigError("new_batch_size must be >= 1");
  if (rejection_budget < 1) throw ConfigError("rejection_budget must be >= 1");
  replay_ratio.validate();
  distill.validate();
}

void InitialConfig::validate() const {
  if (epochs < 1) throw ConfigError("initial epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("initial batch_size must be >= 1");
  if (!(learning_rate > 0)) throw ConfigError("initial learning_rate must be > 0");
}

namespace {

// Step decay: /10 at ceil(E/2), /100 at ceil(3E/4).
double lr_for_epoch(double base, int epoch, int total_epochs) {
  int t1 = (total_epochs + 1) / 2;
  int t2 = (3 * total_epochs + 3) / 4;
  if (epoch >= t2) return base * 0.01;
  if (epoch >= t1) return base * 0.1;
  return base;
}

void check_finite(double total, const std::string& stage, int step, const std::string& breakdown) {
  if (!std::isfinite(total))
    throw NumericError(stage + " diverged at step " + std::to_string(step) + ": " + breakdown);
}

Tensor extract_block(const Tensor& m, int row0, int rows, int col0, int cols) {
  Tensor out({rows, cols});
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) out.at(i, j) = m.at(row0 + i, col0 + j);
  return out;
}

void scatter_scaled(Tensor& dst, const Tensor& src, int row0, int col0, double w) {
  for (int i = 0; i < src.dim(0); ++i)
    for (int j = 0; j < src.dim(1); ++j) dst.at(row0 + i, col0 + j) += w * src.at(i, j);
}

uint64_t derive_seed(uint64_t base, uint64_t tag, uint64_t index) {
  return splitmix64(splitmix64(base) ^ splitmix64(tag) ^ (0x9e3779b97f4a7c15ULL * (index + 1)));
}

constexpr uint64_t kTagNoise = 0x6e6f697365ULL;
constexpr uint64_t kTagPairs = 0x7061697273ULL;
constexpr uint64_t kTagBatches = 0x62617463ULL;
constexpr uint64_t kTagHead = 0x68656164ULL;
constexpr uint64_t kTagReplay = 0x7265706cULL;
constexpr uint64_t kTagGrid = 0x67726964ULL;
constexpr uint64_t kTagInit = 0x696e6974ULL;

}  // namespace

// ---------------------------------------------------------------------------
// BalancedBatchIterator

BalancedBatchIterator::BalancedBatchIterator(const Subset& split, const std::vector<int>& class_set,
                                             int batch_size, uint64_t seed)
    : split_(&split), rng_(Rng::from(seed, kTagBatches)) {
  int k = static_cast<int>(class_set.size());
  if (k == 0) throw ConfigError("batch iterator needs a non-empty class set");
  if (batch_size % k != 0)
    throw ConfigError("batch size " + std::to_string(batch_size) + " is not divisible by " +
                      std::to_string(k) + " classes");
  per_class_ = batch_size / k;
  std::map<int, int> within;
  for (int i = 0; i < k; ++i) within[class_set[static_cast<size_t>(i)]] = i;
  by_class_.assign(static_cast<size_t>(k), {});
  for (int i = 0; i < split.size(); ++i) {
    auto it = within.find(split.label(i));
    if (it == within.end())
      throw DataError("split contains label " + std::to_string(split.label(i)) +
                      " outside the task class set");
    by_class_[static_cast<size_t>(it->second)].push_back(i);
  }
  steps_per_epoch_ = INT32_MAX;
  for (int c = 0; c < k; ++c) {
    int count = static_cast<int>(by_class_[static_cast<size_t>(c)].size());
    steps_per_epoch_ = std::min(steps_per_epoch_, count / per_class_);
  }
  if (steps_per_epoch_ < 1)
    throw ConfigError("not enough examples per class for batch size " +
                      std::to_string(batch_size));
  cursor_.assign(static_cast<size_t>(k), 0);
  reshuffle();
}

void BalancedBatchIterator::reshuffle() {
  for (auto& rows : by_class_) rng_.shuffle(rows);
  std::fill(cursor_.begin(), cursor_.end(), 0);
  step_in_epoch_ = 0;
}

std::vector<int> BalancedBatchIterator::next() {
  if (step_in_epoch_ >= steps_per_epoch_) reshuffle();
  std::vector<int> rows;
  batch_labels_.clear();
  for (size_t c = 0; c < by_class_.size(); ++c) {
    for (int i = 0; i < per_class_; ++i) {
      rows.push_back(by_class_[c][static_cast<size_t>(cursor_[c]++)]);
      batch_labels_.push_back(static_cast<int>(c));
    }
  }
  ++step_in_epoch_;
  return rows;
}

// ---------------------------------------------------------------------------
// Balanced replay batches

ReplayBatch build_balanced_batch(Generator& generator, Classifier& old_classifier,
                                 const Tensor& new_images, const std::vector<int>& new_labels,
                                 const Ratio& ratio, Rng& rng, int rejection_budget) {
  ratio.validate();
  int old_classes = old_classifier.total_classes();
  if (generator.config().covered_classes != old_classes)
    throw ConfigError("generator covers " + std::to_string(generator.config().covered_classes) +
                      " classes but the classifier has " + std::to_string(old_classes));
  if (new_labels.empty()) throw ConfigError("build_balanced_batch needs a non-empty new batch");

  std::map<int, int> counts;
  for (int l : new_labels) ++counts[l];
  int per_class_new = counts.begin()->second;
  for (const auto& [l, c] : counts)
    if (c != per_class_new)
      throw ConfigError("new batch is not class-balanced (label " + std::to_string(l) + " has " +
                        std::to_string(c) + " of " + std::to_string(per_class_new) + ")");
  if ((per_class_new * ratio.num) % ratio.den != 0)
    throw ConfigError("ratio " + ratio.str() + " does not divide per-class count " +
                      std::to_string(per_class_new));
  int quota = per_class_new * ratio.num / ratio.den;
  int total_needed = quota * old_classes;

  const InputShape& shape = generator.config().out_shape;
  Tensor accepted({total_needed, shape.channels, shape.height, shape.width});
  std::vector<int> filled(static_cast<size_t>(old_classes), 0);
  int classes_done = 0;
  long generated = 0;
  long budget = static_cast<long>(rejection_budget) * total_needed;
  size_t img_sz = static_cast<size_t>(shape.channels) * shape.height * shape.width;
  int chunk = std::max(32, total_needed);
  while (classes_done < old_classes && generated < budget) {
    int this_chunk = static_cast<int>(std::min<long>(chunk, budget - generated));
    Tensor noise = rng.normal_tensor({this_chunk, generator.config().noise_dim});
    Tensor imgs = generator.generate(noise);
    Tensor logits = old_classifier.forward(imgs, Mode::Eval);
    std::vector<int> pseudo = row_argmax(logits);
    for (int i = 0; i < this_chunk; ++i) {
      int c = pseudo[static_cast<size_t>(i)];
      if (filled[static_cast<size_t>(c)] >= quota) continue;
      int slot = c * quota + filled[static_cast<size_t>(c)];
      std::copy(imgs.data() + static_cast<size_t>(i) * img_sz,
                imgs.data() + static_cast<size_t>(i + 1) * img_sz,
                accepted.data() + static_cast<size_t>(slot) * img_sz);
      if (++filled[static_cast<size_t>(c)] == quota) ++classes_done;
    }
    generated += this_chunk;
  }
  if (classes_done < old_classes) {
    std::vector<int> starving;
    std::string msg = "replay quota unfilled after " + std::to_string(generated) +
                      " generated samples; starving classes:";
    for (int c = 0; c < old_classes; ++c)
      if (filled[static_cast<size_t>(c)] < quota) {
        starving.push_back(c);
        msg += " " + std::to_string(c) + "(" + std::to_string(filled[static_cast<size_t>(c)]) +
               "/" + std::to_string(quota) + ")";
      }
    throw BalanceError(msg, std::move(starving));
  }

  ReplayBatch batch;
  batch.generated_count = total_needed;
  batch.real_count = static_cast<int>(new_labels.size());
  batch.teacher_logits_gen = old_classifier.forward(accepted, Mode::Eval);
  batch.pseudo_labels = row_argmax(batch.teacher_logits_gen);
  batch.teacher_logits_real = old_classifier.forward(new_images, Mode::Eval);
  batch.labels = new_labels;
  batch.images = concat_rows({&accepted, &new_images});
  return batch;
}

// ---------------------------------------------------------------------------
// Stage I

RecordingResult record_knowledge(Classifier& old_classifier, const RecordingConfig& cfg,
                                 const std::filesystem::path& log_csv) {
  cfg.validate();
  if (old_classifier.num_heads() < 1)
    throw ConfigError("record_knowledge needs a classifier with at least one head");
  std::vector<BnStats> stored = old_classifier.extract_bn_stats();
  std::string digest_before = old_classifier.param_digest();

  Generator generator(matching_generator_arch(old_classifier.arch_id(), cfg.noise_dim),
                      derive_seed(cfg.seed, kTagInit, 0));
  RmsProp opt(generator.params(), generator.grads(), cfg.learning_rate);
  Rng noise_rng = Rng::from(cfg.seed, kTagNoise);
  auto bn_layers = old_classifier.bn_layers();

  std::optional<CsvLogger> log;
  if (!log_csv.empty()) log.emplace(log_csv, "step,loss_oh,loss_cd,loss_bn,loss_div,total");

  RecordingResult result{std::move(generator), {}, 0};
  int total_steps = cfg.epochs * cfg.steps_per_epoch;
  bool pixel_space = cfg.divergence_space == DivergenceSpace::Pixel;
  for (int step = 0; step < total_steps; ++step) {
    Tensor noise = noise_rng.normal_tensor({cfg.batch_size, cfg.noise_dim});
    Tensor images = result.generator.forward_train(noise);
    Tensor logits = old_classifier.forward(images, Mode::Eval);
    GeneratedBatch batch = GeneratedBatch::from_logits(std::move(logits),
                                                       pixel_space ? images : Tensor());

    std::vector<BnStats> batch_stats;
    batch_stats.reserve(bn_layers.size());
    for (BatchNorm2d* bn : bn_layers)
      batch_stats.push_back(BnStats{bn->batch_mean(), bn->batch_var(), bn->channels});

    Rng pair_rng = Rng::from(cfg.seed, kTagPairs ^ (0x9e3779b97f4a7c15ULL * (step + 1)));
    Tensor dlogits(batch.logits.shape());
    std::vector<BnStats> dstats;
    Tensor dimages_extra;
    if (pixel_space) dimages_extra = Tensor(images.shape());
    RecordingLossTerms terms =
        recording_loss(batch, batch_stats, stored, cfg.weights, pair_rng, cfg.divergence_space,
                       &dlogits, &dstats, pixel_space ? &dimages_extra : nullptr);
    {
      std::ostringstream bd;
      bd << "oh=" << terms.one_hot << " cd=" << terms.class_diversity
         << " bn=" << terms.bn_alignment << " div=" << terms.pair_diversity;
      check_finite(terms.total, "knowledge recording", step, bd.str());
    }
    for (size_t l = 0; l < bn_layers.size(); ++l)
      bn_layers[l]->set_stat_grads(dstats[l].mean, dstats[l].variance);
    Tensor dimages = old_classifier.backward(dlogits);
    if (pixel_space) dimages += dimages_extra;

    result.generator.zero_grads();
    result.generator.backward(dimages);
    opt.step();
    old_classifier.zero_grads();

    if (log)
      log->append_row({static_cast<double>(step), terms.one_hot, terms.class_diversity,
                       terms.bn_alignment, terms.pair_diversity, terms.total});
    result.final_terms = terms;
    ++result.steps;
  }
  result.generator.set_covered_classes(old_classifier.total_classes());
  if (old_classifier.param_digest() != digest_before)
    throw std::logic_error("knowledge recording modified the frozen classifier");
  return result;
}

// ---------------------------------------------------------------------------
// Stage II engines

namespace {

struct Stage2Common {
  Classifier student;
  Classifier teacher;
  int old_cols = 0;
  int new_cols = 0;
};

Stage2Common stage2_setup(const Classifier& old_classifier, const TaskSpec& new_task,
                          const InheritanceConfig& cfg) {
  cfg.validate();
  Stage2Common s{old_classifier.clone(), old_classifier.clone()};
  s.old_cols = old_classifier.total_classes();
  s.new_cols = static_cast<int>(new_task.class_set.size());
  s.student.expand_head(s.new_cols, derive_seed(cfg.seed, kTagHead, 0));
  return s;
}

void log_stage2_row(std::optional<CsvLogger>& log, int step, const InheritanceLossTerms& t) {
  if (log)
    log->append_row({static_cast<double>(step), t.ce, t.gkd, t.nkd, t.lam4, t.total});
}

std::string stage2_breakdown(const InheritanceLossTerms& t) {
  std::ostringstream bd;
  bd << "ce=" << t.ce << " gkd=" << t.gkd << " nkd=" << t.nkd << " lam4=" << t.lam4;
  return bd.str();
}

}  // namespace

InheritanceResult inherit_knowledge(const Classifier& old_classifier, Generator* generator,
                                    const TaskSpec& new_task, const InheritanceConfig& cfg,
                                    int task_index, bool use_nkd,
                                    const std::filesystem::path& log_csv) {
  if (task_index < 1) throw ConfigError("inherit_knowledge task_index must be >= 1");
  if (generator && generator->config().covered_classes != old_classifier.total_classes())
    throw ConfigError("generator covers " +
                      std::to_string(generator->config().covered_classes) +
                      " classes but the old classifier has " +
                      std::to_string(old_classifier.total_classes()));
  Stage2Common s = stage2_setup(old_classifier, new_task, cfg);
  std::string teacher_digest = s.teacher.param_digest();
  SgdMomentum opt(s.student.params(), s.student.grads(), cfg.learning_rate, cfg.momentum);
  BalancedBatchIterator iter(new_task.train_split, new_task.class_set, cfg.new_batch_size,
                             cfg.seed);
  Rng replay_rng = Rng::from(cfg.seed, kTagReplay);
  double lam4 = lambda4(task_index, cfg.distill);

  std::optional<CsvLogger> log;
  if (!log_csv.empty()) log.emplace(log_csv, "step,loss_ce,loss_gkd,loss_nkd,lambda4,total");

  InheritanceResult result{std::move(s.student), {}};
  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    opt.set_lr(lr_for_epoch(cfg.learning_rate, epoch, cfg.epochs));
    for (int it = 0; it < iter.steps_per_epoch(); ++it, ++step) {
      std::vector<int> rows = iter.next();
      std::vector<int> labels = iter.batch_labels();
      Tensor real_images = new_task.train_split.gather_images(rows);

      ReplayBatch rb;
      if (generator) {
        rb = build_balanced_batch(*generator, s.teacher, real_images, labels, cfg.replay_ratio,
                                  replay_rng, cfg.rejection_budget);
      } else {
        rb.images = std::move(real_images);
        rb.labels = std::move(labels);
        rb.real_count = static_cast<int>(rb.labels.size());
        if (use_nkd) rb.teacher_logits_real = s.teacher.forward(rb.images, Mode::Eval);
      }

      Tensor logits = result.classifier.forward(rb.images, Mode::Train);
      Tensor dlogits(logits.shape());

      Tensor new_logits =
          extract_block(logits, rb.generated_count, rb.real_count, s.old_cols, s.new_cols);
      Tensor dce(new_logits.shape());
      double ce = cross_entropy_loss(new_logits, rb.labels, &dce);
      scatter_scaled(dlogits, dce, rb.generated_count, s.old_cols, 1.0 - lam4);

      double gkd = 0.0, nkd = 0.0;
      if (generator) {
        Tensor student_gen = extract_block(logits, 0, rb.generated_count, 0, s.old_cols);
        Tensor dg(student_gen.shape());
        gkd = kd_loss(rb.teacher_logits_gen, student_gen, cfg.distill.temperature, &dg);
        scatter_scaled(dlogits, dg, 0, 0, lam4);
      }
      if (use_nkd) {
        Tensor student_real = extract_block(logits, rb.generated_count, rb.real_count, 0, s.old_cols);
        Tensor dn(student_real.shape());
        nkd = kd_loss(rb.teacher_logits_real, student_real, cfg.distill.temperature, &dn);
        scatter_scaled(dlogits, dn, rb.generated_count, 0, lam4);
      }

      InheritanceLossTerms terms = inheritance_loss(ce, gkd, nkd, lam4);
      check_finite(terms.total, "knowledge inheritance", step, stage2_breakdown(terms));
      result.classifier.zero_grads();
      result.classifier.backward(dlogits);
      opt.step();
      result.trace.push_back(terms);
      log_stage2_row(log, step, terms);
    }
  }
  if (s.teacher.param_digest() != teacher_digest)
    throw std::logic_error("knowledge inheritance modified the frozen teacher");
  return result;
}

InheritanceResult finetune_task(const Classifier& old_classifier, const TaskSpec& new_task,
                                const InheritanceConfig& cfg,
                                const std::filesystem::path& log_csv) {
  Stage2Common s = stage2_setup(old_classifier, new_task, cfg);
  SgdMomentum opt(s.student.params(), s.student.grads(), cfg.learning_rate, cfg.momentum);
  BalancedBatchIterator iter(new_task.train_split, new_task.class_set, cfg.new_batch_size,
                             cfg.seed);
  std::optional<CsvLogger> log;
  if (!log_csv.empty()) log.emplace(log_csv, "step,loss_ce,loss_gkd,loss_nkd,lambda4,total");

  InheritanceResult result{std::move(s.student), {}};
  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    opt.set_lr(lr_for_epoch(cfg.learning_rate, epoch, cfg.epochs));
    for (int it = 0; it < iter.steps_per_epoch(); ++it, ++step) {
      std::vector<int> rows = iter.next();
      std::vector<int> labels = iter.batch_labels();
      Tensor images = new_task.train_split.gather_images(rows);
      Tensor logits = result.classifier.forward(images, Mode::Train);
      Tensor dlogits(logits.shape());
      Tensor new_logits = extract_block(logits, 0, logits.dim(0), s.old_cols, s.new_cols);
      Tensor dce(new_logits.shape());
      double ce = cross_entropy_loss(new_logits, labels, &dce);
      scatter_scaled(dlogits, dce, 0, s.old_cols, 1.0 - 0.0);
      InheritanceLossTerms terms = inheritance_loss(ce, 0.0, 0.0, 0.0);
      check_finite(terms.total, "finetune", step, stage2_breakdown(terms));
      result.classifier.zero_grads();
      result.classifier.backward(dlogits);
      opt.step();
      result.trace.push_back(terms);
      log_stage2_row(log, step, terms);
    }
  }
  return result;
}

InheritanceResult lwf_task(const Classifier& old_classifier, const TaskSpec& new_task,
                           const InheritanceConfig& cfg, int task_index,
                           const std::filesystem::path& log_csv) {
  if (task_index < 1) throw ConfigError("lwf_task task_index must be >= 1");
  Stage2Common s = stage2_setup(old_classifier, new_task, cfg);
  std::string teacher_digest = s.teacher.param_digest();
  SgdMomentum opt(s.student.params(), s.student.grads(), cfg.learning_rate, cfg.momentum);
  BalancedBatchIterator iter(new_task.train_split, new_task.class_set, cfg.new_batch_size,
                             cfg.seed);
  double lam4 = lambda4(task_index, cfg.distill);
  std::optional<CsvLogger> log;
  if (!log_csv.empty()) log.emplace(log_csv, "step,loss_ce,loss_gkd,loss_nkd,lambda4,total");

  InheritanceResult result{std::move(s.student), {}};
  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    opt.set_lr(lr_for_epoch(cfg.learning_rate, epoch, cfg.epochs));
    for (int it = 0; it < iter.steps_per_epoch(); ++it, ++step) {
      std::vector<int> rows = iter.next();
      std::vector<int> labels = iter.batch_labels();
      Tensor images = new_task.train_split.gather_images(rows);
      Tensor teacher_logits = s.teacher.forward(images, Mode::Eval);
      Tensor logits = result.classifier.forward(images, Mode::Train);
      Tensor dlogits(logits.shape());
      Tensor new_logits = extract_block(logits, 0, logits.dim(0), s.old_cols, s.new_cols);
      Tensor dce(new_logits.shape());
      double ce = cross_entropy_loss(new_logits, labels, &dce);
      scatter_scaled(dlogits, dce, 0, s.old_cols, 1.0 - lam4);
      Tensor student_old = extract_block(logits, 0, logits.dim(0), 0, s.old_cols);
      Tensor dn(student_old.shape());
      double nkd = kd_loss(teacher_logits, student_old, cfg.distill.temperature, &dn);
      scatter_scaled(dlogits, dn, 0, 0, lam4);
      InheritanceLossTerms terms = inheritance_loss(ce, 0.0, nkd, lam4);
      check_finite(terms.total, "lwf", step, stage2_breakdown(terms));
      result.classifier.zero_grads();
      result.classifier.backward(dlogits);
      opt.step();
      result.trace.push_back(terms);
      log_stage2_row(log, step, terms);
    }
  }
  if (s.teacher.param_digest() != teacher_digest)
    throw std::logic_error("lwf modified the frozen teacher");
  return result;
}

Classifier train_initial(const std::string& arch_id, const TaskSpec& task1,
                         const InitialConfig& cfg, const std::filesystem::path& log_csv) {
  cfg.validate();
  Classifier model(arch_id, derive_seed(cfg.seed, kTagInit, 1));
  model.expand_head(static_cast<int>(task1.class_set.size()), derive_seed(cfg.seed, kTagHead, 1));
  SgdMomentum opt(model.params(), model.grads(), cfg.learning_rate, cfg.momentum);
  BalancedBatchIterator iter(task1.train_split, task1.class_set, cfg.batch_size, cfg.seed);
  std::optional<CsvLogger> log;
  if (!log_csv.empty()) log.emplace(log_csv, "step,loss_ce");
  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    opt.set_lr(lr_for_epoch(cfg.learning_rate, epoch, cfg.epochs));
    for (int it = 0; it < iter.steps_per_epoch(); ++it, ++step) {
      std::vector<int> rows = iter.next();
      std::vector<int> labels = iter.batch_labels();
      Tensor images = task1.train_split.gather_images(rows);
      Tensor logits = model.forward(images, Mode::Train);
      Tensor dlogits(logits.shape());
      double ce = cross_entropy_loss(logits, labels, &dlogits);
      check_finite(ce, "initial training", step, "ce=" + std::to_string(ce));
      model.zero_grads();
      model.backward(dlogits);
      opt.step();
      if (log) log->append_row({static_cast<double>(step), ce});
    }
  }
  return model;
}

// ---------------------------------------------------------------------------
// Sequence driver

void MethodFlags::validate() const {
  if (use_div && !use_bn)
    throw ConfigError(
        "invalid ablation: the pair-diversity recording term requires the bn-alignment term");
  if (!use_replay && (use_bn || use_div)) {
    // bn/div only shape the recording stage; without replay they are inert.
  }
}

std::string MethodFlags::label() const {
  if (!use_replay) return use_nkd ? "lwf" : "finetune";
  if (use_bn && use_div && use_nkd) return "ours";
  std::string g = "g";
  if (use_bn) g += "bn";
  if (use_div) g += "+div";
  if (g == "g") g = "gbase";
  return use_nkd ? ("lwf-" + g) : g;
}

MethodFlags MethodFlags::for_method(Method m) {
  switch (m) {
    case Method::Finetune: return MethodFlags{false, false, false, false};
    case Method::Lwf: return MethodFlags{false, false, false, true};
    case Method::Ours: return MethodFlags{true, true, true, true};
    case Method::Variant: return MethodFlags{};
  }
  return MethodFlags{};
}

namespace {

struct EvalScope {
  Subset all, old_part, new_part;
};

EvalScope eval_scopes(const TaskSequence& seq, int through_task) {
  EvalScope s;
  auto data = seq.tasks[0].eval_split.data;
  s.all.data = data;
  s.old_part.data = data;
  s.new_part.data = data;
  for (int t = 0; t <= through_task; ++t) {
    const auto& idx = seq.tasks[static_cast<size_t>(t)].eval_split.indices;
    s.all.indices.insert(s.all.indices.end(), idx.begin(), idx.end());
    if (t < through_task) s.old_part.indices.insert(s.old_part.indices.end(), idx.begin(), idx.end());
    else s.new_part.indices = idx;
  }
  return s;
}

MetricsRow evaluate_task(Classifier& model, const TaskSequence& seq, int through_task) {
  MetricsRow row;
  row.task_index = through_task + 1;
  std::vector<int> scope = seq.classes_through(through_task);
  row.seen_classes = static_cast<int>(scope.size());
  LabelMap map = LabelMap::for_sequence(seq, through_task);
  EvalScope s = eval_scopes(seq, through_task);
  row.top1_all = top1(model, s.all, scope, map);
  row.top1_new = top1(model, s.new_part, scope, map);
  if (through_task > 0) row.top1_old = top1(model, s.old_part, scope, map);
  row.per_class = per_class_accuracy(model, s.all, scope, map).accuracy;
  return row;
}

}  // namespace

SequenceResult run_sequence(Classifier initial, const TaskSequence& sequence,
                            const SequenceConfigs& cfgs, const std::filesystem::path& artifact_dir) {
  cfgs.flags.validate();
  if (sequence.num_tasks() < 1) throw ConfigError("run_sequence needs at least one task");
  if (initial.num_heads() != 1 ||
      initial.total_classes() != static_cast<int>(sequence.tasks[0].class_set.size()))
    throw ConfigError("initial classifier does not match task 1 (" +
                      std::to_string(initial.total_classes()) + " classes vs " +
                      std::to_string(sequence.tasks[0].class_set.size()) + ")");
  bool keep_artifacts = !artifact_dir.empty();
  if (keep_artifacts) std::filesystem::create_directories(artifact_dir);

  SequenceResult result;
  result.metrics.method = cfgs.flags.label();
  result.metrics.seed_label = std::to_string(cfgs.seed);
  Classifier current = std::move(initial);
  result.metrics.rows.push_back(evaluate_task(current, sequence, 0));
  result.checkpoints.push_back(current.clone());

  for (int t = 1; t < sequence.num_tasks(); ++t) {
    const TaskSpec& task = sequence.tasks[static_cast<size_t>(t)];
    auto t0 = std::chrono::steady_clock::now();
    InheritanceConfig icfg = cfgs.inherit;
    icfg.seed = derive_seed(cfgs.seed, 0x696e68ULL, static_cast<uint64_t>(t));

    std::optional<InheritanceResult> inherited;
    if (cfgs.flags.use_replay) {
      RecordingConfig rcfg = cfgs.record;
      rcfg.seed = derive_seed(cfgs.seed, 0x726563ULL, static_cast<uint64_t>(t));
      if (!cfgs.flags.use_bn) rcfg.weights.lambda2 = 0.0;
      if (!cfgs.flags.use_div) rcfg.weights.lambda3 = 0.0;
      RecordingResult rec = record_knowledge(
          current, rcfg,
          keep_artifacts ? artifact_dir / ("record_task" + std::to_string(t + 1) + ".csv")
                         : std::filesystem::path());
      result.stages.push_back({"record-" + std::to_string(t + 1),
                               std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                                   .count(),
                               rec.steps});
      if (keep_artifacts) {
        Rng grid_rng = Rng::from(cfgs.seed, kTagGrid + static_cast<uint64_t>(t));
        Tensor noise = grid_rng.normal_tensor({64, rcfg.noise_dim});
        Tensor samples = rec.generator.generate(noise);
        write_image_grid_ppm(artifact_dir / ("generated_task" + std::to_string(t + 1) + ".ppm"),
                             samples, 8);
      }
      auto t1 = std::chrono::steady_clock::now();
      inherited = inherit_knowledge(
          current, &rec.generator, task, icfg, t, cfgs.flags.use_nkd,
          keep_artifacts ? artifact_dir / ("inherit_task" + std::to_string(t + 1) + ".csv")
                         : std::filesystem::path());
      result.stages.push_back(
          {"inherit-" + std::to_string(t + 1),
           std::chrono::duration<double>(std::chrono::steady_clock::now() - t1).count(),
           static_cast<int>(inherited->trace.size())});
    } else {
      std::filesystem::path log =
          keep_artifacts ? artifact_dir / ("inherit_task" + std::to_string(t + 1) + ".csv")
                         : std::filesystem::path();
      inherited = cfgs.flags.use_nkd ? lwf_task(current, task, icfg, t, log)
                                     : finetune_task(current, task, icfg, log);
      result.stages.push_back(
          {"inherit-" + std::to_string(t + 1),
           std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(),
           static_cast<int>(inherited->trace.size())});
    }
    current = std::move(inherited->classifier);
    result.metrics.rows.push_back(evaluate_task(current, sequence, t));
    result.checkpoints.push_back(current.clone());
  }
  return result;
}

}  // namespace genreplay
