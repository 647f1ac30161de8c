#include "genreplay/recording_losses.hpp"

#include <cmath>
#include <set>

#include "genreplay/errors.hpp"
#include "genreplay/probability.hpp"

namespace genreplay {

void RecordingLossWeights::validate() const {
  if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0)
    throw ConfigError("recording loss weights must be >= 0");
  if (pair_count < 1) throw ConfigError("pair_count must be >= 1");
}

GeneratedBatch GeneratedBatch::from_logits(Tensor logits, Tensor images) {
  if (logits.ndim() != 2) throw DimensionError("logits must be (n, K), got " + logits.shape_str());
  GeneratedBatch b;
  b.softmax = row_softmax(logits);
  b.pseudo_labels = row_argmax(b.softmax);
  b.logits = std::move(logits);
  b.images = std::move(images);
  return b;
}

double one_hot_loss(const GeneratedBatch& batch, Tensor* dlogits) {
  int n = batch.rows(), k = batch.classes();
  if (n == 0) throw DataError("one_hot_loss on empty batch");
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    int a = batch.pseudo_labels[static_cast<size_t>(i)];
    loss -= clamped_log(batch.softmax.at(i, a));
    if (dlogits) {
      for (int j = 0; j < k; ++j)
        dlogits->at(i, j) += (batch.softmax.at(i, j) - (j == a ? 1.0 : 0.0)) / n;
    }
  }
  return loss / n;
}

double class_diversity_loss(const GeneratedBatch& batch, Tensor* dlogits) {
  int n = batch.rows(), k = batch.classes();
  if (n == 0) throw DataError("class_diversity_loss on empty batch");
  std::vector<double> mean(static_cast<size_t>(k), 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j) mean[static_cast<size_t>(j)] += batch.softmax.at(i, j) / n;
  double loss = 0.0;
  std::vector<double> dmean(static_cast<size_t>(k), 0.0);
  for (int j = 0; j < k; ++j) {
    loss += mean[static_cast<size_t>(j)] * clamped_log(mean[static_cast<size_t>(j)]);
    dmean[static_cast<size_t>(j)] = clamped_log(mean[static_cast<size_t>(j)]) + 1.0;
  }
  if (dlogits) {
    std::vector<double> dp(static_cast<size_t>(k));
    for (int j = 0; j < k; ++j) dp[static_cast<size_t>(j)] = dmean[static_cast<size_t>(j)] / n;
    for (int i = 0; i < n; ++i) {
      softmax_backward_row(batch.softmax.data() + static_cast<size_t>(i) * k, dp.data(),
                           dlogits->data() + static_cast<size_t>(i) * k, k);
    }
  }
  return loss;
}

double bn_alignment_loss(const std::vector<BnStats>& batch_stats,
                         const std::vector<BnStats>& stored, std::vector<BnStats>* dstats) {
  if (batch_stats.size() != stored.size())
    throw ConfigError("bn_alignment_loss: " + std::to_string(batch_stats.size()) +
                      " batch stat layers vs " + std::to_string(stored.size()) + " stored layers");
  double loss = 0.0;
  if (dstats) dstats->clear();
  for (size_t l = 0; l < stored.size(); ++l) {
    const BnStats& b = batch_stats[l];
    const BnStats& s = stored[l];
    if (b.channel_count != s.channel_count)
      throw ConfigError("bn_alignment_loss: channel mismatch at layer " + std::to_string(l));
    int c = s.channel_count;
    double mean_sq = 0.0, var_sq = 0.0;
    for (int i = 0; i < c; ++i) {
      double dm = b.mean[i] - s.mean[i];
      double dv = b.variance[i] - s.variance[i];
      mean_sq += dm * dm;
      var_sq += dv * dv;
    }
    double mean_norm = std::sqrt(mean_sq), var_norm = std::sqrt(var_sq);
    loss += mean_norm + var_norm;
    if (dstats) {
      BnStats g;
      g.channel_count = c;
      g.mean = Tensor({c});
      g.variance = Tensor({c});
      for (int i = 0; i < c; ++i) {
        g.mean[i] = mean_norm > 1e-12 ? (b.mean[i] - s.mean[i]) / mean_norm : 0.0;
        g.variance[i] = var_norm > 1e-12 ? (b.variance[i] - s.variance[i]) / var_norm : 0.0;
      }
      dstats->push_back(std::move(g));
    }
  }
  return loss;
}

namespace {

// Unordered distinct pairs, uniform without replacement; all pairs when the
// batch is small enough.
std::vector<std::pair<int, int>> sample_pairs(int n, int pair_count, Rng& rng) {
  int64_t all = static_cast<int64_t>(n) * (n - 1) / 2;
  std::vector<std::pair<int, int>> pairs;
  if (all <= pair_count) {
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) pairs.emplace_back(i, j);
    return pairs;
  }
  std::set<std::pair<int, int>> seen;
  while (static_cast<int>(pairs.size()) < pair_count) {
    int i = rng.uniform_int(n);
    int j = rng.uniform_int(n - 1);
    if (j >= i) ++j;
    auto p = std::minmax(i, j);
    if (seen.insert({p.first, p.second}).second) pairs.emplace_back(p.first, p.second);
  }
  return pairs;
}

// -1/2 (KL(p||q) + KL(q||p)) over two probability vectors plus gradients wrt
// p and q.
double neg_sym_kl(const double* p, const double* q, int k, double* dp, double* dq) {
  double kl_pq = 0.0, kl_qp = 0.0;
  for (int j = 0; j < k; ++j) {
    kl_pq += p[j] * (clamped_log(p[j]) - clamped_log(q[j]));
    kl_qp += q[j] * (clamped_log(q[j]) - clamped_log(p[j]));
  }
  if (dp && dq) {
    for (int j = 0; j < k; ++j) {
      double pj = std::max(p[j], kProbFloor), qj = std::max(q[j], kProbFloor);
      // d/dp of KL(p||q) and KL(q||p)
      dp[j] = -0.5 * ((std::log(pj) - std::log(qj) + 1.0) - qj / pj);
      dq[j] = -0.5 * ((std::log(qj) - std::log(pj) + 1.0) - pj / qj);
    }
  }
  return -0.5 * (kl_pq + kl_qp);
}

}  // namespace

double pair_diversity_loss(const GeneratedBatch& batch, int pair_count, Rng& rng,
                           DivergenceSpace space, Tensor* dlogits, Tensor* dimages) {
  int n = batch.rows();
  if (n < 2) throw DataError("pair_diversity_loss needs a batch of size >= 2, got " +
                             std::to_string(n));
  auto pairs = sample_pairs(n, pair_count, rng);
  double inv = 1.0 / static_cast<double>(pairs.size());
  double loss = 0.0;

  if (space == DivergenceSpace::Output) {
    int k = batch.classes();
    std::vector<double> dp(static_cast<size_t>(k)), dq(static_cast<size_t>(k));
    for (auto [i, j] : pairs) {
      const double* p = batch.softmax.data() + static_cast<size_t>(i) * k;
      const double* q = batch.softmax.data() + static_cast<size_t>(j) * k;
      loss += neg_sym_kl(p, q, k, dlogits ? dp.data() : nullptr, dlogits ? dq.data() : nullptr);
      if (dlogits) {
        for (double& v : dp) v *= inv;
        for (double& v : dq) v *= inv;
        softmax_backward_row(p, dp.data(), dlogits->data() + static_cast<size_t>(i) * k, k);
        softmax_backward_row(q, dq.data(), dlogits->data() + static_cast<size_t>(j) * k, k);
      }
    }
    return loss * inv;
  }

  // Pixel space: each image becomes a distribution over pixel positions.
  if (batch.images.empty())
    throw ConfigError("pixel-space diversity requires images in the batch");
  int d = batch.images.size() / n;
  const double eps = 1e-6;
  std::vector<double> pi(static_cast<size_t>(d)), qi(static_cast<size_t>(d));
  std::vector<double> dp(static_cast<size_t>(d)), dq(static_cast<size_t>(d));
  auto normalize = [&](int row, std::vector<double>& out, double& total) {
    const double* x = batch.images.data() + static_cast<size_t>(row) * d;
    total = 0.0;
    for (int t = 0; t < d; ++t) {
      out[static_cast<size_t>(t)] = (x[t] + 1.0) * 0.5 + eps;
      total += out[static_cast<size_t>(t)];
    }
    for (int t = 0; t < d; ++t) out[static_cast<size_t>(t)] /= total;
  };
  auto backprop_norm = [&](int row, const std::vector<double>& probs, const std::vector<double>& dprob,
                           double total) {
    if (!dimages) return;
    double dot = 0.0;
    for (int t = 0; t < d; ++t) dot += dprob[static_cast<size_t>(t)] * probs[static_cast<size_t>(t)];
    double* gx = dimages->data() + static_cast<size_t>(row) * d;
    for (int t = 0; t < d; ++t)
      gx[t] += 0.5 * (dprob[static_cast<size_t>(t)] - dot) / total;
  };
  for (auto [i, j] : pairs) {
    double ti = 0.0, tj = 0.0;
    normalize(i, pi, ti);
    normalize(j, qi, tj);
    loss += neg_sym_kl(pi.data(), qi.data(), d, dimages ? dp.data() : nullptr,
                       dimages ? dq.data() : nullptr);
    if (dimages) {
      for (double& v : dp) v *= inv;
      for (double& v : dq) v *= inv;
      backprop_norm(i, pi, dp, ti);
      backprop_norm(j, qi, dq, tj);
    }
  }
  return loss * inv;
}

RecordingLossTerms recording_loss(const GeneratedBatch& batch,
                                  const std::vector<BnStats>& batch_stats,
                                  const std::vector<BnStats>& stored,
                                  const RecordingLossWeights& weights, Rng& rng,
                                  DivergenceSpace space, Tensor* dlogits,
                                  std::vector<BnStats>* dstats, Tensor* dimages) {
  weights.validate();
  RecordingLossTerms terms;
  terms.one_hot = one_hot_loss(batch, dlogits);

  Tensor cd_grad;
  Tensor* cd_gp = nullptr;
  if (dlogits && weights.lambda1 != 0.0) {
    cd_grad = Tensor(dlogits->shape());
    cd_gp = &cd_grad;
  }
  terms.class_diversity = class_diversity_loss(batch, cd_gp);
  if (cd_gp) dlogits->add_scaled(cd_grad, weights.lambda1);

  terms.bn_alignment = bn_alignment_loss(batch_stats, stored, dstats);
  if (dstats && weights.lambda2 != 1.0) {
    for (BnStats& g : *dstats) {
      g.mean *= weights.lambda2;
      g.variance *= weights.lambda2;
    }
  }

  Tensor div_grad, div_img_grad;
  Tensor* div_gp = nullptr;
  Tensor* div_ip = nullptr;
  if (weights.lambda3 != 0.0) {
    if (dlogits && space == DivergenceSpace::Output) {
      div_grad = Tensor(dlogits->shape());
      div_gp = &div_grad;
    }
    if (dimages && space == DivergenceSpace::Pixel) {
      div_img_grad = Tensor(batch.images.shape());
      div_ip = &div_img_grad;
    }
  }
  terms.pair_diversity = pair_diversity_loss(batch, weights.pair_count, rng, space, div_gp, div_ip);
  if (div_gp) dlogits->add_scaled(div_grad, weights.lambda3);
  if (div_ip) dimages->add_scaled(div_img_grad, weights.lambda3);

  terms.total = terms.one_hot + weights.lambda1 * terms.class_diversity +
                weights.lambda2 * terms.bn_alignment + weights.lambda3 * terms.pair_diversity;
  return terms;
}

}  // namespace genreplay
