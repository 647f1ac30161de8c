#pragma once

#include <optional>
#include <vector>

#include "genreplay/model_zoo.hpp"
#include "genreplay/rng.hpp"
#include "genreplay/tensor.hpp"

namespace genreplay {

struct RecordingLossWeights {
  double lambda1 = 5.0;   // class diversity
  double lambda2 = 20.0;  // bn alignment
  double lambda3 = 0.1;   // pair diversity
  int pair_count = 200;
  void validate() const;
};

/// Divergence space for the pair-diversity term. Output compares the old
/// classifier's softmax on the two samples; Pixel compares the samples as
/// normalized pixel-mass distributions.
enum class DivergenceSpace { Output, Pixel };

/// A generated image batch with the frozen classifier's responses.
struct GeneratedBatch {
  Tensor images;   // (n, C, H, W); may be empty for output-space-only uses
  Tensor logits;   // (n, K)
  Tensor softmax;  // (n, K), rows sum to 1
  std::vector<int> pseudo_labels;  // per-row argmax

  static GeneratedBatch from_logits(Tensor logits, Tensor images = Tensor());
  int rows() const { return logits.dim(0); }
  int classes() const { return logits.dim(1); }
};

/// Mean cross-entropy between each softmax row and its own argmax one-hot;
/// zero iff every row is exactly one-hot. Optionally accumulates
/// d(loss)/d(logits).
double one_hot_loss(const GeneratedBatch& batch, Tensor* dlogits = nullptr);

/// Negative entropy of the mean softmax vector, in [-ln K, 0]; minimal when
/// generated classes are evenly distributed.
double class_diversity_loss(const GeneratedBatch& batch, Tensor* dlogits = nullptr);

/// Sum over layers of the Euclidean distances between the batch activation
/// statistics and the stored BN statistics. `dstats` receives d(loss)/d(batch
/// mean/variance) per layer when supplied.
double bn_alignment_loss(const std::vector<BnStats>& batch_stats,
                         const std::vector<BnStats>& stored,
                         std::vector<BnStats>* dstats = nullptr);

/// Mean over sampled unordered pairs of -1/2 (KL(p||q) + KL(q||p)); <= 0,
/// equal to 0 iff all paired distributions coincide. Pairs are drawn
/// uniformly without replacement from the batch.
double pair_diversity_loss(const GeneratedBatch& batch, int pair_count, Rng& rng,
                           DivergenceSpace space = DivergenceSpace::Output,
                           Tensor* dlogits = nullptr, Tensor* dimages = nullptr);

struct RecordingLossTerms {
  double one_hot = 0.0;
  double class_diversity = 0.0;
  double bn_alignment = 0.0;
  double pair_diversity = 0.0;
  double total = 0.0;
};

/// Weighted composition: oh + l1*cd + l2*bn + l3*div. Gradient outputs are
/// already scaled by the weights.
RecordingLossTerms recording_loss(const GeneratedBatch& batch,
                                  const std::vector<BnStats>& batch_stats,
                                  const std::vector<BnStats>& stored,
                                  const RecordingLossWeights& weights, Rng& rng,
                                  DivergenceSpace space = DivergenceSpace::Output,
                                  Tensor* dlogits = nullptr,
                                  std::vector<BnStats>* dstats = nullptr,
                                  Tensor* dimages = nullptr);

}  // namespace genreplay
