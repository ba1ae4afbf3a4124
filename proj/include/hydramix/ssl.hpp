#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "hydramix/data.hpp"
#include "hydramix/errors.hpp"
#include "hydramix/model.hpp"
#include "hydramix/rng.hpp"

namespace hydramix {

// Exact pixel-grid symmetries; anything else would need interpolation.
enum class AugKind {
  kIdentity,
  kHorizontalFlip,
  kVerticalFlip,
  kRotate90,
  kRotate180,
  kRotate270,
};

const char* aug_name(AugKind kind);

AugKind sample_aug(Rng& rng);

// dst and src are h*w*c interleaved rows; dst must not alias src. Rotations
// require h == w.
void apply_aug(AugKind kind, const float* src, float* dst, int h, int w, int c);

// The centroid motion induced by the pixel transform, in normalized [0,1]
// coordinates.
std::pair<float, float> transform_centroid(AugKind kind, std::pair<float, float> centroid);

struct AugmentedView {
  Patch patch;
  AugKind op;
};

std::vector<AugmentedView> augment_k(const Patch& u, int k, Rng& rng);

struct PseudoLabel {
  std::vector<float> probs;
  float cx = 0.0f;
  float cy = 0.0f;
};

// Class distribution averaged over k augmented views; centroid predicted on
// the original image only. Runs the model in eval mode.
PseudoLabel pseudo_label(Model& model, const Patch& u, int k, Rng& rng);
std::vector<PseudoLabel> pseudo_label_batch(Model& model, const std::vector<UnlabelledPatch>& batch,
                                            int k, Rng& rng);

// out_i = d_i^(1/T) / sum_j d_j^(1/T), computed in double via the max-scaled
// form so extreme temperatures stay finite.
std::vector<float> sharpen(const std::vector<float>& d, float temperature);

// max(b, 1-b) for b ~ Beta(alpha, beta); always in [0.5, 1].
float sample_gamma(float alpha, float beta, Rng& rng);

// One mixup participant: image plus soft label plus centroid target.
struct MixItem {
  std::vector<float> image;
  std::vector<float> label;
  float cx = 0.5f;
  float cy = 0.5f;
  float gamma = 1.0f;
};

// Convex image/label mix weighted toward a; centroid copied from a unmixed.
MixItem mixup(const MixItem& a, const MixItem& b, float gamma);

struct MixedBatches {
  std::vector<MixItem> labelled;
  std::vector<MixItem> unlabelled;
};

// Concatenates both batches into a shuffled pool W, then mixes the labelled
// batch with W[0..|labelled|) and the unlabelled batch with the rest. One
// side may be empty; both empty is an error.
MixedBatches mix_batches(const std::vector<MixItem>& labelled,
                         const std::vector<MixItem>& unlabelled, float alpha, float beta,
                         Rng& rng);

}  // namespace hydramix
