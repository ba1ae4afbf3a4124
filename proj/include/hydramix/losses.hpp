#pragma once

#include "hydramix/errors.hpp"
#include "hydramix/tensor.hpp"

namespace hydramix {

// Symmetric cross-entropy weighting. delta scales the forward CE term, rho
// the reverse term; log_zero_clamp substitutes for log(0) in the reverse term.
struct SceConfig {
  float delta = 1.0f;
  float rho = 0.1f;
  float log_zero_clamp = -4.0f;
};

struct JointLossConfig {
  float mu = 0.8f;
  SceConfig sce_labelled{1.0f, 0.1f};
  SceConfig sce_unlabelled{0.1f, 1.0f};
};

// Classification predictions and the matching targets for one batch, shapes
// [n,C] for distributions and [n] for centroids. Targets carry no gradient.
struct HeadBatch {
  Tensor class_probs;
  Tensor cx;
  Tensor cy;
};

struct JointLossParts {
  Tensor total;
  Tensor sce_labelled;
  Tensor sce_unlabelled;
  Tensor mse_labelled;
  Tensor mse_unlabelled;
};

// Mean over the batch of -sum_c target_c * log(max(pred_c, 1e-7)).
Tensor cross_entropy(const Tensor& target, const Tensor& pred);

// Mean over the batch of -sum_c pred_c * log(target_c), where log(0) is
// replaced by clamp_value. The target side is treated as a constant.
Tensor reverse_cross_entropy(const Tensor& target, const Tensor& pred, float clamp_value);

Tensor sce(const Tensor& target, const Tensor& pred, const SceConfig& cfg);

Tensor mse(const Tensor& pred, const Tensor& target);

// MSE with a constant per-sample weight applied to each squared error before
// averaging. Used to gate centroid regression by predicted foreground mass.
Tensor gated_mse(const Tensor& pred, const Tensor& target, const std::vector<float>& gates);

// total = mu*(SCE_l + SCE_u) + (1-mu)*(MSE_lx + MSE_ly + MSE_ux + MSE_uy),
// regression terms gated per sample by 1 - p(background), background being
// the last class. The gate is a constant during backward. Either side may be
// empty (undefined tensors); its terms are then zero.
JointLossParts joint_loss(const HeadBatch& labelled_target, const HeadBatch& labelled_pred,
                          const HeadBatch& unlabelled_target, const HeadBatch& unlabelled_pred,
                          const JointLossConfig& cfg);

}  // namespace hydramix
