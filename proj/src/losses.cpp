#include "hydramix/losses.hpp"

#include <cmath>

namespace hydramix {

namespace {

constexpr float kPredFloor = 1e-7f;

void require_dist_pair(const Tensor& target, const Tensor& pred, const char* op) {
  if (target.rank() != 2 || pred.rank() != 2) {
    throw ArgumentError(std::string(op) + ": expected [n,C] tensors, got " +
                        shape_str(target.shape()) + " and " + shape_str(pred.shape()));
  }
  if (target.shape() != pred.shape()) {
    throw ArgumentError(std::string(op) + ": target " + shape_str(target.shape()) +
                        " and pred " + shape_str(pred.shape()) + " differ");
  }
  if (target.dim(0) == 0) throw ArgumentError(std::string(op) + ": empty batch");
}

}  // namespace

Tensor cross_entropy(const Tensor& target, const Tensor& pred) {
  require_dist_pair(target, pred, "cross_entropy");
  int64_t n = pred.dim(0);
  Tensor log_p = log_clamped(pred, kPredFloor);
  return scale(sum(mul(target, log_p)), -1.0f / float(n));
}

Tensor reverse_cross_entropy(const Tensor& target, const Tensor& pred, float clamp_value) {
  require_dist_pair(target, pred, "reverse_cross_entropy");
  if (!(clamp_value < 0.0f)) {
    throw ArgumentError("reverse_cross_entropy: clamp must be negative, got " +
                        std::to_string(clamp_value));
  }
  int64_t n = pred.dim(0);
  auto tv = target.values();
  std::vector<float> log_t(tv.size());
  for (size_t i = 0; i < log_t.size(); ++i) {
    log_t[i] = tv[i] == 0.0f ? clamp_value : std::log(tv[i]);
  }
  Tensor log_t_const = Tensor::from_data(target.shape(), std::move(log_t));
  return scale(sum(mul(pred, log_t_const)), -1.0f / float(n));
}

Tensor sce(const Tensor& target, const Tensor& pred, const SceConfig& cfg) {
  if (cfg.delta < 0.0f || cfg.rho < 0.0f) {
    throw ConfigError("sce: delta and rho must be non-negative");
  }
  if (cfg.rho == 0.0f) return scale(cross_entropy(target, pred), cfg.delta);
  if (cfg.delta == 0.0f) {
    return scale(reverse_cross_entropy(target, pred, cfg.log_zero_clamp), cfg.rho);
  }
  return add(scale(cross_entropy(target, pred), cfg.delta),
             scale(reverse_cross_entropy(target, pred, cfg.log_zero_clamp), cfg.rho));
}

Tensor mse(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) {
    throw ArgumentError("mse: shapes " + shape_str(pred.shape()) + " and " +
                        shape_str(target.shape()) + " differ");
  }
  if (pred.numel() == 0) throw ArgumentError("mse: empty input");
  Tensor d = sub(pred, target);
  return mean(mul(d, d));
}

Tensor gated_mse(const Tensor& pred, const Tensor& target, const std::vector<float>& gates) {
  if (pred.shape() != target.shape()) {
    throw ArgumentError("gated_mse: shapes " + shape_str(pred.shape()) + " and " +
                        shape_str(target.shape()) + " differ");
  }
  if (pred.numel() != int64_t(gates.size())) {
    throw ArgumentError("gated_mse: " + std::to_string(gates.size()) + " gates for " +
                        std::to_string(pred.numel()) + " samples");
  }
  if (pred.numel() == 0) throw ArgumentError("gated_mse: empty input");
  Tensor gate_const = Tensor::from_data(pred.shape(), std::vector<float>(gates));
  Tensor d = sub(pred, target);
  return mean(mul(gate_const, mul(d, d)));
}

namespace {

// 1 - p(background) per sample, read off the prediction as plain numbers so
// no gradient reaches the classification head through the gate.
std::vector<float> foreground_gates(const Tensor& class_probs) {
  int64_t n = class_probs.dim(0), c = class_probs.dim(1);
  auto pv = class_probs.values();
  std::vector<float> gates(size_t(n), 0.0f);
  for (int64_t i = 0; i < n; ++i) gates[size_t(i)] = 1.0f - pv[size_t(i * c + c - 1)];
  return gates;
}

struct SideTerms {
  Tensor sce_term;
  Tensor mse_term;
};

SideTerms side_terms(const HeadBatch& target, const HeadBatch& pred, const SceConfig& cfg) {
  if (!pred.class_probs.defined() || pred.class_probs.dim(0) == 0) {
    return {Tensor::scalar(0.0f), Tensor::scalar(0.0f)};
  }
  std::vector<float> gates = foreground_gates(pred.class_probs);
  Tensor mse_x = gated_mse(pred.cx, target.cx, gates);
  Tensor mse_y = gated_mse(pred.cy, target.cy, gates);
  return {sce(target.class_probs, pred.class_probs, cfg), add(mse_x, mse_y)};
}

}  // namespace

JointLossParts joint_loss(const HeadBatch& labelled_target, const HeadBatch& labelled_pred,
                          const HeadBatch& unlabelled_target, const HeadBatch& unlabelled_pred,
                          const JointLossConfig& cfg) {
  if (cfg.mu < 0.0f || cfg.mu > 1.0f) {
    throw ConfigError("joint_loss: mu must lie in [0,1], got " + std::to_string(cfg.mu));
  }
  SideTerms lab = side_terms(labelled_target, labelled_pred, cfg.sce_labelled);
  SideTerms unl = side_terms(unlabelled_target, unlabelled_pred, cfg.sce_unlabelled);

  JointLossParts parts;
  parts.sce_labelled = lab.sce_term;
  parts.sce_unlabelled = unl.sce_term;
  parts.mse_labelled = lab.mse_term;
  parts.mse_unlabelled = unl.mse_term;
  parts.total = add(scale(add(lab.sce_term, unl.sce_term), cfg.mu),
                    scale(add(lab.mse_term, unl.mse_term), 1.0f - cfg.mu));
  return parts;
}

}  // namespace hydramix
