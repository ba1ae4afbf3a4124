#include "hydramix/ssl.hpp"

#include <cmath>

namespace hydramix {

const char* aug_name(AugKind kind) {
  switch (kind) {
    case AugKind::kIdentity: return "identity";
    case AugKind::kHorizontalFlip: return "horizontal_flip";
    case AugKind::kVerticalFlip: return "vertical_flip";
    case AugKind::kRotate90: return "rotate90";
    case AugKind::kRotate180: return "rotate180";
    case AugKind::kRotate270: return "rotate270";
  }
  return "?";
}

AugKind sample_aug(Rng& rng) { return AugKind(rng.uniform_int(6)); }

void apply_aug(AugKind kind, const float* src, float* dst, int h, int w, int c) {
  bool rotation = kind == AugKind::kRotate90 || kind == AugKind::kRotate270;
  if (rotation && h != w) {
    throw ArgumentError("augment: quarter rotations need square images, got " +
                        std::to_string(h) + "x" + std::to_string(w));
  }
  auto src_px = [&](int y, int x) { return src + (size_t(y) * w + x) * c; };
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const float* s = nullptr;
      switch (kind) {
        case AugKind::kIdentity: s = src_px(y, x); break;
        case AugKind::kHorizontalFlip: s = src_px(y, w - 1 - x); break;
        case AugKind::kVerticalFlip: s = src_px(h - 1 - y, x); break;
        case AugKind::kRotate90: s = src_px(x, w - 1 - y); break;
        case AugKind::kRotate180: s = src_px(h - 1 - y, w - 1 - x); break;
        case AugKind::kRotate270: s = src_px(h - 1 - x, y); break;
      }
      float* d = dst + (size_t(y) * w + x) * c;
      for (int ch = 0; ch < c; ++ch) d[ch] = s[ch];
    }
  }
}

std::pair<float, float> transform_centroid(AugKind kind, std::pair<float, float> centroid) {
  auto [cx, cy] = centroid;
  switch (kind) {
    case AugKind::kIdentity: return {cx, cy};
    case AugKind::kHorizontalFlip: return {1.0f - cx, cy};
    case AugKind::kVerticalFlip: return {cx, 1.0f - cy};
    case AugKind::kRotate90: return {cy, 1.0f - cx};
    case AugKind::kRotate180: return {1.0f - cx, 1.0f - cy};
    case AugKind::kRotate270: return {1.0f - cy, cx};
  }
  return centroid;
}

std::vector<AugmentedView> augment_k(const Patch& u, int k, Rng& rng) {
  if (k <= 0) throw ArgumentError("augment: k must be >= 1, got " + std::to_string(k));
  std::vector<AugmentedView> views;
  views.reserve(size_t(k));
  for (int i = 0; i < k; ++i) {
    AugKind op = sample_aug(rng);
    AugmentedView view;
    view.op = op;
    view.patch = u;
    apply_aug(op, u.image.data(), view.patch.image.data(), u.height, u.width, u.channels);
    if (u.centroid) view.patch.centroid = transform_centroid(op, *u.centroid);
    views.push_back(std::move(view));
  }
  return views;
}

namespace {

Tensor batch_tensor(const std::vector<const float*>& images, int h, int w, int c) {
  int64_t n = int64_t(images.size());
  int64_t px = int64_t(h) * w * c;
  std::vector<float> data(size_t(n * px), 0.0f);
  for (int64_t i = 0; i < n; ++i) {
    std::copy(images[size_t(i)], images[size_t(i)] + px, data.begin() + i * px);
  }
  return Tensor::from_data({n, h, w, c}, std::move(data));
}

}  // namespace

std::vector<PseudoLabel> pseudo_label_batch(Model& model, const std::vector<UnlabelledPatch>& batch,
                                            int k, Rng& rng) {
  if (k <= 0) throw ArgumentError("pseudo_label: k must be >= 1, got " + std::to_string(k));
  if (batch.empty()) throw ArgumentError("pseudo_label: empty batch");
  int h = model.config().input_size, w = h, c = kPatchChannels;
  size_t px = size_t(h) * w * c;
  for (const UnlabelledPatch& u : batch) {
    if (u.image.size() != px) {
      throw ArgumentError("pseudo_label: image has " + std::to_string(u.image.size()) +
                          " values, model expects " + std::to_string(px));
    }
  }
  int64_t n = int64_t(batch.size());
  int num_classes = model.config().num_classes;

  std::vector<std::vector<AugKind>> ops(batch.size());
  for (auto& sample_ops : ops) {
    sample_ops.resize(size_t(k));
    for (int j = 0; j < k; ++j) sample_ops[size_t(j)] = sample_aug(rng);
  }

  // Pseudo-label forwards are consumed as constants, so keep them off the
  // autodiff graph.
  NoGradGuard guard;
  std::vector<double> prob_acc(size_t(n) * size_t(num_classes), 0.0);
  std::vector<float> view(px, 0.0f);
  std::vector<float> view_data;
  for (int j = 0; j < k; ++j) {
    view_data.assign(size_t(n) * px, 0.0f);
    for (int64_t i = 0; i < n; ++i) {
      apply_aug(ops[size_t(i)][size_t(j)], batch[size_t(i)].image.data(), view.data(), h, w, c);
      std::copy(view.begin(), view.end(), view_data.begin() + i * int64_t(px));
    }
    ModelOutput out = model.forward(Tensor::from_data({n, h, w, c}, std::move(view_data)), false);
    auto pv = out.class_probs.values();
    for (size_t i = 0; i < prob_acc.size(); ++i) prob_acc[i] += pv[i];
    view_data.clear();
  }

  std::vector<const float*> originals;
  originals.reserve(batch.size());
  for (const UnlabelledPatch& u : batch) originals.push_back(u.image.data());
  ModelOutput orig = model.forward(batch_tensor(originals, h, w, c), false);
  auto cxv = orig.cx.values();
  auto cyv = orig.cy.values();

  std::vector<PseudoLabel> labels(batch.size());
  for (int64_t i = 0; i < n; ++i) {
    PseudoLabel& pl = labels[size_t(i)];
    pl.probs.resize(size_t(num_classes));
    for (int cc = 0; cc < num_classes; ++cc) {
      pl.probs[size_t(cc)] = float(prob_acc[size_t(i * num_classes + cc)] / double(k));
    }
    pl.cx = cxv[size_t(i)];
    pl.cy = cyv[size_t(i)];
  }
  return labels;
}

PseudoLabel pseudo_label(Model& model, const Patch& u, int k, Rng& rng) {
  std::vector<UnlabelledPatch> batch(1);
  batch[0].image = u.image;
  return pseudo_label_batch(model, batch, k, rng)[0];
}

std::vector<float> sharpen(const std::vector<float>& d, float temperature) {
  if (!(temperature > 0.0f)) {
    throw ArgumentError("sharpen: temperature must be positive, got " +
                        std::to_string(temperature));
  }
  if (d.empty()) throw ArgumentError("sharpen: empty distribution");
  double mx = 0.0;
  for (float v : d) {
    if (v < 0.0f || !std::isfinite(v)) {
      throw ArgumentError("sharpen: invalid probability " + std::to_string(v));
    }
    mx = std::max(mx, double(v));
  }
  if (mx == 0.0) throw ArgumentError("sharpen: all-zero distribution");

  std::vector<double> raised(d.size());
  if (temperature == 1.0f) {
    for (size_t i = 0; i < d.size(); ++i) raised[i] = double(d[i]);
  } else {
    // Normalize by the max inside the power so 1/T up to 1000 stays finite.
    double inv_t = 1.0 / double(temperature);
    for (size_t i = 0; i < d.size(); ++i) {
      raised[i] = d[i] > 0.0f ? std::exp(inv_t * (std::log(double(d[i])) - std::log(mx))) : 0.0;
    }
  }
  double denom = 0.0;
  for (double v : raised) denom += v;
  std::vector<float> out(d.size());
  for (size_t i = 0; i < d.size(); ++i) out[i] = float(raised[i] / denom);
  return out;
}

float sample_gamma(float alpha, float beta, Rng& rng) {
  if (!(alpha > 0.0f) || !(beta > 0.0f)) {
    throw ArgumentError("sample_gamma: shape parameters must be positive");
  }
  double b = rng.beta(double(alpha), double(beta));
  return float(std::max(b, 1.0 - b));
}

MixItem mixup(const MixItem& a, const MixItem& b, float gamma) {
  if (gamma < 0.5f || gamma > 1.0f) {
    throw ArgumentError("mixup: gamma must lie in [0.5,1], got " + std::to_string(gamma));
  }
  if (a.image.size() != b.image.size()) {
    throw ArgumentError("mixup: image sizes differ, " + std::to_string(a.image.size()) + " vs " +
                        std::to_string(b.image.size()));
  }
  if (a.label.size() != b.label.size()) {
    throw ArgumentError("mixup: label sizes differ, " + std::to_string(a.label.size()) + " vs " +
                        std::to_string(b.label.size()));
  }
  MixItem out;
  out.image.resize(a.image.size());
  out.label.resize(a.label.size());
  float inv = 1.0f - gamma;
  for (size_t i = 0; i < a.image.size(); ++i) out.image[i] = gamma * a.image[i] + inv * b.image[i];
  for (size_t i = 0; i < a.label.size(); ++i) out.label[i] = gamma * a.label[i] + inv * b.label[i];
  out.cx = a.cx;
  out.cy = a.cy;
  out.gamma = gamma;
  return out;
}

MixedBatches mix_batches(const std::vector<MixItem>& labelled,
                         const std::vector<MixItem>& unlabelled, float alpha, float beta,
                         Rng& rng) {
  if (labelled.empty() && unlabelled.empty()) {
    throw ArgumentError("mix_batches: both batches empty");
  }
  std::vector<MixItem> pool;
  pool.reserve(labelled.size() + unlabelled.size());
  pool.insert(pool.end(), labelled.begin(), labelled.end());
  pool.insert(pool.end(), unlabelled.begin(), unlabelled.end());
  rng.shuffle(pool);

  MixedBatches out;
  out.labelled.reserve(labelled.size());
  out.unlabelled.reserve(unlabelled.size());
  size_t nl = labelled.size();
  for (size_t i = 0; i < nl; ++i) {
    out.labelled.push_back(mixup(labelled[i], pool[i], sample_gamma(alpha, beta, rng)));
  }
  for (size_t i = 0; i < unlabelled.size(); ++i) {
    out.unlabelled.push_back(mixup(unlabelled[i], pool[nl + i], sample_gamma(alpha, beta, rng)));
  }
  return out;
}

}  // namespace hydramix
