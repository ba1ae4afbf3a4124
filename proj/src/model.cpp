#include "hydramix/model.hpp"

#include <cmath>

namespace hydramix {

namespace {

void validate_config(const ModelConfig& c) {
  if (c.depth <= 4 || (c.depth - 4) % 6 != 0) {
    throw ConfigError("model: depth must satisfy (depth-4) %% 6 == 0 with depth > 4, got " +
                      std::to_string(c.depth));
  }
  if (c.width < 1) throw ConfigError("model: width must be >= 1, got " + std::to_string(c.width));
  if (c.num_classes < 2) {
    throw ConfigError("model: num_classes must be >= 2, got " + std::to_string(c.num_classes));
  }
  if (c.input_size < 8) {
    throw ConfigError("model: input_size must be >= 8, got " + std::to_string(c.input_size));
  }
  if (c.l2_coeff < 0.0f) throw ConfigError("model: l2_coeff must be >= 0");
}

int64_t ceil_div(int64_t a, int64_t b) { return (a + b - 1) / b; }

Tensor he_uniform(Shape shape, int64_t fan_in, Rng& rng) {
  float limit = std::sqrt(6.0f / float(fan_in));
  int64_t n = shape_numel(shape);
  std::vector<float> data(size_t(n), 0.0f);
  for (float& v : data) v = float(rng.uniform(-limit, limit));
  return Tensor::from_data(std::move(shape), std::move(data));
}

}  // namespace

Model::Conv Model::make_conv(int kh, int kw, int in_c, int out_c, int stride, Padding padding,
                             Rng& rng) {
  Conv conv;
  conv.kernel = he_uniform({kh, kw, in_c, out_c}, int64_t(kh) * kw * in_c, rng);
  conv.kernel.set_requires_grad(true);
  conv.stride = stride;
  conv.padding = padding;
  params_.push_back(conv.kernel);
  return conv;
}

Model::Bn Model::make_bn(int channels) {
  Bn bn;
  bn.gamma = Tensor::full({channels}, 1.0f);
  bn.beta = Tensor::zeros({channels});
  bn.gamma.set_requires_grad(true);
  bn.beta.set_requires_grad(true);
  bn.state = BatchNormState(channels);
  params_.push_back(bn.gamma);
  params_.push_back(bn.beta);
  return bn;
}

Model::Dense Model::make_dense(int in_dim, int out_dim, Rng& rng) {
  Dense d;
  d.w = he_uniform({in_dim, out_dim}, in_dim, rng);
  d.b = Tensor::zeros({out_dim});
  d.w.set_requires_grad(true);
  d.b.set_requires_grad(true);
  params_.push_back(d.w);
  params_.push_back(d.b);
  dense_weights_.push_back(d.w);
  return d;
}

Model::Model(const ModelConfig& config, uint64_t seed) : config_(config) {
  validate_config(config);
  Rng rng = Rng::stream(seed, {0x6d6f64656cULL});

  int n_blocks = (config.depth - 4) / 6;
  int widths[3] = {16 * config.width, 32 * config.width, 64 * config.width};
  int strides[3] = {1, 2, 2};

  stem_ = make_conv(3, 3, 3, 16, 1, Padding::kSame, rng);

  int in_c = 16;
  for (int g = 0; g < 3; ++g) {
    for (int b = 0; b < n_blocks; ++b) {
      int stride = b == 0 ? strides[g] : 1;
      int out_c = widths[g];
      Block blk;
      blk.bn1 = make_bn(in_c);
      blk.conv1 = make_conv(3, 3, in_c, out_c, stride, Padding::kSame, rng);
      blk.bn2 = make_bn(out_c);
      blk.conv2 = make_conv(3, 3, out_c, out_c, 1, Padding::kSame, rng);
      if (stride != 1 || in_c != out_c) {
        blk.has_shortcut = true;
        blk.shortcut = make_conv(1, 1, in_c, out_c, stride, Padding::kSame, rng);
      }
      blocks_.push_back(std::move(blk));
      in_c = out_c;
    }
  }
  final_bn_ = make_bn(in_c);

  int64_t feat_hw = config.input_size;
  feat_hw = ceil_div(ceil_div(feat_hw, 2), 2);
  int64_t flat_dim = feat_hw * feat_hw * in_c;

  cls_head_.push_back(make_dense(in_c, 128, rng));
  cls_head_.push_back(make_dense(128, 64, rng));
  cls_head_.push_back(make_dense(64, 32, rng));
  cls_head_.push_back(make_dense(32, config.num_classes, rng));

  for (auto* head : {&cx_head_, &cy_head_}) {
    head->push_back(make_dense(int(flat_dim), 128, rng));
    head->push_back(make_dense(128, 32, rng));
    head->push_back(make_dense(32, 1, rng));
  }
}

Tensor Model::dense_forward(const Dense& d, const Tensor& x) {
  return add(matmul(x, d.w), d.b);
}

Tensor Model::block_forward(Block& blk, const Tensor& x, bool training) {
  Tensor h = relu(batchnorm(x, blk.bn1.gamma, blk.bn1.beta, blk.bn1.state, training));
  Tensor out = conv2d(h, blk.conv1.kernel, blk.conv1.stride, blk.conv1.padding);
  out = relu(batchnorm(out, blk.bn2.gamma, blk.bn2.beta, blk.bn2.state, training));
  out = conv2d(out, blk.conv2.kernel, blk.conv2.stride, blk.conv2.padding);
  Tensor skip = blk.has_shortcut
                    ? conv2d(h, blk.shortcut.kernel, blk.shortcut.stride, blk.shortcut.padding)
                    : x;
  return add(out, skip);
}

ModelOutput Model::forward(const Tensor& batch, bool training) {
  if (batch.rank() != 4 || batch.dim(1) != config_.input_size ||
      batch.dim(2) != config_.input_size || batch.dim(3) != 3) {
    throw ShapeError("model: expected input [n," + std::to_string(config_.input_size) + "," +
                     std::to_string(config_.input_size) + ",3], got " + shape_str(batch.shape()));
  }

  std::unique_ptr<NoGradGuard> guard;
  if (!training) guard = std::make_unique<NoGradGuard>();

  Tensor h = conv2d(batch, stem_.kernel, stem_.stride, stem_.padding);
  for (Block& blk : blocks_) h = block_forward(blk, h, training);
  Tensor feat = relu(batchnorm(h, final_bn_.gamma, final_bn_.beta, final_bn_.state, training));

  Tensor pooled = global_avg_pool(feat);
  Tensor c = pooled;
  for (size_t i = 0; i + 1 < cls_head_.size(); ++i) c = relu(dense_forward(cls_head_[i], c));
  ModelOutput out;
  out.class_probs = softmax(dense_forward(cls_head_.back(), c));

  Tensor flat = flatten(feat);
  int64_t n = batch.dim(0);
  for (auto* pair : {&cx_head_, &cy_head_}) {
    Tensor r = flat;
    auto& head = *pair;
    for (size_t i = 0; i + 1 < head.size(); ++i) r = relu(dense_forward(head[i], r));
    Tensor coord = reshape(sigmoid(dense_forward(head.back(), r)), {n});
    (pair == &cx_head_ ? out.cx : out.cy) = coord;
  }
  return out;
}

Tensor Model::l2_penalty() const {
  Tensor acc;
  for (const Tensor& w : dense_weights_) {
    Tensor term = sum(mul(w, w));
    acc = acc.defined() ? add(acc, term) : term;
  }
  return scale(acc, config_.l2_coeff);
}

int64_t Model::parameter_count() const {
  int64_t n = 0;
  for (const Tensor& p : params_) n += p.numel();
  return n;
}

void Model::collect(std::vector<std::pair<std::string, Tensor*>>& out) {
  out.emplace_back("stem.kernel", &stem_.kernel);
  for (size_t i = 0; i < blocks_.size(); ++i) {
    std::string p = "block" + std::to_string(i) + ".";
    Block& b = blocks_[i];
    out.emplace_back(p + "bn1.gamma", &b.bn1.gamma);
    out.emplace_back(p + "bn1.beta", &b.bn1.beta);
    out.emplace_back(p + "conv1.kernel", &b.conv1.kernel);
    out.emplace_back(p + "bn2.gamma", &b.bn2.gamma);
    out.emplace_back(p + "bn2.beta", &b.bn2.beta);
    out.emplace_back(p + "conv2.kernel", &b.conv2.kernel);
    if (b.has_shortcut) out.emplace_back(p + "shortcut.kernel", &b.shortcut.kernel);
  }
  out.emplace_back("final_bn.gamma", &final_bn_.gamma);
  out.emplace_back("final_bn.beta", &final_bn_.beta);
  auto add_head = [&out](const char* name, std::vector<Dense>& head) {
    for (size_t i = 0; i < head.size(); ++i) {
      std::string p = std::string(name) + std::to_string(i) + ".";
      out.emplace_back(p + "w", &head[i].w);
      out.emplace_back(p + "b", &head[i].b);
    }
  };
  add_head("cls", cls_head_);
  add_head("cx", cx_head_);
  add_head("cy", cy_head_);
}

TensorMap Model::state_dict() const {
  TensorMap out;
  auto* self = const_cast<Model*>(this);
  std::vector<std::pair<std::string, Tensor*>> named;
  self->collect(named);
  for (auto& [name, t] : named) out.emplace(name, *t);

  auto put_stats = [&out](const std::string& prefix, const BatchNormState& s) {
    out.emplace(prefix + ".running_mean",
                Tensor::from_data({int64_t(s.running_mean.size())},
                                  std::vector<float>(s.running_mean)));
    out.emplace(prefix + ".running_var",
                Tensor::from_data({int64_t(s.running_var.size())},
                                  std::vector<float>(s.running_var)));
  };
  for (size_t i = 0; i < blocks_.size(); ++i) {
    std::string p = "block" + std::to_string(i) + ".";
    put_stats(p + "bn1", blocks_[i].bn1.state);
    put_stats(p + "bn2", blocks_[i].bn2.state);
  }
  put_stats("final_bn", final_bn_.state);

  out.emplace("__meta__",
              Tensor::from_data({5}, {float(config_.depth), float(config_.width),
                                      float(config_.num_classes), float(config_.input_size),
                                      config_.l2_coeff}));
  return out;
}

void Model::load_state_dict(const TensorMap& tensors) {
  auto fetch = [&tensors](const std::string& name) -> const Tensor& {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw IoError("checkpoint: missing tensor '" + name + "'");
    return it->second;
  };
  std::vector<std::pair<std::string, Tensor*>> named;
  collect(named);
  for (auto& [name, t] : named) {
    const Tensor& src = fetch(name);
    if (src.shape() != t->shape()) {
      throw IoError("checkpoint: tensor '" + name + "' has shape " + shape_str(src.shape()) +
                    ", model expects " + shape_str(t->shape()));
    }
    auto dst = t->mutable_values();
    std::copy(src.values().begin(), src.values().end(), dst.begin());
  }
  auto get_stats = [&fetch](const std::string& prefix, BatchNormState& s) {
    const Tensor& m = fetch(prefix + ".running_mean");
    const Tensor& v = fetch(prefix + ".running_var");
    if (m.numel() != int64_t(s.running_mean.size()) ||
        v.numel() != int64_t(s.running_var.size())) {
      throw IoError("checkpoint: running stats for '" + prefix + "' have wrong extent");
    }
    s.running_mean.assign(m.values().begin(), m.values().end());
    s.running_var.assign(v.values().begin(), v.values().end());
  };
  for (size_t i = 0; i < blocks_.size(); ++i) {
    std::string p = "block" + std::to_string(i) + ".";
    get_stats(p + "bn1", blocks_[i].bn1.state);
    get_stats(p + "bn2", blocks_[i].bn2.state);
  }
  get_stats("final_bn", final_bn_.state);
}

void Model::save(const std::string& path) const { save_checkpoint(path, state_dict()); }

Model Model::load(const std::string& path) {
  TensorMap tensors = load_checkpoint(path);
  auto it = tensors.find("__meta__");
  if (it == tensors.end() || it->second.numel() != 5) {
    throw IoError("checkpoint: " + path + " lacks a valid __meta__ record");
  }
  auto meta = it->second.values();
  ModelConfig config;
  config.depth = int(meta[0]);
  config.width = int(meta[1]);
  config.num_classes = int(meta[2]);
  config.input_size = int(meta[3]);
  config.l2_coeff = meta[4];
  Model model(config, 0);
  model.load_state_dict(tensors);
  return model;
}

}  // namespace hydramix
