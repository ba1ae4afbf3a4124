#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hydramix/checkpoint.hpp"
#include "hydramix/errors.hpp"
#include "hydramix/rng.hpp"
#include "hydramix/tensor.hpp"

namespace hydramix {

struct ModelConfig {
  int depth = 10;
  int width = 1;
  int num_classes = 3;
  float l2_coeff = 5e-4f;
  int input_size = 41;
};

// Per-sample classification distribution plus the two centroid coordinates,
// all in one batch: class_probs [n,C], cx and cy [n] in [0,1].
struct ModelOutput {
  Tensor class_probs;
  Tensor cx;
  Tensor cy;
};

// Reduced WideResNet backbone (pre-activation blocks) with a classification
// head on the pooled features and two centroid-regression heads on the
// flattened final feature map.
class Model {
 public:
  Model(const ModelConfig& config, uint64_t seed);

  // training=true uses batch statistics (and updates running stats) and
  // records the graph; training=false uses running stats and records nothing.
  ModelOutput forward(const Tensor& batch, bool training);

  // l2_coeff * sum of squared dense-layer weights, as a graph node.
  Tensor l2_penalty() const;

  std::vector<Tensor>& parameters() { return params_; }
  const ModelConfig& config() const { return config_; }
  int64_t parameter_count() const;

  void save(const std::string& path) const;
  static Model load(const std::string& path);

  TensorMap state_dict() const;
  void load_state_dict(const TensorMap& tensors);

 private:
  struct Conv {
    Tensor kernel;
    int stride;
    Padding padding;
  };
  struct Bn {
    Tensor gamma;
    Tensor beta;
    BatchNormState state;
  };
  struct Dense {
    Tensor w;
    Tensor b;
  };
  struct Block {
    Bn bn1;
    Conv conv1;
    Bn bn2;
    Conv conv2;
    bool has_shortcut = false;
    Conv shortcut;
  };

  Conv make_conv(int kh, int kw, int in_c, int out_c, int stride, Padding padding, Rng& rng);
  Bn make_bn(int channels);
  Dense make_dense(int in_dim, int out_dim, Rng& rng);
  Tensor dense_forward(const Dense& d, const Tensor& x);
  Tensor block_forward(Block& blk, const Tensor& x, bool training);
  void collect(std::vector<std::pair<std::string, Tensor*>>& out);

  ModelConfig config_;
  Conv stem_;
  std::vector<Block> blocks_;
  Bn final_bn_;
  std::vector<Dense> cls_head_;
  std::vector<Dense> cx_head_;
  std::vector<Dense> cy_head_;
  std::vector<Tensor> params_;
  std::vector<Tensor> dense_weights_;
};

}  // namespace hydramix
