#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hydramix/data.hpp"
#include "hydramix/losses.hpp"
#include "hydramix/model.hpp"

namespace hydramix {

enum class TrainMode { kSupervised, kPartial, kHydramix };

// Mode names accepted on the command line; "hydramix_nosce" selects hydramix
// with disable_sce. Throws ConfigError on unknown names.
struct ModeSpec {
  TrainMode mode;
  bool disable_sce;
};
ModeSpec parse_mode(const std::string& name);

struct Hyperparams {
  int epochs = 100;
  int batch_size = 32;
  float lr_start = 1e-3f;
  float lr_end = 1e-5f;
  int k_augment = 2;
  float temperature = 0.5f;
  float mix_alpha = 0.75f;
  float mix_beta = 0.75f;
  JointLossConfig joint;
  float adam_beta1 = 0.9f;
  float adam_beta2 = 0.999f;
  float adam_eps = 1e-8f;
  uint64_t seed = 0;
  TrainMode mode = TrainMode::kHydramix;
  bool disable_sce = false;
};

struct MetricsRecord {
  int epoch = 0;
  double loss_total = 0.0;
  double loss_sce_labelled = 0.0;
  double loss_sce_unlabelled = 0.0;
  double loss_mse_labelled = 0.0;
  double loss_mse_unlabelled = 0.0;
  double test_accuracy = 0.0;
  double mean_centroid_error = 0.0;
  std::vector<std::vector<int>> confusion;
};

// One JSON object on a single line, keys in a fixed order; the unit of the
// metrics.jsonl stream.
std::string metrics_to_json_line(const MetricsRecord& rec);

class Adam {
 public:
  Adam(float beta1, float beta2, float eps);

  // Applies one update to every parameter carrying a gradient, then clears
  // the gradients.
  void step(std::vector<Tensor>& params, float lr);

 private:
  float beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
};

// Exponential decay from lr_start at epoch 0 to lr_end at the last epoch.
double lr_at_epoch(const Hyperparams& hp, int epoch);

MetricsRecord evaluate(Model& model, const std::vector<Patch>& test_set, int batch_size);

// Runs the selected regime over the split. If run_dir is non-empty, writes
// metrics.jsonl plus ckpt_final.hmxw and ckpt_best.hmxw there.
std::vector<MetricsRecord> train(Model& model, const Dataset& dataset, const SplitPlan& split,
                                 const Hyperparams& hp, const std::string& run_dir = "");

struct SweepCell {
  std::string mode;
  int budget = 0;
  uint64_t seed = 0;
  double final_accuracy = 0.0;
  double mean_centroid_error = 0.0;
  bool ok = false;
};

// Full (mode x budget x seed) grid. Writes sweep.csv, sweep_summary.json and
// table.txt under out_dir; failed cells are recorded and the grid continues.
// Cells are independent, so up to `threads` of them run concurrently; the
// outputs are identical for any thread count.
std::vector<SweepCell> sweep(const Dataset& dataset, const std::vector<std::string>& modes,
                             const std::vector<int>& budgets, const std::vector<uint64_t>& seeds,
                             const ModelConfig& model_config, const Hyperparams& hp,
                             const std::string& out_dir, int threads = 1);

// Table-1-shaped text rendering: one row per mode, one column per budget,
// cells are mean final accuracy over seeds.
std::string render_table(const std::vector<SweepCell>& cells,
                         const std::vector<std::string>& modes, const std::vector<int>& budgets);

}  // namespace hydramix
