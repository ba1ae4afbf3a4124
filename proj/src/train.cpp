#include "hydramix/train.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <numeric>
#include <thread>

#include "hydramix/rng.hpp"
#include "hydramix/ssl.hpp"

namespace hydramix {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

ModeSpec parse_mode(const std::string& name) {
  if (name == "supervised") return {TrainMode::kSupervised, false};
  if (name == "partial") return {TrainMode::kPartial, false};
  if (name == "hydramix") return {TrainMode::kHydramix, false};
  if (name == "hydramix_nosce") return {TrainMode::kHydramix, true};
  throw ConfigError("mode: unknown value '" + name +
                    "' (expected supervised|partial|hydramix|hydramix_nosce)");
}

std::string metrics_to_json_line(const MetricsRecord& rec) {
  ordered_json j;
  j["epoch"] = rec.epoch;
  j["loss_total"] = rec.loss_total;
  j["loss_sce_labelled"] = rec.loss_sce_labelled;
  j["loss_sce_unlabelled"] = rec.loss_sce_unlabelled;
  j["loss_mse_labelled"] = rec.loss_mse_labelled;
  j["loss_mse_unlabelled"] = rec.loss_mse_unlabelled;
  j["test_accuracy"] = rec.test_accuracy;
  j["mean_centroid_error"] = rec.mean_centroid_error;
  j["confusion"] = rec.confusion;
  return j.dump();
}

Adam::Adam(float beta1, float beta2, float eps) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(std::vector<Tensor>& params, float lr) {
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(size_t(params[i].numel()), 0.0f);
      v_[i].assign(size_t(params[i].numel()), 0.0f);
    }
  }
  if (m_.size() != params.size()) {
    throw ArgumentError("adam: parameter list changed size between steps");
  }
  ++t_;
  // Bias corrections depend only on the step count; the per-element update
  // stays in float like the moment buffers.
  float bc1 = float(1.0 - std::pow(double(beta1_), double(t_)));
  float bc2 = float(1.0 - std::pow(double(beta2_), double(t_)));
  for (size_t i = 0; i < params.size(); ++i) {
    auto grad = params[i].grad();
    if (grad.empty()) continue;
    auto w = params[i].mutable_values();
    auto& m = m_[i];
    auto& v = v_[i];
    for (size_t j = 0; j < w.size(); ++j) {
      float g = grad[j];
      m[j] = beta1_ * m[j] + (1.0f - beta1_) * g;
      v[j] = beta2_ * v[j] + (1.0f - beta2_) * g * g;
      float mhat = m[j] / bc1;
      float vhat = v[j] / bc2;
      w[j] -= lr * mhat / (std::sqrt(vhat) + eps_);
    }
    params[i].zero_grad();
  }
}

double lr_at_epoch(const Hyperparams& hp, int epoch) {
  if (!(hp.lr_start >= hp.lr_end) || !(hp.lr_end > 0.0f)) {
    throw ConfigError("lr schedule: need lr_start >= lr_end > 0");
  }
  if (hp.epochs <= 1) return double(hp.lr_start);
  double ratio = double(hp.lr_end) / double(hp.lr_start);
  return double(hp.lr_start) * std::pow(ratio, double(epoch) / double(hp.epochs - 1));
}

namespace {

Tensor images_to_tensor(const std::vector<const std::vector<float>*>& images, int size) {
  int64_t n = int64_t(images.size());
  int64_t px = int64_t(size) * size * kPatchChannels;
  std::vector<float> data(size_t(n * px), 0.0f);
  for (int64_t i = 0; i < n; ++i) {
    if (int64_t(images[size_t(i)]->size()) != px) {
      throw ShapeError("batch: image has " + std::to_string(images[size_t(i)]->size()) +
                       " values, expected " + std::to_string(px));
    }
    std::copy(images[size_t(i)]->begin(), images[size_t(i)]->end(), data.begin() + i * px);
  }
  return Tensor::from_data({n, size, size, kPatchChannels}, std::move(data));
}

std::vector<float> one_hot(int class_id, int num_classes) {
  std::vector<float> v(size_t(num_classes), 0.0f);
  v[size_t(class_id)] = 1.0f;
  return v;
}

// Targets for one side of the joint loss, as constant tensors.
HeadBatch targets_from_items(const std::vector<MixItem>& items, int num_classes) {
  int64_t n = int64_t(items.size());
  std::vector<float> labels(size_t(n) * size_t(num_classes), 0.0f);
  std::vector<float> cx(size_t(n), 0.0f);
  std::vector<float> cy(size_t(n), 0.0f);
  for (int64_t i = 0; i < n; ++i) {
    const MixItem& it = items[size_t(i)];
    if (int(it.label.size()) != num_classes) {
      throw ShapeError("batch: label has " + std::to_string(it.label.size()) + " entries for " +
                       std::to_string(num_classes) + " classes");
    }
    std::copy(it.label.begin(), it.label.end(), labels.begin() + i * num_classes);
    cx[size_t(i)] = it.cx;
    cy[size_t(i)] = it.cy;
  }
  HeadBatch batch;
  batch.class_probs = Tensor::from_data({n, num_classes}, std::move(labels));
  batch.cx = Tensor::from_data({n}, std::move(cx));
  batch.cy = Tensor::from_data({n}, std::move(cy));
  return batch;
}

HeadBatch slice_output(const ModelOutput& out, int64_t begin, int64_t end) {
  HeadBatch b;
  b.class_probs = slice_rows(out.class_probs, begin, end);
  b.cx = slice_rows(out.cx, begin, end);
  b.cy = slice_rows(out.cy, begin, end);
  return b;
}

struct EpochAccum {
  double total = 0.0, sce_l = 0.0, sce_u = 0.0, mse_l = 0.0, mse_u = 0.0;
  int steps = 0;
  void add(const JointLossParts& parts) {
    total += double(parts.total.value());
    sce_l += double(parts.sce_labelled.value());
    sce_u += double(parts.sce_unlabelled.value());
    mse_l += double(parts.mse_labelled.value());
    mse_u += double(parts.mse_unlabelled.value());
    ++steps;
  }
};

JointLossConfig effective_joint(const Hyperparams& hp) {
  JointLossConfig cfg = hp.joint;
  if (hp.disable_sce) {
    // Plain cross-entropy for both classification terms.
    cfg.sce_labelled = SceConfig{1.0f, 0.0f, cfg.sce_labelled.log_zero_clamp};
    cfg.sce_unlabelled = SceConfig{1.0f, 0.0f, cfg.sce_unlabelled.log_zero_clamp};
  }
  return cfg;
}

// One labelled training example after its single augmentation.
MixItem labelled_item(const Patch& p, int num_classes, Rng& rng) {
  if (!p.class_id || !p.centroid) {
    throw ArgumentError("train: labelled record " + p.id + " lacks class or centroid");
  }
  AugKind op = sample_aug(rng);
  MixItem item;
  item.image.resize(p.image.size());
  apply_aug(op, p.image.data(), item.image.data(), p.height, p.width, p.channels);
  item.label = one_hot(*p.class_id, num_classes);
  auto [cx, cy] = transform_centroid(op, *p.centroid);
  item.cx = cx;
  item.cy = cy;
  return item;
}

}  // namespace

MetricsRecord evaluate(Model& model, const std::vector<Patch>& test_set, int batch_size) {
  if (test_set.empty()) throw ArgumentError("evaluate: empty test set");
  if (batch_size < 1) throw ArgumentError("evaluate: batch_size must be >= 1");
  int num_classes = model.config().num_classes;
  int size = model.config().input_size;

  MetricsRecord rec;
  rec.confusion.assign(size_t(num_classes), std::vector<int>(size_t(num_classes), 0));
  int64_t correct = 0;
  double centroid_err = 0.0;
  int64_t centroid_count = 0;
  NoGradGuard guard;

  for (size_t begin = 0; begin < test_set.size(); begin += size_t(batch_size)) {
    size_t end = std::min(test_set.size(), begin + size_t(batch_size));
    std::vector<const std::vector<float>*> images;
    images.reserve(end - begin);
    for (size_t i = begin; i < end; ++i) images.push_back(&test_set[i].image);
    ModelOutput out = model.forward(images_to_tensor(images, size), false);
    auto probs = out.class_probs.values();
    auto cx = out.cx.values();
    auto cy = out.cy.values();
    for (size_t i = begin; i < end; ++i) {
      const Patch& p = test_set[i];
      if (!p.class_id) throw ArgumentError("evaluate: test record " + p.id + " lacks a class");
      size_t row = i - begin;
      const float* pr = probs.data() + row * size_t(num_classes);
      int pred = int(std::max_element(pr, pr + num_classes) - pr);
      rec.confusion[size_t(*p.class_id)][size_t(pred)] += 1;
      if (pred == *p.class_id) ++correct;
      if (*p.class_id != num_classes - 1 && p.centroid) {
        double dx = double(cx[row]) - double(p.centroid->first);
        double dy = double(cy[row]) - double(p.centroid->second);
        centroid_err += std::sqrt(dx * dx + dy * dy);
        ++centroid_count;
      }
    }
  }
  rec.test_accuracy = double(correct) / double(test_set.size());
  rec.mean_centroid_error = centroid_count > 0 ? centroid_err / double(centroid_count) : 0.0;
  return rec;
}

std::vector<MetricsRecord> train(Model& model, const Dataset& dataset, const SplitPlan& split,
                                 const Hyperparams& hp, const std::string& run_dir) {
  if (model.config().num_classes != dataset.num_classes()) {
    throw ConfigError("train: model has " + std::to_string(model.config().num_classes) +
                      " classes, dataset has " + std::to_string(dataset.num_classes()));
  }
  if (split.labelled_ids.empty()) throw ArgumentError("train: empty labelled split");
  if (hp.epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (hp.batch_size < 2) throw ConfigError("train: batch_size must be >= 2");
  bool ssl = hp.mode == TrainMode::kHydramix;
  if (ssl && split.unlabelled_ids.empty()) {
    throw ArgumentError("train: hydramix mode needs a non-empty unlabelled pool");
  }

  int num_classes = dataset.num_classes();
  JointLossConfig joint_cfg = effective_joint(hp);
  Rng rng = Rng::stream(hp.seed, {0x747261696eULL});
  Adam adam(hp.adam_beta1, hp.adam_beta2, hp.adam_eps);

  std::vector<UnlabelledPatch> unlabelled = ssl
                                                ? unlabelled_view(dataset, split)
                                                : std::vector<UnlabelledPatch>{};

  std::ofstream metrics_out;
  if (!run_dir.empty()) {
    std::error_code ec;
    fs::create_directories(run_dir, ec);
    if (ec) throw IoError("train: cannot create " + run_dir + ": " + ec.message());
    metrics_out.open(fs::path(run_dir) / "metrics.jsonl", std::ios::binary | std::ios::trunc);
    if (!metrics_out) throw IoError("train: cannot write metrics in " + run_dir);
  }

  std::vector<int> labelled_order = split.labelled_ids;
  std::vector<size_t> unlabelled_order(unlabelled.size());
  std::iota(unlabelled_order.begin(), unlabelled_order.end(), size_t(0));

  std::vector<MetricsRecord> history;
  double best_accuracy = -1.0;
  int64_t pool_size = ssl ? int64_t(unlabelled.size()) : int64_t(labelled_order.size());
  int64_t steps_per_epoch = (pool_size + hp.batch_size - 1) / hp.batch_size;

  for (int epoch = 0; epoch < hp.epochs; ++epoch) {
    float lr = float(lr_at_epoch(hp, epoch));
    rng.shuffle(labelled_order);
    if (ssl) rng.shuffle(unlabelled_order);

    EpochAccum accum;
    for (int64_t step = 0; step < steps_per_epoch; ++step) {
      int64_t begin = step * hp.batch_size;
      int64_t n = std::min<int64_t>(hp.batch_size, pool_size - begin);

      std::vector<MixItem> labelled_items;
      labelled_items.reserve(size_t(n));
      for (int64_t j = 0; j < n; ++j) {
        // labelled pool is smaller than the step budget in SSL mode; cycle it
        int idx = labelled_order[size_t((begin + j) % int64_t(labelled_order.size()))];
        labelled_items.push_back(labelled_item(dataset.train[size_t(idx)], num_classes, rng));
      }

      JointLossParts parts;
      Tensor loss;
      if (ssl) {
        std::vector<UnlabelledPatch> u_batch;
        u_batch.reserve(size_t(n));
        for (int64_t j = 0; j < n; ++j) {
          u_batch.push_back(unlabelled[unlabelled_order[size_t(begin + j)]]);
        }
        std::vector<PseudoLabel> pseudo = pseudo_label_batch(model, u_batch, hp.k_augment, rng);

        std::vector<MixItem> unlabelled_items;
        unlabelled_items.reserve(size_t(n));
        for (int64_t j = 0; j < n; ++j) {
          MixItem item;
          item.image = std::move(u_batch[size_t(j)].image);
          item.label = sharpen(pseudo[size_t(j)].probs, hp.temperature);
          item.cx = pseudo[size_t(j)].cx;
          item.cy = pseudo[size_t(j)].cy;
          unlabelled_items.push_back(std::move(item));
        }

        MixedBatches mixed =
            mix_batches(labelled_items, unlabelled_items, hp.mix_alpha, hp.mix_beta, rng);

        std::vector<const std::vector<float>*> images;
        images.reserve(size_t(2 * n));
        for (const MixItem& it : mixed.labelled) images.push_back(&it.image);
        for (const MixItem& it : mixed.unlabelled) images.push_back(&it.image);
        ModelOutput out = model.forward(images_to_tensor(images, model.config().input_size), true);

        parts = joint_loss(targets_from_items(mixed.labelled, num_classes),
                           slice_output(out, 0, n),
                           targets_from_items(mixed.unlabelled, num_classes),
                           slice_output(out, n, 2 * n), joint_cfg);
      } else {
        std::vector<const std::vector<float>*> images;
        images.reserve(size_t(n));
        for (const MixItem& it : labelled_items) images.push_back(&it.image);
        ModelOutput out = model.forward(images_to_tensor(images, model.config().input_size), true);

        HeadBatch empty;
        parts = joint_loss(targets_from_items(labelled_items, num_classes),
                           slice_output(out, 0, n), empty, empty, joint_cfg);
      }

      loss = add(parts.total, model.l2_penalty());
      if (!std::isfinite(loss.value())) {
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) +
                           " step " + std::to_string(step));
      }
      backward(loss);
      adam.step(model.parameters(), lr);
      accum.add(parts);
    }

    MetricsRecord rec = evaluate(model, dataset.test, hp.batch_size);
    rec.epoch = epoch;
    rec.loss_total = accum.total / accum.steps;
    rec.loss_sce_labelled = accum.sce_l / accum.steps;
    rec.loss_sce_unlabelled = accum.sce_u / accum.steps;
    rec.loss_mse_labelled = accum.mse_l / accum.steps;
    rec.loss_mse_unlabelled = accum.mse_u / accum.steps;
    history.push_back(rec);

    if (metrics_out.is_open()) {
      metrics_out << metrics_to_json_line(rec) << "\n";
      metrics_out.flush();
    }
    if (!run_dir.empty() && rec.test_accuracy > best_accuracy) {
      best_accuracy = rec.test_accuracy;
      model.save((fs::path(run_dir) / "ckpt_best.hmxw").string());
    }
  }

  if (!run_dir.empty()) {
    model.save((fs::path(run_dir) / "ckpt_final.hmxw").string());
  }
  return history;
}

namespace {

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct CellStats {
  double mean_acc = 0.0, std_acc = 0.0, mean_err = 0.0;
  int count = 0;
};

CellStats aggregate(const std::vector<SweepCell>& cells, const std::string& mode, int budget) {
  CellStats s;
  std::vector<double> accs;
  for (const SweepCell& c : cells) {
    if (c.mode != mode || c.budget != budget || !c.ok) continue;
    accs.push_back(c.final_accuracy);
    s.mean_err += c.mean_centroid_error;
  }
  s.count = int(accs.size());
  if (s.count == 0) return s;
  for (double a : accs) s.mean_acc += a;
  s.mean_acc /= s.count;
  s.mean_err /= s.count;
  double var = 0.0;
  for (double a : accs) var += (a - s.mean_acc) * (a - s.mean_acc);
  s.std_acc = std::sqrt(var / s.count);
  return s;
}

}  // namespace

std::vector<SweepCell> sweep(const Dataset& dataset, const std::vector<std::string>& modes,
                             const std::vector<int>& budgets, const std::vector<uint64_t>& seeds,
                             const ModelConfig& model_config, const Hyperparams& hp,
                             const std::string& out_dir, int threads) {
  if (modes.empty() || budgets.empty() || seeds.empty()) {
    throw ConfigError("sweep: modes, budgets and seeds must all be non-empty");
  }
  if (threads < 1) throw ConfigError("sweep: threads must be >= 1");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("sweep: cannot create " + out_dir + ": " + ec.message());

  std::vector<SweepCell> cells;
  std::vector<ModeSpec> specs;
  for (const std::string& mode_name : modes) {
    ModeSpec spec = parse_mode(mode_name);
    for (int budget : budgets) {
      for (uint64_t seed : seeds) {
        SweepCell cell;
        cell.mode = mode_name;
        cell.budget = budget;
        cell.seed = seed;
        cells.push_back(std::move(cell));
        specs.push_back(spec);
      }
    }
  }

  // Every cell owns its model, RNG streams and run directory, so their
  // relative execution order cannot affect any result.
  auto run_cell = [&](size_t i) {
    SweepCell& cell = cells[i];
    std::string run_dir = out_dir + "/runs/" + cell.mode + "_b" + std::to_string(cell.budget) +
                          "_s" + std::to_string(cell.seed);
    try {
      Hyperparams cell_hp = hp;
      cell_hp.seed = cell.seed;
      cell_hp.mode = specs[i].mode;
      cell_hp.disable_sce = specs[i].disable_sce;
      SplitPlan split = make_split(dataset, cell.budget, cell.seed);
      Model model(model_config, cell.seed);
      auto history = train(model, dataset, split, cell_hp, run_dir);
      cell.final_accuracy = history.back().test_accuracy;
      cell.mean_centroid_error = history.back().mean_centroid_error;
      cell.ok = true;
    } catch (const Error& e) {
      std::error_code cell_ec;
      fs::create_directories(run_dir, cell_ec);
      std::ofstream err_out(fs::path(run_dir) / "error.txt", std::ios::trunc);
      err_out << e.what() << "\n";
      cell.ok = false;
    }
  };

  if (threads == 1) {
    for (size_t i = 0; i < cells.size(); ++i) run_cell(i);
  } else {
    std::atomic<size_t> next{0};
    std::exception_ptr first_error;
    std::mutex error_mutex;
    auto worker = [&] {
      for (size_t i = next.fetch_add(1); i < cells.size(); i = next.fetch_add(1)) {
        try {
          run_cell(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
        }
      }
    };
    std::vector<std::thread> pool;
    size_t pool_size = std::min(size_t(threads), cells.size());
    pool.reserve(pool_size);
    for (size_t i = 0; i < pool_size; ++i) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
  }

  std::ofstream csv(fs::path(out_dir) / "sweep.csv", std::ios::binary | std::ios::trunc);
  if (!csv) throw IoError("sweep: cannot write sweep.csv in " + out_dir);
  csv << "mode,budget,seed,final_accuracy,mean_centroid_error,status\n";
  for (const SweepCell& c : cells) {
    csv << c.mode << "," << c.budget << "," << c.seed << ",";
    if (c.ok) {
      csv << format_double(c.final_accuracy) << "," << format_double(c.mean_centroid_error)
          << ",ok\n";
    } else {
      csv << "nan,nan,error\n";
    }
  }
  csv.close();

  ordered_json summary;
  summary["cells"] = ordered_json::array();
  for (const std::string& mode_name : modes) {
    for (int budget : budgets) {
      CellStats s = aggregate(cells, mode_name, budget);
      ordered_json j;
      j["mode"] = mode_name;
      j["budget"] = budget;
      j["seeds"] = s.count;
      j["mean_accuracy"] = s.mean_acc;
      j["std_accuracy"] = s.std_acc;
      j["mean_centroid_error"] = s.mean_err;
      summary["cells"].push_back(std::move(j));
    }
  }
  std::ofstream sum_out(fs::path(out_dir) / "sweep_summary.json", std::ios::binary | std::ios::trunc);
  if (!sum_out) throw IoError("sweep: cannot write sweep_summary.json in " + out_dir);
  sum_out << summary.dump(2) << "\n";

  std::string table = render_table(cells, modes, budgets);
  std::ofstream table_out(fs::path(out_dir) / "table.txt", std::ios::binary | std::ios::trunc);
  table_out << table;
  return cells;
}

std::string render_table(const std::vector<SweepCell>& cells,
                         const std::vector<std::string>& modes, const std::vector<int>& budgets) {
  size_t name_w = std::string("labelled budget").size();
  for (const std::string& m : modes) name_w = std::max(name_w, m.size());

  std::string out;
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%-*s", int(name_w), "labelled budget");
  out += buf;
  for (int b : budgets) {
    std::snprintf(buf, sizeof(buf), " %8d", b);
    out += buf;
  }
  out += "\n";
  for (const std::string& m : modes) {
    std::snprintf(buf, sizeof(buf), "%-*s", int(name_w), m.c_str());
    out += buf;
    for (int b : budgets) {
      CellStats s = aggregate(cells, m, b);
      if (s.count > 0) {
        std::snprintf(buf, sizeof(buf), " %8.2f", s.mean_acc);
      } else {
        std::snprintf(buf, sizeof(buf), " %8s", "-");
      }
      out += buf;
    }
    out += "\n";
  }
  return out;
}

}  // namespace hydramix
