// Python surface for the core operations: the loss/label equations on numpy
// arrays, the synthetic dataset tools, and one-shot train/eval runners. The
// heavy lifting stays in the C++ library; this layer only converts buffers.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>
#include <utility>
#include <vector>

#include "hydramix/data.hpp"
#include "hydramix/errors.hpp"
#include "hydramix/losses.hpp"
#include "hydramix/model.hpp"
#include "hydramix/rng.hpp"
#include "hydramix/ssl.hpp"
#include "hydramix/train.hpp"

namespace py = pybind11;
using namespace hydramix;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

std::vector<float> to_vector(const FloatArray& arr) {
  std::vector<float> out(size_t(arr.size()));
  std::memcpy(out.data(), arr.data(), out.size() * sizeof(float));
  return out;
}

Tensor to_tensor_2d(const FloatArray& arr, const char* name) {
  if (arr.ndim() != 2) {
    throw ArgumentError(std::string(name) + " must be a 2-d array, got " +
                        std::to_string(arr.ndim()) + " dimensions");
  }
  return Tensor::from_data({arr.shape(0), arr.shape(1)}, to_vector(arr));
}

Tensor to_tensor_1d(const FloatArray& arr, const char* name) {
  if (arr.ndim() != 1) {
    throw ArgumentError(std::string(name) + " must be a 1-d array, got " +
                        std::to_string(arr.ndim()) + " dimensions");
  }
  return Tensor::from_data({arr.shape(0)}, to_vector(arr));
}

py::array_t<float> from_vector(const std::vector<float>& v) {
  py::array_t<float> out(py::ssize_t(v.size()));
  std::memcpy(out.mutable_data(), v.data(), v.size() * sizeof(float));
  return out;
}

HeadBatch to_head_batch(const FloatArray& probs, const FloatArray& cx, const FloatArray& cy,
                        const char* name) {
  HeadBatch hb;
  hb.class_probs = to_tensor_2d(probs, name);
  hb.cx = to_tensor_1d(cx, name);
  hb.cy = to_tensor_1d(cy, name);
  return hb;
}

SceConfig sce_config(float delta, float rho, float log_zero_clamp) {
  SceConfig cfg;
  cfg.delta = delta;
  cfg.rho = rho;
  cfg.log_zero_clamp = log_zero_clamp;
  return cfg;
}

py::dict metrics_dict(const MetricsRecord& rec) {
  py::dict d;
  d["epoch"] = rec.epoch;
  d["loss_total"] = rec.loss_total;
  d["loss_sce_labelled"] = rec.loss_sce_labelled;
  d["loss_sce_unlabelled"] = rec.loss_sce_unlabelled;
  d["loss_mse_labelled"] = rec.loss_mse_labelled;
  d["loss_mse_unlabelled"] = rec.loss_mse_unlabelled;
  d["test_accuracy"] = rec.test_accuracy;
  d["mean_centroid_error"] = rec.mean_centroid_error;
  d["confusion"] = rec.confusion;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Semi-supervised multi-task cell-patch classification core";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ArgumentError>(m, "ArgumentError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  py::class_<Rng>(m, "Rng", "Deterministic random stream")
      .def(py::init<uint64_t>(), py::arg("seed"))
      .def("uniform", [](Rng& rng) { return rng.uniform(); });

  // --- label sharpening and mixing -----------------------------------------

  m.def(
      "sharpen",
      [](const FloatArray& dist, float temperature) {
        if (dist.ndim() != 1) throw ArgumentError("sharpen: dist must be a 1-d array");
        return from_vector(sharpen(to_vector(dist), temperature));
      },
      py::arg("dist"), py::arg("temperature"),
      "Temperature-sharpened copy of a class distribution");

  m.def(
      "sample_gamma",
      [](float alpha, float beta, Rng& rng) { return sample_gamma(alpha, beta, rng); },
      py::arg("alpha"), py::arg("beta"), py::arg("rng"),
      "Mixing weight max(b, 1-b) with b ~ Beta(alpha, beta); always in [0.5, 1]");

  m.def(
      "mixup",
      [](const FloatArray& image_a, const FloatArray& label_a, float cx_a, float cy_a,
         const FloatArray& image_b, const FloatArray& label_b, float gamma) {
        MixItem a, b;
        a.image = to_vector(image_a);
        a.label = to_vector(label_a);
        a.cx = cx_a;
        a.cy = cy_a;
        b.image = to_vector(image_b);
        b.label = to_vector(label_b);
        MixItem mixed = mixup(a, b, gamma);
        return py::make_tuple(from_vector(mixed.image), from_vector(mixed.label), mixed.cx,
                              mixed.cy);
      },
      py::arg("image_a"), py::arg("label_a"), py::arg("cx_a"), py::arg("cy_a"),
      py::arg("image_b"), py::arg("label_b"), py::arg("gamma"),
      "Convex image/label mix weighted toward the first argument; returns "
      "(image, label, cx, cy) with the centroid copied from the first argument");

  // --- losses ---------------------------------------------------------------

  m.def(
      "cross_entropy",
      [](const FloatArray& target, const FloatArray& pred) {
        return cross_entropy(to_tensor_2d(target, "target"), to_tensor_2d(pred, "pred")).value();
      },
      py::arg("target"), py::arg("pred"));

  m.def(
      "reverse_cross_entropy",
      [](const FloatArray& target, const FloatArray& pred, float log_zero_clamp) {
        return reverse_cross_entropy(to_tensor_2d(target, "target"), to_tensor_2d(pred, "pred"),
                                     log_zero_clamp)
            .value();
      },
      py::arg("target"), py::arg("pred"), py::arg("log_zero_clamp") = -4.0f);

  m.def(
      "sce",
      [](const FloatArray& target, const FloatArray& pred, float delta, float rho,
         float log_zero_clamp) {
        return sce(to_tensor_2d(target, "target"), to_tensor_2d(pred, "pred"),
                   sce_config(delta, rho, log_zero_clamp))
            .value();
      },
      py::arg("target"), py::arg("pred"), py::arg("delta"), py::arg("rho"),
      py::arg("log_zero_clamp") = -4.0f,
      "Symmetric cross entropy delta*CE + rho*RCE");

  m.def(
      "joint_loss",
      [](const FloatArray& lab_target_probs, const FloatArray& lab_target_cx,
         const FloatArray& lab_target_cy, const FloatArray& lab_pred_probs,
         const FloatArray& lab_pred_cx, const FloatArray& lab_pred_cy,
         const FloatArray& unl_target_probs, const FloatArray& unl_target_cx,
         const FloatArray& unl_target_cy, const FloatArray& unl_pred_probs,
         const FloatArray& unl_pred_cx, const FloatArray& unl_pred_cy, float mu) {
        JointLossConfig cfg;
        cfg.mu = mu;
        JointLossParts parts = joint_loss(
            to_head_batch(lab_target_probs, lab_target_cx, lab_target_cy, "labelled target"),
            to_head_batch(lab_pred_probs, lab_pred_cx, lab_pred_cy, "labelled pred"),
            to_head_batch(unl_target_probs, unl_target_cx, unl_target_cy, "unlabelled target"),
            to_head_batch(unl_pred_probs, unl_pred_cx, unl_pred_cy, "unlabelled pred"), cfg);
        py::dict d;
        d["total"] = parts.total.value();
        d["sce_labelled"] = parts.sce_labelled.value();
        d["sce_unlabelled"] = parts.sce_unlabelled.value();
        d["mse_labelled"] = parts.mse_labelled.value();
        d["mse_unlabelled"] = parts.mse_unlabelled.value();
        return d;
      },
      py::arg("lab_target_probs"), py::arg("lab_target_cx"), py::arg("lab_target_cy"),
      py::arg("lab_pred_probs"), py::arg("lab_pred_cx"), py::arg("lab_pred_cy"),
      py::arg("unl_target_probs"), py::arg("unl_target_cx"), py::arg("unl_target_cy"),
      py::arg("unl_pred_probs"), py::arg("unl_pred_cx"), py::arg("unl_pred_cy"),
      py::arg("mu") = 0.8f,
      "Classification-plus-regression objective over a labelled and an "
      "unlabelled batch; the background class gates the regression term");

  // --- dataset tools ----------------------------------------------------------

  m.def(
      "generate_dataset",
      [](const std::string& dir, int n_train, int n_test,
         const std::vector<std::string>& classes, uint64_t seed) {
        DatasetSpec spec;
        spec.n_train = n_train;
        spec.n_test = n_test;
        if (!classes.empty()) spec.classes = classes;
        spec.seed = seed;
        generate_dataset(spec, dir);
      },
      py::arg("dir"), py::arg("n_train"), py::arg("n_test"),
      py::arg("classes") = std::vector<std::string>{}, py::arg("seed") = 0,
      py::call_guard<py::gil_scoped_release>(),
      "Render a synthetic patch corpus (images plus manifest.json) into dir");

  m.def(
      "dataset_summary",
      [](const std::string& dir) {
        Dataset ds = load_dataset(dir);
        py::dict d;
        d["classes"] = ds.classes;
        d["n_train"] = ds.train.size();
        d["n_test"] = ds.test.size();
        return d;
      },
      py::arg("dir"));

  m.def(
      "make_split",
      [](const std::string& dir, int budget, uint64_t seed) {
        SplitPlan split = make_split(load_dataset(dir), budget, seed);
        return py::make_tuple(split.labelled_ids, split.unlabelled_ids);
      },
      py::arg("dir"), py::arg("budget"), py::arg("seed") = 0,
      "Class-stratified labelled subset; returns (labelled_ids, unlabelled_ids)");

  // --- one-shot runners -------------------------------------------------------

  m.def(
      "train_run",
      [](const std::string& data_dir, const std::string& out_dir, const std::string& mode,
         int budget, uint64_t seed, int epochs, int batch_size) {
        ModeSpec spec = parse_mode(mode);
        Hyperparams hp;
        hp.epochs = epochs;
        hp.batch_size = batch_size;
        hp.seed = seed;
        hp.mode = spec.mode;
        hp.disable_sce = spec.disable_sce;

        std::vector<MetricsRecord> history;
        {
          py::gil_scoped_release release;
          Dataset ds = load_dataset(data_dir);
          SplitPlan split = make_split(ds, budget, seed);
          Model model(ModelConfig{}, seed);
          history = train(model, ds, split, hp, out_dir);
        }
        py::list out;
        for (const MetricsRecord& rec : history) out.append(metrics_dict(rec));
        return out;
      },
      py::arg("data_dir"), py::arg("out_dir"), py::arg("mode"), py::arg("budget"),
      py::arg("seed") = 0, py::arg("epochs") = 100, py::arg("batch_size") = 32,
      "Train one model over the given split; returns the per-epoch metrics "
      "and writes metrics.jsonl plus checkpoints into out_dir");

  m.def(
      "evaluate_checkpoint",
      [](const std::string& ckpt_path, const std::string& data_dir) {
        MetricsRecord rec;
        {
          py::gil_scoped_release release;
          Model model = Model::load(ckpt_path);
          Dataset ds = load_dataset(data_dir);
          if (model.config().num_classes != ds.num_classes()) {
            throw ConfigError("eval: checkpoint has " +
                              std::to_string(model.config().num_classes) + " classes, dataset has " +
                              std::to_string(ds.num_classes()));
          }
          rec = evaluate(model, ds.test, 64);
        }
        py::dict d;
        d["test_accuracy"] = rec.test_accuracy;
        d["mean_centroid_error"] = rec.mean_centroid_error;
        d["confusion"] = rec.confusion;
        return d;
      },
      py::arg("ckpt_path"), py::arg("data_dir"));
}
