#include "hydramix/data.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "hydramix/image_io.hpp"
#include "hydramix/rng.hpp"

namespace hydramix {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

constexpr uint64_t kTrainTag = 1;
constexpr uint64_t kTestTag = 2;
constexpr uint64_t kSplitTag = 0x73706c6974ULL;

struct Rgb {
  float r, g, b;
};

// Renders one patch. Classes are told apart by blob size and hue: a large
// dark ellipse, a small saturated circle, or bare background texture.
struct Render {
  std::vector<uint8_t> pixels;
  float cx, cy;
};

Render render_patch(int class_id, Rng& rng) {
  const int n = kPatchSize;
  std::vector<float> img(size_t(n) * n * 3, 0.0f);

  Rgb base{0.85f, 0.72f, 0.80f};
  float tint = float(rng.uniform(-0.04, 0.04));
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      float* px = img.data() + (size_t(y) * n + x) * 3;
      px[0] = base.r + tint + float(rng.uniform(-0.10, 0.10));
      px[1] = base.g + tint + float(rng.uniform(-0.10, 0.10));
      px[2] = base.b + tint + float(rng.uniform(-0.10, 0.10));
    }
  }

  float cx = 0.5f, cy = 0.5f;
  if (class_id == 0 || class_id == 1) {
    bool tumour = class_id == 0;
    Rgb fill = tumour ? Rgb{0.32f, 0.18f, 0.40f} : Rgb{0.08f, 0.10f, 0.42f};
    float lo = tumour ? 0.30f : 0.20f;
    float hi = 1.0f - lo;
    cx = float(rng.uniform(lo, hi));
    cy = float(rng.uniform(lo, hi));
    float rx, ry, angle;
    float edge;
    if (tumour) {
      rx = float(rng.uniform(0.20, 0.30)) * n;
      ry = float(rng.uniform(0.20, 0.30)) * n;
      angle = float(rng.uniform(0.0, 3.14159265358979));
      edge = 1.5f;
    } else {
      rx = ry = float(rng.uniform(0.055, 0.095)) * n;
      angle = 0.0f;
      edge = 0.8f;
    }
    float ca = std::cos(angle), sa = std::sin(angle);
    float px_cx = cx * n, px_cy = cy * n;
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) {
        float dx = (float(x) + 0.5f) - px_cx;
        float dy = (float(y) + 0.5f) - px_cy;
        float u = (dx * ca + dy * sa) / rx;
        float v = (-dx * sa + dy * ca) / ry;
        // signed distance to the ellipse boundary, roughly in pixels
        float rho = std::sqrt(u * u + v * v);
        float dist = (rho - 1.0f) * std::min(rx, ry);
        float coverage = std::clamp(0.5f - dist / edge, 0.0f, 1.0f);
        if (coverage <= 0.0f) continue;
        float noise = float(rng.uniform(-0.08, 0.08));
        float* px = img.data() + (size_t(y) * n + x) * 3;
        px[0] += coverage * (fill.r + noise - px[0]);
        px[1] += coverage * (fill.g + noise - px[1]);
        px[2] += coverage * (fill.b + noise - px[2]);
      }
    }
  }

  Render out;
  out.cx = cx;
  out.cy = cy;
  out.pixels.resize(img.size());
  for (size_t i = 0; i < img.size(); ++i) {
    out.pixels[i] = uint8_t(std::lround(std::clamp(img[i], 0.0f, 1.0f) * 255.0f));
  }
  return out;
}

void validate_spec(const DatasetSpec& spec) {
  if (spec.n_train <= 0 || spec.n_test <= 0) {
    throw ConfigError("dataset: n_train and n_test must be positive");
  }
  if (spec.classes.empty()) throw ConfigError("dataset: classes must be non-empty");
  for (const std::string& c : spec.classes) {
    if (c.empty()) throw ConfigError("dataset: classes must be non-empty strings");
  }
}

std::string record_id(const char* split, int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s_%06d", split, index);
  return buf;
}

const ordered_json& field(const ordered_json& obj, const char* name, const std::string& where) {
  auto it = obj.find(name);
  if (it == obj.end()) throw IoError("manifest: missing field " + where + "." + name);
  return *it;
}

}  // namespace

void generate_dataset(const DatasetSpec& spec, const std::string& dir) {
  validate_spec(spec);
  std::error_code ec;
  fs::create_directories(fs::path(dir) / "images", ec);
  if (ec) throw IoError("dataset: cannot create " + dir + ": " + ec.message());

  int num_classes = int(spec.classes.size());
  ordered_json manifest;
  manifest["version"] = 1;
  manifest["classes"] = spec.classes;
  manifest["records"] = ordered_json::array();

  auto emit = [&](const char* split, uint64_t tag, int count) {
    for (int i = 0; i < count; ++i) {
      int class_id = i % num_classes;
      Rng rng = Rng::stream(spec.seed, {tag, uint64_t(i)});
      Render r = render_patch(class_id, rng);
      std::string id = record_id(split, i);
      std::string rel = "images/" + id + ".png";
      write_png_rgb((fs::path(dir) / rel).string(), kPatchSize, kPatchSize, r.pixels);
      ordered_json rec;
      rec["id"] = id;
      rec["path"] = rel;
      rec["class_id"] = class_id;
      rec["cx"] = double(r.cx);
      rec["cy"] = double(r.cy);
      rec["split"] = split;
      manifest["records"].push_back(std::move(rec));
    }
  };
  emit("train", kTrainTag, spec.n_train);
  emit("test", kTestTag, spec.n_test);

  std::ofstream out(fs::path(dir) / "manifest.json", std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("dataset: cannot write manifest in " + dir);
  out << manifest.dump(2) << "\n";
  if (!out) throw IoError("dataset: manifest write failed in " + dir);
}

Dataset load_dataset(const std::string& dir) {
  fs::path manifest_path = fs::path(dir) / "manifest.json";
  std::ifstream in(manifest_path, std::ios::binary);
  if (!in) throw IoError("dataset: cannot open " + manifest_path.string());

  ordered_json manifest;
  try {
    manifest = ordered_json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("manifest: invalid JSON in " + manifest_path.string() + ": " + e.what());
  }

  if (field(manifest, "version", "manifest").get<int>() != 1) {
    throw IoError("manifest: unsupported version in " + manifest_path.string());
  }
  Dataset ds;
  const auto& classes = field(manifest, "classes", "manifest");
  if (!classes.is_array() || classes.empty()) {
    throw IoError("manifest: classes must be a non-empty array");
  }
  for (const auto& c : classes) ds.classes.push_back(c.get<std::string>());
  int num_classes = ds.num_classes();

  const auto& records = field(manifest, "records", "manifest");
  if (!records.is_array()) throw IoError("manifest: records must be an array");

  for (size_t i = 0; i < records.size(); ++i) {
    const auto& rec = records[i];
    std::string where = "records[" + std::to_string(i) + "]";
    Patch p;
    p.id = field(rec, "id", where).get<std::string>();
    std::string rel = field(rec, "path", where).get<std::string>();
    int class_id = field(rec, "class_id", where).get<int>();
    if (class_id < 0 || class_id >= num_classes) {
      throw IoError("manifest: " + where + ".class_id " + std::to_string(class_id) +
                    " outside [0," + std::to_string(num_classes) + ")");
    }
    float cx = field(rec, "cx", where).get<float>();
    float cy = field(rec, "cy", where).get<float>();
    if (cx < 0.0f || cx > 1.0f) throw IoError("manifest: " + where + ".cx out of [0,1]");
    if (cy < 0.0f || cy > 1.0f) throw IoError("manifest: " + where + ".cy out of [0,1]");
    std::string split = field(rec, "split", where).get<std::string>();
    if (split != "train" && split != "test") {
      throw IoError("manifest: " + where + ".split must be train or test");
    }

    PngImage img = read_png_rgb((fs::path(dir) / rel).string());
    p.height = img.height;
    p.width = img.width;
    p.channels = kPatchChannels;
    p.image.resize(img.pixels.size());
    for (size_t j = 0; j < img.pixels.size(); ++j) p.image[j] = float(img.pixels[j]) / 255.0f;
    p.class_id = class_id;
    p.centroid = std::make_pair(cx, cy);
    (split == "train" ? ds.train : ds.test).push_back(std::move(p));
  }
  if (ds.train.empty()) throw IoError("manifest: no train records in " + manifest_path.string());
  return ds;
}

SplitPlan make_split(const Dataset& dataset, int budget, uint64_t seed) {
  int num_classes = dataset.num_classes();
  int n_train = int(dataset.train.size());
  if (budget < num_classes) {
    throw ArgumentError("split: budget " + std::to_string(budget) + " cannot stratify " +
                        std::to_string(num_classes) + " classes");
  }
  if (budget > n_train) {
    throw ArgumentError("split: budget " + std::to_string(budget) + " exceeds " +
                        std::to_string(n_train) + " train records");
  }

  std::vector<std::vector<int>> by_class;
  by_class.resize(size_t(num_classes));
  for (int i = 0; i < n_train; ++i) {
    const Patch& p = dataset.train[size_t(i)];
    if (!p.class_id) throw ArgumentError("split: train record " + p.id + " lacks a class");
    by_class[size_t(*p.class_id)].push_back(i);
  }

  SplitPlan plan;
  plan.labelled_budget = budget;
  for (int c = 0; c < num_classes; ++c) {
    int want = budget / num_classes + (c < budget % num_classes ? 1 : 0);
    auto& ids = by_class[size_t(c)];
    if (int(ids.size()) < want) {
      throw ArgumentError("split: class " + dataset.classes[size_t(c)] + " has only " +
                          std::to_string(ids.size()) + " records, needs " + std::to_string(want));
    }
    Rng rng = Rng::stream(seed, {kSplitTag, uint64_t(c)});
    rng.shuffle(ids);
    plan.labelled_ids.insert(plan.labelled_ids.end(), ids.begin(), ids.begin() + want);
  }
  std::sort(plan.labelled_ids.begin(), plan.labelled_ids.end());

  std::vector<bool> labelled(size_t(n_train), false);
  for (int id : plan.labelled_ids) labelled[size_t(id)] = true;
  for (int i = 0; i < n_train; ++i) {
    if (!labelled[size_t(i)]) plan.unlabelled_ids.push_back(i);
  }
  return plan;
}

std::vector<UnlabelledPatch> unlabelled_view(const Dataset& dataset, const SplitPlan& split) {
  std::vector<UnlabelledPatch> view;
  view.reserve(split.unlabelled_ids.size());
  for (int id : split.unlabelled_ids) {
    view.push_back(UnlabelledPatch{dataset.train[size_t(id)].image});
  }
  return view;
}

}  // namespace hydramix
