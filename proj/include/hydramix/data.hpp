#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "hydramix/errors.hpp"

namespace hydramix {

constexpr int kPatchSize = 41;
constexpr int kPatchChannels = 3;

// One dataset record in memory. Image is row-major h*w*c in [0,1]. Labels are
// optional: records viewed through the unlabelled pool must not carry them.
struct Patch {
  std::string id;
  std::vector<float> image;
  int height = kPatchSize;
  int width = kPatchSize;
  int channels = kPatchChannels;
  std::optional<int> class_id;
  std::optional<std::pair<float, float>> centroid;
};

// The training-time view of an unlabelled record: image only, no label
// fields to read even by accident.
struct UnlabelledPatch {
  std::vector<float> image;
};

struct DatasetSpec {
  int n_train = 18000;
  int n_test = 6000;
  std::vector<std::string> classes = {"tumour", "lymphocyte", "background"};
  uint64_t seed = 0;
};

struct Dataset {
  std::vector<std::string> classes;
  std::vector<Patch> train;
  std::vector<Patch> test;
  int num_classes() const { return int(classes.size()); }
};

// Class-stratified labelled subset; indices refer into Dataset::train.
struct SplitPlan {
  int labelled_budget = 0;
  std::vector<int> labelled_ids;
  std::vector<int> unlabelled_ids;
};

// Renders the synthetic patch corpus (images/<id>.png + manifest.json) into
// dir. Same spec and seed produce byte-identical output.
void generate_dataset(const DatasetSpec& spec, const std::string& dir);

Dataset load_dataset(const std::string& dir);

SplitPlan make_split(const Dataset& dataset, int budget, uint64_t seed);

std::vector<UnlabelledPatch> unlabelled_view(const Dataset& dataset, const SplitPlan& split);

}  // namespace hydramix
