#pragma once

#include <filesystem>
#include <vector>

#include <torch/torch.h>

#include "octet/scene.hpp"

namespace octet::scene {

/// In-memory scene dataset, tensors ready for training.
struct Dataset {
  torch::Tensor images;         // [N, 3, H, W] float in [0, 1]
  torch::Tensor labels;         // [N, 4] float, unbiased rule table
  torch::Tensor biased_labels;  // [N, 4] float, confounded `right`
  torch::Tensor masks;          // [N, H, W] int64 SegClass
  torch::Tensor attributes;     // [N, 3] int64: left marking, right marking, car count
  std::vector<SceneSpec> specs;

  int64_t size() const { return images.defined() ? images.size(0) : 0; }
  Dataset subset(int64_t begin, int64_t end) const;
};

/// Scenes for seeds first_seed .. first_seed + count - 1.
Dataset build_dataset(uint64_t first_seed, int64_t count, const SceneGenConfig& config);

/// Writes images/NNNNNN.png, masks/NNNNNN.png, metadata.jsonl (seed, spec,
/// labels, biased_labels per line), config.json and a tensor cache.
void export_dataset(const Dataset& data, const SceneGenConfig& config, const std::filesystem::path& dir);
/// Loads from the tensor cache when present, otherwise from PNG + JSON lines.
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace octet::scene
