#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "octet/checkpoint.hpp"
#include "octet/dataset.hpp"

namespace octet::models {

struct NetConfig {
  int64_t height = 64;
  int64_t width = 128;
  int64_t channels = 16;
  std::string probe_layer = "block5";

  nlohmann::json to_json() const;
  static NetConfig from_json(const nlohmann::json& j);
};

inline constexpr int64_t kNumHeads = 4;

/// Five-block convolutional multi-label classifier (forward, stop, left, right).
///
/// Blocks: block1 keeps full resolution with `c` channels, block2..block5 halve
/// the resolution; channels go c, 2c, 2c, 4c, 4c. The probe f_M is the raw
/// activation of the configured block; block5 (the last convolutional layer)
/// has shape [4c, H/16, W/16].
struct ClassifierImpl : torch::nn::Module {
  explicit ClassifierImpl(const NetConfig& cfg);

  struct Output {
    torch::Tensor logits;  // [B, 4]
    torch::Tensor probe;   // [B, ...] at cfg.probe_layer
  };
  Output run(const torch::Tensor& images);
  torch::Tensor logits(const torch::Tensor& images) { return run(images).logits; }

  /// Documented probe shape (without batch) for the configured layer.
  std::vector<int64_t> probe_shape() const;

  NetConfig cfg;
  int probe_index = 4;
  std::vector<torch::nn::Conv2d> blocks;
  torch::nn::Linear fc{nullptr}, head{nullptr};
};
TORCH_MODULE(Classifier);

/// Per-head probabilities in [0, 1], [B, 4]. Checks image dims.
torch::Tensor predict(Classifier& m, const torch::Tensor& images);
/// Thresholded decisions (p > 0.5) as bool [B, 4].
torch::Tensor decisions(Classifier& m, const torch::Tensor& images);
/// f_M at the named layer; throws std::invalid_argument for an unknown name.
torch::Tensor features(Classifier& m, const torch::Tensor& images, const std::string& layer);
torch::Tensor features(Classifier& m, const torch::Tensor& images);

/// Small U-Net producing 4-class logits at input resolution.
struct SegmenterImpl : torch::nn::Module {
  explicit SegmenterImpl(const NetConfig& cfg);
  torch::Tensor forward(const torch::Tensor& images);  // [B, 4, H, W]

  NetConfig cfg;
  torch::nn::Conv2d e1a{nullptr}, e1b{nullptr}, e2a{nullptr}, e2b{nullptr}, e3a{nullptr}, e3b{nullptr}, e4{nullptr},
      d3{nullptr}, d2{nullptr}, d1{nullptr}, out{nullptr};
};
TORCH_MODULE(Segmenter);

/// Per-pixel argmax class, int64 [B, H, W].
torch::Tensor segment(Segmenter& s, const torch::Tensor& images);

/// Frozen reference network trained on scene attributes (labels, marking
/// types, car count). Backs the perceptual distance and the FID features so
/// neither depends on the model under explanation.
struct ReferenceNetImpl : torch::nn::Module {
  explicit ReferenceNetImpl(const NetConfig& cfg);

  struct Output {
    std::vector<torch::Tensor> taps;  // block2..block5 activations
    torch::Tensor embedding;          // penultimate layer, [B, 64]
    torch::Tensor label_logits;       // [B, 4]
    torch::Tensor left_logits;        // [B, 4]
    torch::Tensor right_logits;       // [B, 4]
    torch::Tensor count;              // [B]
  };
  Output run(const torch::Tensor& images);

  NetConfig cfg;
  std::vector<torch::nn::Conv2d> blocks;
  torch::nn::Linear fc{nullptr}, label_head{nullptr}, left_head{nullptr}, right_head{nullptr}, count_head{nullptr};
};
TORCH_MODULE(ReferenceNet);

inline constexpr int64_t kEmbeddingDim = 64;

struct TrainConfig {
  int64_t epochs = 6;
  int64_t batch_size = 32;
  double lr = 0.002;
  uint64_t seed = 0;
  double val_fraction = 0.15;

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Per-epoch metrics; `metrics` holds per-head accuracy (classifier), mean IoU
/// (segmenter) or attribute accuracy (reference net) on the validation split.
struct EpochReport {
  int64_t epoch;
  double train_loss;
  nlohmann::json metrics;
};

struct TrainingReport {
  std::vector<EpochReport> epochs;
  nlohmann::json final_metrics;
  nlohmann::json to_json() const;
};

Classifier train_classifier(const scene::Dataset& data, const NetConfig& cfg, const TrainConfig& tcfg, bool bias_flag,
                            TrainingReport* report = nullptr);
Segmenter train_segmenter(const scene::Dataset& data, const NetConfig& cfg, const TrainConfig& tcfg,
                          TrainingReport* report = nullptr);
ReferenceNet train_reference(const scene::Dataset& data, const NetConfig& cfg, const TrainConfig& tcfg,
                             TrainingReport* report = nullptr);

/// Per-head accuracy of thresholded predictions against [N, 4] labels.
std::vector<double> head_accuracy(Classifier& m, const torch::Tensor& images, const torch::Tensor& labels);
/// Mean IoU over classes present in either prediction or target, averaged over images.
double mean_iou(const torch::Tensor& predicted, const torch::Tensor& target);
/// Per-image mean IoU, [B] double.
torch::Tensor per_image_iou(const torch::Tensor& predicted, const torch::Tensor& target);

void save_classifier(const Classifier& m, const std::filesystem::path& path, const nlohmann::json& extra = {});
Classifier load_classifier(const std::filesystem::path& path);
void save_segmenter(const Segmenter& m, const std::filesystem::path& path);
Segmenter load_segmenter(const std::filesystem::path& path);
void save_reference(const ReferenceNet& m, const std::filesystem::path& path);
ReferenceNet load_reference(const std::filesystem::path& path);

/// Evaluates `fn` over `images` in chunks without building a graph.
torch::Tensor batched(const torch::Tensor& images, int64_t chunk, const std::function<torch::Tensor(const torch::Tensor&)>& fn);

}  // namespace octet::models
