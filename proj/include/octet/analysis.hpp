#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "octet/cf.hpp"
#include "octet/inversion.hpp"
#include "octet/metrics.hpp"
#include "octet/scene.hpp"

namespace octet::eval {

using blob::BlobLatent;

// ---- lambda sweep ---------------------------------------------------------

struct TradeoffPoint {
  double lambda = 0.0;
  double fid = 0.0;
  double perceptual = 0.0;  // mean over successful and failed jobs alike
  double success_rate = 0.0;
  double mean_l_dist = 0.0;
  double mean_modified = 0.0;
  int64_t jobs = 0;
  int64_t failures = 0;  // jobs that raised instead of returning a result

  nlohmann::json to_json() const;
};

std::vector<double> default_lambda_grid();

/// One batch of counterfactual jobs per lambda against the same queries and
/// targets. Per-job errors are counted, not fatal. `real_stats` are the
/// reference-net statistics of real images used for FID.
std::vector<TradeoffPoint> sweep_lambda(const BlobLatent& queries, const std::vector<cf::ClassTarget>& targets,
                                        const std::vector<double>& lambdas, const cf::CFRequest& base,
                                        blob::Generator& generator, models::Classifier& model,
                                        models::ReferenceNet& reference, const FeatureStats& real_stats,
                                        std::vector<std::vector<cf::CFResult>>* results = nullptr);

void write_sweep_csv(const std::vector<TradeoffPoint>& points, const std::filesystem::path& path);
/// FID against perceptual distance, each point labeled with lambda and success rate.
void plot_tradeoff(const std::vector<TradeoffPoint>& points, const std::filesystem::path& svg_path);

// ---- sparsity -------------------------------------------------------------

struct SparsityReport {
  std::vector<int64_t> histogram;  // index = number of modified blobs
  double mean = 0.0;
  int64_t n = 0;

  nlohmann::json to_json() const;
};

SparsityReport sparsity_report(const std::vector<std::vector<cf::BlobChange>>& changes);
SparsityReport sparsity_report(const std::vector<cf::CFResult>& results);

// ---- blob semantics -------------------------------------------------------

struct PixelDrop {
  int64_t blob = 0;
  int64_t samples = 0;
  int64_t active = 0;  // samples where the blob was present
  /// Per-sample class pixel counts before and after removal, [n][4].
  std::vector<std::array<int64_t, scene::kNumSegClasses>> before, after;
  std::array<double, scene::kNumSegClasses> mean_signed{};  // raw, may be negative
  std::array<double, scene::kNumSegClasses> mean_drop{};    // headline, clamped at 0

  nlohmann::json to_json() const;
};

/// Removes blob k (scale set to -1) from n latents sampled with `seed` and
/// counts segmenter pixels per class before and after.
PixelDrop class_pixel_drop(blob::Generator& generator, models::Segmenter& segmenter, int64_t k, int64_t n,
                           uint64_t seed);

struct Heatmap {
  int64_t blob = 0;
  int64_t bins_x = 8, bins_y = 4;
  std::vector<int64_t> counts;  // row-major [bins_y][bins_x]
  int64_t mass = 0;
  double mean_cx = 0.0, mean_cy = 0.0;

  double entropy() const;  // nats; 0 for an empty map
  double uniform_entropy() const { return std::log(static_cast<double>(bins_x * bins_y)); }
  nlohmann::json to_json() const;
};

/// 2D histogram of (cx, cy) of blob k over n sampled latents, active only.
Heatmap centroid_distribution(blob::Generator& generator, int64_t k, int64_t n, uint64_t seed, int64_t bins_x = 8,
                              int64_t bins_y = 4);

struct BlobLabel {
  int64_t blob = 0;
  std::string category;  // dominant class by headline drop, or "none"
  std::string region;    // e.g. "right, near"
  double dominant_drop = 0.0;
  double entropy = 0.0;
  bool localized = false;  // entropy below the uniform baseline
};

struct BlobSemanticsReport {
  std::vector<PixelDrop> drops;
  std::vector<Heatmap> heatmaps;
  std::vector<BlobLabel> labels;

  nlohmann::json to_json() const;
};

/// Minimum headline drop, in pixels, for a blob to receive a category label.
inline constexpr double kMinLabelDrop = 1.0;

BlobSemanticsReport blob_semantics(blob::Generator& generator, models::Segmenter& segmenter, int64_t n,
                                   uint64_t seed);

void plot_pixel_drops(const BlobSemanticsReport& report, const std::filesystem::path& svg_path);
void plot_heatmaps(const BlobSemanticsReport& report, const std::filesystem::path& svg_path);

// ---- inversion ablation ---------------------------------------------------

struct AblationVariant {
  std::string name;
  inversion::InversionConfig config;
};

/// Full objective plus one row per dropped term.
std::vector<AblationVariant> inversion_ablation_variants(const inversion::InversionConfig& base);

struct AblationRow {
  std::string name;
  double fid = 0.0;
  double perceptual = 0.0;
  double preservation = 0.0;

  nlohmann::json to_json() const;
};

/// Scores a set of reconstructions against their originals.
AblationRow score_reconstructions(const std::string& name, const torch::Tensor& originals,
                                  const torch::Tensor& reconstructions, models::Classifier& model,
                                  models::ReferenceNet& reference, const FeatureStats& real_stats);

std::vector<AblationRow> ablation_table(const std::vector<AblationVariant>& variants, const torch::Tensor& images,
                                        inversion::Encoder& encoder, blob::Generator& generator,
                                        models::Classifier& model, models::ReferenceNet& reference,
                                        const FeatureStats& real_stats);

void write_ablation_csv(const std::vector<AblationRow>& rows, const std::filesystem::path& path);

}  // namespace octet::eval
