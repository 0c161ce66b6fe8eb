#pragma once

#include <optional>
#include <tuple>
#include <vector>

#include <torch/torch.h>

namespace octet::blob {

/// Layout of the five spatial scalars of a blob.
enum SpatialField : int64_t { kCx = 0, kCy = 1, kScale = 2, kAspect = 3, kAngle = 4 };
inline constexpr int64_t kSpatialDim = 5;

/// Smallest aspect the renderer accepts; smaller values are clamped.
inline constexpr double kMinAspect = 1e-2;

/// Full latent code of a batch of scenes.
///
/// spatial    [B, K, 5]  cx, cy in normalized image coords (u right, v down),
///                       scale in image-height units (<= 0 means absent),
///                       aspect = width/height ratio of the ellipse, angle in radians
/// style      [B, K, D]
/// background [B, D]     fills canvas weight not covered by any blob
struct BlobLatent {
  torch::Tensor spatial;
  torch::Tensor style;
  torch::Tensor background;

  int64_t batch() const { return spatial.size(0); }
  int64_t num_blobs() const { return spatial.size(1); }
  int64_t style_dim() const { return style.size(2); }

  BlobLatent clone() const;
  BlobLatent detach() const;
  BlobLatent to(torch::ScalarType dtype) const;
  /// Single element `b` as a batch of one.
  BlobLatent slice(int64_t b) const;
  BlobLatent requires_grad(bool on = true) const;
  /// Flattened view of all entries, spatial then style then background.
  torch::Tensor flat() const;
  bool equal(const BlobLatent& other) const;

  static BlobLatent cat(const std::vector<BlobLatent>& parts);
};

/// Throws std::invalid_argument unless the latent is well-formed for (K, D).
void check_shape(const BlobLatent& z, int64_t num_blobs, int64_t style_dim);

/// Soft ellipse opacities, [B, K, H, W].
///
/// alpha_k(u, v) = sigmoid((s_k - d_k(u, v)) / tau) when s_k > 0 and 0 otherwise,
/// with d_k the rotated elliptical distance in image-height units:
///   dx = (u - cx) * W / H, dy = v - cy, rotated by -angle,
///   d = sqrt(x'^2 / a + y'^2 * a).
torch::Tensor render_blobs(const torch::Tensor& spatial, int64_t height, int64_t width, double tau);

struct Composite {
  torch::Tensor features;  // [B, D, H, W]
  torch::Tensor weights;   // [B, K + 1, H, W]; last slot is the background
};

/// Index-ordered alpha compositing: blob k is occluded by every blob j > k and
/// the background takes the remaining transmittance. Weights sum to one.
Composite compose_features(const torch::Tensor& alpha, const torch::Tensor& style, const torch::Tensor& background);

/// Partial update of one blob.
struct BlobEdit {
  enum class Op { set, add };
  std::vector<std::tuple<SpatialField, Op, double>> spatial;
  std::optional<torch::Tensor> style;  // replacement psi_k, shape [D]

  BlobEdit& set(SpatialField f, double v) {
    spatial.emplace_back(f, Op::set, v);
    return *this;
  }
  BlobEdit& add(SpatialField f, double v) {
    spatial.emplace_back(f, Op::add, v);
    return *this;
  }
  BlobEdit& replace_style(torch::Tensor s) {
    style = std::move(s);
    return *this;
  }
};

/// Returns a copy of z with only blob k modified (every batch element, or
/// only `batch_index` when given). Throws std::out_of_range for a bad k.
BlobLatent edit_blob(const BlobLatent& z, int64_t k, const BlobEdit& edit,
                     std::optional<int64_t> batch_index = std::nullopt);

/// [B, K] boolean, true where scale > 0.
torch::Tensor active_mask(const BlobLatent& z);

}  // namespace octet::blob
