#pragma once

#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "octet/blob.hpp"
#include "octet/generator.hpp"
#include "octet/models.hpp"

namespace octet::cf {

using blob::BlobLatent;

enum class Mode { full, style_only, spatial_only, targeted };
std::string to_string(Mode m);
Mode mode_from_string(const std::string& s);

/// Per-blob, per-group optimization weights and freeze flags.
///
/// A frozen (blob, group) is bit-exact unchanged by the optimizer. Weights
/// scale that group's share of the per-object L1 distance.
struct EditMask {
  std::vector<double> spatial_weight;
  std::vector<double> style_weight;
  std::vector<bool> spatial_frozen;
  std::vector<bool> style_frozen;
  double background_weight = 1.0;
  bool background_frozen = true;

  int64_t num_blobs() const { return static_cast<int64_t>(spatial_weight.size()); }

  /// Unit weights, nothing frozen except the background.
  static EditMask uniform(int64_t k);
  /// Mask implied by a mode: style_only freezes every spatial group,
  /// spatial_only every style group, targeted freezes blobs outside `selected`.
  static EditMask for_mode(Mode mode, int64_t k, const std::vector<int64_t>& selected = {});
  /// Penalty-only variant of targeting: nothing frozen, unselected blobs keep
  /// their weights and selected blobs get `selected_weight`.
  static EditMask penalty_only(int64_t k, const std::vector<int64_t>& selected, double selected_weight = 0.0);

  void validate(int64_t k) const;
  nlohmann::json to_json() const;
  static EditMask from_json(const nlohmann::json& j);
};

/// Weighted per-object L1 distance. With EditMask::uniform it is exactly
/// sum_k |phi_k - phi_k^q|_1 + |psi_k - psi_k^q|_1; the background adds
/// background_weight * |bg - bg^q|_1 only when it is not frozen.
/// Returns one value per batch element, [B].
torch::Tensor l_dist(const BlobLatent& z, const BlobLatent& zq, const EditMask& mask);

struct OptimizerConfig {
  int64_t steps = 200;
  double lr = 0.03;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double early_stop_margin = 0.1;  // target probability beyond 0.5 +/- margin
  int64_t early_stop_patience = 10;
  bool early_stop = true;

  nlohmann::json to_json() const;
  static OptimizerConfig from_json(const nlohmann::json& j);
};

struct ClassTarget {
  std::string head;
  bool value = true;
};

struct CFRequest {
  BlobLatent zq;  // batch of one
  std::variant<ClassTarget, torch::Tensor> target;  // head target or [H, W] SegMask
  double lambda_dist = 0.1;
  EditMask mask;
  OptimizerConfig optimizer;
  Mode mode = Mode::full;
  std::vector<int64_t> selected;  // blob set S for targeted mode
  bool hold_other_heads = false;  // penalize drift of the non-targeted heads
  double iou_threshold = 0.8;     // segmentation success threshold
  /// Starting scale given to inactive selected blobs so they can receive a
  /// gradient (an absent blob has none). 0 disables activation.
  double activation_scale = 0.05;

  nlohmann::json to_json() const;  // latent excluded
};

struct BlobChange {
  std::array<double, 5> delta_spatial{};
  double style_l1 = 0.0;
  bool appeared = false;
  bool disappeared = false;
  bool modified = false;
};

struct TraceEntry {
  int64_t step;
  double decision_loss;
  double dist_loss;
  double target_metric;  // probability of the target (classification) or mean IoU (segmentation)
};

struct CFResult {
  BlobLatent z_cf;
  torch::Tensor image;  // [1, 3, H, W] = generate(z_cf)
  bool success = false;
  std::vector<BlobChange> changes;
  std::vector<TraceEntry> trace;
  int64_t steps_run = 0;
  double final_metric = 0.0;

  int64_t modified_count() const;
  nlohmann::json change_report() const;
  nlohmann::json trace_json() const;
};

/// Threshold on ||dphi_k||_1 + ||dpsi_k||_1 above which a blob counts as modified.
inline constexpr double kModifiedThreshold = 1e-3;

std::vector<BlobChange> change_report(const BlobLatent& z_cf, const BlobLatent& zq);

struct NonFiniteLoss : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Classification counterfactual (argmin L_decision + lambda * l_dist from zq).
/// Validates the request; the target must differ from the current decision.
CFResult counterfactual(const CFRequest& request, blob::Generator& generator, models::Classifier& model);

/// Same as counterfactual with the mask restricted to request.selected
/// (must be non-empty). Inactive selected blobs may become active.
CFResult targeted_counterfactual(CFRequest request, blob::Generator& generator, models::Classifier& model);

/// Segmentation counterfactual against a target [H, W] mask; success is
/// per-image mean IoU >= request.iou_threshold.
CFResult segmentation_counterfactual(const CFRequest& request, blob::Generator& generator, models::Segmenter& segmenter);

/// Batched classification counterfactuals sharing one configuration. Each
/// batch element is optimized independently (per-element Adam state and
/// early stopping), so results match single runs.
std::vector<CFResult> counterfactual_batch(const BlobLatent& zq, const std::vector<ClassTarget>& targets,
                                           const CFRequest& shared, blob::Generator& generator,
                                           models::Classifier& model);

/// The scalar objective L_decision + lambda * l_dist at z for a request,
/// differentiable in z; exposed for gradient checks.
torch::Tensor classification_objective(const BlobLatent& z, const CFRequest& request, blob::Generator& generator,
                                       models::Classifier& model);

/// Recomputes the success flag from an image and the model alone.
bool verify_success(const torch::Tensor& image, const ClassTarget& target, models::Classifier& model);

/// Resolves request.mask from mode/selected when the caller left it empty.
EditMask effective_mask(const CFRequest& request, int64_t k);

}  // namespace octet::cf
