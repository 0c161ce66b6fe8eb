#pragma once

#include <filesystem>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "octet/blob.hpp"
#include "octet/generator.hpp"
#include "octet/models.hpp"

namespace octet::inversion {

using blob::BlobLatent;

/// Image -> penultimate layout feature h. Same trunk as the discriminator,
/// followed by a linear head of size d_h.
struct EncoderImpl : torch::nn::Module {
  EncoderImpl(const blob::GeneratorConfig& gcfg, int64_t channels);
  torch::Tensor forward(const torch::Tensor& images);  // [B, d_h]

  int64_t height, width, channels, hidden;
  blob::ConvTrunk trunk{nullptr};
  torch::nn::Linear head{nullptr};
};
TORCH_MODULE(Encoder);

void save_encoder(const Encoder& e, const std::filesystem::path& path, const nlohmann::json& extra = {});
Encoder load_encoder(const std::filesystem::path& path);

struct PretrainConfig {
  int64_t steps = 1500;
  int64_t batch_size = 32;
  double lr = 0.005;
  int64_t channels = 32;
  int64_t heldout = 256;
  int64_t log_every = 50;
  uint64_t seed = 0;

  nlohmann::json to_json() const;
  static PretrainConfig from_json(const nlohmann::json& j);
};

struct EncoderLog {
  int64_t step;
  nlohmann::json values;
};

struct PretrainResult {
  Encoder encoder{nullptr};
  double initial_heldout_loss = 0.0;
  double final_heldout_loss = 0.0;
  std::vector<EncoderLog> log;
};

/// Latent-cycle training: minimize |h - E(G(h))|^2 over h drawn from the
/// layout network.
PretrainResult pretrain_encoder(blob::Generator& generator, const PretrainConfig& cfg);

struct FinetuneConfig {
  int64_t steps = 1000;
  int64_t batch_size = 16;  // split between real and generated images
  double lr = 2e-4;
  double real_fraction = 0.5;
  double lambda_lpips = 1.0;
  double lambda_latent = 0.1;  // generated images only
  double lambda_decision = 0.05;
  int64_t log_every = 50;
  uint64_t seed = 0;

  nlohmann::json to_json() const;
  static FinetuneConfig from_json(const nlohmann::json& j);
};

/// Pixel L2 + lambda_lpips * perceptual + lambda_latent * latent cycle +
/// lambda_decision * L2 on f_M, over a mix of real and generated images.
/// Returns a fine-tuned copy; the input encoder is left untouched.
Encoder finetune_encoder(const Encoder& encoder, blob::Generator& generator, models::Classifier& model,
                         models::ReferenceNet& reference, const torch::Tensor& real_images, const FinetuneConfig& cfg,
                         std::vector<EncoderLog>* log = nullptr);

struct InversionConfig {
  int64_t steps = 300;
  double lr = 0.02;
  double w_perceptual = 1.0;
  double w_pixel = 1.0;
  double w_features = 1.0;
  double w_proximity = 0.1;
  bool cosine_decay = true;
  /// Debug mode: gradient descent with backtracking that only accepts steps
  /// lowering the loss.
  bool line_search = false;
  bool optimize_background = true;
  int64_t batch_size = 50;  // images inverted together (independent problems)

  void validate() const;
  nlohmann::json to_json() const;
  static InversionConfig from_json(const nlohmann::json& j);
};

struct InversionTerms {
  double perceptual, pixel, features, proximity, total;
};

struct InversionResult {
  BlobLatent z;        // z^q, batch of one
  BlobLatent z_init;   // E(x^q) or the forced initialization
  torch::Tensor reconstruction;  // generate(z), [1, 3, H, W]
  std::vector<InversionTerms> trace;
  bool decision_preserved = false;
  int64_t steps_run = 0;

  nlohmann::json trace_json() const;
};

struct NonFiniteLoss : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Per-image objective terms at z against targets x; each [B].
struct ObjectiveTerms {
  torch::Tensor perceptual, pixel, features, proximity, total;
};
ObjectiveTerms inversion_objective(const BlobLatent& z, const BlobLatent& z_init, const torch::Tensor& images,
                                   const InversionConfig& cfg, blob::Generator& generator, models::Classifier& model,
                                   models::ReferenceNet& reference);

/// Inverts each image independently. `init` replaces E(x) as the starting
/// point (and proximity anchor) when given.
std::vector<InversionResult> invert(const torch::Tensor& images, Encoder& encoder, blob::Generator& generator,
                                    models::Classifier& model, models::ReferenceNet& reference,
                                    const InversionConfig& cfg, const std::optional<BlobLatent>& init = std::nullopt);

/// Fraction of pairs whose thresholded decisions agree on every head.
/// Throws std::invalid_argument for an empty or mismatched set.
double decision_preservation(const torch::Tensor& originals, const torch::Tensor& reconstructions,
                             models::Classifier& model);

TensorArchive latent_archive(const BlobLatent& z);
BlobLatent latent_from_archive(const TensorArchive& a);
void save_latent(const BlobLatent& z, const std::filesystem::path& path, const nlohmann::json& meta = {});
BlobLatent load_latent(const std::filesystem::path& path);

/// Session record: latents plus the loss trace.
void save_inversion(const InversionResult& r, const std::filesystem::path& path);
InversionResult load_inversion(const std::filesystem::path& path);

}  // namespace octet::inversion
