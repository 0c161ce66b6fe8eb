#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "octet/blob.hpp"
#include "octet/checkpoint.hpp"

namespace octet::blob {

struct GeneratorConfig {
  int64_t num_blobs = 12;      // K
  int64_t style_dim = 32;      // d_style
  int64_t noise_dim = 32;
  int64_t layout_hidden = 128;  // d_h, size of the penultimate layout feature
  int64_t height = 64;
  int64_t width = 128;
  double tau = 0.05;
  int64_t synth_channels = 48;
  int64_t fourier_bands = 4;
  int64_t disc_channels = 32;

  void validate() const;
  nlohmann::json to_json() const;
  static GeneratorConfig from_json(const nlohmann::json& j);
};

/// Receptive-field radius, in pixels, of the synthesis network. An edit to
/// blob k cannot change pixels farther than this from where its opacity moved.
inline constexpr int64_t kSynthesisRadius = 2;

/// Noise -> penultimate feature h -> blob latent.
struct LayoutNetImpl : torch::nn::Module {
  explicit LayoutNetImpl(const GeneratorConfig& cfg);

  /// Penultimate layout feature h, [B, d_h].
  torch::Tensor features(const torch::Tensor& noise);
  /// The final layer: h -> blob latent.
  BlobLatent decode(const torch::Tensor& h);

  GeneratorConfig cfg;
  torch::nn::Linear fc1{nullptr}, fc2{nullptr}, out{nullptr};
};
TORCH_MODULE(LayoutNet);

/// Composited feature grid (+ fixed Fourier coordinates) -> RGB in [0, 1].
struct SynthesisNetImpl : torch::nn::Module {
  explicit SynthesisNetImpl(const GeneratorConfig& cfg);
  torch::Tensor forward(const torch::Tensor& features);

  GeneratorConfig cfg;
  torch::Tensor coords;  // buffer [1, P, H, W]
  torch::nn::Conv2d in{nullptr}, c1{nullptr}, c2{nullptr}, c3{nullptr}, rgb{nullptr};
};
TORCH_MODULE(SynthesisNet);

struct GeneratorImpl : torch::nn::Module {
  explicit GeneratorImpl(const GeneratorConfig& cfg);

  struct Layout {
    torch::Tensor h;
    BlobLatent z;
  };
  Layout sample_layout(const torch::Tensor& noise);
  torch::Tensor random_noise(int64_t n);

  /// Renders latents to images [B, 3, H, W]. Throws on shape mismatch.
  torch::Tensor generate(const BlobLatent& z);
  torch::Tensor alpha(const BlobLatent& z);

  GeneratorConfig cfg;
  LayoutNet layout{nullptr};
  SynthesisNet synthesis{nullptr};
};
TORCH_MODULE(Generator);

/// Strided convolutional trunk shared by the discriminator and the encoder.
struct ConvTrunkImpl : torch::nn::Module {
  ConvTrunkImpl(int64_t height, int64_t width, int64_t channels);
  torch::Tensor forward(torch::Tensor x);  // [B, flat_dim]

  torch::nn::Sequential body{nullptr};
  int64_t flat_dim = 0;
};
TORCH_MODULE(ConvTrunk);

struct DiscriminatorImpl : torch::nn::Module {
  explicit DiscriminatorImpl(const GeneratorConfig& cfg);
  torch::Tensor forward(const torch::Tensor& x);  // logits [B]

  ConvTrunk trunk{nullptr};
  torch::nn::Linear fc{nullptr}, head{nullptr};
};
TORCH_MODULE(Discriminator);

/// Generator copy in float64 for gradient checks. The source is not modified.
Generator clone_generator(const Generator& g, torch::ScalarType dtype);

void save_generator(const Generator& g, const std::filesystem::path& path, const nlohmann::json& extra = {});
Generator load_generator(const std::filesystem::path& path);
TensorArchive generator_archive(const Generator& g);
Generator generator_from_archive(const TensorArchive& a);

struct GanTrainConfig {
  int64_t steps = 3000;
  int64_t batch_size = 16;
  double lr_g = 0.002;
  double lr_d = 0.002;
  double beta1 = 0.0;
  double beta2 = 0.99;
  double r1_gamma = 1.0;
  int64_t r1_every = 4;
  int64_t log_every = 50;
  int64_t sample_every = 500;
  uint64_t seed = 0;
  std::filesystem::path sample_dir;  // empty = no sample grids

  nlohmann::json to_json() const;
  static GanTrainConfig from_json(const nlohmann::json& j);
};

struct GanLogEntry {
  int64_t step;
  double d_loss;
  double g_loss;
  double r1;
};

struct GanTrainResult {
  Generator generator{nullptr};
  Discriminator discriminator{nullptr};
  std::vector<GanLogEntry> log;
  std::vector<std::pair<int64_t, double>> eval_log;  // (step, value) from the eval hook
};

struct TrainingDiverged : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Called every `eval_every` steps (and at step 0 and the end) with the
/// generator in its current state; the returned value is logged.
using GanEvalHook = std::function<double(int64_t step, Generator& g)>;

/// Non-saturating logistic GAN with lazy R1 on real images. `images` is
/// [N, 3, H, W] in [0, 1]; no labels are consumed.
GanTrainResult train_gan(const torch::Tensor& images, const GeneratorConfig& gcfg, const GanTrainConfig& tcfg,
                         const GanEvalHook& eval_hook = {}, int64_t eval_every = 0);

}  // namespace octet::blob
