#include "octet/generator.hpp"

#include <cmath>
#include <iostream>
#include <numbers>

#include "octet/image.hpp"

namespace octet::blob {

namespace nn = torch::nn;

void GeneratorConfig::validate() const {
  if (num_blobs < 1) throw std::invalid_argument("generator config: K must be >= 1");
  if (style_dim < 1 || noise_dim < 1 || layout_hidden < 1) throw std::invalid_argument("generator config: bad dims");
  if (height <= 0 || width <= 0) throw std::invalid_argument("generator config: canvas dims must be positive");
  if (tau <= 0.0) throw std::invalid_argument("generator config: tau must be positive");
}

nlohmann::json GeneratorConfig::to_json() const {
  return {{"num_blobs", num_blobs},       {"style_dim", style_dim}, {"noise_dim", noise_dim},
          {"layout_hidden", layout_hidden}, {"height", height},       {"width", width},
          {"tau", tau},                   {"synth_channels", synth_channels}, {"fourier_bands", fourier_bands},
          {"disc_channels", disc_channels}};
}

GeneratorConfig GeneratorConfig::from_json(const nlohmann::json& j) {
  GeneratorConfig c;
  c.num_blobs = j.value("num_blobs", c.num_blobs);
  c.style_dim = j.value("style_dim", c.style_dim);
  c.noise_dim = j.value("noise_dim", c.noise_dim);
  c.layout_hidden = j.value("layout_hidden", c.layout_hidden);
  c.height = j.value("height", c.height);
  c.width = j.value("width", c.width);
  c.tau = j.value("tau", c.tau);
  c.synth_channels = j.value("synth_channels", c.synth_channels);
  c.fourier_bands = j.value("fourier_bands", c.fourier_bands);
  c.disc_channels = j.value("disc_channels", c.disc_channels);
  c.validate();
  return c;
}

LayoutNetImpl::LayoutNetImpl(const GeneratorConfig& c) : cfg(c) {
  const int64_t k = cfg.num_blobs;
  const int64_t d = cfg.style_dim;
  fc1 = register_module("fc1", nn::Linear(cfg.noise_dim, cfg.layout_hidden));
  fc2 = register_module("fc2", nn::Linear(cfg.layout_hidden, cfg.layout_hidden));
  out = register_module("out", nn::Linear(cfg.layout_hidden, k * kSpatialDim + k * d + d));

  torch::NoGradGuard no_grad;
  auto w = out->weight;
  auto b = out->bias;
  w.normal_(0.0, 1.0 / std::sqrt(static_cast<double>(cfg.layout_hidden)));
  b.zero_();
  w.slice(0, 0, k * kSpatialDim).mul_(0.1);
  // Spread blob centers over a grid so every index starts with its own region.
  const int64_t cols = static_cast<int64_t>(std::ceil(std::sqrt(2.0 * k)));
  const int64_t rows = (k + cols - 1) / cols;
  for (int64_t i = 0; i < k; ++i) {
    const double u = (static_cast<double>(i % cols) + 0.5) / static_cast<double>(cols);
    const double v = (static_cast<double>(i / cols) + 0.5) / static_cast<double>(rows);
    b[i * kSpatialDim + kCx] = std::log(u / (1.0 - u));
    b[i * kSpatialDim + kCy] = std::log(v / (1.0 - v));
    b[i * kSpatialDim + kScale] = 0.1;
  }
}

torch::Tensor LayoutNetImpl::features(const torch::Tensor& noise) {
  if (noise.dim() != 2 || noise.size(1) != cfg.noise_dim)
    throw std::invalid_argument("layout: noise must be [B, " + std::to_string(cfg.noise_dim) + "]");
  auto x = torch::silu(fc1->forward(noise));
  return torch::silu(fc2->forward(x));
}

BlobLatent LayoutNetImpl::decode(const torch::Tensor& h) {
  if (h.dim() != 2 || h.size(1) != cfg.layout_hidden)
    throw std::invalid_argument("layout: h must be [B, " + std::to_string(cfg.layout_hidden) + "]");
  const int64_t k = cfg.num_blobs;
  const int64_t d = cfg.style_dim;
  const int64_t bsz = h.size(0);
  auto raw = out->forward(h);
  auto sp = raw.slice(1, 0, k * kSpatialDim).view({bsz, k, kSpatialDim});
  auto style = raw.slice(1, k * kSpatialDim, k * kSpatialDim + k * d).view({bsz, k, d});
  auto bg = raw.slice(1, k * kSpatialDim + k * d, k * kSpatialDim + k * d + d);
  auto spatial = torch::stack({torch::sigmoid(sp.select(2, kCx)), torch::sigmoid(sp.select(2, kCy)),
                               sp.select(2, kScale), torch::exp(1.2 * torch::tanh(sp.select(2, kAspect) / 1.2)),
                               sp.select(2, kAngle)},
                              2);
  return {spatial, style, bg};
}

namespace {

torch::Tensor fourier_coords(int64_t height, int64_t width, int64_t bands) {
  auto u = ((torch::arange(width, torch::kFloat32) + 0.5) / static_cast<double>(width)).view({1, width}).expand({height, width});
  auto v = ((torch::arange(height, torch::kFloat32) + 0.5) / static_cast<double>(height)).view({height, 1}).expand({height, width});
  std::vector<torch::Tensor> ch{2.0 * u - 1.0, 2.0 * v - 1.0};
  for (int64_t b = 0; b < bands; ++b) {
    const double f = 2.0 * std::numbers::pi * std::pow(2.0, static_cast<double>(b));
    ch.push_back(torch::sin(f * u));
    ch.push_back(torch::cos(f * u));
    ch.push_back(torch::sin(f * v));
    ch.push_back(torch::cos(f * v));
  }
  return torch::stack(ch, 0).unsqueeze(0).contiguous();
}

nn::Conv2d conv(int64_t in, int64_t out, int64_t k, int64_t stride = 1) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, k).stride(stride).padding(k / 2));
}

}  // namespace

SynthesisNetImpl::SynthesisNetImpl(const GeneratorConfig& c) : cfg(c) {
  coords = register_buffer("coords", fourier_coords(cfg.height, cfg.width, cfg.fourier_bands));
  const int64_t p = coords.size(1);
  const int64_t ch = cfg.synth_channels;
  in = register_module("in", conv(cfg.style_dim + p, ch, 1));
  c1 = register_module("c1", conv(ch, ch, 3));
  c2 = register_module("c2", conv(ch, ch, 1));
  c3 = register_module("c3", conv(ch, ch, 3));
  rgb = register_module("rgb", conv(ch, 3, 1));
}

torch::Tensor SynthesisNetImpl::forward(const torch::Tensor& features) {
  auto x = torch::cat({features, coords.expand({features.size(0), -1, -1, -1})}, 1);
  x = torch::silu(in->forward(x));
  x = torch::silu(c1->forward(x));
  x = torch::silu(c2->forward(x));
  x = torch::silu(c3->forward(x));
  return torch::sigmoid(rgb->forward(x));
}

GeneratorImpl::GeneratorImpl(const GeneratorConfig& c) : cfg(c) {
  cfg.validate();
  layout = register_module("layout", LayoutNet(cfg));
  synthesis = register_module("synthesis", SynthesisNet(cfg));
}

GeneratorImpl::Layout GeneratorImpl::sample_layout(const torch::Tensor& noise) {
  auto h = layout->features(noise);
  return {h, layout->decode(h)};
}

torch::Tensor GeneratorImpl::random_noise(int64_t n) {
  return torch::randn({n, cfg.noise_dim}, torch::TensorOptions().dtype(synthesis->coords.scalar_type()));
}

torch::Tensor GeneratorImpl::alpha(const BlobLatent& z) {
  check_shape(z, cfg.num_blobs, cfg.style_dim);
  return render_blobs(z.spatial, cfg.height, cfg.width, cfg.tau);
}

torch::Tensor GeneratorImpl::generate(const BlobLatent& z) {
  auto a = alpha(z);
  auto comp = compose_features(a, z.style, z.background);
  return synthesis->forward(comp.features);
}

ConvTrunkImpl::ConvTrunkImpl(int64_t height, int64_t width, int64_t channels) {
  body = register_module("body", nn::Sequential());
  body->push_back(conv(3, channels, 3));
  body->push_back(nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)));
  int64_t c = channels;
  int64_t h = height;
  int64_t w = width;
  while (h > 4 && w > 4) {
    const int64_t next = std::min<int64_t>(c * 2, channels * 4);
    body->push_back(conv(c, next, 3, 2));
    body->push_back(nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)));
    c = next;
    h = (h + 1) / 2;
    w = (w + 1) / 2;
  }
  flat_dim = c * h * w;
}

torch::Tensor ConvTrunkImpl::forward(torch::Tensor x) { return body->forward(x).flatten(1); }

DiscriminatorImpl::DiscriminatorImpl(const GeneratorConfig& cfg) {
  trunk = register_module("trunk", ConvTrunk(cfg.height, cfg.width, cfg.disc_channels));
  fc = register_module("fc", nn::Linear(trunk->flat_dim + 1, 128));
  head = register_module("head", nn::Linear(128, 1));
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& x) {
  auto f = trunk->forward(2.0 * x - 1.0);
  // minibatch standard deviation feature
  auto sd = torch::sqrt(f.var(0, false) + 1e-8).mean().view({1, 1}).expand({f.size(0), 1});
  f = torch::cat({f, sd}, 1);
  return head->forward(torch::leaky_relu(fc->forward(f), 0.2)).squeeze(1);
}

TensorArchive generator_archive(const Generator& g) {
  TensorArchive a;
  a.meta = {{"kind", "generator"}, {"config", g->cfg.to_json()}};
  export_module(a, *g, "g.");
  return a;
}

Generator generator_from_archive(const TensorArchive& a) {
  if (a.meta.value("kind", "") != "generator") throw std::runtime_error("checkpoint is not a generator");
  Generator g(GeneratorConfig::from_json(a.meta.at("config")));
  import_module(a, *g, "g.");
  g->eval();
  return g;
}

void save_generator(const Generator& g, const std::filesystem::path& path, const nlohmann::json& extra) {
  auto a = generator_archive(g);
  if (!extra.is_null()) a.meta["extra"] = extra;
  save_archive(a, path);
}

Generator load_generator(const std::filesystem::path& path) { return generator_from_archive(load_archive(path)); }

Generator clone_generator(const Generator& g, torch::ScalarType dtype) {
  auto copy = generator_from_archive(generator_archive(g));
  copy->to(dtype);
  return copy;
}

nlohmann::json GanTrainConfig::to_json() const {
  return {{"steps", steps},       {"batch_size", batch_size}, {"lr_g", lr_g},       {"lr_d", lr_d},
          {"beta1", beta1},       {"beta2", beta2},           {"r1_gamma", r1_gamma}, {"r1_every", r1_every},
          {"log_every", log_every}, {"sample_every", sample_every}, {"seed", seed}};
}

GanTrainConfig GanTrainConfig::from_json(const nlohmann::json& j) {
  GanTrainConfig c;
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr_g = j.value("lr_g", c.lr_g);
  c.lr_d = j.value("lr_d", c.lr_d);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.r1_gamma = j.value("r1_gamma", c.r1_gamma);
  c.r1_every = j.value("r1_every", c.r1_every);
  c.log_every = j.value("log_every", c.log_every);
  c.sample_every = j.value("sample_every", c.sample_every);
  c.seed = j.value("seed", c.seed);
  return c;
}

GanTrainResult train_gan(const torch::Tensor& images, const GeneratorConfig& gcfg, const GanTrainConfig& tcfg,
                         const GanEvalHook& eval_hook, int64_t eval_every) {
  if (images.dim() != 4 || images.size(1) != 3 || images.size(2) != gcfg.height || images.size(3) != gcfg.width)
    throw std::invalid_argument("train_gan: images must be [N, 3, H, W] matching the generator canvas");
  if (images.size(0) < 1) throw std::invalid_argument("train_gan: empty dataset");
  torch::manual_seed(tcfg.seed);

  GanTrainResult res;
  res.generator = Generator(gcfg);
  res.discriminator = Discriminator(gcfg);
  auto& g = res.generator;
  auto& d = res.discriminator;
  torch::optim::Adam opt_g(g->parameters(), torch::optim::AdamOptions(tcfg.lr_g).betas({tcfg.beta1, tcfg.beta2}));
  torch::optim::Adam opt_d(d->parameters(), torch::optim::AdamOptions(tcfg.lr_d).betas({tcfg.beta1, tcfg.beta2}));

  const auto fixed_noise = g->random_noise(16);
  const int64_t n = images.size(0);
  auto run_eval = [&](int64_t step) {
    if (!eval_hook) return;
    g->eval();
    res.eval_log.emplace_back(step, eval_hook(step, g));
    g->train();
  };
  run_eval(0);

  for (int64_t step = 1; step <= tcfg.steps; ++step) {
    auto idx = torch::randint(n, {tcfg.batch_size}, torch::kLong);
    auto real = images.index_select(0, idx);

    // discriminator
    opt_d.zero_grad();
    torch::Tensor fake;
    {
      torch::NoGradGuard no_grad;
      fake = g->generate(g->sample_layout(g->random_noise(tcfg.batch_size)).z);
    }
    auto d_loss = torch::softplus(d->forward(fake)).mean() + torch::softplus(-d->forward(real)).mean();
    double r1_value = 0.0;
    if (tcfg.r1_gamma > 0.0 && tcfg.r1_every > 0 && step % tcfg.r1_every == 0) {
      auto real_g = real.clone().set_requires_grad(true);
      auto out = d->forward(real_g);
      auto grad = torch::autograd::grad({out.sum()}, {real_g}, {}, true, true)[0];
      auto r1 = grad.pow(2).sum({1, 2, 3}).mean();
      r1_value = r1.item<double>();
      d_loss = d_loss + 0.5 * tcfg.r1_gamma * static_cast<double>(tcfg.r1_every) * r1;
    }
    d_loss.backward();
    opt_d.step();

    // generator
    opt_g.zero_grad();
    auto gen = g->generate(g->sample_layout(g->random_noise(tcfg.batch_size)).z);
    auto g_loss = torch::softplus(-d->forward(gen)).mean();
    g_loss.backward();
    opt_g.step();

    const double dl = d_loss.item<double>();
    const double gl = g_loss.item<double>();
    if (!std::isfinite(dl) || !std::isfinite(gl))
      throw TrainingDiverged("train_gan: non-finite loss at step " + std::to_string(step) +
                             " (d_loss=" + std::to_string(dl) + ", g_loss=" + std::to_string(gl) + ")");
    if (tcfg.log_every > 0 && (step % tcfg.log_every == 0 || step == tcfg.steps))
      res.log.push_back({step, dl, gl, r1_value});
    if (!tcfg.sample_dir.empty() && tcfg.sample_every > 0 &&
        (step % tcfg.sample_every == 0 || step == tcfg.steps)) {
      torch::NoGradGuard no_grad;
      g->eval();
      auto samples = g->generate(g->sample_layout(fixed_noise).z);
      std::filesystem::create_directories(tcfg.sample_dir);
      write_png(make_grid(samples, 4), tcfg.sample_dir / ("samples_" + std::to_string(step) + ".png"));
      g->train();
    }
    if (eval_every > 0 && step % eval_every == 0 && step != tcfg.steps) run_eval(step);
  }
  run_eval(tcfg.steps);
  g->eval();
  d->eval();
  return res;
}

}  // namespace octet::blob
