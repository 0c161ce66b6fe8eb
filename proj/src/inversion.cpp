#include "octet/inversion.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include "octet/checkpoint.hpp"
#include "octet/metrics.hpp"

namespace octet::inversion {

namespace {

/// Turns off parameter gradients of a module for the lifetime of the guard.
class FrozenParams {
 public:
  explicit FrozenParams(torch::nn::Module& m) {
    // parameters already frozen are left untouched so shared models are not written to
    for (auto& p : m.parameters())
      if (p.requires_grad()) {
        saved_.push_back(p);
        p.set_requires_grad(false);
      }
  }
  ~FrozenParams() {
    for (auto& p : saved_) p.set_requires_grad(true);
  }
  FrozenParams(const FrozenParams&) = delete;
  FrozenParams& operator=(const FrozenParams&) = delete;

 private:
  std::vector<torch::Tensor> saved_;
};

torch::Tensor per_sample_mse(const torch::Tensor& a, const torch::Tensor& b) {
  return (a - b).pow(2).flatten(1).mean(1);
}

}  // namespace

EncoderImpl::EncoderImpl(const blob::GeneratorConfig& gcfg, int64_t channels_)
    : height(gcfg.height), width(gcfg.width), channels(channels_), hidden(gcfg.layout_hidden) {
  trunk = register_module("trunk", blob::ConvTrunk(height, width, channels));
  head = register_module("head", torch::nn::Linear(trunk->flat_dim, hidden));
}

torch::Tensor EncoderImpl::forward(const torch::Tensor& images) {
  if (images.dim() != 4 || images.size(2) != height || images.size(3) != width)
    throw std::invalid_argument("encoder: expected [B, 3, " + std::to_string(height) + ", " + std::to_string(width) + "]");
  auto f = torch::leaky_relu(trunk->forward(2.0 * images - 1.0), 0.2);
  return head->forward(f);
}

void save_encoder(const Encoder& e, const std::filesystem::path& path, const nlohmann::json& extra) {
  TensorArchive a;
  a.meta = {{"kind", "encoder"},
            {"height", e->height},
            {"width", e->width},
            {"channels", e->channels},
            {"hidden", e->hidden}};
  if (!extra.is_null()) a.meta["extra"] = extra;
  export_module(a, *e, "e.");
  save_archive(a, path);
}

Encoder load_encoder(const std::filesystem::path& path) {
  auto a = load_archive(path);
  if (a.meta.value("kind", "") != "encoder") throw std::runtime_error(path.string() + " is not an encoder checkpoint");
  blob::GeneratorConfig g;
  g.height = a.meta.at("height");
  g.width = a.meta.at("width");
  g.layout_hidden = a.meta.at("hidden");
  Encoder e(g, a.meta.at("channels").get<int64_t>());
  import_module(a, *e, "e.");
  e->eval();
  return e;
}

nlohmann::json PretrainConfig::to_json() const {
  return {{"steps", steps}, {"batch_size", batch_size}, {"lr", lr}, {"channels", channels},
          {"heldout", heldout}, {"log_every", log_every}, {"seed", seed}};
}

PretrainConfig PretrainConfig::from_json(const nlohmann::json& j) {
  PretrainConfig c;
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.channels = j.value("channels", c.channels);
  c.heldout = j.value("heldout", c.heldout);
  c.log_every = j.value("log_every", c.log_every);
  c.seed = j.value("seed", c.seed);
  return c;
}

PretrainResult pretrain_encoder(blob::Generator& generator, const PretrainConfig& cfg) {
  if (cfg.steps < 0 || cfg.batch_size < 1) throw std::invalid_argument("pretrain_encoder: bad steps or batch size");
  torch::manual_seed(cfg.seed);
  generator->eval();
  FrozenParams frozen(*generator);
  PretrainResult r;
  r.encoder = Encoder(generator->cfg, cfg.channels);
  auto& enc = r.encoder;
  if (enc->hidden != generator->cfg.layout_hidden) throw std::invalid_argument("pretrain_encoder: d_h mismatch");

  auto draw = [&](int64_t n) {
    torch::NoGradGuard no_grad;
    auto layout = generator->sample_layout(generator->random_noise(n));
    return std::make_pair(layout.h, generator->generate(layout.z));
  };
  auto [held_h, held_x] = draw(cfg.heldout);
  auto heldout_loss = [&, &held_h = held_h, &held_x = held_x] {
    torch::NoGradGuard no_grad;
    enc->eval();
    auto pred = models::batched(held_x, 128, [&](const torch::Tensor& x) { return enc->forward(x); });
    enc->train();
    return torch::mse_loss(pred, held_h).item<double>();
  };

  r.initial_heldout_loss = heldout_loss();
  r.log.push_back({0, {{"heldout", r.initial_heldout_loss}}});
  torch::optim::Adam opt(enc->parameters(), torch::optim::AdamOptions(cfg.lr).betas({0.9, 0.99}));
  enc->train();
  for (int64_t step = 1; step <= cfg.steps; ++step) {
    auto [h, x] = draw(cfg.batch_size);
    auto loss = torch::mse_loss(enc->forward(x), h);
    if (!torch::isfinite(loss).item<bool>())
      throw NonFiniteLoss("pretrain_encoder: non-finite loss at step " + std::to_string(step));
    opt.zero_grad();
    loss.backward();
    opt.step();
    if (step % cfg.log_every == 0 || step == cfg.steps)
      r.log.push_back({step, {{"train", loss.item<double>()}, {"heldout", heldout_loss()}}});
  }
  r.final_heldout_loss = heldout_loss();
  enc->eval();
  return r;
}

nlohmann::json FinetuneConfig::to_json() const {
  return {{"steps", steps},
          {"batch_size", batch_size},
          {"lr", lr},
          {"real_fraction", real_fraction},
          {"lambda_lpips", lambda_lpips},
          {"lambda_latent", lambda_latent},
          {"lambda_decision", lambda_decision},
          {"log_every", log_every},
          {"seed", seed}};
}

FinetuneConfig FinetuneConfig::from_json(const nlohmann::json& j) {
  FinetuneConfig c;
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.real_fraction = j.value("real_fraction", c.real_fraction);
  c.lambda_lpips = j.value("lambda_lpips", c.lambda_lpips);
  c.lambda_latent = j.value("lambda_latent", c.lambda_latent);
  c.lambda_decision = j.value("lambda_decision", c.lambda_decision);
  c.log_every = j.value("log_every", c.log_every);
  c.seed = j.value("seed", c.seed);
  return c;
}

Encoder finetune_encoder(const Encoder& encoder, blob::Generator& generator, models::Classifier& model,
                         models::ReferenceNet& reference, const torch::Tensor& real_images, const FinetuneConfig& cfg,
                         std::vector<EncoderLog>* log) {
  if (real_images.size(0) == 0 && cfg.real_fraction > 0.0)
    throw std::invalid_argument("finetune_encoder: no real images");
  if (encoder->hidden != generator->cfg.layout_hidden) throw std::invalid_argument("finetune_encoder: d_h mismatch");
  torch::manual_seed(cfg.seed);
  std::mt19937_64 rng(cfg.seed);

  TensorArchive a;
  export_module(a, *encoder, "e.");
  blob::GeneratorConfig g = generator->cfg;
  Encoder enc(g, encoder->channels);
  import_module(a, *enc, "e.");
  enc->train();

  generator->eval();
  model->eval();
  reference->eval();
  FrozenParams f1(*generator), f2(*model), f3(*reference);

  const int64_t n_real = static_cast<int64_t>(std::lround(cfg.batch_size * cfg.real_fraction));
  const int64_t n_gen = cfg.batch_size - n_real;
  std::uniform_int_distribution<int64_t> pick(0, std::max<int64_t>(real_images.size(0) - 1, 0));
  torch::optim::Adam opt(enc->parameters(), torch::optim::AdamOptions(cfg.lr).betas({0.9, 0.99}));

  for (int64_t step = 1; step <= cfg.steps; ++step) {
    std::vector<torch::Tensor> parts;
    if (n_real > 0) {
      std::vector<int64_t> idx(static_cast<size_t>(n_real));
      for (auto& i : idx) i = pick(rng);
      parts.push_back(real_images.index_select(0, torch::tensor(idx, torch::kLong)));
    }
    torch::Tensor h_gen;
    if (n_gen > 0) {
      torch::NoGradGuard no_grad;
      auto layout = generator->sample_layout(generator->random_noise(n_gen));
      h_gen = layout.h;
      parts.push_back(generator->generate(layout.z));
    }
    auto x = torch::cat(parts, 0);
    auto h = enc->forward(x);
    auto recon = generator->generate(generator->layout->decode(h));
    auto pixel = torch::mse_loss(recon, x);
    auto perceptual = eval::perceptual_distance(reference, recon, x).mean();
    torch::Tensor target_features;
    {
      torch::NoGradGuard no_grad;
      target_features = models::features(model, x);
    }
    auto decision = torch::mse_loss(models::features(model, recon), target_features);
    auto loss = pixel + cfg.lambda_lpips * perceptual + cfg.lambda_decision * decision;
    torch::Tensor latent = torch::zeros({});
    if (n_gen > 0) {
      latent = torch::mse_loss(h.slice(0, n_real), h_gen);
      loss = loss + cfg.lambda_latent * latent;
    }
    if (!torch::isfinite(loss).item<bool>())
      throw NonFiniteLoss("finetune_encoder: non-finite loss at step " + std::to_string(step));
    opt.zero_grad();
    loss.backward();
    opt.step();
    if (log && (step % cfg.log_every == 0 || step == cfg.steps))
      log->push_back({step,
                      {{"loss", loss.item<double>()},
                       {"pixel", pixel.item<double>()},
                       {"perceptual", perceptual.item<double>()},
                       {"latent", latent.item<double>()},
                       {"decision", decision.item<double>()}}});
  }
  enc->eval();
  return enc;
}

void InversionConfig::validate() const {
  if (steps < 0) throw std::invalid_argument("inversion: steps must be >= 0");
  if (!(lr > 0.0)) throw std::invalid_argument("inversion: lr must be > 0");
  for (double w : {w_perceptual, w_pixel, w_features, w_proximity})
    if (!(w >= 0.0)) throw std::invalid_argument("inversion: loss weights must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("inversion: batch_size must be >= 1");
}

nlohmann::json InversionConfig::to_json() const {
  return {{"steps", steps},
          {"lr", lr},
          {"w_perceptual", w_perceptual},
          {"w_pixel", w_pixel},
          {"w_features", w_features},
          {"w_proximity", w_proximity},
          {"cosine_decay", cosine_decay},
          {"line_search", line_search},
          {"optimize_background", optimize_background},
          {"batch_size", batch_size}};
}

InversionConfig InversionConfig::from_json(const nlohmann::json& j) {
  InversionConfig c;
  c.steps = j.value("steps", c.steps);
  c.lr = j.value("lr", c.lr);
  c.w_perceptual = j.value("w_perceptual", c.w_perceptual);
  c.w_pixel = j.value("w_pixel", c.w_pixel);
  c.w_features = j.value("w_features", c.w_features);
  c.w_proximity = j.value("w_proximity", c.w_proximity);
  c.cosine_decay = j.value("cosine_decay", c.cosine_decay);
  c.line_search = j.value("line_search", c.line_search);
  c.optimize_background = j.value("optimize_background", c.optimize_background);
  c.batch_size = j.value("batch_size", c.batch_size);
  return c;
}

nlohmann::json InversionResult::trace_json() const {
  nlohmann::json t = nlohmann::json::array();
  for (size_t i = 0; i < trace.size(); ++i)
    t.push_back({{"step", i},
                 {"perceptual", trace[i].perceptual},
                 {"pixel", trace[i].pixel},
                 {"features", trace[i].features},
                 {"proximity", trace[i].proximity},
                 {"total", trace[i].total}});
  return t;
}

ObjectiveTerms inversion_objective(const BlobLatent& z, const BlobLatent& z_init, const torch::Tensor& images,
                                   const InversionConfig& cfg, blob::Generator& generator, models::Classifier& model,
                                   models::ReferenceNet& reference) {
  auto recon = generator->generate(z);
  ObjectiveTerms t;
  t.perceptual = eval::perceptual_distance(reference, recon, images);
  t.pixel = per_sample_mse(recon, images);
  torch::Tensor target;
  {
    torch::NoGradGuard no_grad;
    target = models::features(model, images);
  }
  t.features = per_sample_mse(models::features(model, recon), target);
  auto sq = (z.spatial - z_init.spatial).pow(2).flatten(1).sum(1) + (z.style - z_init.style).pow(2).flatten(1).sum(1);
  double count = static_cast<double>(z.spatial[0].numel() + z.style[0].numel());
  if (cfg.optimize_background) {
    sq = sq + (z.background - z_init.background).pow(2).sum(1);
    count += static_cast<double>(z.background[0].numel());
  }
  t.proximity = sq / count;
  t.total = cfg.w_perceptual * t.perceptual + cfg.w_pixel * t.pixel + cfg.w_features * t.features +
            cfg.w_proximity * t.proximity;
  return t;
}

namespace {

void record(std::vector<InversionResult>& out, int64_t offset, const ObjectiveTerms& t, const torch::Tensor& take) {
  auto p = t.perceptual.detach().to(torch::kFloat64), x = t.pixel.detach().to(torch::kFloat64);
  auto f = t.features.detach().to(torch::kFloat64), q = t.proximity.detach().to(torch::kFloat64);
  auto s = t.total.detach().to(torch::kFloat64);
  for (int64_t b = 0; b < p.size(0); ++b) {
    if (take.defined() && !take[b].item<bool>()) continue;
    out[offset + b].trace.push_back(
        {p[b].item<double>(), x[b].item<double>(), f[b].item<double>(), q[b].item<double>(), s[b].item<double>()});
  }
}

void check_finite(const torch::Tensor& total, int64_t step) {
  if (!torch::isfinite(total).all().item<bool>())
    throw NonFiniteLoss("invert: non-finite loss at step " + std::to_string(step));
}

/// Optimizes one chunk in place; returns the final latent.
BlobLatent optimize_chunk(const torch::Tensor& images, const BlobLatent& z_init, const InversionConfig& cfg,
                          blob::Generator& generator, models::Classifier& model, models::ReferenceNet& reference,
                          std::vector<InversionResult>& out, int64_t offset) {
  BlobLatent z = z_init.detach().clone();
  std::vector<torch::Tensor*> params{&z.spatial, &z.style};
  if (cfg.optimize_background) params.push_back(&z.background);

  auto objective = [&](const BlobLatent& at) {
    return inversion_objective(at, z_init, images, cfg, generator, model, reference);
  };

  if (!cfg.line_search) {
    std::vector<torch::Tensor> leaves;
    for (auto* p : params) {
      p->set_requires_grad(true);
      leaves.push_back(*p);
    }
    torch::optim::Adam opt(leaves, torch::optim::AdamOptions(cfg.lr));
    for (int64_t step = 0; step < cfg.steps; ++step) {
      double lr = cfg.lr;
      if (cfg.cosine_decay) lr = 0.5 * cfg.lr * (1.0 + std::cos(std::numbers::pi * step / cfg.steps));
      for (auto& g : opt.param_groups()) static_cast<torch::optim::AdamOptions&>(g.options()).lr(lr);
      auto t = objective(z);
      check_finite(t.total, step);
      record(out, offset, t, {});
      opt.zero_grad();
      t.total.sum().backward();
      opt.step();
    }
    for (auto* p : params) *p = p->detach();
  } else {
    const int64_t bsz = images.size(0);
    auto step_size = torch::full({bsz}, cfg.lr, torch::kFloat64);
    for (int64_t step = 0; step < cfg.steps; ++step) {
      for (auto* p : params) *p = p->detach().requires_grad_(true);
      auto t = objective(z);
      check_finite(t.total, step);
      record(out, offset, t, {});
      std::vector<torch::Tensor> leaves;
      for (auto* p : params) leaves.push_back(*p);
      auto grads = torch::autograd::grad({t.total.sum()}, leaves);
      torch::NoGradGuard no_grad;
      auto current = t.total.detach();
      auto pending = torch::ones({bsz}, torch::kBool);
      std::vector<torch::Tensor> base;
      for (auto* p : params) base.push_back(p->detach().clone());
      for (int attempt = 0; attempt < 40 && pending.any().item<bool>(); ++attempt) {
        BlobLatent cand = z.detach();
        std::vector<torch::Tensor*> cp{&cand.spatial, &cand.style};
        if (cfg.optimize_background) cp.push_back(&cand.background);
        for (size_t i = 0; i < cp.size(); ++i) {
          std::vector<int64_t> view(base[i].dim(), 1);
          view[0] = bsz;
          *cp[i] = base[i] - step_size.to(base[i].scalar_type()).view(view) * grads[i];
        }
        auto trial = objective(cand).total;
        auto accept = pending & (trial < current);
        for (size_t i = 0; i < cp.size(); ++i) {
          std::vector<int64_t> view(base[i].dim(), 1);
          view[0] = bsz;
          *params[i] = torch::where(accept.view(view), *cp[i], *params[i]);
        }
        pending = pending & ~accept;
        step_size = torch::where(pending, step_size * 0.5, step_size);
      }
      // rejected samples keep their latent; accepted ones try a longer step next time
      step_size = torch::where(pending, step_size, step_size * 2.0);
    }
    for (auto* p : params) *p = p->detach();
  }
  torch::NoGradGuard no_grad;
  record(out, offset, objective(z), {});
  return z;
}

}  // namespace

std::vector<InversionResult> invert(const torch::Tensor& images, Encoder& encoder, blob::Generator& generator,
                                    models::Classifier& model, models::ReferenceNet& reference,
                                    const InversionConfig& cfg, const std::optional<BlobLatent>& init) {
  cfg.validate();
  const auto& gc = generator->cfg;
  if (images.dim() != 4 || images.size(1) != 3 || images.size(2) != gc.height || images.size(3) != gc.width)
    throw std::invalid_argument("invert: images must be [B, 3, H, W] matching the generator");
  if (init) blob::check_shape(*init, gc.num_blobs, gc.style_dim);
  if (init && init->batch() != images.size(0)) throw std::invalid_argument("invert: init batch mismatch");
  generator->eval();
  model->eval();
  reference->eval();
  if (!init) {
    if (!encoder) throw std::invalid_argument("invert: an encoder is required without an explicit init");
    encoder->eval();
  }
  FrozenParams f1(*generator), f2(*model), f3(*reference);

  const int64_t n = images.size(0);
  std::vector<InversionResult> out(static_cast<size_t>(n));
  for (int64_t begin = 0; begin < n; begin += cfg.batch_size) {
    const int64_t end = std::min(n, begin + cfg.batch_size);
    auto x = images.slice(0, begin, end);
    BlobLatent z0;
    if (init) {
      std::vector<BlobLatent> parts;
      for (int64_t b = begin; b < end; ++b) parts.push_back(init->slice(b));
      z0 = BlobLatent::cat(parts).detach();
    } else {
      torch::NoGradGuard no_grad;
      z0 = generator->layout->decode(encoder->forward(x));
    }
    auto z = optimize_chunk(x, z0, cfg, generator, model, reference, out, begin);
    torch::NoGradGuard no_grad;
    auto recon = generator->generate(z);
    auto same = (models::decisions(model, recon) == models::decisions(model, x)).all(1);
    for (int64_t b = begin; b < end; ++b) {
      auto& r = out[b];
      r.z = z.slice(b - begin).clone();
      r.z_init = z0.slice(b - begin).clone();
      r.reconstruction = recon.slice(0, b - begin, b - begin + 1).clone();
      r.decision_preserved = same[b - begin].item<bool>();
      r.steps_run = cfg.steps;
    }
  }
  return out;
}

double decision_preservation(const torch::Tensor& originals, const torch::Tensor& reconstructions,
                             models::Classifier& model) {
  if (originals.size(0) == 0) throw std::invalid_argument("decision_preservation: empty set");
  if (originals.sizes() != reconstructions.sizes())
    throw std::invalid_argument("decision_preservation: originals and reconstructions differ in shape");
  auto fn = [&](const torch::Tensor& x) { return models::decisions(model, x); };
  auto a = models::batched(originals, 128, fn);
  auto b = models::batched(reconstructions, 128, fn);
  return (a == b).all(1).to(torch::kFloat64).mean().item<double>();
}

TensorArchive latent_archive(const BlobLatent& z) {
  TensorArchive a;
  a.meta = {{"kind", "latent"}, {"num_blobs", z.num_blobs()}, {"style_dim", z.style_dim()}, {"batch", z.batch()}};
  a.put("spatial", z.spatial.detach());
  a.put("style", z.style.detach());
  a.put("background", z.background.detach());
  return a;
}

BlobLatent latent_from_archive(const TensorArchive& a) {
  BlobLatent z;
  z.spatial = a.get("spatial");
  z.style = a.get("style");
  z.background = a.get("background");
  blob::check_shape(z, z.num_blobs(), z.style_dim());
  return z;
}

void save_latent(const BlobLatent& z, const std::filesystem::path& path, const nlohmann::json& meta) {
  auto a = latent_archive(z);
  if (!meta.is_null()) a.meta["extra"] = meta;
  save_archive(a, path);
}

BlobLatent load_latent(const std::filesystem::path& path) { return latent_from_archive(load_archive(path)); }

void save_inversion(const InversionResult& r, const std::filesystem::path& path) {
  TensorArchive a;
  a.meta = {{"kind", "inversion"},
            {"decision_preserved", r.decision_preserved},
            {"steps_run", r.steps_run},
            {"trace", r.trace_json()}};
  a.put("z.spatial", r.z.spatial);
  a.put("z.style", r.z.style);
  a.put("z.background", r.z.background);
  a.put("init.spatial", r.z_init.spatial);
  a.put("init.style", r.z_init.style);
  a.put("init.background", r.z_init.background);
  a.put("reconstruction", r.reconstruction);
  save_archive(a, path);
}

InversionResult load_inversion(const std::filesystem::path& path) {
  auto a = load_archive(path);
  if (a.meta.value("kind", "") != "inversion") throw std::runtime_error(path.string() + " is not an inversion record");
  InversionResult r;
  r.z = {a.get("z.spatial"), a.get("z.style"), a.get("z.background")};
  r.z_init = {a.get("init.spatial"), a.get("init.style"), a.get("init.background")};
  r.reconstruction = a.get("reconstruction");
  r.decision_preserved = a.meta.at("decision_preserved");
  r.steps_run = a.meta.at("steps_run");
  for (const auto& e : a.meta.at("trace"))
    r.trace.push_back({e.at("perceptual"), e.at("pixel"), e.at("features"), e.at("proximity"), e.at("total")});
  return r;
}

}  // namespace octet::inversion
