#include "octet/cf.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

namespace octet::cf {

namespace F = torch::nn::functional;

std::string to_string(Mode m) {
  switch (m) {
    case Mode::full: return "full";
    case Mode::style_only: return "style_only";
    case Mode::spatial_only: return "spatial_only";
    case Mode::targeted: return "targeted";
  }
  return "full";
}

Mode mode_from_string(const std::string& s) {
  if (s == "full") return Mode::full;
  if (s == "style_only") return Mode::style_only;
  if (s == "spatial_only") return Mode::spatial_only;
  if (s == "targeted") return Mode::targeted;
  throw std::invalid_argument("unknown mode '" + s + "'");
}

EditMask EditMask::uniform(int64_t k) {
  EditMask m;
  m.spatial_weight.assign(k, 1.0);
  m.style_weight.assign(k, 1.0);
  m.spatial_frozen.assign(k, false);
  m.style_frozen.assign(k, false);
  return m;
}

EditMask EditMask::for_mode(Mode mode, int64_t k, const std::vector<int64_t>& selected) {
  EditMask m = uniform(k);
  switch (mode) {
    case Mode::full:
      break;
    case Mode::style_only:
      std::fill(m.spatial_frozen.begin(), m.spatial_frozen.end(), true);
      break;
    case Mode::spatial_only:
      std::fill(m.style_frozen.begin(), m.style_frozen.end(), true);
      break;
    case Mode::targeted:
      std::fill(m.spatial_frozen.begin(), m.spatial_frozen.end(), true);
      std::fill(m.style_frozen.begin(), m.style_frozen.end(), true);
      for (auto s : selected) {
        if (s < 0 || s >= k) throw std::out_of_range("selected blob " + std::to_string(s) + " out of range");
        m.spatial_frozen[s] = false;
        m.style_frozen[s] = false;
      }
      break;
  }
  return m;
}

EditMask EditMask::penalty_only(int64_t k, const std::vector<int64_t>& selected, double selected_weight) {
  EditMask m = uniform(k);
  for (auto s : selected) {
    if (s < 0 || s >= k) throw std::out_of_range("selected blob " + std::to_string(s) + " out of range");
    m.spatial_weight[s] = selected_weight;
    m.style_weight[s] = selected_weight;
  }
  return m;
}

void EditMask::validate(int64_t k) const {
  if (num_blobs() != k || static_cast<int64_t>(style_weight.size()) != k ||
      static_cast<int64_t>(spatial_frozen.size()) != k || static_cast<int64_t>(style_frozen.size()) != k)
    throw std::invalid_argument("edit mask: expected " + std::to_string(k) + " blobs");
  auto negative = [](double w) { return !(w >= 0.0); };
  if (std::any_of(spatial_weight.begin(), spatial_weight.end(), negative) ||
      std::any_of(style_weight.begin(), style_weight.end(), negative) || negative(background_weight))
    throw std::invalid_argument("edit mask: weights must be non-negative");
}

nlohmann::json EditMask::to_json() const {
  return {{"spatial_weight", spatial_weight}, {"style_weight", style_weight},
          {"spatial_frozen", spatial_frozen}, {"style_frozen", style_frozen},
          {"background_weight", background_weight}, {"background_frozen", background_frozen}};
}

EditMask EditMask::from_json(const nlohmann::json& j) {
  EditMask m;
  m.spatial_weight = j.at("spatial_weight").get<std::vector<double>>();
  m.style_weight = j.at("style_weight").get<std::vector<double>>();
  m.spatial_frozen = j.at("spatial_frozen").get<std::vector<bool>>();
  m.style_frozen = j.at("style_frozen").get<std::vector<bool>>();
  m.background_weight = j.value("background_weight", 1.0);
  m.background_frozen = j.value("background_frozen", true);
  return m;
}

nlohmann::json OptimizerConfig::to_json() const {
  return {{"steps", steps}, {"lr", lr}, {"beta1", beta1}, {"beta2", beta2}, {"eps", eps},
          {"early_stop_margin", early_stop_margin}, {"early_stop_patience", early_stop_patience},
          {"early_stop", early_stop}};
}

OptimizerConfig OptimizerConfig::from_json(const nlohmann::json& j) {
  OptimizerConfig c;
  c.steps = j.value("steps", c.steps);
  c.lr = j.value("lr", c.lr);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.early_stop_margin = j.value("early_stop_margin", c.early_stop_margin);
  c.early_stop_patience = j.value("early_stop_patience", c.early_stop_patience);
  c.early_stop = j.value("early_stop", c.early_stop);
  return c;
}

nlohmann::json CFRequest::to_json() const {
  nlohmann::json j{{"lambda_dist", lambda_dist},
                   {"mask", mask.to_json()},
                   {"optimizer", optimizer.to_json()},
                   {"mode", cf::to_string(mode)},
                   {"selected", selected},
                   {"hold_other_heads", hold_other_heads},
                   {"iou_threshold", iou_threshold},
                   {"activation_scale", activation_scale}};
  if (std::holds_alternative<ClassTarget>(target)) {
    const auto& t = std::get<ClassTarget>(target);
    j["target"] = {{"head", t.head}, {"value", t.value}};
  } else {
    j["target"] = "segmentation";
  }
  return j;
}

torch::Tensor l_dist(const BlobLatent& z, const BlobLatent& zq, const EditMask& mask) {
  if (z.spatial.sizes() != zq.spatial.sizes() || z.style.sizes() != zq.style.sizes() ||
      z.background.sizes() != zq.background.sizes())
    throw std::invalid_argument("l_dist: latent shapes differ");
  mask.validate(z.num_blobs());
  auto opts = z.spatial.options().requires_grad(false);
  auto w_sp = torch::tensor(mask.spatial_weight, opts.dtype(torch::kFloat64)).to(z.spatial.scalar_type());
  auto w_st = torch::tensor(mask.style_weight, opts.dtype(torch::kFloat64)).to(z.style.scalar_type());
  auto sp = (z.spatial - zq.spatial).abs().sum(2);  // [B, K]
  auto st = (z.style - zq.style).abs().sum(2);      // [B, K]
  auto d = (sp * w_sp.unsqueeze(0)).sum(1) + (st * w_st.unsqueeze(0)).sum(1);
  if (!mask.background_frozen) d = d + mask.background_weight * (z.background - zq.background).abs().sum(1);
  return d;
}

int64_t CFResult::modified_count() const {
  return std::count_if(changes.begin(), changes.end(), [](const BlobChange& c) { return c.modified; });
}

std::vector<BlobChange> change_report(const BlobLatent& z_cf, const BlobLatent& zq) {
  auto sp = (z_cf.spatial - zq.spatial).to(torch::kFloat64).contiguous();
  auto st = (z_cf.style - zq.style).abs().sum(2).to(torch::kFloat64).contiguous();
  auto s_cf = z_cf.spatial.select(2, blob::kScale);
  auto s_q = zq.spatial.select(2, blob::kScale);
  std::vector<BlobChange> out(static_cast<size_t>(z_cf.num_blobs()));
  for (int64_t k = 0; k < z_cf.num_blobs(); ++k) {
    auto& c = out[static_cast<size_t>(k)];
    double sp_l1 = 0.0;
    for (int64_t f = 0; f < blob::kSpatialDim; ++f) {
      c.delta_spatial[f] = sp[0][k][f].item<double>();
      sp_l1 += std::abs(c.delta_spatial[f]);
    }
    c.style_l1 = st[0][k].item<double>();
    const bool was = s_q[0][k].item<double>() > 0.0;
    const bool is = s_cf[0][k].item<double>() > 0.0;
    c.appeared = !was && is;
    c.disappeared = was && !is;
    c.modified = sp_l1 + c.style_l1 > kModifiedThreshold;
  }
  return out;
}

nlohmann::json CFResult::change_report() const {
  nlohmann::json blobs = nlohmann::json::array();
  for (size_t k = 0; k < changes.size(); ++k) {
    const auto& c = changes[k];
    blobs.push_back({{"blob", k},
                     {"delta_spatial", {{"cx", c.delta_spatial[0]}, {"cy", c.delta_spatial[1]}, {"scale", c.delta_spatial[2]},
                                        {"aspect", c.delta_spatial[3]}, {"angle", c.delta_spatial[4]}}},
                     {"style_l1", c.style_l1},
                     {"appeared", c.appeared},
                     {"disappeared", c.disappeared},
                     {"modified", c.modified}});
  }
  return {{"success", success}, {"modified_count", modified_count()}, {"steps_run", steps_run},
          {"final_metric", final_metric}, {"blobs", blobs}};
}

nlohmann::json CFResult::trace_json() const {
  nlohmann::json t = nlohmann::json::array();
  for (const auto& e : trace)
    t.push_back({{"step", e.step}, {"decision_loss", e.decision_loss}, {"dist_loss", e.dist_loss},
                 {"target_metric", e.target_metric}});
  return t;
}

EditMask effective_mask(const CFRequest& request, int64_t k) {
  EditMask m = request.mask.num_blobs() == 0 ? EditMask::uniform(k) : request.mask;
  m.validate(k);
  switch (request.mode) {
    case Mode::full:
      break;
    case Mode::style_only:
      std::fill(m.spatial_frozen.begin(), m.spatial_frozen.end(), true);
      break;
    case Mode::spatial_only:
      std::fill(m.style_frozen.begin(), m.style_frozen.end(), true);
      break;
    case Mode::targeted: {
      std::vector<bool> keep(static_cast<size_t>(k), false);
      for (auto s : request.selected) {
        if (s < 0 || s >= k) throw std::out_of_range("selected blob " + std::to_string(s) + " out of range");
        keep[static_cast<size_t>(s)] = true;
      }
      for (int64_t i = 0; i < k; ++i)
        if (!keep[static_cast<size_t>(i)]) {
          m.spatial_frozen[i] = true;
          m.style_frozen[i] = true;
        }
      break;
    }
  }
  return m;
}

namespace {

/// Per-element decision loss and progress metric for a batch of images.
struct DecisionTerms {
  torch::Tensor loss;    // [B]
  torch::Tensor metric;  // [B], detached
};

struct Problem {
  BlobLatent zq;
  EditMask mask;
  double lambda = 0.0;
  OptimizerConfig opt;
  std::vector<int64_t> activate;  // blobs to give activation_scale when inactive
  double activation_scale = 0.0;
  std::function<DecisionTerms(const torch::Tensor& images)> decision;
  std::function<torch::Tensor(const torch::Tensor& metric)> satisfied;  // [B] bool, early-stop criterion
  std::function<torch::Tensor(const torch::Tensor& metric)> succeeded;  // [B] bool on the final image
};

struct AdamState {
  torch::Tensor m, v;
};

std::vector<CFResult> solve(const Problem& p, blob::Generator& generator) {
  const int64_t bsz = p.zq.batch();
  const int64_t k = p.zq.num_blobs();
  blob::check_shape(p.zq, generator->cfg.num_blobs, generator->cfg.style_dim);
  if (!(p.lambda >= 0.0)) throw std::invalid_argument("counterfactual: lambda_dist must be >= 0");
  if (p.opt.steps < 0) throw std::invalid_argument("counterfactual: steps must be >= 0");
  p.mask.validate(k);

  const auto dtype = p.zq.spatial.scalar_type();
  std::vector<float> sp_free(k), st_free(k);
  for (int64_t i = 0; i < k; ++i) {
    sp_free[i] = p.mask.spatial_frozen[i] ? 0.0f : 1.0f;
    st_free[i] = p.mask.style_frozen[i] ? 0.0f : 1.0f;
  }
  const auto spatial_free = torch::tensor(sp_free).to(dtype).view({1, k, 1});
  const auto style_free = torch::tensor(st_free).to(dtype).view({1, k, 1});
  const double bg_free = p.mask.background_frozen ? 0.0 : 1.0;

  BlobLatent z = p.zq.detach().clone();
  if (p.opt.steps > 0 && p.activation_scale > 0.0) {
    torch::NoGradGuard no_grad;
    for (auto b : p.activate) {
      if (p.mask.spatial_frozen[b]) continue;
      auto s = z.spatial.select(1, b).select(1, blob::kScale);
      s.copy_(torch::where(s <= 0, torch::full_like(s, p.activation_scale), s));
    }
  }

  std::vector<torch::Tensor*> params{&z.spatial, &z.style, &z.background};
  std::vector<torch::Tensor> free{spatial_free.expand_as(z.spatial), style_free.expand_as(z.style),
                                  torch::full_like(z.background, bg_free)};
  std::vector<AdamState> state;
  for (auto* t : params) state.push_back({torch::zeros_like(*t), torch::zeros_like(*t)});

  std::vector<CFResult> results(static_cast<size_t>(bsz));
  auto active = torch::ones({bsz}, torch::kBool);
  auto streak = torch::zeros({bsz}, torch::kLong);
  auto t_count = torch::zeros({bsz}, torch::kLong);
  // best iterate so far per sample: successful beats unsuccessful, then lower objective
  BlobLatent best = z.detach().clone();
  auto best_obj = torch::full({bsz}, std::numeric_limits<double>::infinity(), torch::kFloat64);
  auto best_ok = torch::zeros({bsz}, torch::kBool);
  auto keep_best = [&](const torch::Tensor& obj, const torch::Tensor& ok, const torch::Tensor& eligible) {
    torch::NoGradGuard no_grad;
    auto o = obj.detach().to(torch::kFloat64);
    auto better = eligible & ((ok & ~best_ok) | ((ok == best_ok) & (o < best_obj)));
    best_obj = torch::where(better, o, best_obj);
    best_ok = best_ok | (better & ok);
    auto b3 = better.view({bsz, 1, 1});
    best.spatial = torch::where(b3, z.spatial.detach(), best.spatial);
    best.style = torch::where(b3, z.style.detach(), best.style);
    best.background = torch::where(better.view({bsz, 1}), z.background.detach(), best.background);
  };

  for (int64_t step = 0; step < p.opt.steps; ++step) {
    for (auto* t : params) t->set_requires_grad(true);
    auto images = generator->generate(z);
    auto dec = p.decision(images);
    auto dist = l_dist(z, p.zq, p.mask);
    auto per = dec.loss + p.lambda * dist;
    auto total = per.sum();
    if (!torch::isfinite(total).item<bool>())
      throw NonFiniteLoss("counterfactual: non-finite loss at step " + std::to_string(step));

    keep_best(per, p.succeeded(dec.metric), active);
    auto dec_c = dec.loss.detach().to(torch::kFloat64);
    auto dist_c = dist.detach().to(torch::kFloat64);
    auto met_c = dec.metric.to(torch::kFloat64);
    for (int64_t b = 0; b < bsz; ++b) {
      if (!active[b].item<bool>()) continue;
      results[b].trace.push_back({step, dec_c[b].item<double>(), dist_c[b].item<double>(), met_c[b].item<double>()});
      results[b].steps_run = step;
    }

    if (p.opt.early_stop) {
      auto sat = p.satisfied(dec.metric);
      streak = torch::where(sat, streak + 1, torch::zeros_like(streak));
      active = active & (streak < p.opt.early_stop_patience);
    }
    if (!active.any().item<bool>()) break;

    auto grads = torch::autograd::grad({total}, {z.spatial, z.style, z.background});
    torch::NoGradGuard no_grad;
    t_count += active.to(torch::kLong);
    auto act_f = active.to(dtype);
    for (size_t i = 0; i < params.size(); ++i) {
      auto& t = *params[i];
      t = t.detach();
      std::vector<int64_t> view(t.dim(), 1);
      view[0] = bsz;
      auto gate = free[i] * act_f.view(view);
      auto g = grads[i] * gate;
      auto& s = state[i];
      s.m = torch::where(gate > 0, p.opt.beta1 * s.m + (1.0 - p.opt.beta1) * g, s.m);
      s.v = torch::where(gate > 0, p.opt.beta2 * s.v + (1.0 - p.opt.beta2) * g * g, s.v);
      auto tc = t_count.to(torch::kFloat64).clamp_min(1.0).view(view);
      auto bc1 = (1.0 - torch::pow(torch::full_like(tc, p.opt.beta1), tc)).to(dtype);
      auto bc2 = (1.0 - torch::pow(torch::full_like(tc, p.opt.beta2), tc)).to(dtype);
      auto update = p.opt.lr * (s.m / bc1) / (torch::sqrt(s.v / bc2) + p.opt.eps);
      t = torch::where(gate > 0, t - update, t);
    }
    if (step == p.opt.steps - 1) {
      for (int64_t b = 0; b < bsz; ++b)
        if (active[b].item<bool>()) results[b].steps_run = p.opt.steps;
    }
  }

  torch::NoGradGuard no_grad;
  z = z.detach();
  if (p.opt.steps > 0) {
    auto last = p.decision(generator->generate(z));
    keep_best(last.loss + p.lambda * l_dist(z, p.zq, p.mask), p.succeeded(last.metric),
              torch::ones({bsz}, torch::kBool));
    z = best;
  }
  // frozen entries are restored verbatim
  z.spatial = torch::where(free[0] > 0, z.spatial, p.zq.spatial);
  z.style = torch::where(free[1] > 0, z.style, p.zq.style);
  z.background = torch::where(free[2] > 0, z.background, p.zq.background);
  auto images = generator->generate(z);
  auto final_terms = p.decision(images);
  auto ok = p.succeeded(final_terms.metric);
  for (int64_t b = 0; b < bsz; ++b) {
    auto& r = results[b];
    r.z_cf = z.slice(b).clone();
    r.image = images.slice(0, b, b + 1).clone();
    r.success = ok[b].item<bool>();
    r.final_metric = final_terms.metric[b].item<double>();
    r.changes = change_report(r.z_cf, p.zq.slice(b));
  }
  return results;
}

struct HeadTarget {
  torch::Tensor index;  // [B] long
  torch::Tensor value;  // [B] float 0/1
};

HeadTarget head_targets(const std::vector<ClassTarget>& targets) {
  std::vector<int64_t> idx;
  std::vector<float> val;
  for (const auto& t : targets) {
    idx.push_back(scene::head_index(t.head));
    val.push_back(t.value ? 1.0f : 0.0f);
  }
  return {torch::tensor(idx, torch::kLong), torch::tensor(val)};
}

Problem classification_problem(const BlobLatent& zq, const std::vector<ClassTarget>& targets, const CFRequest& req,
                               blob::Generator& generator, models::Classifier& model) {
  const int64_t k = zq.num_blobs();
  Problem p;
  p.zq = zq.detach();
  p.mask = effective_mask(req, k);
  p.lambda = req.lambda_dist;
  p.opt = req.optimizer;
  p.activate = req.selected;
  p.activation_scale = req.activation_scale;

  auto ht = head_targets(targets);
  auto index = ht.index.view({-1, 1});
  auto value = ht.value.to(zq.spatial.scalar_type());
  torch::Tensor held;
  if (req.hold_other_heads) {
    torch::NoGradGuard no_grad;
    held = models::decisions(model, generator->generate(p.zq)).to(zq.spatial.scalar_type());
  }
  const bool hold = req.hold_other_heads;
  p.decision = [index, value, held, hold, &model](const torch::Tensor& images) {
    auto logits = model->logits(images);
    auto tl = logits.gather(1, index).squeeze(1);
    auto loss = F::binary_cross_entropy_with_logits(tl, value, F::BinaryCrossEntropyWithLogitsFuncOptions().reduction(torch::kNone));
    if (hold) {
      auto others = torch::ones_like(logits).scatter_(1, index, 0.0);
      auto bce = F::binary_cross_entropy_with_logits(logits, held, F::BinaryCrossEntropyWithLogitsFuncOptions().reduction(torch::kNone));
      loss = loss + (bce * others).sum(1);
    }
    return DecisionTerms{loss, torch::sigmoid(tl).detach()};
  };
  const double margin = req.optimizer.early_stop_margin;
  auto want = ht.value > 0.5;
  p.satisfied = [want, margin](const torch::Tensor& prob) {
    return torch::where(want, prob >= 0.5 + margin, prob <= 0.5 - margin);
  };
  p.succeeded = [want](const torch::Tensor& prob) { return torch::where(want, prob > 0.5, prob <= 0.5); };
  return p;
}

void check_targets_differ(const BlobLatent& zq, const std::vector<ClassTarget>& targets, blob::Generator& generator,
                          models::Classifier& model) {
  torch::NoGradGuard no_grad;
  auto dec = models::decisions(model, generator->generate(zq));
  for (size_t b = 0; b < targets.size(); ++b) {
    const int h = scene::head_index(targets[b].head);
    if (dec[static_cast<int64_t>(b)][h].item<bool>() == targets[b].value)
      throw std::invalid_argument("counterfactual: target '" + targets[b].head + "=" +
                                  (targets[b].value ? "true" : "false") + "' equals the current decision");
  }
}

}  // namespace

torch::Tensor classification_objective(const BlobLatent& z, const CFRequest& request, blob::Generator& generator,
                                       models::Classifier& model) {
  const auto& t = std::get<ClassTarget>(request.target);
  auto p = classification_problem(request.zq, std::vector<ClassTarget>(static_cast<size_t>(z.batch()), t), request,
                                  generator, model);
  auto dec = p.decision(generator->generate(z));
  return (dec.loss + p.lambda * l_dist(z, p.zq, p.mask)).sum();
}

std::vector<CFResult> counterfactual_batch(const BlobLatent& zq, const std::vector<ClassTarget>& targets,
                                           const CFRequest& shared, blob::Generator& generator,
                                           models::Classifier& model) {
  if (static_cast<int64_t>(targets.size()) != zq.batch())
    throw std::invalid_argument("counterfactual_batch: one target per latent required");
  check_targets_differ(zq, targets, generator, model);
  return solve(classification_problem(zq, targets, shared, generator, model), generator);
}

CFResult counterfactual(const CFRequest& request, blob::Generator& generator, models::Classifier& model) {
  if (!std::holds_alternative<ClassTarget>(request.target))
    throw std::invalid_argument("counterfactual: classification target required");
  if (request.zq.batch() != 1) throw std::invalid_argument("counterfactual: zq must be a batch of one");
  if (request.mode == Mode::targeted && request.selected.empty())
    throw std::invalid_argument("counterfactual: targeted mode needs a non-empty blob set");
  return counterfactual_batch(request.zq, {std::get<ClassTarget>(request.target)}, request, generator, model)[0];
}

CFResult targeted_counterfactual(CFRequest request, blob::Generator& generator, models::Classifier& model) {
  if (request.selected.empty()) throw std::invalid_argument("targeted_counterfactual: blob set S is empty");
  request.mode = Mode::targeted;
  return counterfactual(request, generator, model);
}

CFResult segmentation_counterfactual(const CFRequest& request, blob::Generator& generator,
                                     models::Segmenter& segmenter) {
  if (!std::holds_alternative<torch::Tensor>(request.target))
    throw std::invalid_argument("segmentation_counterfactual: target mask required");
  if (request.zq.batch() != 1) throw std::invalid_argument("segmentation_counterfactual: zq must be a batch of one");
  auto target = std::get<torch::Tensor>(request.target).to(torch::kLong);
  if (target.dim() == 2) target = target.unsqueeze(0);
  if (target.dim() != 3 || target.size(1) != generator->cfg.height || target.size(2) != generator->cfg.width)
    throw std::invalid_argument("segmentation_counterfactual: target mask must be [H, W] matching the generator");
  if (request.mode == Mode::targeted && request.selected.empty())
    throw std::invalid_argument("segmentation_counterfactual: targeted mode needs a non-empty blob set");

  Problem p;
  p.zq = request.zq.detach();
  p.mask = effective_mask(request, p.zq.num_blobs());
  p.lambda = request.lambda_dist;
  p.opt = request.optimizer;
  p.activate = request.selected;
  p.activation_scale = request.activation_scale;
  p.decision = [target, &segmenter](const torch::Tensor& images) {
    auto logits = segmenter->forward(images);
    auto ce = F::cross_entropy(logits, target, F::CrossEntropyFuncOptions().reduction(torch::kNone)).mean({1, 2});
    auto iou = models::per_image_iou(logits.detach().argmax(1), target);
    return DecisionTerms{ce, iou};
  };
  const double thr = request.iou_threshold;
  p.satisfied = [thr](const torch::Tensor& iou) { return iou >= thr; };
  p.succeeded = p.satisfied;
  return solve(p, generator)[0];
}

bool verify_success(const torch::Tensor& image, const ClassTarget& target, models::Classifier& model) {
  torch::NoGradGuard no_grad;
  auto dec = models::decisions(model, image.dim() == 3 ? image.unsqueeze(0) : image);
  return dec[0][scene::head_index(target.head)].item<bool>() == target.value;
}

}  // namespace octet::cf
