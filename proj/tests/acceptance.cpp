// Acceptance suite: trains the tiny pipeline through the CLI, then checks
// each criterion and prints one PASS/FAIL line per criterion.

#include <cstdlib>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>

#include <CLI11.hpp>

#include "octet/analysis.hpp"
#include "octet/cf.hpp"
#include "octet/inversion.hpp"
#include "octet/metrics.hpp"
#include "octet/pipeline.hpp"

using namespace octet;
namespace pl = octet::pipeline;
using blob::BlobLatent;

namespace {

struct Outcome {
  std::string name;
  bool pass;
  std::string detail;
};

std::vector<Outcome> outcomes;
nlohmann::json details = nlohmann::json::object();

void record(const std::string& name, bool pass, const std::string& detail) {
  outcomes.push_back({name, pass, detail});
  std::cout << (pass ? "PASS " : "FAIL ") << name << ": " << detail << std::endl;
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream o;
  o << std::setprecision(prec) << v;
  return o.str();
}

template <typename M>
M frozen(M m) {
  m->eval();
  for (auto& p : m->parameters()) p.set_requires_grad(false);
  return m;
}

struct Models {
  pl::Workspace ws;
  blob::Generator g{nullptr};
  models::Classifier m{nullptr}, m_biased{nullptr};
  models::ReferenceNet ref{nullptr};
  models::Segmenter seg{nullptr};
  inversion::Encoder enc{nullptr}, enc_pre{nullptr};
  scene::Dataset val;
};

Models load_models(const pl::Workspace& w) {
  Models s;
  s.ws = w;
  s.g = frozen(blob::load_generator(w.generator()));
  s.m = frozen(models::load_classifier(w.classifier()));
  s.m_biased = frozen(models::load_classifier(w.classifier_biased()));
  s.ref = frozen(models::load_reference(w.reference()));
  s.seg = frozen(models::load_segmenter(w.segmenter()));
  s.enc = frozen(inversion::load_encoder(w.encoder()));
  s.enc_pre = frozen(inversion::load_encoder(w.encoder_pretrained()));
  s.val = scene::load_dataset(w.val_data());
  return s;
}

BlobLatent sample(blob::Generator& g, int64_t n, uint64_t seed) {
  torch::NoGradGuard ng;
  auto gen = at::detail::createCPUGenerator(seed);
  return g->sample_layout(torch::randn({n, g->cfg.noise_dim}, gen)).z;
}

torch::Tensor render(blob::Generator& g, const BlobLatent& z) {
  torch::NoGradGuard ng;
  return g->generate(z);
}

// ---------------------------------------------------------------------------

bool run_chain(const std::string& cli, const std::string& config, const std::string& ws) {
  const std::vector<std::string> stages = {"gen-data", "train-gan", "train-models", "train-encoder",
                                           "invert --val-index 0", "cf"};
  std::string failed;
  for (const auto& s : stages) {
    const std::string cmd = "\"" + cli + "\" -c \"" + config + "\" -w \"" + ws + "\" " + s;
    std::cerr << "$ " << cmd << std::endl;
    const int rc = std::system(cmd.c_str());
    if (rc != 0) {
      failed = s + " (status " + std::to_string(rc) + ")";
      break;
    }
  }
  const bool ok = failed.empty() && std::filesystem::exists(pl::Workspace{ws}.runs() / "cf" / "result.json");
  record("end_to_end_cli", ok,
         ok ? "gen-data -> train-gan -> train-models -> train-encoder -> invert -> cf exited 0"
            : "failed at " + (failed.empty() ? std::string("missing cf output") : failed));
  return ok;
}

// ---------------------------------------------------------------------------

void check_l_dist() {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  const int64_t K = 12, D = 16;
  auto rnd = [&](std::vector<int64_t> shape) {
    auto t = torch::empty(shape, torch::kFloat64);
    auto* p = t.data_ptr<double>();
    for (int64_t i = 0; i < t.numel(); ++i) p[i] = U(rng);
    return t;
  };
  double worst_identity = 0.0, worst_oracle = 0.0;
  for (int pair = 0; pair < 1000; ++pair) {
    BlobLatent z{rnd({1, K, 5}), rnd({1, K, D}), rnd({1, D})};
    BlobLatent zq{rnd({1, K, 5}), rnd({1, K, D}), rnd({1, D})};
    auto mask = cf::EditMask::uniform(K);
    if (pair % 2 == 1) {  // random weights with the background included
      for (int64_t k = 0; k < K; ++k) {
        mask.spatial_weight[k] = U(rng) + 1.0;
        mask.style_weight[k] = U(rng) + 1.0;
      }
      mask.background_frozen = false;
      mask.background_weight = U(rng) + 1.0;
    }
    worst_identity = std::max(worst_identity, std::abs(cf::l_dist(z, z, mask).item<double>()));
    double expect = 0.0;
    auto a = z.spatial.accessor<double, 3>(), aq = zq.spatial.accessor<double, 3>();
    auto s = z.style.accessor<double, 3>(), sq = zq.style.accessor<double, 3>();
    for (int64_t k = 0; k < K; ++k) {
      double sp = 0.0, st = 0.0;
      for (int f = 0; f < 5; ++f) sp += std::abs(a[0][k][f] - aq[0][k][f]);
      for (int64_t d = 0; d < D; ++d) st += std::abs(s[0][k][d] - sq[0][k][d]);
      expect += mask.spatial_weight[k] * sp + mask.style_weight[k] * st;
    }
    if (!mask.background_frozen) {
      double bg = 0.0;
      auto b = z.background.accessor<double, 2>(), bq = zq.background.accessor<double, 2>();
      for (int64_t d = 0; d < D; ++d) bg += std::abs(b[0][d] - bq[0][d]);
      expect += mask.background_weight * bg;
    }
    worst_oracle = std::max(worst_oracle, std::abs(cf::l_dist(z, zq, mask).item<double>() - expect));
  }
  details["l_dist"] = {{"identity_max", worst_identity}, {"oracle_max_abs_err", worst_oracle}};
  record("l_dist_exact", worst_identity == 0.0 && worst_oracle <= 1e-9,
         "identity max " + fmt(worst_identity) + ", oracle max error " + fmt(worst_oracle) +
             " over 1000 pairs (tol 1e-9)");
}

// ---------------------------------------------------------------------------

// Worst relative error between autograd and central differences on `count`
// random entries of the active blobs' parameters and the background.
double finite_difference(const std::function<torch::Tensor(const BlobLatent&)>& f, const BlobLatent& z0,
                         std::mt19937_64& rng, int count = 10) {
  BlobLatent z = z0.requires_grad(true);
  auto grads = torch::autograd::grad({f(z)}, {z.spatial, z.style, z.background});
  std::vector<std::pair<int, int64_t>> pool;
  const int64_t K = z0.num_blobs(), D = z0.style_dim();
  for (int64_t k = 0; k < K; ++k) {
    if (z0.spatial[0][k][blob::kScale].item<double>() <= 0) continue;
    for (int64_t f5 = 0; f5 < 5; ++f5) pool.emplace_back(0, k * 5 + f5);
    for (int64_t d = 0; d < D; ++d) pool.emplace_back(1, k * D + d);
  }
  for (int64_t d = 0; d < D; ++d) pool.emplace_back(2, d);
  std::shuffle(pool.begin(), pool.end(), rng);
  double worst = 0.0;
  const double h = 1e-6;
  for (int i = 0; i < count && i < static_cast<int>(pool.size()); ++i) {
    const auto [group, index] = pool[i];
    auto eval_at = [&, group = group, index = index](double delta) {
      torch::NoGradGuard ng;
      BlobLatent zz = z0.clone();
      torch::Tensor& t = group == 0 ? zz.spatial : (group == 1 ? zz.style : zz.background);
      t.view({-1})[index] += delta;
      return f(zz).item<double>();
    };
    const double numeric = (eval_at(h) - eval_at(-h)) / (2 * h);
    const double analytic = grads[group].reshape({-1})[index].item<double>();
    const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-8});
    worst = std::max(worst, std::abs(numeric - analytic) / denom);
  }
  return worst;
}

void check_gradients(Models& s) {
  auto g = frozen(blob::clone_generator(s.g, torch::kFloat64));
  auto m = frozen(models::load_classifier(s.ws.classifier()));
  m->to(torch::kFloat64);
  auto ref = frozen(models::load_reference(s.ws.reference()));
  ref->to(torch::kFloat64);
  std::mt19937_64 rng(5);

  auto z0 = sample(s.g, 3, 77).to(torch::kFloat64);
  torch::manual_seed(5);
  auto weights = torch::randn({1, 3, g->cfg.height, g->cfg.width}, torch::kFloat64);
  auto images = s.val.images.slice(0, 0, 1).to(torch::kFloat64);

  double worst_gen = 0, worst_inv = 0, worst_cf = 0;
  for (int64_t b = 0; b < 3; ++b) {
    auto zb = z0.slice(b);
    worst_gen = std::max(worst_gen, finite_difference(
                                        [&](const BlobLatent& z) { return (g->generate(z) * weights).sum(); }, zb, rng));

    // inversion objective, anchored at a perturbed latent
    torch::manual_seed(100 + b);
    BlobLatent anchor{zb.spatial + 0.02 * torch::randn_like(zb.spatial), zb.style + 0.1 * torch::randn_like(zb.style),
                      zb.background + 0.1 * torch::randn_like(zb.background)};
    inversion::InversionConfig icfg;
    worst_inv = std::max(worst_inv, finite_difference(
                                        [&](const BlobLatent& z) {
                                          return inversion::inversion_objective(z, anchor, images, icfg, g, m, ref)
                                              .total.sum();
                                        },
                                        zb, rng));

    // counterfactual objective away from the L1 kink at zq
    cf::CFRequest req;
    req.zq = anchor;
    req.lambda_dist = 0.1;
    req.target = cf::ClassTarget{"right", true};
    req.mask = cf::EditMask::uniform(zb.num_blobs());
    req.mask.background_frozen = false;
    worst_cf = std::max(worst_cf, finite_difference(
                                      [&](const BlobLatent& z) { return cf::classification_objective(z, req, g, m); },
                                      zb, rng));
  }
  details["gradients"] = {{"generate", worst_gen}, {"inversion", worst_inv}, {"counterfactual", worst_cf}};
  const bool ok = worst_gen <= 1e-2 && worst_inv <= 1e-2 && worst_cf <= 1e-2;
  record("gradients_finite_difference", ok,
         "max relative error generate " + fmt(worst_gen) + ", inversion objective " + fmt(worst_inv) +
             ", counterfactual objective " + fmt(worst_cf) + " (10 entries x 3 latents each, tol 1e-2, float64)");
}

// ---------------------------------------------------------------------------

void check_absence(Models& s) {
  auto z = sample(s.g, 50, 31);
  // force absence on two blobs per sample, one at s = 0 and one below
  {
    auto sc = z.spatial.select(2, blob::kScale);
    for (int64_t i = 0; i < 50; ++i) {
      sc[i][i % z.num_blobs()] = 0.0;
      sc[i][(i + 5) % z.num_blobs()] = -1.0;
    }
  }
  auto absent = z.spatial.select(2, blob::kScale) <= 0;  // [B, K]
  auto zz = z.requires_grad(true);
  auto img = s.g->generate(zz);
  torch::manual_seed(9);
  auto loss = (img * torch::randn_like(img)).sum();
  auto grad_style = torch::autograd::grad({loss}, {zz.style})[0];
  torch::Tensor alpha;
  {
    torch::NoGradGuard ng;
    alpha = s.g->alpha(z);
  }
  const auto n_absent = absent.sum().item<int64_t>();
  const double alpha_max = alpha.abs().amax({2, 3}).masked_select(absent).max().item<double>();
  const double grad_max = grad_style.abs().amax(2).masked_select(absent).max().item<double>();
  const double grad_present = grad_style.abs().amax(2).masked_select(~absent).max().item<double>();
  details["absence"] = {{"absent_blobs", n_absent}, {"alpha_max", alpha_max}, {"style_grad_max", grad_max},
                        {"style_grad_max_present", grad_present}};
  record("absence_semantics", alpha_max == 0.0 && grad_max == 0.0 && grad_present > 0.0,
         std::to_string(n_absent) + " absent blobs: max alpha " + fmt(alpha_max) + ", max style gradient " +
             fmt(grad_max) + " (present blobs reach " + fmt(grad_present) + ")");
}

// ---------------------------------------------------------------------------

std::vector<cf::ClassTarget> flip_targets(blob::Generator& g, models::Classifier& m, const BlobLatent& z,
                                          const std::string& head) {
  torch::NoGradGuard ng;
  auto dec = models::decisions(m, g->generate(z));
  std::vector<cf::ClassTarget> t;
  for (int64_t i = 0; i < z.batch(); ++i) t.push_back({head, !dec[i][scene::head_index(head)].item<bool>()});
  return t;
}

void check_freeze(Models& s, const cf::OptimizerConfig& opt) {
  auto z = sample(s.g, 50, 41);
  auto targets = flip_targets(s.g, s.m, z, "right");
  int jobs = 0, violations = 0, moved = 0;

  cf::CFRequest style_req;
  style_req.mode = cf::Mode::style_only;
  style_req.lambda_dist = 0.1;
  style_req.optimizer = opt;
  auto first = z.slice(0);
  BlobLatent zs{z.spatial.slice(0, 0, 25), z.style.slice(0, 0, 25), z.background.slice(0, 0, 25)};
  auto res = cf::counterfactual_batch(zs, {targets.begin(), targets.begin() + 25}, style_req, s.g, s.m);
  for (int64_t i = 0; i < 25; ++i) {
    ++jobs;
    const auto q = zs.slice(i);
    if (!torch::equal(res[i].z_cf.spatial, q.spatial) || !torch::equal(res[i].z_cf.background, q.background))
      ++violations;
    moved += !torch::equal(res[i].z_cf.style, q.style);
  }
  (void)first;

  for (int64_t i = 25; i < 50; ++i) {
    cf::CFRequest req;
    req.zq = z.slice(i);
    req.target = targets[i];
    req.mode = cf::Mode::targeted;
    req.selected = {i % z.num_blobs()};
    req.lambda_dist = 0.1;
    req.optimizer = opt;
    auto r = cf::counterfactual(req, s.g, s.m);
    ++jobs;
    bool ok = torch::equal(r.z_cf.background, req.zq.background);
    for (int64_t k = 0; k < z.num_blobs(); ++k) {
      if (k == req.selected[0]) continue;
      ok = ok && torch::equal(r.z_cf.spatial.select(1, k), req.zq.spatial.select(1, k)) &&
           torch::equal(r.z_cf.style.select(1, k), req.zq.style.select(1, k));
    }
    violations += !ok;
    moved += r.changes[req.selected[0]].modified;
  }
  details["freeze"] = {{"jobs", jobs}, {"violations", violations}, {"jobs_with_free_changes", moved}};
  record("freeze_soundness", violations == 0 && jobs == 50,
         std::to_string(jobs) + " jobs (25 style-only, 25 targeted), " + std::to_string(violations) +
             " with a changed frozen group; " + std::to_string(moved) + " moved their free parameters");
}

// ---------------------------------------------------------------------------

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  auto ranks = [](const std::vector<double>& v) {
    std::vector<size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (size_t i = 0; i < idx.size();) {
      size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      for (size_t t = i; t <= j; ++t) r[idx[t]] = (i + j) / 2.0 + 1.0;
      i = j + 1;
    }
    return r;
  };
  auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n, my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  return sxx > 0 && syy > 0 ? sxy / std::sqrt(sxx * syy) : 0.0;
}

void check_sweep(const pl::PipelineConfig& cfg) {
  auto points = pl::sweep_stage(cfg, pl::Workspace{cfg.workspace}.reports() / "acceptance_sweep");
  nlohmann::json pj = nlohmann::json::array();
  std::vector<double> lam, dist;
  for (const auto& p : points) {
    pj.push_back(p.to_json());
    lam.push_back(p.lambda);
    dist.push_back(p.mean_l_dist);
  }
  details["sweep"] = pj;
  const auto& zero = points.front();
  record("success_rate_lambda0", zero.lambda == 0.0 && zero.success_rate >= 0.95 && zero.jobs == 100,
         "success " + fmt(zero.success_rate) + " on " + std::to_string(zero.jobs) + " queries at lambda 0 (need >= 0.95)");
  const double rho = spearman(lam, dist);
  std::string curve;
  for (const auto& p : points) curve += " " + fmt(p.lambda, 2) + ":" + fmt(p.mean_l_dist, 3) + "/" + fmt(p.success_rate, 3);
  record("tradeoff_shape", points.size() == 6 && rho <= -0.8 && points.back().success_rate <= zero.success_rate,
         "Spearman(lambda, mean l_dist) " + fmt(rho) + " (need <= -0.8); success at largest lambda " +
             fmt(points.back().success_rate) + " vs " + fmt(zero.success_rate) + " at 0; lambda:l_dist/success" + curve);
}

// ---------------------------------------------------------------------------

void check_ablation(Models& s, const pl::PipelineConfig& cfg, int64_t n) {
  n = std::min(n, s.val.size());
  auto images = s.val.images.slice(0, 0, n);
  auto real_stats = eval::image_stats(s.ref, s.val.images);

  auto variants = eval::inversion_ablation_variants(cfg.inversion);
  std::vector<eval::AblationVariant> pick;
  for (const auto& v : variants)
    if (v.name == "full" || v.name == "w/o L2 on f_M") pick.push_back(v);
  auto rows = eval::ablation_table(pick, images, s.enc, s.g, s.m, s.ref, real_stats);

  auto encoder_only = [&](const std::string& name, inversion::Encoder& e) {
    auto c = cfg.inversion;
    c.steps = 0;
    auto res = inversion::invert(images, e, s.g, s.m, s.ref, c);
    std::vector<torch::Tensor> recon;
    for (const auto& r : res) recon.push_back(r.reconstruction);
    return eval::score_reconstructions(name, images, torch::cat(recon, 0), s.m, s.ref, real_stats);
  };
  auto pre = encoder_only("pretrained", s.enc_pre);
  auto fine = encoder_only("fine-tuned", s.enc);

  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : rows) j.push_back(r.to_json());
  j.push_back(pre.to_json());
  j.push_back(fine.to_json());
  details["ablation"] = j;
  const auto& full = rows[0];
  const auto& nof = rows[1];
  const bool ok = full.preservation > nof.preservation && fine.perceptual < pre.perceptual &&
                  fine.preservation > pre.preservation;
  record("inversion_ablation_directions", ok,
         "preservation full " + fmt(full.preservation) + " vs w/o f_M " + fmt(nof.preservation) +
             "; encoder perceptual fine-tuned " + fmt(fine.perceptual) + " vs pretrained " + fmt(pre.perceptual) +
             ", preservation " + fmt(fine.preservation) + " vs " + fmt(pre.preservation) + " (" +
             std::to_string(n) + " validation images)");
}

// ---------------------------------------------------------------------------

void check_fid() {
  std::mt19937_64 rng(21);
  std::normal_distribution<double> N(0.0, 1.0);
  Eigen::MatrixXd x(500, 8);
  for (int i = 0; i < x.rows(); ++i)
    for (int j = 0; j < x.cols(); ++j) x(i, j) = N(rng);
  auto s = eval::FeatureStats::from_samples(x);
  const double self = eval::fid(s, s);

  // 2-D Gaussians with non-commuting covariances; for 2x2 matrices with
  // positive eigenvalues tr sqrt(M) = sqrt(tr M + 2 sqrt(det M)).
  Eigen::Matrix2d s1, s2;
  s1 << 2.0, 0.6, 0.6, 1.0;
  s2 << 0.5, -0.3, -0.3, 1.5;
  Eigen::Vector2d m1(0.0, 0.0), m2(1.0, -0.5);
  const Eigen::Matrix2d prod = s1 * s2;
  const double tr_sqrt = std::sqrt(prod.trace() + 2.0 * std::sqrt(prod.determinant()));
  const double analytic2 = (m1 - m2).squaredNorm() + s1.trace() + s2.trace() - 2.0 * tr_sqrt;

  auto draw = [&](const Eigen::VectorXd& mu, const Eigen::MatrixXd& cov, int n) {
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    Eigen::MatrixXd L = llt.matrixL();
    Eigen::MatrixXd out(n, mu.size());
    for (int i = 0; i < n; ++i) {
      Eigen::VectorXd e(mu.size());
      for (int d = 0; d < mu.size(); ++d) e(d) = N(rng);
      out.row(i) = (mu + L * e).transpose();
    }
    return out;
  };
  const double est2 = eval::fid(eval::FeatureStats::from_samples(draw(m1, s1, 10000)),
                                eval::FeatureStats::from_samples(draw(m2, s2, 10000)));

  // 8-D pair sharing an eigenbasis: closed form per eigen-direction
  Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(Eigen::MatrixXd::Random(8, 8)).householderQ();
  Eigen::VectorXd d1(8), d2(8);
  d1 << 1, 2, 3, 0.5, 1.5, 2.5, 0.8, 1.2;
  d2 << 2, 1, 0.5, 1, 3, 1, 0.4, 2;
  Eigen::MatrixXd c1 = q * d1.asDiagonal() * q.transpose(), c2 = q * d2.asDiagonal() * q.transpose();
  Eigen::VectorXd mu1 = Eigen::VectorXd::Zero(8), mu2 = Eigen::VectorXd::Constant(8, 0.5);
  double analytic8 = (mu1 - mu2).squaredNorm();
  for (int i = 0; i < 8; ++i) analytic8 += d1(i) + d2(i) - 2.0 * std::sqrt(d1(i) * d2(i));
  const double est8 = eval::fid(eval::FeatureStats::from_samples(draw(mu1, c1, 10000)),
                                eval::FeatureStats::from_samples(draw(mu2, c2, 10000)));

  const double e2 = std::abs(est2 - analytic2) / analytic2, e8 = std::abs(est8 - analytic8) / analytic8;
  details["fid"] = {{"self", self}, {"analytic_2d", analytic2}, {"estimate_2d", est2},
                    {"analytic_8d", analytic8}, {"estimate_8d", est8}};
  record("fid_kernel", self <= 1e-6 && e2 <= 0.05 && e8 <= 0.05,
         "fid(S,S) " + fmt(self) + "; 2-D " + fmt(est2) + " vs analytic " + fmt(analytic2) + " (rel " + fmt(e2) +
             "); 8-D " + fmt(est8) + " vs " + fmt(analytic8) + " (rel " + fmt(e8) + "), n=10000, tol 5%");
}

// ---------------------------------------------------------------------------

void check_semantics(Models& s, int64_t n, uint64_t seed) {
  auto rep = eval::blob_semantics(s.g, s.seg, n, seed);
  details["semantics"] = rep.to_json();
  const int vehicle = static_cast<int>(scene::SegClass::vehicle);
  int64_t best = -1;
  double best_drop = 0.0;
  for (const auto& l : rep.labels)
    if (l.category == "vehicle" && l.localized && rep.drops[l.blob].mean_drop[vehicle] > best_drop) {
      best = l.blob;
      best_drop = rep.drops[l.blob].mean_drop[vehicle];
    }
  if (best < 0) {
    record("blob_semantics", false, "no blob with dominant vehicle drop and a localized heatmap");
    return;
  }

  // brute-force recount: same latents, blob removed by hand, pixels counted one by one
  torch::Tensor before, after;
  {
    torch::NoGradGuard ng;
    torch::manual_seed(seed);
    auto z = s.g->sample_layout(s.g->random_noise(n)).z;
    auto removed = z.clone();
    removed.spatial.select(1, best).select(1, blob::kScale).fill_(-1.0);
    before = models::segment(s.seg, s.g->generate(z)).contiguous();
    after = models::segment(s.seg, s.g->generate(removed)).contiguous();
  }
  std::array<double, scene::kNumSegClasses> drop{};
  auto b = before.accessor<int64_t, 3>(), a = after.accessor<int64_t, 3>();
  int64_t reduced = 0;
  for (int64_t i = 0; i < n; ++i) {
    int64_t vb = 0, va = 0;
    for (int64_t y = 0; y < before.size(1); ++y)
      for (int64_t x = 0; x < before.size(2); ++x) {
        drop[b[i][y][x]] += 1.0;
        drop[a[i][y][x]] -= 1.0;
        vb += b[i][y][x] == vehicle;
        va += a[i][y][x] == vehicle;
      }
    reduced += va < vb;
  }
  for (auto& d : drop) d /= static_cast<double>(n);
  const auto& pd = rep.drops[best];
  bool agree = true;
  int dominant = 0;
  for (int c = 0; c < scene::kNumSegClasses; ++c) {
    agree = agree && std::abs(drop[c] - pd.mean_signed[c]) < 1e-9;
    if (std::max(0.0, drop[c]) > std::max(0.0, drop[dominant])) dominant = c;
  }
  const auto& hm = rep.heatmaps[best];
  record("blob_semantics", agree && dominant == vehicle && hm.entropy() < hm.uniform_entropy(),
         "blob " + std::to_string(best) + " removes " + fmt(drop[vehicle]) + " vehicle pixels per sample (oracle " +
             (agree ? "agrees" : "disagrees") + ", vehicle " + (dominant == vehicle ? "" : "not ") +
             "dominant, fewer vehicle pixels in " + std::to_string(reduced) + "/" + std::to_string(n) +
             " samples); centroid entropy " + fmt(hm.entropy()) + " < uniform " + fmt(hm.uniform_entropy()));
}

// ---------------------------------------------------------------------------

enum class EditKind { remove_vehicles, add_vehicle, open_lane };

// Builds a hand-edited target from a predicted mask; empty if the edit does
// not apply to this scene.
torch::Tensor hand_edit(const torch::Tensor& pred, EditKind kind, int variant) {
  const int64_t H = pred.size(0), W = pred.size(1);
  auto t = pred.clone();
  auto a = t.accessor<int64_t, 2>();
  const int64_t vehicle = static_cast<int64_t>(scene::SegClass::vehicle);
  const int64_t primary = static_cast<int64_t>(scene::SegClass::primary_lane);
  const int64_t secondary = static_cast<int64_t>(scene::SegClass::secondary_lane);
  const int64_t background = static_cast<int64_t>(scene::SegClass::background);
  int64_t changed = 0;
  if (kind == EditKind::remove_vehicles) {
    // each vehicle pixel takes the most common non-vehicle class of its column
    for (int64_t x = 0; x < W; ++x) {
      std::array<int64_t, scene::kNumSegClasses> cnt{};
      for (int64_t y = 0; y < H; ++y)
        if (a[y][x] != vehicle) ++cnt[a[y][x]];
      const int64_t fill = std::max_element(cnt.begin(), cnt.end()) - cnt.begin();
      for (int64_t y = 0; y < H; ++y)
        if (a[y][x] == vehicle) {
          a[y][x] = fill;
          ++changed;
        }
    }
  } else if (kind == EditKind::add_vehicle) {
    // a car-sized box in the near part of one of the three lanes
    const double lanes[3] = {(scene::kRoadLeft + scene::kLaneBoundaryLeft) / 2,
                             (scene::kLaneBoundaryLeft + scene::kLaneBoundaryRight) / 2,
                             (scene::kLaneBoundaryRight + scene::kRoadRight) / 2};
    const double cu = lanes[variant % 3], cv = 0.62 + 0.08 * (variant % 2);
    const int64_t w = std::max<int64_t>(3, W / 9), h = std::max<int64_t>(3, H / 5);
    const int64_t x0 = static_cast<int64_t>(cu * W) - w / 2, y0 = static_cast<int64_t>(cv * H) - h / 2;
    for (int64_t y = y0; y < y0 + h; ++y)
      for (int64_t x = x0; x < x0 + w; ++x)
        if (y >= 0 && y < H && x >= 0 && x < W && a[y][x] != vehicle) {
          a[y][x] = vehicle;
          ++changed;
        }
  } else {
    // a blocked side lane (background beside the primary lane) becomes drivable
    const bool left = variant % 2 == 0;
    const double u0 = left ? scene::kRoadLeft : scene::kLaneBoundaryRight;
    const double u1 = left ? scene::kLaneBoundaryLeft : scene::kRoadRight;
    const int64_t x0 = static_cast<int64_t>(std::ceil(u0 * W)), x1 = static_cast<int64_t>(u1 * W);
    int64_t bg = 0, total = 0;
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = x0; x < x1; ++x) {
        ++total;
        bg += a[y][x] == background;
      }
    if (bg < total / 2) return {};
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = x0; x < x1; ++x)
        if (a[y][x] == background) {
          a[y][x] = secondary;
          ++changed;
        }
    (void)primary;
  }
  if (changed < 4) return {};
  return t;
}

void check_segmentation_cf(Models& s, const cf::OptimizerConfig& opt, double lambda) {
  const int64_t H = s.g->cfg.height, W = s.g->cfg.width;
  const double thr = 0.8;
  const EditKind kinds[3] = {EditKind::remove_vehicles, EditKind::add_vehicle, EditKind::open_lane};
  int built = 0, success = 0, localized = 0;
  double worst_outside = 0.0;
  nlohmann::json cases = nlohmann::json::array();
  for (uint64_t seed = 500; built < 10 && seed < 700; ++seed) {
    const auto kind = kinds[built % 3];
    auto zq = sample(s.g, 1, seed);
    torch::Tensor pred;
    {
      torch::NoGradGuard ng;
      pred = models::segment(s.seg, s.g->generate(zq))[0];
    }
    auto target = hand_edit(pred, kind, built);
    if (!target.defined()) continue;
    const double iou0 = models::per_image_iou(pred.unsqueeze(0), target.unsqueeze(0))[0].item<double>();
    if (iou0 >= thr) continue;  // the edit has to be a real change
    ++built;

    cf::CFRequest req;
    req.zq = zq;
    req.target = target;
    req.lambda_dist = lambda;
    req.iou_threshold = thr;
    req.optimizer = opt;
    if (kind == EditKind::add_vehicle) {
      // a new object needs a blob to grow from: prime the inactive blob
      // whose center is nearest the painted box
      auto vm = (target == static_cast<int64_t>(scene::SegClass::vehicle)) & (pred != target);
      auto ys = vm.nonzero().to(torch::kFloat64);
      const double cy = (ys.select(1, 0).mean().item<double>() + 0.5) / H;
      const double cx = (ys.select(1, 1).mean().item<double>() + 0.5) / W;
      double best = 1e9;
      for (int64_t k = 0; k < zq.num_blobs(); ++k) {
        auto sp = zq.spatial[0][k];
        if (sp[blob::kScale].item<double>() > 0) continue;
        const double d = std::hypot(sp[blob::kCx].item<double>() - cx, sp[blob::kCy].item<double>() - cy);
        if (d < best) {
          best = d;
          req.selected = {k};
        }
      }
    }
    auto r = cf::segmentation_counterfactual(req, s.g, s.seg);
    success += r.success;

    // locality: pixel changes must sit where some modified blob's opacity
    // (before or after) exceeds 1e-4, dilated by the synthesis radius
    torch::Tensor diff, support;
    {
      torch::NoGradGuard ng;
      diff = (r.image - s.g->generate(zq)).abs().amax(1)[0];
      auto a0 = s.g->alpha(zq)[0], a1 = s.g->alpha(r.z_cf)[0];
      support = torch::zeros({H, W}, torch::kBool);
      for (int64_t k = 0; k < zq.num_blobs(); ++k)
        if (r.changes[k].modified) support = support | (a0[k] > 1e-4) | (a1[k] > 1e-4);
      const int64_t rad = blob::kSynthesisRadius;
      support = torch::max_pool2d(support.to(torch::kFloat32).view({1, 1, H, W}), 2 * rad + 1, 1, rad)
                    .view({H, W}) > 0;
      if (!torch::equal(r.z_cf.background, zq.background)) support.fill_(true);
    }
    const double outside = diff.masked_select(~support).numel() ? diff.masked_select(~support).max().item<double>() : 0.0;
    worst_outside = std::max(worst_outside, outside);
    const bool local = outside <= 1.0 / 255.0;
    localized += local;
    cases.push_back({{"seed", seed},
                     {"edit", kind == EditKind::remove_vehicles ? "remove vehicles"
                              : kind == EditKind::add_vehicle   ? "add vehicle"
                                                                : "open side lane"},
                     {"initial_iou", iou0},
                     {"final_iou", r.final_metric},
                     {"success", r.success},
                     {"modified_blobs", r.modified_count()},
                     {"primed", req.selected},
                     {"max_change_outside_support", outside}});
  }
  details["segmentation_cf"] = cases;
  record("segmentation_cf", built == 10 && success >= 6 && localized == built,
         std::to_string(success) + "/" + std::to_string(built) + " edits reach IoU >= 0.8 (need 6/10); " +
             std::to_string(localized) + "/" + std::to_string(built) +
             " keep pixel changes inside the dilated opacity support (max outside " + fmt(worst_outside) + ")");
}

// ---------------------------------------------------------------------------

struct Probe {
  BlobLatent z;
  int64_t blob;
};

// Queries with a car blob on the left side (its removal drops vehicle pixels
// there) where both models currently allow `right`.
std::vector<Probe> bias_probes(Models& s, int want) {
  std::vector<Probe> probes;
  const int64_t H = s.g->cfg.height, W = s.g->cfg.width;
  const int vehicle = static_cast<int>(scene::SegClass::vehicle);
  const int right = scene::head_index("right");
  const int64_t mid = W / 2;
  for (uint64_t seed = 3000; static_cast<int>(probes.size()) < want && seed < 3000 + 40 * want; seed += 16) {
    auto z = sample(s.g, 16, seed);
    torch::NoGradGuard ng;
    auto img = s.g->generate(z);
    auto ok = models::decisions(s.m, img).select(1, right) & models::decisions(s.m_biased, img).select(1, right);
    auto masks = models::segment(s.seg, img);
    for (int64_t i = 0; i < 16 && static_cast<int>(probes.size()) < want; ++i) {
      if (!ok[i].item<bool>()) continue;
      auto zi = z.slice(i);
      int64_t best = -1, best_drop = 0;
      for (int64_t k = 0; k < zi.num_blobs(); ++k) {
        auto sp = zi.spatial[0][k];
        if (sp[blob::kScale].item<double>() <= 0 || sp[blob::kCx].item<double>() >= 0.4) continue;
        auto removed = blob::edit_blob(zi, k, blob::BlobEdit{}.set(blob::kScale, -1.0));
        auto m2 = models::segment(s.seg, s.g->generate(removed))[0];
        auto left_half = [&](const torch::Tensor& m) {
          return (m.slice(1, 0, mid) == vehicle).sum().item<int64_t>();
        };
        const int64_t drop = left_half(masks[i]) - left_half(m2);
        if (drop > best_drop) {
          best_drop = drop;
          best = k;
        }
      }
      if (best >= 0 && best_drop >= 4) probes.push_back({zi, best});
    }
  }
  (void)H;
  return probes;
}

void check_bias_probe(Models& s, const cf::OptimizerConfig& opt, double lambda) {
  auto probes = bias_probes(s, 50);
  const int64_t H = s.g->cfg.height, W = s.g->cfg.width;
  const auto lane = scene::lane_region(scene::Side::right);
  const int64_t x0 = static_cast<int64_t>(lane.u0 * W), x1 = static_cast<int64_t>(std::ceil(lane.u1 * W));
  auto flips = [&](models::Classifier& m) {
    int n = 0, raw = 0;
    for (const auto& p : probes) {
      cf::CFRequest req;
      req.zq = p.z;
      req.target = cf::ClassTarget{"right", false};
      req.mode = cf::Mode::targeted;
      req.selected = {p.blob};
      req.lambda_dist = lambda;
      req.optimizer = opt;
      auto r = cf::counterfactual(req, s.g, m);
      if (!r.success) continue;
      ++raw;
      torch::NoGradGuard ng;
      const auto sp = r.z_cf.spatial[0][p.blob];
      const bool removed = sp[blob::kScale].item<double>() <= 0;
      const bool stays_left = removed || sp[blob::kCx].item<double>() < 0.5;
      const double cover = s.g->alpha(r.z_cf)[0][p.blob].slice(1, x0, x1).max().item<double>();
      n += stays_left && cover < 0.5;
    }
    return std::make_pair(n, raw);
  };
  auto [biased, biased_raw] = flips(s.m_biased);
  auto [plain, plain_raw] = flips(s.m);
  const double n = static_cast<double>(probes.size());
  const double rb = n > 0 ? biased / n : 0.0, ru = n > 0 ? plain / n : 0.0;
  details["bias_probe"] = {{"probes", probes.size()}, {"biased_flips", biased}, {"biased_raw_success", biased_raw},
                           {"unbiased_flips", plain}, {"unbiased_raw_success", plain_raw}};
  (void)H;
  record("bias_probe", probes.size() == 50 && rb >= 0.30 && ru <= 0.10,
         "left-car edits flip `right` on " + fmt(rb) + " of " + std::to_string(probes.size()) +
             " probes with the biased model (need >= 0.30), " + fmt(ru) + " with the unbiased model (need <= 0.10)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance suite"};
  std::string cli, config, workspace;
  bool reuse = false;
  std::vector<std::string> only;
  app.add_option("--cli", cli, "path to the octet executable")->required();
  app.add_option("--config", config, "pipeline config")->required()->check(CLI::ExistingFile);
  app.add_option("--workspace", workspace, "workspace directory")->required();
  app.add_flag("--reuse", reuse, "skip the CLI chain when the workspace is already trained");
  app.add_option("--only", only, "run only these criteria");
  std::vector<std::string> extra;
  app.add_option("--set", extra, "extra config overrides (key=value)");
  CLI11_PARSE(app, argc, argv);
  std::vector<std::string> overrides = {"sweep.queries=100", "ablate.images=200"};
  overrides.insert(overrides.end(), extra.begin(), extra.end());

  torch::set_num_threads(1);
  auto want = [&](const std::string& n) { return only.empty() || std::find(only.begin(), only.end(), n) != only.end(); };

  // The criteria run at the sizes they name, on top of the tiny config.
  auto cfg = pl::load_config(config, overrides, workspace);
  pl::Workspace ws{cfg.workspace};

  bool trained = reuse && std::filesystem::exists(ws.encoder());
  if (!trained && want("end_to_end_cli")) {
    std::filesystem::remove_all(ws.root);
    trained = run_chain(cli, config, workspace);
  }
  if (want("l_dist_exact")) check_l_dist();
  if (want("fid_kernel")) check_fid();
  if (!trained && !std::filesystem::exists(ws.encoder())) {
    for (auto n : {"gradients_finite_difference", "absence_semantics", "freeze_soundness", "success_rate_lambda0",
                   "tradeoff_shape", "inversion_ablation_directions", "blob_semantics", "segmentation_cf", "bias_probe"})
      if (want(n)) record(n, false, "no trained workspace");
  } else {
    auto s = load_models(ws);
    auto guarded = [&](const std::string& name, const std::function<void()>& fn) {
      if (!want(name)) return;
      const auto t0 = std::chrono::steady_clock::now();
      try {
        fn();
      } catch (const std::exception& e) {
        record(name, false, std::string("error: ") + e.what());
      }
      const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::cerr << "  (" << name << " took " << fmt(sec, 3) << " s)" << std::endl;
    };
    guarded("gradients_finite_difference", [&] { check_gradients(s); });
    guarded("absence_semantics", [&] { check_absence(s); });
    guarded("freeze_soundness", [&] { check_freeze(s, cfg.cf_optimizer); });
    guarded("success_rate_lambda0", [&] { check_sweep(cfg); });
    guarded("inversion_ablation_directions", [&] { check_ablation(s, cfg, cfg.ablate_images); });
    guarded("blob_semantics", [&] { check_semantics(s, cfg.semantics_samples, cfg.semantics_seed); });
    guarded("segmentation_cf", [&] {
      // mask targets are scored by IoU alone, so run them unpenalized with a longer budget
      auto opt = cfg.cf_optimizer;
      opt.steps = std::max<int64_t>(opt.steps, 500);
      check_segmentation_cf(s, opt, 0.0);
    });
    guarded("bias_probe", [&] { check_bias_probe(s, cfg.cf_optimizer, cfg.cf_lambda); });
  }

  nlohmann::json summary = nlohmann::json::array();
  int failed = 0;
  for (const auto& o : outcomes) {
    summary.push_back({{"criterion", o.name}, {"pass", o.pass}, {"detail", o.detail}});
    failed += !o.pass;
  }
  pl::write_json(ws.reports() / "acceptance.json", {{"results", summary}, {"details", details}});
  std::cout << (failed == 0 ? "ALL PASS" : std::to_string(failed) + " FAILED") << " (" << outcomes.size()
            << " criteria)" << std::endl;
  return failed == 0 ? 0 : 1;
}
