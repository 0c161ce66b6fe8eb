#include "octet/pipeline.hpp"

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "octet/checkpoint.hpp"
#include "octet/image.hpp"

namespace octet::pipeline {

namespace {

nlohmann::json section(const nlohmann::json& j, const char* key) {
  return j.contains(key) && j.at(key).is_object() ? j.at(key) : nlohmann::json::object();
}

std::vector<torch::Tensor> collect_images(const std::vector<cf::CFResult>& rs) {
  std::vector<torch::Tensor> out;
  for (const auto& r : rs) out.push_back(r.image);
  return out;
}

}  // namespace

PipelineConfig PipelineConfig::from_json(const nlohmann::json& j) {
  PipelineConfig c;
  c.raw = j;
  c.workspace = j.value("workspace", c.workspace.string());
  if (j.contains("scene")) c.scene = scene::scene_config_from_json(j.at("scene"));
  auto data = section(j, "dataset");
  c.train_count = data.value("train", c.train_count);
  c.val_count = data.value("val", c.val_count);
  c.data_seed = data.value("seed", c.data_seed);

  auto gen = section(j, "generator");
  gen["height"] = c.scene.height;
  gen["width"] = c.scene.width;
  c.generator = blob::GeneratorConfig::from_json(gen);
  c.gan = blob::GanTrainConfig::from_json(section(j, "gan"));

  auto m = section(j, "models");
  auto net = section(m, "net");
  net["height"] = c.scene.height;
  net["width"] = c.scene.width;
  c.net = models::NetConfig::from_json(net);
  c.train = models::TrainConfig::from_json(section(m, "train"));
  c.segmenter_train = m.contains("segmenter_train") ? models::TrainConfig::from_json(m.at("segmenter_train")) : c.train;

  auto enc = section(j, "encoder");
  c.pretrain = inversion::PretrainConfig::from_json(section(enc, "pretrain"));
  c.finetune = inversion::FinetuneConfig::from_json(section(enc, "finetune"));
  c.encoder_ablation = enc.value("ablation", c.encoder_ablation);
  c.inversion = inversion::InversionConfig::from_json(section(j, "inversion"));

  auto cfs = section(j, "cf");
  c.cf_optimizer = cf::OptimizerConfig::from_json(section(cfs, "optimizer"));
  c.cf_lambda = cfs.value("lambda", c.cf_lambda);
  c.cf_mode = cfs.value("mode", c.cf_mode);
  c.cf_head = cfs.value("head", c.cf_head);

  auto sw = section(j, "sweep");
  c.sweep_queries = sw.value("queries", c.sweep_queries);
  c.sweep_lambdas = sw.value("lambdas", c.sweep_lambdas);
  c.sweep_seed = sw.value("seed", c.sweep_seed);
  auto se = section(j, "semantics");
  c.semantics_samples = se.value("samples", c.semantics_samples);
  c.semantics_seed = se.value("seed", c.semantics_seed);
  c.ablate_images = section(j, "ablate").value("images", c.ablate_images);
  auto sv = section(j, "serve");
  c.serve_host = sv.value("host", c.serve_host);
  c.serve_port = sv.value("port", c.serve_port);
  c.serve_workers = sv.value("workers", c.serve_workers);

  c.scene.validate();
  c.generator.validate();
  c.inversion.validate();
  cf::mode_from_string(c.cf_mode);
  scene::head_index(c.cf_head);
  if (c.train_count < 1 || c.val_count < 1) throw std::invalid_argument("config: dataset sizes must be >= 1");
  return c;
}

void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw std::invalid_argument("override '" + assignment + "' is not key=value");
  const auto key = assignment.substr(0, eq);
  const auto text = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error&) {
    value = text;
  }
  std::string pointer = "/";
  for (char ch : key) pointer += ch == '.' ? '/' : ch;
  doc[nlohmann::json::json_pointer(pointer)] = value;
}

PipelineConfig load_config(const std::filesystem::path& file, const std::vector<std::string>& overrides,
                           const std::optional<std::filesystem::path>& workspace) {
  nlohmann::json doc = nlohmann::json::object();
  if (!file.empty()) {
    std::ifstream in(file);
    if (!in) throw std::runtime_error("cannot read config " + file.string());
    doc = nlohmann::json::parse(in);
  }
  if (const char* env = std::getenv("OCTET_WORKSPACE"); env && *env) doc["workspace"] = env;
  for (const auto& o : overrides) apply_override(doc, o);
  if (workspace) doc["workspace"] = workspace->string();
  return PipelineConfig::from_json(doc);
}

void log(const std::string& msg) {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  localtime_r(&t, &tm);
  std::cerr << std::put_time(&tm, "%H:%M:%S") << ' ' << msg << std::endl;
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path);
  f << j.dump(2) << '\n';
  if (!f) throw std::runtime_error("cannot write " + path.string());
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return nlohmann::json::parse(in);
}

namespace {

Workspace ws(const PipelineConfig& cfg) { return {cfg.workspace}; }

void require_file(const std::filesystem::path& p, const std::string& hint) {
  if (!std::filesystem::exists(p)) throw std::runtime_error(p.string() + " not found (run " + hint + " first)");
}

blob::Generator load_gen(const Workspace& w) {
  require_file(w.generator(), "train-gan");
  return blob::load_generator(w.generator());
}

models::Classifier load_cls(const Workspace& w, bool biased = false) {
  const auto p = biased ? w.classifier_biased() : w.classifier();
  require_file(p, "train-models");
  return models::load_classifier(p);
}

models::ReferenceNet load_ref(const Workspace& w) {
  require_file(w.reference(), "train-models");
  return models::load_reference(w.reference());
}

models::Segmenter load_seg(const Workspace& w) {
  require_file(w.segmenter(), "train-models");
  return models::load_segmenter(w.segmenter());
}

inversion::Encoder load_enc(const Workspace& w, const std::filesystem::path& p) {
  require_file(p, "train-encoder");
  return inversion::load_encoder(p);
}

scene::Dataset load_val(const Workspace& w) {
  require_file(w.val_data() / "metadata.jsonl", "gen-data");
  return scene::load_dataset(w.val_data());
}

}  // namespace

void gen_data(const PipelineConfig& cfg) {
  auto w = ws(cfg);
  log("generating " + std::to_string(cfg.train_count) + " training scenes");
  auto train = scene::build_dataset(cfg.data_seed, cfg.train_count, cfg.scene);
  scene::export_dataset(train, cfg.scene, w.train_data());
  log("generating " + std::to_string(cfg.val_count) + " validation scenes");
  // validation seeds start far past the training range
  auto val = scene::build_dataset(cfg.data_seed + 1'000'000'000ULL, cfg.val_count, cfg.scene);
  scene::export_dataset(val, cfg.scene, w.val_data());
  write_json(w.root / "config.json", cfg.raw);
}

void train_gan_stage(const PipelineConfig& cfg) {
  auto w = ws(cfg);
  require_file(w.train_data() / "metadata.jsonl", "gen-data");
  auto train = scene::load_dataset(w.train_data());
  auto tcfg = cfg.gan;
  tcfg.sample_dir = w.runs() / "gan_samples";
  {
    torch::manual_seed(tcfg.seed);
    blob::Generator init(cfg.generator);
    std::filesystem::create_directories(w.root / "models");
    blob::save_generator(init, w.generator_init());
  }
  log("training GAN for " + std::to_string(tcfg.steps) + " steps on " + std::to_string(train.size()) + " images");
  auto res = blob::train_gan(train.images, cfg.generator, tcfg);
  blob::save_generator(res.generator, w.generator(), {{"train", tcfg.to_json()}});
  nlohmann::json log_json = nlohmann::json::array();
  for (const auto& e : res.log)
    log_json.push_back({{"step", e.step}, {"d_loss", e.d_loss}, {"g_loss", e.g_loss}, {"r1", e.r1}});
  write_json(w.reports() / "gan_log.json", log_json);
}

void train_models_stage(const PipelineConfig& cfg) {
  auto w = ws(cfg);
  require_file(w.train_data() / "metadata.jsonl", "gen-data");
  auto train = scene::load_dataset(w.train_data());
  std::filesystem::create_directories(w.root / "models");
  nlohmann::json reports;
  {
    log("training classifier");
    models::TrainingReport rep;
    auto m = models::train_classifier(train, cfg.net, cfg.train, false, &rep);
    models::save_classifier(m, w.classifier(), {{"bias_flag", false}});
    reports["classifier"] = rep.to_json();
  }
  {
    log("training biased classifier");
    models::TrainingReport rep;
    auto m = models::train_classifier(train, cfg.net, cfg.train, true, &rep);
    models::save_classifier(m, w.classifier_biased(), {{"bias_flag", true}});
    reports["classifier_biased"] = rep.to_json();
  }
  {
    log("training segmenter");
    models::TrainingReport rep;
    auto m = models::train_segmenter(train, cfg.net, cfg.segmenter_train, &rep);
    models::save_segmenter(m, w.segmenter());
    reports["segmenter"] = rep.to_json();
  }
  {
    log("training reference network");
    models::TrainingReport rep;
    auto m = models::train_reference(train, cfg.net, cfg.train, &rep);
    models::save_reference(m, w.reference());
    reports["reference"] = rep.to_json();
  }
  write_json(w.reports() / "models.json", reports);
}

void train_encoder_stage(const PipelineConfig& cfg) {
  auto w = ws(cfg);
  auto g = load_gen(w);
  auto m = load_cls(w);
  auto ref = load_ref(w);
  require_file(w.train_data() / "metadata.jsonl", "gen-data");
  auto train = scene::load_dataset(w.train_data());

  log("pretraining encoder for " + std::to_string(cfg.pretrain.steps) + " steps");
  auto pre = inversion::pretrain_encoder(g, cfg.pretrain);
  inversion::save_encoder(pre.encoder, w.encoder_pretrained());
  nlohmann::json report;
  report["pretrain"] = {{"initial_heldout", pre.initial_heldout_loss}, {"final_heldout", pre.final_heldout_loss}};
  nlohmann::json plog = nlohmann::json::array();
  for (const auto& e : pre.log) plog.push_back({{"step", e.step}, {"values", e.values}});
  report["pretrain"]["log"] = plog;

  auto finetune = [&](const inversion::FinetuneConfig& fc, const std::filesystem::path& out, const char* name) {
    log(std::string("fine-tuning encoder (") + name + ") for " + std::to_string(fc.steps) + " steps");
    std::vector<inversion::EncoderLog> flog;
    auto e = inversion::finetune_encoder(pre.encoder, g, m, ref, train.images, fc, &flog);
    inversion::save_encoder(e, out, {{"finetune", fc.to_json()}});
    nlohmann::json j = nlohmann::json::array();
    for (const auto& x : flog) j.push_back({{"step", x.step}, {"values", x.values}});
    report[name] = j;
  };
  finetune(cfg.finetune, w.encoder(), "finetune");
  if (cfg.encoder_ablation) {
    auto fc = cfg.finetune;
    fc.lambda_decision = 0.0;
    finetune(fc, w.encoder_no_features(), "finetune_no_features");
  }
  write_json(w.reports() / "encoder.json", report);
}

inversion::InversionResult invert_stage(const PipelineConfig& cfg, const QuerySpec& query,
                                        const std::filesystem::path& out_dir) {
  auto w = ws(cfg);
  auto g = load_gen(w);
  auto m = load_cls(w);
  auto ref = load_ref(w);
  torch::Tensor image;
  std::optional<blob::BlobLatent> init;
  nlohmann::json source;
  if (query.image) {
    auto img = read_png(*query.image);
    if (img.height != cfg.scene.height || img.width != cfg.scene.width)
      throw std::invalid_argument("image " + query.image->string() + " does not match the configured dims");
    image = to_tensor(img).unsqueeze(0);
    source = {{"image", query.image->string()}};
  } else if (query.seed) {
    torch::NoGradGuard no_grad;
    auto gen = at::detail::createCPUGenerator(*query.seed);
    auto z = g->sample_layout(torch::randn({1, g->cfg.noise_dim}, gen)).z;
    image = g->generate(z);
    if (query.true_init) init = z;
    source = {{"seed", *query.seed}, {"true_init", query.true_init}};
  } else {
    auto val = load_val(w);
    const int64_t idx = query.val_index.value_or(0);
    if (idx < 0 || idx >= val.size()) throw std::out_of_range("validation index out of range");
    image = val.images.slice(0, idx, idx + 1);
    source = {{"val_index", idx}};
  }
  inversion::Encoder enc{nullptr};
  if (!init) enc = load_enc(w, w.encoder());
  auto res = inversion::invert(image, enc, g, m, ref, cfg.inversion, init)[0];
  std::filesystem::create_directories(out_dir);
  inversion::save_inversion(res, out_dir / "inversion.ckpt");
  inversion::save_latent(res.z, out_dir / "latent.ckpt");
  write_png(from_tensor(image[0]), out_dir / "query.png");
  write_png(from_tensor(res.reconstruction[0]), out_dir / "reconstruction.png");
  write_json(out_dir / "trace.json", res.trace_json());
  const auto& last = res.trace.back();
  write_json(out_dir / "summary.json", {{"source", source},
                                        {"decision_preserved", res.decision_preserved},
                                        {"steps", res.steps_run},
                                        {"final", {{"perceptual", last.perceptual},
                                                   {"pixel", last.pixel},
                                                   {"features", last.features},
                                                   {"proximity", last.proximity},
                                                   {"total", last.total}}}});
  std::filesystem::create_directories(w.runs());
  write_json(w.runs() / "latest_inversion.json", {{"path", std::filesystem::absolute(out_dir / "latent.ckpt").string()}});
  return res;
}

cf::CFResult cf_stage(const PipelineConfig& cfg, const CfOptions& opts, const std::filesystem::path& out_dir) {
  auto w = ws(cfg);
  auto g = load_gen(w);
  auto m = load_cls(w, opts.biased_model);
  blob::BlobLatent zq;
  if (opts.seed) {
    torch::NoGradGuard no_grad;
    auto gen = at::detail::createCPUGenerator(*opts.seed);
    zq = g->sample_layout(torch::randn({1, g->cfg.noise_dim}, gen)).z;
  } else {
    std::filesystem::path p;
    if (opts.latent) {
      p = *opts.latent;
    } else {
      const auto latest = w.runs() / "latest_inversion.json";
      require_file(latest, "invert");
      p = read_json(latest).at("path").get<std::string>();
    }
    auto a = load_archive(p);
    zq = a.meta.value("kind", "") == "inversion"
             ? blob::BlobLatent{a.get("z.spatial"), a.get("z.style"), a.get("z.background")}
             : inversion::latent_from_archive(a);
  }
  const std::string head = opts.head.empty() ? cfg.cf_head : opts.head;
  bool value;
  if (opts.value) {
    value = *opts.value;
  } else {
    torch::NoGradGuard no_grad;
    value = !models::decisions(m, g->generate(zq))[0][scene::head_index(head)].item<bool>();
  }
  cf::CFRequest req;
  req.zq = zq;
  req.target = cf::ClassTarget{head, value};
  req.lambda_dist = opts.lambda.value_or(cfg.cf_lambda);
  req.mode = cf::mode_from_string(opts.mode.value_or(cfg.cf_mode));
  req.selected = opts.selected;
  req.optimizer = cfg.cf_optimizer;
  if (opts.steps) req.optimizer.steps = *opts.steps;
  auto res = cf::counterfactual(req, g, m);

  std::filesystem::create_directories(out_dir);
  torch::Tensor query_image;
  {
    torch::NoGradGuard no_grad;
    query_image = g->generate(zq);
  }
  inversion::save_latent(zq, out_dir / "query_latent.ckpt");
  inversion::save_latent(res.z_cf, out_dir / "cf_latent.ckpt");
  write_png(from_tensor(query_image[0]), out_dir / "query.png");
  write_png(from_tensor(res.image[0]), out_dir / "counterfactual.png");
  write_json(out_dir / "request.json", req.to_json());
  write_json(out_dir / "change_report.json", res.change_report());
  write_json(out_dir / "trace.json", res.trace_json());
  torch::Tensor probs = models::predict(m, res.image).to(torch::kFloat64);
  nlohmann::json dec;
  for (int h = 0; h < models::kNumHeads; ++h) dec[scene::kHeadNames[h]] = probs[0][h].item<double>();
  write_json(out_dir / "result.json", {{"success", res.success},
                                       {"target", {{"head", head}, {"value", value}}},
                                       {"modified_blobs", res.modified_count()},
                                       {"steps_run", res.steps_run},
                                       {"probabilities", dec}});
  return res;
}

QuerySet generated_queries(blob::Generator& generator, models::Classifier& model, int64_t n, uint64_t seed,
                           const std::string& head) {
  torch::NoGradGuard no_grad;
  auto gen = at::detail::createCPUGenerator(seed);
  QuerySet q;
  q.z = generator->sample_layout(torch::randn({n, generator->cfg.noise_dim}, gen)).z;
  auto dec = models::batched(generator->generate(q.z), 128, [&](const torch::Tensor& x) { return models::decisions(model, x); });
  const int h = scene::head_index(head);
  for (int64_t i = 0; i < n; ++i) q.targets.push_back({head, !dec[i][h].item<bool>()});
  return q;
}

std::vector<eval::TradeoffPoint> sweep_stage(const PipelineConfig& cfg, const std::filesystem::path& out_dir) {
  auto w = ws(cfg);
  auto g = load_gen(w);
  auto m = load_cls(w);
  auto ref = load_ref(w);
  auto val = load_val(w);
  auto real_stats = eval::image_stats(ref, val.images);
  auto q = generated_queries(g, m, cfg.sweep_queries, cfg.sweep_seed, cfg.cf_head);
  cf::CFRequest base;
  base.mode = cf::mode_from_string(cfg.cf_mode);
  base.optimizer = cfg.cf_optimizer;
  auto lambdas = cfg.sweep_lambdas;
  std::sort(lambdas.begin(), lambdas.end());
  log("sweeping " + std::to_string(lambdas.size()) + " lambda values over " + std::to_string(cfg.sweep_queries) +
      " queries");
  std::vector<std::vector<cf::CFResult>> results;
  auto points = eval::sweep_lambda(q.z, q.targets, lambdas, base, g, m, ref, real_stats, &results);
  std::filesystem::create_directories(out_dir);
  eval::write_sweep_csv(points, out_dir / "sweep.csv");
  nlohmann::json j = nlohmann::json::array();
  for (size_t i = 0; i < points.size(); ++i) {
    auto pj = points[i].to_json();
    pj["sparsity"] = eval::sparsity_report(results[i]).to_json();
    j.push_back(pj);
  }
  write_json(out_dir / "sweep.json", j);
  eval::plot_tradeoff(points, out_dir / "tradeoff.svg");
  for (size_t i = 0; i < results.size(); ++i)
    if (!results[i].empty())
      write_png(make_grid(torch::cat(collect_images(results[i]), 0).slice(0, 0, 16), 4),
                out_dir / ("samples_lambda_" + std::to_string(i) + ".png"));
  return points;
}

eval::BlobSemanticsReport semantics_stage(const PipelineConfig& cfg, const std::filesystem::path& out_dir) {
  auto w = ws(cfg);
  auto g = load_gen(w);
  auto s = load_seg(w);
  log("blob semantics over " + std::to_string(cfg.semantics_samples) + " samples");
  auto rep = eval::blob_semantics(g, s, cfg.semantics_samples, cfg.semantics_seed);
  std::filesystem::create_directories(out_dir);
  write_json(out_dir / "semantics.json", rep.to_json());
  eval::plot_pixel_drops(rep, out_dir / "pixel_drops.svg");
  eval::plot_heatmaps(rep, out_dir / "centroids.svg");
  return rep;
}

std::vector<eval::AblationRow> ablate_stage(const PipelineConfig& cfg, const std::filesystem::path& out_dir) {
  auto w = ws(cfg);
  auto g = load_gen(w);
  auto m = load_cls(w);
  auto ref = load_ref(w);
  auto val = load_val(w);
  auto real_stats = eval::image_stats(ref, val.images);
  const int64_t n = std::min(cfg.ablate_images, val.size());
  auto images = val.images.slice(0, 0, n);

  std::vector<eval::AblationRow> encoder_rows;
  auto encoder_only = [&](const std::string& name, const std::filesystem::path& p) {
    if (!std::filesystem::exists(p)) return;
    auto e = inversion::load_encoder(p);
    auto c = cfg.inversion;
    c.steps = 0;
    auto res = inversion::invert(images, e, g, m, ref, c);
    std::vector<torch::Tensor> recon;
    for (const auto& r : res) recon.push_back(r.reconstruction);
    encoder_rows.push_back(eval::score_reconstructions(name, images, torch::cat(recon, 0), m, ref, real_stats));
  };
  log("scoring encoders on " + std::to_string(n) + " validation images");
  encoder_only("pretrained encoder", w.encoder_pretrained());
  encoder_only("fine-tuned encoder", w.encoder());
  encoder_only("fine-tuned w/o L2 on f_M", w.encoder_no_features());

  auto enc = load_enc(w, w.encoder());
  log("running inversion ablation");
  auto rows = eval::ablation_table(eval::inversion_ablation_variants(cfg.inversion), images, enc, g, m, ref, real_stats);

  std::filesystem::create_directories(out_dir);
  eval::write_ablation_csv(rows, out_dir / "ablation.csv");
  eval::write_ablation_csv(encoder_rows, out_dir / "encoder_ablation.csv");
  nlohmann::json j{{"inversion", nlohmann::json::array()}, {"encoder", nlohmann::json::array()}};
  for (const auto& r : rows) j["inversion"].push_back(r.to_json());
  for (const auto& r : encoder_rows) j["encoder"].push_back(r.to_json());
  write_json(out_dir / "ablation.json", j);
  rows.insert(rows.end(), encoder_rows.begin(), encoder_rows.end());
  return rows;
}

}  // namespace octet::pipeline
