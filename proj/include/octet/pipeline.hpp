#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "octet/analysis.hpp"
#include "octet/cf.hpp"
#include "octet/dataset.hpp"
#include "octet/generator.hpp"
#include "octet/inversion.hpp"
#include "octet/models.hpp"
#include "octet/scene.hpp"

namespace octet::pipeline {

/// Everything the CLI stages read, parsed from one JSON document.
struct PipelineConfig {
  std::filesystem::path workspace = "workspace";
  scene::SceneGenConfig scene;
  int64_t train_count = 4000;
  int64_t val_count = 500;
  uint64_t data_seed = 0;
  blob::GeneratorConfig generator;
  blob::GanTrainConfig gan;
  models::NetConfig net;
  models::TrainConfig train;
  models::TrainConfig segmenter_train;
  inversion::PretrainConfig pretrain;
  inversion::FinetuneConfig finetune;
  bool encoder_ablation = true;  // also fine-tune an encoder without the f_M term
  inversion::InversionConfig inversion;
  cf::OptimizerConfig cf_optimizer;
  double cf_lambda = 0.1;
  std::string cf_mode = "full";
  std::string cf_head = "right";
  int64_t sweep_queries = 100;
  std::vector<double> sweep_lambdas = eval::default_lambda_grid();
  uint64_t sweep_seed = 1000;
  int64_t semantics_samples = 200;
  uint64_t semantics_seed = 2000;
  int64_t ablate_images = 200;
  std::string serve_host = "127.0.0.1";
  int serve_port = 8080;
  int serve_workers = 2;

  nlohmann::json raw;  // the merged document

  static PipelineConfig from_json(const nlohmann::json& j);
};

/// Loads a config file (may be empty for defaults), applies `key.path=value`
/// overrides (value parsed as JSON, falling back to a string) and resolves
/// the workspace: explicit override > OCTET_WORKSPACE > config file.
PipelineConfig load_config(const std::filesystem::path& file, const std::vector<std::string>& overrides,
                           const std::optional<std::filesystem::path>& workspace = std::nullopt);

void apply_override(nlohmann::json& doc, const std::string& assignment);

/// Workspace layout.
struct Workspace {
  std::filesystem::path root;

  std::filesystem::path train_data() const { return root / "data" / "train"; }
  std::filesystem::path val_data() const { return root / "data" / "val"; }
  std::filesystem::path model(const std::string& name) const { return root / "models" / (name + ".ckpt"); }
  std::filesystem::path generator() const { return model("generator"); }
  std::filesystem::path generator_init() const { return model("generator_init"); }
  std::filesystem::path classifier() const { return model("classifier"); }
  std::filesystem::path classifier_biased() const { return model("classifier_biased"); }
  std::filesystem::path segmenter() const { return model("segmenter"); }
  std::filesystem::path reference() const { return model("reference"); }
  std::filesystem::path encoder_pretrained() const { return model("encoder_pretrained"); }
  std::filesystem::path encoder() const { return model("encoder"); }
  std::filesystem::path encoder_no_features() const { return model("encoder_no_features"); }
  std::filesystem::path runs() const { return root / "runs"; }
  std::filesystem::path reports() const { return root / "reports"; }
};

void log(const std::string& msg);
void write_json(const std::filesystem::path& path, const nlohmann::json& j);
nlohmann::json read_json(const std::filesystem::path& path);

void gen_data(const PipelineConfig& cfg);
void train_gan_stage(const PipelineConfig& cfg);
void train_models_stage(const PipelineConfig& cfg);
void train_encoder_stage(const PipelineConfig& cfg);

/// Query for invert / cf: a PNG file, a generator seed or a validation index.
struct QuerySpec {
  std::optional<std::filesystem::path> image;
  std::optional<uint64_t> seed;
  std::optional<int64_t> val_index;
  bool true_init = false;  // seed queries: start from the true latent
};

/// Inverts one query into `out_dir` (inversion.ckpt, query.png,
/// reconstruction.png, trace.json, summary.json).
inversion::InversionResult invert_stage(const PipelineConfig& cfg, const QuerySpec& query,
                                        const std::filesystem::path& out_dir);

struct CfOptions {
  std::optional<std::filesystem::path> latent;  // latent or inversion record; default: latest invert output
  std::optional<uint64_t> seed;                 // generated query instead
  std::string head;
  std::optional<bool> value;  // default: flip the current decision
  std::optional<double> lambda;
  std::optional<std::string> mode;
  std::vector<int64_t> selected;
  std::optional<int64_t> steps;
  bool biased_model = false;
};

/// Writes a CF bundle into out_dir and returns the result.
cf::CFResult cf_stage(const PipelineConfig& cfg, const CfOptions& opts, const std::filesystem::path& out_dir);

std::vector<eval::TradeoffPoint> sweep_stage(const PipelineConfig& cfg, const std::filesystem::path& out_dir);
eval::BlobSemanticsReport semantics_stage(const PipelineConfig& cfg, const std::filesystem::path& out_dir);
std::vector<eval::AblationRow> ablate_stage(const PipelineConfig& cfg, const std::filesystem::path& out_dir);

/// Generated queries for benchmarks: latents from `seed` paired with the
/// flip of `head` under the model.
struct QuerySet {
  blob::BlobLatent z;
  std::vector<cf::ClassTarget> targets;
};
QuerySet generated_queries(blob::Generator& generator, models::Classifier& model, int64_t n, uint64_t seed,
                           const std::string& head);

}  // namespace octet::pipeline
