#include <csignal>
#include <iostream>

#include <CLI11.hpp>

#include "octet/pipeline.hpp"
#include "octet/service.hpp"

namespace pl = octet::pipeline;

namespace {

octet::service::HttpServer* g_server = nullptr;

void on_signal(int) {
  if (g_server) g_server->stop();
}

std::filesystem::path default_out(const pl::PipelineConfig& cfg, const std::string& name) {
  return pl::Workspace{cfg.workspace}.runs() / name;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"OCTET object-aware counterfactual pipeline"};
  app.require_subcommand(1);

  std::string config_file;
  std::string workspace;
  std::vector<std::string> overrides;
  app.add_option("-c,--config", config_file, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("-w,--workspace", workspace, "workspace directory (overrides config and OCTET_WORKSPACE)");
  app.add_option("--set", overrides, "override a config key, e.g. --set gan.steps=200");

  auto* gen_data = app.add_subcommand("gen-data", "render the training and validation scenes");
  auto* train_gan = app.add_subcommand("train-gan", "train the blob generator");
  auto* train_models = app.add_subcommand("train-models", "train classifiers, segmenter and reference net");
  auto* train_encoder = app.add_subcommand("train-encoder", "pretrain and fine-tune the encoder");

  auto* invert = app.add_subcommand("invert", "invert one query image");
  pl::QuerySpec query;
  std::string invert_out;
  {
    auto* g = invert->add_option_group("query")->require_option(0, 1);
    g->add_option("--image", query.image, "PNG file")->check(CLI::ExistingFile);
    g->add_option("--seed", query.seed, "generate the query from this seed");
    g->add_option("--val-index", query.val_index, "use this validation image");
  }
  invert->add_flag("--true-init", query.true_init, "seed queries: start from the true latent");
  invert->add_option("-o,--out", invert_out, "output directory");

  auto* cf = app.add_subcommand("cf", "compute a counterfactual");
  pl::CfOptions cfo;
  std::string cf_out;
  std::string value_text;
  {
    auto* g = cf->add_option_group("query")->require_option(0, 1);
    g->add_option("--latent", cfo.latent, "latent or inversion checkpoint")->check(CLI::ExistingFile);
    g->add_option("--seed", cfo.seed, "generated query");
  }
  cf->add_option("--head", cfo.head, "decision head")->check(CLI::IsMember({"forward", "stop", "left", "right"}));
  cf->add_option("--value", value_text, "target decision (default: flip)")->check(CLI::IsMember({"true", "false", "0", "1"}));
  cf->add_option("--lambda", cfo.lambda, "distance weight")->check(CLI::NonNegativeNumber);
  cf->add_option("--mode", cfo.mode, "full, spatial_only, style_only or targeted")
      ->check(CLI::IsMember({"full", "spatial_only", "style_only", "targeted"}));
  cf->add_option("--select", cfo.selected, "blob indices for targeted mode")->delimiter(',');
  cf->add_option("--steps", cfo.steps, "optimizer steps")->check(CLI::NonNegativeNumber);
  cf->add_flag("--biased", cfo.biased_model, "explain the biased classifier");
  cf->add_option("-o,--out", cf_out, "output directory");

  auto* sweep = app.add_subcommand("sweep", "lambda trade-off sweep");
  auto* semantics = app.add_subcommand("semantics", "blob semantics report");
  auto* ablate = app.add_subcommand("ablate", "encoder and inversion ablations");
  std::string report_out;
  for (auto* s : {sweep, semantics, ablate}) s->add_option("-o,--out", report_out, "output directory");

  auto* serve = app.add_subcommand("serve", "run the HTTP service");
  std::optional<int> port;
  std::optional<std::string> host;
  serve->add_option("--port", port, "port (0 picks a free one)")->check(CLI::Range(0, 65535));
  serve->add_option("--host", host, "bind address");

  CLI11_PARSE(app, argc, argv);

  try {
    std::optional<std::filesystem::path> ws;
    if (!workspace.empty()) ws = workspace;
    auto cfg = pl::load_config(config_file, overrides, ws);

    if (gen_data->parsed()) {
      pl::gen_data(cfg);
    } else if (train_gan->parsed()) {
      pl::train_gan_stage(cfg);
    } else if (train_models->parsed()) {
      pl::train_models_stage(cfg);
    } else if (train_encoder->parsed()) {
      pl::train_encoder_stage(cfg);
    } else if (invert->parsed()) {
      auto out = invert_out.empty() ? default_out(cfg, "invert") : std::filesystem::path(invert_out);
      auto res = pl::invert_stage(cfg, query, out);
      std::cout << "inversion written to " << out.string() << " (decision preserved: "
                << (res.decision_preserved ? "yes" : "no") << ")\n";
    } else if (cf->parsed()) {
      if (!value_text.empty()) cfo.value = value_text == "true" || value_text == "1";
      auto out = cf_out.empty() ? default_out(cfg, "cf") : std::filesystem::path(cf_out);
      auto res = pl::cf_stage(cfg, cfo, out);
      std::cout << "counterfactual written to " << out.string() << " (success: " << (res.success ? "yes" : "no")
                << ", modified blobs: " << res.modified_count() << ")\n";
    } else if (sweep->parsed()) {
      auto out = report_out.empty() ? pl::Workspace{cfg.workspace}.reports() / "sweep" : std::filesystem::path(report_out);
      for (const auto& p : pl::sweep_stage(cfg, out)) std::cout << p.to_json().dump() << '\n';
    } else if (semantics->parsed()) {
      auto out =
          report_out.empty() ? pl::Workspace{cfg.workspace}.reports() / "semantics" : std::filesystem::path(report_out);
      std::cout << pl::semantics_stage(cfg, out).to_json().dump(2) << '\n';
    } else if (ablate->parsed()) {
      auto out = report_out.empty() ? pl::Workspace{cfg.workspace}.reports() / "ablate" : std::filesystem::path(report_out);
      for (const auto& r : pl::ablate_stage(cfg, out)) std::cout << r.to_json().dump() << '\n';
    } else if (serve->parsed()) {
      pl::Workspace w{cfg.workspace};
      octet::service::ServiceConfig sc;
      sc.workspace = w.root / "store";
      sc.models = {w.generator(), w.encoder(), w.classifier(), w.reference(), w.segmenter()};
      for (auto* p : {&sc.models.generator, &sc.models.encoder, &sc.models.classifier, &sc.models.reference,
                      &sc.models.segmenter})
        if (!std::filesystem::exists(*p)) p->clear();
      sc.inversion = cfg.inversion;
      sc.cf_optimizer = cfg.cf_optimizer;
      sc.workers = cfg.serve_workers;
      octet::service::Service service(sc);
      octet::service::HttpServer server(service);
      const int bound = server.bind(host.value_or(cfg.serve_host), port.value_or(cfg.serve_port));
      std::cout << "listening on " << host.value_or(cfg.serve_host) << ':' << bound << std::endl;
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      server.run();
      g_server = nullptr;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
