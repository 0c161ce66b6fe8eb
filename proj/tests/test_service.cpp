#include "doctest_torch.hpp"

#include <httplib.h>

#include <thread>

#include "octet/image.hpp"
#include "octet/service.hpp"
#include "test_util.hpp"

using namespace octet;
using namespace octet::service;
using nlohmann::json;

namespace {

// Untrained tiny checkpoints; enough to exercise the plumbing.
ModelPaths write_models(const std::filesystem::path& dir) {
  ModelPaths p{dir / "g.ckpt", dir / "e.ckpt", dir / "c.ckpt", dir / "r.ckpt", dir / "s.ckpt"};
  blob::save_generator(test::tiny_generator(1), p.generator);
  models::save_classifier(test::tiny_classifier(1), p.classifier);
  torch::manual_seed(1);
  models::save_reference(models::ReferenceNet(test::tiny_net_config()), p.reference);
  models::save_segmenter(models::Segmenter(test::tiny_net_config()), p.segmenter);
  inversion::save_encoder(inversion::Encoder(test::tiny_generator_config(), 4), p.encoder);
  return p;
}

ServiceConfig service_config(const std::filesystem::path& dir, const ModelPaths& models) {
  ServiceConfig c;
  c.workspace = dir / "store";
  c.models = models;
  c.inversion.steps = 3;
  c.cf_optimizer.steps = 4;
  c.workers = 2;
  return c;
}

// Body for a CF request that flips `right` on the session's query.
json flip_right(const json& session, double lambda = 0.1) {
  const bool cur = session.at("decisions").at("reconstruction").at("right").at("decision").get<bool>();
  return {{"target", {{"head", "right"}, {"value", !cur}}}, {"lambda", lambda}};
}

}  // namespace

TEST_CASE("sha256 and base64") {
  const std::string abc = "abc";
  CHECK(sha256_hex({abc.begin(), abc.end()}) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  std::vector<uint8_t> bytes{0, 1, 2, 250, 255, 7, 9};
  CHECK(base64_decode(base64_encode(bytes)) == bytes);
  CHECK(base64_encode({'h', 'i'}) == "aGk=");
}

TEST_CASE("artifact store") {
  auto dir = test::temp_dir("store");
  {
    ArtifactStore s(dir);
    std::vector<uint8_t> data{1, 2, 3};
    auto h = s.put(data, "blob");
    CHECK(h == sha256_hex(data));
    CHECK(s.put(data, "blob") == h);
    CHECK(*s.get(h) == data);
    CHECK(*s.kind(h) == "blob");
    CHECK_FALSE(s.get(std::string(64, '0')).has_value());
    s.put_record("sessions", "a", {{"x", 1}});
    s.put_record("sessions", "a", {{"x", 2}});
  }
  ArtifactStore s(dir);
  auto recs = s.records("sessions");
  REQUIRE(recs.size() == 1);
  CHECK(recs[0]["x"] == 2);
  CHECK(s.contains(sha256_hex({1, 2, 3})));
}

TEST_CASE("overlay geometry matches the renderer") {
  auto g = test::tiny_generator(2);
  torch::NoGradGuard ng;
  auto z = g->sample_layout(g->random_noise(4)).z.to(torch::kFloat64);
  const int64_t H = g->cfg.height, W = g->cfg.width;
  int checked = 0;
  for (int64_t b = 0; b < 4; ++b) {
    auto zb = z.slice(b);
    auto alpha = blob::render_blobs(zb.spatial, H, W, g->cfg.tau)[0];
    for (const auto& o : overlays(zb, H, W)) {
      // the half-opacity contour is where d == s, i.e. alpha == 0.5
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const double a = alpha[o.blob][y][x].item<double>();
          if (std::abs(a - 0.5) < 0.05) continue;
          CHECK(o.contains(x + 0.5, y + 0.5) == (a > 0.5));
          ++checked;
        }
    }
  }
  CHECK(checked > 0);
}

TEST_CASE("topmost blob wins") {
  std::vector<Overlay> ov{{1, 10, 10, 5, 5, 0}, {4, 12, 10, 5, 5, 0}, {2, 30, 10, 2, 2, 0}};
  CHECK(blob_at(ov, 11, 10) == 4);
  CHECK(blob_at(ov, 6, 10) == 1);
  CHECK(blob_at(ov, 30, 10) == 2);
  CHECK_FALSE(blob_at(ov, 50, 50).has_value());
}

TEST_CASE("cf request validation") {
  auto g = test::tiny_generator();
  auto z = g->sample_layout(g->random_noise(1)).z.detach();
  cf::OptimizerConfig d;
  auto r = parse_cf_request({{"target", {{"head", "left"}, {"value", true}}}, {"mode", "style_only"}}, z, d);
  CHECK(r.mode == cf::Mode::style_only);
  auto bad = [&](const json& j) {
    try {
      parse_cf_request(j, z, d);
    } catch (const ServiceError& e) {
      return e.status == 400;
    }
    return false;
  };
  CHECK(bad({{"target", {{"head", "up"}, {"value", true}}}}));
  CHECK(bad({{"target", {{"head", "left"}, {"value", true}}}, {"lambda", -1}}));
  CHECK(bad({{"target", {{"head", "left"}, {"value", true}}}, {"mode", "targeted"}}));
  CHECK(bad({{"target", {{"head", "left"}, {"value", true}}}, {"mode", "targeted"}, {"selected", {99}}}));
  CHECK(bad(json::object()));
}

TEST_CASE("missing checkpoints are a conflict") {
  auto dir = test::temp_dir("svc_missing");
  auto models = write_models(dir);
  models.encoder.clear();
  Service svc(service_config(dir, models));
  try {
    svc.create_session({{"seed", 1}});
    FAIL("expected an error");
  } catch (const ServiceError& e) {
    CHECK(e.status == 409);
  }
  CHECK(svc.create_session({{"seed", 1}, {"init", "true_latent"}}).contains("session"));
}

TEST_CASE("service over http") {
  auto dir = test::temp_dir("svc_http");
  auto models = write_models(dir);
  std::string sid;
  std::vector<std::string> order;
  {
    Service svc(service_config(dir, models));
    HttpServer server(svc);
    const int port = server.bind("127.0.0.1", 0);
    std::thread th([&] { server.run(); });
    httplib::Client cli("127.0.0.1", port);
    cli.set_read_timeout(60);

    auto health = cli.Get("/health");
    REQUIRE(health);
    CHECK(health->status == 200);

    auto created = cli.Post("/sessions", json{{"seed", 3}}.dump(), "application/json");
    REQUIRE(created);
    CHECK(created->status == 202);
    auto cj = json::parse(created->body);
    sid = cj["session"];
    svc.wait(cj["job"], 60);
    auto sess = json::parse(cli.Get("/sessions/" + sid)->body);
    CHECK(sess["state"] == "ready");

    // png upload path
    torch::Tensor img;
    {
      torch::NoGradGuard ng;
      blob::Generator g = svc.models().generator;
      img = g->generate(g->sample_layout(g->random_noise(1)).z);
    }
    auto png = encode_png(from_tensor(img[0]));
    auto up = cli.Post("/sessions?steps=2", std::string(png.begin(), png.end()), "image/png");
    REQUIRE(up);
    CHECK(up->status == 202);

    // concurrent submits on one session queue in order
    std::vector<std::thread> clients;
    std::mutex mu;
    std::vector<std::string> jobs;
    for (int i = 0; i < 4; ++i)
      clients.emplace_back([&, i] {
        httplib::Client c("127.0.0.1", port);
        auto r = c.Post("/sessions/" + sid + "/cf", flip_right(sess, 0.05 * i).dump(), "application/json");
        REQUIRE(r);
        CHECK(r->status == 202);
        std::lock_guard lock(mu);
        jobs.push_back(json::parse(r->body)["id"]);
      });
    for (auto& t : clients) t.join();
    for (const auto& j : jobs) CHECK(svc.wait(j, 120)["state"] == "done");
    auto after = json::parse(cli.Get("/sessions/" + sid)->body);
    REQUIRE(after["history"].size() == 4);
    std::set<std::string> seen;
    for (const auto& h : after["history"]) {
      seen.insert(h["job"].get<std::string>());
      order.push_back(h["job"]);
      CHECK(svc.verify_cf_record(h));
    }
    CHECK(seen.size() == 4);

    // artifacts are served by hash and match their content
    const std::string hash = after["history"][0]["image_png"];
    auto art = cli.Get("/artifacts/" + hash);
    REQUIRE(art);
    CHECK(art->status == 200);
    CHECK(sha256_hex({art->body.begin(), art->body.end()}) == hash);

    auto blobs = json::parse(cli.Get("/blobs/" + sid)->body);
    CHECK(blobs["overlays"].size() + blobs["inactive"].size() == blobs["num_blobs"].get<size_t>());

    // style-only run leaves every spatial delta at zero
    auto so = flip_right(sess);
    so["mode"] = "style_only";
    auto sr = json::parse(cli.Post("/sessions/" + sid + "/cf", so.dump(), "application/json")->body);
    CHECK(svc.wait(sr["id"], 60)["state"] == "done");
    auto last = json::parse(cli.Get("/sessions/" + sid)->body)["history"].back();
    for (const auto& b : last["change_report"]["blobs"])
      for (const auto& d : b["delta_spatial"]) CHECK(d.get<double>() == 0.0);
    order.push_back(sr["id"]);

    // error statuses
    CHECK(cli.Get("/sessions/nope")->status == 404);
    CHECK(cli.Get("/jobs/nope")->status == 404);
    CHECK(cli.Get("/artifacts/" + std::string(64, 'a'))->status == 404);
    CHECK(cli.Post("/sessions", "{bad json", "application/json")->status == 400);
    CHECK(cli.Post("/sessions/" + sid + "/cf", json{{"target", {{"head", "up"}, {"value", true}}}}.dump(),
                   "application/json")
              ->status == 400);
    auto same = flip_right(sess);
    same["target"]["value"] = !same["target"]["value"].get<bool>();
    CHECK(cli.Post("/sessions/" + sid + "/cf", same.dump(), "application/json")->status == 400);

    server.stop();
    th.join();
  }
  // history survives a restart
  Service again(service_config(dir, models));
  auto s = again.session(sid);
  REQUIRE(s["history"].size() == order.size());
  for (size_t i = 0; i < order.size(); ++i) CHECK(s["history"][i]["job"] == order[i]);
  CHECK(again.verify_cf_record(s["history"][0]));
}
