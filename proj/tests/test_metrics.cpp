#include "doctest_torch.hpp"
#include <random>



#include "octet/analysis.hpp"
#include "octet/checkpoint.hpp"
#include "octet/inversion.hpp"
#include "octet/metrics.hpp"
#include "test_util.hpp"

using namespace octet;

TEST_CASE("success rate") {
  CHECK(eval::success_rate({true, true}) == 1.0);
  CHECK(eval::success_rate({false, false, false}) == 0.0);
  CHECK(eval::success_rate({true, false, true, true}) == 0.75);
  CHECK_THROWS(eval::success_rate({}));
}

TEST_CASE("perceptual distance") {
  torch::manual_seed(1);
  models::ReferenceNet ref(test::tiny_net_config());
  ref->eval();
  auto a = torch::rand({4, 3, 16, 32}), b = torch::rand({4, 3, 16, 32});
  CHECK(eval::perceptual_distance(ref, a, a).abs().max().item<double>() == 0.0);
  CHECK(torch::equal(eval::perceptual_distance(ref, a, b), eval::perceptual_distance(ref, b, a)));
  CHECK((eval::perceptual_distance(ref, a, b) >= 0).all().item<bool>());
}

TEST_CASE("fid closed forms") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> N(0.0, 1.0);
  Eigen::MatrixXd x(500, 6);
  for (int i = 0; i < x.rows(); ++i)
    for (int j = 0; j < x.cols(); ++j) x(i, j) = N(rng) * (1 + j);
  auto s = eval::FeatureStats::from_samples(x);
  CHECK(eval::fid(s, s) <= 1e-6);

  Eigen::VectorXd d(6);
  d << 1, -2, 0.5, 0, 3, 1;
  auto shifted = x.rowwise() + d.transpose();
  CHECK(eval::fid(s, eval::FeatureStats::from_samples(shifted)) == doctest::Approx(d.squaredNorm()).epsilon(1e-6));

  CHECK_THROWS(eval::FeatureStats::from_samples(Eigen::MatrixXd(1, 3)));
  CHECK_THROWS(eval::fid(s, eval::FeatureStats::from_samples(Eigen::MatrixXd::Random(10, 4))));
}

TEST_CASE("decision preservation") {
  auto m = test::tiny_classifier(2);
  torch::manual_seed(2);
  auto imgs = torch::rand({20, 3, 16, 32});
  CHECK(inversion::decision_preservation(imgs, imgs, m) == 1.0);
  auto black = torch::zeros_like(imgs);
  // brute-force agreement count against the black image's decisions
  torch::NoGradGuard ng;
  auto d0 = models::decisions(m, imgs), d1 = models::decisions(m, black);
  double agree = 0;
  for (int i = 0; i < 20; ++i) agree += torch::equal(d0[i], d1[i]);
  const double p = inversion::decision_preservation(imgs, black, m);
  CHECK(p == doctest::Approx(agree / 20));
  CHECK(p >= 0.0);
  CHECK(p <= 1.0);
}

TEST_CASE("sparsity counts") {
  auto g = test::tiny_generator();
  auto z = g->sample_layout(g->random_noise(1)).z.detach();
  CHECK(eval::sparsity_report(std::vector<std::vector<cf::BlobChange>>{cf::change_report(z, z)}).mean == 0.0);
  auto moved = blob::edit_blob(z, 3, blob::BlobEdit{}.add(blob::kCx, 0.1));
  CHECK(eval::sparsity_report(std::vector<std::vector<cf::BlobChange>>{cf::change_report(moved, z)}).mean == 1.0);
}

TEST_CASE("checkpoint format") {
  TensorArchive a;
  a.meta = {{"kind", "test"}};
  a.put("x", torch::randn({3, 4}, torch::kFloat64));
  a.put("y", torch::arange(5, torch::kLong));
  auto b = deserialize(serialize(a));
  CHECK(b.meta == a.meta);
  CHECK(torch::equal(b.get("x"), a.get("x")));
  CHECK(torch::equal(b.get("y"), a.get("y")));
  auto bytes = serialize(a);
  bytes.resize(bytes.size() / 2);
  CHECK_THROWS(deserialize(bytes));
  auto bad = serialize(a);
  bad[0] ^= 0xff;
  CHECK_THROWS(deserialize(bad));
}

TEST_CASE("inversion from the true latent") {
  auto g = test::tiny_generator(3);
  auto m = test::tiny_classifier(3);
  torch::manual_seed(3);
  models::ReferenceNet ref(test::tiny_net_config());
  ref->eval();
  auto z = g->sample_layout(g->random_noise(2)).z.detach();
  torch::Tensor x;
  {
    torch::NoGradGuard ng;
    x = g->generate(z);
  }
  inversion::InversionConfig cfg;
  cfg.steps = 30;
  inversion::Encoder none{nullptr};
  auto res = inversion::invert(x, none, g, m, ref, cfg, z);
  for (const auto& r : res) {
    CHECK(r.trace.back().total <= r.trace.front().total + 1e-6);
    CHECK(r.decision_preserved);
  }
  CHECK_THROWS(inversion::invert(x, none, g, m, ref, cfg));
}

TEST_CASE("zero inversion steps keep the encoder output") {
  auto g = test::tiny_generator(4);
  auto m = test::tiny_classifier(4);
  torch::manual_seed(4);
  models::ReferenceNet ref(test::tiny_net_config());
  ref->eval();
  inversion::Encoder enc(test::tiny_generator_config(), 8);
  enc->eval();
  auto x = torch::rand({2, 3, 16, 32});
  inversion::InversionConfig cfg;
  cfg.steps = 0;
  auto res = inversion::invert(x, enc, g, m, ref, cfg);
  torch::NoGradGuard ng;
  auto expect = g->layout->decode(enc->forward(x));
  for (int i = 0; i < 2; ++i) CHECK(res[i].z.equal(expect.slice(i)));
}
