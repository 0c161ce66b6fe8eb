#include "doctest_torch.hpp"

#include <cmath>

#include "octet/blob.hpp"
#include "octet/generator.hpp"
#include "test_util.hpp"

using namespace octet;
using namespace octet::blob;

namespace {

// Independent scalar evaluation of one blob's opacity at pixel (x, y).
double alpha_oracle(double cx, double cy, double s, double a, double th, int x, int y, int H, int W, double tau) {
  if (s <= 0) return 0.0;
  a = std::max(a, kMinAspect);
  const double u = (x + 0.5) / W, v = (y + 0.5) / H;
  const double dx = (u - cx) * W / H, dy = v - cy;
  const double xr = std::cos(th) * dx + std::sin(th) * dy;
  const double yr = -std::sin(th) * dx + std::cos(th) * dy;
  const double d = std::sqrt(xr * xr / a + yr * yr * a + 1e-12);
  return 1.0 / (1.0 + std::exp(-(s - d) / tau));
}

torch::Tensor one_blob(double cx, double cy, double s, double a, double th) {
  return torch::tensor({cx, cy, s, a, th}, torch::kFloat64).view({1, 1, 5});
}

}  // namespace

TEST_CASE("renderer matches a scalar oracle") {
  torch::manual_seed(1);
  auto sp = torch::rand({2, 3, 5}, torch::kFloat64);
  sp.select(2, kScale).sub_(0.3);
  sp.select(2, kAspect).mul_(3);
  const int H = 12, W = 20;
  auto alpha = render_blobs(sp, H, W, 0.05);
  double worst = 0;
  for (int b = 0; b < 2; ++b)
    for (int k = 0; k < 3; ++k) {
      auto p = sp[b][k];
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const double o = alpha_oracle(p[0].item<double>(), p[1].item<double>(), p[2].item<double>(),
                                        p[3].item<double>(), p[4].item<double>(), x, y, H, W, 0.05);
          worst = std::max(worst, std::abs(o - alpha[b][k][y][x].item<double>()));
        }
    }
  CHECK(worst < 1e-12);
}

TEST_CASE("absent blob renders nothing") {
  for (double s : {-1.0, 0.0}) {
    auto alpha = render_blobs(one_blob(0.5, 0.5, s, 1.0, 0.3), 16, 32, 0.05);
    CHECK(alpha.abs().max().item<double>() == 0.0);
  }
}

TEST_CASE("alpha at the center") {
  // odd dims put a pixel center exactly on (0.5, 0.5)
  const double s = 0.07;
  auto alpha = render_blobs(one_blob(0.5, 0.5, s, 1.7, 0.4), 15, 15, 0.05);
  CHECK(alpha[0][0][7][7].item<double>() == doctest::Approx(1.0 / (1.0 + std::exp(-s / 0.05))).epsilon(1e-4));
}

TEST_CASE("round blob is rotation invariant") {
  auto a0 = render_blobs(one_blob(0.4, 0.6, 0.2, 1.0, 0.0), 16, 32, 0.05);
  for (double th : {0.3, 1.2, -2.5}) {
    auto a1 = render_blobs(one_blob(0.4, 0.6, 0.2, 1.0, th), 16, 32, 0.05);
    CHECK(torch::allclose(a0, a1, 0, 1e-12));
  }
}

TEST_CASE("compositing weights") {
  torch::manual_seed(2);
  auto sp = torch::rand({2, 4, 5}, torch::kFloat64);
  auto style = torch::randn({2, 4, 3}, torch::kFloat64);
  auto bg = torch::randn({2, 3}, torch::kFloat64);
  auto c = compose_features(render_blobs(sp, 8, 16, 0.05), style, bg);
  CHECK(torch::allclose(c.weights.sum(1), torch::ones({2, 8, 16}, torch::kFloat64), 0, 1e-12));

  sp.select(2, kScale).fill_(-1);
  auto empty = compose_features(render_blobs(sp, 8, 16, 0.05), style, bg);
  CHECK(torch::equal(empty.features, bg.view({2, 3, 1, 1}).expand({2, 3, 8, 16})));

  // an opaque blob on top owns the pixel
  auto opaque = torch::ones({1, 2, 4, 4}, torch::kFloat64);
  auto c2 = compose_features(opaque, style.slice(0, 0, 1).slice(1, 0, 2), bg.slice(0, 0, 1));
  CHECK(torch::equal(c2.features[0].select(1, 0).select(1, 0), style[0][1]));
}

TEST_CASE("blob edits") {
  torch::manual_seed(3);
  auto g = test::tiny_generator();
  auto z = g->sample_layout(g->random_noise(2)).z;
  CHECK(edit_blob(z, 1, BlobEdit{}).equal(z));
  {
    torch::NoGradGuard ng;
    CHECK(torch::equal(g->generate(edit_blob(z, 0, BlobEdit{})), g->generate(z)));
  }
  auto gone = edit_blob(z, 2, BlobEdit{}.set(kScale, -1.0));
  CHECK(g->alpha(gone).select(1, 2).abs().max().item<double>() == 0.0);
  CHECK_THROWS_AS(edit_blob(z, 99, BlobEdit{}), std::out_of_range);

  // shifting cx moves the alpha centroid by the same fraction of the width
  const int H = 16, W = 64;
  auto base = one_blob(0.3, 0.5, 0.08, 1.0, 0.0);
  BlobLatent zb{base, torch::zeros({1, 1, 2}, torch::kFloat64), torch::zeros({1, 2}, torch::kFloat64)};
  auto moved = edit_blob(zb, 0, BlobEdit{}.add(kCx, 0.2));
  auto centroid = [&](const torch::Tensor& sp) {
    auto a = render_blobs(sp, H, W, 0.05)[0][0];
    auto xs = torch::arange(W, torch::kFloat64).view({1, W});
    return ((a * xs).sum() / a.sum()).item<double>();
  };
  CHECK(centroid(moved.spatial) - centroid(zb.spatial) == doctest::Approx(0.2 * W).epsilon(1e-3));
}

TEST_CASE("layout sampling") {
  auto g = test::tiny_generator();
  torch::NoGradGuard ng;
  auto noise = g->random_noise(3);
  auto a = g->sample_layout(noise).z, b = g->sample_layout(noise).z;
  CHECK(a.equal(b));
  auto single = g->sample_layout(noise.slice(0, 1, 2)).z;
  CHECK(torch::allclose(single.flat(), a.slice(1).flat(), 1e-5, 1e-6));
  CHECK(torch::isfinite(a.flat()).all().item<bool>());
  CHECK_THROWS(g->generate(BlobLatent{a.spatial.slice(1, 0, 2), a.style, a.background}));
}

TEST_CASE("generator checkpoint round trip") {
  auto g = test::tiny_generator();
  auto path = test::temp_dir("gen") / "g.ckpt";
  save_generator(g, path);
  auto h = load_generator(path);
  torch::NoGradGuard ng;
  auto z = g->sample_layout(g->random_noise(2)).z;
  CHECK(torch::equal(g->generate(z), h->generate(z)));
}
