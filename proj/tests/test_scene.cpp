#include "doctest_torch.hpp"

#include <random>

#include "octet/dataset.hpp"
#include "octet/scene.hpp"

using namespace octet;
using namespace octet::scene;

namespace {

SceneSpec empty_spec(Marking left = Marking::none, Marking right = Marking::none) {
  SceneSpec s;
  s.lanes = {{left, Side::left}, {right, Side::right}};
  return s;
}

SceneObject car_at(double u, double v, double w = 0.12, double h = 0.2) {
  SceneObject o;
  o.category = Category::car;
  o.center = {u, v};
  o.size = {w, h};
  return o;
}

// Fraction of the object's rectangular footprint inside a region, counted on
// a raster over the footprint's bounding box (point-in-polygon on the corners).
double raster_overlap(const SceneObject& obj, const Rect& r, int n = 400) {
  auto c = footprint_corners(obj);
  double u0 = 1e9, u1 = -1e9, v0 = 1e9, v1 = -1e9;
  for (auto& p : c) {
    u0 = std::min(u0, p[0]), u1 = std::max(u1, p[0]);
    v0 = std::min(v0, p[1]), v1 = std::max(v1, p[1]);
  }
  auto inside = [&](double u, double v) {
    // convex polygon: same side of every edge (isotropic frame)
    int sign = 0;
    for (int i = 0; i < 4; ++i) {
      const auto& a = c[i];
      const auto& b = c[(i + 1) % 4];
      const double cr = ((b[0] - a[0]) * (v - a[1]) - (b[1] - a[1]) * (u - a[0])) * kWorldAspect;
      const int s = cr > 0 ? 1 : -1;
      if (sign == 0) sign = s;
      if (s != sign) return false;
    }
    return true;
  };
  int64_t in_obj = 0, in_both = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double u = u0 + (u1 - u0) * (i + 0.5) / n;
      const double v = v0 + (v1 - v0) * (j + 0.5) / n;
      if (!inside(u, v)) continue;
      ++in_obj;
      in_both += u >= r.u0 && u <= r.u1 && v >= r.v0 && v <= r.v1;
    }
  return in_obj ? static_cast<double>(in_both) / in_obj : 0.0;
}

}  // namespace

TEST_CASE("empty road with seed 0") {
  SceneGenConfig cfg;
  cfg.max_objects = 0;
  auto sc = generate_scene(0, cfg);
  CHECK(sc.spec.objects.empty());
  CHECK(sc.labels.can_forward);
  CHECK(sc.labels.can_stop);
  // can_right follows the sampled right marking
  CHECK(sc.labels.can_right == (sc.spec.marking(Side::right) != Marking::solid &&
                                sc.spec.marking(Side::right) != Marking::double_line));
}

TEST_CASE("empty road with no markings allows everything") {
  auto l = label_oracle(empty_spec());
  CHECK(l == SceneLabels{true, true, true, true});
}

TEST_CASE("solid or double left marking blocks left") {
  for (auto m : {Marking::solid, Marking::double_line}) {
    SceneGenConfig cfg;
    cfg.left_marking = m;
    for (uint64_t seed = 0; seed < 20; ++seed) CHECK_FALSE(generate_scene(seed, cfg).labels.can_left);
  }
  CHECK(label_oracle(empty_spec(Marking::dashed)).can_left);
}

TEST_CASE("generation is deterministic") {
  SceneGenConfig cfg;
  auto a = generate_scene(7, cfg), b = generate_scene(7, cfg);
  CHECK(a.spec == b.spec);
  CHECK(a.image == b.image);
  CHECK(a.mask == b.mask);
  CHECK(a.labels == b.labels);
}

TEST_CASE("car covering the right lane blocks right") {
  auto spec = empty_spec();
  auto car = car_at(0.8, 0.6);
  spec.objects.push_back(car);
  CHECK(raster_overlap(car, near_region(Side::right)) >= kObstructionFraction);
  CHECK_FALSE(label_oracle(spec).can_right);
}

TEST_CASE("obstruction agrees with a rasterized overlap") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  int checked = 0;
  for (int i = 0; i < 200; ++i) {
    auto car = car_at(U(rng), 0.3 + 0.7 * U(rng), 0.05 + 0.2 * U(rng), 0.05 + 0.3 * U(rng));
    car.rotation = U(rng) - 0.5;
    for (auto region : {near_region(Side::left), near_region(Side::right), near_ego_region()}) {
      const double r = raster_overlap(car, region, 200);
      if (std::abs(r - kObstructionFraction) < 0.01) continue;  // too close to call on a raster
      CHECK(obstructs(car, region) == (r >= kObstructionFraction));
      ++checked;
    }
  }
  CHECK(checked > 400);
}

TEST_CASE("segmentation masks") {
  const int H = 32, W = 64;
  auto empty = seg_oracle(empty_spec(), H, W);
  auto counts = empty.counts();
  CHECK(counts[static_cast<int>(SegClass::vehicle)] == 0);
  int64_t sum = 0;
  for (auto c : counts) sum += c;
  CHECK(sum == H * W);

  auto spec = empty_spec();
  spec.objects.push_back(car_at(0.5, 0.7));
  auto with_car = seg_oracle(spec, H, W).counts();
  CHECK(with_car[1] < counts[1]);
  int64_t sum2 = 0;
  for (auto c : with_car) sum2 += c;
  CHECK(sum2 == H * W);
}

TEST_CASE("biased labels only differ on right") {
  SceneGenConfig cfg;
  int differ = 0;
  for (uint64_t seed = 0; seed < 300; ++seed) {
    auto sc = generate_scene(seed, cfg);
    CHECK(sc.labels.can_forward == sc.biased_labels.can_forward);
    CHECK(sc.labels.can_left == sc.biased_labels.can_left);
    if (sc.labels.can_right != sc.biased_labels.can_right) {
      ++differ;
      CHECK(sc.labels.can_right);
    }
  }
  CHECK(differ > 0);
}

TEST_CASE("dataset export round trip") {
  SceneGenConfig cfg;
  cfg.height = 16;
  cfg.width = 32;
  auto d = build_dataset(5, 6, cfg);
  auto dir = std::filesystem::temp_directory_path() / "octet_ds_test";
  std::filesystem::remove_all(dir);
  export_dataset(d, cfg, dir);
  auto e = load_dataset(dir);
  REQUIRE(e.size() == 6);
  CHECK(torch::allclose(d.images, e.images, 0, 1.0 / 255 + 1e-6));
  CHECK(torch::equal(d.labels, e.labels));
  CHECK(torch::equal(d.masks, e.masks));
  std::filesystem::remove_all(dir);
}
