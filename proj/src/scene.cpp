#include "octet/scene.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

namespace octet::scene {

namespace {

using Vec2 = std::array<double, 2>;

constexpr double kMarkingHalfWidth = 0.011;
constexpr double kDoubleOffset = 0.014;
constexpr double kDoubleHalfWidth = 0.006;
constexpr double kDashPeriod = 0.25;
constexpr double kDashOn = 0.13;

constexpr std::array<double, 3> kGrass{0.25, 0.52, 0.22};
constexpr std::array<double, 3> kRoad{0.42, 0.42, 0.45};
constexpr std::array<double, 3> kWhite{0.95, 0.95, 0.95};
constexpr std::array<double, 3> kYellow{0.95, 0.82, 0.2};
constexpr std::array<double, 3> kWindshield{0.14, 0.16, 0.22};
constexpr std::array<double, 3> kBrakeOn{1.0, 0.05, 0.05};
constexpr std::array<double, 3> kBrakeOff{0.35, 0.08, 0.08};
constexpr std::array<double, 3> kBarrierOrange{1.0, 0.55, 0.05};

constexpr std::array<std::array<double, 3>, 7> kCarPalette{{
    {0.80, 0.12, 0.12},
    {0.15, 0.30, 0.85},
    {0.92, 0.92, 0.92},
    {0.10, 0.10, 0.12},
    {0.65, 0.66, 0.70},
    {0.95, 0.80, 0.10},
    {0.10, 0.60, 0.30},
}};

struct LocalPoint {
  double x, y;    // offsets in world units, object frame
  double hw, hh;  // half extents in world units
};

LocalPoint to_local(const SceneObject& obj, double u, double v) {
  const double dx = (u - obj.center[0]) * kWorldAspect;
  const double dy = v - obj.center[1];
  const double c = std::cos(obj.rotation);
  const double s = std::sin(obj.rotation);
  return {c * dx + s * dy, -s * dx + c * dy, 0.5 * obj.size[0] * kWorldAspect, 0.5 * obj.size[1]};
}

bool rounded_rect_contains(const LocalPoint& p) {
  const double ax = std::abs(p.x);
  const double ay = std::abs(p.y);
  if (ax > p.hw || ay > p.hh) return false;
  const double r = 0.25 * std::min(p.hw, p.hh);
  const double qx = ax - (p.hw - r);
  const double qy = ay - (p.hh - r);
  if (qx > 0.0 && qy > 0.0) return qx * qx + qy * qy <= r * r;
  return true;
}

std::array<double, 3> object_color(const SceneObject& obj, const LocalPoint& p) {
  const double nx = p.x / p.hw;
  const double ny = p.y / p.hh;  // negative = front (up the image)
  if (obj.category == Category::barrier) {
    const int stripe = static_cast<int>(std::floor((nx + 1.0) * 3.0));
    return (stripe % 2 == 0) ? kBarrierOrange : kWhite;
  }
  if (ny > -0.55 && ny < -0.25 && std::abs(nx) < 0.8) return kWindshield;
  if (ny > 0.72 && std::abs(nx) > 0.45) return obj.brake_light ? kBrakeOn : kBrakeOff;
  return obj.color;
}

std::optional<std::array<double, 3>> marking_color(Marking m, double boundary, double u, double v) {
  switch (m) {
    case Marking::none:
      return std::nullopt;
    case Marking::solid:
      if (std::abs(u - boundary) <= kMarkingHalfWidth) return kWhite;
      return std::nullopt;
    case Marking::dashed:
      if (std::abs(u - boundary) <= kMarkingHalfWidth && std::fmod(v, kDashPeriod) < kDashOn) return kWhite;
      return std::nullopt;
    case Marking::double_line:
      if (std::abs(u - (boundary - kDoubleOffset)) <= kDoubleHalfWidth ||
          std::abs(u - (boundary + kDoubleOffset)) <= kDoubleHalfWidth)
        return kYellow;
      return std::nullopt;
  }
  return std::nullopt;
}

std::array<double, 3> shade(const SceneSpec& spec, Marking left, Marking right, double u, double v) {
  for (auto it = spec.objects.rbegin(); it != spec.objects.rend(); ++it) {
    const auto p = to_local(*it, u, v);
    if (rounded_rect_contains(p)) return object_color(*it, p);
  }
  if (u < kRoadLeft || u > kRoadRight) return kGrass;
  if (auto c = marking_color(left, kLaneBoundaryLeft, u, v)) return *c;
  if (auto c = marking_color(right, kLaneBoundaryRight, u, v)) return *c;
  return kRoad;
}

bool blocks_lane_change(Marking m) { return m == Marking::solid || m == Marking::double_line; }

double polygon_area(const std::vector<Vec2>& poly) {
  double a = 0.0;
  for (size_t i = 0; i < poly.size(); ++i) {
    const auto& p = poly[i];
    const auto& q = poly[(i + 1) % poly.size()];
    a += p[0] * q[1] - q[0] * p[1];
  }
  return 0.5 * std::abs(a);
}

// Sutherland-Hodgman clip against one half-plane: keep points with sign * (coord - bound) <= 0.
std::vector<Vec2> clip_half_plane(const std::vector<Vec2>& poly, int axis, double bound, double sign) {
  std::vector<Vec2> out;
  if (poly.empty()) return out;
  auto inside = [&](const Vec2& p) { return sign * (p[axis] - bound) <= 0.0; };
  for (size_t i = 0; i < poly.size(); ++i) {
    const Vec2& cur = poly[i];
    const Vec2& prev = poly[(i + poly.size() - 1) % poly.size()];
    const bool ci = inside(cur);
    const bool pi = inside(prev);
    if (ci != pi) {
      const double t = (bound - prev[axis]) / (cur[axis] - prev[axis]);
      out.push_back({prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])});
    }
    if (ci) out.push_back(cur);
  }
  return out;
}

bool boxes_overlap(const SceneObject& a, const SceneObject& b, double margin) {
  auto extent = [](const SceneObject& o) {
    auto cs = footprint_corners(o);
    double u0 = 1e9, u1 = -1e9, v0 = 1e9, v1 = -1e9;
    for (const auto& c : cs) {
      u0 = std::min(u0, c[0]);
      u1 = std::max(u1, c[0]);
      v0 = std::min(v0, c[1]);
      v1 = std::max(v1, c[1]);
    }
    return Rect{u0, v0, u1, v1};
  };
  const Rect ra = extent(a);
  const Rect rb = extent(b);
  return !(ra.u1 + margin < rb.u0 || rb.u1 + margin < ra.u0 || ra.v1 + margin < rb.v0 || rb.v1 + margin < ra.v0);
}

Marking sample_marking(std::mt19937_64& rng, const SceneGenConfig& cfg) {
  std::discrete_distribution<int> d(cfg.marking_weights.begin(), cfg.marking_weights.end());
  return static_cast<Marking>(d(rng));
}

SceneObject sample_object(std::mt19937_64& rng, const SceneGenConfig& cfg) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double a, double b) { return a + (b - a) * unit(rng); };
  std::normal_distribution<double> normal(0.0, 1.0);

  SceneObject obj;
  if (unit(rng) < cfg.car_probability) {
    obj.category = Category::car;
    const int lane = static_cast<int>(std::min(2.0, std::floor(unit(rng) * 3.0)));
    const double lane_width = (kRoadRight - kRoadLeft) / 3.0;
    obj.center = {kRoadLeft + (lane + 0.5) * lane_width + 0.015 * normal(rng), uniform(0.08, 0.92)};
    obj.size = {uniform(0.11, 0.15), uniform(0.26, 0.38)};
    obj.rotation = 0.08 * normal(rng);
    const auto& base = kCarPalette[static_cast<size_t>(unit(rng) * kCarPalette.size()) % kCarPalette.size()];
    for (int c = 0; c < 3; ++c) obj.color[c] = std::clamp(base[c] + uniform(-0.05, 0.05), 0.0, 1.0);
    obj.brake_light = unit(rng) < cfg.brake_light_probability;
  } else {
    obj.category = Category::barrier;
    obj.center = {uniform(0.15, 0.85), uniform(0.1, 0.9)};
    obj.size = {uniform(0.12, 0.2), uniform(0.07, 0.11)};
    obj.rotation = 0.05 * normal(rng);
    obj.color = kBarrierOrange;
    obj.brake_light = false;
  }
  return obj;
}

}  // namespace

Rect near_region(Side side) {
  return side == Side::left ? Rect{kRoadLeft, kNearZoneTop, kLaneBoundaryLeft, 1.0}
                            : Rect{kLaneBoundaryRight, kNearZoneTop, kRoadRight, 1.0};
}

Rect near_ego_region() { return {kLaneBoundaryLeft, kNearZoneTop, kLaneBoundaryRight, 1.0}; }

Rect lane_region(Side side) {
  return side == Side::left ? Rect{kRoadLeft, 0.0, kLaneBoundaryLeft, 1.0}
                            : Rect{kLaneBoundaryRight, 0.0, kRoadRight, 1.0};
}

Marking SceneSpec::marking(Side side) const {
  for (const auto& l : lanes)
    if (l.side == side) return l.marking;
  return Marking::none;
}

int head_index(const std::string& name) {
  for (size_t i = 0; i < kHeadNames.size(); ++i)
    if (kHeadNames[i] == name) return static_cast<int>(i);
  throw std::invalid_argument("unknown head '" + name + "'");
}

std::array<int64_t, kNumSegClasses> SegMask::counts() const {
  std::array<int64_t, kNumSegClasses> n{};
  for (auto c : cls) ++n[c];
  return n;
}

void SceneGenConfig::validate() const {
  if (height <= 0 || width <= 0) throw std::invalid_argument("scene config: image dims must be positive");
  if (max_objects < 0) throw std::invalid_argument("scene config: max_objects must be >= 0");
  if (label_noise < 0.0 || label_noise > 1.0) throw std::invalid_argument("scene config: label_noise outside [0, 1]");
  double total = 0.0;
  for (double w : marking_weights) {
    if (w < 0.0) throw std::invalid_argument("scene config: negative marking weight");
    total += w;
  }
  if (total <= 0.0) throw std::invalid_argument("scene config: marking weights sum to zero");
}

std::array<std::array<double, 2>, 4> footprint_corners(const SceneObject& obj) {
  const double hw = 0.5 * obj.size[0] * kWorldAspect;
  const double hh = 0.5 * obj.size[1];
  const double c = std::cos(obj.rotation);
  const double s = std::sin(obj.rotation);
  const std::array<Vec2, 4> local{{{-hw, -hh}, {hw, -hh}, {hw, hh}, {-hw, hh}}};
  std::array<Vec2, 4> out{};
  for (size_t i = 0; i < 4; ++i) {
    // inverse of to_local's rotation
    const double wx = c * local[i][0] - s * local[i][1];
    const double wy = s * local[i][0] + c * local[i][1];
    out[i] = {obj.center[0] + wx / kWorldAspect, obj.center[1] + wy};
  }
  return out;
}

double footprint_overlap(const SceneObject& obj, const Rect& region) {
  std::vector<Vec2> poly;
  for (const auto& c : footprint_corners(obj)) poly.push_back({c[0] * kWorldAspect, c[1]});
  poly = clip_half_plane(poly, 0, region.u0 * kWorldAspect, -1.0);
  poly = clip_half_plane(poly, 0, region.u1 * kWorldAspect, 1.0);
  poly = clip_half_plane(poly, 1, region.v0, -1.0);
  poly = clip_half_plane(poly, 1, region.v1, 1.0);
  const double full = obj.size[0] * kWorldAspect * obj.size[1];
  if (poly.size() < 3 || full <= 0.0) return 0.0;
  return polygon_area(poly) / full;
}

bool obstructs(const SceneObject& obj, const Rect& region) {
  return footprint_overlap(obj, region) >= kObstructionFraction;
}

bool object_contains(const SceneObject& obj, double u, double v) {
  return rounded_rect_contains(to_local(obj, u, v));
}

SceneLabels label_oracle(const SceneSpec& spec, bool biased) {
  SceneLabels l;
  const Marking left = spec.marking(Side::left);
  const Marking right = spec.marking(Side::right);
  l.can_left = !blocks_lane_change(left);
  l.can_right = !blocks_lane_change(right);
  for (const auto& obj : spec.objects) {
    if (obstructs(obj, near_ego_region())) l.can_forward = false;
    if (obj.category == Category::car && obj.brake_light && obj.center[0] >= kLaneBoundaryLeft &&
        obj.center[0] <= kLaneBoundaryRight)
      l.can_forward = false;
    if (obstructs(obj, near_region(Side::left))) {
      l.can_left = false;
      if (biased && obj.category == Category::car) l.can_right = false;
    }
    if (obstructs(obj, near_region(Side::right))) l.can_right = false;
  }
  return l;
}

SegMask seg_oracle(const SceneSpec& spec, int height, int width) {
  SegMask mask(height, width);
  const bool left_open = !blocks_lane_change(spec.marking(Side::left));
  const bool right_open = !blocks_lane_change(spec.marking(Side::right));
  for (int y = 0; y < height; ++y) {
    const double v = (y + 0.5) / height;
    for (int x = 0; x < width; ++x) {
      const double u = (x + 0.5) / width;
      SegClass c = SegClass::background;
      bool covered = false;
      for (auto it = spec.objects.rbegin(); it != spec.objects.rend(); ++it) {
        if (object_contains(*it, u, v)) {
          c = it->category == Category::car ? SegClass::vehicle : SegClass::background;
          covered = true;
          break;
        }
      }
      if (!covered) {
        if (u >= kLaneBoundaryLeft && u <= kLaneBoundaryRight)
          c = SegClass::primary_lane;
        else if (u >= kRoadLeft && u < kLaneBoundaryLeft)
          c = left_open ? SegClass::secondary_lane : SegClass::background;
        else if (u > kLaneBoundaryRight && u <= kRoadRight)
          c = right_open ? SegClass::secondary_lane : SegClass::background;
      }
      mask.at(y, x) = static_cast<uint8_t>(c);
    }
  }
  return mask;
}

Image render_scene(const SceneSpec& spec, int height, int width) {
  Image img(height, width);
  const Marking left = spec.marking(Side::left);
  const Marking right = spec.marking(Side::right);
  constexpr std::array<double, 2> offsets{0.25, 0.75};
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      std::array<double, 3> acc{0.0, 0.0, 0.0};
      for (double oy : offsets)
        for (double ox : offsets) {
          const auto c = shade(spec, left, right, (x + ox) / width, (y + oy) / height);
          for (int k = 0; k < 3; ++k) acc[k] += c[k];
        }
      for (int k = 0; k < 3; ++k) img.at(k, y, x) = static_cast<float>(acc[k] / 4.0);
    }
  }
  return img;
}

SceneSpec sample_spec(uint64_t seed, const SceneGenConfig& config) {
  config.validate();
  std::mt19937_64 rng(seed);
  SceneSpec spec;
  spec.rng_seed = seed;
  const Marking left = config.left_marking ? *config.left_marking : sample_marking(rng, config);
  const Marking right = config.right_marking ? *config.right_marking : sample_marking(rng, config);
  spec.lanes = {{left, Side::left}, {right, Side::right}};
  std::uniform_int_distribution<int> count_dist(0, config.max_objects);
  const int count = count_dist(rng);
  for (int i = 0; i < count; ++i) {
    for (int attempt = 0; attempt < 20; ++attempt) {
      auto obj = sample_object(rng, config);
      const bool clash = std::any_of(spec.objects.begin(), spec.objects.end(),
                                     [&](const SceneObject& o) { return boxes_overlap(o, obj, 0.01); });
      if (!clash) {
        spec.objects.push_back(obj);
        break;
      }
    }
  }
  return spec;
}

Scene generate_scene(uint64_t seed, const SceneGenConfig& config) {
  Scene s;
  s.spec = sample_spec(seed, config);
  s.image = render_scene(s.spec, config.height, config.width);
  s.mask = seg_oracle(s.spec, config.height, config.width);
  s.labels = label_oracle(s.spec, false);
  s.biased_labels = label_oracle(s.spec, true);
  if (config.label_noise > 0.0) {
    std::mt19937_64 noise_rng(seed ^ 0x9e3779b97f4a7c15ULL);
    std::bernoulli_distribution flip(config.label_noise);
    for (SceneLabels* l : {&s.labels, &s.biased_labels}) {
      if (flip(noise_rng)) l->can_forward = !l->can_forward;
      if (flip(noise_rng)) l->can_stop = !l->can_stop;
      if (flip(noise_rng)) l->can_left = !l->can_left;
      if (flip(noise_rng)) l->can_right = !l->can_right;
    }
  }
  return s;
}

std::string to_string(Marking m) {
  switch (m) {
    case Marking::none: return "none";
    case Marking::dashed: return "dashed";
    case Marking::solid: return "solid";
    case Marking::double_line: return "double";
  }
  return "none";
}

Marking marking_from_string(const std::string& s) {
  if (s == "none") return Marking::none;
  if (s == "dashed") return Marking::dashed;
  if (s == "solid") return Marking::solid;
  if (s == "double") return Marking::double_line;
  throw std::invalid_argument("unknown marking '" + s + "'");
}

std::string to_string(Category c) { return c == Category::car ? "car" : "barrier"; }

nlohmann::json to_json(const SceneSpec& spec) {
  nlohmann::json objs = nlohmann::json::array();
  for (const auto& o : spec.objects) {
    objs.push_back({{"category", to_string(o.category)},
                    {"center", o.center},
                    {"size", o.size},
                    {"rotation", o.rotation},
                    {"color", o.color},
                    {"brake_light", o.brake_light}});
  }
  nlohmann::json lanes = nlohmann::json::array();
  for (const auto& l : spec.lanes)
    lanes.push_back({{"marking", to_string(l.marking)}, {"side", l.side == Side::left ? "left" : "right"}});
  return {{"objects", objs}, {"lanes", lanes}, {"rng_seed", spec.rng_seed}};
}

SceneSpec spec_from_json(const nlohmann::json& j) {
  SceneSpec spec;
  spec.rng_seed = j.at("rng_seed").get<uint64_t>();
  for (const auto& o : j.at("objects")) {
    SceneObject obj;
    obj.category = o.at("category").get<std::string>() == "car" ? Category::car : Category::barrier;
    obj.center = o.at("center").get<std::array<double, 2>>();
    obj.size = o.at("size").get<std::array<double, 2>>();
    obj.rotation = o.at("rotation").get<double>();
    obj.color = o.at("color").get<std::array<double, 3>>();
    obj.brake_light = o.at("brake_light").get<bool>();
    spec.objects.push_back(obj);
  }
  for (const auto& l : j.at("lanes")) {
    spec.lanes.push_back({marking_from_string(l.at("marking").get<std::string>()),
                          l.at("side").get<std::string>() == "left" ? Side::left : Side::right});
  }
  return spec;
}

nlohmann::json to_json(const SceneLabels& l) {
  return {{"forward", l.can_forward}, {"stop", l.can_stop}, {"left", l.can_left}, {"right", l.can_right}};
}

nlohmann::json to_json(const SceneGenConfig& c) {
  nlohmann::json j{{"height", c.height},
                   {"width", c.width},
                   {"max_objects", c.max_objects},
                   {"car_probability", c.car_probability},
                   {"brake_light_probability", c.brake_light_probability},
                   {"marking_weights", c.marking_weights},
                   {"label_noise", c.label_noise}};
  if (c.left_marking) j["left_marking"] = to_string(*c.left_marking);
  if (c.right_marking) j["right_marking"] = to_string(*c.right_marking);
  return j;
}

SceneGenConfig scene_config_from_json(const nlohmann::json& j) {
  SceneGenConfig c;
  c.height = j.value("height", c.height);
  c.width = j.value("width", c.width);
  c.max_objects = j.value("max_objects", c.max_objects);
  c.car_probability = j.value("car_probability", c.car_probability);
  c.brake_light_probability = j.value("brake_light_probability", c.brake_light_probability);
  if (j.contains("marking_weights")) c.marking_weights = j.at("marking_weights").get<std::array<double, 4>>();
  c.label_noise = j.value("label_noise", c.label_noise);
  if (j.contains("left_marking")) c.left_marking = marking_from_string(j.at("left_marking").get<std::string>());
  if (j.contains("right_marking")) c.right_marking = marking_from_string(j.at("right_marking").get<std::string>());
  c.validate();
  return c;
}

}  // namespace octet::scene
