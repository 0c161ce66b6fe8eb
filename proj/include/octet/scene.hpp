#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "octet/image.hpp"

/// Procedural toy road scenes with exact label and segmentation oracles.
///
/// World geometry (normalized image coordinates, u to the right, v down,
/// ego vehicle at the bottom edge looking up the image):
///
///   u in [0, 0.1)          left shoulder (grass)
///   u in [0.1, 0.3667)     left lane
///   u in [0.3667, 0.6333]  ego lane
///   u in (0.6333, 0.9]     right lane
///   u in (0.9, 1]          right shoulder
///
/// Lane markings sit on the two inner lane boundaries. The world has a fixed
/// 2:1 aspect; rotations are applied in that isotropic frame so a scene looks
/// the same at every raster size with the same aspect.
///
/// Label rule table (an object "obstructs" a region when at least
/// kObstructionFraction of its rectangular footprint lies inside it; the
/// near zone is v in [kNearZoneTop, 1]):
///
///   can_forward = false iff an object obstructs the near ego lane,
///                 or a car with its brake light on is centered in the ego lane
///   can_stop    = true always
///   can_left    = false iff an object obstructs the near left lane,
///                 or the left marking is solid or double
///   can_right   = false iff an object obstructs the near right lane,
///                 or the right marking is solid or double
///   biased can_right additionally = false iff a car obstructs the near left lane
///
/// Segmentation: cars are `vehicle`; barriers and shoulders are `background`;
/// the ego lane is `primary_lane`; an adjacent lane is `secondary_lane` when
/// the marking separating it from the ego lane is none or dashed, otherwise
/// `background`.
namespace octet::scene {

enum class Category { car, barrier };
enum class Marking { none, dashed, solid, double_line };
enum class Side { left, right };

enum class SegClass : uint8_t { background = 0, primary_lane = 1, secondary_lane = 2, vehicle = 3 };
inline constexpr int kNumSegClasses = 4;

inline constexpr double kWorldAspect = 2.0;
inline constexpr double kRoadLeft = 0.1;
inline constexpr double kRoadRight = 0.9;
inline constexpr double kLaneBoundaryLeft = kRoadLeft + (kRoadRight - kRoadLeft) / 3.0;
inline constexpr double kLaneBoundaryRight = kRoadLeft + 2.0 * (kRoadRight - kRoadLeft) / 3.0;
inline constexpr double kNearZoneTop = 0.45;
inline constexpr double kObstructionFraction = 0.2;

/// Axis-aligned rectangle in normalized image coordinates.
struct Rect {
  double u0, v0, u1, v1;
};

Rect near_region(Side side);
Rect near_ego_region();
Rect lane_region(Side side);  // full height

struct SceneObject {
  Category category = Category::car;
  std::array<double, 2> center{0.5, 0.5};  // normalized (u, v)
  std::array<double, 2> size{0.15, 0.3};   // normalized (width along u, height along v)
  double rotation = 0.0;                   // radians, isotropic world frame
  std::array<double, 3> color{0.8, 0.1, 0.1};
  bool brake_light = false;

  bool operator==(const SceneObject&) const = default;
};

struct LaneMarking {
  Marking marking = Marking::none;
  Side side = Side::left;

  bool operator==(const LaneMarking&) const = default;
};

struct SceneSpec {
  std::vector<SceneObject> objects;
  std::vector<LaneMarking> lanes;
  uint64_t rng_seed = 0;

  Marking marking(Side side) const;
  bool operator==(const SceneSpec&) const = default;
};

struct SceneLabels {
  bool can_forward = true;
  bool can_stop = true;
  bool can_left = true;
  bool can_right = true;

  std::array<bool, 4> as_array() const { return {can_forward, can_stop, can_left, can_right}; }
  bool operator==(const SceneLabels&) const = default;
};

/// Head names in model output order.
inline const std::array<std::string, 4> kHeadNames = {"forward", "stop", "left", "right"};
int head_index(const std::string& name);

struct SegMask {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> cls;

  SegMask() = default;
  SegMask(int h, int w) : height(h), width(w), cls(static_cast<size_t>(h) * w, 0) {}
  uint8_t at(int y, int x) const { return cls[static_cast<size_t>(y) * width + x]; }
  uint8_t& at(int y, int x) { return cls[static_cast<size_t>(y) * width + x]; }
  std::array<int64_t, kNumSegClasses> counts() const;
  bool operator==(const SegMask&) const = default;
};

struct SceneGenConfig {
  int height = 64;
  int width = 128;
  int max_objects = 8;                                 // K_scene
  double car_probability = 0.8;                        // otherwise barrier
  double brake_light_probability = 0.3;
  std::array<double, 4> marking_weights{0.3, 0.35, 0.2, 0.15};  // none, dashed, solid, double
  std::optional<Marking> left_marking;
  std::optional<Marking> right_marking;
  double label_noise = 0.0;  // per-label flip probability; 0 keeps the oracle exact

  void validate() const;
};

struct Scene {
  SceneSpec spec;
  Image image;
  SegMask mask;
  SceneLabels labels;         // unbiased rule table (plus optional noise)
  SceneLabels biased_labels;  // confounded `right` rule
};

Scene generate_scene(uint64_t seed, const SceneGenConfig& config);
SceneSpec sample_spec(uint64_t seed, const SceneGenConfig& config);

SceneLabels label_oracle(const SceneSpec& spec, bool biased = false);
SegMask seg_oracle(const SceneSpec& spec, int height, int width);
Image render_scene(const SceneSpec& spec, int height, int width);

/// Fraction of the object's rectangular footprint inside `region`, computed
/// by exact polygon clipping in the isotropic world frame.
double footprint_overlap(const SceneObject& obj, const Rect& region);
/// Footprint corners in normalized image coordinates (counter-clockwise).
std::array<std::array<double, 2>, 4> footprint_corners(const SceneObject& obj);
bool obstructs(const SceneObject& obj, const Rect& region);

/// True when (u, v) lies inside the rendered rounded-rectangle shape.
bool object_contains(const SceneObject& obj, double u, double v);

std::string to_string(Marking m);
Marking marking_from_string(const std::string& s);
std::string to_string(Category c);

nlohmann::json to_json(const SceneSpec& spec);
SceneSpec spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SceneLabels& labels);
nlohmann::json to_json(const SceneGenConfig& config);
SceneGenConfig scene_config_from_json(const nlohmann::json& j);

}  // namespace octet::scene
