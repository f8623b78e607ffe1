#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "kil/geometry.hpp"
#include "kil/rng.hpp"

namespace kil::sim {

using geom::Mat3;
using geom::Pose;
using geom::Vec2;
using geom::Vec3;

using Action = Eigen::Matrix<double, 10, 1>;   // position(3) | rot6d(6) | grip
using Proprio = Eigen::Matrix<double, 7, 1>;   // position(3) | euler zyx(3) | opening

// Planar object footprint, either a disc or a convex polygon, in the object
// frame. Objects are rendered as a flat lamina at z = `height` above their
// base plane.
struct Footprint {
  enum class Kind { Disc, Polygon };
  Kind kind = Kind::Disc;
  double radius = 0.04;
  std::vector<Vec2> vertices;  // CCW, used when kind == Polygon

  bool contains(const Vec2& local_xy) const;
  void bounding_box(Vec2* lo, Vec2* hi) const;
  double circumradius() const;
};

struct ObjectTemplate {
  std::string category;
  std::string name;  // unique template id, e.g. "shoe_train_a"
  std::vector<Vec3> keypoint_offsets;  // 3..6 points, object frame
  Footprint footprint;
  int grasp_keypoint_index = 0;
  std::uint64_t appearance_seed = 0;   // shared across a category
  double instance_variant = 0.0;       // 0 = canonical appearance
  double height = 0.02;                // lamina height above object base

  void validate() const;  // throws "invalid-template"
};

using TemplatePtr = std::shared_ptr<const ObjectTemplate>;

// One category slot in a task: how many instances appear in the scene and
// whether the expert manipulates them.
struct CategoryRole {
  std::string category;
  int n_instances = 1;
  bool manipulated = true;
};

enum class TaskFamily { Place, Pour, PickDrop };

// Rectangular goal region. Either fixed in the world or bound to the pose of
// the first instance of `bind_category` (the pour target follows the cup).
struct TargetZone {
  Pose pose;
  Vec2 half_extent = Vec2(0.08, 0.06);
  std::string bind_category;  // empty = fixed zone
  double displacement_tolerance = 0.02;
};

struct TaskSpec {
  std::string name;
  TaskFamily family = TaskFamily::Place;
  std::vector<CategoryRole> categories;
  bool multi_instance = false;
  double orientation_range = geom::kPi / 6.0;  // yaw half-range around canonical
  double canonical_yaw = 0.0;
  TargetZone zone;
  double orientation_tolerance = geom::kPi;  // placement yaw tolerance
  bool require_grasp_orientation = false;
  double grasp_orientation_tolerance = geom::kPi / 6.0;
  double canonical_grasp_yaw_offset = 0.0;   // gripper yaw - object yaw at grasp
  int time_limit = 140;

  void validate() const;  // throws "invalid-task"
  // Total keypoint slots exposed to the policy (sum over category instances).
  int keypoint_slots(const struct TaskAssets& assets) const;
};

// Templates available for one category: 2+ training objects and 1+ held-out
// objects used by the unseen-object evaluation split.
struct CategoryAssets {
  std::string category;
  std::vector<TemplatePtr> training;
  std::vector<TemplatePtr> held_out;
};

struct TaskAssets {
  std::vector<CategoryAssets> categories;

  const CategoryAssets& find(const std::string& category) const;
  TemplatePtr find_template(const std::string& name) const;
};

struct ObjectInstance {
  TemplatePtr tmpl;
  Pose pose;
  bool attached = false;
  bool ever_grasped = false;
  // Relative yaw (gripper - object) recorded at the most recent attach.
  std::optional<double> grasp_relative_yaw;

  std::vector<Vec3> world_keypoints() const;
  Vec3 grasp_keypoint_world() const;
};

struct Distractor {
  Footprint footprint;
  Pose pose;
  std::uint64_t appearance_seed = 0;
};

struct SceneState {
  std::vector<ObjectInstance> objects;
  std::vector<Distractor> distractors;
  int background_id = 0;
  Pose gripper;
  double gripper_opening = 1.0;
  int time_step = 0;
  int attached_object = -1;          // index into objects, -1 = none
  Pose attach_transform;             // gripper -> object, valid while attached
  Pose zone_pose;                    // goal zone pose captured at sampling time

  void check_invariants() const;     // throws "invalid-scene"
};

// World constants. The workspace is a tabletop centered on the origin with
// the camera opposing the robot at roughly 45 degrees.
struct WorldConfig {
  Vec2 workspace_half = Vec2(0.40, 0.30);
  double table_height = 0.0;
  double gripper_z_max = 0.45;
  double grasp_radius = 0.015;
  Vec3 gripper_home = Vec3(0.0, -0.22, 0.20);
};

const WorldConfig& world_config();

// The single scene camera: opposes the robot at ~45 degrees inclination and
// sees the whole workspace at the default 160x120 resolution.
geom::CameraModel default_camera();

enum class Split { InDist, UnseenObj, SceneVar };

std::string split_name(Split s);
Split split_from_name(const std::string& s);

// Samples object poses uniformly (non-overlapping footprints, yaw within the
// task's orientation range), held-out templates for the unseen-object split,
// and distractors plus a non-training background for the scene-variation
// split. Pure function of (task, split, seed).
SceneState sample_initial_scene(const TaskSpec& task, const TaskAssets& assets,
                                Split split, std::uint64_t seed);

// Executes one action: the gripper teleports to the commanded pose (clamped
// to the workspace), the opening integrates the relative gripper command, and
// proximity attach/detach runs against free objects' grasp keypoints.
SceneState step(const SceneState& scene, const Action& action);

Proprio proprio_of(const SceneState& scene);
Action encode_action(const Pose& pose, double grip_command);
void decode_action(const Action& a, Pose* pose, double* grip_command);

struct TaskStatus {
  enum class Kind { Running, Success, Failure };
  Kind kind = Kind::Running;
  std::string failure_reason;

  bool terminal() const { return kind != Kind::Running; }
  bool success() const { return kind == Kind::Success; }
};

TaskStatus check_success(const TaskSpec& task, const SceneState& scene);

// Fraction of manipulated objects currently satisfying their goal predicate.
// Multi-instance tasks score 0.5 per handled object; single-object tasks are
// binary.
double completion_score(const TaskSpec& task, const SceneState& scene);

// Deterministic waypoint-following expert. Approach above the grasp keypoint,
// descend, close, lift, transit, then place / tilt / drop depending on the
// task family. Per-waypoint position jitter (sigma ~ 2 mm) gives trajectories
// non-degenerate variation. All randomness derives from `seed`.
class ScriptedExpert {
 public:
  ScriptedExpert(const TaskSpec& task, const SceneState& initial_scene,
                 std::uint64_t seed, double jitter_sigma = 0.002);

  // Next action for the given scene. Throws "expert-stuck" if no progress is
  // possible.
  Action act(const SceneState& scene) const;

  // Order in which object instances are handled (camera-nearest first).
  const std::vector<int>& handling_order() const { return handling_order_; }

  double max_step_translation() const { return max_step_translation_; }

 private:
  Vec3 waypoint_jitter(int object_index, int phase) const;
  int current_target(const SceneState& scene) const;

  TaskSpec task_;
  std::uint64_t seed_;
  double jitter_sigma_;
  double max_step_translation_ = 0.025;
  double max_step_rotation_ = 0.12;
  double grip_step_ = 0.34;
  std::vector<int> handling_order_;
};

struct DemoStep {
  SceneState scene;                 // state the observation was taken in
  std::vector<Vec3> keypoints;      // ground-truth world keypoints, slot order
  Proprio proprio;
  Action action;
};

struct Demonstration {
  int episode_id = 0;
  std::string task_name;
  std::vector<std::string> template_names;
  std::uint64_t seed = 0;
  std::vector<DemoStep> steps;

  void check_invariants() const;  // throws "invalid-demo"
};

// Ground-truth keypoints of every category instance, in policy slot order.
// For multi-instance tasks the instance order is fixed per episode to
// camera-distance at t = 0 (the order the expert handles them in).
std::vector<Vec3> ground_truth_keypoints(const TaskSpec& task,
                                         const SceneState& scene,
                                         const std::vector<int>& instance_order);

// Instance order used for keypoint slots: per category, instances sorted by
// camera distance in `reference_scene` (ties by index).
std::vector<int> slot_instance_order(const TaskSpec& task,
                                     const SceneState& reference_scene);

// Runs the expert on in-distribution scenes until n_demos successful episodes
// are collected. Throws "expert-broken" when the failure rate exceeds 20%.
std::vector<Demonstration> collect_demonstrations(const TaskSpec& task,
                                                  const TaskAssets& assets,
                                                  int n_demos,
                                                  std::uint64_t seed);

// Built-in desk-scale task presets (five single-object analogs plus the
// two-object variants) and their procedural template assets.
std::vector<std::string> builtin_task_names();
TaskSpec builtin_task(const std::string& name);
TaskAssets builtin_assets(const TaskSpec& task);

}  // namespace kil::sim
