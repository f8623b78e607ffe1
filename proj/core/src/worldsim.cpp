#include "kil/worldsim.hpp"

#include <algorithm>
#include <cmath>

namespace kil::sim {

namespace {

constexpr double kHoverHeight = 0.07;
constexpr double kTransitZ = 0.12;
constexpr double kPourZ = 0.16;
constexpr double kDropZ = 0.10;
constexpr double kPourTiltTarget = 1.92;  // ~110 deg, past horizontal

double clamp01(double x) { return std::clamp(x, 0.0, 1.0); }

Vec3 clamp_step(const Vec3& delta, double max_norm) {
  const double n = delta.norm();
  if (n <= max_norm || n == 0.0) return delta;
  return delta * (max_norm / n);
}

Mat3 rotate_towards(const Mat3& current, const Mat3& target, double max_angle) {
  const Vec3 w = geom::rot_log(current.transpose() * target);
  const double angle = w.norm();
  if (angle <= max_angle) return target;
  return current * geom::rot_exp(w * (max_angle / angle));
}

// Object tilt relative to upright: z-component of the rotated z-axis.
bool tilted_beyond_horizontal(const Mat3& r) { return r(2, 2) < 0.0; }

}  // namespace

bool Footprint::contains(const Vec2& p) const {
  if (kind == Kind::Disc) return p.norm() <= radius;
  const int n = static_cast<int>(vertices.size());
  for (int i = 0; i < n; ++i) {
    const Vec2& a = vertices[i];
    const Vec2& b = vertices[(i + 1) % n];
    const Vec2 e = b - a;
    const Vec2 d = p - a;
    if (e.x() * d.y() - e.y() * d.x() < 0.0) return false;  // CCW convex hull
  }
  return true;
}

void Footprint::bounding_box(Vec2* lo, Vec2* hi) const {
  if (kind == Kind::Disc) {
    *lo = Vec2(-radius, -radius);
    *hi = Vec2(radius, radius);
    return;
  }
  *lo = Vec2(1e9, 1e9);
  *hi = Vec2(-1e9, -1e9);
  for (const Vec2& v : vertices) {
    *lo = lo->cwiseMin(v);
    *hi = hi->cwiseMax(v);
  }
}

double Footprint::circumradius() const {
  if (kind == Kind::Disc) return radius;
  double r = 0.0;
  for (const Vec2& v : vertices) r = std::max(r, v.norm());
  return r;
}

void ObjectTemplate::validate() const {
  require(keypoint_offsets.size() >= 3 && keypoint_offsets.size() <= 6,
          "invalid-template", name + ": keypoint count must be in [3, 6]");
  require(grasp_keypoint_index >= 0 &&
              grasp_keypoint_index < static_cast<int>(keypoint_offsets.size()),
          "invalid-template", name + ": grasp keypoint index out of range");
  require(footprint.kind == Footprint::Kind::Disc || footprint.vertices.size() >= 3,
          "invalid-template", name + ": polygon footprint needs >= 3 vertices");
}

void TaskSpec::validate() const {
  require(time_limit > 0, "invalid-task", name + ": time limit must be positive");
  require(!categories.empty(), "invalid-task", name + ": no categories");
  for (const auto& role : categories) {
    require(role.n_instances >= 1, "invalid-task",
            name + ": instance count must be >= 1");
  }
}

const CategoryAssets& TaskAssets::find(const std::string& category) const {
  for (const auto& c : categories) {
    if (c.category == category) return c;
  }
  fail("unknown-category", category);
}

TemplatePtr TaskAssets::find_template(const std::string& name) const {
  for (const auto& c : categories) {
    for (const auto& t : c.training) {
      if (t->name == name) return t;
    }
    for (const auto& t : c.held_out) {
      if (t->name == name) return t;
    }
  }
  fail("unknown-template", name);
}

int TaskSpec::keypoint_slots(const TaskAssets& assets) const {
  int total = 0;
  for (const auto& role : categories) {
    const auto& cat = assets.find(role.category);
    total += role.n_instances *
             static_cast<int>(cat.training.front()->keypoint_offsets.size());
  }
  return total;
}

std::vector<Vec3> ObjectInstance::world_keypoints() const {
  std::vector<Vec3> out;
  out.reserve(tmpl->keypoint_offsets.size());
  for (const Vec3& off : tmpl->keypoint_offsets) out.push_back(pose.apply(off));
  return out;
}

Vec3 ObjectInstance::grasp_keypoint_world() const {
  return pose.apply(tmpl->keypoint_offsets[tmpl->grasp_keypoint_index]);
}

void SceneState::check_invariants() const {
  int attached_count = 0;
  for (const auto& obj : objects) {
    if (obj.attached) ++attached_count;
    if (!obj.attached) {
      require(std::abs(obj.pose.position.z() - world_config().table_height) < 1e-9,
              "invalid-scene", "free object not on the table");
    }
    require(obj.pose.rotation_is_orthonormal(1e-8), "invalid-scene",
            "object rotation not orthonormal");
  }
  require(attached_count <= 1, "invalid-scene", "multiple attached objects");
  require(attached_count == (attached_object >= 0 ? 1 : 0), "invalid-scene",
          "attachment bookkeeping out of sync");
}

const WorldConfig& world_config() {
  static const WorldConfig cfg;
  return cfg;
}

std::string split_name(Split s) {
  switch (s) {
    case Split::InDist: return "in_dist";
    case Split::UnseenObj: return "unseen_obj";
    case Split::SceneVar: return "scene_var";
  }
  return "in_dist";
}

Split split_from_name(const std::string& s) {
  if (s == "in_dist") return Split::InDist;
  if (s == "unseen_obj") return Split::UnseenObj;
  if (s == "scene_var") return Split::SceneVar;
  fail("unknown-split", s);
}

namespace {

bool zone_blocks(const TaskSpec& task, const Vec2& xy, double margin) {
  if (!task.zone.bind_category.empty()) return false;  // zone follows an object
  const Vec3 local =
      task.zone.pose.inverse().apply(Vec3(xy.x(), xy.y(), task.zone.pose.position.z()));
  return std::abs(local.x()) <= task.zone.half_extent.x() + margin &&
         std::abs(local.y()) <= task.zone.half_extent.y() + margin;
}

}  // namespace

SceneState sample_initial_scene(const TaskSpec& task, const TaskAssets& assets,
                                Split split, std::uint64_t seed) {
  task.validate();
  const WorldConfig& wc = world_config();
  Rng rng(mix64(seed, hash_str(task.name), static_cast<std::uint64_t>(split)));

  SceneState scene;
  scene.gripper.position = wc.gripper_home;
  scene.gripper_opening = 1.0;
  scene.background_id = 0;

  struct Placed {
    Vec2 xy;
    double radius;
  };
  std::vector<Placed> placed;

  auto try_place = [&](double circumradius, double keep_out_margin) -> std::optional<Vec2> {
    for (int attempt = 0; attempt < 1000; ++attempt) {
      const double margin = circumradius + 0.02;
      const Vec2 xy(rng.uniform(-wc.workspace_half.x() + margin,
                                wc.workspace_half.x() - margin),
                    rng.uniform(-wc.workspace_half.y() + margin,
                                wc.workspace_half.y() - margin));
      if (zone_blocks(task, xy, circumradius + keep_out_margin)) continue;
      bool clear = true;
      for (const Placed& p : placed) {
        if ((p.xy - xy).norm() < p.radius + circumradius + 0.01) {
          clear = false;
          break;
        }
      }
      if (!clear) continue;
      placed.push_back({xy, circumradius});
      return xy;
    }
    return std::nullopt;
  };

  for (const auto& role : task.categories) {
    const CategoryAssets& cat = assets.find(role.category);
    const auto& pool = (split == Split::UnseenObj) ? cat.held_out : cat.training;
    require(!cat.training.empty() && cat.training.size() >= 2, "invalid-assets",
            role.category + ": need at least 2 training templates");
    require(!cat.held_out.empty(), "invalid-assets",
            role.category + ": need at least 1 held-out template");
    for (int i = 0; i < role.n_instances; ++i) {
      ObjectInstance inst;
      inst.tmpl = pool[rng.uniform_int(static_cast<int>(pool.size()))];
      const auto xy = try_place(inst.tmpl->footprint.circumradius(), 0.02);
      if (!xy) fail("scene-too-crowded", "could not place " + role.category);
      const double yaw = geom::wrap_angle(
          task.canonical_yaw + rng.uniform(-task.orientation_range, task.orientation_range));
      inst.pose.position = Vec3(xy->x(), xy->y(), wc.table_height);
      inst.pose.rotation = geom::rot_z(yaw);
      scene.objects.push_back(std::move(inst));
    }
  }

  if (split == Split::SceneVar) {
    const int n_distractors = 1 + rng.uniform_int(3);
    for (int i = 0; i < n_distractors; ++i) {
      Distractor d;
      d.footprint.kind = Footprint::Kind::Disc;
      d.footprint.radius = rng.uniform(0.025, 0.055);
      const auto xy = try_place(d.footprint.radius, 0.0);
      if (!xy) fail("scene-too-crowded", "could not place distractor");
      d.pose.position = Vec3(xy->x(), xy->y(), wc.table_height);
      d.pose.rotation = geom::rot_z(rng.uniform(-geom::kPi, geom::kPi));
      d.appearance_seed = rng.next_u64();
      scene.distractors.push_back(std::move(d));
    }
    scene.background_id = 1 + rng.uniform_int(7);  // id 0 is the training background
  }

  if (!task.zone.bind_category.empty()) {
    for (const auto& obj : scene.objects) {
      if (obj.tmpl->category == task.zone.bind_category) {
        scene.zone_pose = obj.pose;
        break;
      }
    }
  } else {
    scene.zone_pose = task.zone.pose;
  }

  scene.check_invariants();
  return scene;
}

Proprio proprio_of(const SceneState& scene) {
  Proprio p;
  const geom::EulerZyx e = geom::rotmat_to_euler(scene.gripper.rotation);
  p << scene.gripper.position.x(), scene.gripper.position.y(),
      scene.gripper.position.z(), e.roll, e.pitch, e.yaw, scene.gripper_opening;
  return p;
}

Action encode_action(const Pose& pose, double grip_command) {
  Action a;
  a.head<3>() = pose.position;
  a.segment<6>(3) = geom::rotmat_to_6d(pose.rotation);
  a(9) = grip_command;
  return a;
}

void decode_action(const Action& a, Pose* pose, double* grip_command) {
  pose->position = a.head<3>();
  pose->rotation = geom::sixd_to_rotmat(a.segment<6>(3));
  *grip_command = a(9);
}

SceneState step(const SceneState& scene, const Action& action) {
  if (!action.allFinite()) fail("invalid-action", "non-finite action");
  const WorldConfig& wc = world_config();

  Pose commanded;
  double grip = 0.0;
  decode_action(action, &commanded, &grip);

  SceneState next = scene;
  next.gripper.rotation = commanded.rotation;
  next.gripper.position.x() =
      std::clamp(commanded.position.x(), -wc.workspace_half.x(), wc.workspace_half.x());
  next.gripper.position.y() =
      std::clamp(commanded.position.y(), -wc.workspace_half.y(), wc.workspace_half.y());
  next.gripper.position.z() =
      std::clamp(commanded.position.z(), wc.table_height, wc.gripper_z_max);
  next.gripper_opening = clamp01(scene.gripper_opening + grip);

  if (next.attached_object >= 0) {
    ObjectInstance& held = next.objects[next.attached_object];
    held.pose = next.gripper * next.attach_transform;
    if (next.gripper_opening > 0.5) {
      // Release: the object settles upright on the table at its current yaw.
      held.attached = false;
      held.pose.position.z() = wc.table_height;
      held.pose.rotation = geom::rot_z(geom::yaw_of(held.pose.rotation));
      next.attached_object = -1;
    }
  } else if (next.gripper_opening < 0.5) {
    int best = -1;
    double best_dist = wc.grasp_radius;
    for (int i = 0; i < static_cast<int>(next.objects.size()); ++i) {
      const ObjectInstance& obj = next.objects[i];
      if (obj.attached) continue;
      const double d = (obj.grasp_keypoint_world() - next.gripper.position).norm();
      if (d <= best_dist) {
        best_dist = d;
        best = i;
      }
    }
    if (best >= 0) {
      ObjectInstance& obj = next.objects[best];
      obj.attached = true;
      obj.ever_grasped = true;
      obj.grasp_relative_yaw = geom::wrap_angle(geom::yaw_of(next.gripper.rotation) -
                                               geom::yaw_of(obj.pose.rotation));
      next.attached_object = best;
      next.attach_transform = next.gripper.inverse() * obj.pose;
    }
  }

  next.time_step = scene.time_step + 1;
  return next;
}

namespace {

bool footprint_inside_zone(const ObjectInstance& obj, const Pose& zone_pose,
                           const Vec2& half_extent) {
  const Pose rel = zone_pose.inverse() * obj.pose;
  auto inside = [&](const Vec2& local) {
    const Vec3 p = rel.apply(Vec3(local.x(), local.y(), 0.0));
    return std::abs(p.x()) <= half_extent.x() && std::abs(p.y()) <= half_extent.y();
  };
  const Footprint& fp = obj.tmpl->footprint;
  if (fp.kind == Footprint::Kind::Polygon) {
    return std::all_of(fp.vertices.begin(), fp.vertices.end(), inside);
  }
  // Disc: center inside the rectangle shrunk by the radius.
  const Vec3 c = rel.apply(Vec3::Zero());
  return std::abs(c.x()) <= half_extent.x() - fp.radius &&
         std::abs(c.y()) <= half_extent.y() - fp.radius;
}

bool center_inside_zone(const ObjectInstance& obj, const Pose& zone_pose,
                        const Vec2& half_extent) {
  const Vec3 local = zone_pose.inverse().apply(obj.pose.position);
  return std::abs(local.x()) <= half_extent.x() &&
         std::abs(local.y()) <= half_extent.y();
}

bool grasp_orientation_ok(const TaskSpec& task, const ObjectInstance& obj) {
  if (!task.require_grasp_orientation) return true;
  if (!obj.grasp_relative_yaw.has_value()) return false;
  return std::abs(geom::wrap_angle(*obj.grasp_relative_yaw -
                                   task.canonical_grasp_yaw_offset)) <=
         task.grasp_orientation_tolerance;
}

// Per-object goal predicate for Place / PickDrop families.
bool object_handled(const TaskSpec& task, const SceneState& scene,
                    const ObjectInstance& obj) {
  if (obj.attached || !obj.ever_grasped) return false;
  if (!grasp_orientation_ok(task, obj)) return false;
  switch (task.family) {
    case TaskFamily::Place: {
      if (!footprint_inside_zone(obj, scene.zone_pose, task.zone.half_extent)) {
        return false;
      }
      if (task.orientation_tolerance < geom::kPi) {
        const double dyaw = geom::wrap_angle(geom::yaw_of(obj.pose.rotation) -
                                             geom::yaw_of(scene.zone_pose.rotation));
        if (std::abs(dyaw) > task.orientation_tolerance) return false;
      }
      return true;
    }
    case TaskFamily::PickDrop:
      return center_inside_zone(obj, scene.zone_pose, task.zone.half_extent);
    case TaskFamily::Pour:
      return false;  // pour success is a whole-task predicate
  }
  return false;
}

Pose current_zone_pose(const TaskSpec& task, const SceneState& scene) {
  if (!task.zone.bind_category.empty()) {
    for (const auto& obj : scene.objects) {
      if (obj.tmpl->category == task.zone.bind_category) return obj.pose;
    }
  }
  return task.zone.pose;
}

bool manipulated_category(const TaskSpec& task, const std::string& category) {
  for (const auto& role : task.categories) {
    if (role.category == category) return role.manipulated;
  }
  return false;
}

}  // namespace

TaskStatus check_success(const TaskSpec& task, const SceneState& scene) {
  TaskStatus status;
  const WorldConfig& wc = world_config();

  // Target zone displacement (a bound zone moves if its anchor object moved).
  const Pose zone_now = current_zone_pose(task, scene);
  if ((zone_now.position - scene.zone_pose.position).norm() >
      task.zone.displacement_tolerance) {
    status.kind = TaskStatus::Kind::Failure;
    status.failure_reason = "target-displaced";
    return status;
  }

  bool all_done = true;
  for (const auto& obj : scene.objects) {
    if (!manipulated_category(task, obj.tmpl->category)) continue;
    if (task.family == TaskFamily::Pour) {
      const bool done = obj.attached && tilted_beyond_horizontal(obj.pose.rotation) &&
                        center_inside_zone(obj, scene.zone_pose, task.zone.half_extent) &&
                        grasp_orientation_ok(task, obj);
      all_done = all_done && done;
      if (!done && !obj.attached && obj.ever_grasped) {
        status.kind = TaskStatus::Kind::Failure;
        status.failure_reason = "dropped";
        return status;
      }
    } else {
      all_done = all_done && object_handled(task, scene, obj);
    }
    const Vec3& p = obj.pose.position;
    if (std::abs(p.x()) > wc.workspace_half.x() + 0.02 ||
        std::abs(p.y()) > wc.workspace_half.y() + 0.02) {
      status.kind = TaskStatus::Kind::Failure;
      status.failure_reason = "out-of-bounds";
      return status;
    }
  }

  if (all_done) {
    status.kind = TaskStatus::Kind::Success;
    return status;
  }
  if (scene.time_step >= task.time_limit) {
    status.kind = TaskStatus::Kind::Failure;
    status.failure_reason = "timeout";
    return status;
  }
  return status;
}

double completion_score(const TaskSpec& task, const SceneState& scene) {
  if (task.family == TaskFamily::Pour) {
    return check_success(task, scene).success() ? 1.0 : 0.0;
  }
  int total = 0, done = 0;
  for (const auto& obj : scene.objects) {
    if (!manipulated_category(task, obj.tmpl->category)) continue;
    ++total;
    if (object_handled(task, scene, obj)) ++done;
  }
  if (total == 0) return 0.0;
  return static_cast<double>(done) / static_cast<double>(total);
}

std::vector<int> slot_instance_order(const TaskSpec& task,
                                     const SceneState& reference_scene) {
  const geom::CameraModel cam = default_camera();
  std::vector<int> order;
  for (const auto& role : task.categories) {
    std::vector<std::pair<double, int>> ranked;
    for (int i = 0; i < static_cast<int>(reference_scene.objects.size()); ++i) {
      const auto& obj = reference_scene.objects[i];
      if (obj.tmpl->category != role.category) continue;
      ranked.emplace_back(
          (obj.pose.position - cam.extrinsics.position).norm(), i);
    }
    std::sort(ranked.begin(), ranked.end());
    for (const auto& [dist, idx] : ranked) order.push_back(idx);
  }
  return order;
}

std::vector<Vec3> ground_truth_keypoints(const TaskSpec& task,
                                         const SceneState& scene,
                                         const std::vector<int>& instance_order) {
  (void)task;
  std::vector<Vec3> out;
  for (int idx : instance_order) {
    const auto kps = scene.objects[idx].world_keypoints();
    out.insert(out.end(), kps.begin(), kps.end());
  }
  return out;
}

ScriptedExpert::ScriptedExpert(const TaskSpec& task, const SceneState& initial_scene,
                               std::uint64_t seed, double jitter_sigma)
    : task_(task), seed_(seed), jitter_sigma_(jitter_sigma) {
  for (int idx : slot_instance_order(task, initial_scene)) {
    if (manipulated_category(task, initial_scene.objects[idx].tmpl->category)) {
      handling_order_.push_back(idx);
    }
  }
  require(!handling_order_.empty(), "expert-stuck", "no manipulable object");
}

Vec3 ScriptedExpert::waypoint_jitter(int object_index, int phase) const {
  Rng rng(mix64(seed_, 0x77AABB00ULL + static_cast<std::uint64_t>(object_index),
                static_cast<std::uint64_t>(phase)));
  const double cap = 2.0 * jitter_sigma_;
  return Vec3(std::clamp(rng.normal(jitter_sigma_), -cap, cap),
              std::clamp(rng.normal(jitter_sigma_), -cap, cap),
              std::clamp(rng.normal(jitter_sigma_), -cap, cap));
}

int ScriptedExpert::current_target(const SceneState& scene) const {
  if (scene.attached_object >= 0) return scene.attached_object;
  for (int idx : handling_order_) {
    const auto& obj = scene.objects[idx];
    if (task_.family == TaskFamily::Pour) return idx;
    if (!object_handled(task_, scene, obj)) return idx;
  }
  return -1;
}

Action ScriptedExpert::act(const SceneState& scene) const {
  enum Phase {
    kApproach = 0,
    kDescend = 1,
    kClose = 2,
    kLift = 3,
    kTransit = 4,
    kFinalDescend = 5,
    kOpen = 6,
    kTilt = 7,
  };

  const int target = current_target(scene);
  if (target < 0) {
    // Nothing left to do: hold position.
    return encode_action(scene.gripper, 0.0);
  }
  const ObjectInstance& obj = scene.objects[target];
  const Vec3 grip_pos = scene.gripper.position;

  Vec3 wp = grip_pos;
  Mat3 wp_rot = scene.gripper.rotation;
  double grip_cmd = 0.0;

  // The index of the target within the handling order spaces multi-instance
  // placements apart inside the shared zone.
  int order_slot = 0;
  for (int i = 0; i < static_cast<int>(handling_order_.size()); ++i) {
    if (handling_order_[i] == target) order_slot = i;
  }

  if (scene.attached_object == target) {
    const Pose zone = current_zone_pose(task_, scene);
    Vec3 goal_xy = zone.position;
    if (task_.multi_instance) {
      const double spread = (order_slot == 0) ? -0.035 : 0.035;
      goal_xy += zone.rotation * Vec3(spread, 0.0, 0.0);
    }
    const double xy_err = (Vec2(goal_xy.x(), goal_xy.y()) -
                           Vec2(grip_pos.x(), grip_pos.y()))
                              .norm();
    const double travel_z = task_.family == TaskFamily::Pour
                                ? kPourZ
                                : (task_.family == TaskFamily::PickDrop ? kDropZ
                                                                        : kTransitZ);

    // Carried-object yaw correction for orientation-constrained placement.
    double gripper_yaw_target = geom::yaw_of(scene.gripper.rotation);
    if (task_.family == TaskFamily::Place &&
        task_.orientation_tolerance < geom::kPi) {
      const double attach_yaw = geom::yaw_of(scene.attach_transform.rotation);
      gripper_yaw_target =
          geom::wrap_angle(geom::yaw_of(zone.rotation) - attach_yaw);
    }

    if (xy_err > 0.012) {
      wp_rot = geom::rot_z(gripper_yaw_target);
      if (grip_pos.z() < travel_z - 0.005) {
        wp = Vec3(grip_pos.x(), grip_pos.y(), travel_z) +
             waypoint_jitter(target, kLift);
      } else {
        wp = Vec3(goal_xy.x(), goal_xy.y(), travel_z) +
             waypoint_jitter(target, kTransit);
      }
    } else {
      switch (task_.family) {
        case TaskFamily::Pour: {
          wp = Vec3(goal_xy.x(), goal_xy.y(), kPourZ);
          wp_rot = geom::rot_z(geom::yaw_of(scene.gripper.rotation)) *
                   geom::rot_y(kPourTiltTarget);
          break;
        }
        case TaskFamily::PickDrop: {
          wp = Vec3(goal_xy.x(), goal_xy.y(), kDropZ);
          grip_cmd = grip_step_;
          break;
        }
        case TaskFamily::Place: {
          wp_rot = geom::rot_z(gripper_yaw_target);
          const double place_grip_z =
              0.002 - scene.attach_transform.position.z();
          const double yaw_err = std::abs(geom::wrap_angle(
              gripper_yaw_target - geom::yaw_of(scene.gripper.rotation)));
          if (grip_pos.z() > place_grip_z + 0.004 || yaw_err > 0.05) {
            wp = Vec3(goal_xy.x(), goal_xy.y(), place_grip_z) +
                 waypoint_jitter(target, kFinalDescend);
            wp.z() = std::max(wp.z(), place_grip_z);
          } else {
            wp = grip_pos;
            grip_cmd = grip_step_;
          }
          break;
        }
      }
    }
  } else {
    // Grasping phase for a free target object.
    const Vec3 kp = obj.grasp_keypoint_world();
    const double approach_yaw =
        geom::wrap_angle(geom::yaw_of(obj.pose.rotation) +
                         task_.canonical_grasp_yaw_offset);
    wp_rot = geom::rot_z(approach_yaw);
    const double yaw_err = std::abs(geom::wrap_angle(
        approach_yaw - geom::yaw_of(scene.gripper.rotation)));
    const double xy_err =
        (Vec2(kp.x(), kp.y()) - Vec2(grip_pos.x(), grip_pos.y())).norm();
    const double dist3 = (kp - grip_pos).norm();

    if (dist3 <= 0.006 && yaw_err <= 0.08) {
      grip_cmd = -grip_step_;  // close in place until the grasp latches
    } else if (xy_err <= 0.006 && yaw_err <= 0.08) {
      wp = kp + waypoint_jitter(target, kDescend);
      wp.z() = std::max(wp.z(), 0.006);
      grip_cmd = std::min(grip_step_, 1.0 - scene.gripper_opening);
    } else {
      wp = kp + Vec3(0, 0, kHoverHeight) + waypoint_jitter(target, kApproach);
      grip_cmd = std::min(grip_step_, 1.0 - scene.gripper_opening);
    }
  }

  Pose next;
  next.position = grip_pos + clamp_step(wp - grip_pos, max_step_translation_);
  next.rotation = rotate_towards(scene.gripper.rotation, wp_rot, max_step_rotation_);
  return encode_action(next, grip_cmd);
}

void Demonstration::check_invariants() const {
  require(steps.size() >= 2, "invalid-demo", "demonstration needs >= 2 steps");
  for (const auto& s : steps) {
    for (const auto& kp : s.keypoints) {
      require(kp.allFinite(), "invalid-demo", "non-finite keypoint");
    }
    require(s.action.allFinite(), "invalid-demo", "non-finite action");
  }
}

std::vector<Demonstration> collect_demonstrations(const TaskSpec& task,
                                                  const TaskAssets& assets,
                                                  int n_demos,
                                                  std::uint64_t seed) {
  require(n_demos >= 1, "invalid-argument", "n must be >= 1");
  std::vector<Demonstration> demos;
  int attempts = 0, failures = 0;

  while (static_cast<int>(demos.size()) < n_demos) {
    const std::uint64_t episode_seed = mix64(seed, 0xDE305EULL, attempts);
    ++attempts;
    SceneState scene = sample_initial_scene(task, assets, Split::InDist, episode_seed);
    ScriptedExpert expert(task, scene, mix64(episode_seed, 0xE857ULL));
    const std::vector<int> order = slot_instance_order(task, scene);

    Demonstration demo;
    demo.episode_id = static_cast<int>(demos.size());
    demo.task_name = task.name;
    demo.seed = episode_seed;
    for (const auto& obj : scene.objects) demo.template_names.push_back(obj.tmpl->name);

    bool success = false;
    while (true) {
      const Action action = expert.act(scene);
      DemoStep step_record;
      step_record.scene = scene;
      step_record.keypoints = ground_truth_keypoints(task, scene, order);
      step_record.proprio = proprio_of(scene);
      step_record.action = action;
      demo.steps.push_back(std::move(step_record));

      scene = step(scene, action);
      const TaskStatus status = check_success(task, scene);
      if (status.success()) {
        success = true;
        break;
      }
      if (status.terminal()) break;
    }

    if (success) {
      demo.check_invariants();
      demos.push_back(std::move(demo));
    } else {
      ++failures;
      const int total = attempts;
      if (total >= 10 && failures > total / 5) {
        fail("expert-broken",
             "expert failure rate exceeds 20% on " + task.name);
      }
    }
  }
  return demos;
}

geom::CameraModel default_camera() {
  geom::CameraModel cam;
  cam.fx = cam.fy = 185.0;
  cam.cx = 80.0;
  cam.cy = 60.0;
  cam.width = 160;
  cam.height = 120;
  // Opposing the robot at ~45 degrees inclination, looking at the workspace
  // center. Camera convention: x right, y down, z forward.
  cam.extrinsics.position = Vec3(0.0, 0.85, 0.85);
  Mat3 r;
  const double s = 1.0 / std::sqrt(2.0);
  r.col(0) = Vec3(-1.0, 0.0, 0.0);
  r.col(1) = Vec3(0.0, s, -s);
  r.col(2) = Vec3(0.0, -s, -s);
  cam.extrinsics.rotation = r;
  return cam;
}

namespace {

TemplatePtr make_template(const std::string& category, const std::string& name,
                          std::uint64_t appearance_seed, double variant,
                          double scale, Footprint base_fp,
                          std::vector<Vec3> base_kps, int grasp_index,
                          double height) {
  auto t = std::make_shared<ObjectTemplate>();
  t->category = category;
  t->name = name;
  t->appearance_seed = appearance_seed;
  t->instance_variant = variant;
  t->height = height;
  t->grasp_keypoint_index = grasp_index;
  t->footprint = std::move(base_fp);
  if (t->footprint.kind == Footprint::Kind::Disc) {
    t->footprint.radius *= scale;
  } else {
    for (auto& v : t->footprint.vertices) v *= scale;
  }
  for (auto& kp : base_kps) {
    t->keypoint_offsets.push_back(Vec3(kp.x() * scale, kp.y() * scale, height));
  }
  t->validate();
  return t;
}

Footprint hull(std::vector<Vec2> verts) {
  Footprint fp;
  fp.kind = Footprint::Kind::Polygon;
  fp.vertices = std::move(verts);
  return fp;
}

Footprint disc(double r) {
  Footprint fp;
  fp.kind = Footprint::Kind::Disc;
  fp.radius = r;
  return fp;
}

CategoryAssets make_category(const std::string& category,
                             std::uint64_t appearance_seed, const Footprint& fp,
                             const std::vector<Vec3>& kps, int grasp_index,
                             double height) {
  CategoryAssets cat;
  cat.category = category;
  cat.training.push_back(make_template(category, category + "_train_a",
                                       appearance_seed, 0.0, 1.0, fp, kps,
                                       grasp_index, height));
  cat.training.push_back(make_template(category, category + "_train_b",
                                       appearance_seed, 0.08, 1.07, fp, kps,
                                       grasp_index, height));
  cat.held_out.push_back(make_template(category, category + "_eval_c",
                                       appearance_seed, 0.30, 0.93, fp, kps,
                                       grasp_index, height));
  cat.held_out.push_back(make_template(category, category + "_eval_d",
                                       appearance_seed, 0.42, 1.12, fp, kps,
                                       grasp_index, height));
  return cat;
}

CategoryAssets category_assets(const std::string& category) {
  if (category == "shoe") {
    return make_category(
        "shoe", 11,
        hull({{0.055, 0.0}, {0.04, 0.022}, {-0.04, 0.022}, {-0.055, 0.0},
              {-0.04, -0.022}, {0.04, -0.022}}),
        {{0.042, 0.0, 0}, {-0.042, 0.0, 0}, {0.0, 0.013, 0}, {0.0, -0.013, 0}},
        0, 0.020);
  }
  if (category == "mug") {
    return make_category(
        "mug", 22, disc(0.038),
        {{0.027, 0.0, 0}, {-0.027, 0.0, 0}, {0.0, 0.027, 0}, {0.0, -0.027, 0}},
        0, 0.022);
  }
  if (category == "bottle") {
    return make_category(
        "bottle", 33, disc(0.028),
        {{0.017, 0.0, 0}, {-0.0085, 0.0147, 0}, {-0.0085, -0.0147, 0}}, 0,
        0.026);
  }
  if (category == "cup") {
    return make_category(
        "cup", 44, disc(0.034),
        {{0.022, 0.0, 0}, {-0.011, 0.019, 0}, {-0.011, -0.019, 0}}, 0, 0.020);
  }
  if (category == "pen") {
    return make_category(
        "pen", 55,
        hull({{0.06, -0.009}, {0.06, 0.009}, {-0.06, 0.009}, {-0.06, -0.009}}),
        {{0.048, 0.0, 0}, {0.0, 0.0, 0}, {-0.048, 0.0, 0}}, 1, 0.012);
  }
  if (category == "mouse") {
    return make_category(
        "mouse", 66,
        hull({{0.032, 0.0}, {0.022, 0.02}, {-0.022, 0.02}, {-0.032, 0.0},
              {-0.022, -0.02}, {0.022, -0.02}}),
        {{0.022, 0.0, 0}, {-0.022, 0.0, 0}, {0.0, 0.012, 0}, {0.0, -0.012, 0},
         {0.011, 0.0, 0}},
        4, 0.016);
  }
  fail("unknown-category", category);
}

TargetZone fixed_zone(double x, double y, double hx, double hy) {
  TargetZone z;
  z.pose.position = Vec3(x, y, 0.0);
  z.half_extent = Vec2(hx, hy);
  return z;
}

}  // namespace

std::vector<std::string> builtin_task_names() {
  return {"place_shoe", "place_mug",      "pour_bottle",    "pick_pen",
          "place_mouse", "pick_pen_orient", "place_two_shoes", "pick_two_pens"};
}

TaskSpec builtin_task(const std::string& name) {
  TaskSpec t;
  t.name = name;
  if (name == "place_shoe") {
    t.family = TaskFamily::Place;
    t.categories = {{"shoe", 1, true}};
    t.zone = fixed_zone(0.24, 0.16, 0.10, 0.08);
    t.orientation_tolerance = geom::kPi / 2.0;
  } else if (name == "place_mug") {
    t.family = TaskFamily::Place;
    t.categories = {{"mug", 1, true}};
    t.zone = fixed_zone(0.24, 0.16, 0.10, 0.08);
  } else if (name == "pour_bottle") {
    t.family = TaskFamily::Pour;
    t.categories = {{"bottle", 1, true}, {"cup", 1, false}};
    t.zone.bind_category = "cup";
    t.zone.half_extent = Vec2(0.055, 0.055);
    t.time_limit = 170;
  } else if (name == "pick_pen") {
    t.family = TaskFamily::PickDrop;
    t.categories = {{"pen", 1, true}};
    t.zone = fixed_zone(0.24, -0.14, 0.07, 0.07);
  } else if (name == "place_mouse") {
    t.family = TaskFamily::Place;
    t.categories = {{"mouse", 1, true}};
    t.zone = fixed_zone(0.22, 0.0, 0.09, 0.07);
    t.orientation_tolerance = geom::kPi / 2.0;
  } else if (name == "pick_pen_orient") {
    t.family = TaskFamily::PickDrop;
    t.categories = {{"pen", 1, true}};
    t.zone = fixed_zone(0.24, -0.14, 0.07, 0.07);
    t.require_grasp_orientation = true;
  } else if (name == "place_two_shoes") {
    t.family = TaskFamily::Place;
    t.categories = {{"shoe", 2, true}};
    t.multi_instance = true;
    t.zone = fixed_zone(0.24, 0.16, 0.11, 0.09);
    t.orientation_tolerance = geom::kPi / 2.0;
    t.time_limit = 280;
  } else if (name == "pick_two_pens") {
    t.family = TaskFamily::PickDrop;
    t.categories = {{"pen", 2, true}};
    t.multi_instance = true;
    t.zone = fixed_zone(0.24, -0.14, 0.08, 0.08);
    t.time_limit = 280;
  } else {
    fail("unknown-task", name);
  }
  t.validate();
  return t;
}

TaskAssets builtin_assets(const TaskSpec& task) {
  TaskAssets assets;
  for (const auto& role : task.categories) {
    assets.categories.push_back(category_assets(role.category));
  }
  return assets;
}

}  // namespace kil::sim
