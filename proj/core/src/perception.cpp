#include "kil/perception.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>

namespace kil::percep {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kDistractorHeight = 0.015;
constexpr double kReacquireRadius = 10.0;  // pixels

void fill_gaussian(std::uint64_t seed, Eigen::Ref<Eigen::VectorXd> out) {
  std::uint64_t state = seed;
  const int n = static_cast<int>(out.size());
  for (int i = 0; i < n; i += 2) {
    double u1 = static_cast<double>(splitmix64(state) >> 11) * 0x1.0p-53;
    if (u1 < 1e-300) u1 = 1e-300;
    const double u2 = static_cast<double>(splitmix64(state) >> 11) * 0x1.0p-53;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * geom::kPi * u2;
    out[i] = r * std::cos(a);
    if (i + 1 < n) out[i + 1] = r * std::sin(a);
  }
}

}  // namespace

void PerceptionConfig::validate() const {
  auto rate_ok = [](double r) { return r >= 0.0 && r <= 1.0; };
  require(descriptor_dim >= 4, "invalid-perception-config",
          "descriptor_dim must be >= 4");
  require(noise_sigma >= 0.0 && detector_confidence_noise >= 0.0 &&
              tracker_drift_sigma >= 0.0,
          "invalid-perception-config", "sigmas must be >= 0");
  require(rate_ok(detector_fp_rate) && rate_ok(detector_fn_rate) &&
              rate_ok(tracker_snap_prob),
          "invalid-perception-config", "rates must lie in [0, 1]");
  require(rotation_sensitivity >= 0.0 && rotation_sensitivity <= 1.0,
          "invalid-perception-config", "rotation_sensitivity must lie in [0, 1]");
  require(width > 0 && height > 0, "invalid-perception-config",
          "resolution must be positive");
  require(cell_size > 0.0 && background_cell_px > 0.0,
          "invalid-perception-config", "cell sizes must be positive");
}

std::uint64_t DescriptorSynth::surface_hash(const SurfaceKey& key) {
  return mix64(static_cast<std::uint64_t>(key.space) ^ 0x5AFE5AFEULL,
               key.category, key.appearance_seed, key.variant_bits);
}

DescriptorSynth::SurfaceKey DescriptorSynth::object_key(const sim::ObjectTemplate& t) {
  SurfaceKey k;
  k.space = 0;
  k.category = hash_str(t.category);
  k.appearance_seed = t.appearance_seed;
  k.variant_bits = std::bit_cast<std::uint64_t>(t.instance_variant);
  return k;
}

DescriptorSynth::SurfaceKey DescriptorSynth::distractor_key(const sim::Distractor& d) {
  SurfaceKey k;
  k.space = 1;
  k.category = 0;
  k.appearance_seed = d.appearance_seed;
  k.variant_bits = 0;
  return k;
}

DescriptorSynth::SurfaceKey DescriptorSynth::background_key(int background_id) {
  SurfaceKey k;
  k.space = 2;
  k.category = static_cast<std::uint64_t>(background_id);
  k.appearance_seed = 0xBAC59D0ULL;
  k.variant_bits = 0;
  return k;
}

void DescriptorSynth::prefill(const SurfaceKey& key, const Vec2& lo, const Vec2& hi,
                              double cell_size) {
  const std::uint64_t base_stream =
      mix64(static_cast<std::uint64_t>(key.space) ^ 0x5AFE5AFEULL, key.category,
            key.appearance_seed);
  const std::uint64_t full = surface_hash(key);
  const double variant = std::bit_cast<double>(key.variant_bits);

  const std::int64_t cx0 = static_cast<std::int64_t>(std::floor(lo.x() / cell_size)) - 2;
  const std::int64_t cy0 = static_cast<std::int64_t>(std::floor(lo.y() / cell_size)) - 2;
  const std::int64_t cx1 = static_cast<std::int64_t>(std::ceil(hi.x() / cell_size)) + 2;
  const std::int64_t cy1 = static_cast<std::int64_t>(std::ceil(hi.y() / cell_size)) + 2;

  const int base_dim = cfg_.descriptor_dim - 2;
  Eigen::VectorXd shared(base_dim), variant_dir(base_dim);
  for (std::int64_t cy = cy0; cy <= cy1; ++cy) {
    for (std::int64_t cx = cx0; cx <= cx1; ++cx) {
      CellKey ck{full, cx, cy};
      if (cells_.contains(ck)) continue;
      Cell cell;
      // Category-shared component: identical for every template of the
      // category, which is what makes cross-instance matching possible.
      fill_gaussian(mix64(base_stream, 0xBA5EULL, static_cast<std::uint64_t>(cx),
                          static_cast<std::uint64_t>(cy)),
                    shared);
      shared.normalize();
      if (variant > 0.0) {
        fill_gaussian(mix64(base_stream ^ key.variant_bits, 0x7A41A47ULL,
                            static_cast<std::uint64_t>(cx),
                            static_cast<std::uint64_t>(cy)),
                      variant_dir);
        variant_dir.normalize();
        cell.base = (1.0 - variant) * shared + variant * variant_dir;
        cell.base.normalize();
      } else {
        cell.base = shared;
      }
      // Yaw-pair phase is shared across variants too.
      std::uint64_t phi_state =
          mix64(base_stream, 0xFA5EULL, static_cast<std::uint64_t>(cx),
                static_cast<std::uint64_t>(cy));
      const double phi =
          2.0 * geom::kPi * (static_cast<double>(splitmix64(phi_state) >> 11) * 0x1.0p-53);
      cell.cphi = std::cos(phi);
      cell.sphi = std::sin(phi);
      cells_.emplace(ck, std::move(cell));
    }
  }
}

const DescriptorSynth::Cell& DescriptorSynth::cell(const CellKey& key) const {
  auto it = cells_.find(key);
  require(it != cells_.end(), "internal", "descriptor cell not prefilled");
  return it->second;
}

void DescriptorSynth::point_descriptor(const SurfaceKey& key, const Vec2& local_xy,
                                       double yaw, double cell_size,
                                       Eigen::Ref<Eigen::RowVectorXd> out) const {
  const std::uint64_t full = surface_hash(key);
  const double gx = local_xy.x() / cell_size - 0.5;
  const double gy = local_xy.y() / cell_size - 0.5;
  const std::int64_t cx = static_cast<std::int64_t>(std::floor(gx));
  const std::int64_t cy = static_cast<std::int64_t>(std::floor(gy));
  const double fx = gx - static_cast<double>(cx);
  const double fy = gy - static_cast<double>(cy);

  const double w00 = (1 - fx) * (1 - fy), w10 = fx * (1 - fy);
  const double w01 = (1 - fx) * fy, w11 = fx * fy;
  const Cell& c00 = cell({full, cx, cy});
  const Cell& c10 = cell({full, cx + 1, cy});
  const Cell& c01 = cell({full, cx, cy + 1});
  const Cell& c11 = cell({full, cx + 1, cy + 1});

  const int base_dim = cfg_.descriptor_dim - 2;
  Eigen::VectorXd base = w00 * c00.base + w10 * c10.base + w01 * c01.base +
                         w11 * c11.base;
  double norm = base.norm();
  if (norm < 1e-12) {
    base.setZero();
    base[0] = 1.0;
  } else {
    base /= norm;
  }

  double pc = w00 * c00.cphi + w10 * c10.cphi + w01 * c01.cphi + w11 * c11.cphi;
  double ps = w00 * c00.sphi + w10 * c10.sphi + w01 * c01.sphi + w11 * c11.sphi;
  const double pn = std::sqrt(pc * pc + ps * ps);
  if (pn < 1e-12) {
    pc = 1.0;
    ps = 0.0;
  } else {
    pc /= pn;
    ps /= pn;
  }
  const double cy_ = std::cos(yaw), sy_ = std::sin(yaw);
  const double kappa = cfg_.rotation_sensitivity;
  const double sk = std::sqrt(kappa), sb = std::sqrt(1.0 - kappa);
  out[0] = sk * (cy_ * pc - sy_ * ps);
  out[1] = sk * (sy_ * pc + cy_ * ps);
  out.tail(base_dim) = sb * base.transpose();
}

namespace {

struct Renderable {
  int id = -1;
  const sim::Footprint* footprint = nullptr;
  geom::Pose pose, inv_pose;
  Vec3 plane_point, plane_normal;
  DescriptorSynth::SurfaceKey key;
  double yaw = 0.0;
  double height = 0.0;
  double cell_size = 0.004;
};

}  // namespace

DescriptorField render_descriptor_field(const SceneState& scene,
                                        const CameraModel& camera,
                                        const PerceptionConfig& cfg,
                                        std::uint64_t seed) {
  cfg.validate();
  DescriptorField field;
  field.width = cfg.width;
  field.height = cfg.height;
  field.dim = cfg.descriptor_dim;
  const int n_px = cfg.width * cfg.height;
  field.descriptors.resize(n_px, cfg.descriptor_dim);
  field.depth = Eigen::VectorXd::Constant(n_px, kInf);
  field.visibility.assign(n_px, -1);

  DescriptorSynth synth(cfg);

  std::vector<Renderable> items;
  for (int i = 0; i < static_cast<int>(scene.objects.size()); ++i) {
    const auto& obj = scene.objects[i];
    Renderable r;
    r.id = i;
    r.footprint = &obj.tmpl->footprint;
    r.pose = obj.pose;
    r.inv_pose = obj.pose.inverse();
    r.plane_point = obj.pose.apply(Vec3(0, 0, obj.tmpl->height));
    r.plane_normal = obj.pose.rotation.col(2);
    r.key = DescriptorSynth::object_key(*obj.tmpl);
    r.yaw = geom::yaw_of(obj.pose.rotation);
    r.height = obj.tmpl->height;
    r.cell_size = cfg.cell_size;
    items.push_back(r);
  }
  for (int j = 0; j < static_cast<int>(scene.distractors.size()); ++j) {
    const auto& d = scene.distractors[j];
    Renderable r;
    r.id = kDistractorIdBase + j;
    r.footprint = &d.footprint;
    r.pose = d.pose;
    r.inv_pose = d.pose.inverse();
    r.plane_point = d.pose.apply(Vec3(0, 0, kDistractorHeight));
    r.plane_normal = d.pose.rotation.col(2);
    r.key = DescriptorSynth::distractor_key(d);
    r.yaw = geom::yaw_of(d.pose.rotation);
    r.height = kDistractorHeight;
    r.cell_size = cfg.cell_size;
    items.push_back(r);
  }

  for (const auto& r : items) {
    Vec2 lo, hi;
    r.footprint->bounding_box(&lo, &hi);
    synth.prefill(r.key, lo, hi, r.cell_size);
  }
  const auto bg_key = DescriptorSynth::background_key(scene.background_id);
  synth.prefill(bg_key, Vec2(0, 0),
                Vec2(static_cast<double>(cfg.width), static_cast<double>(cfg.height)),
                cfg.background_cell_px);

  const Vec3 cam_pos = camera.extrinsics.position;
  const geom::Mat3 cam_rot = camera.extrinsics.rotation;
  const int n_items = static_cast<int>(items.size());
  std::vector<int> hits(n_items, 0), wins(n_items, 0);

#pragma omp parallel
  {
    std::vector<int> local_hits(n_items, 0), local_wins(n_items, 0);
    Eigen::RowVectorXd desc(cfg.descriptor_dim), leak(cfg.descriptor_dim);
#pragma omp for schedule(static)
    for (int iy = 0; iy < cfg.height; ++iy) {
      for (int ix = 0; ix < cfg.width; ++ix) {
        const int pix = iy * cfg.width + ix;
        const Vec3 dir_cam((ix + 0.5 - camera.cx) / camera.fx,
                           (iy + 0.5 - camera.cy) / camera.fy, 1.0);
        const Vec3 dir = cam_rot * dir_cam;

        int best = -1, second = -1;
        double best_t = kInf, second_t = kInf;
        Vec2 best_local = Vec2::Zero(), second_local = Vec2::Zero();
        for (int k = 0; k < n_items; ++k) {
          const Renderable& r = items[k];
          const double denom = dir.dot(r.plane_normal);
          if (std::abs(denom) < 1e-12) continue;
          const double t = (r.plane_point - cam_pos).dot(r.plane_normal) / denom;
          if (t <= 0.05) continue;
          const Vec3 local = r.inv_pose.apply(cam_pos + t * dir);
          if (!r.footprint->contains(Vec2(local.x(), local.y()))) continue;
          ++local_hits[k];
          if (t < best_t) {
            second = best;
            second_t = best_t;
            second_local = best_local;
            best = k;
            best_t = t;
            best_local = Vec2(local.x(), local.y());
          } else if (t < second_t) {
            second = k;
            second_t = t;
            second_local = Vec2(local.x(), local.y());
          }
        }

        if (best >= 0) {
          ++local_wins[best];
          const Renderable& r = items[best];
          synth.point_descriptor(r.key, best_local, r.yaw, r.cell_size, desc);
          // Leak mode: a distractor occluding an object lets a fraction of
          // the object descriptor bleed through.
          if (cfg.occlusion_mode == OcclusionMode::Leak &&
              r.id >= kDistractorIdBase && second >= 0 &&
              items[second].id < kDistractorIdBase) {
            const Renderable& o = items[second];
            synth.point_descriptor(o.key, second_local, o.yaw, o.cell_size, leak);
            desc = 0.5 * desc + 0.5 * leak;
            desc.normalize();
          }
          field.depth[pix] = best_t;
          field.visibility[pix] = r.id;
        } else {
          synth.point_descriptor(bg_key, Vec2(ix + 0.5, iy + 0.5), 0.0,
                                 cfg.background_cell_px, desc);
        }

        if (cfg.noise_sigma > 0.0) {
          Rng px_rng(mix64(seed, 0x4015EULL, static_cast<std::uint64_t>(pix)));
          for (int c = 0; c < cfg.descriptor_dim; ++c) {
            desc[c] += px_rng.normal(cfg.noise_sigma);
          }
          const double n = desc.norm();
          if (n < 1e-12) {
            desc.setZero();
            desc[0] = 1.0;
          } else {
            desc /= n;
          }
        }
        field.descriptors.row(pix) = desc;
      }
    }
#pragma omp critical
    {
      for (int k = 0; k < n_items; ++k) {
        hits[k] += local_hits[k];
        wins[k] += local_wins[k];
      }
    }
  }

  for (int k = 0; k < n_items; ++k) {
    if (hits[k] > 0) field.hit_pixels[items[k].id] = hits[k];
    if (wins[k] > 0) field.won_pixels[items[k].id] = wins[k];
  }
  return field;
}

KeypointReference make_reference(const sim::ObjectTemplate& tmpl,
                                 const CameraModel& camera,
                                 const PerceptionConfig& cfg) {
  SceneState scene;
  sim::ObjectInstance inst;
  inst.tmpl = std::make_shared<sim::ObjectTemplate>(tmpl);
  scene.objects.push_back(inst);

  PerceptionConfig clean = cfg;
  clean.noise_sigma = 0.0;
  const DescriptorField field = render_descriptor_field(scene, camera, clean, 0);

  KeypointReference ref;
  ref.category = tmpl.category;
  ref.template_name = tmpl.name;
  const int k_count = static_cast<int>(tmpl.keypoint_offsets.size());
  ref.descriptors.resize(k_count, cfg.descriptor_dim);
  for (int k = 0; k < k_count; ++k) {
    const Vec3 world = inst.pose.apply(tmpl.keypoint_offsets[k]);
    const geom::PixelDepth pd = geom::project(camera, world);
    const int ix = static_cast<int>(std::floor(pd.u));
    const int iy = static_cast<int>(std::floor(pd.v));
    if (ix < 0 || iy < 0 || ix >= field.width || iy >= field.height ||
        field.visibility[field.pixel_index(ix, iy)] != 0) {
      fail("bad-reference",
           tmpl.name + ": keypoint " + std::to_string(k) +
               " not visible in the reference render");
    }
    ref.descriptors.row(k) = field.descriptors.row(field.pixel_index(ix, iy));
    ref.ref_pixels.push_back(Vec2(ix + 0.5, iy + 0.5));
  }
  return ref;
}

std::vector<Keypoint2d> match_image(const DescriptorField& field,
                                    const KeypointReference& ref) {
  require(ref.descriptors.cols() == field.dim, "shape",
          "reference and field descriptor dims disagree");
  std::vector<Keypoint2d> out;
  const int n_px = field.width * field.height;
  Eigen::VectorXd sims(n_px);
  for (int k = 0; k < ref.descriptors.rows(); ++k) {
    sims.noalias() = field.descriptors * ref.descriptors.row(k).transpose();
    int best = 0;
    double best_sim = sims[0];
    for (int i = 1; i < n_px; ++i) {
      if (sims[i] > best_sim) {
        best_sim = sims[i];
        best = i;
      }
    }
    Keypoint2d kp;
    kp.u = (best % field.width) + 0.5;
    kp.v = (best / field.width) + 0.5;
    kp.similarity = best_sim;
    kp.valid = true;
    out.push_back(kp);
  }
  return out;
}

std::vector<InstanceDetection> detect_instances(const DescriptorField& field,
                                                const SceneState& scene,
                                                const PerceptionConfig& cfg,
                                                Rng& rng,
                                                const std::string& category) {
  std::vector<InstanceDetection> dets;
  auto mask_of = [&](int id) {
    std::vector<int> mask;
    for (int i = 0; i < static_cast<int>(field.visibility.size()); ++i) {
      if (field.visibility[i] == id) mask.push_back(i);
    }
    return mask;
  };

  for (int i = 0; i < static_cast<int>(scene.objects.size()); ++i) {
    if (scene.objects[i].tmpl->category != category) continue;
    const auto won = field.won_pixels.find(i);
    if (won == field.won_pixels.end() || won->second == 0) continue;
    if (rng.bernoulli(cfg.detector_fn_rate)) continue;
    const auto hit = field.hit_pixels.find(i);
    const double visible_fraction =
        hit == field.hit_pixels.end() || hit->second == 0
            ? 0.0
            : static_cast<double>(won->second) / static_cast<double>(hit->second);
    InstanceDetection det;
    det.category = category;
    det.instance_id = i;
    det.mask = mask_of(i);
    det.confidence = std::clamp(
        0.9 * visible_fraction + rng.normal(cfg.detector_confidence_noise), 0.0, 1.0);
    dets.push_back(std::move(det));
  }

  for (int j = 0; j < static_cast<int>(scene.distractors.size()); ++j) {
    const int id = kDistractorIdBase + j;
    const auto won = field.won_pixels.find(id);
    if (won == field.won_pixels.end() || won->second == 0) continue;
    if (!rng.bernoulli(cfg.detector_fp_rate)) continue;
    InstanceDetection det;
    det.category = category;
    det.instance_id = id;
    det.mask = mask_of(id);
    det.confidence = rng.uniform(0.3, 0.7);
    dets.push_back(std::move(det));
  }

  std::stable_sort(dets.begin(), dets.end(),
                   [](const InstanceDetection& a, const InstanceDetection& b) {
                     return a.confidence > b.confidence;
                   });
  return dets;
}

std::vector<InstanceDetection> detect_instances(const SceneState& scene,
                                                const CameraModel& camera,
                                                const PerceptionConfig& cfg,
                                                Rng& rng,
                                                const std::string& category) {
  const DescriptorField field =
      render_descriptor_field(scene, camera, cfg, rng.child(0x0F1E1DULL).seed());
  return detect_instances(field, scene, cfg, rng, category);
}

std::vector<InstanceBlock> match_instance(const DescriptorField& field,
                                          const std::vector<InstanceDetection>& detections,
                                          const KeypointReference& ref,
                                          int max_instances) {
  require(max_instances >= 1, "invalid-argument", "max_instances must be >= 1");
  std::vector<InstanceBlock> blocks;
  const int k_count = static_cast<int>(ref.descriptors.rows());
  const int n_used = std::min<int>(max_instances, static_cast<int>(detections.size()));
  for (int b = 0; b < n_used; ++b) {
    const InstanceDetection& det = detections[b];
    InstanceBlock block;
    block.instance_id = det.instance_id;
    for (int k = 0; k < k_count; ++k) {
      int best = -1;
      double best_sim = -kInf;
      for (int pix : det.mask) {  // ascending = row-major tie-break
        const double sim = field.descriptors.row(pix).dot(ref.descriptors.row(k));
        if (sim > best_sim) {
          best_sim = sim;
          best = pix;
        }
      }
      Keypoint2d kp;
      if (best >= 0) {
        kp.u = (best % field.width) + 0.5;
        kp.v = (best / field.width) + 0.5;
        kp.similarity = best_sim;
        kp.valid = true;
      }
      block.keypoints.push_back(kp);
    }
    blocks.push_back(std::move(block));
  }
  while (static_cast<int>(blocks.size()) < max_instances) {
    InstanceBlock pad;
    pad.keypoints.assign(k_count, Keypoint2d{});
    blocks.push_back(std::move(pad));
  }
  return blocks;
}

namespace {

// Depth at a sub-pixel position, bilinear over neighbors owned by `owner`.
// Falls back to the nearest pixel; +inf when that pixel is background.
double sampled_depth(const DescriptorField& field, double u, double v, int owner) {
  const int w = field.width, h = field.height;
  const double gx = std::clamp(u - 0.5, 0.0, static_cast<double>(w - 1));
  const double gy = std::clamp(v - 0.5, 0.0, static_cast<double>(h - 1));
  const int ix = std::min(static_cast<int>(gx), w - 2);
  const int iy = std::min(static_cast<int>(gy), h - 2);
  const double fx = gx - ix, fy = gy - iy;
  const double ws[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
  const int pix[4] = {field.pixel_index(ix, iy), field.pixel_index(ix + 1, iy),
                      field.pixel_index(ix, iy + 1), field.pixel_index(ix + 1, iy + 1)};
  double acc = 0.0, wsum = 0.0;
  for (int i = 0; i < 4; ++i) {
    if (field.visibility[pix[i]] == owner && std::isfinite(field.depth[pix[i]])) {
      acc += ws[i] * field.depth[pix[i]];
      wsum += ws[i];
    }
  }
  if (wsum > 1e-12) return acc / wsum;
  const int nix = std::clamp(static_cast<int>(std::floor(u)), 0, w - 1);
  const int niy = std::clamp(static_cast<int>(std::floor(v)), 0, h - 1);
  return field.depth[field.pixel_index(nix, niy)];
}

int visibility_at(const DescriptorField& field, double u, double v) {
  const int ix = std::clamp(static_cast<int>(std::floor(u)), 0, field.width - 1);
  const int iy = std::clamp(static_cast<int>(std::floor(v)), 0, field.height - 1);
  return field.visibility[field.pixel_index(ix, iy)];
}

const geom::Pose* instance_pose(const SceneState& scene, int id) {
  if (id >= 0 && id < static_cast<int>(scene.objects.size())) {
    return &scene.objects[id].pose;
  }
  const int j = id - kDistractorIdBase;
  if (j >= 0 && j < static_cast<int>(scene.distractors.size())) {
    return &scene.distractors[j].pose;
  }
  return nullptr;
}

const std::string* instance_category(const SceneState& scene, int id) {
  if (id >= 0 && id < static_cast<int>(scene.objects.size())) {
    return &scene.objects[id].tmpl->category;
  }
  return nullptr;  // distractors have no category
}

// Ground-truth image motion of the surface point at (u, v) on `id` between
// the previous and current frame.
Vec2 ground_truth_flow(const TrackFrame& frame, double u, double v, int id) {
  const geom::Pose* prev_pose = instance_pose(*frame.prev_scene, id);
  const geom::Pose* cur_pose = instance_pose(*frame.scene, id);
  if (prev_pose == nullptr || cur_pose == nullptr) return Vec2::Zero();
  const double depth = sampled_depth(*frame.prev_field, u, v, id);
  if (!std::isfinite(depth)) return Vec2::Zero();
  const Vec3 world = geom::unproject(*frame.camera, u, v, depth);
  const Vec3 moved = cur_pose->apply(prev_pose->inverse().apply(world));
  const Vec3 cam_local = frame.camera->extrinsics.inverse().apply(moved);
  if (cam_local.z() <= 1e-6) return Vec2::Zero();
  const geom::PixelDepth pd = geom::project(*frame.camera, moved);
  return Vec2(pd.u - u, pd.v - v);
}

}  // namespace

TrackerState track_init(const DescriptorField& field,
                        const std::vector<InstanceDetection>& detections,
                        const KeypointReference& ref, int max_instances) {
  TrackerState state;
  state.initialized = true;
  state.keypoints_per_instance = static_cast<int>(ref.descriptors.rows());
  for (const auto& block : match_instance(field, detections, ref, max_instances)) {
    for (const auto& kp : block.keypoints) {
      TrackedPoint pt;
      pt.alive = kp.valid;
      pt.position = Vec2(kp.u, kp.v);
      pt.bound_instance = block.instance_id;
      state.points.push_back(pt);
    }
  }
  return state;
}

std::vector<Keypoint2d> track_step(TrackerState& state, const TrackFrame& frame,
                                   const PerceptionConfig& cfg, Rng& rng) {
  require(state.initialized, "tracker-uninitialized",
          "track_step called before track_init");
  std::vector<Keypoint2d> out;
  const DescriptorField& field = *frame.field;

  for (TrackedPoint& pt : state.points) {
    if (!pt.alive) {
      out.push_back(Keypoint2d{});
      continue;
    }
    const Vec2 old_pos = pt.position;
    const int owner = visibility_at(*frame.prev_field, pt.position.x(), pt.position.y());
    const std::string* owner_cat = instance_category(*frame.prev_scene, owner);
    const std::string* bound_cat = instance_category(*frame.prev_scene, pt.bound_instance);

    bool handled = false;
    if (owner == pt.bound_instance && owner != -1) {
      pt.position += ground_truth_flow(frame, pt.position.x(), pt.position.y(), owner);
      pt.occluded = false;
      handled = true;
    } else if (owner >= 0 && owner < kDistractorIdBase && owner_cat != nullptr &&
               bound_cat != nullptr && *owner_cat == *bound_cat) {
      // A different instance of the same category slid underneath.
      if (rng.bernoulli(cfg.tracker_snap_prob)) {
        pt.bound_instance = owner;
        pt.position += ground_truth_flow(frame, pt.position.x(), pt.position.y(), owner);
        pt.occluded = false;
        handled = true;
      }
    } else if (owner == -1 && !pt.occluded) {
      // Sitting on background: zero flow.
      handled = true;
    }

    if (!handled) {
      // Occluded: hold, and reacquire once the bound instance re-appears
      // within the neighborhood.
      pt.occluded = true;
      const int r = static_cast<int>(kReacquireRadius);
      const int cx = static_cast<int>(std::floor(pt.position.x()));
      const int cy = static_cast<int>(std::floor(pt.position.y()));
      double best_d2 = kReacquireRadius * kReacquireRadius + 1.0;
      int best_ix = -1, best_iy = -1;
      for (int iy = std::max(0, cy - r); iy <= std::min(field.height - 1, cy + r); ++iy) {
        for (int ix = std::max(0, cx - r); ix <= std::min(field.width - 1, cx + r); ++ix) {
          if (field.visibility[field.pixel_index(ix, iy)] != pt.bound_instance) continue;
          const double du = (ix + 0.5) - pt.position.x();
          const double dv = (iy + 0.5) - pt.position.y();
          const double d2 = du * du + dv * dv;
          if (d2 < best_d2) {
            best_d2 = d2;
            best_ix = ix;
            best_iy = iy;
          }
        }
      }
      if (best_ix >= 0) {
        if (best_d2 > 0.5) pt.position = Vec2(best_ix + 0.5, best_iy + 0.5);
        pt.occluded = false;
      }
    }

    if (cfg.tracker_drift_sigma > 0.0) {
      pt.position.x() += rng.normal(cfg.tracker_drift_sigma);
      pt.position.y() += rng.normal(cfg.tracker_drift_sigma);
    }
    pt.position.x() = std::clamp(pt.position.x(), 0.5, field.width - 0.5);
    pt.position.y() = std::clamp(pt.position.y(), 0.5, field.height - 0.5);
    pt.velocity = pt.position - old_pos;

    Keypoint2d kp;
    kp.u = pt.position.x();
    kp.v = pt.position.y();
    kp.valid = true;
    out.push_back(kp);
  }
  return out;
}

std::vector<Vec3> lift_keypoints(const std::vector<Keypoint2d>& kps,
                                 const DescriptorField& field,
                                 const CameraModel& camera) {
  std::vector<Vec3> out;
  const double table_z = sim::world_config().table_height;
  for (const auto& kp : kps) {
    if (!kp.valid) {
      out.push_back(Vec3::Zero());
      continue;
    }
    require(field.in_bounds(kp.u, kp.v), "invalid-argument",
            "keypoint pixel out of bounds");
    const int owner = visibility_at(field, kp.u, kp.v);
    double depth = kInf;
    if (owner != -1) depth = sampled_depth(field, kp.u, kp.v, owner);
    if (std::isfinite(depth)) {
      out.push_back(geom::unproject(camera, kp.u, kp.v, depth));
    } else {
      // Background: intersect the pixel ray with the table plane.
      const Vec3 dir = camera.extrinsics.rotation *
                       Vec3((kp.u - camera.cx) / camera.fx,
                            (kp.v - camera.cy) / camera.fy, 1.0);
      const Vec3 origin = camera.extrinsics.position;
      if (std::abs(dir.z()) < 1e-9) {
        out.push_back(Vec3(0, 0, table_z));
      } else {
        const double t = (table_z - origin.z()) / dir.z();
        out.push_back(origin + t * dir);
      }
    }
  }
  return out;
}

std::string extraction_method_name(ExtractionMethod m) {
  switch (m) {
    case ExtractionMethod::Oracle: return "oracle";
    case ExtractionMethod::Image: return "image";
    case ExtractionMethod::Instance: return "instance";
    case ExtractionMethod::Tracking: return "tracking";
  }
  return "oracle";
}

ExtractionMethod extraction_method_from_name(const std::string& s) {
  if (s == "oracle") return ExtractionMethod::Oracle;
  if (s == "image") return ExtractionMethod::Image;
  if (s == "instance") return ExtractionMethod::Instance;
  if (s == "tracking") return ExtractionMethod::Tracking;
  fail("unknown-extraction-method", s);
}

KeypointExtractor::KeypointExtractor(const sim::TaskSpec& task,
                                     const sim::TaskAssets& assets,
                                     ExtractionMethod method,
                                     const PerceptionConfig& cfg,
                                     const CameraModel& camera,
                                     bool with_similarities)
    : task_(task),
      method_(method),
      cfg_(cfg),
      camera_(camera),
      with_similarities_(with_similarities) {
  cfg_.validate();
  for (const auto& role : task.categories) {
    const auto& cat = assets.find(role.category);
    CategoryPipeline pipe;
    pipe.role = role;
    pipe.keypoints = static_cast<int>(cat.training.front()->keypoint_offsets.size());
    if (method != ExtractionMethod::Oracle) {
      pipe.refs.push_back(make_reference(*cat.training.front(), camera_, cfg_));
      // Multi-instance image matching uses one reference per expected
      // instance (a second annotated reference image).
      if (method == ExtractionMethod::Image && role.n_instances > 1) {
        for (int i = 1; i < role.n_instances &&
                        i < static_cast<int>(cat.training.size());
             ++i) {
          pipe.refs.push_back(make_reference(*cat.training[i], camera_, cfg_));
        }
      }
    }
    total_slots_ += role.n_instances * pipe.keypoints;
    categories_.push_back(std::move(pipe));
  }
}

void KeypointExtractor::begin_episode(const SceneState& scene0,
                                      std::uint64_t episode_seed) {
  instance_order_ = sim::slot_instance_order(task_, scene0);
  episode_seed_ = episode_seed;
  have_prev_ = false;
  for (auto& pipe : categories_) pipe.tracker = TrackerState{};
}

Extraction KeypointExtractor::extract_oracle(const SceneState& scene) const {
  Extraction out;
  const auto kps = sim::ground_truth_keypoints(task_, scene, instance_order_);
  out.keypoints_world.resize(total_slots_, 3);
  out.keypoints_px.setZero(total_slots_, 2);
  out.valid.assign(total_slots_, 1);
  for (int i = 0; i < total_slots_; ++i) {
    out.keypoints_world.row(i) = kps[i].transpose();
    try {
      const geom::PixelDepth pd = geom::project(camera_, kps[i]);
      out.keypoints_px(i, 0) = pd.u;
      out.keypoints_px(i, 1) = pd.v;
    } catch (const Error&) {
      // Diagnostics only; keep zeros for points behind the camera.
    }
  }
  if (with_similarities_) out.similarities.setZero(total_slots_, total_slots_);
  return out;
}

void KeypointExtractor::fill_similarities(const DescriptorField& field,
                                          const std::vector<Keypoint2d>& kps,
                                          Extraction* out) const {
  out->similarities.setZero(total_slots_, total_slots_);
  // Column j compares against the reference descriptor of slot j, with
  // references tiled across instance blocks.
  std::vector<Eigen::RowVectorXd> ref_rows;
  for (const auto& pipe : categories_) {
    for (int inst = 0; inst < pipe.role.n_instances; ++inst) {
      const int ref_idx = std::min<int>(inst, static_cast<int>(pipe.refs.size()) - 1);
      const KeypointReference& ref = pipe.refs[ref_idx];
      for (int k = 0; k < pipe.keypoints; ++k) {
        ref_rows.push_back(ref.descriptors.row(k));
      }
    }
  }
  for (int i = 0; i < total_slots_; ++i) {
    if (!kps[i].valid) continue;
    const int ix = std::clamp(static_cast<int>(std::floor(kps[i].u)), 0, field.width - 1);
    const int iy = std::clamp(static_cast<int>(std::floor(kps[i].v)), 0, field.height - 1);
    const auto desc = field.descriptors.row(field.pixel_index(ix, iy));
    for (int j = 0; j < total_slots_; ++j) {
      out->similarities(i, j) = desc.dot(ref_rows[j]);
    }
  }
}

Extraction KeypointExtractor::extract(const SceneState& scene, int t) {
  if (method_ == ExtractionMethod::Oracle) return extract_oracle(scene);

  DescriptorField field = render_descriptor_field(
      scene, camera_, cfg_, mix64(episode_seed_, 0xF1E1DULL, t));
  Rng frame_rng(mix64(episode_seed_, 0xDE7EC7ULL, t));

  std::vector<Keypoint2d> kps;
  kps.reserve(total_slots_);
  for (auto& pipe : categories_) {
    switch (method_) {
      case ExtractionMethod::Image: {
        int emitted = 0;
        for (const auto& ref : pipe.refs) {
          if (emitted >= pipe.role.n_instances) break;
          const auto matched = match_image(field, ref);
          kps.insert(kps.end(), matched.begin(), matched.end());
          ++emitted;
        }
        for (; emitted < pipe.role.n_instances; ++emitted) {
          kps.insert(kps.end(), pipe.keypoints, Keypoint2d{});
        }
        break;
      }
      case ExtractionMethod::Instance: {
        const auto dets =
            detect_instances(field, scene, cfg_, frame_rng, pipe.role.category);
        for (const auto& block :
             match_instance(field, dets, pipe.refs.front(), pipe.role.n_instances)) {
          kps.insert(kps.end(), block.keypoints.begin(), block.keypoints.end());
        }
        break;
      }
      case ExtractionMethod::Tracking: {
        if (!pipe.tracker.initialized) {
          const auto dets =
              detect_instances(field, scene, cfg_, frame_rng, pipe.role.category);
          pipe.tracker =
              track_init(field, dets, pipe.refs.front(), pipe.role.n_instances);
          for (const auto& pt : pipe.tracker.points) {
            Keypoint2d kp;
            kp.u = pt.position.x();
            kp.v = pt.position.y();
            kp.valid = pt.alive;
            kps.push_back(kp);
          }
        } else {
          require(have_prev_, "tracker-uninitialized",
                  "tracking requires consecutive frames");
          TrackFrame tf;
          tf.prev_field = &prev_field_;
          tf.field = &field;
          tf.prev_scene = &prev_scene_;
          tf.scene = &scene;
          tf.camera = &camera_;
          const auto tracked = track_step(pipe.tracker, tf, cfg_, frame_rng);
          kps.insert(kps.end(), tracked.begin(), tracked.end());
        }
        break;
      }
      case ExtractionMethod::Oracle:
        break;  // handled above
    }
  }

  Extraction out;
  out.keypoints_world.setZero(total_slots_, 3);
  out.keypoints_px.setZero(total_slots_, 2);
  out.valid.assign(total_slots_, 0);
  const auto lifted = lift_keypoints(kps, field, camera_);
  for (int i = 0; i < total_slots_; ++i) {
    out.valid[i] = kps[i].valid ? 1 : 0;
    if (kps[i].valid) {
      out.keypoints_world.row(i) = lifted[i].transpose();
      out.keypoints_px(i, 0) = kps[i].u;
      out.keypoints_px(i, 1) = kps[i].v;
    }
  }
  if (with_similarities_) fill_similarities(field, kps, out);

  prev_field_ = std::move(field);
  prev_scene_ = scene;
  have_prev_ = true;
  return out;
}

}  // namespace kil::percep
