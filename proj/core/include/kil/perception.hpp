#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "kil/geometry.hpp"
#include "kil/rng.hpp"
#include "kil/worldsim.hpp"

namespace kil::percep {

using geom::CameraModel;
using geom::Vec2;
using geom::Vec3;
using sim::SceneState;

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class OcclusionMode { Strict, Leak };

struct PerceptionConfig {
  int descriptor_dim = 32;
  double noise_sigma = 0.0;
  double rotation_sensitivity = 0.0;  // kappa: fraction of energy in yaw channels
  OcclusionMode occlusion_mode = OcclusionMode::Strict;
  double detector_fp_rate = 0.0;
  double detector_fn_rate = 0.0;
  double detector_confidence_noise = 0.0;
  double tracker_drift_sigma = 0.0;   // pixels per step, per axis
  double tracker_snap_prob = 0.0;
  int width = 160;
  int height = 120;
  double cell_size = 0.004;           // descriptor cell pitch on surfaces, meters
  double background_cell_px = 6.0;    // descriptor cell pitch on background, pixels

  void validate() const;  // throws "invalid-perception-config"
};

// Instance ids in the visibility map: objects use their scene index,
// distractors are offset by kDistractorIdBase, background is -1.
constexpr int kDistractorIdBase = 1000;

struct DescriptorField {
  int width = 0, height = 0, dim = 0;
  RowMat descriptors;             // (H*W) x D, unit rows
  Eigen::VectorXd depth;          // camera-frame depth, +inf on background
  std::vector<std::int32_t> visibility;  // instance id per pixel, -1 = none
  // Per-instance pixel statistics from rasterization: rays that hit the
  // instance lamina (ignoring occlusion) and pixels the instance won.
  std::map<int, int> hit_pixels;
  std::map<int, int> won_pixels;

  int pixel_index(int ix, int iy) const { return iy * width + ix; }
  bool in_bounds(double u, double v) const {
    return u >= 0.0 && v >= 0.0 && u < width && v < height;
  }
};

// Procedural per-pixel descriptor source. A descriptor is assembled from a
// hash-seeded unit vector per quantized surface cell (bilinearly interpolated
// between cells) plus a dedicated channel pair whose phase rotates with
// object yaw, carrying a `rotation_sensitivity` fraction of the energy.
// Cells must be prefilled before concurrent reads.
class DescriptorSynth {
 public:
  explicit DescriptorSynth(const PerceptionConfig& cfg) : cfg_(cfg) {}

  struct SurfaceKey {
    int space = 0;  // 0 = object category, 1 = distractor, 2 = background
    std::uint64_t category = 0;
    std::uint64_t appearance_seed = 0;
    std::uint64_t variant_bits = 0;
  };

  void prefill(const SurfaceKey& key, const Vec2& lo, const Vec2& hi,
               double cell_size);

  // Unit descriptor for a surface point; `yaw` rotates the sensitivity pair.
  void point_descriptor(const SurfaceKey& key, const Vec2& local_xy, double yaw,
                        double cell_size, Eigen::Ref<Eigen::RowVectorXd> out) const;

  static SurfaceKey object_key(const sim::ObjectTemplate& tmpl);
  static SurfaceKey distractor_key(const sim::Distractor& d);
  static SurfaceKey background_key(int background_id);

 private:
  struct Cell {
    Eigen::VectorXd base;  // dim-2 unit vector
    double cphi = 1.0, sphi = 0.0;
  };
  struct CellKey {
    std::uint64_t surface = 0;
    std::int64_t cx = 0, cy = 0;
    bool operator==(const CellKey&) const = default;
  };
  struct CellKeyHash {
    std::size_t operator()(const CellKey& k) const {
      return mix64(k.surface, static_cast<std::uint64_t>(k.cx),
                   static_cast<std::uint64_t>(k.cy));
    }
  };

  const Cell& cell(const CellKey& key) const;
  static std::uint64_t surface_hash(const SurfaceKey& key);

  PerceptionConfig cfg_;
  std::unordered_map<CellKey, Cell, CellKeyHash> cells_;
};

// Rasterizes the scene into a descriptor field (ray casts against each object
// and distractor lamina with z-buffering; background elsewhere). Pure
// function of (scene, camera, cfg, seed).
DescriptorField render_descriptor_field(const SceneState& scene,
                                        const CameraModel& camera,
                                        const PerceptionConfig& cfg,
                                        std::uint64_t seed);

struct KeypointReference {
  std::string category;
  std::string template_name;
  RowMat descriptors;              // K x D
  std::vector<Vec2> ref_pixels;    // pixel centers in the reference render
};

// Reference descriptors read off a noise-free render of the template alone at
// the canonical pose. Throws "bad-reference" if any keypoint is not visible.
KeypointReference make_reference(const sim::ObjectTemplate& tmpl,
                                 const CameraModel& camera,
                                 const PerceptionConfig& cfg);

struct Keypoint2d {
  double u = 0.0, v = 0.0;
  double similarity = 0.0;
  bool valid = false;
};

// Per reference keypoint, the argmax of cosine similarity over all pixels.
// Ties break to the smallest row-major pixel index. Returned coordinates are
// pixel centers.
std::vector<Keypoint2d> match_image(const DescriptorField& field,
                                    const KeypointReference& ref);

struct InstanceDetection {
  std::vector<int> mask;  // row-major pixel indices, ascending
  double confidence = 0.0;
  std::string category;
  int instance_id = -1;   // ground-truth id behind the mask (simulator-side)
};

// Simulated open-vocabulary detector: true instances are emitted with
// probability (1 - fn_rate) with confidence 0.9 * visible-fraction plus
// noise; distractors become false positives with probability fp_rate.
// Sorted by confidence, descending.
std::vector<InstanceDetection> detect_instances(const DescriptorField& field,
                                                const SceneState& scene,
                                                const PerceptionConfig& cfg,
                                                Rng& rng,
                                                const std::string& category);

// Convenience overload matching the scene-level contract (renders
// internally).
std::vector<InstanceDetection> detect_instances(const SceneState& scene,
                                                const CameraModel& camera,
                                                const PerceptionConfig& cfg,
                                                Rng& rng,
                                                const std::string& category);

struct InstanceBlock {
  std::vector<Keypoint2d> keypoints;  // K entries; all-invalid when padded
  int instance_id = -1;
};

// Mask-restricted matching over the `max_instances` highest-confidence
// detections, zero-padded to a fixed number of blocks.
std::vector<InstanceBlock> match_instance(const DescriptorField& field,
                                          const std::vector<InstanceDetection>& detections,
                                          const KeypointReference& ref,
                                          int max_instances);

struct TrackedPoint {
  Vec2 position = Vec2::Zero();  // pixel-center coordinates, sub-pixel
  Vec2 velocity = Vec2::Zero();
  bool alive = false;
  bool occluded = false;
  int bound_instance = -1;
};

struct TrackerState {
  bool initialized = false;
  int keypoints_per_instance = 0;
  std::vector<TrackedPoint> points;  // max_instances * K
};

// Frame bundle handed to the tracker: the previous and current rendered
// fields plus instance poses, from which ground-truth optical flow is
// derived.
struct TrackFrame {
  const DescriptorField* prev_field = nullptr;
  const DescriptorField* field = nullptr;
  const SceneState* prev_scene = nullptr;
  const SceneState* scene = nullptr;
  const CameraModel* camera = nullptr;
};

TrackerState track_init(const DescriptorField& field,
                        const std::vector<InstanceDetection>& detections,
                        const KeypointReference& ref, int max_instances);

// Propagates every live keypoint by the ground-truth optical flow of the
// instance under it (zero flow on background), plus Gaussian drift. Occluded
// points hold with drift until their instance is re-exposed within 10 px.
// With probability tracker_snap_prob a point covered by a different
// same-category instance re-binds to it. Throws "tracker-uninitialized".
std::vector<Keypoint2d> track_step(TrackerState& state, const TrackFrame& frame,
                                   const PerceptionConfig& cfg, Rng& rng);

// Lifts pixels to world points using the field depth (bilinear within the
// owning instance). Background pixels intersect the pixel ray with the table
// plane; invalid (zero-padded) inputs map to zero vectors.
std::vector<Vec3> lift_keypoints(const std::vector<Keypoint2d>& kps,
                                 const DescriptorField& field,
                                 const CameraModel& camera);

enum class ExtractionMethod { Oracle, Image, Instance, Tracking };

std::string extraction_method_name(ExtractionMethod m);
ExtractionMethod extraction_method_from_name(const std::string& s);

struct Extraction {
  Eigen::MatrixXd keypoints_world;   // K_total x 3, zero rows where invalid
  Eigen::MatrixXd keypoints_px;      // K_total x 2 (pixel centers), diagnostics
  std::vector<std::uint8_t> valid;   // K_total
  Eigen::MatrixXd similarities;      // K_total x K_total when requested
};

// Episode-scoped extraction pipeline: builds references per category, drives
// the selected method frame by frame and lifts results to 3D. Oracle mode
// bypasses rendering and returns simulator ground truth.
class KeypointExtractor {
 public:
  KeypointExtractor(const sim::TaskSpec& task, const sim::TaskAssets& assets,
                    ExtractionMethod method, const PerceptionConfig& cfg,
                    const CameraModel& camera, bool with_similarities);

  // Must be called with the episode's first scene before extract().
  void begin_episode(const SceneState& scene0, std::uint64_t episode_seed);

  // Extract keypoints for the scene at time step t (consecutive calls).
  Extraction extract(const SceneState& scene, int t);

  int keypoint_slots() const { return total_slots_; }
  ExtractionMethod method() const { return method_; }

 private:
  struct CategoryPipeline {
    sim::CategoryRole role;
    int keypoints = 0;
    std::vector<KeypointReference> refs;  // >1 only for multi-instance image mode
    TrackerState tracker;
  };

  Extraction extract_oracle(const SceneState& scene) const;
  void fill_similarities(const DescriptorField& field,
                         const std::vector<Keypoint2d>& kps, Extraction* out) const;

  sim::TaskSpec task_;
  ExtractionMethod method_;
  PerceptionConfig cfg_;
  CameraModel camera_;
  bool with_similarities_;
  int total_slots_ = 0;
  std::vector<CategoryPipeline> categories_;
  std::vector<int> instance_order_;
  std::uint64_t episode_seed_ = 0;
  DescriptorField prev_field_;
  SceneState prev_scene_;
  bool have_prev_ = false;
};

}  // namespace kil::percep
