#pragma once

#include <Eigen/Dense>

#include "kil/common.hpp"
#include "kil/rng.hpp"

namespace kil::geom {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Rotation6d = Eigen::Matrix<double, 6, 1>;

constexpr double kPi = 3.14159265358979323846;

// Wraps an angle to (-pi, pi].
double wrap_angle(double a);

// Rigid transform: world_point = rotation * local_point + position.
struct Pose {
  Vec3 position = Vec3::Zero();
  Mat3 rotation = Mat3::Identity();

  static Pose identity() { return {}; }

  Vec3 apply(const Vec3& p) const { return rotation * p + position; }

  Pose inverse() const {
    Pose out;
    out.rotation = rotation.transpose();
    out.position = -(out.rotation * position);
    return out;
  }

  Pose operator*(const Pose& rhs) const {
    Pose out;
    out.rotation = rotation * rhs.rotation;
    out.position = rotation * rhs.position + position;
    return out;
  }

  bool rotation_is_orthonormal(double tol = 1e-9) const;
};

// Pinhole camera. `extrinsics` is the pose of the camera in the world frame;
// the camera looks along its local +z axis.
struct CameraModel {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;
  Pose extrinsics;
};

struct PixelDepth {
  double u = 0, v = 0, depth = 0;
};

// Projects a world point. Throws "behind-camera" if the point does not lie
// strictly in front of the image plane.
PixelDepth project(const CameraModel& camera, const Vec3& world_point);

// Lifts a pixel with known depth back to a world point. Throws
// "invalid-depth" when depth <= 0.
Vec3 unproject(const CameraModel& camera, double u, double v, double depth);

// Six-scalar rotation encoding: the first two columns of the matrix, in
// order. Decoding Gram-Schmidts the columns, so mildly perturbed encodings
// still decode to a proper rotation.
Rotation6d rotmat_to_6d(const Mat3& r);
Mat3 sixd_to_rotmat(const Rotation6d& v);  // throws "degenerate-6d"

// Intrinsic Z-Y-X (yaw-pitch-roll) Euler angles. At gimbal lock
// (|pitch| = pi/2) the decomposition sets yaw = 0 and lets roll absorb the
// free angle.
struct EulerZyx {
  double roll = 0, pitch = 0, yaw = 0;
};

EulerZyx rotmat_to_euler(const Mat3& r);
Mat3 euler_to_rotmat(const EulerZyx& e);

// Planar rigid transform about the world z-axis: rotate by theta, then
// translate by (dx, dy, 0).
struct Se2 {
  double dx = 0, dy = 0, theta = 0;

  Se2 inverse() const;
};

Vec3 se2_apply_point(const Se2& t, const Vec3& p);
Pose se2_apply(const Se2& t, const Pose& pose);

Mat3 rot_x(double a);
Mat3 rot_y(double a);
Mat3 rot_z(double a);

// Yaw of the rotated x-axis, i.e. the z-Euler angle of the ZYX decomposition.
double yaw_of(const Mat3& r);

// Rotation exp/log (Rodrigues). Used for bounded rotation interpolation.
Mat3 rot_exp(const Vec3& axis_angle);
Vec3 rot_log(const Mat3& r);

// Uniformly distributed random rotation (test + sampling helper).
Mat3 random_rotation(Rng& rng);

}  // namespace kil::geom
