#include "kil/geometry.hpp"

#include <algorithm>
#include <cmath>

namespace kil::geom {

namespace {

Mat3 skew(const Vec3& w) {
  Mat3 k;
  k << 0, -w.z(), w.y(), w.z(), 0, -w.x(), -w.y(), w.x(), 0;
  return k;
}

}  // namespace

double wrap_angle(double a) {
  a = std::fmod(a + kPi, 2.0 * kPi);
  if (a <= 0.0) a += 2.0 * kPi;
  return a - kPi;
}

bool Pose::rotation_is_orthonormal(double tol) const {
  const Mat3 rtr = rotation.transpose() * rotation;
  return (rtr - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol &&
         std::abs(rotation.determinant() - 1.0) <= tol;
}

PixelDepth project(const CameraModel& camera, const Vec3& world_point) {
  const Vec3 pc = camera.extrinsics.inverse().apply(world_point);
  if (!(pc.z() > 0.0)) {
    fail("behind-camera", "point is at or behind the camera plane");
  }
  PixelDepth out;
  out.u = camera.fx * pc.x() / pc.z() + camera.cx;
  out.v = camera.fy * pc.y() / pc.z() + camera.cy;
  out.depth = pc.z();
  return out;
}

Vec3 unproject(const CameraModel& camera, double u, double v, double depth) {
  if (!(depth > 0.0)) fail("invalid-depth", "depth must be positive");
  const Vec3 pc((u - camera.cx) / camera.fx * depth,
                (v - camera.cy) / camera.fy * depth, depth);
  return camera.extrinsics.apply(pc);
}

Rotation6d rotmat_to_6d(const Mat3& r) {
  Rotation6d v;
  v << r(0, 0), r(1, 0), r(2, 0), r(0, 1), r(1, 1), r(2, 1);
  return v;
}

Mat3 sixd_to_rotmat(const Rotation6d& v) {
  const Vec3 c1 = v.head<3>();
  const Vec3 c2 = v.tail<3>();
  const double n1 = c1.norm();
  if (n1 < 1e-9) fail("degenerate-6d", "first column has near-zero norm");
  const Vec3 b1 = c1 / n1;
  const Vec3 r2 = c2 - b1.dot(c2) * b1;
  const double n2 = r2.norm();
  if (n2 < 1e-9) fail("degenerate-6d", "columns are near-parallel");
  const Vec3 b2 = r2 / n2;
  Mat3 r;
  r.col(0) = b1;
  r.col(1) = b2;
  r.col(2) = b1.cross(b2);
  return r;
}

EulerZyx rotmat_to_euler(const Mat3& r) {
  EulerZyx e;
  const double sp = -r(2, 0);
  if (sp >= 1.0 - 1e-12) {
    // pitch = +pi/2: yaw fixed to 0 by convention.
    e.pitch = kPi / 2.0;
    e.yaw = 0.0;
    e.roll = std::atan2(r(0, 1), r(1, 1));
  } else if (sp <= -1.0 + 1e-12) {
    e.pitch = -kPi / 2.0;
    e.yaw = 0.0;
    e.roll = std::atan2(-r(0, 1), r(1, 1));
  } else {
    e.pitch = std::asin(sp);
    e.yaw = std::atan2(r(1, 0), r(0, 0));
    e.roll = std::atan2(r(2, 1), r(2, 2));
  }
  return e;
}

Mat3 euler_to_rotmat(const EulerZyx& e) {
  return rot_z(e.yaw) * rot_y(e.pitch) * rot_x(e.roll);
}

Se2 Se2::inverse() const {
  const double c = std::cos(theta), s = std::sin(theta);
  Se2 inv;
  inv.theta = -theta;
  inv.dx = -(c * dx + s * dy);
  inv.dy = -(-s * dx + c * dy);
  return inv;
}

Vec3 se2_apply_point(const Se2& t, const Vec3& p) {
  const double c = std::cos(t.theta), s = std::sin(t.theta);
  return Vec3(c * p.x() - s * p.y() + t.dx, s * p.x() + c * p.y() + t.dy,
              p.z());
}

Pose se2_apply(const Se2& t, const Pose& pose) {
  Pose out;
  out.position = se2_apply_point(t, pose.position);
  out.rotation = rot_z(t.theta) * pose.rotation;
  return out;
}

Mat3 rot_x(double a) {
  const double c = std::cos(a), s = std::sin(a);
  Mat3 r;
  r << 1, 0, 0, 0, c, -s, 0, s, c;
  return r;
}

Mat3 rot_y(double a) {
  const double c = std::cos(a), s = std::sin(a);
  Mat3 r;
  r << c, 0, s, 0, 1, 0, -s, 0, c;
  return r;
}

Mat3 rot_z(double a) {
  const double c = std::cos(a), s = std::sin(a);
  Mat3 r;
  r << c, -s, 0, s, c, 0, 0, 0, 1;
  return r;
}

double yaw_of(const Mat3& r) { return std::atan2(r(1, 0), r(0, 0)); }

Mat3 rot_exp(const Vec3& w) {
  const double angle = w.norm();
  if (angle < 1e-12) return Mat3::Identity() + skew(w);
  const Vec3 axis = w / angle;
  const Mat3 k = skew(axis);
  return Mat3::Identity() + std::sin(angle) * k +
         (1.0 - std::cos(angle)) * k * k;
}

Vec3 rot_log(const Mat3& r) {
  const double cos_angle =
      std::clamp((r.trace() - 1.0) / 2.0, -1.0, 1.0);
  const double angle = std::acos(cos_angle);
  if (angle < 1e-9) return Vec3::Zero();
  if (angle > kPi - 1e-6) {
    // Near pi the off-diagonal formula degrades; recover the axis from the
    // dominant diagonal of (R + I) / 2.
    Mat3 m = (r + Mat3::Identity()) * 0.5;
    int k = 0;
    m.diagonal().maxCoeff(&k);
    Vec3 axis = m.col(k) / std::sqrt(std::max(m(k, k), 1e-12));
    axis.normalize();
    // Fix the sign using the skew part.
    const Vec3 s(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));
    if (axis.dot(s) < 0.0) axis = -axis;
    return axis * angle;
  }
  const Vec3 s(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));
  return s * (angle / (2.0 * std::sin(angle)));
}

Mat3 random_rotation(Rng& rng) {
  // Shoemake: uniform quaternion from three uniforms.
  const double u1 = rng.uniform(), u2 = rng.uniform(), u3 = rng.uniform();
  const double a = std::sqrt(1.0 - u1), b = std::sqrt(u1);
  const double t2 = 2.0 * kPi * u2, t3 = 2.0 * kPi * u3;
  Eigen::Quaterniond q(a * std::sin(t2), a * std::cos(t2), b * std::sin(t3),
                       b * std::cos(t3));
  return q.normalized().toRotationMatrix();
}

}  // namespace kil::geom
