#pragma once

#include <cmath>
#include <numbers>
#include <string>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "occfuse/common.hpp"

namespace occfuse {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

inline constexpr double kOrthonormalTol = 1e-6;

inline bool is_rigid(const Mat4& T, double tol = kOrthonormalTol) {
  if (!T.allFinite()) return false;
  if (T(3, 0) != 0.0 || T(3, 1) != 0.0 || T(3, 2) != 0.0 || T(3, 3) != 1.0) return false;
  const Mat3 R = T.topLeftCorner<3, 3>();
  return (R.transpose() * R - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol && R.determinant() > 0.0;
}

inline void require_rigid(const Mat4& T, const std::string& what) {
  if (!is_rigid(T)) throw ValidationError(what + " is not a rigid transform (bottom row or rotation block)");
}

inline Mat4 rigid_inverse(const Mat4& T) {
  Mat4 inv = Mat4::Identity();
  const Mat3 Rt = T.topLeftCorner<3, 3>().transpose();
  inv.topLeftCorner<3, 3>() = Rt;
  inv.topRightCorner<3, 1>() = -Rt * T.topRightCorner<3, 1>();
  return inv;
}

inline Vec3 transform_point(const Mat4& T, const Vec3& p) {
  return T.topLeftCorner<3, 3>() * p + T.topRightCorner<3, 1>();
}

inline Mat4 make_pose(const Mat3& R, const Vec3& t) {
  Mat4 T = Mat4::Identity();
  T.topLeftCorner<3, 3>() = R;
  T.topRightCorner<3, 1>() = t;
  return T;
}

inline Mat3 rot_z(double yaw) { return Eigen::AngleAxisd(yaw, Vec3::UnitZ()).toRotationMatrix(); }

inline Mat4 translation(double x, double y, double z) { return make_pose(Mat3::Identity(), Vec3(x, y, z)); }

// Wraps an angle into [-pi/2, pi/2); yaw boxes are symmetric under a half turn.
inline double normalize_yaw(double yaw) {
  constexpr double pi = std::numbers::pi;
  double a = std::fmod(yaw + pi / 2.0, pi);
  if (a < 0.0) a += pi;
  a -= pi / 2.0;
  if (a >= pi / 2.0) a -= pi;
  return a;
}

// Smallest absolute difference between two yaws modulo pi.
inline double yaw_distance(double a, double b) {
  const double d = std::abs(normalize_yaw(a - b));
  return std::min(d, std::numbers::pi - d);
}

}  // namespace occfuse
