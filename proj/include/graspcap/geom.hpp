#pragma once

#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "graspcap/error.hpp"

namespace graspcap {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Vec6 = Eigen::Matrix<double, 6, 1>;

/// Image coordinates in pixels.
using PixelPoint = Eigen::Vector2d;

/// Rotation tangent vector (axis scaled by angle, radians).
using AxisAngle = Eigen::Vector3d;

namespace geom {

Mat3 skew(const Vec3& v);

/// Rodrigues exponential.
Mat3 rotation_exp(const AxisAngle& xi);

/// Inverse of rotation_exp. At an angle of exactly pi the axis is chosen with
/// a non-negative first nonzero component.
AxisAngle rotation_log(const Mat3& R);

bool is_rotation(const Mat3& R, double tol = 1e-9);

/// Element of SE(3). Maps points from the frame named on the right of ^aT_b
/// into the frame named on the left.
class RigidTransform {
public:
  RigidTransform() : R_(Mat3::Identity()), t_(Vec3::Zero()) {}
  /// Throws PreconditionViolation unless R is orthonormal with det +1.
  RigidTransform(const Mat3& R, const Vec3& t);

  static RigidTransform identity() { return {}; }
  static RigidTransform from_matrix(const Mat4& m);
  static RigidTransform translation(const Vec3& t) { return {Mat3::Identity(), t}; }
  /// Tangent ordering is (translation, rotation).
  static RigidTransform exp(const Vec6& tangent);

  const Mat3& rotation() const { return R_; }
  const Vec3& translation() const { return t_; }
  Mat4 matrix() const;

  RigidTransform inverse() const;
  RigidTransform operator*(const RigidTransform& rhs) const;
  Vec3 operator*(const Vec3& p) const { return R_ * p + t_; }

  /// Left perturbation used by every solver: R <- exp(w) R, t <- t + v, with
  /// delta = (v, w).
  RigidTransform perturbed(const Vec6& delta) const;

private:
  Mat3 R_;
  Vec3 t_;
};

/// Rotation angle of A^-1 B in radians.
double rotation_distance(const Mat3& A, const Mat3& B);

class SimilarityTransform {
public:
  SimilarityTransform() = default;
  SimilarityTransform(double scale, const Mat3& R, const Vec3& t);

  double scale() const { return scale_; }
  const Mat3& rotation() const { return R_; }
  const Vec3& translation() const { return t_; }

  Vec3 operator*(const Vec3& p) const { return scale_ * (R_ * p) + t_; }
  RigidTransform rigid_part() const { return {R_, t_}; }

private:
  double scale_ = 1.0;
  Mat3 R_ = Mat3::Identity();
  Vec3 t_ = Vec3::Zero();
};

struct CameraIntrinsics {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  double width = 0, height = 0;

  /// Throws PreconditionViolation on non-positive focal length or a principal
  /// point outside the image.
  void validate() const;
};

CameraIntrinsics load_intrinsics(const std::string& path);
void save_intrinsics(const std::string& path, const CameraIntrinsics& K);

inline constexpr double kMinDepth = 1e-6;

/// Pinhole projection of a world point seen by a camera at pose T_wc.
PixelPoint project(const Vec3& X_world, const RigidTransform& T_wc, const CameraIntrinsics& K);

/// Projection plus derivatives with respect to the world point (2x3) and the
/// left-perturbation tangent of T_wc (2x6).
struct ProjectionJacobian {
  PixelPoint pixel;
  Eigen::Matrix<double, 2, 3> d_point;
  Eigen::Matrix<double, 2, 6> d_pose;
};
ProjectionJacobian project_with_jacobian(const Vec3& X_world, const RigidTransform& T_wc,
                                         const CameraIntrinsics& K);

struct AlignOptions {
  bool with_scale = true;
};

/// Closed-form least-squares similarity (or rigid, with_scale = false) from
/// src to dst. Throws DegenerateConfiguration for fewer than three pairs or
/// collinear src points.
SimilarityTransform umeyama_align(std::span<const Vec3> src, std::span<const Vec3> dst,
                                  AlignOptions opts = {});

}  // namespace geom

using geom::CameraIntrinsics;
using geom::RigidTransform;
using geom::SimilarityTransform;

}  // namespace graspcap
