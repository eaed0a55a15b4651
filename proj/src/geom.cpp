#include "graspcap/geom.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include <Eigen/SVD>

namespace graspcap {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::PointBehindCamera: return "PointBehindCamera";
    case ErrorKind::DegenerateConfiguration: return "DegenerateConfiguration";
    case ErrorKind::InsufficientCorrespondences: return "InsufficientCorrespondences";
    case ErrorKind::DegenerateMotion: return "DegenerateMotion";
    case ErrorKind::IllConditioned: return "IllConditioned";
    case ErrorKind::PreconditionViolation: return "PreconditionViolation";
    case ErrorKind::NoSteadySegment: return "NoSteadySegment";
    case ErrorKind::ConfigError: return "ConfigError";
    case ErrorKind::ParseError: return "ParseError";
  }
  return "Unknown";
}

namespace geom {

Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0, -v.z(), v.y(),
       v.z(), 0, -v.x(),
       -v.y(), v.x(), 0;
  return m;
}

Mat3 rotation_exp(const AxisAngle& xi) {
  const double theta2 = xi.squaredNorm();
  const Mat3 K = skew(xi);
  double a, b;
  if (theta2 < 1e-16) {
    a = 1.0 - theta2 / 6.0;
    b = 0.5 - theta2 / 24.0;
  } else {
    const double theta = std::sqrt(theta2);
    a = std::sin(theta) / theta;
    b = (1.0 - std::cos(theta)) / theta2;
  }
  return Mat3::Identity() + a * K + b * K * K;
}

namespace {

Vec3 canonical_axis_sign(Vec3 axis) {
  for (int i = 0; i < 3; ++i) {
    if (std::abs(axis[i]) > 1e-12) {
      if (axis[i] < 0) axis = -axis;
      break;
    }
  }
  return axis;
}

}  // namespace

AxisAngle rotation_log(const Mat3& R) {
  const Vec3 v(0.5 * (R(2, 1) - R(1, 2)), 0.5 * (R(0, 2) - R(2, 0)), 0.5 * (R(1, 0) - R(0, 1)));
  const double s = v.norm();                        // sin(theta)
  const double c = std::clamp(0.5 * (R.trace() - 1.0), -1.0, 1.0);  // cos(theta)
  const double theta = std::atan2(s, c);

  if (theta < 1e-8) {
    return v * (1.0 + theta * theta / 6.0);
  }
  if (theta < std::numbers::pi - 1e-3) {
    return v * (theta / s);
  }

  // Near pi the antisymmetric part vanishes; read the axis off the symmetric part.
  const Mat3 B = (0.5 * (R + R.transpose()) - c * Mat3::Identity()) / (1.0 - c);
  int k = 0;
  B.diagonal().maxCoeff(&k);
  Vec3 axis = B.col(k) / std::sqrt(std::max(B(k, k), 1e-300));
  axis.normalize();
  if (s > 1e-12) {
    if (axis.dot(v) < 0) axis = -axis;
  } else {
    axis = canonical_axis_sign(axis);
  }
  return axis * theta;
}

bool is_rotation(const Mat3& R, double tol) {
  if (!R.allFinite()) return false;
  const double ortho = (R.transpose() * R - Mat3::Identity()).cwiseAbs().maxCoeff();
  return ortho <= tol && std::abs(R.determinant() - 1.0) <= tol;
}

RigidTransform::RigidTransform(const Mat3& R, const Vec3& t) : R_(R), t_(t) {
  if (!is_rotation(R)) {
    throw Error(ErrorKind::PreconditionViolation, "rotation is not orthonormal with det +1");
  }
  if (!t.allFinite()) {
    throw Error(ErrorKind::PreconditionViolation, "non-finite translation");
  }
}

RigidTransform RigidTransform::from_matrix(const Mat4& m) {
  if (m.row(3).transpose() != Eigen::Vector4d(0, 0, 0, 1)) {
    throw Error(ErrorKind::PreconditionViolation, "last row of a rigid transform must be 0 0 0 1");
  }
  return {m.topLeftCorner<3, 3>(), m.topRightCorner<3, 1>()};
}

RigidTransform RigidTransform::exp(const Vec6& tangent) {
  return RigidTransform().perturbed(tangent);
}

Mat4 RigidTransform::matrix() const {
  Mat4 m = Mat4::Identity();
  m.topLeftCorner<3, 3>() = R_;
  m.topRightCorner<3, 1>() = t_;
  return m;
}

RigidTransform RigidTransform::inverse() const {
  RigidTransform out;
  out.R_ = R_.transpose();
  out.t_ = -(out.R_ * t_);
  return out;
}

RigidTransform RigidTransform::operator*(const RigidTransform& rhs) const {
  RigidTransform out;
  out.R_ = R_ * rhs.R_;
  out.t_ = R_ * rhs.t_ + t_;
  return out;
}

RigidTransform RigidTransform::perturbed(const Vec6& delta) const {
  RigidTransform out;
  out.R_ = rotation_exp(delta.tail<3>()) * R_;
  out.t_ = t_ + delta.head<3>();
  return out;
}

double rotation_distance(const Mat3& A, const Mat3& B) {
  return rotation_log(A.transpose() * B).norm();
}

SimilarityTransform::SimilarityTransform(double scale, const Mat3& R, const Vec3& t)
    : scale_(scale), R_(R), t_(t) {
  if (!(scale > 0) || !std::isfinite(scale)) {
    throw Error(ErrorKind::PreconditionViolation, "similarity scale must be positive");
  }
  if (!is_rotation(R)) {
    throw Error(ErrorKind::PreconditionViolation, "rotation is not orthonormal with det +1");
  }
}

void CameraIntrinsics::validate() const {
  const bool finite = std::isfinite(fx) && std::isfinite(fy) && std::isfinite(cx) &&
                      std::isfinite(cy) && std::isfinite(width) && std::isfinite(height);
  if (!finite || !(fx > 0) || !(fy > 0)) {
    throw Error(ErrorKind::PreconditionViolation, "focal lengths must be positive and finite");
  }
  if (!(cx >= 0 && cx < width) || !(cy >= 0 && cy < height)) {
    throw Error(ErrorKind::PreconditionViolation, "principal point must lie inside the image");
  }
}

CameraIntrinsics load_intrinsics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::ConfigError, "cannot open intrinsics file " + path);

  std::map<std::string, double> values;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::replace(line.begin(), line.end(), ':', ' ');
    std::replace(line.begin(), line.end(), '=', ' ');
    std::istringstream ss(line);
    std::string key;
    if (!(ss >> key)) continue;
    double value;
    if (!(ss >> value)) {
      throw Error(ErrorKind::ParseError, path + ":" + std::to_string(lineno) + ": expected a number");
    }
    values[key] = value;
  }

  CameraIntrinsics K;
  auto take = [&](const char* key, double& dst) {
    auto it = values.find(key);
    if (it == values.end()) throw Error(ErrorKind::ParseError, path + ": missing field " + key);
    dst = it->second;
  };
  take("fx", K.fx);
  take("fy", K.fy);
  take("cx", K.cx);
  take("cy", K.cy);
  take("width", K.width);
  take("height", K.height);
  K.validate();
  return K;
}

void save_intrinsics(const std::string& path, const CameraIntrinsics& K) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::ConfigError, "cannot write " + path);
  out.precision(17);
  out << "fx " << K.fx << "\nfy " << K.fy << "\ncx " << K.cx << "\ncy " << K.cy
      << "\nwidth " << K.width << "\nheight " << K.height << "\n";
}

PixelPoint project(const Vec3& X_world, const RigidTransform& T_wc, const CameraIntrinsics& K) {
  const Vec3 p = T_wc.rotation().transpose() * (X_world - T_wc.translation());
  if (!(p.z() > kMinDepth)) {
    throw Error(ErrorKind::PointBehindCamera, "point depth " + std::to_string(p.z()));
  }
  return {K.fx * p.x() / p.z() + K.cx, K.fy * p.y() / p.z() + K.cy};
}

ProjectionJacobian project_with_jacobian(const Vec3& X_world, const RigidTransform& T_wc,
                                         const CameraIntrinsics& K) {
  const Mat3 Rt = T_wc.rotation().transpose();
  const Vec3 v = X_world - T_wc.translation();
  const Vec3 p = Rt * v;
  if (!(p.z() > kMinDepth)) {
    throw Error(ErrorKind::PointBehindCamera, "point depth " + std::to_string(p.z()));
  }
  const double iz = 1.0 / p.z();
  Eigen::Matrix<double, 2, 3> dpi;
  dpi << K.fx * iz, 0, -K.fx * p.x() * iz * iz,
         0, K.fy * iz, -K.fy * p.y() * iz * iz;

  ProjectionJacobian out;
  out.pixel = {K.fx * p.x() * iz + K.cx, K.fy * p.y() * iz + K.cy};
  out.d_point = dpi * Rt;
  out.d_pose.leftCols<3>() = -out.d_point;
  out.d_pose.rightCols<3>() = dpi * Rt * skew(v);
  return out;
}

SimilarityTransform umeyama_align(std::span<const Vec3> src, std::span<const Vec3> dst,
                                  AlignOptions opts) {
  if (src.size() != dst.size()) {
    throw Error(ErrorKind::PreconditionViolation, "umeyama_align needs equal point counts");
  }
  const auto n = static_cast<Eigen::Index>(src.size());
  if (n < 3) {
    throw Error(ErrorKind::DegenerateConfiguration, "umeyama_align needs at least 3 points");
  }

  Eigen::Matrix3Xd S(3, n), D(3, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    S.col(i) = src[static_cast<std::size_t>(i)];
    D.col(i) = dst[static_cast<std::size_t>(i)];
  }
  const Vec3 mu_s = S.rowwise().mean();
  const Vec3 mu_d = D.rowwise().mean();
  S.colwise() -= mu_s;
  D.colwise() -= mu_d;

  const Vec3 spread = Eigen::JacobiSVD<Eigen::Matrix3Xd>(S).singularValues();
  if (!(spread[0] > 0) || spread[1] <= 1e-9 * spread[0]) {
    throw Error(ErrorKind::DegenerateConfiguration, "source points are collinear or coincident");
  }

  const Mat3 sigma = D * S.transpose() / static_cast<double>(n);
  Eigen::JacobiSVD<Mat3> svd(sigma, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Vec3 sign = Vec3::Ones();
  if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0) sign[2] = -1;

  const Mat3 R = svd.matrixU() * sign.asDiagonal() * svd.matrixV().transpose();

  double scale = 1.0;
  if (opts.with_scale) {
    const double var_s = S.squaredNorm() / static_cast<double>(n);
    scale = svd.singularValues().dot(sign) / var_s;
  }
  return {scale, R, mu_d - scale * R * mu_s};
}

}  // namespace geom
}  // namespace graspcap
