#include <algorithm>
#include <cmath>
#include <vector>

#include <Eigen/SVD>

#include "graspcap/sfm.hpp"

namespace graspcap::sfm {

namespace {

using Mat34 = Eigen::Matrix<double, 3, 4>;

Vec3 normalized_ray(const PixelPoint& x, const CameraIntrinsics& K) {
  return {(x.x() - K.cx) / K.fx, (x.y() - K.cy) / K.fy, 1.0};
}

// DLT on normalized image coordinates; P maps world points to camera coordinates.
std::optional<Vec3> triangulate_normalized(const std::vector<Mat34>& P, const std::vector<Vec3>& rays) {
  const auto m = static_cast<Eigen::Index>(P.size());
  Eigen::MatrixXd A(2 * m, 4);
  for (Eigen::Index i = 0; i < m; ++i) {
    const Vec3& x = rays[static_cast<std::size_t>(i)];
    const Mat34& Pi = P[static_cast<std::size_t>(i)];
    A.row(2 * i) = x.x() * Pi.row(2) - Pi.row(0);
    A.row(2 * i + 1) = x.y() * Pi.row(2) - Pi.row(1);
  }
  // Row scaling keeps the views balanced.
  for (Eigen::Index r = 0; r < A.rows(); ++r) {
    const double n = A.row(r).norm();
    if (n > 0) A.row(r) /= n;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeFullV);
  const Eigen::Vector4d h = svd.matrixV().col(3);
  if (std::abs(h[3]) < 1e-14 * h.head<3>().norm()) return std::nullopt;
  return Vec3(h.head<3>() / h[3]);
}

Mat34 camera_matrix(const Mat3& R, const Vec3& t) {
  Mat34 P;
  P.leftCols<3>() = R;
  P.col(3) = t;
  return P;
}

// Similarity moving the points' centroid to the origin with mean distance sqrt(2).
Mat3 hartley(const std::vector<Vec3>& rays) {
  Vec2 c = Vec2::Zero();
  for (const auto& r : rays) c += r.head<2>();
  c /= static_cast<double>(rays.size());
  double d = 0;
  for (const auto& r : rays) d += (r.head<2>() - c).norm();
  d /= static_cast<double>(rays.size());
  const double s = d > 0 ? std::sqrt(2.0) / d : 1.0;
  Mat3 T;
  T << s, 0, -s * c.x(), 0, s, -s * c.y(), 0, 0, 1;
  return T;
}

struct Hypothesis {
  Mat3 R;  // camera b from camera a
  Vec3 t;
  int in_front = 0;
  hand::JointSet3D points{};
  std::array<bool, hand::kNumLandmarks> ok{};
};

void score_hypothesis(Hypothesis& h, const std::vector<int>& ids, const std::vector<Vec3>& ra,
                      const std::vector<Vec3>& rb) {
  const std::vector<Mat34> P{camera_matrix(Mat3::Identity(), Vec3::Zero()), camera_matrix(h.R, h.t)};
  const Vec3 center_b = -h.R.transpose() * h.t;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto X = triangulate_normalized(P, {ra[i], rb[i]});
    if (!X) continue;
    const double za = X->z();
    const double zb = (h.R * *X + h.t).z();
    if (!(za > geom::kMinDepth && zb > geom::kMinDepth)) continue;
    const Vec3 d1 = *X;
    const Vec3 d2 = *X - center_b;
    const double cos_angle = d1.dot(d2) / (d1.norm() * d2.norm());
    const double angle = std::acos(std::clamp(cos_angle, -1.0, 1.0));
    if (!(angle >= kMinTriangulationAngle)) continue;
    h.points[ids[i]] = *X;
    h.ok[ids[i]] = true;
    ++h.in_front;
  }
}

}  // namespace

TwoViewResult init_two_view(const ObservationSet& obs, std::size_t frame_a, std::size_t frame_b,
                            double confidence_threshold) {
  if (frame_a >= obs.size() || frame_b >= obs.size()) {
    throw Error(ErrorKind::PreconditionViolation, "frame index out of range");
  }
  const auto& K = obs.intrinsics;
  const auto& fa = obs.frames[frame_a];
  const auto& fb = obs.frames[frame_b];

  std::vector<int> ids;
  std::vector<Vec3> ra, rb;
  for (int k = 0; k < hand::kNumLandmarks; ++k) {
    if (fa[k].confidence >= confidence_threshold && fb[k].confidence >= confidence_threshold &&
        fa[k].confidence > 0 && fb[k].confidence > 0) {
      ids.push_back(k);
      ra.push_back(normalized_ray(fa[k].pixel, K));
      rb.push_back(normalized_ray(fb[k].pixel, K));
    }
  }
  if (ids.size() < 8) {
    throw Error(ErrorKind::InsufficientCorrespondences,
                std::to_string(ids.size()) + " shared landmarks, need 8");
  }

  // Eight-point estimate of E with x_b^T E x_a = 0, on Hartley-normalized rays.
  const Mat3 Ta = hartley(ra), Tb = hartley(rb);
  Eigen::MatrixXd A(static_cast<Eigen::Index>(ids.size()), 9);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const Vec3 xa = Ta * ra[i], xb = Tb * rb[i];
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) A(static_cast<Eigen::Index>(i), 3 * r + c) = xb[r] * xa[c];
    }
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd_a(A, Eigen::ComputeFullV);
  const Eigen::Matrix<double, 9, 1> e = svd_a.matrixV().col(8);
  Mat3 En;
  En << e[0], e[1], e[2], e[3], e[4], e[5], e[6], e[7], e[8];
  const Mat3 E = Tb.transpose() * En * Ta;

  Eigen::JacobiSVD<Mat3> svd_e(E, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 U = svd_e.matrixU();
  Mat3 V = svd_e.matrixV();
  if (U.determinant() < 0) U = -U;
  if (V.determinant() < 0) V = -V;
  Mat3 W;
  W << 0, -1, 0, 1, 0, 0, 0, 0, 1;

  std::array<Hypothesis, 4> hyps;
  const Mat3 R1 = U * W * V.transpose();
  const Mat3 R2 = U * W.transpose() * V.transpose();
  const Vec3 t = U.col(2).normalized();
  hyps[0].R = R1; hyps[0].t = t;
  hyps[1].R = R1; hyps[1].t = -t;
  hyps[2].R = R2; hyps[2].t = t;
  hyps[3].R = R2; hyps[3].t = -t;

  Hypothesis* best = nullptr;
  for (auto& h : hyps) {
    score_hypothesis(h, ids, ra, rb);
    if (!best || h.in_front > best->in_front) best = &h;
  }
  if (best->in_front < 6) {
    throw Error(ErrorKind::DegenerateMotion,
                "only " + std::to_string(best->in_front) + " landmarks triangulate with parallax");
  }

  TwoViewResult out;
  out.relative = RigidTransform(best->R.transpose(), -(best->R.transpose() * best->t));
  out.joints = best->points;
  out.triangulated = best->ok;
  out.num_in_front = best->in_front;
  return out;
}

std::optional<Vec3> triangulate(const std::vector<RigidTransform>& poses,
                                const std::vector<PixelPoint>& pixels, const CameraIntrinsics& K) {
  if (poses.size() < 2 || poses.size() != pixels.size()) return std::nullopt;
  std::vector<Mat34> P;
  std::vector<Vec3> rays;
  for (std::size_t i = 0; i < poses.size(); ++i) {
    const Mat3 Rt = poses[i].rotation().transpose();
    P.push_back(camera_matrix(Rt, -(Rt * poses[i].translation())));
    rays.push_back(normalized_ray(pixels[i], K));
  }
  auto X = triangulate_normalized(P, rays);
  if (!X) return std::nullopt;
  for (const auto& pose : poses) {
    const Vec3 pc = pose.rotation().transpose() * (*X - pose.translation());
    if (!(pc.z() > geom::kMinDepth)) return std::nullopt;
  }
  return X;
}

std::vector<std::size_t> rank_initial_pairs(const ObservationSet& obs, double confidence_threshold) {
  struct Candidate {
    std::size_t frame;
    double score;
  };
  std::vector<Candidate> candidates;
  if (obs.frames.empty()) return {};
  const auto& f0 = obs.frames[0];
  for (std::size_t b = 1; b < obs.size(); ++b) {
    std::vector<double> displacement;
    for (int k = 0; k < hand::kNumLandmarks; ++k) {
      const auto& da = f0[k];
      const auto& db = obs.frames[b][k];
      if (da.confidence >= confidence_threshold && db.confidence >= confidence_threshold &&
          da.confidence > 0 && db.confidence > 0) {
        displacement.push_back((da.pixel - db.pixel).norm());
      }
    }
    if (displacement.size() < 8) continue;
    auto mid = displacement.begin() + static_cast<std::ptrdiff_t>(displacement.size() / 2);
    std::nth_element(displacement.begin(), mid, displacement.end());
    candidates.push_back({b, static_cast<double>(displacement.size()) * *mid});
  }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
  std::vector<std::size_t> out;
  for (const auto& c : candidates) out.push_back(c.frame);
  return out;
}

}  // namespace graspcap::sfm
