#include "graspcap/sfm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Cholesky>

#include "graspcap/detail/lm.hpp"

namespace graspcap::sfm {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
using Mat6 = Eigen::Matrix<double, 6, 6>;

bool usable(const Detection& d, double tau) { return d.confidence > 0 && d.confidence >= tau; }

// Weight applied to the squared residual in the Gauss-Newton model.
double irls_weight(double residual_norm, double confidence, double huber_width) {
  if (residual_norm <= huber_width) return confidence;
  return confidence * huber_width / residual_norm;
}

detail::LmOptions lm_options(const SolverConfig& cfg) {
  detail::LmOptions o;
  o.max_iterations = cfg.max_iterations;
  o.initial_damping = cfg.initial_damping;
  o.max_damping = cfg.max_damping;
  o.function_tolerance = cfg.function_tolerance;
  o.step_tolerance = cfg.step_tolerance;
  o.gradient_tolerance = cfg.gradient_tolerance;
  o.absolute_cost_tolerance = cfg.absolute_cost_tolerance;
  return o;
}

// Marquardt scaling with a floor so that flat directions stay invertible.
template <class Derived>
void add_damping(Eigen::MatrixBase<Derived>& H, double lambda, double floor) {
  for (Eigen::Index i = 0; i < H.rows(); ++i) H(i, i) += lambda * std::max(H(i, i), floor);
}

}  // namespace

void ObservationSet::validate() const {
  intrinsics.validate();
  if (frames.size() < 2) {
    throw Error(ErrorKind::PreconditionViolation, "an observation set needs at least 2 frames");
  }
  if (!timestamps.empty() && timestamps.size() != frames.size()) {
    throw Error(ErrorKind::PreconditionViolation, "timestamp count does not match frame count");
  }
  const double pad_u = 0.1 * intrinsics.width;
  const double pad_v = 0.1 * intrinsics.height;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    for (int k = 0; k < hand::kNumLandmarks; ++k) {
      const Detection& d = frames[i][k];
      if (!(d.confidence >= 0.0 && d.confidence <= 1.0)) {
        throw Error(ErrorKind::PreconditionViolation,
                    "frame " + std::to_string(i) + " landmark " + std::to_string(k) +
                        ": confidence outside [0,1]");
      }
      if (d.confidence == 0.0) continue;
      const bool inside = d.pixel.allFinite() && d.pixel.x() >= -pad_u &&
                          d.pixel.x() <= intrinsics.width + pad_u && d.pixel.y() >= -pad_v &&
                          d.pixel.y() <= intrinsics.height + pad_v;
      if (!inside) {
        throw Error(ErrorKind::PreconditionViolation,
                    "frame " + std::to_string(i) + " landmark " + std::to_string(k) +
                        ": detection outside the padded image");
      }
    }
  }
}

ObservationSet ObservationSet::slice(std::size_t first, std::size_t last) const {
  if (first > last || last >= frames.size()) {
    throw Error(ErrorKind::PreconditionViolation, "invalid frame range");
  }
  ObservationSet out;
  out.intrinsics = intrinsics;
  out.frames.assign(frames.begin() + static_cast<std::ptrdiff_t>(first),
                    frames.begin() + static_cast<std::ptrdiff_t>(last) + 1);
  if (!timestamps.empty()) {
    out.timestamps.assign(timestamps.begin() + static_cast<std::ptrdiff_t>(first),
                          timestamps.begin() + static_cast<std::ptrdiff_t>(last) + 1);
  }
  return out;
}

void SolverConfig::validate() const {
  const bool ok = max_iterations >= 0 && initial_damping > 0 && max_damping > 0 &&
                  function_tolerance > 0 && step_tolerance > 0 && gradient_tolerance > 0 &&
                  absolute_cost_tolerance >= 0 && huber_width > 0 &&
                  confidence_threshold >= 0 && confidence_threshold < 1;
  if (!ok) throw Error(ErrorKind::ConfigError, "invalid solver configuration");
}

std::string to_string(FrameStatus status) {
  switch (status) {
    case FrameStatus::Registered: return "registered";
    case FrameStatus::ExcludedLowConfidence: return "excluded-low-confidence";
    case FrameStatus::ExcludedUnconverged: return "excluded-unconverged";
    case FrameStatus::ExcludedTransient: return "excluded-transient";
  }
  return "unknown";
}

FrameStatus frame_status_from_string(const std::string& s) {
  for (auto st : {FrameStatus::Registered, FrameStatus::ExcludedLowConfidence,
                  FrameStatus::ExcludedUnconverged, FrameStatus::ExcludedTransient}) {
    if (to_string(st) == s) return st;
  }
  throw Error(ErrorKind::ParseError, "unknown frame status '" + s + "'");
}

std::size_t SfMSolution::num_inliers() const {
  std::size_t n = 0;
  for (const auto& f : inliers) n += static_cast<std::size_t>(std::count(f.begin(), f.end(), true));
  return n;
}

double SfMSolution::rms_residual() const {
  const auto n = num_inliers();
  return n == 0 ? 0.0 : std::sqrt(final_cost / (2.0 * static_cast<double>(n)));
}

double robust_penalty(double residual_norm, double confidence, double huber_width) {
  if (residual_norm <= huber_width) return confidence * residual_norm * residual_norm;
  return confidence * (2.0 * huber_width * residual_norm - huber_width * huber_width);
}

void score_solution(const ObservationSet& obs, const SolverConfig& cfg, SfMSolution& sol) {
  const std::size_t N = obs.size();
  sol.residuals.assign(N, {});
  sol.inliers.assign(N, {});
  sol.final_cost = 0.0;
  sol.objective = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    if (i >= sol.camera_poses.size() || !sol.camera_poses[i]) continue;
    for (int k = 0; k < hand::kNumLandmarks; ++k) {
      const Detection& d = obs.frames[i][k];
      if (!sol.observed[k] || !usable(d, cfg.confidence_threshold)) continue;
      try {
        const double r = (geom::project(sol.joints[k], *sol.camera_poses[i], obs.intrinsics) - d.pixel).norm();
        sol.residuals[i][k] = r;
        sol.inliers[i][k] = true;
        sol.final_cost += r * r;
        sol.objective += robust_penalty(r, d.confidence, cfg.huber_width);
      } catch (const Error&) {
        // Cheirality violation: the observation is invalid for this state.
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Single-camera registration.

namespace {

struct CameraResectionProblem {
  const hand::JointSet3D& joints;
  std::vector<int> ids;
  const FrameDetections& frame;
  const CameraIntrinsics& K;
  double huber;
  RigidTransform pose;

  Mat6 H;
  Vec6 g;
  Vec6 step;

  double objective_at(const RigidTransform& T) const {
    double total = 0.0;
    for (int k : ids) {
      const Vec3 p = T.rotation().transpose() * (joints[k] - T.translation());
      if (!(p.z() > geom::kMinDepth)) return kInf;
      const double r = (geom::project(joints[k], T, K) - frame[k].pixel).norm();
      total += robust_penalty(r, frame[k].confidence, huber);
    }
    return total;
  }

  double cost() { return objective_at(pose); }

  double linearize() {
    H.setZero();
    g.setZero();
    for (int k : ids) {
      const auto pj = geom::project_with_jacobian(joints[k], pose, K);
      const Vec2 r = pj.pixel - frame[k].pixel;
      const double w = irls_weight(r.norm(), frame[k].confidence, huber);
      H += pj.d_pose.transpose() * w * pj.d_pose;
      g += pj.d_pose.transpose() * (w * r);
    }
    return g.cwiseAbs().maxCoeff();
  }

  bool solve_step(double lambda) {
    Mat6 A = H;
    add_damping(A, lambda, 1e-12 * std::max(1.0, H.diagonal().maxCoeff()));
    Eigen::LDLT<Mat6> ldlt(A);
    if (ldlt.info() != Eigen::Success) return false;
    step = ldlt.solve(-g);
    return step.allFinite();
  }

  double step_norm() const { return step.norm(); }
  double state_norm() const { return pose.translation().norm() + 1.0; }
  double trial_cost() const { return objective_at(pose.perturbed(step)); }
  void accept_step() { pose = pose.perturbed(step); }
};

}  // namespace

RegistrationResult register_frame(const hand::JointSet3D& joints,
                                  const std::array<bool, hand::kNumLandmarks>& known,
                                  const FrameDetections& frame, const CameraIntrinsics& K,
                                  const RigidTransform& init, const SolverConfig& cfg) {
  std::vector<int> ids;
  for (int k = 0; k < hand::kNumLandmarks; ++k) {
    if (known[k] && usable(frame[k], cfg.confidence_threshold)) ids.push_back(k);
  }
  if (ids.size() < 4) {
    throw Error(ErrorKind::InsufficientCorrespondences,
                std::to_string(ids.size()) + " usable landmarks, need 4");
  }
  CameraResectionProblem problem{joints, ids, frame, K, cfg.huber_width, init, {}, {}, {}};
  const auto report = detail::levenberg_marquardt(problem, lm_options(cfg));

  RegistrationResult out;
  out.pose = problem.pose;
  out.iterations = report.iterations;
  out.objective = report.final_cost;
  out.converged = report.converged && std::isfinite(report.final_cost);
  return out;
}

// ---------------------------------------------------------------------------
// Bundle adjustment with the cameras eliminated by a Schur complement onto the
// (at most 63) point coordinates.

namespace {

class BundleProblem {
public:
  BundleProblem(const ObservationSet& obs, const SolverConfig& cfg, const SfMSolution& init)
      : obs_(obs), cfg_(cfg), joints_(init.joints), poses_(init.camera_poses) {
    point_slot_.fill(-1);
    for (int k = 0; k < hand::kNumLandmarks; ++k) {
      if (init.observed[k]) {
        point_slot_[k] = static_cast<int>(points_.size());
        points_.push_back(k);
      }
    }
    for (std::size_t i = 1; i < poses_.size(); ++i) {
      if (poses_[i]) cams_.push_back(i);
    }
    for (std::size_t i = 0; i < poses_.size(); ++i) {
      if (!poses_[i]) continue;
      for (int k = 0; k < hand::kNumLandmarks; ++k) {
        if (init.observed[k] && usable(obs.frames[i][k], cfg.confidence_threshold)) {
          terms_.push_back({i, k});
        }
      }
    }
    cam_slot_.assign(poses_.size(), -1);
    for (std::size_t c = 0; c < cams_.size(); ++c) cam_slot_[cams_[c]] = static_cast<int>(c);
  }

  const hand::JointSet3D& joints() const { return joints_; }
  const std::vector<std::optional<RigidTransform>>& poses() const { return poses_; }

  double cost() const { return objective_at(joints_, poses_); }

  double linearize() {
    const auto P = static_cast<Eigen::Index>(3 * points_.size());
    const std::size_t C = cams_.size();
    Hcc_.assign(C, Mat6::Zero());
    gc_.assign(C, Vec6::Zero());
    Hcp_.assign(C, Eigen::Matrix<double, 6, Eigen::Dynamic>::Zero(6, P));
    Hpp_ = Eigen::MatrixXd::Zero(P, P);
    gp_ = Eigen::VectorXd::Zero(P);

    for (const auto& [i, k] : terms_) {
      const Detection& d = obs_.frames[i][k];
      const auto pj = geom::project_with_jacobian(joints_[k], *poses_[i], obs_.intrinsics);
      const Vec2 r = pj.pixel - d.pixel;
      const double w = irls_weight(r.norm(), d.confidence, cfg_.huber_width);
      const Eigen::Index p = 3 * point_slot_[k];
      Hpp_.block<3, 3>(p, p) += pj.d_point.transpose() * w * pj.d_point;
      gp_.segment<3>(p) += pj.d_point.transpose() * (w * r);
      const int c = cam_slot_[i];
      if (c >= 0) {
        Hcc_[c] += pj.d_pose.transpose() * w * pj.d_pose;
        gc_[c] += pj.d_pose.transpose() * (w * r);
        Hcp_[c].middleCols<3>(p) += pj.d_pose.transpose() * w * pj.d_point;
      }
    }
    double gmax = gp_.size() ? gp_.cwiseAbs().maxCoeff() : 0.0;
    for (const auto& g : gc_) gmax = std::max(gmax, g.cwiseAbs().maxCoeff());
    return gmax;
  }

  bool solve_step(double lambda) {
    double diag_max = 1.0;
    if (Hpp_.size()) diag_max = std::max(diag_max, Hpp_.diagonal().maxCoeff());
    for (const auto& H : Hcc_) diag_max = std::max(diag_max, H.diagonal().maxCoeff());
    const double floor = 1e-12 * diag_max;

    Eigen::MatrixXd S = Hpp_;
    add_damping(S, lambda, floor);
    Eigen::VectorXd rhs = -gp_;
    std::vector<Eigen::LDLT<Mat6>> cam_solvers;
    cam_solvers.reserve(cams_.size());
    for (std::size_t c = 0; c < cams_.size(); ++c) {
      Mat6 A = Hcc_[c];
      add_damping(A, lambda, floor);
      cam_solvers.emplace_back(A);
      if (cam_solvers.back().info() != Eigen::Success) return false;
      const Eigen::Matrix<double, 6, Eigen::Dynamic> AinvHcp = cam_solvers.back().solve(Hcp_[c]);
      S.noalias() -= Hcp_[c].transpose() * AinvHcp;
      rhs.noalias() += AinvHcp.transpose() * gc_[c];
    }
    Eigen::LDLT<Eigen::MatrixXd> ldlt(S);
    if (ldlt.info() != Eigen::Success) return false;
    dp_ = ldlt.solve(rhs);
    if (!dp_.allFinite()) return false;
    dc_.resize(cams_.size());
    for (std::size_t c = 0; c < cams_.size(); ++c) {
      dc_[c] = cam_solvers[c].solve(-gc_[c] - Hcp_[c] * dp_);
      if (!dc_[c].allFinite()) return false;
    }
    return true;
  }

  double step_norm() const {
    double s = dp_.squaredNorm();
    for (const auto& d : dc_) s += d.squaredNorm();
    return std::sqrt(s);
  }

  double state_norm() const {
    double s = 0.0;
    for (int k : points_) s += joints_[k].squaredNorm();
    for (std::size_t i : cams_) s += poses_[i]->translation().squaredNorm();
    return std::sqrt(s);
  }

  double trial_cost() const {
    auto [j, p] = stepped();
    return objective_at(j, p);
  }

  void accept_step() { std::tie(joints_, poses_) = stepped(); }

private:
  std::pair<hand::JointSet3D, std::vector<std::optional<RigidTransform>>> stepped() const {
    hand::JointSet3D j = joints_;
    auto p = poses_;
    for (std::size_t s = 0; s < points_.size(); ++s) {
      j[points_[s]] += dp_.segment<3>(static_cast<Eigen::Index>(3 * s));
    }
    for (std::size_t c = 0; c < cams_.size(); ++c) p[cams_[c]] = p[cams_[c]]->perturbed(dc_[c]);
    return {j, p};
  }

  double objective_at(const hand::JointSet3D& joints,
                      const std::vector<std::optional<RigidTransform>>& poses) const {
    double total = 0.0;
    for (const auto& [i, k] : terms_) {
      const RigidTransform& T = *poses[i];
      const Vec3 pc = T.rotation().transpose() * (joints[k] - T.translation());
      if (!(pc.z() > geom::kMinDepth)) return kInf;
      const Detection& d = obs_.frames[i][k];
      const double r = (geom::project(joints[k], T, obs_.intrinsics) - d.pixel).norm();
      total += robust_penalty(r, d.confidence, cfg_.huber_width);
    }
    return total;
  }

  struct Term {
    std::size_t frame;
    int landmark;
  };

  const ObservationSet& obs_;
  const SolverConfig& cfg_;
  hand::JointSet3D joints_;
  std::vector<std::optional<RigidTransform>> poses_;
  std::vector<int> points_;
  std::array<int, hand::kNumLandmarks> point_slot_{};
  std::vector<std::size_t> cams_;
  std::vector<int> cam_slot_;
  std::vector<Term> terms_;

  std::vector<Mat6> Hcc_;
  std::vector<Vec6> gc_;
  std::vector<Eigen::Matrix<double, 6, Eigen::Dynamic>> Hcp_;
  Eigen::MatrixXd Hpp_;
  Eigen::VectorXd gp_;
  Eigen::VectorXd dp_;
  std::vector<Vec6> dc_;
};

}  // namespace

SfMSolution bundle_adjust(const ObservationSet& obs, const SfMSolution& init,
                          const SolverConfig& cfg) {
  cfg.validate();
  if (init.camera_poses.size() != obs.size()) {
    throw Error(ErrorKind::PreconditionViolation, "solution and observation frame counts differ");
  }
  if (!init.camera_poses[0] || geom::rotation_distance(init.camera_poses[0]->rotation(), Mat3::Identity()) > 1e-9 ||
      init.camera_poses[0]->translation().norm() > 1e-9) {
    throw Error(ErrorKind::PreconditionViolation, "camera 0 must be the identity anchor");
  }
  const auto registered = std::count_if(init.camera_poses.begin(), init.camera_poses.end(),
                                        [](const auto& p) { return p.has_value(); });
  if (registered < 2) {
    throw Error(ErrorKind::PreconditionViolation, "bundle adjustment needs 2 registered frames");
  }

  BundleProblem problem(obs, cfg, init);
  const auto report = detail::levenberg_marquardt(problem, lm_options(cfg));

  SfMSolution out = init;
  out.joints = problem.joints();
  out.camera_poses = problem.poses();
  out.camera_poses[0] = RigidTransform::identity();
  for (int k = 0; k < hand::kNumLandmarks; ++k) {
    if (!out.observed[k]) out.joints[k] = Vec3::Zero();
  }
  score_solution(obs, cfg, out);
  out.iterations = report.iterations;
  out.converged = report.converged;
  out.cost_history = report.cost_history;
  return out;
}

SfMSolution rescale_to_metric(const SfMSolution& solution, double s) {
  if (!(s > 0) || !std::isfinite(s)) {
    throw Error(ErrorKind::PreconditionViolation, "rescale factor must be positive");
  }
  SfMSolution out = solution;
  for (auto& X : out.joints) X *= s;
  for (auto& pose : out.camera_poses) {
    if (pose) pose = RigidTransform(pose->rotation(), pose->translation() * s);
  }
  return out;
}

SfMSolution reconstruct(const ObservationSet& obs, const SolverConfig& cfg) {
  obs.validate();
  cfg.validate();
  const double tau = cfg.confidence_threshold;
  const std::size_t N = obs.size();

  const auto candidates = rank_initial_pairs(obs, tau);
  if (candidates.empty()) {
    throw Error(ErrorKind::InsufficientCorrespondences,
                "no frame shares 8 confident landmarks with frame 0");
  }
  std::optional<TwoViewResult> two_view;
  std::size_t second = 0;
  std::string last_error;
  for (std::size_t b : candidates) {
    try {
      two_view = init_two_view(obs, 0, b, tau);
      second = b;
      break;
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::DegenerateMotion && e.kind() != ErrorKind::InsufficientCorrespondences) throw;
      last_error = e.what();
    }
  }
  if (!two_view) throw Error(ErrorKind::DegenerateMotion, "no usable initial pair: " + last_error);

  SfMSolution sol;
  sol.joints = two_view->joints;
  sol.observed = two_view->triangulated;
  sol.camera_poses.assign(N, std::nullopt);
  sol.frame_status.assign(N, FrameStatus::ExcludedLowConfidence);
  sol.camera_poses[0] = RigidTransform::identity();
  sol.camera_poses[second] = two_view->relative;

  RigidTransform previous = RigidTransform::identity();
  for (std::size_t i = 1; i < N; ++i) {
    if (i == second) {
      previous = *sol.camera_poses[i];
      continue;
    }
    try {
      const auto reg = register_frame(sol.joints, sol.observed, obs.frames[i], obs.intrinsics, previous, cfg);
      if (reg.converged) {
        sol.camera_poses[i] = reg.pose;
        previous = reg.pose;
      } else {
        sol.frame_status[i] = FrameStatus::ExcludedUnconverged;
      }
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::InsufficientCorrespondences) throw;
      sol.frame_status[i] = FrameStatus::ExcludedLowConfidence;
    }
  }

  // Triangulate every landmark from all registered views.
  for (int k = 0; k < hand::kNumLandmarks; ++k) {
    std::vector<RigidTransform> poses;
    std::vector<PixelPoint> pixels;
    for (std::size_t i = 0; i < N; ++i) {
      if (sol.camera_poses[i] && usable(obs.frames[i][k], tau)) {
        poses.push_back(*sol.camera_poses[i]);
        pixels.push_back(obs.frames[i][k].pixel);
      }
    }
    if (auto X = triangulate(poses, pixels, obs.intrinsics)) {
      sol.joints[k] = *X;
      sol.observed[k] = true;
    }
  }

  for (std::size_t i = 0; i < N; ++i) {
    if (sol.camera_poses[i]) sol.frame_status[i] = FrameStatus::Registered;
  }
  return bundle_adjust(obs, sol, cfg);
}

}  // namespace graspcap::sfm
