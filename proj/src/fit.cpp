#include "graspcap/fit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Cholesky>

#include "graspcap/detail/lm.hpp"

namespace graspcap::fit {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr int kP = hand::kNumParams;
using MatP = Eigen::Matrix<double, kP, kP>;
using VecP = Eigen::Matrix<double, kP, 1>;
using Mat6 = Eigen::Matrix<double, 6, 6>;

}  // namespace

PalmFit fit_palm_pose(const hand::JointSet3D& X, const hand::HandSkeleton& skeleton,
                      const std::array<bool, hand::kNumLandmarks>* observed) {
  if (observed) {
    for (int k : hand::kRigidLandmarks) {
      if (!(*observed)[k]) {
        throw Error(ErrorKind::DegenerateConfiguration,
                    "rigid landmark " + std::to_string(k) + " has no 3D estimate");
      }
    }
  }
  const auto src = hand::rigid_points(skeleton.rest_pose());
  const auto dst = hand::rigid_points(X);
  const auto sim = geom::umeyama_align(src, dst);

  PalmFit out;
  out.palm_pose = sim.rigid_part();
  out.palm_scale = sim.scale();
  double sq = 0.0;
  for (std::size_t i = 0; i < src.size(); ++i) sq += (sim * src[i] - dst[i]).squaredNorm();
  out.residual_rms = std::sqrt(sq / static_cast<double>(src.size()));
  return out;
}

void IkConfig::validate() const {
  if (!(damping > 0) || !(tolerance > 0) || max_iterations < 0 || !(step_limit > 0)) {
    throw Error(ErrorKind::ConfigError, "invalid IK configuration");
  }
}

namespace {

// Angle about the unit axis w that turns p towards q.
double rotate_onto(const Vec3& w, const Vec3& p, const Vec3& q) {
  const Vec3 pp = p - w * w.dot(p);
  const Vec3 qp = q - w * w.dot(q);
  return std::atan2(w.dot(pp.cross(qp)), pp.dot(qp));
}

// Solutions (a, b) of exp(w1 a) exp(w2 b) p = q for |p| = |q|. When q is out
// of reach the intermediate vector falls back to the closest one.
std::vector<std::pair<double, double>> rotate_onto2(const Vec3& w1, const Vec3& w2, const Vec3& p,
                                                    const Vec3& q) {
  const double c12 = w1.dot(w2);
  const double den = c12 * c12 - 1.0;
  if (std::abs(den) < 1e-9) return {};
  const double alpha = (c12 * w2.dot(p) - w1.dot(q)) / den;
  const double beta = (c12 * w1.dot(q) - w2.dot(p)) / den;
  const Vec3 n = w1.cross(w2);
  const double g2 = (p.squaredNorm() - alpha * alpha - beta * beta - 2 * alpha * beta * c12) / n.squaredNorm();
  const double g = std::sqrt(std::max(g2, 0.0));
  std::vector<std::pair<double, double>> out;
  for (double sign : {1.0, -1.0}) {
    const Vec3 c = alpha * w1 + beta * w2 + sign * g * n;
    out.emplace_back(rotate_onto(w1, c, q), rotate_onto(w2, p, c));
  }
  return out;
}

double limit_violation(const hand::AngleSpec& spec, double angle) {
  return std::max({0.0, spec.lower - angle, angle - spec.upper});
}

// Closed-form start: walk each finger from its base and turn every pivot so
// that the next bone points at its target.
hand::JointAngles geometric_start(const hand::HandSkeleton& skeleton, const RigidTransform& palm_pose,
                                  double palm_scale, const hand::JointSet3D& X,
                                  const std::array<bool, hand::kNumLandmarks>* observed,
                                  hand::JointAngles angles) {
  const auto& lms = skeleton.landmarks();
  const auto& specs = skeleton.angles();
  const Mat3 Rt = palm_pose.rotation().transpose();
  auto local = [&](int k) -> Vec3 { return Rt * (X[k] - palm_pose.translation()) / palm_scale; };
  auto have = [&](int k) { return !observed || (*observed)[k]; };

  for (int f = 0; f < 5; ++f) {
    const int base = hand::finger_base(f);
    Mat3 G = Mat3::Identity();
    for (int j = base; j < base + 3; ++j) {
      const int child = j + 1;
      if (skeleton.parent(child) != j || !have(child) || (j != base && !have(j))) break;
      const Vec3 from = j == base ? lms[j].rest : local(j);
      const Vec3 v = lms[child].rest - lms[j].rest;
      Vec3 d = G.transpose() * (local(child) - from);
      if (d.norm() < 1e-9) break;
      d *= v.norm() / d.norm();

      const auto& ids = skeleton.angles_at(j);
      if (ids.size() == 1) {
        const auto& s = specs[ids[0]];
        angles[ids[0]] = std::clamp(rotate_onto(s.axis, v, d), s.lower, s.upper);
      } else if (ids.size() == 2) {
        const auto& s1 = specs[ids[0]];
        const auto& s2 = specs[ids[1]];
        const auto sols = rotate_onto2(s1.axis, s2.axis, v, d);
        if (sols.empty()) break;
        auto score = [&](const std::pair<double, double>& ab) {
          return std::make_pair(limit_violation(s1, ab.first) + limit_violation(s2, ab.second),
                                std::abs(ab.first) + std::abs(ab.second));
        };
        const auto& best = score(sols[0]) <= score(sols[1]) ? sols[0] : sols[1];
        angles[ids[0]] = std::clamp(best.first, s1.lower, s1.upper);
        angles[ids[1]] = std::clamp(best.second, s2.lower, s2.upper);
      } else {
        break;
      }
      for (int k : ids) G = G * geom::rotation_exp(specs[k].axis * angles[k]);
    }
  }
  return angles;
}

}  // namespace

IkResult solve_ik(const hand::HandSkeleton& skeleton, const RigidTransform& palm_pose,
                  double palm_scale, const hand::JointSet3D& X, const IkConfig& cfg,
                  const std::array<bool, hand::kNumLandmarks>* observed,
                  const hand::JointAngles& init) {
  cfg.validate();
  std::vector<int> targets;
  for (int k : hand::kFingerLandmarks) {
    if (!observed || (*observed)[k]) targets.push_back(k);
  }

  hand::HandParams params;
  params.palm_pose = palm_pose;
  params.palm_scale = palm_scale;
  params.angles = skeleton.clamp(init);

  const auto n = static_cast<double>(std::max<std::size_t>(targets.size(), 1));
  auto rms_of = [&](const hand::JointSet3D& joints) {
    double sq = 0.0;
    for (int k : targets) sq += (joints[k] - X[k]).squaredNorm();
    return std::sqrt(sq / n);
  };

  // Fingers are independent, so each one starts from whichever of the caller's
  // guess and the geometric guess fits it better.
  if (cfg.geometric_start) {
    hand::HandParams geo = params;
    geo.angles = geometric_start(skeleton, palm_pose, palm_scale, X, observed, params.angles);
    const auto a = hand::forward_kinematics(skeleton, params);
    const auto b = hand::forward_kinematics(skeleton, geo);
    for (int f = 0; f < 5; ++f) {
      double ea = 0.0, eb = 0.0;
      for (int k : targets) {
        if ((k - 1) / 4 != f) continue;
        ea += (a[k] - X[k]).squaredNorm();
        eb += (b[k] - X[k]).squaredNorm();
      }
      if (eb < ea) {
        for (int k = 0; k < hand::kNumAngles; ++k) {
          const int pivot = skeleton.angles()[k].pivot;
          if (pivot > 0 && (pivot - 1) / 4 == f) params.angles[k] = geo.angles[k];
        }
      }
    }
  }

  IkResult out;
  hand::FkJacobian J;
  auto joints = hand::forward_kinematics(skeleton, params, &J);
  double rms = rms_of(joints);
  out.rms_history.push_back(rms);

  double lambda = cfg.damping;
  while (rms >= cfg.tolerance && out.iterations < cfg.max_iterations && lambda < 1e16) {
    ++out.iterations;

    Eigen::Matrix<double, hand::kNumAngles, hand::kNumAngles> H =
        Eigen::Matrix<double, hand::kNumAngles, hand::kNumAngles>::Zero();
    hand::JointAngles g = hand::JointAngles::Zero();
    for (int k : targets) {
      const auto Jk = J.block<3, hand::kNumAngles>(3 * k, 6);
      const Vec3 r = joints[k] - X[k];
      H += Jk.transpose() * Jk;
      g += Jk.transpose() * r;
    }
    const double floor = 1e-9 * std::max(H.diagonal().maxCoeff(), 1e-12);
    for (int a = 0; a < hand::kNumAngles; ++a) H(a, a) += lambda * std::max(H(a, a), floor);

    hand::JointAngles step = H.ldlt().solve(-g);
    if (!step.allFinite()) {
      lambda *= 2.0;
      continue;
    }
    step = step.cwiseMax(-cfg.step_limit).cwiseMin(cfg.step_limit);

    hand::HandParams trial = params;
    trial.angles = skeleton.clamp(params.angles + step);
    hand::FkJacobian J_trial;
    const auto joints_trial = hand::forward_kinematics(skeleton, trial, &J_trial);
    const double rms_trial = rms_of(joints_trial);
    if (rms_trial <= rms - 1e-12) {
      params = trial;
      joints = joints_trial;
      J = J_trial;
      rms = rms_trial;
      out.rms_history.push_back(rms);
      lambda = std::max(lambda / 2.0, 1e-12);
    } else {
      lambda *= 2.0;
    }
  }

  out.angles = params.angles;
  out.rms_error = rms;
  out.converged = rms < cfg.tolerance;
  return out;
}

// ---------------------------------------------------------------------------
// Hand + camera joint solve.

namespace {

struct Term {
  std::size_t frame;
  int landmark;
};

std::vector<Term> joint_terms(const sfm::ObservationSet& obs,
                              const std::vector<std::optional<RigidTransform>>& cameras,
                              double tau) {
  std::vector<Term> terms;
  for (std::size_t i = 0; i < obs.size() && i < cameras.size(); ++i) {
    if (!cameras[i]) continue;
    for (int k = 0; k < hand::kNumLandmarks; ++k) {
      const auto& d = obs.frames[i][k];
      if (d.confidence > 0 && d.confidence >= tau) terms.push_back({i, k});
    }
  }
  return terms;
}

double objective_over(const sfm::ObservationSet& obs, const std::vector<Term>& terms,
                      const hand::JointSet3D& joints,
                      const std::vector<std::optional<RigidTransform>>& cameras, double huber,
                      double* plain) {
  double total = 0.0, sq = 0.0;
  for (const auto& [i, k] : terms) {
    const RigidTransform& T = *cameras[i];
    const Vec3 pc = T.rotation().transpose() * (joints[k] - T.translation());
    if (!(pc.z() > geom::kMinDepth)) {
      if (plain) *plain = kInf;
      return kInf;
    }
    const auto& d = obs.frames[i][k];
    const double r = (geom::project(joints[k], T, obs.intrinsics) - d.pixel).norm();
    total += sfm::robust_penalty(r, d.confidence, huber);
    sq += r * r;
  }
  if (plain) *plain = sq;
  return total;
}

class JointProblem {
public:
  JointProblem(const sfm::ObservationSet& obs, const hand::HandSkeleton& skeleton,
               const sfm::SolverConfig& cfg, hand::HandParams params,
               std::vector<std::optional<RigidTransform>> cams)
      : obs_(obs), skel_(skeleton), cfg_(cfg), params_(std::move(params)), cams_(std::move(cams)),
        terms_(joint_terms(obs, cams_, cfg.confidence_threshold)) {
    slot_.assign(cams_.size(), -1);
    for (std::size_t i = 1; i < cams_.size(); ++i) {
      if (cams_[i]) {
        slot_[i] = static_cast<int>(free_.size());
        free_.push_back(i);
      }
    }
  }

  const hand::HandParams& params() const { return params_; }
  const std::vector<std::optional<RigidTransform>>& cameras() const { return cams_; }

  double cost() const { return evaluate(params_, cams_); }

  double linearize() {
    hand::FkJacobian Jfk;
    const auto joints = hand::forward_kinematics(skel_, params_, &Jfk);
    Hhh_.setZero();
    gh_.setZero();
    Hcc_.assign(free_.size(), Mat6::Zero());
    gc_.assign(free_.size(), Vec6::Zero());
    Hch_.assign(free_.size(), Eigen::Matrix<double, 6, kP>::Zero());
    for (const auto& [i, k] : terms_) {
      const auto& d = obs_.frames[i][k];
      const auto pj = geom::project_with_jacobian(joints[k], *cams_[i], obs_.intrinsics);
      const Vec2 r = pj.pixel - d.pixel;
      const double rn = r.norm();
      const double w = rn <= cfg_.huber_width ? d.confidence : d.confidence * cfg_.huber_width / rn;
      const Eigen::Matrix<double, 2, kP> Jh = pj.d_point * Jfk.block<3, kP>(3 * k, 0);
      Hhh_ += Jh.transpose() * w * Jh;
      gh_ += Jh.transpose() * (w * r);
      const int c = slot_[i];
      if (c >= 0) {
        Hcc_[c] += pj.d_pose.transpose() * w * pj.d_pose;
        gc_[c] += pj.d_pose.transpose() * (w * r);
        Hch_[c] += pj.d_pose.transpose() * w * Jh;
      }
    }
    double gmax = gh_.cwiseAbs().maxCoeff();
    for (const auto& g : gc_) gmax = std::max(gmax, g.cwiseAbs().maxCoeff());
    return gmax;
  }

  bool solve_step(double lambda) {
    double diag_max = std::max(1.0, Hhh_.diagonal().maxCoeff());
    for (const auto& H : Hcc_) diag_max = std::max(diag_max, H.diagonal().maxCoeff());
    const double floor = 1e-12 * diag_max;
    auto damp = [&](auto& H) {
      for (Eigen::Index a = 0; a < H.rows(); ++a) H(a, a) += lambda * std::max(H(a, a), floor);
    };

    MatP S = Hhh_;
    damp(S);
    VecP rhs = -gh_;
    std::vector<Eigen::LDLT<Mat6>> solvers;
    solvers.reserve(free_.size());
    for (std::size_t c = 0; c < free_.size(); ++c) {
      Mat6 A = Hcc_[c];
      damp(A);
      solvers.emplace_back(A);
      if (solvers.back().info() != Eigen::Success) return false;
      const Eigen::Matrix<double, 6, kP> AinvHch = solvers.back().solve(Hch_[c]);
      S.noalias() -= Hch_[c].transpose() * AinvHch;
      rhs.noalias() += AinvHch.transpose() * gc_[c];
    }
    Eigen::LDLT<MatP> ldlt(S);
    if (ldlt.info() != Eigen::Success) return false;
    dh_ = ldlt.solve(rhs);
    if (!dh_.allFinite()) return false;
    dc_.resize(free_.size());
    for (std::size_t c = 0; c < free_.size(); ++c) {
      dc_[c] = solvers[c].solve(-gc_[c] - Hch_[c] * dh_);
      if (!dc_[c].allFinite()) return false;
    }
    return true;
  }

  double step_norm() const {
    double s = dh_.squaredNorm();
    for (const auto& d : dc_) s += d.squaredNorm();
    return std::sqrt(s);
  }

  double state_norm() const { return params_.palm_pose.translation().norm() + params_.angles.norm() + 1.0; }

  double trial_cost() const {
    auto [p, c] = stepped();
    return evaluate(p, c);
  }

  void accept_step() { std::tie(params_, cams_) = stepped(); }

private:
  std::pair<hand::HandParams, std::vector<std::optional<RigidTransform>>> stepped() const {
    hand::HandParams p = params_.perturbed(dh_);
    p.angles = skel_.clamp(p.angles);
    auto c = cams_;
    for (std::size_t s = 0; s < free_.size(); ++s) c[free_[s]] = c[free_[s]]->perturbed(dc_[s]);
    return {p, c};
  }

  double evaluate(const hand::HandParams& p, const std::vector<std::optional<RigidTransform>>& c) const {
    const auto joints = hand::forward_kinematics(skel_, p);
    return objective_over(obs_, terms_, joints, c, cfg_.huber_width, nullptr);
  }

  const sfm::ObservationSet& obs_;
  const hand::HandSkeleton& skel_;
  const sfm::SolverConfig& cfg_;
  hand::HandParams params_;
  std::vector<std::optional<RigidTransform>> cams_;
  std::vector<Term> terms_;
  std::vector<std::size_t> free_;
  std::vector<int> slot_;

  MatP Hhh_;
  VecP gh_;
  std::vector<Mat6> Hcc_;
  std::vector<Vec6> gc_;
  std::vector<Eigen::Matrix<double, 6, kP>> Hch_;
  VecP dh_;
  std::vector<Vec6> dc_;
};

}  // namespace

double joint_objective(const sfm::ObservationSet& obs, const hand::HandSkeleton& skeleton,
                       const hand::HandParams& params,
                       const std::vector<std::optional<RigidTransform>>& cameras,
                       const sfm::SolverConfig& cfg, double* plain_cost) {
  const auto terms = joint_terms(obs, cameras, cfg.confidence_threshold);
  const auto joints = hand::forward_kinematics(skeleton, params);
  return objective_over(obs, terms, joints, cameras, cfg.huber_width, plain_cost);
}

JointSolveResult joint_hand_sfm(const sfm::ObservationSet& obs, const hand::HandSkeleton& skeleton,
                                const hand::HandParams& init_params,
                                const std::vector<std::optional<RigidTransform>>& init_cams,
                                const sfm::SolverConfig& cfg) {
  cfg.validate();
  init_params.validate(skeleton);
  if (init_cams.size() != obs.size()) {
    throw Error(ErrorKind::PreconditionViolation, "camera list and observation frame counts differ");
  }
  if (!init_cams[0]) throw Error(ErrorKind::PreconditionViolation, "frame 0 must be registered");

  JointProblem problem(obs, skeleton, cfg, init_params, init_cams);
  detail::LmOptions o;
  o.max_iterations = cfg.max_iterations;
  o.initial_damping = cfg.initial_damping;
  o.max_damping = cfg.max_damping;
  o.function_tolerance = cfg.function_tolerance;
  o.step_tolerance = cfg.step_tolerance;
  o.gradient_tolerance = cfg.gradient_tolerance;
  o.absolute_cost_tolerance = cfg.absolute_cost_tolerance;
  const auto report = detail::levenberg_marquardt(problem, o);

  JointSolveResult out;
  out.params = problem.params();
  out.camera_poses = problem.cameras();
  out.initial_objective = report.initial_cost;
  out.objective = joint_objective(obs, skeleton, out.params, out.camera_poses, cfg, &out.final_cost);
  out.iterations = report.iterations;
  out.converged = report.converged;
  out.cost_history = report.cost_history;
  return out;
}

}  // namespace graspcap::fit
