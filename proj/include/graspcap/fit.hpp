#pragma once

#include <optional>
#include <vector>

#include "graspcap/hand.hpp"
#include "graspcap/sfm.hpp"

namespace graspcap::fit {

struct PalmFit {
  RigidTransform palm_pose;
  double palm_scale = 1.0;
  double residual_rms = 0.0;  // meters, over the six rigid points
};

/// Similarity from the template's rigid points onto those of X, split into a
/// rigid palm pose and a uniform scale.
PalmFit fit_palm_pose(const hand::JointSet3D& X, const hand::HandSkeleton& skeleton,
                      const std::array<bool, hand::kNumLandmarks>* observed = nullptr);

struct IkConfig {
  double damping = 1e-2;   // Marquardt factor, dimensionless
  int max_iterations = 200;
  double tolerance = 1e-8; // landmark RMS, meters
  double step_limit = 0.5; // radians per iteration, per angle
  bool geometric_start = true;  // per-finger closed-form start when it beats the given one

  void validate() const;
};

struct IkResult {
  hand::JointAngles angles = hand::JointAngles::Zero();
  double rms_error = 0.0;
  int iterations = 0;
  bool converged = false;
  std::vector<double> rms_history;  // initial value plus one entry per accepted step
};

/// Damped least-squares IK on the finger angles with the palm held fixed.
/// Targets are the finger landmarks of X (the mask drops unobserved ones).
/// Angles are projected onto the joint limits after every step.
IkResult solve_ik(const hand::HandSkeleton& skeleton, const RigidTransform& palm_pose,
                  double palm_scale, const hand::JointSet3D& X, const IkConfig& cfg,
                  const std::array<bool, hand::kNumLandmarks>* observed = nullptr,
                  const hand::JointAngles& init = hand::JointAngles::Zero());

struct JointSolveResult {
  hand::HandParams params;
  std::vector<std::optional<RigidTransform>> camera_poses;
  double initial_objective = 0.0;
  double objective = 0.0;   // confidence-weighted Huber cost minimized
  double final_cost = 0.0;  // plain squared reprojection error over inliers
  int iterations = 0;
  bool converged = false;
  std::vector<double> cost_history;
};

/// Robust objective of projecting FK(params) through the given cameras, with
/// the same weighting as bundle adjustment.
double joint_objective(const sfm::ObservationSet& obs, const hand::HandSkeleton& skeleton,
                       const hand::HandParams& params,
                       const std::vector<std::optional<RigidTransform>>& cameras,
                       const sfm::SolverConfig& cfg, double* plain_cost = nullptr);

/// Levenberg-Marquardt over the palm pose, the 20 angles and every registered
/// camera except the anchor (frame 0). palm_scale is held fixed.
JointSolveResult joint_hand_sfm(const sfm::ObservationSet& obs, const hand::HandSkeleton& skeleton,
                                const hand::HandParams& init_params,
                                const std::vector<std::optional<RigidTransform>>& init_cams,
                                const sfm::SolverConfig& cfg);

}  // namespace graspcap::fit
