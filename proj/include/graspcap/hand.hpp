#pragma once

#include <array>
#include <string>
#include <string_view>
#include <vector>

#include "graspcap/geom.hpp"

namespace graspcap::hand {

inline constexpr int kNumLandmarks = 21;
inline constexpr int kNumAngles = 20;
/// Palm tangent (translation, rotation) followed by the joint angles.
inline constexpr int kNumParams = 6 + kNumAngles;

/// Wrist plus the five finger bases of the 21-point detector layout. These move
/// only with the palm.
inline constexpr std::array<int, 6> kRigidLandmarks{0, 1, 5, 9, 13, 17};

/// Landmarks whose positions depend on finger angles.
inline constexpr std::array<int, 15> kFingerLandmarks{2, 3, 4, 6, 7, 8, 10, 11, 12,
                                                      14, 15, 16, 18, 19, 20};

/// First landmark of finger f (thumb = 0 ... little = 4).
constexpr int finger_base(int finger) { return 1 + 4 * finger; }

using JointSet3D = std::array<Vec3, kNumLandmarks>;
using JointAngles = Eigen::Matrix<double, kNumAngles, 1>;
using FkJacobian = Eigen::Matrix<double, 3 * kNumLandmarks, kNumParams>;

struct Landmark {
  std::string name;
  int parent = -1;
  Vec3 rest = Vec3::Zero();
};

struct AngleSpec {
  std::string name;
  int pivot = 0;
  Vec3 axis = Vec3::UnitX();
  double lower = 0;  // radians
  double upper = 0;
};

/// Fixed-topology 20-DOF hand. Immutable after construction.
class HandSkeleton {
public:
  /// Parses the template text format (see data/hand_template.txt).
  static HandSkeleton parse(std::string_view text, const std::string& origin = "<memory>");
  static HandSkeleton load(const std::string& path);
  /// The template compiled into the library.
  static const HandSkeleton& default_template();

  std::string to_text() const;

  const std::array<Landmark, kNumLandmarks>& landmarks() const { return landmarks_; }
  const std::array<AngleSpec, kNumAngles>& angles() const { return angles_; }
  int parent(int landmark) const { return landmarks_[landmark].parent; }
  JointSet3D rest_pose() const;
  /// Distance from a landmark to its parent in the template.
  double bone_length(int landmark) const;
  /// Angles pivoting on a landmark, in composition order.
  const std::vector<int>& angles_at(int landmark) const { return angles_at_[landmark]; }
  /// Strict descendants of a landmark.
  const std::vector<int>& descendants(int landmark) const { return descendants_[landmark]; }
  /// Landmarks ordered so that every parent precedes its children.
  const std::array<int, kNumLandmarks>& topological_order() const { return order_; }

  bool within_limits(const JointAngles& angles, double tol = 0.0) const;
  JointAngles clamp(const JointAngles& angles) const;

private:
  void finalize(const std::string& origin);

  std::array<Landmark, kNumLandmarks> landmarks_;
  std::array<AngleSpec, kNumAngles> angles_;
  std::array<std::vector<int>, kNumLandmarks> angles_at_;
  std::array<std::vector<int>, kNumLandmarks> descendants_;
  std::array<int, kNumLandmarks> order_{};
};

/// Palm pose ^wT_p, uniform identity scale and the 20 joint angles.
struct HandParams {
  RigidTransform palm_pose;
  double palm_scale = 1.0;
  JointAngles angles = JointAngles::Zero();

  /// Throws PreconditionViolation on a non-positive scale or angles outside the
  /// skeleton limits.
  void validate(const HandSkeleton& skeleton) const;
  /// Applies a kNumParams tangent step (palm perturbation, then angle deltas).
  HandParams perturbed(const Eigen::Matrix<double, kNumParams, 1>& delta) const;
};

JointSet3D forward_kinematics(const HandSkeleton& skeleton, const HandParams& params);

/// Derivative of the stacked landmark coordinates (landmark-major, xyz) with
/// respect to the palm left-perturbation tangent and the joint angles.
FkJacobian fk_jacobian(const HandSkeleton& skeleton, const HandParams& params);

/// FK and its Jacobian from one traversal.
JointSet3D forward_kinematics(const HandSkeleton& skeleton, const HandParams& params,
                              FkJacobian* jacobian);

std::array<Vec3, 6> rigid_points(const JointSet3D& joints);

}  // namespace graspcap::hand
