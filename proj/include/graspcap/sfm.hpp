#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "graspcap/geom.hpp"
#include "graspcap/hand.hpp"

namespace graspcap::sfm {

struct Detection {
  PixelPoint pixel = PixelPoint::Zero();
  double confidence = 0.0;  // 0 encodes a missing detection
};
using FrameDetections = std::array<Detection, hand::kNumLandmarks>;

/// Per-frame 21-keypoint detections of the presented hand.
struct ObservationSet {
  std::vector<FrameDetections> frames;
  CameraIntrinsics intrinsics;
  std::vector<double> timestamps;  // seconds; empty when unknown

  std::size_t size() const { return frames.size(); }
  /// N >= 2, confidences in [0,1], present detections inside the image padded by 10%.
  void validate() const;
  /// Frames [first, last] inclusive, zero-based.
  ObservationSet slice(std::size_t first, std::size_t last) const;
};

/// Reads one keypoint document: a JSON array of 21 [u, v, confidence] triples.
FrameDetections load_keypoint_file(const std::string& path);
void save_keypoint_file(const std::string& path, const FrameDetections& detections);
/// Loads every *.json file of a directory in lexicographic order.
ObservationSet load_observations(const std::string& keypoint_dir, const CameraIntrinsics& K);

struct SolverConfig {
  int max_iterations = 200;
  double initial_damping = 1e-3;
  double max_damping = 1e12;
  double function_tolerance = 1e-12;
  double step_tolerance = 1e-12;
  double gradient_tolerance = 1e-10;
  double absolute_cost_tolerance = 1e-18;  // squared pixels
  double huber_width = 4.0;                // pixels
  double confidence_threshold = 0.2;       // tau
  std::uint64_t seed = 0;

  void validate() const;
};

enum class FrameStatus { Registered, ExcludedLowConfidence, ExcludedUnconverged, ExcludedTransient };
std::string to_string(FrameStatus status);
FrameStatus frame_status_from_string(const std::string& s);

struct SfMSolution {
  hand::JointSet3D joints{};
  std::array<bool, hand::kNumLandmarks> observed{};
  /// ^wT_c per frame; empty for frames that are not registered.
  std::vector<std::optional<RigidTransform>> camera_poses;
  std::vector<FrameStatus> frame_status;
  /// Plain reprojection error summed over inliers (squared pixels).
  double final_cost = 0.0;
  /// Confidence-weighted Huber objective actually minimized.
  double objective = 0.0;
  /// Pixel residual norms; meaningful where inliers is set.
  std::vector<std::array<double, hand::kNumLandmarks>> residuals;
  std::vector<std::array<bool, hand::kNumLandmarks>> inliers;
  int iterations = 0;
  bool converged = false;
  std::vector<double> cost_history;

  std::size_t num_inliers() const;
  /// Per-coordinate RMS of inlier residuals (pixels).
  double rms_residual() const;
};

/// Confidence-weighted Huber penalty of one residual norm.
double robust_penalty(double residual_norm, double confidence, double huber_width);

/// Recomputes residuals, inlier mask, final_cost and objective in place.
void score_solution(const ObservationSet& obs, const SolverConfig& cfg, SfMSolution& solution);

struct TwoViewResult {
  RigidTransform relative;  // pose of camera b in camera a's frame, unit translation
  hand::JointSet3D joints{};  // camera a's frame
  std::array<bool, hand::kNumLandmarks> triangulated{};
  int num_in_front = 0;
};

/// Minimum angle between the two viewing rays for a point to count as triangulated.
inline constexpr double kMinTriangulationAngle = 1e-3;

TwoViewResult init_two_view(const ObservationSet& obs, std::size_t frame_a, std::size_t frame_b,
                            double confidence_threshold = 0.2);

struct RegistrationResult {
  RigidTransform pose;
  bool converged = false;
  int iterations = 0;
  double objective = 0.0;
};

/// Pose of one camera from known 3D landmarks, refined from `init` by damped
/// Gauss-Newton on that frame's weighted robust reprojection error.
RegistrationResult register_frame(const hand::JointSet3D& joints,
                                  const std::array<bool, hand::kNumLandmarks>& known,
                                  const FrameDetections& frame, const CameraIntrinsics& K,
                                  const RigidTransform& init, const SolverConfig& cfg);

/// Linear multi-view triangulation. Returns nothing when fewer than two views
/// are given or the point ends up behind a camera.
std::optional<Vec3> triangulate(const std::vector<RigidTransform>& poses,
                                const std::vector<PixelPoint>& pixels, const CameraIntrinsics& K);

/// Joint Levenberg-Marquardt refinement of X and all registered cameras but the anchor.
SfMSolution bundle_adjust(const ObservationSet& obs, const SfMSolution& init,
                          const SolverConfig& cfg);

/// Multiplies X and camera translations by s (> 0).
SfMSolution rescale_to_metric(const SfMSolution& solution, double s);

/// Candidate second frames for initialization, best first.
std::vector<std::size_t> rank_initial_pairs(const ObservationSet& obs, double confidence_threshold);

/// Full reconstruction: two-view initialization, sequential registration,
/// triangulation of the remaining landmarks and bundle adjustment. Frame 0 is
/// the gauge anchor.
SfMSolution reconstruct(const ObservationSet& obs, const SolverConfig& cfg);

}  // namespace graspcap::sfm
