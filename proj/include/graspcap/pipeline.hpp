#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "graspcap/contact.hpp"
#include "graspcap/fit.hpp"
#include "graspcap/hand.hpp"
#include "graspcap/sfm.hpp"

namespace graspcap::pipeline {

/// Zero-based inclusive frame range.
struct FrameRange {
  std::size_t first = 0;
  std::size_t last = 0;
  std::size_t size() const { return last - first + 1; }
};

inline constexpr std::size_t kMinSteadyFrames = 5;

/// Longest suffix of frames whose inter-frame motion is explained by a 2D
/// similarity to within motion_threshold pixels (median residual).
FrameRange select_steady_frames(const sfm::ObservationSet& obs, double motion_threshold,
                                double confidence_threshold = 0.2);

struct PropagatedPose {
  RigidTransform object_in_camera;  // ^cT_o
  RigidTransform palm_in_camera;    // ^cT_p
};

std::vector<PropagatedPose> propagate_poses(const std::vector<RigidTransform>& camera_poses,
                                            const RigidTransform& adjustment,
                                            const RigidTransform& wTo, const RigidTransform& wTp);

enum class SteadyMode { Automatic, Explicit, All };

struct PipelineConfig {
  std::string keypoints_dir;
  std::string intrinsics;
  std::string mesh;
  std::string contact_map;
  std::string turntable_cloud;
  std::string grasp_cloud;
  std::string hand_template;  // empty: built-in template

  SteadyMode steady_mode = SteadyMode::Automatic;
  std::size_t range_first = 1;  // one-based, inclusive; explicit mode only
  std::size_t range_last = 1;
  double motion_threshold = 5.0;  // pixels

  std::optional<RigidTransform> object_init;
  double hand_scale = 1.0;
  bool enable_refine = true;
  bool enable_joint_solve = false;

  sfm::SolverConfig solver;
  fit::IkConfig ik;
  contact::IcpConfig icp;
  contact::RefineConfig refine;
  std::uint64_t seed = 0;

  /// Throws ConfigError on bad values. Paths are checked when a stage opens them.
  void validate() const;
};

/// Reads a JSON configuration; relative paths resolve against the file's directory.
PipelineConfig load_config(const std::string& path);
PipelineConfig parse_config(const std::string& json_text, const std::string& base_dir = ".");
std::string config_to_json(const PipelineConfig& cfg);

struct StageReport {
  std::string name;
  bool converged = false;
  int iterations = 0;
  double initial_cost = 0.0;
  double final_cost = 0.0;
};

struct JointSolveSummary {
  hand::HandParams hand;
  std::vector<std::optional<RigidTransform>> camera_poses;
  double staged_objective = 0.0;  // FK(hand_fit) through the SfM cameras
  double objective = 0.0;
  double final_cost = 0.0;
};

struct CaptureResult {
  std::size_t num_frames = 0;
  FrameRange steady;

  RigidTransform object_pose_world;  // ^wT_o from the turntable cloud
  double object_rms = 0.0;
  RigidTransform adjustment;         // T_adj
  double adjustment_rms = 0.0;

  std::vector<std::optional<RigidTransform>> camera_poses;  // ^wT_c per frame
  std::vector<sfm::FrameStatus> frame_status;
  hand::JointSet3D sfm_joints{};
  std::array<bool, hand::kNumLandmarks> sfm_observed{};
  double sfm_final_cost = 0.0;
  double sfm_objective = 0.0;
  double sfm_rms_residual = 0.0;
  double metric_scale = 1.0;

  hand::HandParams hand_fit;  // Stage 3
  double palm_fit_rms = 0.0;
  double ik_rms = 0.0;
  hand::HandParams hand;      // final grasp (refined when Stage 5 ran)
  contact::EnergyTerms contact_initial;
  contact::EnergyTerms contact_final;

  std::optional<JointSolveSummary> joint;

  std::vector<std::optional<PropagatedPose>> propagated;
  std::vector<StageReport> stages;

  bool has_stage(const std::string& name) const;
  const StageReport* stage(const std::string& name) const;
  bool all_converged() const;
};

std::string to_json(const CaptureResult& result);
CaptureResult capture_from_json(const std::string& text);
void save_capture(const std::string& path, const CaptureResult& result);
CaptureResult load_capture(const std::string& path);

/// Individual stages. Each reads what it needs from the config and from the
/// result of earlier stages, then records a StageReport.
void run_object_pose(const PipelineConfig& cfg, CaptureResult& result);
void run_sfm(const PipelineConfig& cfg, CaptureResult& result);
void run_fit_hand(const PipelineConfig& cfg, CaptureResult& result);
void run_adjust(const PipelineConfig& cfg, CaptureResult& result);
void run_refine(const PipelineConfig& cfg, CaptureResult& result);
void run_joint_solve(const PipelineConfig& cfg, CaptureResult& result);
void run_propagate(CaptureResult& result);

/// Stage error wrapper: the message names the failing stage.
class StageError : public Error {
public:
  StageError(std::string stage, const Error& cause)
      : Error(cause.kind(), "stage " + stage + ": " + cause.what()), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

private:
  std::string stage_;
};

/// All stages in order. Input files are checked up front so that a missing
/// file fails before any work is done.
CaptureResult run_pipeline(const PipelineConfig& cfg);

/// Dumps posed landmarks and capsules as an OBJ for inspection.
void export_skeleton_obj(const std::string& path, const contact::CapsuleProxy& proxy,
                         const hand::HandParams& params);

}  // namespace graspcap::pipeline
