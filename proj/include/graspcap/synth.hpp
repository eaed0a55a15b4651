#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "graspcap/contact.hpp"
#include "graspcap/hand.hpp"
#include "graspcap/pipeline.hpp"
#include "graspcap/sfm.hpp"

namespace graspcap::synth {

inline constexpr double kSphereRadius = 0.06;
inline constexpr double kBoxEdge = 0.10;

/// Icosphere centred at the origin.
contact::TriMesh make_sphere(double radius = kSphereRadius, int subdivisions = 3);
/// Axis-aligned cube centred at the origin with each face split into a
/// divisions x divisions grid.
contact::TriMesh make_box(double edge = kBoxEdge, int divisions = 8);

/// Area-weighted uniform samples of the mesh surface, mapped through pose.
contact::PointCloud sample_surface(const contact::TriMesh& mesh, const RigidTransform& pose,
                                   std::size_t count, std::mt19937_64& rng);

enum class ObjectShape { Sphere, Box };

struct SceneConfig {
  std::size_t num_frames = 30;        // steady frames
  std::size_t transient_frames = 0;   // churning prefix
  double noise_sigma = 0.0;           // pixels
  double dropout = 0.0;               // probability per detection
  ObjectShape object = ObjectShape::Sphere;
  double orbit_degrees = 40.0;
  double hand_distance = 0.5;         // meters
  std::size_t cloud_points = 2000;
  double adjustment_degrees = 5.0;
  double adjustment_translation = 0.02;
  double contact_distance = 0.002;    // value 1 within this distance of the hand
  double contact_falloff = 0.003;     // Gaussian width beyond it
  CameraIntrinsics intrinsics{600, 600, 320, 240, 640, 480};

  void validate() const;
};

struct SyntheticScene {
  SceneConfig config;
  std::uint64_t seed = 0;

  /// World frame is the camera of the first steady frame.
  hand::HandParams hand;
  RigidTransform object_pose;   // ^wT_o on the turntable
  RigidTransform adjustment;    // T_adj, grasped object at T_adj * ^wT_o
  std::vector<RigidTransform> cameras;        // ^wT_c per frame
  std::vector<hand::JointAngles> frame_angles;  // articulation per frame
  sfm::ObservationSet observations;
  std::size_t steady_first = 0;

  contact::TriMesh mesh;        // object frame
  contact::ContactMap contact;
  contact::PointCloud turntable_cloud;
  contact::PointCloud grasp_cloud;

  RigidTransform grasped_object_pose() const { return adjustment * object_pose; }
  hand::JointSet3D true_joints() const;
  /// Noiseless projection of frame i.
  sfm::FrameDetections exact_projection(std::size_t frame) const;
};

/// Deterministic for a fixed seed. The hand holds the object with a flexed
/// grasp that touches its surface; the cameras orbit the hand.
SyntheticScene generate_scene(std::uint64_t seed, const SceneConfig& config = {});

/// Writes intrinsics, keypoints, mesh, contact map, clouds, a pipeline
/// config and ground_truth.json into dir.
void write_dataset(const std::string& dir, const SyntheticScene& scene);

/// Ground truth as stored in ground_truth.json.
struct GroundTruth {
  hand::HandParams hand;
  RigidTransform object_pose;
  RigidTransform adjustment;
  std::vector<RigidTransform> cameras;
  std::size_t steady_first = 0;
  contact::ContactMap contact;
  double contact_radius = 0.0;  // hand distance at which the map crosses the threshold
};

GroundTruth ground_truth(const SyntheticScene& scene, double contact_threshold = 0.4);
std::string ground_truth_to_json(const GroundTruth& gt);
GroundTruth load_ground_truth(const std::string& path);

struct Metrics {
  double joint_rmse = 0.0;          // SfM joints vs truth after rigid alignment, meters
  double fit_joint_rmse = 0.0;      // FK of the Stage-3 hand, same alignment
  double palm_rotation_error = 0.0;     // radians, Stage-3 hand
  double palm_translation_error = 0.0;  // meters
  std::vector<double> angle_errors;     // radians, Stage-3 hand
  double max_angle_error = 0.0;
  double object_rotation_error = 0.0;
  double object_translation_error = 0.0;
  double adjustment_rotation_error = 0.0;
  double adjustment_translation_error = 0.0;
  std::vector<double> camera_rotation_errors;  // NaN for unregistered frames
  std::vector<double> camera_translation_errors;
  double contact_iou = 1.0;         // contacted-set agreement of the final grasp
};

/// Rigid alignment from the result's SfM gauge to the truth, estimated on the
/// observed joints.
RigidTransform gauge_alignment(const pipeline::CaptureResult& result, const GroundTruth& truth);

Metrics evaluate(const pipeline::CaptureResult& result, const GroundTruth& truth,
                 const contact::TriMesh& mesh,
                 const contact::ContactWeights& weights = {});
std::string metrics_to_json(const Metrics& m);

/// A CaptureResult holding the ground truth, as a perfect pipeline would report it.
pipeline::CaptureResult truth_as_result(const GroundTruth& truth);

}  // namespace graspcap::synth
