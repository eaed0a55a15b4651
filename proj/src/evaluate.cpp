#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "graspcap/synth.hpp"
#include "json_util.hpp"

namespace graspcap::synth {
namespace {

using detail::json;
using detail::to_json;

double hard_hand_distance(const Vec3& v, const std::vector<contact::PosedCapsule>& caps) {
  double d = std::numeric_limits<double>::infinity();
  for (const auto& c : caps) {
    const Vec3 ab = c.b - c.a;
    const double t = std::clamp((v - c.a).dot(ab) / ab.squaredNorm(), 0.0, 1.0);
    d = std::min(d, (v - (c.a + t * ab)).norm() - c.radius);
  }
  return d;
}

}  // namespace

GroundTruth ground_truth(const SyntheticScene& scene, double contact_threshold) {
  GroundTruth gt;
  gt.hand = scene.hand;
  gt.object_pose = scene.object_pose;
  gt.adjustment = scene.adjustment;
  gt.cameras = scene.cameras;
  gt.steady_first = scene.steady_first;
  gt.contact = scene.contact;
  gt.contact_radius = scene.config.contact_distance +
                      scene.config.contact_falloff * std::sqrt(std::log(1.0 / contact_threshold));
  return gt;
}

std::string ground_truth_to_json(const GroundTruth& gt) {
  json cams = json::array();
  for (const auto& c : gt.cameras) cams.push_back(to_json(c));
  json doc = {{"format", "graspcap-ground-truth"},
              {"version", 1},
              {"hand", to_json(gt.hand)},
              {"object_pose_world", to_json(gt.object_pose)},
              {"adjustment", to_json(gt.adjustment)},
              {"camera_poses", cams},
              {"steady_first", gt.steady_first + 1},
              {"contact_radius", gt.contact_radius},
              {"contact", gt.contact.values}};
  return doc.dump(2) + "\n";
}

GroundTruth load_ground_truth(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::ConfigError, "cannot open " + path);
  try {
    const json doc = json::parse(in);
    if (doc.at("format") != "graspcap-ground-truth") throw Error(ErrorKind::ParseError, path + ": wrong format");
    GroundTruth gt;
    gt.hand = detail::hand_from_json(doc.at("hand"), "hand");
    gt.object_pose = detail::transform_from_json(doc.at("object_pose_world"), "object_pose_world");
    gt.adjustment = detail::transform_from_json(doc.at("adjustment"), "adjustment");
    for (const auto& c : doc.at("camera_poses")) gt.cameras.push_back(detail::transform_from_json(c, "camera_poses"));
    gt.steady_first = doc.at("steady_first").get<std::size_t>() - 1;
    gt.contact_radius = doc.at("contact_radius").get<double>();
    gt.contact.values = doc.at("contact").get<std::vector<double>>();
    return gt;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::ParseError, path + ": " + e.what());
  }
}

void write_dataset(const std::string& dir, const SyntheticScene& scene) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  fs::create_directories(root / "keypoints");
  geom::save_intrinsics((root / "intrinsics.txt").string(), scene.observations.intrinsics);
  for (std::size_t i = 0; i < scene.observations.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%04zu.json", i + 1);
    sfm::save_keypoint_file((root / "keypoints" / name).string(), scene.observations.frames[i]);
  }
  contact::save_obj((root / "mesh.obj").string(), scene.mesh);
  contact::save_contact_map((root / "contact.txt").string(), scene.contact);
  contact::save_xyz((root / "turntable.xyz").string(), scene.turntable_cloud);
  contact::save_xyz((root / "grasp.xyz").string(), scene.grasp_cloud);

  pipeline::PipelineConfig cfg;
  cfg.keypoints_dir = "keypoints";
  cfg.intrinsics = "intrinsics.txt";
  cfg.mesh = "mesh.obj";
  cfg.contact_map = "contact.txt";
  cfg.turntable_cloud = "turntable.xyz";
  cfg.grasp_cloud = "grasp.xyz";
  cfg.steady_mode = scene.steady_first > 0 ? pipeline::SteadyMode::Automatic : pipeline::SteadyMode::All;
  cfg.range_first = scene.steady_first + 1;
  cfg.range_last = scene.observations.size();
  cfg.seed = scene.seed;
  // Rough turntable registration, as an operator would provide: truth off by 10 degrees and 1 cm.
  std::mt19937_64 rng(scene.seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> n(0.0, 1.0);
  const Vec3 axis = Vec3(n(rng), n(rng), n(rng)).normalized();
  const Vec3 shift = Vec3(n(rng), n(rng), n(rng)).normalized();
  const RigidTransform offset(geom::rotation_exp(axis * 10 * std::numbers::pi / 180), 0.01 * shift);
  cfg.object_init = offset * scene.object_pose;
  std::ofstream((root / "config.json").string()) << pipeline::config_to_json(cfg);
  std::ofstream((root / "ground_truth.json").string()) << ground_truth_to_json(ground_truth(scene));
}

RigidTransform gauge_alignment(const pipeline::CaptureResult& result, const GroundTruth& truth) {
  const auto X = hand::forward_kinematics(hand::HandSkeleton::default_template(), truth.hand);
  std::vector<Vec3> src, dst;
  bool identical = true;
  for (int k = 0; k < hand::kNumLandmarks; ++k) {
    if (!result.sfm_observed[k]) continue;
    src.push_back(result.sfm_joints[k]);
    dst.push_back(X[k]);
    identical = identical && result.sfm_joints[k] == X[k];
  }
  if (identical || src.size() < 3) return RigidTransform::identity();
  return geom::umeyama_align(src, dst, {.with_scale = false}).rigid_part();
}

Metrics evaluate(const pipeline::CaptureResult& result, const GroundTruth& truth,
                 const contact::TriMesh& mesh, const contact::ContactWeights& weights) {
  if (result.num_frames != truth.cameras.size()) {
    throw Error(ErrorKind::PreconditionViolation, "result and ground truth frame counts differ");
  }
  const auto& skel = hand::HandSkeleton::default_template();
  const RigidTransform G = gauge_alignment(result, truth);
  const auto X = hand::forward_kinematics(skel, truth.hand);
  Metrics m;

  double sum = 0;
  int count = 0;
  for (int k = 0; k < hand::kNumLandmarks; ++k) {
    if (!result.sfm_observed[k]) continue;
    sum += (G * result.sfm_joints[k] - X[k]).squaredNorm();
    ++count;
  }
  m.joint_rmse = count ? std::sqrt(sum / count) : std::numeric_limits<double>::quiet_NaN();

  const auto F = hand::forward_kinematics(skel, result.hand_fit);
  sum = 0;
  for (int k = 0; k < hand::kNumLandmarks; ++k) sum += (G * F[k] - X[k]).squaredNorm();
  m.fit_joint_rmse = std::sqrt(sum / hand::kNumLandmarks);

  const RigidTransform palm = G * result.hand_fit.palm_pose;
  m.palm_rotation_error = geom::rotation_distance(palm.rotation(), truth.hand.palm_pose.rotation());
  m.palm_translation_error = (palm.translation() - truth.hand.palm_pose.translation()).norm();
  for (int k = 0; k < hand::kNumAngles; ++k) {
    m.angle_errors.push_back(std::abs(result.hand_fit.angles[k] - truth.hand.angles[k]));
    m.max_angle_error = std::max(m.max_angle_error, m.angle_errors.back());
  }

  m.object_rotation_error = geom::rotation_distance(result.object_pose_world.rotation(), truth.object_pose.rotation());
  m.object_translation_error = (result.object_pose_world.translation() - truth.object_pose.translation()).norm();
  m.adjustment_rotation_error = geom::rotation_distance(result.adjustment.rotation(), truth.adjustment.rotation());
  m.adjustment_translation_error = (result.adjustment.translation() - truth.adjustment.translation()).norm();

  for (std::size_t i = 0; i < result.num_frames; ++i) {
    if (!result.camera_poses[i]) {
      m.camera_rotation_errors.push_back(std::numeric_limits<double>::quiet_NaN());
      m.camera_translation_errors.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    const RigidTransform c = G * *result.camera_poses[i];
    m.camera_rotation_errors.push_back(geom::rotation_distance(c.rotation(), truth.cameras[i].rotation()));
    m.camera_translation_errors.push_back((c.translation() - truth.cameras[i].translation()).norm());
  }

  if (truth.contact.values.size() == mesh.vertices().size()) {
    const contact::CapsuleProxy proxy(skel);
    const auto caps = proxy.pose(hand::forward_kinematics(skel, result.hand), result.hand.palm_scale);
    const RigidTransform grasped = result.adjustment * result.object_pose_world;
    std::size_t inter = 0, uni = 0;
    for (std::size_t v = 0; v < mesh.vertices().size(); ++v) {
      const bool observed = truth.contact.values[v] >= weights.contact_threshold;
      const bool predicted = hard_hand_distance(grasped * mesh.vertices()[v], caps) <= truth.contact_radius;
      inter += observed && predicted;
      uni += observed || predicted;
    }
    m.contact_iou = uni ? static_cast<double>(inter) / static_cast<double>(uni) : 1.0;
  }
  return m;
}

std::string metrics_to_json(const Metrics& m) {
  json doc = {{"joint_rmse", m.joint_rmse},
              {"fit_joint_rmse", m.fit_joint_rmse},
              {"palm_rotation_error", m.palm_rotation_error},
              {"palm_translation_error", m.palm_translation_error},
              {"angle_errors", m.angle_errors},
              {"max_angle_error", m.max_angle_error},
              {"object_rotation_error", m.object_rotation_error},
              {"object_translation_error", m.object_translation_error},
              {"adjustment_rotation_error", m.adjustment_rotation_error},
              {"adjustment_translation_error", m.adjustment_translation_error},
              {"camera_rotation_errors", m.camera_rotation_errors},
              {"camera_translation_errors", m.camera_translation_errors},
              {"contact_iou", m.contact_iou}};
  return doc.dump(2) + "\n";
}

pipeline::CaptureResult truth_as_result(const GroundTruth& truth) {
  pipeline::CaptureResult r;
  const std::size_t n = truth.cameras.size();
  r.num_frames = n;
  r.steady = {truth.steady_first, n - 1};
  r.object_pose_world = truth.object_pose;
  r.adjustment = truth.adjustment;
  r.camera_poses.assign(n, std::nullopt);
  r.frame_status.assign(n, sfm::FrameStatus::ExcludedTransient);
  for (std::size_t i = truth.steady_first; i < n; ++i) {
    r.camera_poses[i] = truth.cameras[i];
    r.frame_status[i] = sfm::FrameStatus::Registered;
  }
  r.sfm_joints = hand::forward_kinematics(hand::HandSkeleton::default_template(), truth.hand);
  r.sfm_observed.fill(true);
  r.hand_fit = truth.hand;
  r.hand = truth.hand;
  pipeline::run_propagate(r);
  r.stages.clear();
  return r;
}

}  // namespace graspcap::synth
