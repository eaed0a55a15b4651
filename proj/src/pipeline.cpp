#include <algorithm>
#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>

#include "graspcap/pipeline.hpp"

namespace graspcap::pipeline {
namespace {

using Complex = std::complex<double>;

// Median residual after removing the best 2D similarity between two frames.
double similarity_residual(const sfm::FrameDetections& a, const sfm::FrameDetections& b, double tau) {
  std::vector<Complex> za, zb;
  for (int k = 0; k < hand::kNumLandmarks; ++k) {
    if (a[k].confidence >= tau && b[k].confidence >= tau && a[k].confidence > 0 && b[k].confidence > 0) {
      za.emplace_back(a[k].pixel.x(), a[k].pixel.y());
      zb.emplace_back(b[k].pixel.x(), b[k].pixel.y());
    }
  }
  if (za.size() < 3) return std::numeric_limits<double>::infinity();
  Complex ma, mb;
  for (std::size_t i = 0; i < za.size(); ++i) {
    ma += za[i];
    mb += zb[i];
  }
  ma /= static_cast<double>(za.size());
  mb /= static_cast<double>(zb.size());
  Complex num;
  double den = 0;
  for (std::size_t i = 0; i < za.size(); ++i) {
    num += std::conj(za[i] - ma) * (zb[i] - mb);
    den += std::norm(za[i] - ma);
  }
  const Complex s = den > 0 ? num / den : Complex(1, 0);
  std::vector<double> r(za.size());
  for (std::size_t i = 0; i < za.size(); ++i) r[i] = std::abs((zb[i] - mb) - s * (za[i] - ma));
  std::nth_element(r.begin(), r.begin() + r.size() / 2, r.end());
  double med = r[r.size() / 2];
  if (r.size() % 2 == 0) med = 0.5 * (med + *std::max_element(r.begin(), r.begin() + r.size() / 2));
  return med;
}

const hand::HandSkeleton& skeleton_for(const PipelineConfig& cfg) {
  static thread_local std::string cached_path;
  static thread_local std::optional<hand::HandSkeleton> cached;
  if (cfg.hand_template.empty()) return hand::HandSkeleton::default_template();
  if (!cached || cached_path != cfg.hand_template) {
    cached = hand::HandSkeleton::load(cfg.hand_template);
    cached_path = cfg.hand_template;
  }
  return *cached;
}

void require_file(const std::string& path, const std::string& what) {
  std::error_code ec;
  if (path.empty()) throw Error(ErrorKind::ConfigError, what + " path is not set");
  if (!std::filesystem::exists(path, ec)) throw Error(ErrorKind::ConfigError, what + " not found: " + path);
}

sfm::ObservationSet load_obs(const PipelineConfig& cfg) {
  require_file(cfg.intrinsics, "intrinsics");
  require_file(cfg.keypoints_dir, "keypoint directory");
  return sfm::load_observations(cfg.keypoints_dir, geom::load_intrinsics(cfg.intrinsics));
}

contact::TriMesh load_mesh_checked(const PipelineConfig& cfg) {
  require_file(cfg.mesh, "mesh");
  return contact::load_mesh(cfg.mesh);
}

contact::PointCloud load_cloud(const std::string& path, const std::string& what) {
  require_file(path, what);
  return contact::load_xyz(path);
}

void record(CaptureResult& r, StageReport s) {
  for (auto& existing : r.stages) {
    if (existing.name == s.name) {
      existing = std::move(s);
      return;
    }
  }
  r.stages.push_back(std::move(s));
}

template <class F>
void stage(const std::string& name, F&& f) {
  try {
    f();
  } catch (const StageError&) {
    throw;
  } catch (const Error& e) {
    throw StageError(name, e);
  }
}

}  // namespace

FrameRange select_steady_frames(const sfm::ObservationSet& obs, double motion_threshold,
                                double confidence_threshold) {
  const std::size_t n = obs.size();
  if (n < 2) throw Error(ErrorKind::PreconditionViolation, "steady-frame selection needs N >= 2");
  if (!(motion_threshold > 0)) throw Error(ErrorKind::PreconditionViolation, "motion threshold must be > 0");
  std::size_t first = n - 1;
  while (first > 0 &&
         similarity_residual(obs.frames[first - 1], obs.frames[first], confidence_threshold) <= motion_threshold) {
    --first;
  }
  if (n - first < kMinSteadyFrames) {
    throw Error(ErrorKind::NoSteadySegment, "steady suffix has only " + std::to_string(n - first) +
                                                " frames; supply an explicit range");
  }
  return {first, n - 1};
}

std::vector<PropagatedPose> propagate_poses(const std::vector<RigidTransform>& camera_poses,
                                            const RigidTransform& adjustment,
                                            const RigidTransform& wTo, const RigidTransform& wTp) {
  const RigidTransform grasped = adjustment * wTo;
  std::vector<PropagatedPose> out;
  out.reserve(camera_poses.size());
  for (const auto& wTc : camera_poses) {
    const RigidTransform cTw = wTc.inverse();
    out.push_back({cTw * grasped, cTw * wTp});
  }
  return out;
}

void run_object_pose(const PipelineConfig& cfg, CaptureResult& r) {
  stage("object-pose", [&] {
    const auto mesh = load_mesh_checked(cfg);
    const auto cloud = load_cloud(cfg.turntable_cloud, "turntable cloud");
    RigidTransform init;
    if (cfg.object_init) {
      init = *cfg.object_init;
    } else {
      Vec3 mc = Vec3::Zero(), cc = Vec3::Zero();
      for (const auto& v : mesh.vertices()) mc += v;
      for (const auto& p : cloud) cc += p;
      mc /= static_cast<double>(mesh.vertices().size());
      cc /= static_cast<double>(std::max<std::size_t>(cloud.size(), 1));
      init = RigidTransform::translation(cc - mc);
    }
    const double initial = contact::alignment_rms(cloud, mesh, init);
    const auto icp = contact::icp_register(cloud, mesh, init, cfg.icp);
    r.object_pose_world = icp.pose;
    r.object_rms = icp.rms;
    record(r, {"object-pose", icp.converged, icp.iterations, initial, icp.rms});
  });
}

void run_sfm(const PipelineConfig& cfg, CaptureResult& r) {
  stage("sfm", [&] {
    const auto obs = load_obs(cfg);
    const std::size_t n = obs.size();
    FrameRange range{0, n - 1};
    if (cfg.steady_mode == SteadyMode::Explicit) {
      if (cfg.range_last > n) {
        throw Error(ErrorKind::ConfigError, "explicit range ends at frame " + std::to_string(cfg.range_last) +
                                                " but there are " + std::to_string(n) + " frames");
      }
      range = {cfg.range_first - 1, cfg.range_last - 1};
    } else if (cfg.steady_mode == SteadyMode::Automatic) {
      range = select_steady_frames(obs, cfg.motion_threshold, cfg.solver.confidence_threshold);
    }
    const auto sub = obs.slice(range.first, range.last);
    auto sol = sfm::reconstruct(sub, cfg.solver);

    const auto palm = fit::fit_palm_pose(sol.joints, skeleton_for(cfg), &sol.observed);
    const double s = cfg.hand_scale / palm.palm_scale;
    sol = sfm::rescale_to_metric(sol, s);

    r.num_frames = n;
    r.steady = range;
    r.metric_scale = s;
    r.camera_poses.assign(n, std::nullopt);
    r.frame_status.assign(n, sfm::FrameStatus::ExcludedTransient);
    for (std::size_t i = 0; i < sub.size(); ++i) {
      r.camera_poses[range.first + i] = sol.camera_poses[i];
      r.frame_status[range.first + i] = sol.frame_status[i];
    }
    r.sfm_joints = sol.joints;
    r.sfm_observed = sol.observed;
    r.sfm_final_cost = sol.final_cost;
    r.sfm_objective = sol.objective;
    r.sfm_rms_residual = sol.rms_residual();
    r.propagated.assign(n, std::nullopt);
    const double initial = sol.cost_history.empty() ? sol.objective : sol.cost_history.front();
    record(r, {"sfm", sol.converged, sol.iterations, initial, sol.objective});
  });
}

void run_fit_hand(const PipelineConfig& cfg, CaptureResult& r) {
  stage("fit-hand", [&] {
    if (!r.has_stage("sfm")) throw Error(ErrorKind::PreconditionViolation, "hand fitting needs an SfM result");
    const auto& skel = skeleton_for(cfg);
    const auto palm = fit::fit_palm_pose(r.sfm_joints, skel, &r.sfm_observed);
    const auto ik = fit::solve_ik(skel, palm.palm_pose, palm.palm_scale, r.sfm_joints, cfg.ik, &r.sfm_observed);
    r.hand_fit.palm_pose = palm.palm_pose;
    r.hand_fit.palm_scale = palm.palm_scale;
    r.hand_fit.angles = ik.angles;
    r.hand = r.hand_fit;
    r.palm_fit_rms = palm.residual_rms;
    r.ik_rms = ik.rms_error;
    record(r, {"fit-hand", ik.converged, ik.iterations, ik.rms_history.front(), ik.rms_error});
  });
}

void run_adjust(const PipelineConfig& cfg, CaptureResult& r) {
  stage("adjust", [&] {
    if (!r.has_stage("object-pose")) {
      throw Error(ErrorKind::PreconditionViolation, "adjustment needs the turntable object pose");
    }
    const auto mesh = load_mesh_checked(cfg);
    const auto cloud = load_cloud(cfg.grasp_cloud, "grasp cloud");
    const double initial = contact::alignment_rms(cloud, mesh, r.object_pose_world);
    const auto adj = contact::estimate_adjustment(cloud, mesh, r.object_pose_world, cfg.icp);
    r.adjustment = adj.adjustment;
    r.adjustment_rms = adj.icp.rms;
    record(r, {"adjust", adj.icp.converged, adj.icp.iterations, initial, adj.icp.rms});
  });
}

void run_refine(const PipelineConfig& cfg, CaptureResult& r) {
  stage("refine", [&] {
    if (!r.has_stage("fit-hand") || !r.has_stage("adjust")) {
      throw Error(ErrorKind::PreconditionViolation, "refinement needs the fitted hand and the adjustment");
    }
    const auto mesh = load_mesh_checked(cfg);
    require_file(cfg.contact_map, "contact map");
    const auto cmap = contact::load_contact_map(cfg.contact_map, mesh.vertices().size());
    const auto posed = mesh.transformed(r.adjustment * r.object_pose_world);
    const contact::CapsuleProxy proxy(skeleton_for(cfg));
    const auto res = contact::refine_grasp(r.hand_fit, proxy, posed, cmap, cfg.refine);
    r.hand = res.params;
    r.contact_initial = res.initial_terms;
    r.contact_final = res.terms;
    record(r, {"refine", res.converged, res.iterations, res.initial_energy, res.energy});
  });
}

void run_joint_solve(const PipelineConfig& cfg, CaptureResult& r) {
  stage("joint-solve", [&] {
    if (!r.has_stage("fit-hand")) throw Error(ErrorKind::PreconditionViolation, "joint solve needs the fitted hand");
    const auto obs = load_obs(cfg);
    if (obs.size() != r.num_frames) throw Error(ErrorKind::PreconditionViolation, "frame count changed");
    const auto sub = obs.slice(r.steady.first, r.steady.last);
    std::vector<std::optional<RigidTransform>> cams(r.camera_poses.begin() + static_cast<std::ptrdiff_t>(r.steady.first),
                                                    r.camera_poses.begin() + static_cast<std::ptrdiff_t>(r.steady.last) + 1);
    const auto& skel = skeleton_for(cfg);
    const double staged = fit::joint_objective(sub, skel, r.hand_fit, cams, cfg.solver);
    const auto res = fit::joint_hand_sfm(sub, skel, r.hand_fit, cams, cfg.solver);
    JointSolveSummary js;
    js.hand = res.params;
    js.camera_poses.assign(r.num_frames, std::nullopt);
    for (std::size_t i = 0; i < res.camera_poses.size(); ++i) js.camera_poses[r.steady.first + i] = res.camera_poses[i];
    js.staged_objective = staged;
    js.objective = res.objective;
    js.final_cost = res.final_cost;
    r.joint = std::move(js);
    record(r, {"joint-solve", res.converged, res.iterations, res.initial_objective, res.objective});
  });
}

void run_propagate(CaptureResult& r) {
  stage("propagate", [&] {
    if (r.num_frames == 0 || r.camera_poses.size() != r.num_frames) {
      throw Error(ErrorKind::PreconditionViolation, "propagation needs camera poses");
    }
    r.propagated.assign(r.num_frames, std::nullopt);
    for (std::size_t i = 0; i < r.num_frames; ++i) {
      if (!r.camera_poses[i]) continue;
      r.propagated[i] = propagate_poses({*r.camera_poses[i]}, r.adjustment, r.object_pose_world,
                                        r.hand.palm_pose)[0];
    }
    record(r, {"propagate", true, 0, 0.0, 0.0});
  });
}

CaptureResult run_pipeline(const PipelineConfig& cfg) {
  cfg.validate();
  require_file(cfg.keypoints_dir, "keypoint directory");
  require_file(cfg.intrinsics, "intrinsics");
  require_file(cfg.mesh, "mesh");
  require_file(cfg.turntable_cloud, "turntable cloud");
  require_file(cfg.grasp_cloud, "grasp cloud");
  if (cfg.enable_refine) require_file(cfg.contact_map, "contact map");
  if (!cfg.hand_template.empty()) require_file(cfg.hand_template, "hand template");

  CaptureResult r;
  run_object_pose(cfg, r);
  run_sfm(cfg, r);
  run_fit_hand(cfg, r);
  run_adjust(cfg, r);
  if (cfg.enable_refine) run_refine(cfg, r);
  if (cfg.enable_joint_solve) run_joint_solve(cfg, r);
  run_propagate(r);
  return r;
}

void export_skeleton_obj(const std::string& path, const contact::CapsuleProxy& proxy,
                         const hand::HandParams& params) {
  constexpr int kSides = 8;
  const auto joints = hand::forward_kinematics(proxy.skeleton(), params);
  std::vector<Vec3> verts;
  std::vector<contact::Triangle> tris;
  // Landmarks as small octahedra.
  const double s = 0.002 * params.palm_scale;
  const Vec3 dirs[6] = {Vec3::UnitX(), -Vec3::UnitX(), Vec3::UnitY(), -Vec3::UnitY(), Vec3::UnitZ(), -Vec3::UnitZ()};
  const int oct[8][3] = {{0, 2, 4}, {2, 1, 4}, {1, 3, 4}, {3, 0, 4}, {2, 0, 5}, {1, 2, 5}, {3, 1, 5}, {0, 3, 5}};
  for (const auto& p : joints) {
    const int base = static_cast<int>(verts.size());
    for (const auto& d : dirs) verts.push_back(p + s * d);
    for (const auto& f : oct) tris.push_back({base + f[0], base + f[1], base + f[2]});
  }
  // Capsule bodies as open tubes.
  for (const auto& c : proxy.pose(joints, params.palm_scale)) {
    const Vec3 axis = c.b - c.a;
    if (axis.norm() <= 0) continue;
    const Vec3 w = axis.normalized();
    const Vec3 u = w.unitOrthogonal(), v = w.cross(u);
    const int base = static_cast<int>(verts.size());
    for (int k = 0; k < kSides; ++k) {
      const double t = 2 * std::numbers::pi * k / kSides;
      const Vec3 off = c.radius * (std::cos(t) * u + std::sin(t) * v);
      verts.push_back(c.a + off);
      verts.push_back(c.b + off);
    }
    for (int k = 0; k < kSides; ++k) {
      const int a0 = base + 2 * k, b0 = a0 + 1;
      const int a1 = base + 2 * ((k + 1) % kSides), b1 = a1 + 1;
      tris.push_back({a0, a1, b1});
      tris.push_back({a0, b1, b0});
    }
  }
  contact::save_obj(path, verts, tris);
}

}  // namespace graspcap::pipeline
