#include <cmath>

#include <Eigen/SVD>

#include "graspcap/contact.hpp"

namespace graspcap::contact {
namespace {

// Closest model-frame surface points for every cloud point; returns the RMS.
double correspond(const PointCloud& cloud, const TriMesh& mesh, const RigidTransform& pose,
                  std::vector<Vec3>& model_points) {
  const RigidTransform inv = pose.inverse();
  model_points.resize(cloud.size());
  double sum = 0;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto c = mesh.closest_point(inv * cloud[i]);
    model_points[i] = c.point;
    sum += c.distance * c.distance;
  }
  return std::sqrt(sum / static_cast<double>(cloud.size()));
}

void check_cloud(const PointCloud& cloud, const IcpConfig& cfg) {
  if (cloud.size() < cfg.min_points) {
    throw Error(ErrorKind::PreconditionViolation,
                "ICP needs at least " + std::to_string(cfg.min_points) + " points, got " +
                    std::to_string(cloud.size()));
  }
  for (const auto& p : cloud) {
    if (!p.allFinite()) throw Error(ErrorKind::PreconditionViolation, "non-finite cloud point");
  }
}

// A collinear or coincident cloud leaves rotation about its axis undetermined.
void check_spread(const PointCloud& cloud) {
  Eigen::Matrix3Xd P(3, static_cast<Eigen::Index>(cloud.size()));
  for (std::size_t i = 0; i < cloud.size(); ++i) P.col(static_cast<Eigen::Index>(i)) = cloud[i];
  P.colwise() -= P.rowwise().mean();
  const Vec3 sv = Eigen::JacobiSVD<Eigen::Matrix3Xd>(P).singularValues();
  if (!(sv[0] > 0) || sv[1] <= 1e-9 * sv[0]) {
    throw Error(ErrorKind::IllConditioned, "ICP cloud is collinear or coincident");
  }
}

}  // namespace

double alignment_rms(const PointCloud& cloud, const TriMesh& mesh, const RigidTransform& pose) {
  if (cloud.empty()) throw Error(ErrorKind::PreconditionViolation, "empty cloud");
  std::vector<Vec3> unused;
  return correspond(cloud, mesh, pose, unused);
}

IcpResult icp_register(const PointCloud& cloud, const TriMesh& mesh, const RigidTransform& init,
                       const IcpConfig& cfg) {
  check_cloud(cloud, cfg);
  check_spread(cloud);
  if (cfg.max_iterations < 1 || !(cfg.rms_change_tolerance > 0)) {
    throw Error(ErrorKind::ConfigError, "bad ICP configuration");
  }

  IcpResult res;
  res.pose = init;
  std::vector<Vec3> model;
  double rms = correspond(cloud, mesh, res.pose, model);
  for (int it = 1; it <= cfg.max_iterations; ++it) {
    try {
      res.pose = geom::umeyama_align(model, cloud, {.with_scale = false}).rigid_part();
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::DegenerateConfiguration) throw;
      throw Error(ErrorKind::IllConditioned, std::string("ICP alignment: ") + e.what());
    }
    const double next = correspond(cloud, mesh, res.pose, model);
    res.iterations = it;
    const double change = std::abs(rms - next);
    rms = next;
    if (change < cfg.rms_change_tolerance) {
      res.converged = true;
      break;
    }
  }
  res.rms = rms;
  return res;
}

AdjustmentResult estimate_adjustment(const PointCloud& grasp_cloud, const TriMesh& mesh,
                                     const RigidTransform& wTo, const IcpConfig& cfg) {
  AdjustmentResult out;
  out.icp = icp_register(grasp_cloud, mesh, wTo, cfg);
  out.adjustment = out.icp.pose * wTo.inverse();
  return out;
}

}  // namespace graspcap::contact
