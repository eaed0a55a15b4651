#pragma once

#include <array>
#include <string>
#include <vector>

#include <Eigen/Geometry>

#include "graspcap/geom.hpp"
#include "graspcap/hand.hpp"

namespace graspcap::contact {

using Triangle = std::array<int, 3>;

/// Triangle mesh with an AABB tree for closest-point queries. Triangles must
/// be wound counter-clockwise seen from outside; watertightness is not needed.
class TriMesh {
public:
  TriMesh() = default;
  /// Drops zero-area triangles and throws PreconditionViolation on bad indices.
  TriMesh(std::vector<Vec3> vertices, std::vector<Triangle> triangles);

  const std::vector<Vec3>& vertices() const { return vertices_; }
  const std::vector<Triangle>& triangles() const { return triangles_; }
  const std::vector<Vec3>& vertex_normals() const { return vertex_normals_; }
  const std::vector<Vec3>& face_normals() const { return face_normals_; }
  std::size_t num_filtered() const { return num_filtered_; }
  double surface_area() const;

  struct Closest {
    Vec3 point = Vec3::Zero();
    int triangle = -1;
    double distance = 0.0;
  };
  Closest closest_point(const Vec3& q) const;

  /// Unsigned distance to the surface, negative when the nearest triangle's
  /// normal points away from q. Optionally returns the spatial gradient.
  double signed_distance(const Vec3& q, Vec3* gradient = nullptr) const;

  TriMesh transformed(const RigidTransform& T) const;

private:
  struct Node {
    Eigen::AlignedBox3d box;
    int left = -1, right = -1;  // children, -1 for leaves
    int first = 0, count = 0;   // range into order_ for leaves
  };
  int build(int first, int count, std::vector<Vec3>& centroids);

  std::vector<Vec3> vertices_;
  std::vector<Triangle> triangles_;
  std::vector<Vec3> face_normals_;
  std::vector<Vec3> vertex_normals_;
  std::vector<int> order_;
  std::vector<Node> nodes_;
  std::size_t num_filtered_ = 0;
};

/// Closest point on triangle abc to p.
Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c);

/// Reads ASCII OBJ or ASCII PLY, chosen by extension. Polygons are fanned.
TriMesh load_mesh(const std::string& path);
void save_obj(const std::string& path, const TriMesh& mesh);
void save_obj(const std::string& path, const std::vector<Vec3>& vertices,
              const std::vector<Triangle>& triangles);

/// Per-vertex contact values clamped to [0,1].
struct ContactMap {
  std::vector<double> values;

  static ContactMap uniform(std::size_t n, double value) { return {std::vector<double>(n, value)}; }
};
/// One value per line; the line count must match the mesh vertex count.
ContactMap load_contact_map(const std::string& path, std::size_t vertex_count);
void save_contact_map(const std::string& path, const ContactMap& map);

using PointCloud = std::vector<Vec3>;
PointCloud load_xyz(const std::string& path);
void save_xyz(const std::string& path, const PointCloud& cloud);

// ---------------------------------------------------------------------------
// Registration.

struct IcpConfig {
  int max_iterations = 100;
  double rms_change_tolerance = 1e-7;  // meters
  std::size_t min_points = 100;
};

struct IcpResult {
  RigidTransform pose;  // object model frame -> cloud frame
  double rms = 0.0;     // meters, nearest-surface RMS at the returned pose
  int iterations = 0;
  bool converged = false;
};

/// Point-to-point ICP of a cloud against the mesh surface.
IcpResult icp_register(const PointCloud& cloud, const TriMesh& mesh, const RigidTransform& init,
                       const IcpConfig& cfg = {});

/// Nearest-surface RMS of the cloud against the mesh placed at pose.
double alignment_rms(const PointCloud& cloud, const TriMesh& mesh, const RigidTransform& pose);

struct AdjustmentResult {
  RigidTransform adjustment;  // T_adj, so that the grasped pose is T_adj * wTo
  IcpResult icp;
};

AdjustmentResult estimate_adjustment(const PointCloud& grasp_cloud, const TriMesh& mesh,
                                     const RigidTransform& wTo, const IcpConfig& cfg = {});

// ---------------------------------------------------------------------------
// Hand surface proxy and contact energy.

/// Capsule end bound to the skeleton: (1 - w) * landmark a + w * landmark b.
struct CapsuleEnd {
  int a = 0;
  int b = 0;
  double w = 0.0;
};

struct Capsule {
  std::string name;
  CapsuleEnd start, end;
  double radius = 0.0;  // meters at palm_scale 1
};

struct PosedCapsule {
  Vec3 a, b;
  double radius;
};

/// 20 phalanx capsules (four per finger, wrist to tip) plus one palm capsule.
class CapsuleProxy {
public:
  explicit CapsuleProxy(hand::HandSkeleton skeleton);
  CapsuleProxy(hand::HandSkeleton skeleton, std::vector<Capsule> capsules);

  const hand::HandSkeleton& skeleton() const { return skeleton_; }
  const std::vector<Capsule>& capsules() const { return capsules_; }

  std::vector<PosedCapsule> pose(const hand::JointSet3D& joints, double palm_scale) const;

private:
  hand::HandSkeleton skeleton_;
  std::vector<Capsule> capsules_;
};

struct ContactWeights {
  double attraction = 1.0;
  double repulsion = 0.5;
  double penetration = 10.0;
  double contact_threshold = 0.4;       // theta_c
  double margin = 0.004;                // r_margin, meters
  double near = 0.010;                  // r_near, meters
  double softmin_temperature = 0.001;   // meters
  int samples_per_capsule = 5;

  void validate() const;
};

struct EnergyTerms {
  double attraction = 0.0;
  double repulsion = 0.0;
  double penetration = 0.0;
  double total() const { return attraction + repulsion + penetration; }
};

using ParamVector = Eigen::Matrix<double, hand::kNumParams, 1>;

struct EnergyResult {
  double energy = 0.0;
  EnergyTerms terms;
  ParamVector gradient = ParamVector::Zero();
};

/// Smooth-min distance from v to the posed capsule surfaces; negative inside.
double hand_surface_distance(const Vec3& v, const std::vector<PosedCapsule>& capsules,
                             double temperature);

/// Attraction of contacted vertices, repulsion of nearby non-contacted
/// vertices and penetration of capsule samples into the mesh. The mesh must
/// already be posed in the hand's world frame.
EnergyResult contact_energy(const hand::HandParams& params, const CapsuleProxy& proxy,
                            const TriMesh& mesh, const ContactMap& cmap,
                            const ContactWeights& weights, bool with_gradient = true);

struct RefineConfig {
  int max_iterations = 2000;
  double gradient_tolerance = 1e-8;
  int memory = 20;
  double armijo = 1e-4;
  double max_initial_step = 0.02;  // tangent-space norm of the first trial step
  ContactWeights weights;
};

struct RefineResult {
  hand::HandParams params;
  EnergyTerms initial_terms;
  EnergyTerms terms;
  double initial_energy = 0.0;
  double energy = 0.0;
  double gradient_norm = 0.0;
  int iterations = 0;
  bool converged = false;
  std::vector<double> energy_history;
};

/// Limited-memory quasi-Newton descent with backtracking line search on the
/// contact energy; joint limits are enforced by projection.
RefineResult refine_grasp(const hand::HandParams& init, const CapsuleProxy& proxy,
                          const TriMesh& mesh, const ContactMap& cmap, const RefineConfig& cfg);

}  // namespace graspcap::contact
