#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>

#include "graspcap/synth.hpp"

namespace graspcap::synth {
namespace {

using contact::Triangle;
using contact::TriMesh;

constexpr double kDeg = std::numbers::pi / 180.0;

Mat3 axis_rotation(const Vec3& axis, double angle) { return geom::rotation_exp(axis.normalized() * angle); }

Vec3 random_unit(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  for (;;) {
    Vec3 v(n(rng), n(rng), n(rng));
    if (v.norm() > 1e-6) return v.normalized();
  }
}

// Midpoint of the palm capsule axis in the palm frame.
Vec3 palm_centre(const hand::HandSkeleton& skel) {
  const auto rest = skel.rest_pose();
  return 0.25 * (2 * rest[0] + rest[hand::finger_base(1)] + rest[hand::finger_base(4)]);
}

// Smallest clearance between the capsules of one finger (beyond the
// metacarpal) and the posed object surface.
double finger_clearance(const contact::CapsuleProxy& proxy, const hand::HandParams& params,
                        const TriMesh& posed, int finger) {
  const auto joints = hand::forward_kinematics(proxy.skeleton(), params);
  const auto caps = proxy.pose(joints, params.palm_scale);
  double best = std::numeric_limits<double>::infinity();
  for (int k = 1; k < 4; ++k) {
    const auto& c = caps[static_cast<std::size_t>(4 * finger + k)];
    for (int s = 0; s <= 8; ++s) {
      const double t = s / 8.0;
      best = std::min(best, posed.signed_distance((1 - t) * c.a + t * c.b) - c.radius);
    }
  }
  return best;
}

void set_flexion(hand::HandParams& p, int finger, double k, const Vec3& profile) {
  for (int j = 0; j < 3; ++j) p.angles[4 * finger + 1 + j] = k * profile[j];
}

}  // namespace

contact::TriMesh make_sphere(double radius, int subdivisions) {
  if (!(radius > 0) || subdivisions < 0 || subdivisions > 7) {
    throw Error(ErrorKind::PreconditionViolation, "bad sphere parameters");
  }
  const double g = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<Vec3> v = {{-1, g, 0}, {1, g, 0},  {-1, -g, 0}, {1, -g, 0}, {0, -1, g},  {0, 1, g},
                         {0, -1, -g}, {0, 1, -g}, {g, 0, -1},  {g, 0, 1},  {-g, 0, -1}, {-g, 0, 1}};
  for (auto& p : v) p.normalize();
  std::vector<Triangle> f = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
                             {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
                             {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
                             {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};
  for (int level = 0; level < subdivisions; ++level) {
    std::map<std::pair<int, int>, int> mid;
    auto midpoint = [&](int a, int b) {
      const auto key = std::minmax(a, b);
      auto it = mid.find(key);
      if (it != mid.end()) return it->second;
      v.push_back((v[a] + v[b]).normalized());
      const int id = static_cast<int>(v.size()) - 1;
      mid.emplace(key, id);
      return id;
    };
    std::vector<Triangle> next;
    next.reserve(f.size() * 4);
    for (const auto& t : f) {
      const int ab = midpoint(t[0], t[1]), bc = midpoint(t[1], t[2]), ca = midpoint(t[2], t[0]);
      next.push_back({t[0], ab, ca});
      next.push_back({t[1], bc, ab});
      next.push_back({t[2], ca, bc});
      next.push_back({ab, bc, ca});
    }
    f = std::move(next);
  }
  for (auto& p : v) p *= radius;
  return TriMesh(std::move(v), std::move(f));
}

contact::TriMesh make_box(double edge, int divisions) {
  if (!(edge > 0) || divisions < 1) throw Error(ErrorKind::PreconditionViolation, "bad box parameters");
  const int n = divisions;
  std::map<std::array<int, 3>, int> index;
  std::vector<Vec3> verts;
  auto vertex = [&](const std::array<int, 3>& g) {
    auto it = index.find(g);
    if (it != index.end()) return it->second;
    const Vec3 p = (Vec3(g[0], g[1], g[2]) / n - Vec3::Constant(0.5)) * edge;
    verts.push_back(p);
    const int id = static_cast<int>(verts.size()) - 1;
    index.emplace(g, id);
    return id;
  };
  std::vector<Triangle> tris;
  for (int a = 0; a < 3; ++a) {
    const int u = (a + 1) % 3, w = (a + 2) % 3;
    for (int side : {0, n}) {
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
          auto at = [&](int di, int dj) {
            std::array<int, 3> g{};
            g[a] = side;
            g[u] = i + di;
            g[w] = j + dj;
            return vertex(g);
          };
          const int p00 = at(0, 0), p10 = at(1, 0), p11 = at(1, 1), p01 = at(0, 1);
          if (side == n) {
            tris.push_back({p00, p10, p11});
            tris.push_back({p00, p11, p01});
          } else {
            tris.push_back({p00, p11, p10});
            tris.push_back({p00, p01, p11});
          }
        }
      }
    }
  }
  return TriMesh(std::move(verts), std::move(tris));
}

contact::PointCloud sample_surface(const TriMesh& mesh, const RigidTransform& pose,
                                   std::size_t count, std::mt19937_64& rng) {
  const auto& V = mesh.vertices();
  const auto& T = mesh.triangles();
  std::vector<double> cumulative(T.size());
  double total = 0;
  for (std::size_t f = 0; f < T.size(); ++f) {
    total += 0.5 * (V[T[f][1]] - V[T[f][0]]).cross(V[T[f][2]] - V[T[f][0]]).norm();
    cumulative[f] = total;
  }
  std::uniform_real_distribution<double> u(0.0, 1.0);
  contact::PointCloud out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const double r = u(rng) * total;
    const auto f = static_cast<std::size_t>(
        std::min<std::ptrdiff_t>(std::lower_bound(cumulative.begin(), cumulative.end(), r) - cumulative.begin(),
                                 static_cast<std::ptrdiff_t>(T.size()) - 1));
    const double s = std::sqrt(u(rng)), t = u(rng);
    const Vec3 p = (1 - s) * V[T[f][0]] + s * (1 - t) * V[T[f][1]] + s * t * V[T[f][2]];
    out.push_back(pose * p);
  }
  return out;
}

void SceneConfig::validate() const {
  auto bad = [](const std::string& what) { throw Error(ErrorKind::ConfigError, what); };
  if (num_frames < 10) bad("synthetic scenes need at least 10 frames");
  if (!(noise_sigma >= 0)) bad("noise sigma must be >= 0");
  if (!(dropout >= 0 && dropout < 1)) bad("dropout must lie in [0,1)");
  if (!(orbit_degrees >= 20 && orbit_degrees <= 120)) bad("orbit must span 20 to 120 degrees");
  if (!(hand_distance > 0.2)) bad("hand distance must exceed 0.2 m");
  if (cloud_points < 100) bad("clouds need at least 100 points");
  if (!(contact_distance >= 0) || !(contact_falloff > 0)) bad("bad contact distances");
  intrinsics.validate();
}

hand::JointSet3D SyntheticScene::true_joints() const {
  return hand::forward_kinematics(hand::HandSkeleton::default_template(), hand);
}

sfm::FrameDetections SyntheticScene::exact_projection(std::size_t frame) const {
  hand::HandParams p = hand;
  p.angles = frame_angles.at(frame);
  const auto X = hand::forward_kinematics(hand::HandSkeleton::default_template(), p);
  sfm::FrameDetections out;
  for (int k = 0; k < hand::kNumLandmarks; ++k) {
    out[k].pixel = geom::project(X[k], cameras[frame], config.intrinsics);
    out[k].confidence = 1.0;
  }
  return out;
}

SyntheticScene generate_scene(std::uint64_t seed, const SceneConfig& cfg) {
  cfg.validate();
  const auto& skel = hand::HandSkeleton::default_template();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(-1.0, 1.0);

  SyntheticScene scene;
  scene.config = cfg;
  scene.seed = seed;
  scene.steady_first = cfg.transient_frames;

  // Palm facing the camera with fingers pointing up in the image, tilted a little.
  const Mat3 facing = axis_rotation(Vec3::UnitZ(), std::numbers::pi);
  const Mat3 R_palm = axis_rotation(random_unit(rng), 10 * kDeg * unif(rng)) * facing;
  const Vec3 centre = palm_centre(skel);
  const Vec3 H(0, 0, cfg.hand_distance);
  scene.hand.palm_pose = RigidTransform(R_palm, H - R_palm * (centre + Vec3(0, 0.03, 0)));
  scene.hand.palm_scale = 1.0;

  // Object resting against the palm on the volar (-z) side.
  scene.mesh = cfg.object == ObjectShape::Sphere ? make_sphere() : make_box();
  const double half = cfg.object == ObjectShape::Sphere ? kSphereRadius : kBoxEdge / 2;
  const double palm_radius = contact::CapsuleProxy(skel).capsules().back().radius;
  const Vec3 obj_centre = centre - Vec3::UnitZ() * (half + palm_radius);
  const Mat3 R_local = cfg.object == ObjectShape::Sphere
                           ? axis_rotation(random_unit(rng), std::numbers::pi * unif(rng))
                           : axis_rotation(Vec3::UnitZ(), 20 * kDeg * unif(rng));
  const RigidTransform grasped(R_palm * R_local, scene.hand.palm_pose * obj_centre);
  const TriMesh posed = scene.mesh.transformed(grasped);

  // Abductions jittered, then each finger curled until it meets the surface.
  const contact::CapsuleProxy proxy(skel);
  scene.hand.angles.setZero();
  scene.hand.angles[0] = 0.4 + 0.1 * unif(rng);
  for (int f = 1; f < 5; ++f) scene.hand.angles[4 * f] = 0.08 * unif(rng);
  for (int f = 0; f < 5; ++f) {
    const Vec3 profile = f == 0 ? Vec3(0.4, 0.7, 0.6) : Vec3(0.7, 1.0, 0.6);
    const Vec3 jitter = profile.cwiseProduct(Vec3::Ones() + 0.1 * Vec3(unif(rng), unif(rng), unif(rng)));
    const double k_max = 100 * kDeg / jitter.maxCoeff();
    double lo = 0, hi = k_max;
    set_flexion(scene.hand, f, hi, jitter);
    if (finger_clearance(proxy, scene.hand, posed, f) > 0) {
      lo = hi;  // never reaches the object
    } else {
      for (int it = 0; it < 50; ++it) {
        const double mid = 0.5 * (lo + hi);
        set_flexion(scene.hand, f, mid, jitter);
        (finger_clearance(proxy, scene.hand, posed, f) > 0 ? lo : hi) = mid;
      }
    }
    set_flexion(scene.hand, f, lo, jitter);
  }
  scene.hand.validate(skel);

  // Scripted adjustment between turntable and grasp.
  const RigidTransform adj(axis_rotation(random_unit(rng), cfg.adjustment_degrees * kDeg),
                           cfg.adjustment_translation * random_unit(rng));
  scene.adjustment = adj;
  scene.object_pose = adj.inverse() * grasped;

  // Cameras orbit the hand; the first steady frame is the world frame.
  const std::size_t N = cfg.transient_frames + cfg.num_frames;
  const double span = static_cast<double>(cfg.num_frames - 1);
  for (std::size_t i = 0; i < N; ++i) {
    const double s = (static_cast<double>(i) - static_cast<double>(cfg.transient_frames)) / span;
    const Mat3 R = axis_rotation(Vec3::UnitY(), cfg.orbit_degrees * kDeg * s) *
                   axis_rotation(Vec3::UnitX(), 8 * kDeg * std::sin(2 * std::numbers::pi * s));
    scene.cameras.emplace_back(R, H - R * H);
  }

  // Articulation: churn during the transient, the grasp afterwards.
  for (std::size_t i = 0; i < N; ++i) {
    if (i >= cfg.transient_frames) {
      scene.frame_angles.push_back(scene.hand.angles);
      continue;
    }
    hand::JointAngles a;
    for (int k = 0; k < hand::kNumAngles; ++k) {
      const auto& spec = skel.angles()[k];
      a[k] = spec.lower + (spec.upper - spec.lower) * 0.5 * (1 + unif(rng));
    }
    scene.frame_angles.push_back(a);
  }

  // Detections.
  auto& obs = scene.observations;
  obs.intrinsics = cfg.intrinsics;
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t i = 0; i < N; ++i) {
    sfm::FrameDetections frame = scene.exact_projection(i);
    for (auto& d : frame) {
      const Vec2 e(noise(rng), noise(rng));
      const double drop = 0.5 * (1 + unif(rng));
      if (cfg.noise_sigma > 0) {
        d.pixel += cfg.noise_sigma * e;
        d.confidence = std::clamp(1.0 - e.norm() / 3.0, 0.1, 1.0);
      }
      if (cfg.dropout > 0 && drop < cfg.dropout) {
        d.pixel.setZero();
        d.confidence = 0.0;
      }
    }
    obs.frames.push_back(frame);
    obs.timestamps.push_back(static_cast<double>(i) / 30.0);
  }
  obs.validate();

  // Contact map from the true grasp.
  const auto caps = proxy.pose(scene.true_joints(), 1.0);
  scene.contact.values.resize(posed.vertices().size());
  for (std::size_t v = 0; v < posed.vertices().size(); ++v) {
    double d = std::numeric_limits<double>::infinity();
    for (const auto& c : caps) {
      const Vec3 ab = c.b - c.a;
      const double t = std::clamp((posed.vertices()[v] - c.a).dot(ab) / ab.squaredNorm(), 0.0, 1.0);
      d = std::min(d, (posed.vertices()[v] - (c.a + t * ab)).norm() - c.radius);
    }
    double value = 1.0;
    if (d > cfg.contact_distance) {
      const double z = (d - cfg.contact_distance) / cfg.contact_falloff;
      value = std::exp(-z * z);
      if (value < 1e-6) value = 0.0;
    }
    scene.contact.values[v] = value;
  }

  scene.turntable_cloud = sample_surface(scene.mesh, scene.object_pose, cfg.cloud_points, rng);
  scene.grasp_cloud = sample_surface(scene.mesh, grasped, cfg.cloud_points, rng);
  return scene;
}

}  // namespace graspcap::synth
