#include <algorithm>
#include <cmath>
#include <limits>

#include "graspcap/contact.hpp"

namespace graspcap::contact {
namespace {

using hand::kNumLandmarks;

constexpr double kPalmRadius = 0.025;
constexpr double kMinRadius = 0.006;
constexpr double kMaxRadius = 0.010;
constexpr double kRadiusPerLength = 0.22;

struct SegmentDistance {
  double dist;  // to the axis
  double t;
  Vec3 dir;     // unit vector from the axis point to v, zero when on the axis
};

SegmentDistance segment_distance(const Vec3& v, const Vec3& a, const Vec3& b) {
  const Vec3 ab = b - a;
  const double len2 = ab.squaredNorm();
  double t = len2 > 0 ? (v - a).dot(ab) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const Vec3 d = v - (a + t * ab);
  const double n = d.norm();
  return {n, t, n > 0 ? Vec3(d / n) : Vec3::Zero()};
}

Vec3 end_point(const CapsuleEnd& e, const hand::JointSet3D& J) {
  return (1.0 - e.w) * J[e.a] + e.w * J[e.b];
}

void scatter(const CapsuleEnd& e, const Vec3& g, Eigen::Matrix<double, 3 * kNumLandmarks, 1>& out) {
  out.segment<3>(3 * e.a) += (1.0 - e.w) * g;
  out.segment<3>(3 * e.b) += e.w * g;
}

}  // namespace

CapsuleProxy::CapsuleProxy(hand::HandSkeleton skeleton) : skeleton_(std::move(skeleton)) {
  const auto& lm = skeleton_.landmarks();
  for (int f = 0; f < 5; ++f) {
    const int base = hand::finger_base(f);
    const int chain[5] = {0, base, base + 1, base + 2, base + 3};
    for (int k = 0; k < 4; ++k) {
      Capsule c;
      c.name = lm[chain[k + 1]].name;
      c.start = {chain[k], chain[k], 0.0};
      c.end = {chain[k + 1], chain[k + 1], 0.0};
      c.radius = std::clamp(kRadiusPerLength * skeleton_.bone_length(chain[k + 1]), kMinRadius,
                            kMaxRadius);
      capsules_.push_back(c);
    }
  }
  Capsule palm;
  palm.name = "palm";
  palm.start = {0, hand::finger_base(1), 0.5};
  palm.end = {0, hand::finger_base(4), 0.5};
  palm.radius = kPalmRadius;
  capsules_.push_back(palm);
}

CapsuleProxy::CapsuleProxy(hand::HandSkeleton skeleton, std::vector<Capsule> capsules)
    : skeleton_(std::move(skeleton)), capsules_(std::move(capsules)) {
  for (const auto& c : capsules_) {
    for (const auto* e : {&c.start, &c.end}) {
      if (e->a < 0 || e->a >= kNumLandmarks || e->b < 0 || e->b >= kNumLandmarks ||
          !(e->w >= 0 && e->w <= 1)) {
        throw Error(ErrorKind::PreconditionViolation, "bad capsule endpoint in " + c.name);
      }
    }
    if (!(c.radius > 0)) throw Error(ErrorKind::PreconditionViolation, "capsule radius must be > 0");
  }
}

std::vector<PosedCapsule> CapsuleProxy::pose(const hand::JointSet3D& joints, double palm_scale) const {
  std::vector<PosedCapsule> out;
  out.reserve(capsules_.size());
  for (const auto& c : capsules_) {
    out.push_back({end_point(c.start, joints), end_point(c.end, joints), c.radius * palm_scale});
  }
  return out;
}

void ContactWeights::validate() const {
  auto bad = [](const char* what) { throw Error(ErrorKind::ConfigError, what); };
  if (!(attraction >= 0) || !(repulsion >= 0) || !(penetration >= 0)) bad("contact weights must be >= 0");
  if (!(contact_threshold >= 0 && contact_threshold <= 1)) bad("contact threshold must lie in [0,1]");
  if (!(margin >= 0) || !(near >= 0)) bad("contact margins must be >= 0");
  if (!(softmin_temperature > 0)) bad("softmin temperature must be > 0");
  if (samples_per_capsule < 2) bad("need at least 2 samples per capsule");
}

double hand_surface_distance(const Vec3& v, const std::vector<PosedCapsule>& capsules,
                             double temperature) {
  double m = std::numeric_limits<double>::infinity();
  std::vector<double> d(capsules.size());
  for (std::size_t j = 0; j < capsules.size(); ++j) {
    d[j] = segment_distance(v, capsules[j].a, capsules[j].b).dist - capsules[j].radius;
    m = std::min(m, d[j]);
  }
  double s = 0;
  for (double dj : d) s += std::exp(-(dj - m) / temperature);
  return m - temperature * std::log(s);
}

EnergyResult contact_energy(const hand::HandParams& params, const CapsuleProxy& proxy,
                            const TriMesh& mesh, const ContactMap& cmap,
                            const ContactWeights& w, bool with_gradient) {
  if (cmap.values.size() != mesh.vertices().size()) {
    throw Error(ErrorKind::PreconditionViolation, "contact map does not match mesh vertex count");
  }
  hand::FkJacobian J;
  const hand::JointSet3D joints =
      hand::forward_kinematics(proxy.skeleton(), params, with_gradient ? &J : nullptr);
  const auto caps = proxy.pose(joints, params.palm_scale);
  const auto& defs = proxy.capsules();
  const std::size_t nc = caps.size();

  EnergyResult res;
  Eigen::Matrix<double, 3 * kNumLandmarks, 1> dP = Eigen::Matrix<double, 3 * kNumLandmarks, 1>::Zero();
  std::vector<SegmentDistance> seg(nc);
  std::vector<double> dj(nc);

  const double tau = w.softmin_temperature;
  const auto& verts = mesh.vertices();
  for (std::size_t i = 0; i < verts.size(); ++i) {
    const bool contacted = cmap.values[i] >= w.contact_threshold;
    if (contacted ? w.attraction == 0 : w.repulsion == 0) continue;

    double m = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < nc; ++j) {
      seg[j] = segment_distance(verts[i], caps[j].a, caps[j].b);
      dj[j] = seg[j].dist - caps[j].radius;
      m = std::min(m, dj[j]);
    }
    if (!contacted && m > w.near) continue;

    double s = 0;
    for (std::size_t j = 0; j < nc; ++j) s += std::exp(-(dj[j] - m) / tau);
    const double d = m - tau * std::log(s);

    double dE_dd = 0;
    if (contacted) {
      res.terms.attraction += w.attraction * d * d;
      dE_dd = 2 * w.attraction * d;
    } else {
      const double gap = std::max(0.0, w.margin - d);
      if (gap == 0) continue;
      res.terms.repulsion += w.repulsion * gap * gap;
      dE_dd = -2 * w.repulsion * gap;
    }
    if (!with_gradient) continue;
    for (std::size_t j = 0; j < nc; ++j) {
      const double wj = std::exp(-(dj[j] - m) / tau) / s;
      if (wj < 1e-300) continue;
      const Vec3 g = -dE_dd * wj * seg[j].dir;  // d(dist)/d(axis point) = -dir
      scatter(defs[j].start, (1.0 - seg[j].t) * g, dP);
      scatter(defs[j].end, seg[j].t * g, dP);
    }
  }

  if (w.penetration > 0) {
    const int K = w.samples_per_capsule;
    for (std::size_t j = 0; j < nc; ++j) {
      for (int k = 0; k < K; ++k) {
        const double t = static_cast<double>(k) / (K - 1);
        const Vec3 c = (1.0 - t) * caps[j].a + t * caps[j].b;
        Vec3 grad;
        const double sd = mesh.signed_distance(c, &grad);
        const double pen = caps[j].radius - sd;
        if (pen <= 0) continue;
        res.terms.penetration += w.penetration * pen * pen;
        if (!with_gradient) continue;
        const Vec3 g = -2 * w.penetration * pen * grad;
        scatter(defs[j].start, (1.0 - t) * g, dP);
        scatter(defs[j].end, t * g, dP);
      }
    }
  }

  res.energy = res.terms.total();
  if (with_gradient) res.gradient = J.transpose() * dP;
  return res;
}

}  // namespace graspcap::contact
