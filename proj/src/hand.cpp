#include "graspcap/hand.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

namespace graspcap::hand {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

[[noreturn]] void parse_fail(const std::string& origin, int lineno, const std::string& msg) {
  throw Error(ErrorKind::ParseError, origin + ":" + std::to_string(lineno) + ": " + msg);
}

}  // namespace

HandSkeleton HandSkeleton::parse(std::string_view text, const std::string& origin) {
  HandSkeleton skel;
  std::array<bool, kNumLandmarks> seen_landmark{};
  std::array<bool, kNumAngles> seen_angle{};

  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ss(line);
    std::string keyword;
    if (!(ss >> keyword)) continue;

    if (keyword == "version") {
      int version = 0;
      if (!(ss >> version) || version != 1) parse_fail(origin, lineno, "unsupported version");
    } else if (keyword == "landmark") {
      int index, parent;
      Landmark lm;
      if (!(ss >> index >> lm.name >> parent >> lm.rest.x() >> lm.rest.y() >> lm.rest.z())) {
        parse_fail(origin, lineno, "malformed landmark line");
      }
      if (index < 0 || index >= kNumLandmarks || seen_landmark[index]) {
        parse_fail(origin, lineno, "bad or duplicate landmark index");
      }
      lm.parent = parent;
      skel.landmarks_[index] = lm;
      seen_landmark[index] = true;
    } else if (keyword == "angle") {
      int index;
      AngleSpec spec;
      double lo_deg, hi_deg;
      if (!(ss >> index >> spec.name >> spec.pivot >> spec.axis.x() >> spec.axis.y() >>
            spec.axis.z() >> lo_deg >> hi_deg)) {
        parse_fail(origin, lineno, "malformed angle line");
      }
      if (index < 0 || index >= kNumAngles || seen_angle[index]) {
        parse_fail(origin, lineno, "bad or duplicate angle index");
      }
      spec.lower = lo_deg * kDeg;
      spec.upper = hi_deg * kDeg;
      skel.angles_[index] = spec;
      seen_angle[index] = true;
    } else {
      parse_fail(origin, lineno, "unknown keyword '" + keyword + "'");
    }
  }
  if (!std::all_of(seen_landmark.begin(), seen_landmark.end(), [](bool b) { return b; })) {
    throw Error(ErrorKind::ParseError, origin + ": expected 21 landmarks");
  }
  if (!std::all_of(seen_angle.begin(), seen_angle.end(), [](bool b) { return b; })) {
    throw Error(ErrorKind::ParseError, origin + ": expected 20 angles");
  }
  skel.finalize(origin);
  return skel;
}

void HandSkeleton::finalize(const std::string& origin) {
  auto fail = [&](const std::string& msg) {
    throw Error(ErrorKind::PreconditionViolation, origin + ": " + msg);
  };

  if (landmarks_[0].parent != -1) fail("landmark 0 (wrist) must be the root");
  for (int i = 1; i < kNumLandmarks; ++i) {
    const int p = landmarks_[i].parent;
    if (p < 0 || p >= kNumLandmarks || p == i) fail("landmark " + std::to_string(i) + " has a bad parent");
  }

  // Every landmark must reach the root within kNumLandmarks steps.
  for (int i = 0; i < kNumLandmarks; ++i) {
    int steps = 0;
    for (int j = i; j != 0; j = landmarks_[j].parent) {
      if (++steps > kNumLandmarks) fail("kinematic tree contains a cycle");
    }
  }

  std::vector<int> order{0};
  for (std::size_t k = 0; k < order.size(); ++k) {
    for (int i = 1; i < kNumLandmarks; ++i) {
      if (landmarks_[i].parent == order[k]) order.push_back(i);
    }
  }
  std::copy(order.begin(), order.end(), order_.begin());

  for (int i = 1; i < kNumLandmarks; ++i) {
    if (!(bone_length(i) > 0)) fail("zero-length bone at landmark " + std::to_string(i));
    for (int j = landmarks_[i].parent; j != -1; j = landmarks_[j].parent) {
      descendants_[j].push_back(i);
    }
  }
  for (auto& d : descendants_) std::sort(d.begin(), d.end());

  for (int k = 0; k < kNumAngles; ++k) {
    AngleSpec& a = angles_[k];
    if (a.pivot < 0 || a.pivot >= kNumLandmarks) fail("angle " + a.name + " has a bad pivot");
    if (!(a.axis.norm() > 1e-9)) fail("angle " + a.name + " has a zero axis");
    a.axis.normalize();
    if (!(a.lower <= 0.0 && 0.0 <= a.upper)) fail("rest pose violates limits of " + a.name);
    angles_at_[a.pivot].push_back(k);
  }
}

HandSkeleton HandSkeleton::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::ConfigError, "cannot open skeleton template " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse(buf.str(), path);
}

const HandSkeleton& HandSkeleton::default_template() {
  static const HandSkeleton skel = parse(
#include "hand_template.inc"
      , "<built-in template>");
  return skel;
}

std::string HandSkeleton::to_text() const {
  std::ostringstream out;
  out.precision(17);
  out << "version 1\n";
  for (int i = 0; i < kNumLandmarks; ++i) {
    const auto& lm = landmarks_[i];
    out << "landmark " << i << ' ' << lm.name << ' ' << lm.parent << ' ' << lm.rest.x() << ' '
        << lm.rest.y() << ' ' << lm.rest.z() << '\n';
  }
  for (int k = 0; k < kNumAngles; ++k) {
    const auto& a = angles_[k];
    out << "angle " << k << ' ' << a.name << ' ' << a.pivot << ' ' << a.axis.x() << ' '
        << a.axis.y() << ' ' << a.axis.z() << ' ' << a.lower / kDeg << ' ' << a.upper / kDeg
        << '\n';
  }
  return out.str();
}

JointSet3D HandSkeleton::rest_pose() const {
  JointSet3D out;
  for (int i = 0; i < kNumLandmarks; ++i) out[i] = landmarks_[i].rest;
  return out;
}

double HandSkeleton::bone_length(int landmark) const {
  const int p = landmarks_[landmark].parent;
  return p < 0 ? 0.0 : (landmarks_[landmark].rest - landmarks_[p].rest).norm();
}

bool HandSkeleton::within_limits(const JointAngles& angles, double tol) const {
  for (int k = 0; k < kNumAngles; ++k) {
    if (!(angles[k] >= angles_[k].lower - tol && angles[k] <= angles_[k].upper + tol)) return false;
  }
  return true;
}

JointAngles HandSkeleton::clamp(const JointAngles& angles) const {
  JointAngles out;
  for (int k = 0; k < kNumAngles; ++k) {
    out[k] = std::clamp(angles[k], angles_[k].lower, angles_[k].upper);
  }
  return out;
}

void HandParams::validate(const HandSkeleton& skeleton) const {
  if (!(palm_scale > 0) || !std::isfinite(palm_scale)) {
    throw Error(ErrorKind::PreconditionViolation, "palm_scale must be positive");
  }
  if (!skeleton.within_limits(angles, 1e-12)) {
    throw Error(ErrorKind::PreconditionViolation, "joint angles outside limits");
  }
}

HandParams HandParams::perturbed(const Eigen::Matrix<double, kNumParams, 1>& delta) const {
  HandParams out = *this;
  out.palm_pose = palm_pose.perturbed(delta.head<6>());
  out.angles += delta.tail<kNumAngles>();
  return out;
}

JointSet3D forward_kinematics(const HandSkeleton& skeleton, const HandParams& params,
                              FkJacobian* jacobian) {
  const auto& lms = skeleton.landmarks();
  const double s = params.palm_scale;
  const Mat3& Rp = params.palm_pose.rotation();

  // Accumulated rotation at each landmark (palm frame) and local positions.
  std::array<Mat3, kNumLandmarks> frame;
  JointSet3D local;
  std::array<Vec3, kNumAngles> axis_palm;  // joint axes in the palm frame

  for (int j : skeleton.topological_order()) {
    const int p = lms[j].parent;
    Mat3 G = Mat3::Identity();
    if (p < 0) {
      local[j] = s * lms[j].rest;
    } else {
      G = frame[p];
      local[j] = local[p] + G * (s * (lms[j].rest - lms[p].rest));
    }
    for (int k : skeleton.angles_at(j)) {
      const Vec3& a = skeleton.angles()[k].axis;
      axis_palm[k] = G * a;
      G = G * geom::rotation_exp(a * params.angles[k]);
    }
    frame[j] = G;
  }

  JointSet3D world;
  for (int i = 0; i < kNumLandmarks; ++i) world[i] = params.palm_pose * local[i];

  if (jacobian) {
    FkJacobian& J = *jacobian;
    J.setZero();
    const Vec3& t = params.palm_pose.translation();
    for (int i = 0; i < kNumLandmarks; ++i) {
      J.block<3, 3>(3 * i, 0).setIdentity();
      J.block<3, 3>(3 * i, 3) = -geom::skew(world[i] - t);
    }
    for (int k = 0; k < kNumAngles; ++k) {
      const int pivot = skeleton.angles()[k].pivot;
      const Vec3 w = Rp * axis_palm[k];
      for (int c : skeleton.descendants(pivot)) {
        J.block<3, 1>(3 * c, 6 + k) = w.cross(world[c] - world[pivot]);
      }
    }
  }
  return world;
}

JointSet3D forward_kinematics(const HandSkeleton& skeleton, const HandParams& params) {
  return forward_kinematics(skeleton, params, nullptr);
}

FkJacobian fk_jacobian(const HandSkeleton& skeleton, const HandParams& params) {
  FkJacobian J;
  forward_kinematics(skeleton, params, &J);
  return J;
}

std::array<Vec3, 6> rigid_points(const JointSet3D& joints) {
  std::array<Vec3, 6> out;
  for (std::size_t i = 0; i < kRigidLandmarks.size(); ++i) out[i] = joints[kRigidLandmarks[i]];
  return out;
}

}  // namespace graspcap::hand
