#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <string>

#include <json.hpp>

#include "graspcap/geom.hpp"
#include "graspcap/hand.hpp"

namespace graspcap::detail {

using nlohmann::json;

inline json to_json(const Mat4& m) {
  json rows = json::array();
  for (int r = 0; r < 4; ++r) rows.push_back({m(r, 0), m(r, 1), m(r, 2), m(r, 3)});
  return rows;
}

inline json to_json(const RigidTransform& T) { return to_json(T.matrix()); }

inline json to_json(const std::optional<RigidTransform>& T) {
  return T ? to_json(*T) : json(nullptr);
}

inline json to_json(const Vec3& v) { return {v.x(), v.y(), v.z()}; }

inline double number(const json& j, const std::string& what) {
  if (j.is_null()) return std::numeric_limits<double>::quiet_NaN();
  if (!j.is_number()) throw Error(ErrorKind::ParseError, what + ": expected a number");
  return j.get<double>();
}

inline Vec3 vec3_from_json(const json& j, const std::string& what) {
  if (!j.is_array() || j.size() != 3) throw Error(ErrorKind::ParseError, what + ": expected [x, y, z]");
  return {number(j[0], what), number(j[1], what), number(j[2], what)};
}

inline RigidTransform transform_from_json(const json& j, const std::string& what) {
  if (!j.is_array() || j.size() != 4) throw Error(ErrorKind::ParseError, what + ": expected a 4x4 matrix");
  Mat4 m;
  for (int r = 0; r < 4; ++r) {
    const json& row = j[static_cast<std::size_t>(r)];
    if (!row.is_array() || row.size() != 4) throw Error(ErrorKind::ParseError, what + ": expected a 4x4 matrix");
    for (int c = 0; c < 4; ++c) m(r, c) = number(row[static_cast<std::size_t>(c)], what);
  }
  try {
    return RigidTransform::from_matrix(m);
  } catch (const Error& e) {
    throw Error(ErrorKind::ParseError, what + ": " + e.what());
  }
}

inline std::optional<RigidTransform> optional_transform(const json& j, const std::string& what) {
  if (j.is_null()) return std::nullopt;
  return transform_from_json(j, what);
}

inline json to_json(const hand::HandParams& p) {
  json angles = json::array();
  for (int k = 0; k < hand::kNumAngles; ++k) angles.push_back(p.angles[k]);
  return {{"palm_pose", to_json(p.palm_pose)}, {"palm_scale", p.palm_scale}, {"angles", angles}};
}

inline hand::HandParams hand_from_json(const json& j, const std::string& what) {
  hand::HandParams p;
  p.palm_pose = transform_from_json(j.at("palm_pose"), what + ".palm_pose");
  p.palm_scale = number(j.at("palm_scale"), what + ".palm_scale");
  const json& a = j.at("angles");
  if (!a.is_array() || a.size() != hand::kNumAngles) {
    throw Error(ErrorKind::ParseError, what + ".angles: expected 20 values");
  }
  for (int k = 0; k < hand::kNumAngles; ++k) p.angles[k] = number(a[static_cast<std::size_t>(k)], what);
  return p;
}

}  // namespace graspcap::detail
