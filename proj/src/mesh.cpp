#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "graspcap/contact.hpp"

namespace graspcap::contact {
namespace {

constexpr int kLeafSize = 4;

[[noreturn]] void parse_error(const std::string& path, std::size_t line, const std::string& msg) {
  throw Error(ErrorKind::ParseError, path + ":" + std::to_string(line) + ": " + msg);
}

std::string lower_extension(const std::string& path) {
  const auto dot = path.find_last_of('.');
  if (dot == std::string::npos) return {};
  std::string ext = path.substr(dot + 1);
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext;
}

std::ifstream open_or_throw(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::ConfigError, "cannot open " + path);
  return in;
}

// Fan triangulation of a polygon given as 0-based indices.
void fan(const std::vector<int>& poly, std::vector<Triangle>& out) {
  for (std::size_t i = 2; i < poly.size(); ++i) out.push_back({poly[0], poly[i - 1], poly[i]});
}

TriMesh read_obj(const std::string& path) {
  auto in = open_or_throw(path);
  std::vector<Vec3> verts;
  std::vector<Triangle> tris;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag) || tag[0] == '#') continue;
    if (tag == "v") {
      Vec3 v;
      if (!(ls >> v.x() >> v.y() >> v.z())) parse_error(path, lineno, "bad vertex");
      if (!v.allFinite()) parse_error(path, lineno, "non-finite vertex");
      verts.push_back(v);
    } else if (tag == "f") {
      std::vector<int> poly;
      std::string tok;
      while (ls >> tok) {
        // v, v/vt, v//vn, v/vt/vn
        int idx = 0;
        try {
          idx = std::stoi(tok.substr(0, tok.find('/')));
        } catch (const std::exception&) {
          parse_error(path, lineno, "bad face index '" + tok + "'");
        }
        if (idx < 0) idx = static_cast<int>(verts.size()) + idx + 1;
        if (idx <= 0) parse_error(path, lineno, "face index out of range");
        poly.push_back(idx - 1);
      }
      if (poly.size() < 3) parse_error(path, lineno, "face with fewer than 3 vertices");
      fan(poly, tris);
    }
    // vn, vt, o, g, s, usemtl, mtllib are ignored
  }
  return TriMesh(std::move(verts), std::move(tris));
}

TriMesh read_ply(const std::string& path) {
  auto in = open_or_throw(path);
  std::string line;
  std::size_t lineno = 0;
  auto next = [&](std::string& l) {
    if (!std::getline(in, l)) parse_error(path, lineno, "unexpected end of file");
    ++lineno;
  };
  next(line);
  if (line.rfind("ply", 0) != 0) parse_error(path, lineno, "missing ply magic");

  std::size_t nv = 0, nf = 0;
  int vertex_props = 0;
  int xyz[3] = {-1, -1, -1};
  std::string current;
  for (;;) {
    next(line);
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "format") {
      std::string fmt;
      ls >> fmt;
      if (fmt != "ascii") parse_error(path, lineno, "only ascii PLY is supported");
    } else if (tag == "element") {
      std::size_t n = 0;
      ls >> current >> n;
      if (current == "vertex") nv = n;
      else if (current == "face") nf = n;
    } else if (tag == "property" && current == "vertex") {
      std::string type, name;
      ls >> type >> name;
      if (name == "x") xyz[0] = vertex_props;
      if (name == "y") xyz[1] = vertex_props;
      if (name == "z") xyz[2] = vertex_props;
      ++vertex_props;
    } else if (tag == "end_header") {
      break;
    }
  }
  if (xyz[0] < 0 || xyz[1] < 0 || xyz[2] < 0) parse_error(path, lineno, "vertex lacks x/y/z");

  std::vector<Vec3> verts(nv);
  for (std::size_t i = 0; i < nv; ++i) {
    next(line);
    std::istringstream ls(line);
    std::vector<double> vals(static_cast<std::size_t>(vertex_props));
    for (auto& v : vals)
      if (!(ls >> v)) parse_error(path, lineno, "short vertex record");
    verts[i] = {vals[static_cast<std::size_t>(xyz[0])], vals[static_cast<std::size_t>(xyz[1])],
                vals[static_cast<std::size_t>(xyz[2])]};
  }
  std::vector<Triangle> tris;
  for (std::size_t i = 0; i < nf; ++i) {
    next(line);
    std::istringstream ls(line);
    std::size_t k = 0;
    if (!(ls >> k) || k < 3) parse_error(path, lineno, "bad face record");
    std::vector<int> poly(k);
    for (auto& p : poly)
      if (!(ls >> p)) parse_error(path, lineno, "short face record");
    fan(poly, tris);
  }
  return TriMesh(std::move(verts), std::move(tris));
}

}  // namespace

Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
  // Voronoi region walk.
  const Vec3 ab = b - a, ac = c - a, ap = p - a;
  const double d1 = ab.dot(ap), d2 = ac.dot(ap);
  if (d1 <= 0 && d2 <= 0) return a;

  const Vec3 bp = p - b;
  const double d3 = ab.dot(bp), d4 = ac.dot(bp);
  if (d3 >= 0 && d4 <= d3) return b;

  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0 && d1 >= 0 && d3 <= 0) return a + d1 / (d1 - d3) * ab;

  const Vec3 cp = p - c;
  const double d5 = ab.dot(cp), d6 = ac.dot(cp);
  if (d6 >= 0 && d5 <= d6) return c;

  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0 && d2 >= 0 && d6 <= 0) return a + d2 / (d2 - d6) * ac;

  const double va = d3 * d6 - d5 * d4;
  if (va <= 0 && (d4 - d3) >= 0 && (d5 - d6) >= 0) {
    return b + (d4 - d3) / ((d4 - d3) + (d5 - d6)) * (c - b);
  }
  const double denom = 1.0 / (va + vb + vc);
  return a + ab * (vb * denom) + ac * (vc * denom);
}

TriMesh::TriMesh(std::vector<Vec3> vertices, std::vector<Triangle> triangles)
    : vertices_(std::move(vertices)) {
  const int nv = static_cast<int>(vertices_.size());
  for (const auto& v : vertices_) {
    if (!v.allFinite()) throw Error(ErrorKind::PreconditionViolation, "non-finite mesh vertex");
  }
  triangles_.reserve(triangles.size());
  for (const auto& t : triangles) {
    for (int i : t) {
      if (i < 0 || i >= nv) {
        throw Error(ErrorKind::PreconditionViolation,
                    "triangle index " + std::to_string(i) + " out of range");
      }
    }
    const Vec3& a = vertices_[t[0]];
    const Vec3 n = (vertices_[t[1]] - a).cross(vertices_[t[2]] - a);
    const double longest = std::max({(vertices_[t[1]] - a).squaredNorm(),
                                     (vertices_[t[2]] - a).squaredNorm(),
                                     (vertices_[t[2]] - vertices_[t[1]]).squaredNorm()});
    if (!(n.norm() > 1e-12 * longest) || longest == 0) {
      ++num_filtered_;
      continue;
    }
    triangles_.push_back(t);
    face_normals_.push_back(n.normalized());
  }
  if (triangles_.empty()) throw Error(ErrorKind::PreconditionViolation, "mesh has no triangles");

  vertex_normals_.assign(vertices_.size(), Vec3::Zero());
  for (std::size_t f = 0; f < triangles_.size(); ++f) {
    const auto& t = triangles_[f];
    const Vec3 n = (vertices_[t[1]] - vertices_[t[0]]).cross(vertices_[t[2]] - vertices_[t[0]]);
    for (int i : t) vertex_normals_[i] += n;  // area weighted
  }
  for (auto& n : vertex_normals_) {
    if (n.norm() > 0) n.normalize();
  }

  std::vector<Vec3> centroids(triangles_.size());
  for (std::size_t f = 0; f < triangles_.size(); ++f) {
    const auto& t = triangles_[f];
    centroids[f] = (vertices_[t[0]] + vertices_[t[1]] + vertices_[t[2]]) / 3.0;
  }
  order_.resize(triangles_.size());
  std::iota(order_.begin(), order_.end(), 0);
  nodes_.reserve(2 * triangles_.size() / kLeafSize + 2);
  build(0, static_cast<int>(triangles_.size()), centroids);
}

int TriMesh::build(int first, int count, std::vector<Vec3>& centroids) {
  const int id = static_cast<int>(nodes_.size());
  nodes_.emplace_back();
  Eigen::AlignedBox3d box, cbox;
  for (int i = first; i < first + count; ++i) {
    const auto& t = triangles_[order_[i]];
    for (int v : t) box.extend(vertices_[v]);
    cbox.extend(centroids[order_[i]]);
  }
  nodes_[id].box = box;
  if (count <= kLeafSize) {
    nodes_[id].first = first;
    nodes_[id].count = count;
    return id;
  }
  int axis = 0;
  cbox.sizes().maxCoeff(&axis);
  const int mid = first + count / 2;
  std::nth_element(order_.begin() + first, order_.begin() + mid, order_.begin() + first + count,
                   [&](int a, int b) {
                     const double ca = centroids[a][axis], cb = centroids[b][axis];
                     return ca < cb || (ca == cb && a < b);
                   });
  const int left = build(first, mid - first, centroids);
  const int right = build(mid, first + count - mid, centroids);
  nodes_[id].left = left;
  nodes_[id].right = right;
  return id;
}

TriMesh::Closest TriMesh::closest_point(const Vec3& q) const {
  Closest best;
  double best_d2 = std::numeric_limits<double>::infinity();
  int stack[128];
  int top = 0;
  stack[top++] = 0;
  while (top > 0) {
    const Node& node = nodes_[stack[--top]];
    if (node.box.squaredExteriorDistance(q) > best_d2) continue;
    if (node.left < 0) {
      for (int i = node.first; i < node.first + node.count; ++i) {
        const int f = order_[i];
        const auto& t = triangles_[f];
        const Vec3 p = closest_point_on_triangle(q, vertices_[t[0]], vertices_[t[1]], vertices_[t[2]]);
        const double d2 = (p - q).squaredNorm();
        if (d2 < best_d2 || (d2 == best_d2 && f < best.triangle)) {
          best_d2 = d2;
          best.point = p;
          best.triangle = f;
        }
      }
      continue;
    }
    // Push the farther child first so the nearer one is visited next.
    const double dl = nodes_[node.left].box.squaredExteriorDistance(q);
    const double dr = nodes_[node.right].box.squaredExteriorDistance(q);
    if (dl <= dr) {
      stack[top++] = node.right;
      stack[top++] = node.left;
    } else {
      stack[top++] = node.left;
      stack[top++] = node.right;
    }
  }
  best.distance = std::sqrt(best_d2);
  return best;
}

double TriMesh::signed_distance(const Vec3& q, Vec3* gradient) const {
  const Closest c = closest_point(q);
  const Vec3& n = face_normals_[c.triangle];
  const Vec3 d = q - c.point;
  const double sign = d.dot(n) < 0 ? -1.0 : 1.0;
  if (gradient) {
    *gradient = c.distance > 1e-12 ? Vec3(sign * d / c.distance) : n;
  }
  return sign * c.distance;
}

double TriMesh::surface_area() const {
  double area = 0;
  for (const auto& t : triangles_) {
    area += 0.5 * (vertices_[t[1]] - vertices_[t[0]]).cross(vertices_[t[2]] - vertices_[t[0]]).norm();
  }
  return area;
}

TriMesh TriMesh::transformed(const RigidTransform& T) const {
  std::vector<Vec3> v(vertices_.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = T * vertices_[i];
  return TriMesh(std::move(v), triangles_);
}

TriMesh load_mesh(const std::string& path) {
  const std::string ext = lower_extension(path);
  if (ext == "obj") return read_obj(path);
  if (ext == "ply") return read_ply(path);
  throw Error(ErrorKind::ConfigError, "unsupported mesh format: " + path);
}

void save_obj(const std::string& path, const std::vector<Vec3>& vertices,
              const std::vector<Triangle>& triangles) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::ConfigError, "cannot write " + path);
  out.precision(17);
  for (const auto& v : vertices) out << "v " << v.x() << ' ' << v.y() << ' ' << v.z() << '\n';
  for (const auto& t : triangles) out << "f " << t[0] + 1 << ' ' << t[1] + 1 << ' ' << t[2] + 1 << '\n';
}

void save_obj(const std::string& path, const TriMesh& mesh) {
  save_obj(path, mesh.vertices(), mesh.triangles());
}

ContactMap load_contact_map(const std::string& path, std::size_t vertex_count) {
  auto in = open_or_throw(path);
  ContactMap map;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line);
    double v = 0;
    if (!(ls >> v) || !std::isfinite(v)) parse_error(path, lineno, "bad contact value");
    map.values.push_back(std::clamp(v, 0.0, 1.0));
  }
  if (map.values.size() != vertex_count) {
    throw Error(ErrorKind::ParseError, path + ": " + std::to_string(map.values.size()) +
                                           " contact values for " + std::to_string(vertex_count) +
                                           " vertices");
  }
  return map;
}

void save_contact_map(const std::string& path, const ContactMap& map) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::ConfigError, "cannot write " + path);
  out.precision(17);
  for (double v : map.values) out << v << '\n';
}

PointCloud load_xyz(const std::string& path) {
  auto in = open_or_throw(path);
  PointCloud cloud;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line);
    Vec3 p;
    if (!(ls >> p.x() >> p.y() >> p.z()) || !p.allFinite()) parse_error(path, lineno, "bad point");
    cloud.push_back(p);
  }
  return cloud;
}

void save_xyz(const std::string& path, const PointCloud& cloud) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::ConfigError, "cannot write " + path);
  out.precision(17);
  for (const auto& p : cloud) out << p.x() << ' ' << p.y() << ' ' << p.z() << '\n';
}

}  // namespace graspcap::contact
