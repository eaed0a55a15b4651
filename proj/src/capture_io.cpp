#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "graspcap/pipeline.hpp"
#include "json_util.hpp"

namespace graspcap::pipeline {
namespace {

using detail::json;
using detail::number;
using detail::to_json;

constexpr int kCaptureVersion = 1;

const char* mode_name(SteadyMode m) {
  switch (m) {
    case SteadyMode::Automatic: return "automatic";
    case SteadyMode::Explicit: return "explicit";
    case SteadyMode::All: return "all";
  }
  return "automatic";
}

// Reads known keys of an object into fields and rejects anything else.
class Reader {
public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) fail("expected an object");
  }
  ~Reader() noexcept(false) {
    if (std::uncaught_exceptions()) return;
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) fail("unknown key '" + it.key() + "'");
    }
  }
  const json* get(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  template <class T>
  void read(const std::string& key, T& out) {
    if (const json* v = get(key)) {
      try {
        out = v->get<T>();
      } catch (const json::exception&) {
        fail("bad value for '" + key + "'");
      }
    }
  }
  [[noreturn]] void fail(const std::string& msg) const {
    throw Error(ErrorKind::ConfigError, where_ + ": " + msg);
  }
  const std::string& where() const { return where_; }

private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

std::string resolve(const std::string& base, const std::string& p) {
  if (p.empty()) return p;
  const std::filesystem::path path(p);
  if (path.is_absolute()) return p;
  return (std::filesystem::path(base) / path).lexically_normal().string();
}

json solver_json(const sfm::SolverConfig& s) {
  return {{"max_iterations", s.max_iterations},     {"initial_damping", s.initial_damping},
          {"max_damping", s.max_damping},           {"function_tolerance", s.function_tolerance},
          {"step_tolerance", s.step_tolerance},     {"gradient_tolerance", s.gradient_tolerance},
          {"absolute_cost_tolerance", s.absolute_cost_tolerance},
          {"huber_width", s.huber_width},           {"confidence_threshold", s.confidence_threshold}};
}

void read_solver(const json& j, sfm::SolverConfig& s) {
  Reader r(j, "solver");
  r.read("max_iterations", s.max_iterations);
  r.read("initial_damping", s.initial_damping);
  r.read("max_damping", s.max_damping);
  r.read("function_tolerance", s.function_tolerance);
  r.read("step_tolerance", s.step_tolerance);
  r.read("gradient_tolerance", s.gradient_tolerance);
  r.read("absolute_cost_tolerance", s.absolute_cost_tolerance);
  r.read("huber_width", s.huber_width);
  r.read("confidence_threshold", s.confidence_threshold);
}

json weights_json(const contact::ContactWeights& w) {
  return {{"attraction", w.attraction},
          {"repulsion", w.repulsion},
          {"penetration", w.penetration},
          {"contact_threshold", w.contact_threshold},
          {"margin", w.margin},
          {"near", w.near},
          {"softmin_temperature", w.softmin_temperature},
          {"samples_per_capsule", w.samples_per_capsule}};
}

void read_weights(const json& j, contact::ContactWeights& w) {
  Reader r(j, "refine.weights");
  r.read("attraction", w.attraction);
  r.read("repulsion", w.repulsion);
  r.read("penetration", w.penetration);
  r.read("contact_threshold", w.contact_threshold);
  r.read("margin", w.margin);
  r.read("near", w.near);
  r.read("softmin_temperature", w.softmin_temperature);
  r.read("samples_per_capsule", w.samples_per_capsule);
}

json terms_json(const contact::EnergyTerms& t) {
  return {{"attraction", t.attraction}, {"repulsion", t.repulsion}, {"penetration", t.penetration}};
}

contact::EnergyTerms terms_from_json(const json& j) {
  return {number(j.at("attraction"), "attraction"), number(j.at("repulsion"), "repulsion"),
          number(j.at("penetration"), "penetration")};
}

}  // namespace

void PipelineConfig::validate() const {
  auto bad = [](const std::string& what) { throw Error(ErrorKind::ConfigError, what); };
  if (steady_mode == SteadyMode::Explicit && (range_first < 1 || range_last < range_first)) {
    bad("explicit frame range must satisfy 1 <= first <= last");
  }
  if (!(motion_threshold > 0)) bad("motion_threshold must be > 0");
  if (!(hand_scale > 0) || !std::isfinite(hand_scale)) bad("hand_scale must be > 0");
  solver.validate();
  ik.validate();
  refine.weights.validate();
  if (icp.max_iterations < 1 || !(icp.rms_change_tolerance > 0)) bad("bad ICP settings");
  if (refine.max_iterations < 0 || !(refine.gradient_tolerance > 0) || refine.memory < 1) {
    bad("bad refinement settings");
  }
}

PipelineConfig parse_config(const std::string& text, const std::string& base_dir) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::ConfigError, std::string("config is not valid JSON: ") + e.what());
  }
  PipelineConfig cfg;
  {
    Reader r(doc, "config");
    if (const json* p = r.get("paths")) {
      Reader rp(*p, "paths");
      rp.read("keypoints", cfg.keypoints_dir);
      rp.read("intrinsics", cfg.intrinsics);
      rp.read("mesh", cfg.mesh);
      rp.read("contact_map", cfg.contact_map);
      rp.read("turntable_cloud", cfg.turntable_cloud);
      rp.read("grasp_cloud", cfg.grasp_cloud);
      rp.read("hand_template", cfg.hand_template);
    }
    if (const json* s = r.get("steady")) {
      Reader rs(*s, "steady");
      std::string mode = mode_name(cfg.steady_mode);
      rs.read("mode", mode);
      if (mode == "automatic") cfg.steady_mode = SteadyMode::Automatic;
      else if (mode == "explicit") cfg.steady_mode = SteadyMode::Explicit;
      else if (mode == "all") cfg.steady_mode = SteadyMode::All;
      else rs.fail("unknown mode '" + mode + "'");
      rs.read("first", cfg.range_first);
      rs.read("last", cfg.range_last);
      rs.read("motion_threshold", cfg.motion_threshold);
    }
    if (const json* o = r.get("object_init"); o && !o->is_null()) {
      try {
        cfg.object_init = detail::transform_from_json(*o, "object_init");
      } catch (const Error& e) {
        throw Error(ErrorKind::ConfigError, e.what());
      }
    }
    r.read("hand_scale", cfg.hand_scale);
    r.read("enable_refine", cfg.enable_refine);
    r.read("enable_joint_solve", cfg.enable_joint_solve);
    r.read("seed", cfg.seed);
    if (const json* s = r.get("solver")) read_solver(*s, cfg.solver);
    if (const json* s = r.get("ik")) {
      Reader ri(*s, "ik");
      ri.read("damping", cfg.ik.damping);
      ri.read("max_iterations", cfg.ik.max_iterations);
      ri.read("tolerance", cfg.ik.tolerance);
      ri.read("step_limit", cfg.ik.step_limit);
      ri.read("geometric_start", cfg.ik.geometric_start);
    }
    if (const json* s = r.get("icp")) {
      Reader ri(*s, "icp");
      ri.read("max_iterations", cfg.icp.max_iterations);
      ri.read("rms_change_tolerance", cfg.icp.rms_change_tolerance);
    }
    if (const json* s = r.get("refine")) {
      Reader rr(*s, "refine");
      rr.read("max_iterations", cfg.refine.max_iterations);
      rr.read("gradient_tolerance", cfg.refine.gradient_tolerance);
      rr.read("memory", cfg.refine.memory);
      rr.read("armijo", cfg.refine.armijo);
      rr.read("max_initial_step", cfg.refine.max_initial_step);
      if (const json* w = rr.get("weights")) read_weights(*w, cfg.refine.weights);
    }
  }
  cfg.solver.seed = cfg.seed;
  for (auto* p : {&cfg.keypoints_dir, &cfg.intrinsics, &cfg.mesh, &cfg.contact_map,
                  &cfg.turntable_cloud, &cfg.grasp_cloud, &cfg.hand_template}) {
    *p = resolve(base_dir, *p);
  }
  cfg.validate();
  return cfg;
}

PipelineConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::ConfigError, "cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  const auto parent = std::filesystem::path(path).parent_path();
  return parse_config(ss.str(), parent.empty() ? "." : parent.string());
}

std::string config_to_json(const PipelineConfig& cfg) {
  json doc = {
      {"paths",
       {{"keypoints", cfg.keypoints_dir},
        {"intrinsics", cfg.intrinsics},
        {"mesh", cfg.mesh},
        {"contact_map", cfg.contact_map},
        {"turntable_cloud", cfg.turntable_cloud},
        {"grasp_cloud", cfg.grasp_cloud},
        {"hand_template", cfg.hand_template}}},
      {"steady",
       {{"mode", mode_name(cfg.steady_mode)},
        {"first", cfg.range_first},
        {"last", cfg.range_last},
        {"motion_threshold", cfg.motion_threshold}}},
      {"object_init", cfg.object_init ? to_json(*cfg.object_init) : json(nullptr)},
      {"hand_scale", cfg.hand_scale},
      {"enable_refine", cfg.enable_refine},
      {"enable_joint_solve", cfg.enable_joint_solve},
      {"seed", cfg.seed},
      {"solver", solver_json(cfg.solver)},
      {"ik",
       {{"damping", cfg.ik.damping},
        {"max_iterations", cfg.ik.max_iterations},
        {"tolerance", cfg.ik.tolerance},
        {"step_limit", cfg.ik.step_limit},
        {"geometric_start", cfg.ik.geometric_start}}},
      {"icp",
       {{"max_iterations", cfg.icp.max_iterations},
        {"rms_change_tolerance", cfg.icp.rms_change_tolerance}}},
      {"refine",
       {{"max_iterations", cfg.refine.max_iterations},
        {"gradient_tolerance", cfg.refine.gradient_tolerance},
        {"memory", cfg.refine.memory},
        {"armijo", cfg.refine.armijo},
        {"max_initial_step", cfg.refine.max_initial_step},
        {"weights", weights_json(cfg.refine.weights)}}},
  };
  return doc.dump(2) + "\n";
}

// ---------------------------------------------------------------------------

bool CaptureResult::has_stage(const std::string& name) const { return stage(name) != nullptr; }

const StageReport* CaptureResult::stage(const std::string& name) const {
  for (const auto& s : stages) {
    if (s.name == name) return &s;
  }
  return nullptr;
}

bool CaptureResult::all_converged() const {
  for (const auto& s : stages) {
    if (!s.converged) return false;
  }
  return true;
}

std::string to_json(const CaptureResult& r) {
  json frames = json::array();
  for (std::size_t i = 0; i < r.num_frames; ++i) {
    json f = {{"status", sfm::to_string(r.frame_status.at(i))},
              {"camera_pose", to_json(r.camera_poses.at(i))}};
    if (i < r.propagated.size() && r.propagated[i]) {
      f["object_in_camera"] = to_json(r.propagated[i]->object_in_camera);
      f["palm_in_camera"] = to_json(r.propagated[i]->palm_in_camera);
    } else {
      f["object_in_camera"] = nullptr;
      f["palm_in_camera"] = nullptr;
    }
    frames.push_back(f);
  }
  json joints = json::array();
  for (int k = 0; k < hand::kNumLandmarks; ++k) {
    joints.push_back(r.sfm_observed[k] ? to_json(r.sfm_joints[k]) : json(nullptr));
  }
  json stages = json::array();
  for (const auto& s : r.stages) {
    stages.push_back({{"name", s.name},
                      {"converged", s.converged},
                      {"iterations", s.iterations},
                      {"initial_cost", s.initial_cost},
                      {"final_cost", s.final_cost}});
  }
  json doc = {
      {"format", "graspcap-capture"},
      {"version", kCaptureVersion},
      {"num_frames", r.num_frames},
      {"steady_range", {r.steady.first + 1, r.steady.last + 1}},
      {"object_pose_world", to_json(r.object_pose_world)},
      {"object_rms", r.object_rms},
      {"adjustment", to_json(r.adjustment)},
      {"adjustment_rms", r.adjustment_rms},
      {"sfm",
       {{"joints", joints},
        {"final_cost", r.sfm_final_cost},
        {"objective", r.sfm_objective},
        {"rms_residual", r.sfm_rms_residual},
        {"metric_scale", r.metric_scale}}},
      {"hand_fit", to_json(r.hand_fit)},
      {"palm_fit_rms", r.palm_fit_rms},
      {"ik_rms", r.ik_rms},
      {"hand", to_json(r.hand)},
      {"contact_energy", {{"initial", terms_json(r.contact_initial)}, {"final", terms_json(r.contact_final)}}},
      {"frames", frames},
      {"stages", stages},
  };
  if (r.joint) {
    json cams = json::array();
    for (const auto& c : r.joint->camera_poses) cams.push_back(to_json(c));
    doc["joint_solve"] = {{"hand", to_json(r.joint->hand)},
                          {"camera_poses", cams},
                          {"staged_objective", r.joint->staged_objective},
                          {"objective", r.joint->objective},
                          {"final_cost", r.joint->final_cost}};
  } else {
    doc["joint_solve"] = nullptr;
  }
  return doc.dump(2) + "\n";
}

CaptureResult capture_from_json(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::ParseError, std::string("capture document: ") + e.what());
  }
  try {
    if (doc.at("format") != "graspcap-capture") throw Error(ErrorKind::ParseError, "not a capture document");
    if (doc.at("version").get<int>() != kCaptureVersion) {
      throw Error(ErrorKind::ParseError, "unsupported capture version");
    }
    CaptureResult r;
    r.num_frames = doc.at("num_frames").get<std::size_t>();
    const auto& range = doc.at("steady_range");
    r.steady = {range.at(0).get<std::size_t>() - 1, range.at(1).get<std::size_t>() - 1};
    r.object_pose_world = detail::transform_from_json(doc.at("object_pose_world"), "object_pose_world");
    r.object_rms = number(doc.at("object_rms"), "object_rms");
    r.adjustment = detail::transform_from_json(doc.at("adjustment"), "adjustment");
    r.adjustment_rms = number(doc.at("adjustment_rms"), "adjustment_rms");

    const auto& sfm = doc.at("sfm");
    const auto& joints = sfm.at("joints");
    if (!joints.is_array() || joints.size() != hand::kNumLandmarks) {
      throw Error(ErrorKind::ParseError, "sfm.joints must hold 21 entries");
    }
    for (int k = 0; k < hand::kNumLandmarks; ++k) {
      const json& j = joints[static_cast<std::size_t>(k)];
      r.sfm_observed[k] = !j.is_null();
      r.sfm_joints[k] = j.is_null() ? Vec3::Zero() : detail::vec3_from_json(j, "sfm.joints");
    }
    r.sfm_final_cost = number(sfm.at("final_cost"), "sfm.final_cost");
    r.sfm_objective = number(sfm.at("objective"), "sfm.objective");
    r.sfm_rms_residual = number(sfm.at("rms_residual"), "sfm.rms_residual");
    r.metric_scale = number(sfm.at("metric_scale"), "sfm.metric_scale");

    r.hand_fit = detail::hand_from_json(doc.at("hand_fit"), "hand_fit");
    r.palm_fit_rms = number(doc.at("palm_fit_rms"), "palm_fit_rms");
    r.ik_rms = number(doc.at("ik_rms"), "ik_rms");
    r.hand = detail::hand_from_json(doc.at("hand"), "hand");
    r.contact_initial = terms_from_json(doc.at("contact_energy").at("initial"));
    r.contact_final = terms_from_json(doc.at("contact_energy").at("final"));

    const auto& frames = doc.at("frames");
    if (!frames.is_array() || frames.size() != r.num_frames) {
      throw Error(ErrorKind::ParseError, "frames must hold num_frames entries");
    }
    for (const auto& f : frames) {
      r.frame_status.push_back(sfm::frame_status_from_string(f.at("status").get<std::string>()));
      r.camera_poses.push_back(detail::optional_transform(f.at("camera_pose"), "camera_pose"));
      const auto o = detail::optional_transform(f.at("object_in_camera"), "object_in_camera");
      const auto p = detail::optional_transform(f.at("palm_in_camera"), "palm_in_camera");
      if (o && p) r.propagated.push_back(PropagatedPose{*o, *p});
      else r.propagated.push_back(std::nullopt);
    }
    for (const auto& s : doc.at("stages")) {
      r.stages.push_back({s.at("name").get<std::string>(), s.at("converged").get<bool>(),
                          s.at("iterations").get<int>(), number(s.at("initial_cost"), "initial_cost"),
                          number(s.at("final_cost"), "final_cost")});
    }
    const json& js = doc.at("joint_solve");
    if (!js.is_null()) {
      JointSolveSummary j;
      j.hand = detail::hand_from_json(js.at("hand"), "joint_solve.hand");
      for (const auto& c : js.at("camera_poses")) j.camera_poses.push_back(detail::optional_transform(c, "camera_poses"));
      j.staged_objective = number(js.at("staged_objective"), "staged_objective");
      j.objective = number(js.at("objective"), "objective");
      j.final_cost = number(js.at("final_cost"), "final_cost");
      r.joint = std::move(j);
    }
    return r;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::ParseError, std::string("capture document: ") + e.what());
  }
}

void save_capture(const std::string& path, const CaptureResult& result) {
  const std::string text = to_json(result);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::ConfigError, "cannot write " + path);
  out << text;
}

CaptureResult load_capture(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::ConfigError, "cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return capture_from_json(ss.str());
}

}  // namespace graspcap::pipeline
