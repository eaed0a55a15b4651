// graspcap command-line front end.
#include <cstdio>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "graspcap/pipeline.hpp"
#include "graspcap/synth.hpp"

using namespace graspcap;

namespace {

struct Common {
  std::string config;
  std::string in;
  std::string out;
  std::optional<std::uint64_t> seed;

  std::string keypoints, intrinsics, mesh, contact_map, turntable, grasp, hand_template;
  std::string steady;
  std::vector<std::size_t> range;
  std::optional<double> motion_threshold;
  std::optional<double> hand_scale;
  bool no_refine = false;
  bool joint_solve = false;
};

void add_common(CLI::App* app, Common& c, bool needs_out = true) {
  app->add_option("--config", c.config, "pipeline configuration (JSON)");
  app->add_option("--seed", c.seed, "random seed");
  auto* o = app->add_option("-o,--out", c.out, "output document");
  if (needs_out) o->required();
  app->add_option("--in", c.in, "capture document from an earlier stage");
  app->add_option("--keypoints", c.keypoints, "keypoint directory");
  app->add_option("--intrinsics", c.intrinsics, "camera intrinsics file");
  app->add_option("--mesh", c.mesh, "object mesh (OBJ or PLY)");
  app->add_option("--contact-map", c.contact_map, "per-vertex contact values");
  app->add_option("--turntable-cloud", c.turntable, "turntable point cloud (xyz)");
  app->add_option("--grasp-cloud", c.grasp, "grasp point cloud (xyz)");
  app->add_option("--hand-template", c.hand_template, "hand skeleton template");
  app->add_option("--steady", c.steady, "steady segment mode")
      ->check(CLI::IsMember({"automatic", "explicit", "all"}));
  app->add_option("--range", c.range, "explicit steady range FIRST LAST (one-based)")->expected(2);
  app->add_option("--motion-threshold", c.motion_threshold, "steady motion threshold (pixels)");
  app->add_option("--hand-scale", c.hand_scale, "metric hand scale");
  app->add_flag("--no-refine", c.no_refine, "skip contact refinement");
  app->add_flag("--joint-solve", c.joint_solve, "run the joint hand and camera solve");
}

pipeline::PipelineConfig make_config(const Common& c) {
  pipeline::PipelineConfig cfg;
  if (!c.config.empty()) cfg = pipeline::load_config(c.config);
  auto set = [](std::string& dst, const std::string& v) {
    if (!v.empty()) dst = v;
  };
  set(cfg.keypoints_dir, c.keypoints);
  set(cfg.intrinsics, c.intrinsics);
  set(cfg.mesh, c.mesh);
  set(cfg.contact_map, c.contact_map);
  set(cfg.turntable_cloud, c.turntable);
  set(cfg.grasp_cloud, c.grasp);
  set(cfg.hand_template, c.hand_template);
  if (c.steady == "automatic") cfg.steady_mode = pipeline::SteadyMode::Automatic;
  if (c.steady == "explicit") cfg.steady_mode = pipeline::SteadyMode::Explicit;
  if (c.steady == "all") cfg.steady_mode = pipeline::SteadyMode::All;
  if (c.range.size() == 2) {
    cfg.steady_mode = pipeline::SteadyMode::Explicit;
    cfg.range_first = c.range[0];
    cfg.range_last = c.range[1];
  }
  if (c.motion_threshold) cfg.motion_threshold = *c.motion_threshold;
  if (c.hand_scale) cfg.hand_scale = *c.hand_scale;
  if (c.no_refine) cfg.enable_refine = false;
  if (c.joint_solve) cfg.enable_joint_solve = true;
  if (c.seed) {
    cfg.seed = *c.seed;
    cfg.solver.seed = *c.seed;
  }
  cfg.validate();
  return cfg;
}

int finish(const pipeline::CaptureResult& r, const std::string& out) {
  pipeline::save_capture(out, r);
  for (const auto& s : r.stages) {
    if (!s.converged) std::cerr << "graspcap: stage " << s.name << " did not converge\n";
  }
  return r.all_converged() ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Markerless grasp capture from hand keypoints, object mesh and depth clouds"};
  app.require_subcommand(1);

  Common common;
  std::map<std::string, CLI::App*> stages;
  const std::pair<const char*, const char*> stage_list[] = {
      {"object-pose", "register the object to the turntable cloud"},
      {"sfm", "reconstruct hand joints and virtual cameras"},
      {"fit-hand", "fit palm pose and joint angles to the reconstruction"},
      {"adjust", "estimate the grasp adjustment from the grasp cloud"},
      {"refine", "refine the grasp against the contact map"},
      {"joint-solve", "jointly refine hand and cameras against the detections"},
      {"propagate", "propagate object and palm poses to every frame"},
      {"run", "run every stage"},
  };
  for (const auto& [name, help] : stage_list) {
    auto* sub = app.add_subcommand(name, help);
    add_common(sub, common);
    stages[name] = sub;
  }

  auto* synth_cmd = app.add_subcommand("synth", "write a synthetic dataset");
  std::string synth_dir;
  std::uint64_t synth_seed = 0;
  synth::SceneConfig scene_cfg;
  std::string shape = "sphere";
  std::string synth_config;
  synth_cmd->add_option("-o,--out", synth_dir, "dataset directory")->required();
  synth_cmd->add_option("--seed", synth_seed, "random seed");
  synth_cmd->add_option("--config", synth_config, "accepted for uniformity; unused");
  synth_cmd->add_option("--frames", scene_cfg.num_frames, "steady frames");
  synth_cmd->add_option("--transient", scene_cfg.transient_frames, "churning prefix frames");
  synth_cmd->add_option("--noise", scene_cfg.noise_sigma, "pixel noise sigma");
  synth_cmd->add_option("--dropout", scene_cfg.dropout, "detection dropout probability");
  synth_cmd->add_option("--object", shape, "object shape")->check(CLI::IsMember({"sphere", "box"}));

  auto* eval_cmd = app.add_subcommand("evaluate", "compare a capture document with ground truth");
  std::string eval_in, eval_truth, eval_mesh, eval_out, eval_config;
  std::uint64_t eval_seed = 0;
  eval_cmd->add_option("--in", eval_in, "capture document")->required();
  eval_cmd->add_option("--truth", eval_truth, "ground_truth.json")->required();
  eval_cmd->add_option("--mesh", eval_mesh, "object mesh")->required();
  eval_cmd->add_option("-o,--out", eval_out, "metrics document (stdout when omitted)");
  eval_cmd->add_option("--config", eval_config, "accepted for uniformity; unused");
  eval_cmd->add_option("--seed", eval_seed, "accepted for uniformity; unused");

  auto* export_cmd = app.add_subcommand("export-skeleton", "dump the posed hand as OBJ");
  std::string export_in, export_out;
  export_cmd->add_option("--in", export_in, "capture document")->required();
  export_cmd->add_option("-o,--out", export_out, "OBJ file")->required();

  auto* mesh_cmd = app.add_subcommand("make-mesh", "write one of the built-in object meshes");
  std::string mesh_shape = "sphere", mesh_out;
  mesh_cmd->add_option("--object", mesh_shape, "object shape")->check(CLI::IsMember({"sphere", "box"}));
  mesh_cmd->add_option("-o,--out", mesh_out, "OBJ file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth_cmd->parsed()) {
      scene_cfg.object = shape == "box" ? synth::ObjectShape::Box : synth::ObjectShape::Sphere;
      synth::write_dataset(synth_dir, synth::generate_scene(synth_seed, scene_cfg));
      return 0;
    }
    if (eval_cmd->parsed()) {
      const auto metrics = synth::evaluate(pipeline::load_capture(eval_in), synth::load_ground_truth(eval_truth),
                                           contact::load_mesh(eval_mesh));
      const std::string text = synth::metrics_to_json(metrics);
      if (eval_out.empty()) std::cout << text;
      else std::ofstream(eval_out) << text;
      return 0;
    }
    if (mesh_cmd->parsed()) {
      contact::save_obj(mesh_out, mesh_shape == "box" ? synth::make_box() : synth::make_sphere());
      return 0;
    }
    if (export_cmd->parsed()) {
      const auto r = pipeline::load_capture(export_in);
      pipeline::export_skeleton_obj(export_out, contact::CapsuleProxy(hand::HandSkeleton::default_template()), r.hand);
      return 0;
    }

    std::string name;
    for (const auto& [n, sub] : stages) {
      if (sub->parsed()) name = n;
    }
    const auto cfg = make_config(common);
    if (name == "run") return finish(pipeline::run_pipeline(cfg), common.out);

    pipeline::CaptureResult r;
    if (!common.in.empty()) r = pipeline::load_capture(common.in);
    if (name == "object-pose") pipeline::run_object_pose(cfg, r);
    else if (name == "sfm") pipeline::run_sfm(cfg, r);
    else if (name == "fit-hand") pipeline::run_fit_hand(cfg, r);
    else if (name == "adjust") pipeline::run_adjust(cfg, r);
    else if (name == "refine") pipeline::run_refine(cfg, r);
    else if (name == "joint-solve") pipeline::run_joint_solve(cfg, r);
    else if (name == "propagate") pipeline::run_propagate(r);
    return finish(r, common.out);
  } catch (const Error& e) {
    std::cerr << "graspcap: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "graspcap: " << e.what() << "\n";
    return 1;
  }
}
