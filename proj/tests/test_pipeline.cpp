#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "graspcap/pipeline.hpp"
#include "graspcap/synth.hpp"
#include "test_util.hpp"

using namespace graspcap;
using namespace graspcap::pipeline;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct CliResult {
  int code;
  std::string err;
};

CliResult cli(const std::string& args, const fs::path& dir) {
  const auto err = dir / "stderr.txt";
  const std::string cmd = std::string(GRASPCAP_CLI) + " " + args + " 2> " + err.string();
  const int status = std::system(cmd.c_str());
  return {WEXITSTATUS(status), slurp(err)};
}

fs::path dataset(const std::string& name, std::uint64_t seed, const synth::SceneConfig& cfg = {}) {
  const auto dir = testutil::temp_dir(name);
  synth::write_dataset(dir.string(), synth::generate_scene(seed, cfg));
  return dir;
}

double pose_diff(const RigidTransform& a, const RigidTransform& b) {
  return (a.matrix() - b.matrix()).cwiseAbs().maxCoeff();
}

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorKind::PreconditionViolation;
}

}  // namespace

TEST(SteadyFrames, PicksTheStillSuffix) {
  synth::SceneConfig cfg;
  cfg.transient_frames = 8;
  const auto sc = synth::generate_scene(81, cfg);
  const auto range = select_steady_frames(sc.observations, 5.0);
  EXPECT_EQ(range.first, 8u);
  EXPECT_EQ(range.last, 37u);
  EXPECT_EQ(range.size(), 30u);
}

TEST(SteadyFrames, WholeSequenceWhenStill) {
  const auto sc = synth::generate_scene(82);
  const auto range = select_steady_frames(sc.observations, 5.0);
  EXPECT_EQ(range.first, 0u);
  EXPECT_EQ(range.last, sc.observations.size() - 1);
}

TEST(SteadyFrames, IgnoresOrbitSimilarity) {
  // a pure 2D similarity between frames is camera motion, not articulation
  auto sc = synth::generate_scene(83);
  auto& f = sc.observations.frames;
  for (std::size_t i = 0; i < f.size(); ++i) {
    const double a = 0.05 * static_cast<double>(i), s = 1 + 0.01 * static_cast<double>(i);
    const Eigen::Matrix2d R = Eigen::Rotation2Dd(a).toRotationMatrix();
    for (auto& d : f[i]) d.pixel = s * R * (d.pixel - Vec2(320, 240)) + Vec2(320 + 3.0 * i, 240);
  }
  EXPECT_EQ(select_steady_frames(sc.observations, 5.0).first, 0u);
}

TEST(SteadyFrames, Errors) {
  synth::SceneConfig cfg;
  cfg.transient_frames = 8;
  auto sc = synth::generate_scene(84, cfg);
  auto obs = sc.observations.slice(0, 11);  // only four steady frames
  EXPECT_EQ(kind_of([&] { select_steady_frames(obs, 5.0); }), ErrorKind::NoSteadySegment);
  EXPECT_EQ(kind_of([&] { select_steady_frames(sc.observations.slice(0, 0), 5.0); }),
            ErrorKind::PreconditionViolation);
  EXPECT_EQ(kind_of([&] { select_steady_frames(sc.observations, 0.0); }), ErrorKind::PreconditionViolation);
}

TEST(Propagation, ClosesTheLoop) {
  std::mt19937_64 rng(85);
  std::vector<RigidTransform> cams{RigidTransform::identity()};
  for (int i = 0; i < 20; ++i) cams.push_back(testutil::random_transform(rng, 0.3));
  const auto adj = testutil::random_transform(rng, 0.05);
  const auto wTo = testutil::random_transform(rng, 0.5);
  const auto wTp = testutil::random_transform(rng, 0.5);
  const auto out = propagate_poses(cams, adj, wTo, wTp);
  ASSERT_EQ(out.size(), cams.size());
  for (std::size_t i = 0; i < cams.size(); ++i) {
    EXPECT_LT(pose_diff(cams[i] * out[i].object_in_camera, adj * wTo), 1e-9);
    EXPECT_LT(pose_diff(cams[i] * out[i].palm_in_camera, wTp), 1e-9);
  }
  // the anchor frame is the world frame itself
  EXPECT_EQ(out[0].object_in_camera.matrix(), (adj * wTo).matrix());
  EXPECT_EQ(out[0].palm_in_camera.matrix(), wTp.matrix());
  EXPECT_TRUE(propagate_poses({}, adj, wTo, wTp).empty());
}

TEST(Config, ParsesAndResolvesPaths) {
  const auto cfg = parse_config(R"({
    "paths": {"keypoints": "kp", "mesh": "/abs/m.obj", "contact_map": "../c.txt"},
    "steady": {"mode": "explicit", "first": 3, "last": 9, "motion_threshold": 2.5},
    "hand_scale": 1.1, "enable_refine": false, "seed": 7,
    "solver": {"huber_width": 3.0}, "refine": {"weights": {"margin": 0.005}}
  })", "/data/run");
  EXPECT_EQ(cfg.keypoints_dir, "/data/run/kp");
  EXPECT_EQ(cfg.mesh, "/abs/m.obj");
  EXPECT_EQ(cfg.contact_map, "/data/c.txt");
  EXPECT_EQ(cfg.steady_mode, SteadyMode::Explicit);
  EXPECT_EQ(cfg.range_first, 3u);
  EXPECT_EQ(cfg.range_last, 9u);
  EXPECT_EQ(cfg.motion_threshold, 2.5);
  EXPECT_EQ(cfg.hand_scale, 1.1);
  EXPECT_FALSE(cfg.enable_refine);
  EXPECT_EQ(cfg.solver.seed, 7u);
  EXPECT_EQ(cfg.solver.huber_width, 3.0);
  EXPECT_EQ(cfg.refine.weights.margin, 0.005);
  EXPECT_FALSE(cfg.object_init.has_value());
}

TEST(Config, JsonRoundTrip) {
  PipelineConfig cfg;
  cfg.keypoints_dir = "/a/kp";
  cfg.mesh = "/a/m.obj";
  cfg.steady_mode = SteadyMode::All;
  cfg.enable_joint_solve = true;
  std::mt19937_64 rng(86);
  cfg.object_init = testutil::random_transform(rng, 0.3);
  cfg.refine.max_iterations = 77;
  cfg.seed = 12;
  const auto back = parse_config(config_to_json(cfg), "/");
  EXPECT_EQ(back.keypoints_dir, cfg.keypoints_dir);
  EXPECT_EQ(back.steady_mode, SteadyMode::All);
  EXPECT_TRUE(back.enable_joint_solve);
  ASSERT_TRUE(back.object_init.has_value());
  EXPECT_LT(pose_diff(*back.object_init, *cfg.object_init), 1e-15);
  EXPECT_EQ(back.refine.max_iterations, 77);
  EXPECT_EQ(back.seed, 12u);
  EXPECT_EQ(config_to_json(back), config_to_json(cfg));
}

TEST(Config, Errors) {
  auto kind = [](const std::string& text) { return kind_of([&] { parse_config(text); }); };
  EXPECT_EQ(kind("{"), ErrorKind::ConfigError);
  EXPECT_EQ(kind(R"({"bogus": 1})"), ErrorKind::ConfigError);
  EXPECT_EQ(kind(R"({"paths": {"mesh": 3}})"), ErrorKind::ConfigError);
  EXPECT_EQ(kind(R"({"steady": {"mode": "sometimes"}})"), ErrorKind::ConfigError);
  EXPECT_EQ(kind(R"({"steady": {"mode": "explicit", "first": 5, "last": 2}})"), ErrorKind::ConfigError);
  EXPECT_EQ(kind(R"({"hand_scale": -1})"), ErrorKind::ConfigError);
  EXPECT_EQ(kind(R"({"object_init": [[1, 0], [0, 1]]})"), ErrorKind::ConfigError);
  EXPECT_EQ(kind(R"({"refine": {"weights": {"margin": -0.004}}})"), ErrorKind::ConfigError);
  EXPECT_EQ(kind_of([] { load_config("/nonexistent/config.json"); }), ErrorKind::ConfigError);
}

TEST(Capture, JsonRoundTripIsExact) {
  synth::SceneConfig scfg;
  scfg.transient_frames = 5;
  const auto sc = synth::generate_scene(87, scfg);
  auto r = synth::truth_as_result(synth::ground_truth(sc));
  r.stages.push_back({"sfm", true, 12, 3.5, 1e-3});
  r.stages.push_back({"refine", false, 2000, 0.25, 0.125});
  r.contact_final = {1e-4, 2e-5, 3e-6};
  r.sfm_observed[4] = false;
  JointSolveSummary js;
  js.hand = r.hand;
  js.camera_poses = r.camera_poses;
  js.staged_objective = 12.5;
  js.objective = 11.25;
  r.joint = js;

  const auto back = capture_from_json(to_json(r));
  EXPECT_EQ(to_json(back), to_json(r));
  EXPECT_EQ(back.num_frames, r.num_frames);
  EXPECT_EQ(back.steady.first, 5u);
  EXPECT_EQ(back.frame_status, r.frame_status);
  EXPECT_EQ(back.sfm_observed, r.sfm_observed);
  ASSERT_EQ(back.camera_poses.size(), r.camera_poses.size());
  for (std::size_t i = 0; i < r.camera_poses.size(); ++i) {
    ASSERT_EQ(back.camera_poses[i].has_value(), r.camera_poses[i].has_value());
    if (r.camera_poses[i]) EXPECT_LT(pose_diff(*back.camera_poses[i], *r.camera_poses[i]), 1e-12);
  }
  EXPECT_LT((back.hand.angles - r.hand.angles).cwiseAbs().maxCoeff(), 1e-12);
  ASSERT_TRUE(back.joint.has_value());
  EXPECT_EQ(back.joint->objective, 11.25);
  ASSERT_EQ(back.stages.size(), 2u);
  EXPECT_FALSE(back.stages[1].converged);
  EXPECT_FALSE(back.all_converged());
  EXPECT_EQ(back.stage("sfm")->iterations, 12);
  EXPECT_EQ(back.stage("adjust"), nullptr);
}

TEST(Capture, RejectsForeignDocuments) {
  EXPECT_EQ(kind_of([] { capture_from_json("not json"); }), ErrorKind::ParseError);
  EXPECT_EQ(kind_of([] { capture_from_json(R"({"format": "other", "version": 1})"); }), ErrorKind::ParseError);
  EXPECT_EQ(kind_of([] { capture_from_json(R"({"format": "graspcap-capture", "version": 999})"); }),
            ErrorKind::ParseError);
}

TEST(Stages, OrderPreconditions) {
  PipelineConfig cfg;
  CaptureResult r;
  EXPECT_THROW(run_fit_hand(cfg, r), StageError);
  EXPECT_THROW(run_adjust(cfg, r), StageError);
  EXPECT_THROW(run_refine(cfg, r), StageError);
  EXPECT_THROW(run_joint_solve(cfg, r), StageError);
  try {
    run_propagate(r);
    FAIL();
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "propagate");
    EXPECT_EQ(e.kind(), ErrorKind::PreconditionViolation);
  }
}

TEST(Pipeline, NoiselessRunConservesFrames) {
  synth::SceneConfig scfg;
  scfg.transient_frames = 6;
  const auto dir = dataset("pipe_frames", 88, scfg);
  const auto cfg = load_config((dir / "config.json").string());
  EXPECT_EQ(cfg.steady_mode, SteadyMode::Automatic);
  const auto r = run_pipeline(cfg);
  EXPECT_EQ(r.num_frames, 36u);
  EXPECT_EQ(r.steady.first, 6u);
  ASSERT_EQ(r.frame_status.size(), 36u);
  ASSERT_EQ(r.camera_poses.size(), 36u);
  ASSERT_EQ(r.propagated.size(), 36u);
  for (std::size_t i = 0; i < 36; ++i) {
    const bool steady = i >= 6;
    EXPECT_EQ(r.frame_status[i] == sfm::FrameStatus::ExcludedTransient, !steady) << i;
    EXPECT_EQ(r.camera_poses[i].has_value(), r.frame_status[i] == sfm::FrameStatus::Registered) << i;
    EXPECT_EQ(r.propagated[i].has_value(), r.camera_poses[i].has_value()) << i;
  }
  EXPECT_EQ(r.camera_poses[6]->matrix(), Mat4::Identity());
  for (const char* s : {"object-pose", "sfm", "fit-hand", "adjust", "refine", "propagate"}) {
    EXPECT_TRUE(r.has_stage(s)) << s;
  }
  EXPECT_FALSE(r.has_stage("joint-solve"));
  EXPECT_TRUE(r.all_converged());
}

TEST(Pipeline, RefineDoesNotTouchEarlierStages) {
  const auto dir = dataset("pipe_isolate", 89);
  auto cfg = load_config((dir / "config.json").string());
  const auto with = run_pipeline(cfg);
  cfg.enable_refine = false;
  const auto without = run_pipeline(cfg);
  EXPECT_FALSE(without.has_stage("refine"));
  EXPECT_EQ(with.object_pose_world.matrix(), without.object_pose_world.matrix());
  EXPECT_EQ(with.sfm_joints, without.sfm_joints);
  EXPECT_EQ(with.hand_fit.angles, without.hand_fit.angles);
  EXPECT_EQ(with.hand_fit.palm_pose.matrix(), without.hand_fit.palm_pose.matrix());
  EXPECT_EQ(without.hand.angles, without.hand_fit.angles);
  for (std::size_t i = 0; i < with.camera_poses.size(); ++i) {
    EXPECT_EQ(with.camera_poses[i]->matrix(), without.camera_poses[i]->matrix());
  }
}

TEST(Pipeline, ExplicitRangeOutOfBounds) {
  const auto dir = dataset("pipe_range", 90);
  auto cfg = load_config((dir / "config.json").string());
  cfg.steady_mode = SteadyMode::Explicit;
  cfg.range_first = 1;
  cfg.range_last = 31;
  try {
    run_pipeline(cfg);
    FAIL();
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "sfm");
    EXPECT_EQ(e.kind(), ErrorKind::ConfigError);
  }
}

TEST(Cli, RunIsByteDeterministic) {
  const auto dir = dataset("cli_det", 91);
  const auto cfg = (dir / "config.json").string();
  ASSERT_EQ(cli("run --config " + cfg + " -o " + (dir / "a.json").string(), dir).code, 0);
  ASSERT_EQ(cli("run --config " + cfg + " -o " + (dir / "b.json").string(), dir).code, 0);
  const auto a = slurp(dir / "a.json");
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, slurp(dir / "b.json"));
}

TEST(Cli, StagesChainThroughDocuments) {
  const auto dir = dataset("cli_chain", 92);
  const std::string cfg = "--config " + (dir / "config.json").string();
  const auto doc = (dir / "capture.json").string();
  for (const char* s : {"object-pose", "sfm", "fit-hand", "adjust", "refine", "propagate"}) {
    const std::string in = std::string(s) == "object-pose" ? "" : " --in " + doc;
    ASSERT_EQ(cli(std::string(s) + " " + cfg + in + " -o " + doc, dir).code, 0) << s;
  }
  ASSERT_EQ(cli("run " + cfg + " -o " + (dir / "run.json").string(), dir).code, 0);
  EXPECT_EQ(slurp(doc), slurp(dir / "run.json"));
  const auto metrics = (dir / "metrics.json").string();
  ASSERT_EQ(cli("evaluate --in " + doc + " --truth " + (dir / "ground_truth.json").string() + " --mesh " +
                    (dir / "mesh.obj").string() + " -o " + metrics,
                dir)
                .code,
            0);
  EXPECT_NE(slurp(metrics).find("joint_rmse"), std::string::npos);
  ASSERT_EQ(cli("export-skeleton --in " + doc + " -o " + (dir / "hand.obj").string(), dir).code, 0);
  EXPECT_GT(contact::load_mesh((dir / "hand.obj").string()).triangles().size(), 100u);
}

TEST(Cli, MissingContactMapFailsBeforeWriting) {
  const auto dir = dataset("cli_missing", 93);
  fs::remove(dir / "contact.txt");
  const auto out = dir / "out.json";
  const auto r = cli("run --config " + (dir / "config.json").string() + " -o " + out.string(), dir);
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find((dir / "contact.txt").string()), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("ConfigError"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(out));
  // without refinement the map is not needed
  EXPECT_EQ(cli("run --no-refine --config " + (dir / "config.json").string() + " -o " + out.string(), dir).code, 0);
}

TEST(Cli, UsageErrors) {
  const auto dir = testutil::temp_dir("cli_usage");
  EXPECT_NE(cli("", dir).code, 0);
  EXPECT_NE(cli("run --bogus", dir).code, 0);
  EXPECT_EQ(cli("run --config " + (dir / "none.json").string() + " -o " + (dir / "o.json").string(), dir).code, 1);
  EXPECT_EQ(cli("fit-hand --in " + (dir / "none.json").string() + " -o " + (dir / "o.json").string(), dir).code, 1);
}

TEST(Cli, MakeMeshMatchesShippedData) {
  const auto dir = testutil::temp_dir("cli_mesh");
  for (const char* obj : {"sphere", "box"}) {
    const auto out = dir / (std::string(obj) + ".obj");
    ASSERT_EQ(cli(std::string("make-mesh --object ") + obj + " -o " + out.string(), dir).code, 0);
    EXPECT_EQ(slurp(out), slurp(fs::path(GRASPCAP_DATA_DIR) / (std::string(obj) + ".obj"))) << obj;
  }
}
