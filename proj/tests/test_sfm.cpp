#include <gtest/gtest.h>

#include <fstream>

#include "graspcap/sfm.hpp"
#include "graspcap/synth.hpp"
#include "test_util.hpp"

using namespace graspcap;
using namespace graspcap::sfm;

namespace {

const synth::SyntheticScene& noiseless_scene() {
  static const auto scene = synth::generate_scene(21);
  return scene;
}

const synth::SyntheticScene& noisy_scene() {
  static const auto scene = [] {
    synth::SceneConfig cfg;
    cfg.noise_sigma = 1.0;
    return synth::generate_scene(22, cfg);
  }();
  return scene;
}

template <typename F>
ErrorKind kind_of(F&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorKind::ConfigError;
}

// Similarity-aligned RMS between two landmark sets.
double aligned_rms(const hand::JointSet3D& est, const hand::JointSet3D& truth) {
  std::vector<Vec3> a(est.begin(), est.end()), b(truth.begin(), truth.end());
  const auto S = geom::umeyama_align(a, b);
  double sum = 0;
  for (std::size_t i = 0; i < a.size(); ++i) sum += (S * a[i] - b[i]).squaredNorm();
  return std::sqrt(sum / static_cast<double>(a.size()));
}

}  // namespace

TEST(RobustPenalty, HuberShape) {
  const double w = 4.0;
  EXPECT_DOUBLE_EQ(robust_penalty(2.0, 1.0, w), 4.0);
  EXPECT_DOUBLE_EQ(robust_penalty(2.0, 0.5, w), 2.0);
  EXPECT_DOUBLE_EQ(robust_penalty(10.0, 1.0, w), 2 * 4 * 10 - 16);
  EXPECT_DOUBLE_EQ(robust_penalty(0.0, 1.0, w), 0.0);
  EXPECT_DOUBLE_EQ(robust_penalty(7.0, 0.0, w), 0.0);
  // continuous with continuous slope at the kink
  const double h = 1e-7;
  EXPECT_NEAR(robust_penalty(w - h, 1, w), robust_penalty(w + h, 1, w), 1e-5);
  const double left = (robust_penalty(w, 1, w) - robust_penalty(w - h, 1, w)) / h;
  const double right = (robust_penalty(w + h, 1, w) - robust_penalty(w, 1, w)) / h;
  EXPECT_NEAR(left, right, 1e-5);
  // never exceeds the quadratic
  for (double r = 0; r < 50; r += 0.7) EXPECT_LE(robust_penalty(r, 1, w), r * r + 1e-12);
}

TEST(FrameStatus, StringRoundTrip) {
  for (auto s : {FrameStatus::Registered, FrameStatus::ExcludedLowConfidence,
                 FrameStatus::ExcludedUnconverged, FrameStatus::ExcludedTransient}) {
    EXPECT_EQ(frame_status_from_string(to_string(s)), s);
  }
  EXPECT_EQ(kind_of([] { frame_status_from_string("lost"); }), ErrorKind::ParseError);
}

TEST(SolverConfig, Validate) {
  SolverConfig c;
  EXPECT_NO_THROW(c.validate());
  c.max_iterations = -1;
  EXPECT_EQ(kind_of([&] { c.validate(); }), ErrorKind::ConfigError);
  c = {};
  c.huber_width = 0;
  EXPECT_EQ(kind_of([&] { c.validate(); }), ErrorKind::ConfigError);
  c = {};
  c.confidence_threshold = 1.5;
  EXPECT_EQ(kind_of([&] { c.validate(); }), ErrorKind::ConfigError);
}

TEST(Observations, ValidateAndSlice) {
  ObservationSet obs = noiseless_scene().observations;
  EXPECT_NO_THROW(obs.validate());
  const auto s = obs.slice(3, 7);
  EXPECT_EQ(s.size(), 5u);
  EXPECT_EQ(s.frames[0][4].pixel, obs.frames[3][4].pixel);
  EXPECT_EQ(kind_of([&] { obs.slice(7, 3); }), ErrorKind::PreconditionViolation);
  EXPECT_EQ(kind_of([&] { obs.slice(0, obs.size()); }), ErrorKind::PreconditionViolation);

  ObservationSet one = obs.slice(0, 0);
  EXPECT_EQ(kind_of([&] { one.validate(); }), ErrorKind::PreconditionViolation);

  ObservationSet bad = obs;
  bad.frames[2][3].confidence = 1.2;
  EXPECT_EQ(kind_of([&] { bad.validate(); }), ErrorKind::PreconditionViolation);
  bad = obs;
  bad.frames[2][3].pixel = PixelPoint(5000, 10);
  EXPECT_EQ(kind_of([&] { bad.validate(); }), ErrorKind::PreconditionViolation);
  bad = obs;
  bad.timestamps = {0.0, 1.0};
  EXPECT_EQ(kind_of([&] { bad.validate(); }), ErrorKind::PreconditionViolation);
  // an off-image missing detection is fine
  bad = obs;
  bad.frames[2][3] = Detection{PixelPoint(-1e6, 0), 0.0};
  EXPECT_NO_THROW(bad.validate());
}

TEST(KeypointFiles, RoundTripAndOrdering) {
  const auto dir = testutil::temp_dir("keypoints");
  const auto& obs = noisy_scene().observations;
  // write in reverse order with names that sort lexicographically
  for (std::size_t i = obs.size(); i-- > 0;) {
    char name[32];
    std::snprintf(name, sizeof name, "f%03zu.json", i);
    save_keypoint_file((dir / name).string(), obs.frames[i]);
  }
  std::ofstream(dir / "notes.txt") << "ignored";
  const auto loaded = load_observations(dir.string(), obs.intrinsics);
  ASSERT_EQ(loaded.size(), obs.size());
  for (std::size_t i = 0; i < obs.size(); ++i) {
    for (int k = 0; k < hand::kNumLandmarks; ++k) {
      EXPECT_EQ(loaded.frames[i][k].pixel, obs.frames[i][k].pixel);
      EXPECT_EQ(loaded.frames[i][k].confidence, obs.frames[i][k].confidence);
    }
  }
}

TEST(KeypointFiles, Errors) {
  const auto dir = testutil::temp_dir("keypoints_bad");
  EXPECT_EQ(kind_of([&] { load_keypoint_file((dir / "none.json").string()); }), ErrorKind::ConfigError);
  const auto p = (dir / "a.json").string();
  std::ofstream(p) << "[[1, 2, 0.5]]";
  EXPECT_EQ(kind_of([&] { load_keypoint_file(p); }), ErrorKind::ParseError);
  std::ofstream(p) << "{not json";
  EXPECT_EQ(kind_of([&] { load_keypoint_file(p); }), ErrorKind::ParseError);
  std::string doc = "[";
  for (int i = 0; i < 21; ++i) doc += std::string(i ? "," : "") + (i == 5 ? "[1, 2]" : "[1, 2, 1]");
  std::ofstream(p) << doc + "]";
  EXPECT_EQ(kind_of([&] { load_keypoint_file(p); }), ErrorKind::ParseError);
  EXPECT_EQ(kind_of([&] { load_observations((dir / "missing").string(), CameraIntrinsics{600, 600, 320, 240, 640, 480}); }),
            ErrorKind::ConfigError);
}

TEST(Triangulate, ExactFromNoiselessViews) {
  const auto& sc = noiseless_scene();
  const auto truth = sc.true_joints();
  for (int k = 0; k < hand::kNumLandmarks; ++k) {
    std::vector<RigidTransform> poses;
    std::vector<PixelPoint> pixels;
    for (std::size_t i = 0; i < sc.cameras.size(); i += 7) {
      poses.push_back(sc.cameras[i]);
      pixels.push_back(sc.observations.frames[i][k].pixel);
    }
    const auto X = triangulate(poses, pixels, sc.observations.intrinsics);
    ASSERT_TRUE(X.has_value());
    EXPECT_LT((*X - truth[k]).norm(), 1e-9);
  }
}

TEST(Triangulate, RejectsDegenerateInput) {
  const CameraIntrinsics K{600, 600, 320, 240, 640, 480};
  EXPECT_FALSE(triangulate({RigidTransform()}, {PixelPoint(320, 240)}, K).has_value());
  // rays that meet behind both cameras
  const RigidTransform b = RigidTransform::translation(Vec3(0.1, 0, 0));
  const Vec3 X(0.05, 0, -1.0);
  const PixelPoint pa(K.fx * X.x() / X.z() + K.cx, K.cy);
  const Vec3 Xb = X - Vec3(0.1, 0, 0);
  const PixelPoint pb(K.fx * Xb.x() / Xb.z() + K.cx, K.cy);
  EXPECT_FALSE(triangulate({RigidTransform(), b}, {pa, pb}, K).has_value());
}

TEST(TwoView, RecoversRelativePoseOnNoiselessPair) {
  const auto& sc = noiseless_scene();
  const std::size_t b = sc.cameras.size() - 1;
  const auto tv = init_two_view(sc.observations, 0, b);
  const RigidTransform rel = sc.cameras[0].inverse() * sc.cameras[b];
  EXPECT_LT(geom::rotation_distance(tv.relative.rotation(), rel.rotation()), 1e-8);
  EXPECT_NEAR(tv.relative.translation().norm(), 1.0, 1e-12);
  EXPECT_GT(tv.relative.translation().dot(rel.translation().normalized()), 1 - 1e-10);
  EXPECT_EQ(tv.num_in_front, hand::kNumLandmarks);
  // triangulated structure matches truth up to scale, in camera a's frame
  hand::JointSet3D truth_a;
  const auto truth = sc.true_joints();
  for (int k = 0; k < hand::kNumLandmarks; ++k) truth_a[k] = sc.cameras[0].inverse() * truth[k];
  const double s = rel.translation().norm();
  for (int k = 0; k < hand::kNumLandmarks; ++k) {
    ASSERT_TRUE(tv.triangulated[k]);
    EXPECT_LT((tv.joints[k] * s - truth_a[k]).norm(), 1e-8);
  }
}

TEST(TwoView, Errors) {
  const auto& obs = noiseless_scene().observations;
  EXPECT_EQ(kind_of([&] { init_two_view(obs, 0, obs.size()); }), ErrorKind::PreconditionViolation);
  // identical frames have no parallax
  EXPECT_EQ(kind_of([&] { init_two_view(obs, 3, 3); }), ErrorKind::DegenerateMotion);
  ObservationSet few = obs;
  for (int k = 7; k < hand::kNumLandmarks; ++k) few.frames[5][k].confidence = 0.0;
  EXPECT_EQ(kind_of([&] { init_two_view(few, 0, 5); }), ErrorKind::InsufficientCorrespondences);
  // below the confidence threshold counts as missing
  for (int k = 7; k < hand::kNumLandmarks; ++k) few.frames[5][k].confidence = 0.1;
  EXPECT_EQ(kind_of([&] { init_two_view(few, 0, 5, 0.2); }), ErrorKind::InsufficientCorrespondences);
}

TEST(RegisterFrame, RecoversPoseFromPerturbedStart) {
  const auto& sc = noiseless_scene();
  const auto truth = sc.true_joints();
  std::array<bool, hand::kNumLandmarks> known;
  known.fill(true);
  std::mt19937_64 rng(3);
  for (std::size_t i = 1; i < sc.cameras.size(); i += 4) {
    Vec6 d;
    d << testutil::random_vec(rng, 0.02), testutil::random_vec(rng, 0.05);
    const auto reg = register_frame(truth, known, sc.observations.frames[i], sc.observations.intrinsics,
                                    sc.cameras[i].perturbed(d), SolverConfig{});
    EXPECT_TRUE(reg.converged);
    EXPECT_LT((reg.pose.matrix() - sc.cameras[i].matrix()).norm(), 1e-8);
    EXPECT_LT(reg.objective, 1e-12);
  }
}

TEST(RegisterFrame, NeedsFourLandmarks) {
  const auto& sc = noiseless_scene();
  std::array<bool, hand::kNumLandmarks> known{};
  known[0] = known[1] = known[5] = true;
  EXPECT_EQ(kind_of([&] {
              register_frame(sc.true_joints(), known, sc.observations.frames[1],
                             sc.observations.intrinsics, sc.cameras[1], SolverConfig{});
            }),
            ErrorKind::InsufficientCorrespondences);
}

TEST(BundleAdjust, ConvergesFromPerturbedNoiselessStart) {
  const auto& sc = noiseless_scene();
  SfMSolution init;
  std::mt19937_64 rng(4);
  const auto truth = sc.true_joints();
  for (int k = 0; k < hand::kNumLandmarks; ++k) {
    init.joints[k] = truth[k] + testutil::random_vec(rng, 0.002);
    init.observed[k] = true;
  }
  for (std::size_t i = 0; i < sc.cameras.size(); ++i) {
    Vec6 d;
    d << testutil::random_vec(rng, 0.003), testutil::random_vec(rng, 0.005);
    init.camera_poses.push_back(i == 0 ? sc.cameras[0] : sc.cameras[i].perturbed(d));
    init.frame_status.push_back(FrameStatus::Registered);
  }
  const auto sol = bundle_adjust(sc.observations, init, SolverConfig{});
  EXPECT_TRUE(sol.converged);
  EXPECT_LT(sol.final_cost, 1e-10);
  EXPECT_EQ(sol.camera_poses[0]->matrix(), Mat4::Identity());
  ASSERT_FALSE(sol.cost_history.empty());
  for (std::size_t i = 1; i < sol.cost_history.size(); ++i) {
    EXPECT_LE(sol.cost_history[i], sol.cost_history[i - 1]);
  }
}

TEST(BundleAdjust, Preconditions) {
  const auto& sc = noiseless_scene();
  SfMSolution init;
  init.joints = sc.true_joints();
  init.observed.fill(true);
  init.camera_poses.assign(sc.cameras.size(), std::nullopt);
  init.camera_poses[0] = RigidTransform::translation(Vec3(0.1, 0, 0));
  init.camera_poses[1] = sc.cameras[1];
  EXPECT_EQ(kind_of([&] { bundle_adjust(sc.observations, init, SolverConfig{}); }),
            ErrorKind::PreconditionViolation);
  init.camera_poses[0] = RigidTransform();
  init.camera_poses[1].reset();
  EXPECT_EQ(kind_of([&] { bundle_adjust(sc.observations, init, SolverConfig{}); }),
            ErrorKind::PreconditionViolation);
  init.camera_poses.resize(3);
  EXPECT_EQ(kind_of([&] { bundle_adjust(sc.observations, init, SolverConfig{}); }),
            ErrorKind::PreconditionViolation);
}

TEST(Reconstruct, NoiselessIsExactUpToSimilarity) {
  const auto& sc = noiseless_scene();
  const auto sol = reconstruct(sc.observations, SolverConfig{});
  EXPECT_TRUE(sol.converged);
  EXPECT_LT(sol.final_cost, 1e-10);
  for (auto s : sol.frame_status) EXPECT_EQ(s, FrameStatus::Registered);
  for (bool o : sol.observed) EXPECT_TRUE(o);
  EXPECT_LT(aligned_rms(sol.joints, sc.true_joints()), 1e-8);
  EXPECT_EQ(sol.camera_poses[0]->matrix(), Mat4::Identity());
}

TEST(Reconstruct, NoisyResidualMatchesNoiseLevel) {
  const auto sol = reconstruct(noisy_scene().observations, SolverConfig{});
  EXPECT_TRUE(sol.converged);
  EXPECT_GT(sol.rms_residual(), 0.5);
  EXPECT_LT(sol.rms_residual(), 1.5);
  EXPECT_LE(sol.objective, sol.final_cost + 1e-9);
}

TEST(Reconstruct, BlankFramesAreExcluded) {
  ObservationSet obs = noiseless_scene().observations;
  for (auto& d : obs.frames[9]) d = Detection{PixelPoint::Zero(), 0.0};
  for (int k = 0; k < 18; ++k) obs.frames[14][k].confidence = 0.05;
  const auto sol = reconstruct(obs, SolverConfig{});
  EXPECT_EQ(sol.frame_status[9], FrameStatus::ExcludedLowConfidence);
  EXPECT_EQ(sol.frame_status[14], FrameStatus::ExcludedLowConfidence);
  EXPECT_FALSE(sol.camera_poses[9].has_value());
  EXPECT_LT(sol.final_cost, 1e-10);
  std::size_t registered = 0;
  for (auto s : sol.frame_status) registered += s == FrameStatus::Registered;
  EXPECT_EQ(registered, obs.size() - 2);
}

TEST(Reconstruct, StaticCameraIsDegenerate) {
  ObservationSet obs = noiseless_scene().observations;
  for (auto& f : obs.frames) f = obs.frames[0];
  EXPECT_EQ(kind_of([&] { reconstruct(obs, SolverConfig{}); }), ErrorKind::DegenerateMotion);
}

TEST(Rescale, PreservesReprojection) {
  const auto& sc = noiseless_scene();
  const auto sol = reconstruct(sc.observations, SolverConfig{});
  const auto big = rescale_to_metric(sol, 3.7);
  for (std::size_t i = 0; i < sol.camera_poses.size(); i += 5) {
    for (int k = 0; k < hand::kNumLandmarks; ++k) {
      const auto a = geom::project(sol.joints[k], *sol.camera_poses[i], sc.observations.intrinsics);
      const auto b = geom::project(big.joints[k], *big.camera_poses[i], sc.observations.intrinsics);
      EXPECT_LT((a - b).norm(), 1e-9);
    }
  }
  EXPECT_EQ(kind_of([&] { rescale_to_metric(sol, 0.0); }), ErrorKind::PreconditionViolation);
  EXPECT_EQ(kind_of([&] { rescale_to_metric(sol, -1.0); }), ErrorKind::PreconditionViolation);
}

TEST(ScoreSolution, CountsOnlyConfidentRegisteredObservations) {
  const auto& sc = noiseless_scene();
  SfMSolution sol;
  sol.joints = sc.true_joints();
  sol.observed.fill(true);
  for (const auto& c : sc.cameras) sol.camera_poses.push_back(c);
  sol.camera_poses[2].reset();
  ObservationSet obs = sc.observations;
  obs.frames[3][4].confidence = 0.1;
  obs.frames[3][5].pixel += PixelPoint(3, 4);  // 5 px error
  obs.frames[3][6].pixel += PixelPoint(0, 10);
  obs.frames[3][6].confidence = 0.5;
  score_solution(obs, SolverConfig{}, sol);
  EXPECT_EQ(sol.num_inliers(), (obs.size() - 1) * 21 - 1);
  EXPECT_FALSE(sol.inliers[3][4]);
  EXPECT_NEAR(sol.residuals[3][5], 5.0, 1e-9);
  EXPECT_NEAR(sol.final_cost, 125.0, 1e-8);
  const double c5 = obs.frames[3][5].confidence;
  EXPECT_NEAR(sol.objective, robust_penalty(5, c5, 4) + robust_penalty(10, 0.5, 4), 1e-8);
}
