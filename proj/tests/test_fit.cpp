#include <gtest/gtest.h>

#include "graspcap/fit.hpp"
#include "graspcap/synth.hpp"
#include "test_util.hpp"

using namespace graspcap;
using namespace graspcap::fit;

namespace {

const hand::HandSkeleton& skel() { return hand::HandSkeleton::default_template(); }

hand::HandParams random_params(std::mt19937_64& rng) {
  hand::HandParams hp;
  hp.palm_pose = testutil::random_transform(rng, 0.3);
  hp.palm_scale = std::uniform_real_distribution<double>(0.85, 1.15)(rng);
  hp.angles = testutil::random_angles(skel(), rng);
  return hp;
}

std::vector<std::optional<RigidTransform>> as_optional(const std::vector<RigidTransform>& v) {
  return {v.begin(), v.end()};
}

}  // namespace

TEST(PalmFit, RecoversPoseAndScaleExactly) {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    const auto hp = random_params(rng);
    const auto fit = fit_palm_pose(hand::forward_kinematics(skel(), hp), skel());
    EXPECT_LT((fit.palm_pose.matrix() - hp.palm_pose.matrix()).norm(), 1e-10);
    EXPECT_NEAR(fit.palm_scale, hp.palm_scale, 1e-12);
    EXPECT_LT(fit.residual_rms, 1e-12);
  }
}

TEST(PalmFit, IgnoresFingerLandmarks) {
  std::mt19937_64 rng(32);
  const auto hp = random_params(rng);
  auto X = hand::forward_kinematics(skel(), hp);
  for (int k : hand::kFingerLandmarks) X[k] = Vec3(1e3, -1e3, 7);
  std::array<bool, hand::kNumLandmarks> observed{};
  for (int k : hand::kRigidLandmarks) observed[k] = true;
  const auto fit = fit_palm_pose(X, skel(), &observed);
  EXPECT_LT((fit.palm_pose.matrix() - hp.palm_pose.matrix()).norm(), 1e-10);
}

TEST(PalmFit, MissingRigidLandmark) {
  std::array<bool, hand::kNumLandmarks> observed;
  observed.fill(true);
  observed[13] = false;
  try {
    fit_palm_pose(skel().rest_pose(), skel(), &observed);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DegenerateConfiguration);
  }
}

TEST(Ik, ConfigValidate) {
  IkConfig c;
  EXPECT_NO_THROW(c.validate());
  c.damping = 0;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.max_iterations = -1;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.tolerance = -1;
  EXPECT_THROW(c.validate(), Error);
}

TEST(Ik, RoundTripFromRestPose) {
  std::mt19937_64 rng(33);
  IkConfig cfg;
  cfg.tolerance = 1e-7;
  int worst_iterations = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto hp = random_params(rng);
    const auto X = hand::forward_kinematics(skel(), hp);
    const auto r = solve_ik(skel(), hp.palm_pose, hp.palm_scale, X, cfg);
    EXPECT_TRUE(r.converged) << trial << " rms " << r.rms_error;
    EXPECT_LT(r.rms_error, 1e-6);
    EXPECT_TRUE(skel().within_limits(r.angles));
    worst_iterations = std::max(worst_iterations, r.iterations);
  }
  EXPECT_LE(worst_iterations, 200);
}

TEST(Ik, AlreadySolvedTakesNoSteps) {
  std::mt19937_64 rng(34);
  const auto hp = random_params(rng);
  const auto X = hand::forward_kinematics(skel(), hp);
  const auto r = solve_ik(skel(), hp.palm_pose, hp.palm_scale, X, IkConfig{}, nullptr, hp.angles);
  EXPECT_EQ(r.iterations, 0);
  EXPECT_TRUE(r.converged);
  EXPECT_EQ(r.angles, hp.angles);
}

TEST(Ik, IterationCapZero) {
  hand::HandParams hp;
  auto X = hand::forward_kinematics(skel(), hp);
  for (int f = 0; f < 5; ++f) X[hand::finger_base(f) + 3] = Vec3(0, -0.3, 0.4);
  IkConfig cfg;
  cfg.max_iterations = 0;
  const hand::JointAngles init = hand::JointAngles::Constant(5.0);
  const auto r = solve_ik(skel(), hp.palm_pose, 1.0, X, cfg, nullptr, init);
  EXPECT_EQ(r.iterations, 0);
  EXPECT_FALSE(r.converged);
  EXPECT_TRUE(skel().within_limits(r.angles));
  ASSERT_EQ(r.rms_history.size(), 1u);
  EXPECT_EQ(r.rms_history[0], r.rms_error);
}

TEST(Ik, GeometricStartIsExactOnCleanTargets) {
  // with zero steps allowed the closed-form start alone must already fit
  std::mt19937_64 rng(42);
  IkConfig cfg;
  cfg.max_iterations = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto hp = random_params(rng);
    const auto r = solve_ik(skel(), hp.palm_pose, hp.palm_scale, hand::forward_kinematics(skel(), hp), cfg);
    EXPECT_LT(r.rms_error, 1e-9) << trial;
  }
}

TEST(Ik, RestPoseStartWithoutGeometricGuess) {
  std::mt19937_64 rng(43);
  IkConfig cfg;
  cfg.tolerance = 1e-7;
  cfg.geometric_start = false;
  int converged = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto hp = random_params(rng);
    const auto r = solve_ik(skel(), hp.palm_pose, hp.palm_scale, hand::forward_kinematics(skel(), hp), cfg);
    EXPECT_TRUE(skel().within_limits(r.angles));
    EXPECT_GT(r.iterations, 0);
    for (std::size_t i = 1; i < r.rms_history.size(); ++i) EXPECT_LT(r.rms_history[i], r.rms_history[i - 1]);
    converged += r.converged;
  }
  // plain descent from the rest pose can stall in a limit-bound minimum now and then
  EXPECT_GE(converged, 40);
}

TEST(Ik, UnreachableTargetsStayInLimitsAndDescend) {
  hand::HandParams hp;
  auto X = hand::forward_kinematics(skel(), hp);
  // pull every fingertip to a point far behind the back of the hand
  for (int f = 0; f < 5; ++f) X[hand::finger_base(f) + 3] = Vec3(0, -0.3, 0.4);
  const auto r = solve_ik(skel(), hp.palm_pose, 1.0, X, IkConfig{});
  EXPECT_FALSE(r.converged);
  EXPECT_TRUE(skel().within_limits(r.angles));
  for (std::size_t i = 1; i < r.rms_history.size(); ++i) {
    EXPECT_LT(r.rms_history[i], r.rms_history[i - 1]);
  }
  EXPECT_EQ(r.rms_history.back(), r.rms_error);
}

TEST(Ik, MaskDropsUnobservedTargets) {
  std::mt19937_64 rng(36);
  const auto hp = random_params(rng);
  auto X = hand::forward_kinematics(skel(), hp);
  std::array<bool, hand::kNumLandmarks> observed;
  observed.fill(true);
  // index tip garbage, but the index DIP still constrains the first two joints
  X[8] = Vec3(5, 5, 5);
  observed[8] = false;
  const auto r = solve_ik(skel(), hp.palm_pose, hp.palm_scale, X, IkConfig{}, &observed);
  EXPECT_TRUE(r.converged);
  const auto Y = hand::forward_kinematics(skel(), {hp.palm_pose, hp.palm_scale, r.angles});
  for (int k : hand::kFingerLandmarks) {
    if (k != 8) EXPECT_LT((Y[k] - X[k]).norm(), 1e-7) << k;
  }
}

TEST(JointObjective, ZeroAtNoiselessTruth) {
  const auto sc = synth::generate_scene(37);
  double plain = -1;
  const double obj = joint_objective(sc.observations, skel(), sc.hand, as_optional(sc.cameras),
                                     sfm::SolverConfig{}, &plain);
  EXPECT_LT(obj, 1e-18);
  EXPECT_LT(plain, 1e-18);
}

TEST(JointSolve, TruthIsAFixedPoint) {
  const auto sc = synth::generate_scene(38);
  const auto r = joint_hand_sfm(sc.observations, skel(), sc.hand, as_optional(sc.cameras), sfm::SolverConfig{});
  EXPECT_TRUE(r.converged);
  EXPECT_LT(r.objective, 1e-16);
  EXPECT_LT((r.params.palm_pose.matrix() - sc.hand.palm_pose.matrix()).norm(), 1e-9);
  EXPECT_LT((r.params.angles - sc.hand.angles).norm(), 1e-9);
}

TEST(JointSolve, RecoversFromPerturbedNoiselessStart) {
  const auto sc = synth::generate_scene(39);
  std::mt19937_64 rng(39);
  hand::HandParams init = sc.hand;
  Eigen::Matrix<double, hand::kNumParams, 1> d;
  for (int i = 0; i < hand::kNumParams; ++i) d[i] = std::normal_distribution<double>(0, 0.01)(rng);
  init = init.perturbed(d);
  init.angles = skel().clamp(init.angles);
  auto cams = as_optional(sc.cameras);
  for (std::size_t i = 1; i < cams.size(); ++i) {
    Vec6 e;
    e << testutil::random_vec(rng, 0.002), testutil::random_vec(rng, 0.003);
    cams[i] = cams[i]->perturbed(e);
  }
  const auto r = joint_hand_sfm(sc.observations, skel(), init, cams, sfm::SolverConfig{});
  EXPECT_TRUE(r.converged);
  EXPECT_LT(r.final_cost, 1e-10);
  EXPECT_EQ(r.params.palm_scale, init.palm_scale);
  EXPECT_EQ(r.camera_poses[0]->matrix(), cams[0]->matrix());
  const auto X = hand::forward_kinematics(skel(), r.params);
  const auto T = sc.true_joints();
  for (int k = 0; k < hand::kNumLandmarks; ++k) EXPECT_LT((X[k] - T[k]).norm(), 1e-7);
  for (std::size_t i = 1; i < r.cost_history.size(); ++i) {
    EXPECT_LE(r.cost_history[i], r.cost_history[i - 1]);
  }
}

TEST(JointSolve, NeverWorseThanItsStart) {
  synth::SceneConfig cfg;
  cfg.noise_sigma = 1.0;
  const auto sc = synth::generate_scene(40, cfg);
  const auto cams = as_optional(sc.cameras);
  const auto r = joint_hand_sfm(sc.observations, skel(), sc.hand, cams, sfm::SolverConfig{});
  EXPECT_LE(r.objective, r.initial_objective);
  EXPECT_NEAR(r.initial_objective, joint_objective(sc.observations, skel(), sc.hand, cams, sfm::SolverConfig{}), 1e-9);
  EXPECT_TRUE(skel().within_limits(r.params.angles));
}

TEST(JointSolve, Preconditions) {
  const auto sc = synth::generate_scene(41);
  auto cams = as_optional(sc.cameras);
  cams[0].reset();
  EXPECT_THROW(joint_hand_sfm(sc.observations, skel(), sc.hand, cams, sfm::SolverConfig{}), Error);
  cams = as_optional(sc.cameras);
  cams.pop_back();
  EXPECT_THROW(joint_hand_sfm(sc.observations, skel(), sc.hand, cams, sfm::SolverConfig{}), Error);
  hand::HandParams bad = sc.hand;
  bad.angles[5] = 10;
  EXPECT_THROW(joint_hand_sfm(sc.observations, skel(), bad, as_optional(sc.cameras), sfm::SolverConfig{}), Error);
}
