#include "oracles.hpp"

#include "robust_pose/corrector.hpp"
#include "robust_pose/random.hpp"
#include "robust_pose/synth.hpp"

#include <doctest.h>

using namespace robust_pose;

namespace {

const CadModel& box() {
  static const CadModel m = builtin_model(BuiltinKind::Box, Eigen::Vector3d(0.2, 0.1, 0.08));
  return m;
}

Pose scene_pose(std::uint64_t seed) {
  auto rng = make_rng(seed);
  return {random_rotation(rng), Eigen::Vector3d(0.05, -0.02, 1.5)};
}

PointCloud visible_cloud(const Pose& t) {
  return occlude(PointCloud(apply_pose(t, box().dense_points())), CameraIntrinsics{}, occlusion_params_for(box()),
                 t.rotation * box().normals());
}

Eigen::Matrix3Xd far_points(const Pose& t, int k, double distance) {
  Eigen::Matrix3Xd out(3, k);
  for (int i = 0; i < k; ++i) out.col(i) = t.translation + Eigen::Vector3d(distance + 0.1 * i, 0.3, -0.2);
  return out;
}

}  // namespace

TEST_CASE("corrector objective on perfect alignment") {
  const Pose t = scene_pose(1);
  const PointCloud x(apply_pose(t, box().dense_points()));
  const KeypointSet y = hallucinate_keypoints(t, box());
  const CorrectorConfig cfg = CorrectorConfig::defaults_for(box());
  const Eigen::Matrix3Xd zero = Eigen::Matrix3Xd::Zero(3, y.size());
  CHECK(corrector_objective(zero, y, box(), x, cfg) < 1e-28);

  const int k = 5;
  Eigen::Matrix3Xd with_outliers(3, x.size() + k);
  with_outliers << x.points, far_points(t, k, 1.0);
  const double expected = k * cfg.c_bar * cfg.c_bar / static_cast<double>(x.size() + k);
  CHECK(corrector_objective(zero, y, box(), PointCloud(with_outliers), cfg) == doctest::Approx(expected).epsilon(1e-12));

  CorrectorConfig plain = cfg;
  plain.loss_variant = LossVariant::NonRobust;
  Eigen::Matrix3Xd one(3, x.size() + 1);
  Eigen::Vector3d corner = t * box().dense_points().col(0);
  const Eigen::Vector3d outward = (corner - t.translation).normalized();
  const double d = 0.5;
  one << x.points, corner + d * outward;
  const double direct = oracle::nearest(one.col(x.size()), x.points);
  CHECK(direct > cfg.c_bar);
  CHECK(corrector_objective(zero, y, box(), PointCloud(one), plain) ==
        doctest::Approx(direct * direct / static_cast<double>(x.size() + 1)).epsilon(1e-9));
}

TEST_CASE("corrector objective matches brute force") {
  std::mt19937_64 rng(2);
  const CorrectorConfig cfg = CorrectorConfig::defaults_for(box());
  for (int trial = 0; trial < 10; ++trial) {
    const Pose t = scene_pose(100 + trial);
    const PointCloud x(apply_pose(t, box().dense_points()) + 0.01 * oracle::random_points(rng, box().num_dense()));
    const KeypointSet y = perturb_keypoints(hallucinate_keypoints(t, box()), 0.2, 0.8, box().diameter(), trial);
    const Eigen::Matrix3Xd dy = 0.005 * oracle::random_points(rng, y.size());
    const Pose reg = register_keypoints(y.points + dy, box().keypoints().points);
    CHECK(corrector_objective(dy, y, box(), x, cfg) ==
          doctest::Approx(oracle::loss_self(x.points, reg, box().dense_points(), cfg.c_bar)).epsilon(1e-12));
  }
}

TEST_CASE("corrector gradient matches finite differences") {
  std::mt19937_64 rng(3);
  CorrectorConfig cfg = CorrectorConfig::defaults_for(box());
  const Pose t = scene_pose(3);
  const PointCloud x = visible_cloud(t);
  const KeypointSet y = perturb_keypoints(hallucinate_keypoints(t, box()), 0.1, 0.8, box().diameter(), 3);
  const Eigen::Matrix3Xd dy = Eigen::Matrix3Xd::Zero(3, y.size());
  const Eigen::Matrix3Xd g = corrector_gradient(dy, y, box(), x, cfg);
  // Frozen correspondences: compare against the same objective with fixed nearest neighbours.
  const Pose p0 = register_keypoints(y.points, box().keypoints().points);
  std::vector<Eigen::Index> nn(static_cast<std::size_t>(x.size()));
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    nn[static_cast<std::size_t>(i)] = box().index().nearest(p0.rotation.transpose() * (x.points.col(i) - p0.translation)).index;
  }
  auto frozen = [&](const Eigen::Matrix3Xd& d) {
    const Pose p = register_keypoints(y.points + d, box().keypoints().points);
    double s = 0.0;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const double r2 = (x.points.col(i) - p * Eigen::Vector3d(box().dense_points().col(nn[static_cast<std::size_t>(i)]))).squaredNorm();
      s += std::min(r2, cfg.c_bar * cfg.c_bar);
    }
    return s / static_cast<double>(x.size());
  };
  const double h = 1e-7;
  for (Eigen::Index k = 0; k < y.size(); ++k) {
    for (int c = 0; c < 3; ++c) {
      Eigen::Matrix3Xd dp = dy;
      Eigen::Matrix3Xd dm = dy;
      dp(c, k) += h;
      dm(c, k) -= h;
      const double fd = (frozen(dp) - frozen(dm)) / (2 * h);
      CHECK(fd == doctest::Approx(g(c, k)).epsilon(1e-4).scale(g.cwiseAbs().maxCoeff()));
    }
  }
}

TEST_CASE("solve_correction keeps an optimal start") {
  const Pose t = scene_pose(4);
  const PointCloud x = visible_cloud(t);
  const KeypointSet y = hallucinate_keypoints(t, box());
  const CorrectorConfig cfg = CorrectorConfig::defaults_for(box());
  const CorrectionResult r = solve_correction(y, box(), x, cfg);
  CHECK(r.delta_y.norm() < cfg.grad_tol * box().diameter());
  CHECK(adds_metric(r.corrected_pose, t, box()) < 1e-6 * box().diameter());
}

TEST_CASE("solve_correction result invariants and monotone descent") {
  const CorrectorConfig cfg = CorrectorConfig::defaults_for(box());
  for (std::uint64_t s = 0; s < 10; ++s) {
    const Pose t = scene_pose(10 + s);
    const PointCloud x = inject_noise(visible_cloud(t), 0.002, s);
    const KeypointSet y = perturb_keypoints(hallucinate_keypoints(t, box()), 0.6, 0.8, box().diameter(), s);
    const CorrectionResult r = solve_correction(y, box(), x, cfg);
    CHECK(r.final_objective <= r.initial_objective);
    CHECK((r.corrected_keypoints.points - (y.points + r.delta_y)).cwiseAbs().maxCoeff() < 1e-12);
    const Pose reg = register_keypoints(r.corrected_keypoints, box().keypoints());
    CHECK((reg.rotation - r.corrected_pose.rotation).norm() < 1e-9);
    CHECK((reg.translation - r.corrected_pose.translation).norm() < 1e-9);
    CHECK(r.iterations <= cfg.max_iters);
  }
}

TEST_CASE("robust corrector fixes heavy keypoint noise") {
  const CorrectorConfig cfg = CorrectorConfig::defaults_for(box());
  int good = 0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Pose t = scene_pose(200 + s);
    const PointCloud x = visible_cloud(t);
    const KeypointSet y = perturb_keypoints(hallucinate_keypoints(t, box()), 0.6, 0.8, box().diameter(), s);
    const CorrectionResult r = solve_correction(y, box(), x, cfg);
    good += adds_metric(r.corrected_pose, t, box()) < 0.05 * box().diameter() ? 1 : 0;
  }
  CHECK(good >= 18);
}

TEST_CASE("robust corrector ignores replaced outliers where the plain one does not") {
  CorrectorConfig robust = CorrectorConfig::defaults_for(box());
  CorrectorConfig plain = robust;
  plain.loss_variant = LossVariant::NonRobust;
  double err_robust = 0.0;
  double err_plain = 0.0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    const Pose t = scene_pose(300 + s);
    const PointCloud x = inject_outliers(visible_cloud(t), 0.5, 2.0, s).cloud;
    const KeypointSet y = perturb_keypoints(hallucinate_keypoints(t, box()), 0.6, 0.8, box().diameter(), s);
    err_robust += adds_metric(solve_correction(y, box(), x, robust).corrected_pose, t, box());
    err_plain += adds_metric(solve_correction(y, box(), x, plain).corrected_pose, t, box());
  }
  CHECK(err_robust < 0.5 * err_plain);
}

TEST_CASE("far outliers leave the robust solution unchanged") {
  // The extra points rescale the mean objective, so both runs are driven close to the shared optimum.
  CorrectorConfig cfg = CorrectorConfig::defaults_for(box());
  cfg.grad_tol = 1e-7 * box().diameter();
  cfg.max_iters = 5000;
  for (std::uint64_t s = 0; s < 5; ++s) {
    const Pose t = scene_pose(400 + s);
    const PointCloud x = visible_cloud(t);
    const KeypointSet y = perturb_keypoints(hallucinate_keypoints(t, box()), 0.3, 0.8, box().diameter(), s);
    Eigen::Matrix3Xd aug(3, x.size() + 20);
    aug << x.points, far_points(t, 20, 2.0);
    const CorrectionResult a = solve_correction(y, box(), x, cfg);
    const CorrectionResult b = solve_correction(y, box(), PointCloud(aug), cfg);
    REQUIRE(a.converged);
    REQUIRE(b.converged);
    CHECK((a.delta_y - b.delta_y).norm() < 1e-3 * box().diameter());
  }
}

TEST_CASE("non-robust equals robust when every residual is small") {
  CorrectorConfig robust = CorrectorConfig::defaults_for(box());
  CorrectorConfig plain = robust;
  plain.loss_variant = LossVariant::NonRobust;
  const Pose t = scene_pose(5);
  const PointCloud x(apply_pose(t, box().dense_points()));
  const KeypointSet y = perturb_keypoints(hallucinate_keypoints(t, box()), 0.02, 0.8, box().diameter(), 5);
  const CorrectionResult a = solve_correction(y, box(), x, robust);
  const CorrectionResult b = solve_correction(y, box(), x, plain);
  CHECK(a.delta_y == b.delta_y);
  CHECK(a.iterations == b.iterations);
}

TEST_CASE("correction jacobian contract and numeric check") {
  CorrectorConfig cfg = CorrectorConfig::defaults_for(box());
  cfg.grad_tol = 1e-9 * box().diameter();
  cfg.max_iters = 5000;
  const Pose t = scene_pose(6);
  const PointCloud x = visible_cloud(t);
  const KeypointSet y = perturb_keypoints(hallucinate_keypoints(t, box()), 0.2, 0.8, box().diameter(), 6);
  const CorrectionResult r = solve_correction(y, box(), x, cfg);
  REQUIRE(r.converged);
  const Eigen::MatrixXd j = correction_jacobian(r);
  CHECK(j == -Eigen::MatrixXd::Identity(3 * y.size(), 3 * y.size()));

  std::mt19937_64 rng(6);
  for (int dir = 0; dir < 20; ++dir) {
    Eigen::Matrix3Xd delta = oracle::random_points(rng, y.size());
    delta *= 1e-3 * box().diameter() / delta.norm();
    const CorrectionResult p = solve_correction(KeypointSet{y.points + delta}, box(), x, cfg);
    CHECK((p.delta_y - r.delta_y + delta).norm() <= 1e-2 * delta.norm());
    CHECK((p.corrected_keypoints.points - r.corrected_keypoints.points).norm() <= 1e-2 * delta.norm());
  }
}

TEST_CASE("hallucinate_keypoints") {
  const KeypointSet k = hallucinate_keypoints(Pose::identity(), box());
  CHECK(k.points == box().keypoints().points);
  const Eigen::Vector3d t0(1, 2, 3);
  CHECK((hallucinate_keypoints(Pose::from_translation(t0), box()).points - (box().keypoints().points.colwise() + t0))
            .cwiseAbs()
            .maxCoeff() < 1e-15);
  std::mt19937_64 rng(7);
  const Pose t = oracle::random_pose(rng);
  const Pose back = register_keypoints(hallucinate_keypoints(t, box()), box().keypoints());
  CHECK((back.rotation - t.rotation).norm() < 1e-9);
  CHECK((back.translation - t.translation).norm() < 1e-9);
}

TEST_CASE("batch solves are independent") {
  const CorrectorConfig cfg = CorrectorConfig::defaults_for(box());
  std::vector<CorrectionInstance> batch;
  for (std::uint64_t s = 0; s < 3; ++s) {
    const Pose t = scene_pose(500 + s);
    batch.push_back({perturb_keypoints(hallucinate_keypoints(t, box()), 0.4, 0.8, box().diameter(), s), visible_cloud(t)});
  }
  const auto all = solve_corrections(batch, box(), cfg);
  REQUIRE(all.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(all[i].delta_y == solve_correction(batch[i].y_tilde, box(), batch[i].cloud, cfg).delta_y);
  }
}

TEST_CASE("corrector input validation") {
  CorrectorConfig cfg = CorrectorConfig::defaults_for(box());
  const Pose t = scene_pose(7);
  const KeypointSet y = hallucinate_keypoints(t, box());
  CHECK_THROWS_AS((void)solve_correction(y, box(), PointCloud(), cfg), InvalidArgument);
  PointCloud bad(apply_pose(t, box().dense_points()));
  bad.points(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS((void)solve_correction(y, box(), bad, cfg), NonFiniteObjective);
  cfg.step_size = 0.0;
  CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
  KeypointSet short_y{y.points.leftCols(3)};
  CHECK_THROWS_AS((void)solve_correction(short_y, box(), PointCloud(apply_pose(t, box().dense_points())),
                                         CorrectorConfig::defaults_for(box())),
                  DimensionMismatch);
}
