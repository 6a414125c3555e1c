#include "oracles.hpp"

#include "robust_pose/certificates.hpp"
#include "robust_pose/random.hpp"
#include "robust_pose/synth.hpp"

#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

using namespace robust_pose;

namespace {

const CadModel& box() {
  static const CadModel m = builtin_model(BuiltinKind::Box, Eigen::Vector3d(0.2, 0.1, 0.08));
  return m;
}

CameraIntrinsics small_camera() {
  CameraIntrinsics c;
  c.fx = c.fy = 100.0;
  c.cx = c.cy = 50.0;
  c.width = c.height = 101;
  return c;
}

}  // namespace

TEST_CASE("cert_3d on exact and corrupted fits") {
  const CertificateConfig cfg = CertificateConfig::defaults_for(box());
  const Pose t{rotation_about_axis(Eigen::Vector3d(1, 1, 0), 0.4), Eigen::Vector3d(0, 0, 1.2)};
  PointCloud x(apply_pose(t, box().dense_points()));
  const auto [ok, score] = cert_3d(x, t, box(), cfg);
  CHECK(ok);
  CHECK(score < 1e-12);

  // 5% of the points moved 1 m away.
  const Eigen::Index k = x.size() / 20;
  for (Eigen::Index i = 0; i < k; ++i) x.points.col(i * 20) += Eigen::Vector3d(1.0, 0, 0);
  CHECK(cert_3d(x, t, box(), cfg).first);

  const Pose shifted{t.rotation, t.translation + Eigen::Vector3d(0.5 * box().diameter(), 0, 0)};
  CHECK_FALSE(cert_3d(PointCloud(apply_pose(t, box().dense_points())), shifted, box(), cfg).first);
}

TEST_CASE("cert_3d score equals the percentile of brute-force distances") {
  std::mt19937_64 rng(1);
  CertificateConfig cfg = CertificateConfig::defaults_for(box());
  for (int trial = 0; trial < 5; ++trial) {
    const Pose t = oracle::random_pose(rng, 0.5);
    const Eigen::Matrix3Xd x = oracle::posed(t, box().dense_points()).leftCols(300) + 0.02 * oracle::random_points(rng, 300);
    const Pose est = oracle::random_pose(rng, 0.5);
    const Eigen::VectorXd d = oracle::nearest_distances(x, oracle::posed(est, box().dense_points()));
    const double score = cert_3d(PointCloud(x), est, box(), cfg).second;
    CHECK(score == doctest::Approx(percentile(d, cfg.p)).epsilon(1e-12));

    // Permutation invariance and monotonicity in eps_3d.
    const Eigen::Matrix3Xd reversed = x.rowwise().reverse();
    CHECK(cert_3d(PointCloud(reversed), est, box(), cfg).second == score);
    cfg.eps_3d = score * 1.01;
    CHECK(cert_3d(PointCloud(x), est, box(), cfg).first);
    cfg.eps_3d = score * 2.0;
    CHECK(cert_3d(PointCloud(x), est, box(), cfg).first);
    cfg.eps_3d = score;
    CHECK_FALSE(cert_3d(PointCloud(x), est, box(), cfg).first);
  }
}

TEST_CASE("render_points hits the pinhole centre") {
  Eigen::Matrix3Xd p(3, 1);
  p << 0, 0, 1;
  const BinaryMask m0 = render_points(p, 0.0, small_camera(), 0);
  CHECK(m0.area() == 1);
  CHECK(m0.at(50, 50));
  const BinaryMask m1 = render_points(p, 0.0, small_camera(), 1);
  CHECK(m1.area() == 9);
  for (int v = 49; v <= 51; ++v)
    for (int u = 49; u <= 51; ++u) CHECK(m1.at(u, v));

  Eigen::Matrix3Xd behind(3, 1);
  behind << 0, 0, -1;
  CHECK_THROWS_AS((void)render_points(behind, 0.0, small_camera(), 1), EmptyProjection);
  Eigen::Matrix3Xd outside(3, 1);
  outside << 10, 0, 1;
  CHECK_THROWS_AS((void)render_points(outside, 0.0, small_camera(), 1), EmptyProjection);
}

TEST_CASE("render_mask of a single-point model") {
  Eigen::Matrix3Xd pts(3, 3);
  pts << 0, 1, 0, 0, 0, 1, 0, 0, 0;
  const CadModel tri(pts, KeypointSet{pts});
  Eigen::Matrix3Xd one(3, 1);
  one << 0, 0, 0;
  const CadModel single(one, KeypointSet{pts}, 1.0);
  CertificateConfig cfg;
  cfg.dilation_radius = 0;
  const BinaryMask m = render_mask(Pose::from_translation({0, 0, 1}), single, small_camera(), cfg);
  CHECK(m.area() == 1);
  CHECK(m.at(50, 50));
}

TEST_CASE("render_mask of a unit cube matches the projected face area") {
  const CadModel cube = builtin_model(BuiltinKind::Box, Eigen::Vector3d(1, 1, 1));
  REQUIRE(cube.num_dense() == 2048);
  CertificateConfig cfg = CertificateConfig::defaults_for(cube);
  const CameraIntrinsics cam;
  const BinaryMask m = render_mask(Pose::from_translation({0, 0, 2}), cube, cam, cfg);
  const double side = cam.fx / 1.5;
  const double analytic = side * side;
  MESSAGE("area ", m.area(), " analytic ", analytic);
  CHECK(std::abs(static_cast<double>(m.area()) - analytic) < 0.1 * analytic);
}

TEST_CASE("dilation is monotone") {
  const Pose t = Pose::from_translation({0, 0, 1.5});
  CertificateConfig cfg = CertificateConfig::defaults_for(box());
  BinaryMask prev;
  for (int r = 0; r <= 3; ++r) {
    cfg.dilation_radius = r;
    const BinaryMask m = render_mask(t, box(), CameraIntrinsics{}, cfg);
    if (r > 0) {
      for (int v = 0; v < m.height(); ++v)
        for (int u = 0; u < m.width(); ++u)
          if (prev.at(u, v)) CHECK(m.at(u, v));
      CHECK(m.area() > prev.area());
    }
    prev = m;
  }
}

TEST_CASE("cert_2d") {
  CertificateConfig cfg;
  BinaryMask a(20, 20);
  for (int i = 0; i < 100; ++i) a.set(i % 10, i / 10);
  const auto same = cert_2d(a, a, cfg);
  CHECK(same.first);
  CHECK(same.second == 1.0);

  BinaryMask far(20, 20);
  far.set(19, 19);
  const auto disjoint = cert_2d(a, far, cfg);
  CHECK_FALSE(disjoint.first);
  CHECK(disjoint.second == 0.0);

  BinaryMask partial(20, 20);
  for (int i = 0; i < 93; ++i) partial.set(i % 10, i / 10);
  const auto p = cert_2d(a, partial, cfg);
  CHECK(p.first);
  CHECK(p.second == doctest::Approx(0.93));

  BinaryMask superset = a;
  superset.set(15, 15);
  CHECK(cert_2d(a, superset, cfg).second == 1.0);
  CHECK(cert_2d(superset, a, cfg).second < 1.0);

  CHECK_THROWS_AS((void)cert_2d(BinaryMask(20, 20), a, cfg), EmptyDetectedMask);
  CHECK_THROWS_AS((void)cert_2d(a, BinaryMask(10, 10), cfg), DimensionMismatch);
}

TEST_CASE("observable_correctness is the conjunction") {
  SceneConfig sc;
  const CertificateConfig cfg = CertificateConfig::defaults_for(box());
  for (std::uint64_t s = 0; s < 10; ++s) {
    const SceneSample scene = generate_scene(box(), sc, s);
    const CertificateResult r = observable_correctness(scene.x, scene.mask, *scene.pose_gt, box(), sc.camera, cfg);
    CHECK(r.oc);
    CHECK(r.oc == (r.oc_3d && r.oc_2d));

    BinaryMask elsewhere(sc.camera.width, sc.camera.height);
    elsewhere.set(0, 0);
    elsewhere.set(1, 0);
    const CertificateResult w = observable_correctness(scene.x, elsewhere, *scene.pose_gt, box(), sc.camera, cfg);
    CHECK(w.oc_3d);
    CHECK_FALSE(w.oc_2d);
    CHECK_FALSE(w.oc);

    const Pose off{scene.pose_gt->rotation, scene.pose_gt->translation + Eigen::Vector3d(box().diameter(), 0, 0)};
    const CertificateResult o = observable_correctness(scene.x, scene.mask, off, box(), sc.camera, cfg);
    CHECK_FALSE(o.oc);
    CHECK(o.oc == (o.oc_3d && o.oc_2d));
  }
}

TEST_CASE("PGM round trip and malformed input") {
  const auto dir = std::filesystem::temp_directory_path() / "robust_pose_pgm_test";
  std::filesystem::create_directories(dir);
  BinaryMask m(7, 5);
  m.set(1, 2);
  m.set(6, 4);
  write_pgm(dir / "m.pgm", m);
  CHECK(read_pgm(dir / "m.pgm") == m);
  {
    std::ofstream bad(dir / "bad.pgm");
    bad << "P2\n3 3\n255\n";
  }
  CHECK_THROWS_AS((void)read_pgm(dir / "bad.pgm"), IoError);
  {
    std::ofstream truncated(dir / "short.pgm", std::ios::binary);
    truncated << "P5\n4 4\n255\n" << std::string(3, '\xff');
  }
  CHECK_THROWS_AS((void)read_pgm(dir / "short.pgm"), IoError);
  CHECK_THROWS_AS((void)read_pgm(dir / "missing.pgm"), IoError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("certificate config validation") {
  CertificateConfig c = CertificateConfig::defaults_for(box());
  CHECK(c.p == 0.9);
  CHECK(c.eps_3d == doctest::Approx(0.04 * box().diameter()));
  CHECK(c.eps_2d == 0.10);
  CHECK(c.dilation_radius == 1);
  c.p = 0.0;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
}
