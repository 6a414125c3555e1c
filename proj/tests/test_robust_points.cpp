#include "oracles.hpp"

#include "robust_pose/random.hpp"
#include "robust_pose/robust_points.hpp"
#include "robust_pose/synth.hpp"

#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <set>

using namespace robust_pose;

namespace {

GncConfig gnc(double c_bar) {
  GncConfig c;
  c.c_bar_centroid = c_bar;
  return c;
}

// Brute-force greedy farthest point sampling.
std::vector<Eigen::Index> greedy_fps(const Eigen::Matrix3Xd& x, int k, Eigen::Index start) {
  std::vector<Eigen::Index> chosen{start};
  while (static_cast<int>(chosen.size()) < k) {
    Eigen::Index best = -1;
    double best_d = -1.0;
    for (Eigen::Index i = 0; i < x.cols(); ++i) {
      if (std::find(chosen.begin(), chosen.end(), i) != chosen.end()) continue;
      double d = std::numeric_limits<double>::infinity();
      for (Eigen::Index c : chosen) d = std::min(d, (x.col(i) - x.col(c)).squaredNorm());
      if (d > best_d) {
        best_d = d;
        best = i;
      }
    }
    chosen.push_back(best);
  }
  return chosen;
}

double outlier_fraction(const std::vector<Eigen::Index>& idx, const std::vector<bool>& flags) {
  double n = 0.0;
  for (Eigen::Index i : idx) n += flags[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
  return n / static_cast<double>(idx.size());
}

}  // namespace

TEST_CASE("robust centroid trivial cases") {
  Eigen::Matrix3Xd same(3, 10);
  same.colwise() = Eigen::Vector3d(0.3, -0.2, 1.0);
  const CentroidResult a = robust_centroid(same, gnc(0.1));
  CHECK((a.centroid - Eigen::Vector3d(0.3, -0.2, 1.0)).norm() < 1e-15);
  CHECK(a.weights.minCoeff() == 1.0);

  std::mt19937_64 rng(1);
  Eigen::Matrix3Xd small(3, 100);
  for (Eigen::Index i = 0; i < 100; ++i) {
    Eigen::Vector3d p;
    do {
      p = oracle::random_points(rng, 1, 0.01).col(0);
    } while (p.norm() > 0.01);
    small.col(i) = p;
  }
  const CentroidResult b = robust_centroid(small, gnc(0.1));
  CHECK((b.centroid - small.rowwise().mean()).norm() < 0.01);
  CHECK((b.centroid - small.rowwise().mean()).norm() < 1e-6 * 0.02 + 1e-12);
}

TEST_CASE("robust centroid on the 70/30 construction") {
  const Eigen::Vector3d center(1, 1, 1);
  int robust_ok = 0;
  int mean_bad = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    const LabeledCloud c = ball_with_box_outliers(70, 30, 0.02, center, 2.0, s);
    const CentroidResult r = robust_centroid(c.cloud, gnc(0.1));
    robust_ok += (r.centroid - center).norm() < 0.02 ? 1 : 0;
    mean_bad += (c.cloud.points.rowwise().mean() - center).norm() > 0.1 ? 1 : 0;
    CHECK(r.weights.minCoeff() >= 0.0);
    CHECK(r.weights.maxCoeff() <= 1.0);
  }
  CHECK(robust_ok == 100);
  CHECK(mean_bad == 100);
}

TEST_CASE("robust centroid is translation equivariant") {
  const LabeledCloud c = ball_with_box_outliers(70, 30, 0.02, Eigen::Vector3d(1, 1, 1), 2.0, 7);
  const Eigen::Vector3d t(0.5, -0.25, 0.125);
  const CentroidResult a = robust_centroid(c.cloud, gnc(0.1));
  const CentroidResult b = robust_centroid(Eigen::Matrix3Xd(c.cloud.points.colwise() + t), gnc(0.1));
  CHECK((b.centroid - a.centroid - t).norm() < 1e-9);
  CHECK((a.weights - b.weights).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("robust centroid validation") {
  CHECK_THROWS_AS((void)robust_centroid(Eigen::Matrix3Xd(3, 0), gnc(0.1)), InvalidArgument);
  CHECK_THROWS_AS((void)robust_centroid(Eigen::Matrix3Xd::Zero(3, 2), gnc(0.0)), InvalidArgument);
}

TEST_CASE("center_cloud") {
  std::mt19937_64 rng(2);
  const PointCloud x(oracle::random_points(rng, 20), Eigen::MatrixXd::Random(3, 20));
  CHECK(center_cloud(x, Eigen::Vector3d::Zero()).points == x.points);
  const PointCloud single(Eigen::Matrix3Xd(x.points.leftCols(1)));
  CHECK(center_cloud(single, single.points.col(0)).points.norm() == 0.0);
  const Eigen::Vector3d bar(0.1, 0.2, 0.3);
  const PointCloud c = center_cloud(x, bar);
  CHECK(c.features == x.features);
  CHECK((center_cloud(c, -bar).points - x.points).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("pooling scores") {
  const int n = 6;
  PoolingParams p;
  p.mlp = ScalarMlp::zeros(2, 4);
  std::mt19937_64 rng(3);
  p.mixing_matrix = Eigen::MatrixXd::Random(n, n);
  p.mixing_bias = Eigen::VectorXd::LinSpaced(n, 1, n);
  p.n_prime = 3;
  const Eigen::MatrixXd f = Eigen::MatrixXd::Random(2, n);
  CHECK(pooling_scores(f, p) == p.mixing_bias);

  // An MLP that returns the first coordinate (for non-negative inputs).
  PoolingParams q = identity_pooling(ScalarMlp::zeros(2, 4), n, 3);
  q.mlp.w1(0, 0) = 1.0;
  q.mlp.w2(0) = 1.0;
  const Eigen::MatrixXd g = Eigen::MatrixXd::Random(2, n).cwiseAbs();
  CHECK((pooling_scores(g, q) - g.row(0).transpose()).cwiseAbs().maxCoeff() < 1e-15);

  PoolingParams r;
  r.mlp = ScalarMlp::random(2, rng, 8);
  r.mlp.b1 = Eigen::VectorXd::Random(8);
  r.mlp.b2 = 0.3;
  r.mixing_matrix = Eigen::MatrixXd::Random(n, n);
  r.mixing_bias = Eigen::VectorXd::Random(n);
  r.n_prime = 2;
  Eigen::VectorXd per(n);
  for (int i = 0; i < n; ++i) {
    double h = 0.0;
    for (int j = 0; j < 8; ++j) {
      double a = r.mlp.b1(j);
      for (int d = 0; d < 2; ++d) a += r.mlp.w1(j, d) * f(d, i);
      h += r.mlp.w2(j) * std::max(a, 0.0);
    }
    per(i) = h + r.mlp.b2;
  }
  Eigen::VectorXd expected(n);
  for (int i = 0; i < n; ++i) {
    expected(i) = r.mixing_bias(i);
    for (int j = 0; j < n; ++j) expected(i) += r.mixing_matrix(i, j) * per(j);
  }
  CHECK((pooling_scores(f, r) - expected).cwiseAbs().maxCoeff() < 1e-9);
  CHECK_THROWS_AS((void)pooling_scores(Eigen::MatrixXd::Random(2, n + 1), r), DimensionMismatch);
}

TEST_CASE("robust_pool selection rules") {
  const int n = 8;
  std::mt19937_64 rng(4);
  PointCloud x(oracle::random_points(rng, n), Eigen::MatrixXd::Zero(1, n));
  for (int i = 0; i < n; ++i) x.features(0, i) = i;
  PoolingParams p = identity_pooling(ScalarMlp::zeros(1, 2), n, n - 1);
  p.mlp.w1(0, 0) = 1.0;
  p.mlp.w2(0) = 1.0;
  const PointCloud kept = robust_pool(x, p);
  CHECK(kept.size() == n - 1);
  CHECK(kept.points == x.points.rightCols(n - 1));
  CHECK(kept.features == x.features.rightCols(n - 1));

  PoolingParams flat = identity_pooling(ScalarMlp::zeros(1, 2), n, 3);
  CHECK(robust_pool(x, flat).points == x.points.leftCols(3));

  for (int trial = 0; trial < 20; ++trial) {
    PoolingParams r = identity_pooling(ScalarMlp::zeros(1, 2), n, 1 + trial % (n - 1));
    r.mixing_bias = Eigen::VectorXd::Random(n);
    std::vector<Eigen::Index> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return r.mixing_bias(a) > r.mixing_bias(b); });
    order.resize(static_cast<std::size_t>(r.n_prime));
    std::sort(order.begin(), order.end());
    CHECK(top_k_indices(pooling_scores(x.features, r), r.n_prime) == order);
    CHECK(robust_pool(x, r).points == x.select(order).points);
  }
  CHECK_THROWS_AS((void)robust_pool(PointCloud(oracle::random_points(rng, n + 1), Eigen::MatrixXd::Zero(1, n + 1)), p),
                  DimensionMismatch);
}

TEST_CASE("fps") {
  Eigen::Matrix3Xd line = Eigen::Matrix3Xd::Zero(3, 11);
  for (int i = 0; i <= 10; ++i) line(0, i) = i;
  CHECK(fps_indices(line, 2, 0) == std::vector<Eigen::Index>{0, 10});

  std::mt19937_64 rng(5);
  const Eigen::Matrix3Xd x = oracle::random_points(rng, 60);
  for (Eigen::Index start : {0, 17, 59}) CHECK(fps_indices(x, 8, start) == greedy_fps(x, 8, start));

  const PointCloud all = fps(PointCloud(x), 60, 3);
  std::set<std::tuple<double, double, double>> a;
  std::set<std::tuple<double, double, double>> b;
  for (Eigen::Index i = 0; i < 60; ++i) {
    a.insert({all.points(0, i), all.points(1, i), all.points(2, i)});
    b.insert({x(0, i), x(1, i), x(2, i)});
  }
  CHECK(a == b);
  CHECK(fps(PointCloud(x), 10, 9).points == fps(PointCloud(x), 10, 9).points);
  CHECK_THROWS_AS((void)fps(PointCloud(x), 61, 0), InvalidArgument);
}

TEST_CASE("random_sample") {
  std::mt19937_64 rng(6);
  const PointCloud x(oracle::random_points(rng, 10));
  CHECK(random_sample(x, 10, 1).points == x.points);
  CHECK(random_sample_indices(50, 7, 3) == random_sample_indices(50, 7, 3));

  const int n = 20;
  const int k = 5;
  const int reps = 10000;
  std::vector<int> counts(n, 0);
  for (int r = 0; r < reps; ++r) {
    const auto idx = random_sample_indices(n, k, static_cast<std::uint64_t>(r));
    CHECK(std::is_sorted(idx.begin(), idx.end()));
    for (auto i : idx) ++counts[static_cast<std::size_t>(i)];
  }
  const double p = static_cast<double>(k) / n;
  const double mean = reps * p;
  const double sd = std::sqrt(reps * p * (1 - p));
  for (int c : counts) CHECK(std::abs(c - mean) <= 3.0 * sd + 1.0);
}

TEST_CASE("FPS favours outliers where an oracle-trained pool does not") {
  const Eigen::Vector3d center(1, 1, 1);
  // Score map fitted to inlier labels on centred coordinates of separate clouds.
  Eigen::MatrixXd feats(3, 0);
  Eigen::VectorXd labels(0);
  for (std::uint64_t s = 1000; s < 1020; ++s) {
    const LabeledCloud c = ball_with_box_outliers(70, 30, 0.02, center, 2.0, s);
    const Eigen::Vector3d bar = robust_centroid(c.cloud, gnc(0.1)).centroid;
    const Eigen::Index off = feats.cols();
    feats.conservativeResize(3, off + 100);
    labels.conservativeResize(off + 100);
    feats.rightCols(100) = center_cloud(c.cloud, bar).points;
    for (int i = 0; i < 100; ++i) labels(off + i) = c.outlier_flags[static_cast<std::size_t>(i)] ? 0.0 : 1.0;
  }
  std::mt19937_64 rng(7);
  MlpFitConfig fit;
  fit.epochs = 200;
  const ScalarMlp mlp = fit_scalar_mlp(ScalarMlp::random(3, rng), feats, labels, fit);

  double fps_frac = 0.0;
  double pool_frac = 0.0;
  const int n_prime = 32;
  for (std::uint64_t s = 0; s < 100; ++s) {
    const LabeledCloud c = ball_with_box_outliers(70, 30, 0.02, center, 2.0, s);
    const Eigen::Vector3d bar = robust_centroid(c.cloud, gnc(0.1)).centroid;
    PointCloud centred = center_cloud(c.cloud, bar);
    centred.features = centred.points;
    const auto f_idx = fps_indices(c.cloud.points, n_prime, static_cast<Eigen::Index>(s % 100));
    const auto p_idx = top_k_indices(pooling_scores(centred.features, identity_pooling(mlp, 100, n_prime)), n_prime);
    fps_frac += outlier_fraction(f_idx, c.outlier_flags);
    pool_frac += outlier_fraction(p_idx, c.outlier_flags);
  }
  fps_frac /= 100.0;
  pool_frac /= 100.0;
  MESSAGE("fps outlier fraction ", fps_frac, ", pool ", pool_frac);
  CHECK(fps_frac > 0.3);
  CHECK(pool_frac < 0.05);
  CHECK(fps_frac > pool_frac);
}

TEST_CASE("fit_scalar_mlp reduces the error") {
  std::mt19937_64 rng(8);
  const Eigen::MatrixXd f = Eigen::MatrixXd::Random(2, 200);
  const Eigen::VectorXd t = f.row(0).transpose().cwiseAbs();
  const ScalarMlp init = ScalarMlp::random(2, rng);
  auto mse = [&](const ScalarMlp& m) {
    double e = 0.0;
    for (int i = 0; i < 200; ++i) e += std::pow(m(f.col(i)) - t(i), 2);
    return e / 200;
  };
  const ScalarMlp fitted = fit_scalar_mlp(init, f, t, MlpFitConfig{});
  CHECK(mse(fitted) < 0.5 * mse(init));
  CHECK(fit_scalar_mlp(init, f, t, MlpFitConfig{}).w1 == fitted.w1);
}
