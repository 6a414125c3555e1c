#include "robust_pose/robust_points.hpp"

#include "robust_pose/random.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace robust_pose {

void GncConfig::validate() const {
  if (!(c_bar_centroid > 0.0)) throw InvalidArgument("GNC clamp must be positive");
  if (!(mu_update > 1.0)) throw InvalidArgument("GNC mu_update must exceed 1");
  if (max_outer_iters < 1) throw InvalidArgument("GNC needs at least one outer iteration");
  if (!(convergence_tol > 0.0)) throw InvalidArgument("GNC convergence tolerance must be positive");
}

CentroidResult robust_centroid(const PointCloud& x, const GncConfig& cfg) {
  return robust_centroid(x.points, cfg);
}

CentroidResult robust_centroid(const Eigen::Matrix3Xd& x, const GncConfig& cfg) {
  cfg.validate();
  const Eigen::Index n = x.cols();
  if (n < 1) throw InvalidArgument("robust centroid needs at least one point");
  const double c2 = cfg.c_bar_centroid * cfg.c_bar_centroid;

  CentroidResult out;
  out.weights = Eigen::VectorXd::Ones(n);
  out.centroid = x.rowwise().mean();

  Eigen::VectorXd r2 = (x.colwise() - out.centroid).colwise().squaredNorm().transpose();
  const double r2_max = r2.maxCoeff();
  if (2.0 * r2_max <= c2) {
    // Every residual sits well inside the clamp: the surrogate is the plain
    // least-squares problem at any mu.
    return out;
  }
  double mu = std::max(c2 / (2.0 * r2_max - c2), 1e-6);

  Eigen::VectorXd prev = out.weights;
  for (int it = 0; it < cfg.max_outer_iters; ++it) {
    out.iterations = it + 1;
    const double lower = mu / (mu + 1.0) * c2;
    const double upper = (mu + 1.0) / mu * c2;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (r2(i) <= lower) {
        out.weights(i) = 1.0;
      } else if (r2(i) >= upper) {
        out.weights(i) = 0.0;
      } else {
        const double w = cfg.c_bar_centroid * std::sqrt(mu * (mu + 1.0)) / std::sqrt(r2(i)) - mu;
        out.weights(i) = std::clamp(w, 0.0, 1.0);
      }
    }
    const double wsum = out.weights.sum();
    if (!(wsum > 0.0)) {
      out.centroid = x.rowwise().mean();
      out.weights.setZero();
      return out;
    }
    out.centroid = (x * out.weights) / wsum;
    r2 = (x.colwise() - out.centroid).colwise().squaredNorm().transpose();

    const double change = (out.weights - prev).cwiseAbs().maxCoeff();
    const bool binary = (out.weights.array() == 0.0 || out.weights.array() == 1.0).all();
    if (it > 0 && (change < cfg.convergence_tol || (binary && change == 0.0))) break;
    prev = out.weights;
    mu *= cfg.mu_update;
  }
  return out;
}

PointCloud center_cloud(const PointCloud& x, const Eigen::Vector3d& x_bar) {
  PointCloud out = x;
  out.points.colwise() -= x_bar;
  return out;
}

ScalarMlp ScalarMlp::zeros(int input_dim, int hidden) {
  ScalarMlp m;
  m.w1 = Eigen::MatrixXd::Zero(hidden, input_dim);
  m.b1 = Eigen::VectorXd::Zero(hidden);
  m.w2 = Eigen::RowVectorXd::Zero(hidden);
  return m;
}

ScalarMlp ScalarMlp::random(int input_dim, std::mt19937_64& rng, int hidden) {
  ScalarMlp m = zeros(input_dim, hidden);
  std::normal_distribution<double> g1(0.0, std::sqrt(2.0 / input_dim));
  std::normal_distribution<double> g2(0.0, std::sqrt(1.0 / hidden));
  for (Eigen::Index i = 0; i < m.w1.size(); ++i) m.w1.data()[i] = g1(rng);
  for (Eigen::Index i = 0; i < m.w2.size(); ++i) m.w2.data()[i] = g2(rng);
  return m;
}

double ScalarMlp::operator()(const Eigen::VectorXd& f) const {
  return w2.dot((w1 * f + b1).cwiseMax(0.0)) + b2;
}

ScalarMlp fit_scalar_mlp(const ScalarMlp& init, const Eigen::MatrixXd& features, const Eigen::VectorXd& targets,
                         const MlpFitConfig& cfg) {
  if (features.cols() != targets.size()) throw DimensionMismatch("one target per feature column is required");
  if (features.rows() != init.input_dim()) throw DimensionMismatch("feature dimension differs from MLP input");
  if (features.cols() == 0) throw InvalidArgument("fitting needs at least one sample");
  if (!(cfg.learning_rate > 0.0) || cfg.epochs < 0 || cfg.batch_size < 1) {
    throw InvalidArgument("invalid MLP fit configuration");
  }
  ScalarMlp m = init;
  std::vector<Eigen::Index> order(static_cast<std::size_t>(features.cols()));
  std::iota(order.begin(), order.end(), 0);
  auto rng = make_rng(cfg.seed, 0x3f);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      Eigen::MatrixXd gw1 = Eigen::MatrixXd::Zero(m.w1.rows(), m.w1.cols());
      Eigen::VectorXd gb1 = Eigen::VectorXd::Zero(m.b1.size());
      Eigen::RowVectorXd gw2 = Eigen::RowVectorXd::Zero(m.w2.size());
      double gb2 = 0.0;
      for (std::size_t s = start; s < end; ++s) {
        const Eigen::VectorXd f = features.col(order[s]);
        const Eigen::VectorXd pre = m.w1 * f + m.b1;
        const Eigen::VectorXd h = pre.cwiseMax(0.0);
        const double r = 2.0 * (m.w2.dot(h) + m.b2 - targets(order[s]));
        gw2 += r * h.transpose();
        gb2 += r;
        const Eigen::VectorXd dh = (r * m.w2.transpose()).cwiseProduct((pre.array() > 0.0).cast<double>().matrix());
        gw1.noalias() += dh * f.transpose();
        gb1 += dh;
      }
      const double step = cfg.learning_rate / static_cast<double>(end - start);
      m.w1 -= step * gw1;
      m.b1 -= step * gb1;
      m.w2 -= step * gw2;
      m.b2 -= step * gb2;
    }
  }
  return m;
}

PoolingParams identity_pooling(const ScalarMlp& mlp, Eigen::Index n, int n_prime) {
  PoolingParams p;
  p.mlp = mlp;
  p.mixing_matrix = Eigen::MatrixXd::Identity(n, n);
  p.mixing_bias = Eigen::VectorXd::Zero(n);
  p.n_prime = n_prime;
  return p;
}

void PoolingParams::validate() const {
  const Eigen::Index n = mixing_bias.size();
  if (mixing_matrix.rows() != n || mixing_matrix.cols() != n) {
    throw DimensionMismatch("mixing matrix must be n x n with n the bias length");
  }
  if (n_prime < 1 || n_prime >= n) throw InvalidArgument("pooling needs 1 <= n' < n");
  if (!mixing_matrix.allFinite() || !mixing_bias.allFinite() || !mlp.w1.allFinite() || !mlp.b1.allFinite() ||
      !mlp.w2.allFinite() || !std::isfinite(mlp.b2)) {
    throw InvalidArgument("pooling parameters must be finite");
  }
}

Eigen::VectorXd pooling_scores(const Eigen::MatrixXd& features, const PoolingParams& params) {
  if (features.cols() != params.n()) {
    throw DimensionMismatch("feature count differs from the pooling layer size");
  }
  if (features.rows() != params.mlp.input_dim()) throw DimensionMismatch("feature dimension differs from MLP input");
  Eigen::VectorXd per_point(features.cols());
  for (Eigen::Index i = 0; i < features.cols(); ++i) per_point(i) = params.mlp(features.col(i));
  return params.mixing_matrix * per_point + params.mixing_bias;
}

std::vector<Eigen::Index> top_k_indices(const Eigen::VectorXd& scores, int k) {
  std::vector<Eigen::Index> order(static_cast<std::size_t>(scores.size()));
  std::iota(order.begin(), order.end(), 0);
  const auto kk = static_cast<std::size_t>(std::clamp<Eigen::Index>(k, 0, scores.size()));
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(kk), order.end(),
                    [&](Eigen::Index a, Eigen::Index b) {
                      return scores(a) > scores(b) || (scores(a) == scores(b) && a < b);
                    });
  order.resize(kk);
  std::sort(order.begin(), order.end());
  return order;
}

PointCloud robust_pool(const PointCloud& x, const PoolingParams& params) {
  params.validate();
  if (!x.has_features()) throw InvalidArgument("robust pooling needs per-point features");
  if (x.size() != params.n()) throw DimensionMismatch("cloud size differs from the pooling layer size");
  const auto idx = top_k_indices(pooling_scores(x.features, params), params.n_prime);
  return x.select(idx);
}

std::vector<Eigen::Index> fps_indices(const Eigen::Matrix3Xd& x, int n_prime, Eigen::Index start) {
  const Eigen::Index n = x.cols();
  if (n_prime < 1 || n_prime > n) throw InvalidArgument("FPS needs 1 <= n' <= n");
  if (start < 0 || start >= n) throw InvalidArgument("FPS start index out of range");
  std::vector<Eigen::Index> chosen;
  chosen.reserve(static_cast<std::size_t>(n_prime));
  std::vector<double> dist(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  Eigen::Index current = start;
  for (int k = 0; k < n_prime; ++k) {
    chosen.push_back(current);
    dist[static_cast<std::size_t>(current)] = -1.0;
    Eigen::Index next = -1;
    double best = -1.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      double& d = dist[static_cast<std::size_t>(i)];
      if (d < 0.0) continue;
      d = std::min(d, squared_distance(x.col(i), x.col(current)));
      if (d > best) {
        best = d;
        next = i;
      }
    }
    if (next < 0) break;
    current = next;
  }
  return chosen;
}

PointCloud fps(const PointCloud& x, int n_prime, std::uint64_t seed) {
  if (x.size() < 1) throw InvalidArgument("FPS needs a non-empty cloud");
  auto rng = make_rng(seed, 0xf0);
  const auto start = static_cast<Eigen::Index>(
      std::uniform_int_distribution<std::int64_t>(0, x.size() - 1)(rng));
  const auto idx = fps_indices(x.points, n_prime, start);
  return x.select(idx);
}

std::vector<Eigen::Index> random_sample_indices(Eigen::Index n, int n_prime, std::uint64_t seed) {
  if (n_prime < 1 || n_prime > n) throw InvalidArgument("random sampling needs 1 <= n' <= n");
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  auto rng = make_rng(seed, 0x5a);
  // Partial Fisher-Yates.
  for (int k = 0; k < n_prime; ++k) {
    const auto j = std::uniform_int_distribution<std::int64_t>(k, n - 1)(rng);
    std::swap(idx[static_cast<std::size_t>(k)], idx[static_cast<std::size_t>(j)]);
  }
  idx.resize(static_cast<std::size_t>(n_prime));
  std::sort(idx.begin(), idx.end());
  return idx;
}

PointCloud random_sample(const PointCloud& x, int n_prime, std::uint64_t seed) {
  return x.select(random_sample_indices(x.size(), n_prime, seed));
}

}  // namespace robust_pose
