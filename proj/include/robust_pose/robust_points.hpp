#pragma once

#include "robust_pose/geometry.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <random>
#include <vector>

namespace robust_pose {

struct GncConfig {
  double c_bar_centroid = 0.0;  ///< meters
  double mu_update = 1.4;
  int max_outer_iters = 100;
  double convergence_tol = 1e-6;

  void validate() const;
};

struct CentroidResult {
  Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
  Eigen::VectorXd weights;
  int iterations = 0;
};

/// GNC-TLS estimate of argmin_u (1/n) sum_i rho(|X_i - u|).
[[nodiscard]] CentroidResult robust_centroid(const PointCloud& x, const GncConfig& cfg);
[[nodiscard]] CentroidResult robust_centroid(const Eigen::Matrix3Xd& x, const GncConfig& cfg);

/// X - x_bar 1^T; features unchanged.
[[nodiscard]] PointCloud center_cloud(const PointCloud& x, const Eigen::Vector3d& x_bar);

/// Two affine layers with a rectifier between: R^d -> R^h -> R.
struct ScalarMlp {
  Eigen::MatrixXd w1;  // h x d
  Eigen::VectorXd b1;  // h
  Eigen::RowVectorXd w2;  // 1 x h
  double b2 = 0.0;

  static ScalarMlp zeros(int input_dim, int hidden = 16);
  static ScalarMlp random(int input_dim, std::mt19937_64& rng, int hidden = 16);
  [[nodiscard]] double operator()(const Eigen::VectorXd& f) const;
  [[nodiscard]] int input_dim() const { return static_cast<int>(w1.cols()); }
};

struct MlpFitConfig {
  double learning_rate = 0.05;
  int epochs = 50;
  int batch_size = 32;
  std::uint64_t seed = 0;
};

/// Minibatch SGD on the mean squared error between MLP(f_i) and targets_i,
/// starting from `init`.
[[nodiscard]] ScalarMlp fit_scalar_mlp(const ScalarMlp& init, const Eigen::MatrixXd& features,
                                       const Eigen::VectorXd& targets, const MlpFitConfig& cfg);

struct PoolingParams {
  ScalarMlp mlp;
  Eigen::MatrixXd mixing_matrix;  // n x n
  Eigen::VectorXd mixing_bias;    // n
  int n_prime = 1;

  [[nodiscard]] Eigen::Index n() const { return mixing_bias.size(); }
  void validate() const;
};

/// W = I, w = 0.
[[nodiscard]] PoolingParams identity_pooling(const ScalarMlp& mlp, Eigen::Index n, int n_prime);

/// s = W [MLP(f_1), ..., MLP(f_n)]^T + w.
[[nodiscard]] Eigen::VectorXd pooling_scores(const Eigen::MatrixXd& features, const PoolingParams& params);

/// Indices of the k largest scores (ties to the lower index), ascending.
[[nodiscard]] std::vector<Eigen::Index> top_k_indices(const Eigen::VectorXd& scores, int k);

/// Keeps the n' highest-scoring columns in their original order.
[[nodiscard]] PointCloud robust_pool(const PointCloud& x, const PoolingParams& params);

/// Greedy farthest point sampling from `start`; returns indices in selection order.
[[nodiscard]] std::vector<Eigen::Index> fps_indices(const Eigen::Matrix3Xd& x, int n_prime, Eigen::Index start);
/// FPS whose first index is drawn from `seed`; points returned in selection order.
[[nodiscard]] PointCloud fps(const PointCloud& x, int n_prime, std::uint64_t seed);

[[nodiscard]] std::vector<Eigen::Index> random_sample_indices(Eigen::Index n, int n_prime, std::uint64_t seed);
/// Uniform sample without replacement, in ascending index order.
[[nodiscard]] PointCloud random_sample(const PointCloud& x, int n_prime, std::uint64_t seed);

}  // namespace robust_pose
