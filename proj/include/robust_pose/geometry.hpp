#pragma once

#include "robust_pose/errors.hpp"
#include "robust_pose/kdtree.hpp"

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace robust_pose {

/// Rigid transform x -> R x + t.
struct Pose {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  static Pose identity() { return {}; }
  static Pose from_translation(const Eigen::Vector3d& t) { return {Eigen::Matrix3d::Identity(), t}; }

  [[nodiscard]] Pose inverse() const;
  [[nodiscard]] Pose operator*(const Pose& rhs) const;
  [[nodiscard]] Eigen::Vector3d operator*(const Eigen::Vector3d& x) const {
    return rotation * x + translation;
  }
  /// Orthonormal with det +1, elementwise to `tol`.
  [[nodiscard]] bool is_valid(double tol = 1e-9) const;
};

/// 3xn points with optional dxn per-point features (RGB in [0,1] for d = 3).
struct PointCloud {
  Eigen::Matrix3Xd points;
  Eigen::MatrixXd features;

  PointCloud() = default;
  explicit PointCloud(Eigen::Matrix3Xd pts) : points(std::move(pts)) {}
  PointCloud(Eigen::Matrix3Xd pts, Eigen::MatrixXd feats);

  [[nodiscard]] Eigen::Index size() const { return points.cols(); }
  [[nodiscard]] bool has_features() const { return features.size() > 0; }
  [[nodiscard]] PointCloud select(std::span<const Eigen::Index> indices) const;
  [[nodiscard]] bool all_finite() const;
};

struct KeypointSet {
  Eigen::Matrix3Xd points;

  [[nodiscard]] Eigen::Index size() const { return points.cols(); }
};

/// Per-point nearest distances from one cloud to another.
using ScoreSet = Eigen::VectorXd;

/// Known-object prior: dense surface sample, annotated keypoints and diameter.
/// Immutable after construction; the nearest neighbour index over the dense
/// sample is shared between copies.
class CadModel {
 public:
  CadModel() = default;
  /// When `diameter` is non-positive it is computed as the maximum pairwise
  /// distance over `dense_points`. Empty `normals` are estimated from the
  /// samples; zero columns mark samples without a usable normal.
  CadModel(Eigen::Matrix3Xd dense_points, KeypointSet keypoints, double diameter = 0.0,
           std::string name = "model", Eigen::Matrix3Xd normals = {});

  [[nodiscard]] const Eigen::Matrix3Xd& dense_points() const { return dense_; }
  [[nodiscard]] const KeypointSet& keypoints() const { return keypoints_; }
  [[nodiscard]] double diameter() const { return diameter_; }
  /// Median nearest-neighbour spacing of the dense sample (0 for m = 1).
  [[nodiscard]] double sample_spacing() const { return spacing_; }
  [[nodiscard]] const KdTree& index() const { return *index_; }
  /// Unit surface normals, sign unspecified; zero columns where undefined.
  [[nodiscard]] const Eigen::Matrix3Xd& normals() const { return normals_; }
  [[nodiscard]] const std::string& name() const { return name_; }
  [[nodiscard]] Eigen::Index num_dense() const { return dense_.cols(); }
  [[nodiscard]] Eigen::Index num_keypoints() const { return keypoints_.size(); }

 private:
  Eigen::Matrix3Xd dense_;
  KeypointSet keypoints_;
  double diameter_ = 0.0;
  double spacing_ = 0.0;
  Eigen::Matrix3Xd normals_;
  std::shared_ptr<const KdTree> index_;
  std::string name_;
};

[[nodiscard]] double max_pairwise_distance(const Eigen::Matrix3Xd& points);
/// PCA normal of each point over its k nearest neighbours (itself included).
/// Zero where the neighbourhood is not planar: smallest eigenvalue above
/// `max_curvature` times the trace (edges, corners).
[[nodiscard]] Eigen::Matrix3Xd estimate_normals(const KdTree& index, int k = 10, double max_curvature = 1.0);

[[nodiscard]] Eigen::Matrix3Xd apply_pose(const Pose& pose, const Eigen::Matrix3Xd& points);
[[nodiscard]] PointCloud apply_pose(const Pose& pose, const PointCloud& cloud);
[[nodiscard]] KeypointSet apply_pose(const Pose& pose, const KeypointSet& keypoints);

/// Least-squares rigid transform T minimising sum_i |y_i - T b_i|^2
/// (centroids, cross-covariance SVD, determinant-corrected rotation).
/// Throws DegenerateConfiguration when the centered b has rank < 2.
[[nodiscard]] Pose register_keypoints(const Eigen::Matrix3Xd& y, const Eigen::Matrix3Xd& b);
[[nodiscard]] inline Pose register_keypoints(const KeypointSet& y, const KeypointSet& b) {
  return register_keypoints(y.points, b.points);
}

/// Registration result together with its first-order differential with
/// respect to every coordinate of the target keypoints y. Entry 3k+c holds
/// dR/dy(c,k) and dt/dy(c,k).
struct RegistrationDifferential {
  Pose pose;
  std::vector<Eigen::Matrix3d> d_rotation;
  std::vector<Eigen::Vector3d> d_translation;

  /// Chain rule: given dL/dR (3x3) and dL/dt, returns dL/dy as a 3xN matrix.
  [[nodiscard]] Eigen::Matrix3Xd pullback(const Eigen::Matrix3d& grad_rotation,
                                          const Eigen::Vector3d& grad_translation) const;
};

[[nodiscard]] RegistrationDifferential register_with_differential(const Eigen::Matrix3Xd& y,
                                                                  const Eigen::Matrix3Xd& b);

/// Truncated least squares: min(z^2, c_bar^2).
[[nodiscard]] inline double tls(double z, double c_bar) {
  const double z2 = z * z;
  const double c2 = c_bar * c_bar;
  return z2 < c2 ? z2 : c2;
}

/// Nearest neighbour of every column of `query` among columns of `reference`.
/// Brute force up to 1e6 pairs, kd-tree beyond; both give identical output.
[[nodiscard]] std::vector<Neighbor> nearest_neighbors(const Eigen::Matrix3Xd& query,
                                                      const Eigen::Matrix3Xd& reference);
[[nodiscard]] std::vector<Neighbor> nearest_neighbors(const Eigen::Matrix3Xd& query,
                                                      const KdTree& reference);

/// s_i = min_j |X_i - Y_j|.
[[nodiscard]] ScoreSet nearest_distances(const PointCloud& x, const PointCloud& y);
[[nodiscard]] ScoreSet nearest_distances(const Eigen::Matrix3Xd& x, const Eigen::Matrix3Xd& y);

/// Nearest-rank percentile: the element at index ceil(p n) - 1 of the sorted scores.
[[nodiscard]] double percentile(const ScoreSet& scores, double p);

/// One-directional ADD-S: mean over the dense sample of the closest-point
/// distance between the model posed at `estimate` and at `reference`.
[[nodiscard]] double adds_metric(const Pose& estimate, const Pose& reference, const CadModel& model);

/// Area under the accuracy-vs-threshold curve on [0, threshold], normalised
/// to [0, 1], by trapezoidal integration on a uniform grid.
[[nodiscard]] double adds_auc(std::span<const double> distances, double threshold, int grid_size = 1000);

// Rotation helpers.
[[nodiscard]] Eigen::Matrix3d rotation_about_axis(const Eigen::Vector3d& axis, double angle);
/// Rotation angle of R in [0, pi].
[[nodiscard]] double rotation_angle(const Eigen::Matrix3d& rotation);
/// Uniform over SO(3) via a normalised Gaussian quaternion.
[[nodiscard]] Eigen::Matrix3d random_rotation(std::mt19937_64& rng);

}  // namespace robust_pose
