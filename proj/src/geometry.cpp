#include "robust_pose/geometry.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <limits>

namespace robust_pose {

Pose Pose::inverse() const {
  Pose inv;
  inv.rotation = rotation.transpose();
  inv.translation = -(inv.rotation * translation);
  return inv;
}

Pose Pose::operator*(const Pose& rhs) const {
  return {rotation * rhs.rotation, rotation * rhs.translation + translation};
}

bool Pose::is_valid(double tol) const {
  if (!rotation.allFinite() || !translation.allFinite()) return false;
  const Eigen::Matrix3d gram = rotation.transpose() * rotation;
  if ((gram - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > tol) return false;
  return std::abs(rotation.determinant() - 1.0) <= tol;
}

PointCloud::PointCloud(Eigen::Matrix3Xd pts, Eigen::MatrixXd feats)
    : points(std::move(pts)), features(std::move(feats)) {
  if (features.size() > 0 && features.cols() != points.cols()) {
    throw DimensionMismatch("feature column count differs from point count");
  }
}

PointCloud PointCloud::select(std::span<const Eigen::Index> indices) const {
  PointCloud out;
  out.points.resize(3, static_cast<Eigen::Index>(indices.size()));
  if (has_features()) out.features.resize(features.rows(), static_cast<Eigen::Index>(indices.size()));
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto c = static_cast<Eigen::Index>(k);
    out.points.col(c) = points.col(indices[k]);
    if (has_features()) out.features.col(c) = features.col(indices[k]);
  }
  return out;
}

bool PointCloud::all_finite() const {
  return points.allFinite() && (!has_features() || features.allFinite());
}

double max_pairwise_distance(const Eigen::Matrix3Xd& points) {
  double best = 0.0;
  for (Eigen::Index i = 0; i < points.cols(); ++i) {
    for (Eigen::Index j = i + 1; j < points.cols(); ++j) {
      best = std::max(best, squared_distance(points.col(i), points.col(j)));
    }
  }
  return std::sqrt(best);
}

namespace {

double median_spacing(const Eigen::Matrix3Xd& points) {
  if (points.cols() < 2) return 0.0;
  std::vector<double> nn(static_cast<std::size_t>(points.cols()));
  for (Eigen::Index i = 0; i < points.cols(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < points.cols(); ++j) {
      if (j != i) best = std::min(best, squared_distance(points.col(i), points.col(j)));
    }
    nn[static_cast<std::size_t>(i)] = std::sqrt(best);
  }
  auto mid = nn.begin() + static_cast<std::ptrdiff_t>(nn.size() / 2);
  std::nth_element(nn.begin(), mid, nn.end());
  return *mid;
}

}  // namespace

CadModel::CadModel(Eigen::Matrix3Xd dense_points, KeypointSet keypoints, double diameter,
                   std::string name, Eigen::Matrix3Xd normals)
    : dense_(std::move(dense_points)), keypoints_(std::move(keypoints)), normals_(std::move(normals)),
      name_(std::move(name)) {
  if (dense_.cols() < 1) throw InvalidArgument("CAD model needs at least one dense point");
  if (!dense_.allFinite() || !keypoints_.points.allFinite()) {
    throw InvalidArgument("CAD model contains non-finite coordinates");
  }
  if (keypoints_.size() < 3) throw InvalidArgument("CAD model needs at least three keypoints");
  diameter_ = diameter > 0.0 ? diameter : max_pairwise_distance(dense_);
  if (!(diameter_ > 0.0)) throw InvalidArgument("CAD model diameter must be positive");
  spacing_ = median_spacing(dense_);
  index_ = std::make_shared<const KdTree>(dense_);
  if (normals_.cols() == 0) {
    normals_ = estimate_normals(*index_);
  } else if (normals_.cols() != dense_.cols() || !normals_.allFinite()) {
    throw InvalidArgument("CAD model normals must be finite and match the dense points");
  }
}

Eigen::Matrix3Xd estimate_normals(const KdTree& index, int k, double max_curvature) {
  const Eigen::Matrix3Xd& pts = index.points();
  Eigen::Matrix3Xd normals = Eigen::Matrix3Xd::Zero(3, pts.cols());
  for (Eigen::Index i = 0; i < pts.cols(); ++i) {
    const auto nn = index.k_nearest(pts.col(i), k);
    if (nn.size() < 3) continue;
    Eigen::Vector3d mean = Eigen::Vector3d::Zero();
    for (const auto& n : nn) mean += pts.col(n.index);
    mean /= static_cast<double>(nn.size());
    Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
    for (const auto& n : nn) {
      const Eigen::Vector3d d = pts.col(n.index) - mean;
      cov += d * d.transpose();
    }
    const Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov);
    // A line or a point has no defined normal.
    if (!(eig.eigenvalues()(1) > 1e-12 * eig.eigenvalues()(2))) continue;
    if (eig.eigenvalues()(0) > max_curvature * eig.eigenvalues().sum()) continue;
    normals.col(i) = eig.eigenvectors().col(0);
  }
  return normals;
}

Eigen::Matrix3Xd apply_pose(const Pose& pose, const Eigen::Matrix3Xd& points) {
  Eigen::Matrix3Xd out = pose.rotation * points;
  out.colwise() += pose.translation;
  return out;
}

PointCloud apply_pose(const Pose& pose, const PointCloud& cloud) {
  PointCloud out;
  out.points = apply_pose(pose, cloud.points);
  out.features = cloud.features;
  return out;
}

KeypointSet apply_pose(const Pose& pose, const KeypointSet& keypoints) {
  return {apply_pose(pose, keypoints.points)};
}

namespace {

struct Centered {
  Eigen::Vector3d mean_y;
  Eigen::Vector3d mean_b;
  Eigen::Matrix3d cross;  // sum (y - ybar)(b - bbar)^T
  Eigen::Matrix3Xd b_centered;
};

Centered center_pair(const Eigen::Matrix3Xd& y, const Eigen::Matrix3Xd& b) {
  if (y.cols() != b.cols()) throw DimensionMismatch("registration needs equally sized keypoint sets");
  if (b.cols() < 3) throw DegenerateConfiguration("registration needs at least three keypoints");
  if (!y.allFinite() || !b.allFinite()) throw NonFiniteObjective("non-finite keypoints in registration");
  Centered c;
  c.mean_y = y.rowwise().mean();
  c.mean_b = b.rowwise().mean();
  c.b_centered = b.colwise() - c.mean_b;
  c.cross = (y.colwise() - c.mean_y) * c.b_centered.transpose();
  const Eigen::JacobiSVD<Eigen::Matrix3Xd> svd_b(c.b_centered);
  const auto& s = svd_b.singularValues();
  if (!(s(1) > 1e-10 * std::max(s(0), 1e-300))) {
    throw DegenerateConfiguration("model keypoints are collinear; rotation is not unique");
  }
  return c;
}

struct PolarFactor {
  Eigen::Matrix3d rotation;
  Eigen::Matrix3d v;
  Eigen::Vector3d sigma;  // singular values with the reflection sign folded into the last
};

PolarFactor polar_rotation(const Eigen::Matrix3d& cross) {
  const Eigen::JacobiSVD<Eigen::Matrix3d> svd(cross, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Matrix3d& u = svd.matrixU();
  const Eigen::Matrix3d& v = svd.matrixV();
  const double d = (u * v.transpose()).determinant() < 0.0 ? -1.0 : 1.0;
  PolarFactor f;
  f.rotation = u * Eigen::Vector3d(1.0, 1.0, d).asDiagonal() * v.transpose();
  f.v = v;
  f.sigma = svd.singularValues();
  f.sigma(2) *= d;
  return f;
}

}  // namespace

Pose register_keypoints(const Eigen::Matrix3Xd& y, const Eigen::Matrix3Xd& b) {
  const Centered c = center_pair(y, b);
  Pose pose;
  pose.rotation = polar_rotation(c.cross).rotation;
  pose.translation = c.mean_y - pose.rotation * c.mean_b;
  return pose;
}

RegistrationDifferential register_with_differential(const Eigen::Matrix3Xd& y,
                                                    const Eigen::Matrix3Xd& b) {
  const Centered c = center_pair(y, b);
  const PolarFactor polar = polar_rotation(c.cross);
  RegistrationDifferential out;
  out.pose.rotation = polar.rotation;
  out.pose.translation = c.mean_y - polar.rotation * c.mean_b;

  // H = R P with P symmetric, so for dR = R Omega:
  //   Omega P + P Omega = R^T dH - dH^T R.
  // In the eigenbasis V of P this is diagonal: Omega'_ab = M'_ab / (s_a + s_b).
  const Eigen::Matrix3d& r = polar.rotation;
  const Eigen::Matrix3d& v = polar.v;
  const Eigen::Index n = y.cols();
  const double inv_n = 1.0 / static_cast<double>(n);
  out.d_rotation.resize(static_cast<std::size_t>(3 * n));
  out.d_translation.resize(static_cast<std::size_t>(3 * n));
  for (Eigen::Index k = 0; k < n; ++k) {
    const Eigen::Vector3d bk = c.b_centered.col(k);
    for (int axis = 0; axis < 3; ++axis) {
      Eigen::Matrix3d dh = Eigen::Matrix3d::Zero();
      dh.row(axis) = bk.transpose();
      const Eigen::Matrix3d m = v.transpose() * (r.transpose() * dh - dh.transpose() * r) * v;
      Eigen::Matrix3d omega = Eigen::Matrix3d::Zero();
      for (int a = 0; a < 3; ++a) {
        for (int bb = 0; bb < 3; ++bb) {
          if (a == bb) continue;
          const double denom = polar.sigma(a) + polar.sigma(bb);
          omega(a, bb) = std::abs(denom) > 1e-300 ? m(a, bb) / denom : 0.0;
        }
      }
      const Eigen::Matrix3d dr = r * (v * omega * v.transpose());
      Eigen::Vector3d dt = -(dr * c.mean_b);
      dt(axis) += inv_n;
      const auto slot = static_cast<std::size_t>(3 * k + axis);
      out.d_rotation[slot] = dr;
      out.d_translation[slot] = dt;
    }
  }
  return out;
}

Eigen::Matrix3Xd RegistrationDifferential::pullback(const Eigen::Matrix3d& grad_rotation,
                                                    const Eigen::Vector3d& grad_translation) const {
  const auto n = static_cast<Eigen::Index>(d_rotation.size() / 3);
  Eigen::Matrix3Xd grad(3, n);
  for (Eigen::Index k = 0; k < n; ++k) {
    for (int axis = 0; axis < 3; ++axis) {
      const auto slot = static_cast<std::size_t>(3 * k + axis);
      grad(axis, k) = (d_rotation[slot].array() * grad_rotation.array()).sum() +
                      d_translation[slot].dot(grad_translation);
    }
  }
  return grad;
}

std::vector<Neighbor> nearest_neighbors(const Eigen::Matrix3Xd& query, const KdTree& reference) {
  std::vector<Neighbor> out(static_cast<std::size_t>(query.cols()));
  for (Eigen::Index i = 0; i < query.cols(); ++i) {
    out[static_cast<std::size_t>(i)] = reference.nearest(query.col(i));
  }
  return out;
}

std::vector<Neighbor> nearest_neighbors(const Eigen::Matrix3Xd& query, const Eigen::Matrix3Xd& reference) {
  if (reference.cols() == 0) throw InvalidArgument("nearest neighbour reference cloud is empty");
  const double pairs = static_cast<double>(query.cols()) * static_cast<double>(reference.cols());
  if (pairs <= 1e6) {
    std::vector<Neighbor> out(static_cast<std::size_t>(query.cols()));
    for (Eigen::Index i = 0; i < query.cols(); ++i) {
      out[static_cast<std::size_t>(i)] = brute_force_nearest(reference, query.col(i));
    }
    return out;
  }
  return nearest_neighbors(query, KdTree(reference));
}

ScoreSet nearest_distances(const Eigen::Matrix3Xd& x, const Eigen::Matrix3Xd& y) {
  if (x.cols() == 0 || y.cols() == 0) throw InvalidArgument("nearest_distances needs non-empty clouds");
  const auto nn = nearest_neighbors(x, y);
  ScoreSet s(x.cols());
  for (Eigen::Index i = 0; i < x.cols(); ++i) s(i) = std::sqrt(nn[static_cast<std::size_t>(i)].squared_distance);
  return s;
}

ScoreSet nearest_distances(const PointCloud& x, const PointCloud& y) {
  return nearest_distances(x.points, y.points);
}

double percentile(const ScoreSet& scores, double p) {
  if (scores.size() == 0) throw InvalidArgument("percentile of an empty score set");
  if (!(p > 0.0 && p <= 1.0)) throw InvalidArgument("percentile level must lie in (0, 1]");
  const auto n = static_cast<std::size_t>(scores.size());
  // Guard p n against representation error (0.9 * 10 must give rank 9).
  auto rank = static_cast<std::size_t>(std::ceil(p * static_cast<double>(n) - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, n);
  std::vector<double> v(scores.data(), scores.data() + n);
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(rank - 1), v.end());
  return v[rank - 1];
}

double adds_metric(const Pose& estimate, const Pose& reference, const CadModel& model) {
  const Eigen::Matrix3Xd a = apply_pose(estimate, model.dense_points());
  const Eigen::Matrix3Xd b = apply_pose(reference, model.dense_points());
  return nearest_distances(a, b).mean();
}

double adds_auc(std::span<const double> distances, double threshold, int grid_size) {
  if (distances.empty()) throw InvalidArgument("adds_auc needs at least one distance");
  if (!(threshold > 0.0)) throw InvalidArgument("adds_auc threshold must be positive");
  grid_size = std::max(grid_size, 2);
  std::vector<double> sorted(distances.begin(), distances.end());
  std::sort(sorted.begin(), sorted.end());
  const double n = static_cast<double>(sorted.size());
  auto accuracy = [&](double tau) {
    const auto count = std::upper_bound(sorted.begin(), sorted.end(), tau) - sorted.begin();
    return static_cast<double>(count) / n;
  };
  double area = 0.0;
  double prev = accuracy(0.0);
  for (int g = 1; g < grid_size; ++g) {
    const double cur = accuracy(threshold * g / (grid_size - 1));
    area += 0.5 * (prev + cur);
    prev = cur;
  }
  return area / (grid_size - 1);
}

Eigen::Matrix3d rotation_about_axis(const Eigen::Vector3d& axis, double angle) {
  return Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix();
}

double rotation_angle(const Eigen::Matrix3d& rotation) {
  const double c = std::clamp((rotation.trace() - 1.0) / 2.0, -1.0, 1.0);
  return std::acos(c);
}

Eigen::Matrix3d random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  Eigen::Quaterniond q;
  do {
    q = Eigen::Quaterniond(gauss(rng), gauss(rng), gauss(rng), gauss(rng));
  } while (q.norm() < 1e-12);
  return q.normalized().toRotationMatrix();
}

}  // namespace robust_pose
