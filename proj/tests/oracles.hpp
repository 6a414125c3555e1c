#pragma once

// Independent double-loop references used by the tests.

#include "robust_pose/geometry.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <vector>

namespace oracle {

inline double nearest(const Eigen::Vector3d& q, const Eigen::Matrix3Xd& ref) {
  double best = std::numeric_limits<double>::infinity();
  for (Eigen::Index j = 0; j < ref.cols(); ++j) best = std::min(best, (q - ref.col(j)).norm());
  return best;
}

inline Eigen::VectorXd nearest_distances(const Eigen::Matrix3Xd& x, const Eigen::Matrix3Xd& y) {
  Eigen::VectorXd s(x.cols());
  for (Eigen::Index i = 0; i < x.cols(); ++i) s(i) = nearest(x.col(i), y);
  return s;
}

inline Eigen::Matrix3Xd posed(const robust_pose::Pose& t, const Eigen::Matrix3Xd& b) {
  Eigen::Matrix3Xd out(3, b.cols());
  for (Eigen::Index i = 0; i < b.cols(); ++i) out.col(i) = t.rotation * b.col(i) + t.translation;
  return out;
}

inline double adds(const robust_pose::Pose& est, const robust_pose::Pose& ref, const Eigen::Matrix3Xd& b) {
  const Eigen::Matrix3Xd a = posed(est, b);
  const Eigen::Matrix3Xd r = posed(ref, b);
  double sum = 0.0;
  for (Eigen::Index i = 0; i < a.cols(); ++i) sum += nearest(a.col(i), r);
  return sum / static_cast<double>(a.cols());
}

inline double loss_self(const Eigen::Matrix3Xd& x, const robust_pose::Pose& t, const Eigen::Matrix3Xd& b,
                        double c_bar) {
  const Eigen::Matrix3Xd m = posed(t, b);
  double sum = 0.0;
  for (Eigen::Index i = 0; i < x.cols(); ++i) {
    const double d = nearest(x.col(i), m);
    sum += std::min(d * d, c_bar * c_bar);
  }
  return sum / static_cast<double>(x.cols());
}

inline double loss_sup(const robust_pose::Pose& t1, const robust_pose::Pose& t2, const Eigen::Matrix3Xd& b) {
  const Eigen::Matrix3Xd a = posed(t1, b);
  const Eigen::Matrix3Xd c = posed(t2, b);
  double ab = 0.0;
  double ba = 0.0;
  for (Eigen::Index i = 0; i < a.cols(); ++i) ab += std::pow(nearest(a.col(i), c), 2);
  for (Eigen::Index i = 0; i < c.cols(); ++i) ba += std::pow(nearest(c.col(i), a), 2);
  return (ab + ba) / static_cast<double>(a.cols());
}

inline Eigen::Matrix3Xd random_points(std::mt19937_64& rng, Eigen::Index n, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  Eigen::Matrix3Xd p(3, n);
  for (Eigen::Index i = 0; i < n; ++i) p.col(i) = Eigen::Vector3d(u(rng), u(rng), u(rng));
  return p;
}

inline robust_pose::Pose random_pose(std::mt19937_64& rng, double translation_scale = 1.0) {
  std::uniform_real_distribution<double> u(-translation_scale, translation_scale);
  return {robust_pose::random_rotation(rng), Eigen::Vector3d(u(rng), u(rng), u(rng))};
}

struct FrozenGradients {
  Eigen::Matrix3Xd self;
  Eigen::Matrix3Xd sup;
};

// Central differences of loss_self and loss_sup with respect to the keypoints
// y, nearest-neighbour correspondences frozen at reg(y).
inline FrozenGradients frozen_loss_gradients(const robust_pose::CadModel& m, const Eigen::Matrix3Xd& x,
                                             const Eigen::Matrix3Xd& y, const robust_pose::Pose& t_prime,
                                             double c_bar, double h) {
  using robust_pose::Pose;
  const auto& dense = m.dense_points();
  const Eigen::Matrix3Xd& b = m.keypoints().points;
  const Pose p0 = robust_pose::register_keypoints(y, b);
  std::vector<Eigen::Index> nn_self(static_cast<std::size_t>(x.cols()));
  for (Eigen::Index i = 0; i < x.cols(); ++i) {
    nn_self[static_cast<std::size_t>(i)] = m.index().nearest(p0.inverse() * Eigen::Vector3d(x.col(i))).index;
  }
  std::vector<Eigen::Index> a_nn(static_cast<std::size_t>(dense.cols()));
  std::vector<Eigen::Index> b_nn(static_cast<std::size_t>(dense.cols()));
  for (Eigen::Index i = 0; i < dense.cols(); ++i) {
    a_nn[static_cast<std::size_t>(i)] = m.index().nearest(t_prime.inverse() * (p0 * Eigen::Vector3d(dense.col(i)))).index;
    b_nn[static_cast<std::size_t>(i)] = m.index().nearest(p0.inverse() * (t_prime * Eigen::Vector3d(dense.col(i)))).index;
  }
  auto frozen_self = [&](const Eigen::Matrix3Xd& yy) {
    const Pose p = robust_pose::register_keypoints(yy, b);
    double s = 0.0;
    for (Eigen::Index i = 0; i < x.cols(); ++i) {
      const Eigen::Vector3d r = x.col(i) - p * Eigen::Vector3d(dense.col(nn_self[static_cast<std::size_t>(i)]));
      s += std::min(r.squaredNorm(), c_bar * c_bar);
    }
    return s / static_cast<double>(x.cols());
  };
  auto frozen_sup = [&](const Eigen::Matrix3Xd& yy) {
    const Pose p = robust_pose::register_keypoints(yy, b);
    double s = 0.0;
    for (Eigen::Index i = 0; i < dense.cols(); ++i) {
      const Eigen::Vector3d bi = dense.col(i);
      s += (p * bi - t_prime * Eigen::Vector3d(dense.col(a_nn[static_cast<std::size_t>(i)]))).squaredNorm();
      s += (t_prime * bi - p * Eigen::Vector3d(dense.col(b_nn[static_cast<std::size_t>(i)]))).squaredNorm();
    }
    return s / static_cast<double>(dense.cols());
  };
  FrozenGradients out{Eigen::Matrix3Xd(3, y.cols()), Eigen::Matrix3Xd(3, y.cols())};
  for (Eigen::Index k = 0; k < y.cols(); ++k) {
    for (int c = 0; c < 3; ++c) {
      Eigen::Matrix3Xd yp = y;
      Eigen::Matrix3Xd ym = y;
      yp(c, k) += h;
      ym(c, k) -= h;
      out.self(c, k) = (frozen_self(yp) - frozen_self(ym)) / (2 * h);
      out.sup(c, k) = (frozen_sup(yp) - frozen_sup(ym)) / (2 * h);
    }
  }
  return out;
}

}  // namespace oracle
