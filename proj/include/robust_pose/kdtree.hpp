#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <vector>

namespace robust_pose {

struct Neighbor {
  Eigen::Index index = -1;
  double squared_distance = 0.0;
};

/// Squared Euclidean distance with a fixed evaluation order. Every nearest
/// neighbour backend goes through this so distances agree bit for bit.
inline double squared_distance(const Eigen::Ref<const Eigen::Vector3d>& a,
                               const Eigen::Ref<const Eigen::Vector3d>& b) {
  const double dx = a.x() - b.x();
  const double dy = a.y() - b.y();
  const double dz = a.z() - b.z();
  return dx * dx + dy * dy + dz * dz;
}

/// Exact 3D kd-tree. Ties between equidistant points resolve to the lowest
/// column index, which makes results identical to a brute-force scan.
class KdTree {
 public:
  KdTree() = default;
  explicit KdTree(Eigen::Matrix3Xd points, int leaf_size = 8);

  [[nodiscard]] Neighbor nearest(const Eigen::Vector3d& query) const;
  /// Nearest point with squared distance strictly below `max_squared`, or
  /// index -1 (and squared_distance = max_squared) when there is none.
  [[nodiscard]] Neighbor nearest_within(const Eigen::Vector3d& query, double max_squared) const;
  /// Up to k nearest points, closest first, same tie breaking as nearest().
  [[nodiscard]] std::vector<Neighbor> k_nearest(const Eigen::Vector3d& query, int k) const;
  [[nodiscard]] Eigen::Index size() const { return points_.cols(); }
  [[nodiscard]] const Eigen::Matrix3Xd& points() const { return points_; }

 private:
  struct Node {
    // Leaf when axis < 0: [begin, end) into order_.
    int axis = -1;
    double split = 0.0;
    std::int32_t left = -1;
    std::int32_t right = -1;
    std::int32_t begin = 0;
    std::int32_t end = 0;
  };

  std::int32_t build(std::int32_t begin, std::int32_t end);
  void search(std::int32_t node, const Eigen::Vector3d& q, Neighbor& best) const;
  void search_k(std::int32_t node, const Eigen::Vector3d& q, std::size_t k, std::vector<Neighbor>& heap) const;

  Eigen::Matrix3Xd points_;
  std::vector<std::int32_t> order_;
  std::vector<Node> nodes_;
  int leaf_size_ = 8;
};

/// Brute-force nearest neighbour with lowest-index tie breaking.
[[nodiscard]] Neighbor brute_force_nearest(const Eigen::Matrix3Xd& points,
                                           const Eigen::Vector3d& query);

}  // namespace robust_pose
