#include "robust_pose/kdtree.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

namespace robust_pose {

namespace {

inline bool better(double d, Eigen::Index idx, const Neighbor& best) {
  return d < best.squared_distance ||
         (d == best.squared_distance && idx < best.index);
}

}  // namespace

KdTree::KdTree(Eigen::Matrix3Xd points, int leaf_size)
    : points_(std::move(points)), leaf_size_(std::max(1, leaf_size)) {
  order_.resize(static_cast<std::size_t>(points_.cols()));
  std::iota(order_.begin(), order_.end(), 0);
  if (points_.cols() > 0) {
    nodes_.reserve(static_cast<std::size_t>(2 * points_.cols() / leaf_size_ + 2));
    build(0, static_cast<std::int32_t>(points_.cols()));
  }
}

std::int32_t KdTree::build(std::int32_t begin, std::int32_t end) {
  const auto id = static_cast<std::int32_t>(nodes_.size());
  nodes_.push_back(Node{});
  Node node;
  node.begin = begin;
  node.end = end;
  if (end - begin <= leaf_size_) {
    nodes_[static_cast<std::size_t>(id)] = node;
    return id;
  }

  Eigen::Vector3d lo = Eigen::Vector3d::Constant(std::numeric_limits<double>::infinity());
  Eigen::Vector3d hi = -lo;
  for (std::int32_t i = begin; i < end; ++i) {
    lo = lo.cwiseMin(points_.col(order_[static_cast<std::size_t>(i)]));
    hi = hi.cwiseMax(points_.col(order_[static_cast<std::size_t>(i)]));
  }
  int axis = 0;
  (hi - lo).maxCoeff(&axis);

  const std::int32_t mid = begin + (end - begin) / 2;
  auto first = order_.begin() + begin;
  std::nth_element(first, order_.begin() + mid, order_.begin() + end,
                   [&](std::int32_t a, std::int32_t b) {
                     const double pa = points_(axis, a);
                     const double pb = points_(axis, b);
                     return pa < pb || (pa == pb && a < b);
                   });
  node.axis = axis;
  node.split = points_(axis, order_[static_cast<std::size_t>(mid)]);
  node.left = build(begin, mid);
  node.right = build(mid, end);
  nodes_[static_cast<std::size_t>(id)] = node;
  return id;
}

void KdTree::search(std::int32_t id, const Eigen::Vector3d& q, Neighbor& best) const {
  const Node& node = nodes_[static_cast<std::size_t>(id)];
  if (node.axis < 0) {
    for (std::int32_t i = node.begin; i < node.end; ++i) {
      const auto idx = order_[static_cast<std::size_t>(i)];
      const double d = squared_distance(points_.col(idx), q);
      if (better(d, idx, best)) {
        best.squared_distance = d;
        best.index = idx;
      }
    }
    return;
  }
  const double diff = q(node.axis) - node.split;
  const std::int32_t near = diff < 0.0 ? node.left : node.right;
  const std::int32_t far = diff < 0.0 ? node.right : node.left;
  search(near, q, best);
  // Points equal to the split value can sit on either side, so the far side
  // is visited whenever the slab distance does not exceed the best distance.
  if (diff * diff <= best.squared_distance) search(far, q, best);
}

Neighbor KdTree::nearest(const Eigen::Vector3d& query) const {
  Neighbor best{-1, std::numeric_limits<double>::infinity()};
  if (!nodes_.empty()) search(0, query, best);
  return best;
}

Neighbor KdTree::nearest_within(const Eigen::Vector3d& query, double max_squared) const {
  Neighbor best{-1, max_squared};
  if (!nodes_.empty()) search(0, query, best);
  return best;
}

namespace {

// Max-heap on (distance, index): the front is the worst of the current k.
inline bool heap_less(const Neighbor& a, const Neighbor& b) {
  return a.squared_distance < b.squared_distance ||
         (a.squared_distance == b.squared_distance && a.index < b.index);
}

}  // namespace

void KdTree::search_k(std::int32_t id, const Eigen::Vector3d& q, std::size_t k,
                      std::vector<Neighbor>& heap) const {
  const Node& node = nodes_[static_cast<std::size_t>(id)];
  if (node.axis < 0) {
    for (std::int32_t i = node.begin; i < node.end; ++i) {
      const auto idx = order_[static_cast<std::size_t>(i)];
      const Neighbor cand{idx, squared_distance(points_.col(idx), q)};
      if (heap.size() < k) {
        heap.push_back(cand);
        std::push_heap(heap.begin(), heap.end(), heap_less);
      } else if (heap_less(cand, heap.front())) {
        std::pop_heap(heap.begin(), heap.end(), heap_less);
        heap.back() = cand;
        std::push_heap(heap.begin(), heap.end(), heap_less);
      }
    }
    return;
  }
  const double diff = q(node.axis) - node.split;
  const std::int32_t near = diff < 0.0 ? node.left : node.right;
  const std::int32_t far = diff < 0.0 ? node.right : node.left;
  search_k(near, q, k, heap);
  if (heap.size() < k || diff * diff <= heap.front().squared_distance) search_k(far, q, k, heap);
}

std::vector<Neighbor> KdTree::k_nearest(const Eigen::Vector3d& query, int k) const {
  std::vector<Neighbor> heap;
  if (k <= 0 || nodes_.empty()) return heap;
  heap.reserve(static_cast<std::size_t>(k));
  search_k(0, query, static_cast<std::size_t>(k), heap);
  std::sort_heap(heap.begin(), heap.end(), heap_less);
  return heap;
}

Neighbor brute_force_nearest(const Eigen::Matrix3Xd& points, const Eigen::Vector3d& query) {
  Neighbor best{-1, std::numeric_limits<double>::infinity()};
  for (Eigen::Index j = 0; j < points.cols(); ++j) {
    const double d = squared_distance(points.col(j), query);
    if (d < best.squared_distance) {
      best.squared_distance = d;
      best.index = j;
    }
  }
  return best;
}

}  // namespace robust_pose
