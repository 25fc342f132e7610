#pragma once

// Exact nearest-neighbour search over a fixed point set: a median-split
// k-d tree with branch-and-bound queries.  Used by the Chamfer losses and
// the 3D shape metrics.

#include <Eigen/Dense>

#include <algorithm>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace usl {

template <int Dim>
class KdTree {
 public:
  using Points = Eigen::Matrix<double, Eigen::Dynamic, Dim>;
  using Query = Eigen::Matrix<double, 1, Dim>;

  struct Hit {
    Eigen::Index index = -1;
    double d2 = std::numeric_limits<double>::infinity();
  };

  explicit KdTree(Points points) : pts_(std::move(points)) {
    const int n = static_cast<int>(pts_.rows());
    if (n == 0) throw std::invalid_argument("KdTree: empty point set");
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    nodes_.reserve(static_cast<size_t>(n));
    root_ = build(order, 0, n, 0);
  }

  Hit nearest(const Query& q) const {
    Hit best;
    search(root_, q, best);
    return best;
  }

  const Points& points() const { return pts_; }

 private:
  struct Node {
    int point;
    int left, right;
    int axis;
  };

  int build(std::vector<int>& order, int lo, int hi, int depth) {
    if (lo >= hi) return -1;
    const int axis = depth % Dim;
    const int mid = lo + (hi - lo) / 2;
    std::nth_element(order.begin() + lo, order.begin() + mid, order.begin() + hi,
                     [&](int a, int b) { return pts_(a, axis) < pts_(b, axis); });
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back({order[static_cast<size_t>(mid)], -1, -1, axis});
    nodes_[static_cast<size_t>(id)].left = build(order, lo, mid, depth + 1);
    nodes_[static_cast<size_t>(id)].right = build(order, mid + 1, hi, depth + 1);
    return id;
  }

  void search(int id, const Query& q, Hit& best) const {
    if (id < 0) return;
    const Node& n = nodes_[static_cast<size_t>(id)];
    const double d2 = (q - pts_.row(n.point)).squaredNorm();
    if (d2 < best.d2) best = {n.point, d2};
    const double delta = q(n.axis) - pts_(n.point, n.axis);
    const int near = delta < 0.0 ? n.left : n.right;
    const int far = delta < 0.0 ? n.right : n.left;
    search(near, q, best);
    if (delta * delta < best.d2) search(far, q, best);
  }

  Points pts_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

}  // namespace usl
