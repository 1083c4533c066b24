#pragma once

// Exact k-nearest-neighbor queries over a fixed point set of arbitrary
// dimension. Low-dimensional sets use a kd-tree; high-dimensional ones fall
// back to a flat scan (the tree degenerates there). Both paths are exact and
// break distance ties toward the lower point id.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "displace/errors.hpp"

namespace displace {

class KnnIndex {
public:
  enum class Strategy { KdTree, FlatScan };

  /// Points are row-major, `dim` coordinates each; at least one point.
  KnnIndex(std::vector<double> points, std::size_t dim) : pts_(std::move(points)), dim_(dim) {
    if (dim_ == 0) throw ContractError("KnnIndex: dimension must be positive");
    if (pts_.empty()) throw ContractError("KnnIndex: point set must be nonempty");
    if (pts_.size() % dim_ != 0)
      throw ShapeError("KnnIndex: coordinate count is not a multiple of the dimension");
    n_ = pts_.size() / dim_;
    strategy_ = (dim_ <= 8 && n_ > static_cast<std::size_t>(kLeafSize))
                    ? Strategy::KdTree
                    : Strategy::FlatScan;
    if (strategy_ == Strategy::KdTree) {
      ids_.resize(n_);
      for (std::size_t i = 0; i < n_; ++i) ids_[i] = static_cast<int>(i);
      nodes_.reserve(2 * n_ / kLeafSize + 2);
      root_ = build(0, static_cast<int>(n_));
    }
  }

  std::size_t size() const { return n_; }
  std::size_t dim() const { return dim_; }
  Strategy strategy() const { return strategy_; }

  /// Ids of the k nearest points, ascending by (distance, id). Requires
  /// k <= size(); callers wanting "up to k" clamp before the call.
  std::vector<int> query(std::span<const double> q, std::size_t k) const {
    if (q.size() != dim_)
      throw ShapeError("KnnIndex::query: query dimension " + std::to_string(q.size()) +
                       " does not match index dimension " + std::to_string(dim_));
    if (k > n_)
      throw ContractError("KnnIndex::query: k " + std::to_string(k) +
                          " exceeds the point count " + std::to_string(n_));
    if (k == 0) return {};

    Best best(k);
    if (strategy_ == Strategy::KdTree)
      search(root_, q, best);
    else
      for (std::size_t i = 0; i < n_; ++i) best.offer(dist2(q, i), static_cast<int>(i));
    return best.finish();
  }

  int nearest(std::span<const double> q) const { return query(q, 1)[0]; }

  /// Distance from q to its nearest point (convenience for correspondence).
  double nearest_distance(std::span<const double> q) const {
    return std::sqrt(dist2(q, nearest(q)));
  }

  std::span<const double> point(int id) const { return {pts_.data() + id * dim_, dim_}; }

private:
  static constexpr int kLeafSize = 16;

  struct Node {
    int axis = 0;
    double split = 0;   // splitting coordinate value
    int left = -1, right = -1;
    int begin = 0, end = 0; // leaf range into ids_
  };

  // Bounded candidate list: worst-first heap, ties prefer keeping lower ids.
  struct Best {
    explicit Best(std::size_t k) : cap(k) { heap.reserve(k); }

    static bool worse(const std::pair<double, int>& a, const std::pair<double, int>& b) {
      return a.first < b.first || (a.first == b.first && a.second < b.second);
    }

    void offer(double d2, int id) {
      if (heap.size() < cap) {
        heap.emplace_back(d2, id);
        std::push_heap(heap.begin(), heap.end(), worse);
      } else if (worse({d2, id}, heap.front())) {
        std::pop_heap(heap.begin(), heap.end(), worse);
        heap.back() = {d2, id};
        std::push_heap(heap.begin(), heap.end(), worse);
      }
    }

    bool full() const { return heap.size() == cap; }
    double bound() const { return heap.front().first; }

    std::vector<int> finish() {
      std::sort(heap.begin(), heap.end(), worse);
      std::vector<int> out(heap.size());
      for (std::size_t i = 0; i < heap.size(); ++i) out[i] = heap[i].second;
      return out;
    }

    std::size_t cap;
    std::vector<std::pair<double, int>> heap;
  };

  double coord(int id, int axis) const { return pts_[static_cast<std::size_t>(id) * dim_ + axis]; }

  double dist2(std::span<const double> q, std::size_t id) const {
    const double* p = pts_.data() + id * dim_;
    double acc = 0;
    for (std::size_t j = 0; j < dim_; ++j) {
      const double d = q[j] - p[j];
      acc += d * d;
    }
    return acc;
  }

  int build(int begin, int end) {
    Node node;
    node.begin = begin;
    node.end = end;
    if (end - begin <= kLeafSize) {
      nodes_.push_back(node);
      return static_cast<int>(nodes_.size()) - 1;
    }

    // Split on the axis of largest extent at this subset.
    int axis = 0;
    double best_extent = -1;
    for (std::size_t a = 0; a < dim_; ++a) {
      double lo = coord(ids_[begin], a), hi = lo;
      for (int i = begin + 1; i < end; ++i) {
        const double c = coord(ids_[i], static_cast<int>(a));
        lo = std::min(lo, c);
        hi = std::max(hi, c);
      }
      if (hi - lo > best_extent) {
        best_extent = hi - lo;
        axis = static_cast<int>(a);
      }
    }

    const int mid = begin + (end - begin) / 2;
    std::nth_element(ids_.begin() + begin, ids_.begin() + mid, ids_.begin() + end,
                     [&](int a, int b) {
                       const double ca = coord(a, axis), cb = coord(b, axis);
                       return ca < cb || (ca == cb && a < b);
                     });
    node.axis = axis;
    node.split = coord(ids_[mid], axis);
    const int self = static_cast<int>(nodes_.size());
    nodes_.push_back(node);
    const int left = build(begin, mid);
    const int right = build(mid, end);
    nodes_[self].left = left;
    nodes_[self].right = right;
    return self;
  }

  void search(int idx, std::span<const double> q, Best& best) const {
    const Node& node = nodes_[idx];
    if (node.left < 0) {
      for (int i = node.begin; i < node.end; ++i) {
        const int id = ids_[i];
        best.offer(dist2(q, id), id);
      }
      return;
    }
    const double delta = q[node.axis] - node.split;
    const int near = delta < 0 ? node.left : node.right;
    const int far = delta < 0 ? node.right : node.left;
    search(near, q, best);
    // Equality must still descend: a boundary point with a lower id may yet
    // displace an equal-distance candidate.
    if (!best.full() || delta * delta <= best.bound()) search(far, q, best);
  }

  std::vector<double> pts_;
  std::size_t dim_ = 0;
  std::size_t n_ = 0;
  Strategy strategy_ = Strategy::FlatScan;
  std::vector<int> ids_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

} // namespace displace
