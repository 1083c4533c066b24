#pragma once

// Reverse-mode automatic differentiation over dense real tensors.
//
// A Tape records primitive applications in define-by-run style; it is rebuilt
// for every forward pass and confined to one worker. Tensors are immutable
// after creation. A Tensor either refers to a tape node or owns a detached
// value buffer; primitives record a node only when gradients can flow,
// otherwise they evaluate eagerly.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "displace/errors.hpp"

namespace displace::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ")";
  return os.str();
}

enum class Prim {
  Add,
  Mul,
  MatVec,
  EuclideanNorm,
  Tanh,
  Reciprocal,
  Log,
  Sum,
  Gather,
  SelectMinIndex,
};

/// Axis sentinel switching gather into stack-inputs mode.
inline constexpr int kStackAxis = -2;

inline const char* prim_name(Prim op) {
  switch (op) {
    case Prim::Add: return "add";
    case Prim::Mul: return "mul";
    case Prim::MatVec: return "matvec";
    case Prim::EuclideanNorm: return "euclidean_norm";
    case Prim::Tanh: return "tanh";
    case Prim::Reciprocal: return "reciprocal";
    case Prim::Log: return "log";
    case Prim::Sum: return "sum";
    case Prim::Gather: return "gather";
    case Prim::SelectMinIndex: return "select_min_index";
  }
  return "?";
}

class Tape;

/// Handle to an immutable dense tensor. Either tape-backed or detached.
class Tensor {
public:
  Tensor() = default;

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return numel(shape_); }
  std::size_t rank() const { return shape_.size(); }
  bool scalar() const { return size() == 1 && shape_.empty(); }

  const std::vector<double>& values() const;
  double value() const {
    if (size() != 1) throw ContractError("Tensor::value: tensor is not a scalar");
    return values()[0];
  }

  bool on_tape() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool requires_grad() const;

  /// View with a different shape over the same storage (element count preserved).
  Tensor reshape(Shape shape) const {
    if (numel(shape) != size())
      throw ShapeError("reshape: element count mismatch " + shape_str(shape_) + " -> " +
                       shape_str(shape));
    Tensor t = *this;
    t.shape_ = std::move(shape);
    return t;
  }

  /// Indices recorded by select_min_index (frozen, non-differentiable).
  const std::vector<std::int64_t>& indices() const {
    if (!indices_) throw ContractError("Tensor::indices: tensor carries no selection indices");
    return *indices_;
  }
  bool has_indices() const { return indices_ != nullptr; }

private:
  friend class Tape;
  friend Tensor make_constant(Shape, std::vector<double>);
  friend Tensor select_max_index(const Tensor&, int);

  Tape* tape_ = nullptr;
  int id_ = -1;
  std::shared_ptr<const std::vector<double>> buf_; // detached storage
  std::shared_ptr<const std::vector<std::int64_t>> indices_;
  Shape shape_;
};

/// Detached constant tensor (not attached to any tape until used with one).
inline Tensor make_constant(Shape shape, std::vector<double> values);
inline Tensor make_scalar(double v) { return make_constant({}, {v}); }

/// Gradients of one backward pass, keyed by leaf node.
class GradientMap {
public:
  const std::vector<double>& at(const Tensor& leaf) const {
    auto it = grads_.find(leaf.id());
    if (!leaf.on_tape() || it == grads_.end())
      throw ContractError("GradientMap::at: tensor is not a gradient leaf of this tape");
    return it->second;
  }

private:
  friend class Tape;
  std::unordered_map<int, std::vector<double>> grads_;
};

class Tape {
  struct Node {
    Prim op = Prim::Add;
    bool leaf = false;
    bool requires_grad = false;
    int axis = -1; // reduce/select axis; -1 means full reduce or last axis
    std::vector<int> in;
    std::vector<Shape> in_shapes;
    Shape shape;
    std::vector<double> val;
    std::vector<std::int64_t> sel; // gather ids or argmin ids
  };

public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t node_count() const { return nodes_.size(); }

  /// Leaf tensor; participates in gradient maps when requires_grad is set.
  Tensor variable(Shape shape, std::vector<double> values, bool requires_grad = true) {
    check_payload(shape, values, "variable");
    check_finite_values(values, "variable");
    Node n;
    n.leaf = true;
    n.requires_grad = requires_grad;
    n.shape = shape;
    n.val = std::move(values);
    int id = push(std::move(n));
    if (requires_grad) grad_leaves_.push_back(id);
    return wrap(id, std::move(shape));
  }

  Tensor constant(Shape shape, std::vector<double> values) {
    return variable(std::move(shape), std::move(values), false);
  }

  /// Reverse pass from a scalar root. Each call recomputes from scratch, so
  /// repeated calls on the same tape yield identical gradients.
  GradientMap backward(const Tensor& root) {
    if (!root.on_tape() || root.tape() != this)
      throw ContractError("backward: root does not belong to this tape");
    if (root.size() != 1) throw ContractError("backward: root must be a scalar tensor");

    std::vector<std::vector<double>> adj(nodes_.size());
    adj[root.id()].assign(1, 1.0);
    for (int i = root.id(); i >= 0; --i) {
      if (adj[i].empty()) continue;
      propagate(i, adj);
    }

    GradientMap map;
    for (int leaf : grad_leaves_) {
      if (adj[leaf].empty())
        map.grads_[leaf].assign(numel(nodes_[leaf].shape), 0.0);
      else
        map.grads_[leaf] = std::move(adj[leaf]);
    }
    return map;
  }

  // -- primitive applications (free functions below forward here) --

  static Tensor apply(Prim op, std::span<const Tensor> inputs, int axis,
                      const std::vector<std::int64_t>& ids);

private:
  friend class Tensor;

  std::vector<Node> nodes_;
  std::vector<int> grad_leaves_;

  int push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  Tensor wrap(int id, Shape shape) {
    Tensor t;
    t.tape_ = this;
    t.id_ = id;
    t.shape_ = std::move(shape);
    return t;
  }

  static void check_payload(const Shape& shape, const std::vector<double>& values,
                            const char* where) {
    if (values.size() != numel(shape))
      throw ShapeError(std::string(where) + ": value count " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape));
  }

  static void check_finite_values(const std::vector<double>& values, const char* where) {
    for (double v : values)
      if (!std::isfinite(v))
        throw NumericFault(std::string(where) + ": non-finite value encountered");
  }

  // Attach a possibly-detached tensor to this tape as a constant leaf.
  int intern(const Tensor& t) {
    if (t.on_tape()) {
      if (t.tape() != this) throw ContractError("primitive: inputs belong to different tapes");
      return t.id();
    }
    Node n;
    n.leaf = true;
    n.requires_grad = false;
    n.shape = t.shape();
    n.val = t.values();
    return push(std::move(n));
  }

  // ---- broadcasting helpers ----

  static Shape broadcast_result(Prim op, const Shape& a, const Shape& b) {
    const std::size_t r = std::max(a.size(), b.size());
    Shape out(r);
    for (std::size_t i = 0; i < r; ++i) {
      const std::size_t ea = i < r - a.size() ? 1 : a[i - (r - a.size())];
      const std::size_t eb = i < r - b.size() ? 1 : b[i - (r - b.size())];
      if (ea != eb && ea != 1 && eb != 1)
        throw ShapeError(std::string(prim_name(op)) + ": extents not broadcastable " +
                         shape_str(a) + " vs " + shape_str(b));
      out[i] = std::max(ea, eb);
    }
    return out;
  }

  // Strides of `in` padded to the result rank, zeroed on broadcast axes.
  static std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
    std::vector<std::size_t> strides(out.size(), 0);
    std::size_t s = 1;
    for (std::size_t i = 0; i < in.size(); ++i) {
      const std::size_t axis = in.size() - 1 - i;
      const std::size_t out_axis = out.size() - 1 - i;
      strides[out_axis] = (in[axis] == 1 && out[out_axis] != 1) ? 0 : s;
      s *= in[axis];
    }
    return strides;
  }

  // Iterates the broadcast result; the last axis runs in a tight inner loop
  // (its strides are always 0 or 1 by construction).
  template <class F>
  static void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                                 const std::vector<std::size_t>& sb, F&& fn) {
    const std::size_t n = numel(out);
    if (n == 0) return;
    const std::size_t rank = out.size();
    if (rank == 0) {
      fn(0, 0, 0);
      return;
    }
    const std::size_t inner = out[rank - 1];
    const std::size_t ua = sa[rank - 1], ub = sb[rank - 1];
    std::vector<std::size_t> idx(rank - 1, 0);
    std::size_t ia = 0, ib = 0, flat = 0;
    const std::size_t outer = n / inner;
    for (std::size_t block = 0; block < outer; ++block) {
      std::size_t a = ia, b = ib;
      for (std::size_t t = 0; t < inner; ++t, a += ua, b += ub) fn(flat++, a, b);
      for (std::size_t d = rank - 1; d-- > 0;) {
        ++idx[d];
        ia += sa[d];
        ib += sb[d];
        if (idx[d] < out[d]) break;
        ia -= sa[d] * out[d];
        ib -= sb[d] * out[d];
        idx[d] = 0;
      }
    }
  }

  // ---- forward evaluation ----

  struct Evaluated {
    Shape shape;
    std::vector<double> val;
    std::vector<std::int64_t> sel;
  };

  static Evaluated eval(Prim op, const std::vector<const std::vector<double>*>& vals,
                        const std::vector<Shape>& shapes, int axis,
                        const std::vector<std::int64_t>& ids) {
    Evaluated out;
    switch (op) {
      case Prim::Add:
      case Prim::Mul: {
        if (vals.size() != 2)
          throw ShapeError(std::string(prim_name(op)) + ": expects 2 inputs");
        out.shape = broadcast_result(op, shapes[0], shapes[1]);
        out.val.resize(numel(out.shape));
        const auto sa = broadcast_strides(shapes[0], out.shape);
        const auto sb = broadcast_strides(shapes[1], out.shape);
        const auto& a = *vals[0];
        const auto& b = *vals[1];
        if (op == Prim::Add)
          for_each_broadcast(out.shape, sa, sb,
                             [&](std::size_t o, std::size_t ia, std::size_t ib) {
                               out.val[o] = a[ia] + b[ib];
                             });
        else
          for_each_broadcast(out.shape, sa, sb,
                             [&](std::size_t o, std::size_t ia, std::size_t ib) {
                               out.val[o] = a[ia] * b[ib];
                             });
        break;
      }
      case Prim::MatVec: {
        if (vals.size() != 2 || shapes[0].size() != 2 || shapes[1].size() != 1 ||
            shapes[0][1] != shapes[1][0])
          throw ShapeError("matvec: expects (m,n) matrix and (n) vector, got " +
                           shape_str(shapes[0]) + " and " + shape_str(shapes[1]));
        const std::size_t m = shapes[0][0], n = shapes[0][1];
        out.shape = {m};
        out.val.assign(m, 0.0);
        const auto& M = *vals[0];
        const auto& v = *vals[1];
        for (std::size_t i = 0; i < m; ++i) {
          double acc = 0;
          for (std::size_t j = 0; j < n; ++j) acc += M[i * n + j] * v[j];
          out.val[i] = acc;
        }
        break;
      }
      case Prim::EuclideanNorm: {
        if (vals.size() != 1 || shapes[0].empty())
          throw ShapeError("euclidean_norm: expects one tensor of rank >= 1");
        const std::size_t d = shapes[0].back();
        out.shape = Shape(shapes[0].begin(), shapes[0].end() - 1);
        const std::size_t rows = numel(out.shape);
        out.val.resize(rows);
        const auto& x = *vals[0];
        for (std::size_t i = 0; i < rows; ++i) {
          double acc = 0;
          for (std::size_t j = 0; j < d; ++j) {
            const double v = x[i * d + j];
            acc += v * v;
          }
          out.val[i] = std::sqrt(acc);
        }
        break;
      }
      case Prim::Tanh:
      case Prim::Reciprocal:
      case Prim::Log: {
        if (vals.size() != 1)
          throw ShapeError(std::string(prim_name(op)) + ": expects one input");
        out.shape = shapes[0];
        const auto& x = *vals[0];
        out.val.resize(x.size());
        for (std::size_t i = 0; i < x.size(); ++i)
          out.val[i] = op == Prim::Tanh         ? std::tanh(x[i])
                       : op == Prim::Reciprocal ? 1.0 / x[i]
                                                : std::log(x[i]);
        break;
      }
      case Prim::Sum: {
        if (vals.size() != 1) throw ShapeError("sum: expects one input");
        const auto& x = *vals[0];
        if (axis < 0) {
          out.shape = {};
          out.val.assign(1, std::accumulate(x.begin(), x.end(), 0.0));
        } else {
          if (static_cast<std::size_t>(axis) >= shapes[0].size())
            throw ShapeError("sum: axis " + std::to_string(axis) + " out of range for " +
                             shape_str(shapes[0]));
          const auto& s = shapes[0];
          std::size_t outer = 1, inner = 1;
          for (int i = 0; i < axis; ++i) outer *= s[i];
          for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
          const std::size_t ax = s[axis];
          out.shape = s;
          out.shape.erase(out.shape.begin() + axis);
          out.val.assign(outer * inner, 0.0);
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t a = 0; a < ax; ++a)
              for (std::size_t i = 0; i < inner; ++i)
                out.val[o * inner + i] += x[(o * ax + a) * inner + i];
        }
        break;
      }
      case Prim::Gather: {
        if (axis != kStackAxis) {
          // Select slices of one tensor along axis 0 (any rank) or axis 1 (rank 2).
          if (vals.size() != 1) throw ShapeError("gather: slice mode expects one input");
          const auto& s = shapes[0];
          const auto& x = *vals[0];
          if (axis <= 0) {
            if (s.empty()) throw ShapeError("gather: input must have rank >= 1");
            const std::size_t rows = s[0];
            const std::size_t rest = numel(s) / std::max<std::size_t>(rows, 1);
            out.shape = s;
            out.shape[0] = ids.size();
            out.val.resize(ids.size() * rest);
            for (std::size_t i = 0; i < ids.size(); ++i) {
              const auto id = ids[i];
              if (id < 0 || static_cast<std::size_t>(id) >= rows)
                throw ShapeError("gather: row id " + std::to_string(id) + " out of range " +
                                 std::to_string(rows));
              std::copy_n(x.begin() + id * rest, rest, out.val.begin() + i * rest);
            }
          } else {
            if (s.size() != 2) throw ShapeError("gather: axis 1 requires a rank-2 tensor");
            const std::size_t rows = s[0], cols = s[1];
            out.shape = {rows, ids.size()};
            out.val.resize(rows * ids.size());
            for (std::size_t i = 0; i < ids.size(); ++i) {
              const auto id = ids[i];
              if (id < 0 || static_cast<std::size_t>(id) >= cols)
                throw ShapeError("gather: column id " + std::to_string(id) +
                                 " out of range " + std::to_string(cols));
              for (std::size_t r = 0; r < rows; ++r)
                out.val[r * ids.size() + i] = x[r * cols + id];
            }
          }
        } else {
          // Stack several same-shape tensors along a new leading axis.
          for (std::size_t i = 1; i < shapes.size(); ++i)
            if (shapes[i] != shapes[0])
              throw ShapeError("gather: stacked inputs must share one shape, got " +
                               shape_str(shapes[0]) + " vs " + shape_str(shapes[i]));
          const std::size_t rest = numel(shapes[0]);
          out.shape.assign(1, vals.size());
          out.shape.insert(out.shape.end(), shapes[0].begin(), shapes[0].end());
          out.val.resize(vals.size() * rest);
          for (std::size_t i = 0; i < vals.size(); ++i)
            std::copy_n(vals[i]->begin(), rest, out.val.begin() + i * rest);
        }
        break;
      }
      case Prim::SelectMinIndex: {
        if (vals.size() != 1 || shapes[0].empty())
          throw ShapeError("select_min_index: expects one tensor of rank >= 1");
        const auto& s = shapes[0];
        const auto& x = *vals[0];
        if (axis == 0 && s.size() == 2) {
          const std::size_t rows = s[0], cols = s[1];
          if (rows == 0) throw ShapeError("select_min_index: empty axis");
          out.shape = {cols};
          out.val.resize(cols);
          out.sel.resize(cols);
          for (std::size_t c = 0; c < cols; ++c) {
            std::size_t best = 0;
            for (std::size_t r = 1; r < rows; ++r)
              if (x[r * cols + c] < x[best * cols + c]) best = r;
            out.val[c] = x[best * cols + c];
            out.sel[c] = static_cast<std::int64_t>(best);
          }
        } else {
          const std::size_t k = s.back();
          if (k == 0) throw ShapeError("select_min_index: empty axis");
          out.shape = Shape(s.begin(), s.end() - 1);
          const std::size_t rows = numel(out.shape);
          out.val.resize(rows);
          out.sel.resize(rows);
          for (std::size_t i = 0; i < rows; ++i) {
            std::size_t best = 0;
            for (std::size_t j = 1; j < k; ++j)
              if (x[i * k + j] < x[i * k + best]) best = j;
            out.val[i] = x[i * k + best];
            out.sel[i] = static_cast<std::int64_t>(best);
          }
        }
        break;
      }
    }
    for (double v : out.val)
      if (!std::isfinite(v))
        throw NumericFault(std::string(prim_name(op)) + ": produced a non-finite value");
    return out;
  }

  // ---- backward rules ----

  void propagate(int id, std::vector<std::vector<double>>& adj) {
    const Node& n = nodes_[id];
    if (n.leaf) return;
    const auto& g = adj[id];
    auto touch = [&](int in, const Shape& shape) -> std::vector<double>& {
      if (adj[in].empty()) adj[in].assign(numel(shape), 0.0);
      return adj[in];
    };
    auto flows = [&](int in) { return nodes_[in].requires_grad || !nodes_[in].leaf; };

    switch (n.op) {
      case Prim::Add:
      case Prim::Mul: {
        const auto sa = broadcast_strides(n.in_shapes[0], n.shape);
        const auto sb = broadcast_strides(n.in_shapes[1], n.shape);
        const auto& a = nodes_[n.in[0]].val;
        const auto& b = nodes_[n.in[1]].val;
        const bool fa = flows(n.in[0]), fb = flows(n.in[1]);
        if (!fa && !fb) break;
        auto& ga = fa ? touch(n.in[0], n.in_shapes[0]) : adj[id];
        auto& gb = fb ? touch(n.in[1], n.in_shapes[1]) : adj[id];
        if (n.op == Prim::Add) {
          for_each_broadcast(n.shape, sa, sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
            if (fa) ga[ia] += g[o];
            if (fb) gb[ib] += g[o];
          });
        } else {
          for_each_broadcast(n.shape, sa, sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
            if (fa) ga[ia] += g[o] * b[ib];
            if (fb) gb[ib] += g[o] * a[ia];
          });
        }
        break;
      }
      case Prim::MatVec: {
        const std::size_t m = n.in_shapes[0][0], k = n.in_shapes[0][1];
        const auto& M = nodes_[n.in[0]].val;
        const auto& v = nodes_[n.in[1]].val;
        if (flows(n.in[0])) {
          auto& gM = touch(n.in[0], n.in_shapes[0]);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < k; ++j) gM[i * k + j] += g[i] * v[j];
        }
        if (flows(n.in[1])) {
          auto& gv = touch(n.in[1], n.in_shapes[1]);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < k; ++j) gv[j] += g[i] * M[i * k + j];
        }
        break;
      }
      case Prim::EuclideanNorm: {
        if (!flows(n.in[0])) break;
        const std::size_t d = n.in_shapes[0].back();
        const auto& x = nodes_[n.in[0]].val;
        auto& gx = touch(n.in[0], n.in_shapes[0]);
        for (std::size_t i = 0; i < n.val.size(); ++i) {
          const double norm = n.val[i];
          if (norm == 0.0) continue; // subgradient zero at the kink
          const double scale = g[i] / norm;
          for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += scale * x[i * d + j];
        }
        break;
      }
      case Prim::Tanh: {
        if (!flows(n.in[0])) break;
        auto& gx = touch(n.in[0], n.in_shapes[0]);
        for (std::size_t i = 0; i < n.val.size(); ++i)
          gx[i] += g[i] * (1.0 - n.val[i] * n.val[i]);
        break;
      }
      case Prim::Reciprocal: {
        if (!flows(n.in[0])) break;
        auto& gx = touch(n.in[0], n.in_shapes[0]);
        for (std::size_t i = 0; i < n.val.size(); ++i)
          gx[i] -= g[i] * n.val[i] * n.val[i];
        break;
      }
      case Prim::Log: {
        if (!flows(n.in[0])) break;
        const auto& x = nodes_[n.in[0]].val;
        auto& gx = touch(n.in[0], n.in_shapes[0]);
        for (std::size_t i = 0; i < n.val.size(); ++i) gx[i] += g[i] / x[i];
        break;
      }
      case Prim::Sum: {
        if (!flows(n.in[0])) break;
        auto& gx = touch(n.in[0], n.in_shapes[0]);
        if (n.axis < 0) {
          for (double& v : gx) v += g[0];
        } else {
          const auto& s = n.in_shapes[0];
          std::size_t outer = 1, inner = 1;
          for (int i = 0; i < n.axis; ++i) outer *= s[i];
          for (std::size_t i = n.axis + 1; i < s.size(); ++i) inner *= s[i];
          const std::size_t ax = s[n.axis];
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t a = 0; a < ax; ++a)
              for (std::size_t i = 0; i < inner; ++i)
                gx[(o * ax + a) * inner + i] += g[o * inner + i];
        }
        break;
      }
      case Prim::Gather: {
        if (n.axis != kStackAxis) {
          if (!flows(n.in[0])) break;
          auto& gx = touch(n.in[0], n.in_shapes[0]);
          if (n.axis <= 0) {
            const std::size_t rest = numel(n.in_shapes[0]) / n.in_shapes[0][0];
            for (std::size_t i = 0; i < n.sel.size(); ++i)
              for (std::size_t j = 0; j < rest; ++j)
                gx[n.sel[i] * rest + j] += g[i * rest + j];
          } else {
            const std::size_t rows = n.in_shapes[0][0], cols = n.in_shapes[0][1];
            for (std::size_t i = 0; i < n.sel.size(); ++i)
              for (std::size_t r = 0; r < rows; ++r)
                gx[r * cols + n.sel[i]] += g[r * n.sel.size() + i];
          }
        } else {
          const std::size_t rest = numel(n.in_shapes[0]);
          for (std::size_t i = 0; i < n.in.size(); ++i) {
            if (!flows(n.in[i])) continue;
            auto& gx = touch(n.in[i], n.in_shapes[i]);
            for (std::size_t j = 0; j < rest; ++j) gx[j] += g[i * rest + j];
          }
        }
        break;
      }
      case Prim::SelectMinIndex: {
        if (!flows(n.in[0])) break;
        auto& gx = touch(n.in[0], n.in_shapes[0]);
        if (n.axis == 0 && n.in_shapes[0].size() == 2) {
          const std::size_t cols = n.in_shapes[0][1];
          for (std::size_t c = 0; c < cols; ++c) gx[n.sel[c] * cols + c] += g[c];
        } else {
          const std::size_t k = n.in_shapes[0].back();
          for (std::size_t i = 0; i < n.sel.size(); ++i) gx[i * k + n.sel[i]] += g[i];
        }
        break;
      }
    }
  }
};

inline const std::vector<double>& Tensor::values() const {
  if (tape_) return tape_->nodes_[id_].val;
  if (!buf_) throw ContractError("Tensor::values: empty tensor handle");
  return *buf_;
}

inline bool Tensor::requires_grad() const {
  return tape_ && tape_->nodes_[id_].requires_grad;
}

inline Tensor make_constant(Shape shape, std::vector<double> values) {
  if (values.size() != numel(shape))
    throw ShapeError("make_constant: value count does not match shape " + shape_str(shape));
  for (double v : values)
    if (!std::isfinite(v)) throw NumericFault("make_constant: non-finite value");
  Tensor t;
  t.buf_ = std::make_shared<const std::vector<double>>(std::move(values));
  t.shape_ = std::move(shape);
  return t;
}

inline Tensor Tape::apply(Prim op, std::span<const Tensor> inputs, int axis,
                          const std::vector<std::int64_t>& ids) {
  if (inputs.empty()) throw ShapeError(std::string(prim_name(op)) + ": no inputs");

  Tape* tape = nullptr;
  bool grads = false;
  for (const auto& t : inputs) {
    if (t.on_tape()) {
      if (tape && t.tape() != tape)
        throw ContractError("primitive: inputs belong to different tapes");
      tape = t.tape();
      grads = grads || t.requires_grad();
    }
  }

  std::vector<const std::vector<double>*> vals;
  std::vector<Shape> shapes;
  vals.reserve(inputs.size());
  shapes.reserve(inputs.size());
  for (const auto& t : inputs) {
    vals.push_back(&t.values());
    shapes.push_back(t.shape());
  }
  Evaluated ev = eval(op, vals, shapes, axis, ids);
  if (op == Prim::Gather && axis != kStackAxis) ev.sel = ids;

  if (!grads) {
    Tensor t = make_constant(std::move(ev.shape), std::move(ev.val));
    if (op == Prim::SelectMinIndex)
      t.indices_ = std::make_shared<const std::vector<std::int64_t>>(std::move(ev.sel));
    return t;
  }

  Node n;
  n.op = op;
  n.requires_grad = true;
  n.axis = axis;
  n.shape = ev.shape;
  n.val = std::move(ev.val);
  n.sel = std::move(ev.sel);
  for (const auto& t : inputs) {
    n.in.push_back(tape->intern(t));
    n.in_shapes.push_back(t.shape());
  }
  int id = tape->push(std::move(n));
  Tensor t = tape->wrap(id, std::move(ev.shape));
  if (op == Prim::SelectMinIndex)
    t.indices_ = std::make_shared<const std::vector<std::int64_t>>(tape->nodes_[id].sel);
  return t;
}

// ---- primitive surface ----

inline Tensor primitive_apply(Prim op, std::span<const Tensor> inputs, int axis = -1,
                              const std::vector<std::int64_t>& ids = {}) {
  return Tape::apply(op, inputs, axis, ids);
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  const Tensor in[] = {a, b};
  return Tape::apply(Prim::Add, in, -1, {});
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  const Tensor in[] = {a, b};
  return Tape::apply(Prim::Mul, in, -1, {});
}

inline Tensor matvec(const Tensor& m, const Tensor& v) {
  const Tensor in[] = {m, v};
  return Tape::apply(Prim::MatVec, in, -1, {});
}

/// Norm along the last axis; a rank-1 input reduces to a scalar.
inline Tensor euclidean_norm(const Tensor& x) {
  const Tensor in[] = {x};
  return Tape::apply(Prim::EuclideanNorm, in, -1, {});
}

inline Tensor tanh(const Tensor& x) {
  const Tensor in[] = {x};
  return Tape::apply(Prim::Tanh, in, -1, {});
}

inline Tensor reciprocal(const Tensor& x) {
  const Tensor in[] = {x};
  return Tape::apply(Prim::Reciprocal, in, -1, {});
}

inline Tensor log(const Tensor& x) {
  const Tensor in[] = {x};
  return Tape::apply(Prim::Log, in, -1, {});
}

inline Tensor sum(const Tensor& x) {
  const Tensor in[] = {x};
  return Tape::apply(Prim::Sum, in, -1, {});
}

inline Tensor sum(const Tensor& x, int axis) {
  const Tensor in[] = {x};
  return Tape::apply(Prim::Sum, in, axis, {});
}

inline Tensor gather(const Tensor& x, const std::vector<std::int64_t>& ids, int axis = 0) {
  const Tensor in[] = {x};
  return Tape::apply(Prim::Gather, in, axis, ids);
}

/// Stack same-shape tensors along a new leading axis (gather over an input list).
inline Tensor stack(std::span<const Tensor> parts) {
  return Tape::apply(Prim::Gather, parts, kStackAxis, {});
}

/// Minimum along the last axis (or axis 0 of a matrix); ties break to the
/// lowest index. The returned tensor carries the frozen argmin indices.
inline Tensor select_min_index(const Tensor& x, int axis = -1) {
  const Tensor in[] = {x};
  return Tape::apply(Prim::SelectMinIndex, in, axis, {});
}

// ---- compositions of primitives ----

inline Tensor neg(const Tensor& x) { return mul(x, make_scalar(-1.0)); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return add(a, neg(b)); }
inline Tensor add_scalar(const Tensor& x, double c) { return add(x, make_scalar(c)); }
inline Tensor mul_scalar(const Tensor& x, double c) { return mul(x, make_scalar(c)); }

/// Maximum along an axis via negated select_min_index; ties still break to the
/// lowest index. Returned tensor carries the argmax indices.
inline Tensor select_max_index(const Tensor& x, int axis = -1) {
  Tensor m = select_min_index(neg(x), axis);
  Tensor out = neg(m);
  Tensor t = out;
  t.indices_ = m.indices_;
  return t;
}

/// Logistic squashing built from tanh: 1 / (1 + exp(-x)).
inline Tensor sigmoid(const Tensor& x) {
  return add_scalar(mul_scalar(tanh(mul_scalar(x, 0.5)), 0.5), 0.5);
}

/// |x| with the sign frozen at the forward value (subgradient 0 at x = 0).
inline Tensor abs_frozen(const Tensor& x) {
  const auto& v = x.values();
  std::vector<double> sign(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) sign[i] = v[i] > 0 ? 1.0 : (v[i] < 0 ? -1.0 : 0.0);
  return mul(x, make_constant(x.shape(), std::move(sign)));
}

/// Clamp to [lo, hi] with a frozen pass-through mask: exact clamped values,
/// gradient flows only where the input lies inside the window.
inline Tensor clamp_frozen(const Tensor& x, double lo, double hi) {
  const auto& v = x.values();
  std::vector<double> mask(v.size()), shift(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] < lo) {
      mask[i] = 0.0;
      shift[i] = lo;
    } else if (v[i] > hi) {
      mask[i] = 0.0;
      shift[i] = hi;
    } else {
      mask[i] = 1.0;
      shift[i] = 0.0;
    }
  }
  return add(mul(x, make_constant(x.shape(), std::move(mask))),
             make_constant(x.shape(), std::move(shift)));
}

} // namespace displace::ad
