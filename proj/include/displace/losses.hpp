#pragma once

// Training objectives over (n, 3) point tensors: directed closest-point
// reconstruction, a bijective assignment variant solved by an epsilon-scaled
// auction, the ordered-subset loss, and the adaptively weighted per-class
// cross-entropy. Correspondences and step windows are resolved host-side and
// frozen; gradients flow through the distance terms only.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "displace/errors.hpp"
#include "displace/knn.hpp"
#include "displace/tensor.hpp"

namespace displace::loss {

/// Per-source-point matching into a target cloud.
struct Correspondence {
  enum class Mode { Nearest, Assignment };
  Mode mode = Mode::Nearest;
  std::vector<std::int64_t> target_ids; // one per source point
  std::vector<double> distances;        // distances at freeze time
};

namespace detail {

inline void check_cloud(const ad::Tensor& t, const char* who) {
  if (t.rank() != 2 || t.shape()[1] != 3)
    throw ShapeError(std::string(who) + ": expected an (n, 3) point tensor");
  if (t.shape()[0] == 0) throw ContractError(std::string(who) + ": point cloud is empty");
}

// Frozen nearest-target ids for every source point (ties to the lower id).
inline Correspondence nearest_correspondence(const ad::Tensor& source, const ad::Tensor& target) {
  const std::size_t n = source.shape()[0];
  KnnIndex index(target.values(), 3);
  Correspondence corr;
  corr.mode = Correspondence::Mode::Nearest;
  corr.target_ids.resize(n);
  corr.distances.resize(n);
  const auto& src = source.values();
  for (std::size_t i = 0; i < n; ++i) {
    std::span<const double> p(src.data() + 3 * i, 3);
    const int id = index.nearest(p);
    corr.target_ids[i] = id;
    double d2 = 0;
    for (int j = 0; j < 3; ++j) {
      const double d = p[j] - index.point(id)[j];
      d2 += d * d;
    }
    corr.distances[i] = std::sqrt(d2);
  }
  return corr;
}

// Sum of ‖source_i − target_{ids[i]}‖ as a differentiable scalar.
inline ad::Tensor matched_distance_sum(const ad::Tensor& source, const ad::Tensor& target,
                                       const std::vector<std::int64_t>& ids) {
  ad::Tensor matched = ad::gather(target, ids);
  ad::Tensor diff = ad::add(source, ad::neg(matched));
  return ad::sum(ad::euclidean_norm(diff));
}

} // namespace detail

struct DirectedLoss {
  ad::Tensor value; // scalar
  Correspondence corr;
};

/// Sum over source points of the distance to their nearest target point,
/// differentiable w.r.t. both clouds under the frozen correspondence.
inline DirectedLoss directed_closest_loss(const ad::Tensor& source, const ad::Tensor& target) {
  detail::check_cloud(source, "directed_closest_loss: source");
  detail::check_cloud(target, "directed_closest_loss: target");
  Correspondence corr = detail::nearest_correspondence(source, target);
  ad::Tensor value = detail::matched_distance_sum(source, target, corr.target_ids);
  return {std::move(value), std::move(corr)};
}

namespace detail {

// Forward auction for the min-cost bijection, epsilon-scaled. The returned
// assignment costs at most (optimal + n * eps_final); eps_final is chosen so
// that overshoot stays within 1% of a lower bound on the optimal cost.
inline std::vector<std::int64_t> auction_assignment(const std::vector<double>& cost,
                                                    std::size_t n) {
  if (n == 1) return {0};

  double max_cost = 0, lower_bound = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double row_min = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      max_cost = std::max(max_cost, cost[i * n + j]);
      row_min = std::min(row_min, cost[i * n + j]);
    }
    lower_bound += row_min;
  }
  const double floor_eps = 1e-9 * (1.0 + max_cost);
  const double eps_final = std::max(0.01 * lower_bound, floor_eps) / static_cast<double>(n);

  std::vector<double> price(n, 0.0);
  std::vector<std::int64_t> owner(n, -1), assigned(n, -1);
  double eps = std::max(max_cost / 2.0, eps_final);
  while (true) {
    std::fill(owner.begin(), owner.end(), -1);
    std::fill(assigned.begin(), assigned.end(), -1);
    std::vector<std::size_t> queue(n);
    std::iota(queue.begin(), queue.end(), std::size_t{0});
    while (!queue.empty()) {
      const std::size_t i = queue.back();
      queue.pop_back();
      // Best and second-best net value (negated cost minus price).
      std::size_t best_j = 0;
      double best = -std::numeric_limits<double>::infinity();
      double second = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) {
        const double v = -cost[i * n + j] - price[j];
        if (v > best) {
          second = best;
          best = v;
          best_j = j;
        } else if (v > second) {
          second = v;
        }
      }
      price[best_j] += (best - second) + eps;
      if (owner[best_j] >= 0) {
        assigned[owner[best_j]] = -1;
        queue.push_back(static_cast<std::size_t>(owner[best_j]));
      }
      owner[best_j] = static_cast<std::int64_t>(i);
      assigned[i] = static_cast<std::int64_t>(best_j);
    }
    if (eps <= eps_final) break;
    eps = std::max(eps / 5.0, eps_final);
  }
  return assigned;
}

} // namespace detail

/// Minimum-cost bijection loss between equal-size clouds; the permutation is
/// found by an epsilon-scaled auction and lands within 1% of the optimum.
inline DirectedLoss assignment_loss(const ad::Tensor& source, const ad::Tensor& target) {
  detail::check_cloud(source, "assignment_loss: source");
  detail::check_cloud(target, "assignment_loss: target");
  const std::size_t n = source.shape()[0];
  if (target.shape()[0] != n)
    throw ContractError("assignment_loss: clouds must have equal size, got " +
                        std::to_string(n) + " vs " + std::to_string(target.shape()[0]));

  const auto& src = source.values();
  const auto& tgt = target.values();
  std::vector<double> cost(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double d2 = 0;
      for (int c = 0; c < 3; ++c) {
        const double d = src[3 * i + c] - tgt[3 * j + c];
        d2 += d * d;
      }
      cost[i * n + j] = std::sqrt(d2);
    }

  Correspondence corr;
  corr.mode = Correspondence::Mode::Assignment;
  corr.target_ids = detail::auction_assignment(cost, n);
  corr.distances.resize(n);
  for (std::size_t i = 0; i < n; ++i) corr.distances[i] = cost[i * n + corr.target_ids[i]];
  ad::Tensor value = detail::matched_distance_sum(source, target, corr.target_ids);
  return {std::move(value), std::move(corr)};
}

/// Penalizes input points whose nearest output point falls inside the leading
/// |input| block of the ordered output: sum of S(θ)·‖p − φ(p)‖ with the step
/// and the correspondence both frozen.
inline ad::Tensor order_loss(const ad::Tensor& input_cloud, const ad::Tensor& output_cloud) {
  detail::check_cloud(input_cloud, "order_loss: input");
  detail::check_cloud(output_cloud, "order_loss: output");
  const std::size_t n_in = input_cloud.shape()[0];
  if (output_cloud.shape()[0] < n_in)
    throw ContractError("order_loss: output must hold at least as many points as the input");

  Correspondence corr = detail::nearest_correspondence(input_cloud, output_cloud);
  std::vector<std::int64_t> in_ids, out_ids;
  for (std::size_t i = 0; i < n_in; ++i) {
    if (static_cast<std::size_t>(corr.target_ids[i]) < n_in) { // 1-based θ ≤ |input|
      in_ids.push_back(static_cast<std::int64_t>(i));
      out_ids.push_back(corr.target_ids[i]);
    }
  }
  // Empty window: a zero that stays attached to the output's tape so callers
  // can still differentiate through the term.
  if (in_ids.empty()) return ad::mul_scalar(ad::sum(output_cloud), 0.0);
  return detail::matched_distance_sum(ad::gather(input_cloud, in_ids), output_cloud, out_ids);
}

/// Points with per-class label mass: one-hot rows for ground truth, per-class
/// probabilities in (0, 1) for predictions.
struct LabeledSet {
  ad::Tensor points; // (n, 3)
  ad::Tensor labels; // (n, num_classes)

  std::size_t count() const { return points.shape()[0]; }
  std::size_t num_classes() const { return labels.shape()[1]; }

  void validate(const char* who) const {
    detail::check_cloud(points, who);
    if (labels.rank() != 2 || labels.shape()[0] != points.shape()[0])
      throw ShapeError(std::string(who) + ": labels must be (count, num_classes)");
    if (labels.shape()[1] == 0)
      throw ContractError(std::string(who) + ": needs at least one class");
  }
};

/// Per-class logistic squashing of label logits.
inline ad::Tensor label_probabilities(const ad::Tensor& logits) { return ad::sigmoid(logits); }

struct SemanticLoss {
  ad::Tensor value; // scalar
  double gamma = 0;
};

/// Mean per-point binary cross-entropy between predicted class probabilities
/// and the one-hot label of the corresponding ground-truth point, weighted by
/// γ = 0.01 / (completion loss sum). γ is a frozen coefficient.
inline SemanticLoss semantic_loss(const LabeledSet& pred, const LabeledSet& gt,
                                  const Correspondence& corr, double loss_out_to_gt,
                                  double loss_gt_to_out) {
  pred.validate("semantic_loss: pred");
  gt.validate("semantic_loss: gt");
  const std::size_t n = pred.count();
  const std::size_t classes = pred.num_classes();
  if (gt.num_classes() != classes)
    throw ContractError("semantic_loss: class counts differ");
  if (corr.target_ids.size() != n)
    throw ContractError("semantic_loss: correspondence does not cover the predicted points");
  for (auto id : corr.target_ids)
    if (id < 0 || static_cast<std::size_t>(id) >= gt.count())
      throw ContractError("semantic_loss: correspondence id out of range");

  for (double p : pred.labels.values())
    if (!(p >= 0.0 && p <= 1.0))
      throw NumericFault("semantic_loss: predicted probability outside [0, 1]");
  {
    const auto& l = gt.labels.values();
    for (std::size_t i = 0; i < gt.count(); ++i) {
      double row = 0;
      for (std::size_t c = 0; c < classes; ++c) row += l[i * classes + c];
      if (std::abs(row - 1.0) > 1e-9)
        throw ContractError("semantic_loss: ground-truth label rows must be one-hot");
    }
  }

  const double denom = loss_out_to_gt + loss_gt_to_out;
  const double gamma = 0.01 / denom;
  if (!std::isfinite(gamma))
    throw NumericFault("semantic_loss: completion loss sum must be positive to weight the term");

  ad::Tensor p = ad::clamp_frozen(pred.labels, 1e-7, 1.0 - 1e-7);
  ad::Tensor one_minus_p = ad::add_scalar(ad::neg(p), 1.0);
  ad::Tensor lhat = ad::gather(gt.labels, corr.target_ids); // (n, classes)
  ad::Tensor one_minus_lhat = ad::add_scalar(ad::neg(lhat), 1.0);
  ad::Tensor term = ad::add(ad::mul(lhat, ad::log(p)),
                            ad::mul(one_minus_lhat, ad::log(one_minus_p)));
  const double scale = -gamma / (static_cast<double>(classes) * static_cast<double>(n));
  return {ad::mul_scalar(ad::sum(term), scale), gamma};
}

} // namespace displace::loss
