#pragma once

// Standard gradient-verification targets: one per tape primitive plus the
// displacement operators and losses. Each target packs its free parameters
// into a flat vector, rebuilds a fresh tape per evaluation, and reports a
// tie margin so the harness can resample inputs near frozen-choice
// boundaries (argmin switches, pooling rank flips, correspondence changes).

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "displace/gradcheck.hpp"
#include "displace/losses.hpp"
#include "displace/operators.hpp"
#include "displace/tensor.hpp"

namespace displace::gradcheck {

namespace detail {

// Leaves are created in x-order; the builder returns the scalar root.
using BuildFn = std::function<ad::Tensor(ad::Tape&, std::span<const double>,
                                         std::vector<ad::Tensor>&)>;

inline Target make_target(std::string name, std::size_t dim, BuildFn build,
                          std::function<double(std::span<const double>)> margin = {},
                          double lo = -2.0, double hi = 2.0) {
  Target t;
  t.name = std::move(name);
  t.dim = dim;
  t.lo = lo;
  t.hi = hi;
  t.margin = std::move(margin);
  t.value = [build](std::span<const double> x) {
    ad::Tape tape;
    std::vector<ad::Tensor> leaves;
    return build(tape, x, leaves).value();
  };
  t.gradient = [build, dim](std::span<const double> x) {
    ad::Tape tape;
    std::vector<ad::Tensor> leaves;
    ad::Tensor root = build(tape, x, leaves);
    ad::GradientMap grads = tape.backward(root);
    std::vector<double> out;
    out.reserve(dim);
    for (const auto& leaf : leaves) {
      const auto& g = grads.at(leaf);
      out.insert(out.end(), g.begin(), g.end());
    }
    return out;
  };
  return t;
}

inline std::vector<double> take(std::span<const double> x, std::size_t at, std::size_t n) {
  return {x.begin() + static_cast<std::ptrdiff_t>(at),
          x.begin() + static_cast<std::ptrdiff_t>(at + n)};
}

inline ad::Tensor leaf(ad::Tape& tape, std::span<const double> x, std::size_t& at,
                       ad::Shape shape, std::vector<ad::Tensor>& leaves) {
  const std::size_t n = ad::numel(shape);
  ad::Tensor t = tape.variable(std::move(shape), take(x, at, n));
  at += n;
  leaves.push_back(t);
  return t;
}

inline std::vector<double> fixed_values(Rng& rng, std::size_t n, double lo = -1.0,
                                        double hi = 1.0) {
  std::vector<double> v(n);
  for (auto& e : v) e = uniform(rng, lo, hi);
  return v;
}

// Contracts a tensor to a scalar with fixed weights so every entry's
// gradient path is exercised.
inline ad::Tensor contract(const ad::Tensor& t, const std::vector<double>& w) {
  return ad::sum(ad::mul(t, ad::make_constant(t.shape(), w)));
}

inline double dist3(std::span<const double> a, std::size_t ai, std::span<const double> b,
                    std::size_t bi, std::size_t d) {
  double acc = 0;
  for (std::size_t c = 0; c < d; ++c) {
    const double diff = a[ai * d + c] - b[bi * d + c];
    acc += diff * diff;
  }
  return std::sqrt(acc);
}

// Gap between the two smallest entries.
inline double top_gap(std::vector<double> v) {
  std::partial_sort(v.begin(), v.begin() + 2, v.end());
  return v[1] - v[0];
}

// Smallest nearest-vs-second gap over source rows against target rows.
inline double correspondence_margin(std::span<const double> src, std::size_t ns,
                                    std::span<const double> tgt, std::size_t nt, std::size_t d) {
  double margin = std::numeric_limits<double>::infinity();
  std::vector<double> dists(nt);
  for (std::size_t i = 0; i < ns; ++i) {
    for (std::size_t j = 0; j < nt; ++j) dists[j] = dist3(src, i, tgt, j, d);
    margin = std::min(margin, top_gap(dists));
  }
  return margin;
}

// Candidate row ids for one anchor: all rows (k = 0) or the k nearest by
// (distance, id), returned in ascending id order — mirrors the operator.
inline std::vector<std::size_t> plain_candidates(std::span<const double> pts, std::size_t n,
                                                 std::size_t d, std::size_t anchor,
                                                 std::size_t k) {
  std::vector<std::size_t> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = i;
  if (k == 0 || k >= n) return ids;
  std::sort(ids.begin(), ids.end(), [&](std::size_t a, std::size_t b) {
    const double da = dist3(pts, anchor, pts, a, d), db = dist3(pts, anchor, pts, b, d);
    return da < db || (da == db && a < b);
  });
  ids.resize(k);
  std::sort(ids.begin(), ids.end());
  return ids;
}

// Smallest probe-level argmin gap of a displacement bank applied to a cloud:
// for every (anchor, probe), gap between the two closest candidates.
inline double extraction_margin(std::span<const double> pts, std::size_t n, std::size_t d,
                                std::span<const double> deltas, std::size_t m, std::size_t k) {
  double margin = std::numeric_limits<double>::infinity();
  std::vector<double> probe(d), dists;
  for (std::size_t i = 0; i < n; ++i) {
    const auto cand = plain_candidates(pts, n, d, i, k);
    if (cand.size() < 2) continue;
    for (std::size_t j = 0; j < m; ++j) {
      for (std::size_t c = 0; c < d; ++c) probe[c] = pts[i * d + c] + deltas[j * d + c];
      dists.clear();
      for (std::size_t id : cand) dists.push_back(dist3(probe, 0, pts, id, d));
      margin = std::min(margin, top_gap(std::move(dists)));
    }
  }
  return margin;
}

// Gap between the k-th included and first excluded anchor neighbor; guards
// the frozen candidate-set membership when the cloud itself moves.
inline double candidate_set_margin(std::span<const double> pts, std::size_t n, std::size_t d,
                                   std::size_t k) {
  if (k == 0 || k >= n) return std::numeric_limits<double>::infinity();
  double margin = std::numeric_limits<double>::infinity();
  std::vector<double> dists(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) dists[j] = dist3(pts, i, pts, j, d);
    std::nth_element(dists.begin(), dists.begin() + static_cast<std::ptrdiff_t>(k), dists.end());
    const double excluded = dists[k];
    const double included = *std::max_element(dists.begin(),
                                              dists.begin() + static_cast<std::ptrdiff_t>(k));
    margin = std::min(margin, excluded - included);
  }
  return margin;
}

// Activation-rank gap at the retention boundary of neighbor pooling.
inline double pooling_rank_margin(std::vector<double> acts, std::size_t tau) {
  const std::size_t keep = acts.size() / tau;
  if (keep == 0 || keep >= acts.size()) return std::numeric_limits<double>::infinity();
  std::sort(acts.begin(), acts.end(), std::greater<>());
  return acts[keep - 1] - acts[keep];
}

// Plain-loop recomputation of per-anchor kernel sums and activations.
inline std::vector<double> plain_activations(std::span<const double> pts, std::size_t n,
                                             std::size_t d, std::span<const double> deltas,
                                             std::span<const double> sigmas, std::size_t d_out,
                                             std::size_t s, double alpha, double beta,
                                             std::size_t k) {
  std::vector<double> acts(n, 0.0);
  std::vector<double> probe(d);
  for (std::size_t i = 0; i < n; ++i) {
    const auto cand = plain_candidates(pts, n, d, i, k);
    for (std::size_t b = 0; b < d_out; ++b) {
      double g = 0;
      for (std::size_t j = 0; j < s; ++j) {
        const std::size_t probe_id = b * s + j;
        for (std::size_t c = 0; c < d; ++c) probe[c] = pts[i * d + c] + deltas[probe_id * d + c];
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t id : cand) best = std::min(best, dist3(probe, 0, pts, id, d));
        g += sigmas[probe_id] * std::tanh(alpha / (best + beta));
      }
      acts[i] += std::tanh(std::abs(g));
    }
  }
  return acts;
}

inline op::DisplacementBank bank_from(ad::Tape& tape, std::span<const double> x, std::size_t& at,
                                      std::size_t s, std::size_t d_in, std::size_t d_out,
                                      std::vector<ad::Tensor>& leaves) {
  op::DisplacementBank bank;
  bank.s = s;
  bank.d_in = d_in;
  bank.d_out = d_out;
  bank.deltas = leaf(tape, x, at, {d_out, s, d_in}, leaves);
  bank.sigmas = leaf(tape, x, at, {d_out, s}, leaves);
  bank.rhos = leaf(tape, x, at, {d_out, d_in}, leaves);
  return bank;
}

} // namespace detail

/// Builds the full verification suite. Fixture clouds and contraction
/// weights are fixed by `seed`; the harness draws the free parameters.
inline std::vector<Target> standard_suite(std::uint64_t seed) {
  using namespace detail;
  std::vector<Target> suite;
  Rng fx = make_rng(seed, 0xf1c5);

  // ---- primitives ----
  {
    auto w = fixed_values(fx, 6);
    suite.push_back(make_target("add", 9, [w](ad::Tape& t, auto x, auto& lv) {
      std::size_t at = 0;
      auto a = leaf(t, x, at, {2, 3}, lv);
      auto b = leaf(t, x, at, {3}, lv);
      return contract(ad::add(a, b), w);
    }));
  }
  {
    auto w = fixed_values(fx, 6);
    suite.push_back(make_target("mul", 9, [w](ad::Tape& t, auto x, auto& lv) {
      std::size_t at = 0;
      auto a = leaf(t, x, at, {2, 3}, lv);
      auto b = leaf(t, x, at, {3}, lv);
      return contract(ad::mul(a, b), w);
    }));
  }
  {
    auto w = fixed_values(fx, 3);
    suite.push_back(make_target("matvec", 16, [w](ad::Tape& t, auto x, auto& lv) {
      std::size_t at = 0;
      auto m = leaf(t, x, at, {3, 4}, lv);
      auto v = leaf(t, x, at, {4}, lv);
      return contract(ad::matvec(m, v), w);
    }));
  }
  {
    auto w = fixed_values(fx, 2);
    auto margin = [](std::span<const double> x) {
      double m = std::numeric_limits<double>::infinity();
      for (std::size_t r = 0; r < 2; ++r) {
        double acc = 0;
        for (std::size_t c = 0; c < 4; ++c) acc += x[r * 4 + c] * x[r * 4 + c];
        m = std::min(m, std::sqrt(acc));
      }
      return m;
    };
    suite.push_back(make_target(
        "euclidean_norm", 8,
        [w](ad::Tape& t, auto x, auto& lv) {
          std::size_t at = 0;
          return contract(ad::euclidean_norm(leaf(t, x, at, {2, 4}, lv)), w);
        },
        margin));
  }
  {
    auto w = fixed_values(fx, 5);
    suite.push_back(make_target("tanh", 5, [w](ad::Tape& t, auto x, auto& lv) {
      std::size_t at = 0;
      return contract(ad::tanh(leaf(t, x, at, {5}, lv)), w);
    }));
  }
  {
    auto w = fixed_values(fx, 4);
    suite.push_back(make_target("reciprocal", 4, [w](ad::Tape& t, auto x, auto& lv) {
      std::size_t at = 0;
      auto a = leaf(t, x, at, {4}, lv);
      return contract(ad::reciprocal(ad::add_scalar(ad::mul(a, a), 0.05)), w);
    }));
  }
  {
    auto w = fixed_values(fx, 4);
    suite.push_back(make_target("log", 4, [w](ad::Tape& t, auto x, auto& lv) {
      std::size_t at = 0;
      auto a = leaf(t, x, at, {4}, lv);
      return contract(ad::log(ad::add_scalar(ad::mul(a, a), 0.05)), w);
    }));
  }
  suite.push_back(make_target("sum_full", 6, [](ad::Tape& t, auto x, auto& lv) {
    std::size_t at = 0;
    return ad::sum(leaf(t, x, at, {2, 3}, lv));
  }));
  {
    auto w = fixed_values(fx, 2);
    suite.push_back(make_target("sum_axis", 6, [w](ad::Tape& t, auto x, auto& lv) {
      std::size_t at = 0;
      return contract(ad::sum(leaf(t, x, at, {2, 3}, lv), 1), w);
    }));
  }
  {
    auto w = fixed_values(fx, 6);
    suite.push_back(make_target("gather_rows", 12, [w](ad::Tape& t, auto x, auto& lv) {
      std::size_t at = 0;
      auto a = leaf(t, x, at, {4, 3}, lv);
      return contract(ad::gather(a, std::vector<std::int64_t>{2, 0}), w);
    }));
  }
  {
    auto w = fixed_values(fx, 6);
    suite.push_back(make_target("gather_cols", 12, [w](ad::Tape& t, auto x, auto& lv) {
      std::size_t at = 0;
      auto a = leaf(t, x, at, {3, 4}, lv);
      return contract(ad::gather(a, std::vector<std::int64_t>{1, 3}, 1), w);
    }));
  }
  {
    auto w = fixed_values(fx, 3);
    auto margin = [](std::span<const double> x) {
      double m = std::numeric_limits<double>::infinity();
      for (std::size_t r = 0; r < 3; ++r)
        m = std::min(m, top_gap({x[r * 4], x[r * 4 + 1], x[r * 4 + 2], x[r * 4 + 3]}));
      return m;
    };
    suite.push_back(make_target(
        "select_min", 12,
        [w](ad::Tape& t, auto x, auto& lv) {
          std::size_t at = 0;
          return contract(ad::select_min_index(leaf(t, x, at, {3, 4}, lv)), w);
        },
        margin));
  }
  {
    auto w = fixed_values(fx, 2);
    auto margin = [](std::span<const double> x) {
      double m = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < 2; ++c)
        m = std::min(m, top_gap({-x[c], -x[2 + c], -x[4 + c]}));
      return m;
    };
    suite.push_back(make_target(
        "select_max", 6,
        [w](ad::Tape& t, auto x, auto& lv) {
          std::size_t at = 0;
          return contract(ad::select_max_index(leaf(t, x, at, {3, 2}, lv), 0), w);
        },
        margin));
  }

  // ---- operators ----
  {
    auto cloud = fixed_values(fx, 8 * 3);
    auto margin = [cloud](std::span<const double> x) {
      std::vector<double> probe{x[0] + x[3], x[1] + x[4], x[2] + x[5]};
      std::vector<double> dists;
      for (std::size_t i = 0; i < 8; ++i) dists.push_back(dist3(probe, 0, cloud, i, 3));
      return top_gap(std::move(dists));
    };
    suite.push_back(make_target(
        "closest_distance", 6,
        [cloud](ad::Tape& t, auto x, auto& lv) {
          std::size_t at = 0;
          auto anchor = leaf(t, x, at, {3}, lv);
          auto delta = leaf(t, x, at, {3}, lv);
          auto cands = op::FeatureSet::from(t.constant({8, 3}, cloud));
          KnnIndex index(cloud, 3);
          return op::closest_distance(anchor, delta, cands, index, 0).distance;
        },
        margin));
  }
  {
    // kernel sum of one channel: free deltas (s=3) and sigmas over a fixed
    // anchor and candidate cloud
    auto cloud = fixed_values(fx, 6 * 3);
    auto anchor_v = fixed_values(fx, 3);
    auto margin = [cloud, anchor_v](std::span<const double> x) {
      double m = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < 3; ++j) {
        std::vector<double> probe{anchor_v[0] + x[j * 3], anchor_v[1] + x[j * 3 + 1],
                                  anchor_v[2] + x[j * 3 + 2]};
        std::vector<double> dists;
        for (std::size_t i = 0; i < 6; ++i) dists.push_back(dist3(probe, 0, cloud, i, 3));
        m = std::min(m, top_gap(std::move(dists)));
      }
      return m;
    };
    suite.push_back(make_target(
        "kernel_aggregate", 12,
        [cloud, anchor_v](ad::Tape& t, auto x, auto& lv) {
          std::size_t at = 0;
          auto deltas = leaf(t, x, at, {3, 3}, lv);
          auto sigmas = leaf(t, x, at, {3}, lv);
          auto anchor = t.constant({3}, anchor_v);
          auto cands = op::FeatureSet::from(t.constant({6, 3}, cloud));
          KnnIndex index(cloud, 3);
          return op::g_aggregate(anchor, deltas, sigmas, 1.0, 1e-3, cands, index, 0);
        },
        margin));
  }

  constexpr std::size_t kS = 2, kDin = 3, kDout = 2;
  constexpr std::size_t kBankDim = kDout * kS * kDin + kDout * kS + kDout * kDin;
  const auto extraction_target = [&fx](std::string name, std::size_t n_pts, std::size_t k,
                                       auto post, std::size_t out_rows) {
    auto cloud = fixed_values(fx, n_pts * kDin);
    auto w = fixed_values(fx, out_rows * kDout);
    auto margin = [cloud, n_pts, k](std::span<const double> x) {
      return extraction_margin(cloud, n_pts, kDin, x.subspan(0, kDout * kS * kDin),
                               kDout * kS, k);
    };
    return make_target(
        name, kBankDim,
        [cloud, n_pts, k, post, w](ad::Tape& t, auto x, auto& lv) {
          std::size_t at = 0;
          auto bank = bank_from(t, x, at, kS, kDin, kDout, lv);
          auto fin = op::FeatureSet::from(t.constant({n_pts, kDin}, cloud));
          return contract(post(op::feature_extraction(fin, bank, k)), w);
        },
        margin);
  };
  suite.push_back(extraction_target(
      "feature_extraction", 5, 0,
      [](op::Extraction ex) { return ex.features.vectors; }, 5));
  suite.push_back(extraction_target(
      "feature_extraction_knn", 6, 3,
      [](op::Extraction ex) { return ex.features.vectors; }, 6));
  {
    // gradient w.r.t. the input cloud itself, bank fixed
    constexpr std::size_t n_pts = 5, k = 3;
    auto deltas_v = fixed_values(fx, kDout * kS * kDin, -0.5, 0.5);
    auto sigmas_v = fixed_values(fx, kDout * kS);
    auto rhos_v = fixed_values(fx, kDout * kDin);
    auto w = fixed_values(fx, n_pts * kDout);
    auto margin = [deltas_v](std::span<const double> x) {
      return std::min(extraction_margin(x, n_pts, kDin, deltas_v, kDout * kS, k),
                      candidate_set_margin(x, n_pts, kDin, k));
    };
    suite.push_back(make_target(
        "feature_extraction_input", n_pts * kDin,
        [=](ad::Tape& t, auto x, auto& lv) {
          std::size_t at = 0;
          auto pts = leaf(t, x, at, {n_pts, kDin}, lv);
          op::DisplacementBank bank;
          bank.s = kS;
          bank.d_in = kDin;
          bank.d_out = kDout;
          bank.deltas = t.constant({kDout, kS, kDin}, deltas_v);
          bank.sigmas = t.constant({kDout, kS}, sigmas_v);
          bank.rhos = t.constant({kDout, kDin}, rhos_v);
          auto fin = op::FeatureSet::from(pts);
          return contract(op::feature_extraction(fin, bank, k).features.vectors, w);
        },
        margin));
  }
  {
    // extraction followed by activation-ranked pooling, tau = 2
    constexpr std::size_t n_pts = 6, tau = 2;
    auto cloud = fixed_values(fx, n_pts * kDin);
    auto w = fixed_values(fx, (n_pts / tau) * kDout);
    auto margin = [cloud](std::span<const double> x) {
      const auto deltas = take(x, 0, kDout * kS * kDin);
      const auto sigmas = take(x, kDout * kS * kDin, kDout * kS);
      const double ex = extraction_margin(cloud, n_pts, kDin, deltas, kDout * kS, 0);
      const double rank = pooling_rank_margin(
          plain_activations(cloud, n_pts, kDin, deltas, sigmas, kDout, kS, 1.0, 1e-3, 0), tau);
      return std::min(ex, rank);
    };
    suite.push_back(make_target(
        "neighbor_pooling", kBankDim,
        [cloud, w](ad::Tape& t, auto x, auto& lv) {
          std::size_t at = 0;
          auto bank = bank_from(t, x, at, kS, kDin, kDout, lv);
          auto fin = op::FeatureSet::from(t.constant({n_pts, kDin}, cloud));
          op::Extraction ex = op::feature_extraction(fin, bank, 0);
          auto pooled = op::neighbor_pooling(ex.features, op::activations(ex), tau);
          return contract(pooled.vectors, w);
        },
        margin));
  }
  {
    auto w = fixed_values(fx, 3);
    auto margin = [](std::span<const double> x) {
      double m = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < 3; ++c)
        m = std::min(m, top_gap({-x[c], -x[3 + c], -x[6 + c], -x[9 + c]}));
      return m;
    };
    suite.push_back(make_target(
        "latent_max_pool", 12,
        [w](ad::Tape& t, auto x, auto& lv) {
          std::size_t at = 0;
          auto fin = op::FeatureSet::from(leaf(t, x, at, {4, 3}, lv));
          return contract(op::latent_max_pool(fin).vectors, w);
        },
        margin));
  }
  {
    // two-bank upsampling, parameters free
    constexpr std::size_t n_pts = 4;
    auto cloud = fixed_values(fx, n_pts * kDin);
    auto w = fixed_values(fx, 2 * n_pts * kDout);
    auto margin = [cloud](std::span<const double> x) {
      return std::min(
          extraction_margin(cloud, n_pts, kDin, x.subspan(0, kDout * kS * kDin), kDout * kS, 0),
          extraction_margin(cloud, n_pts, kDin, x.subspan(kBankDim, kDout * kS * kDin),
                            kDout * kS, 0));
    };
    suite.push_back(make_target(
        "upsampling", 2 * kBankDim,
        [cloud, w](ad::Tape& t, auto x, auto& lv) {
          std::size_t at = 0;
          op::UpBank up;
          up.banks.push_back(bank_from(t, x, at, kS, kDin, kDout, lv));
          up.banks.push_back(bank_from(t, x, at, kS, kDin, kDout, lv));
          auto fin = op::FeatureSet::from(t.constant({n_pts, kDin}, cloud));
          return contract(op::upsampling(fin, up, 0).vectors, w);
        },
        margin));
  }

  // ---- losses ----
  {
    auto gt = fixed_values(fx, 6 * 3);
    auto margin = [gt](std::span<const double> x) {
      return correspondence_margin(x, 5, gt, 6, 3);
    };
    suite.push_back(make_target(
        "loss_out_to_gt", 15,
        [gt](ad::Tape& t, auto x, auto& lv) {
          std::size_t at = 0;
          auto out = leaf(t, x, at, {5, 3}, lv);
          return loss::directed_closest_loss(out, t.constant({6, 3}, gt)).value;
        },
        margin));
  }
  {
    auto gt = fixed_values(fx, 6 * 3);
    auto margin = [gt](std::span<const double> x) {
      return correspondence_margin(gt, 6, x, 5, 3);
    };
    suite.push_back(make_target(
        "loss_gt_to_out", 15,
        [gt](ad::Tape& t, auto x, auto& lv) {
          std::size_t at = 0;
          auto out = leaf(t, x, at, {5, 3}, lv);
          return loss::directed_closest_loss(t.constant({6, 3}, gt), out).value;
        },
        margin));
  }
  {
    auto input = fixed_values(fx, 3 * 3);
    auto margin = [input](std::span<const double> x) {
      return correspondence_margin(input, 3, x, 6, 3);
    };
    suite.push_back(make_target(
        "loss_order", 18,
        [input](ad::Tape& t, auto x, auto& lv) {
          std::size_t at = 0;
          auto out = leaf(t, x, at, {6, 3}, lv);
          return loss::order_loss(t.constant({3, 3}, input), out);
        },
        margin));
  }
  {
    // gradient w.r.t. label logits; geometry fixed so the correspondence and
    // the clamp mask cannot move
    constexpr std::size_t n_pred = 4, n_gt = 5, classes = 2;
    auto pred_pts = fixed_values(fx, n_pred * 3);
    auto gt_pts = fixed_values(fx, n_gt * 3);
    std::vector<double> gt_onehot(n_gt * classes, 0.0);
    for (std::size_t i = 0; i < n_gt; ++i)
      gt_onehot[i * classes + (i % classes)] = 1.0;
    suite.push_back(make_target(
        "loss_semantic", n_pred * classes, [=](ad::Tape& t, auto x, auto& lv) {
          std::size_t at = 0;
          auto logits = leaf(t, x, at, {n_pred, classes}, lv);
          loss::LabeledSet pred{t.constant({n_pred, 3}, pred_pts),
                                loss::label_probabilities(logits)};
          loss::LabeledSet gt{t.constant({n_gt, 3}, gt_pts),
                              t.constant({n_gt, classes}, gt_onehot)};
          auto corr = loss::detail::nearest_correspondence(pred.points, gt.points);
          return loss::semantic_loss(pred, gt, corr, 0.7, 0.55).value;
        }));
  }

  return suite;
}

} // namespace displace::gradcheck
