#pragma once

// Differentiable set operators over feature collections: displacement-probe
// feature extraction, activation-ranked neighbor pooling, block-replicated
// up-sampling, and the columnwise latent max-pool. All are pure functions of
// (inputs, parameter banks); gradients flow through the frozen-index
// subgradient of the closest-point term.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "displace/errors.hpp"
#include "displace/knn.hpp"
#include "displace/tensor.hpp"

namespace displace::op {

/// A set of feature vectors as a (count, dim) tensor. Sets are never empty
/// inside a layer application.
struct FeatureSet {
  ad::Tensor vectors;

  std::size_t count() const { return vectors.shape()[0]; }
  std::size_t dim() const { return vectors.shape()[1]; }

  static FeatureSet from(ad::Tensor t) {
    if (t.rank() != 2)
      throw ShapeError("FeatureSet: expected a (count, dim) tensor, got rank " +
                       std::to_string(t.rank()));
    if (t.shape()[0] == 0 || t.shape()[1] == 0)
      throw ContractError("FeatureSet: set must hold at least one nonempty vector");
    return {std::move(t)};
  }
};

/// Trainable state of one feature-extraction operator: per output channel, s
/// probe displacements with weights, plus a projection row.
struct DisplacementBank {
  std::size_t s = 0;     // displacements per channel
  std::size_t d_in = 0;  // input feature dimension
  std::size_t d_out = 0; // output channels
  ad::Tensor deltas;     // (d_out, s, d_in)
  ad::Tensor sigmas;     // (d_out, s)
  ad::Tensor rhos;       // (d_out, d_in)
  double alpha = 1.0;
  double beta = 1e-3;

  void validate() const {
    if (s == 0 || d_in == 0 || d_out == 0)
      throw ContractError("DisplacementBank: s, d_in, d_out must be positive");
    if (beta <= 0) throw ContractError("DisplacementBank: beta must be positive");
    if (deltas.shape() != ad::Shape{d_out, s, d_in})
      throw ShapeError("DisplacementBank: deltas shape mismatch");
    if (sigmas.shape() != ad::Shape{d_out, s})
      throw ShapeError("DisplacementBank: sigmas shape mismatch");
    if (rhos.shape() != ad::Shape{d_out, d_in})
      throw ShapeError("DisplacementBank: rhos shape mismatch");
  }
};

/// N_up independent banks applied side by side; all share d_in and d_out.
struct UpBank {
  std::vector<DisplacementBank> banks;

  std::size_t n_up() const { return banks.size(); }

  void validate() const {
    if (banks.empty()) throw ContractError("UpBank: needs at least one bank");
    for (const auto& b : banks) {
      b.validate();
      if (b.d_in != banks[0].d_in || b.d_out != banks[0].d_out)
        throw ContractError("UpBank: banks must share input and output dimensions");
    }
  }
};

namespace detail {

// Candidate ids for one anchor: k nearest of the anchor itself, or every id in
// exact mode (k == 0 or k >= count). Ascending id order makes the positional
// argmin tie-break coincide with the original-id tie-break.
inline std::vector<std::int64_t> candidate_ids(std::span<const double> anchor,
                                               const KnnIndex* index, std::size_t count,
                                               std::size_t k) {
  std::vector<std::int64_t> ids;
  if (k == 0 || k >= count || index == nullptr) {
    ids.resize(count);
    std::iota(ids.begin(), ids.end(), std::int64_t{0});
  } else {
    auto near = index->query(anchor, k);
    ids.assign(near.begin(), near.end());
    std::sort(ids.begin(), ids.end());
  }
  return ids;
}

// Per-anchor displaced-probe distances: for m displacement rows, the minimum
// distance from (anchor + delta_j) to any candidate. Returns an (m) tensor
// carrying frozen per-row argmin positions into `ids`.
inline ad::Tensor probe_distances(const ad::Tensor& anchor_vec, const ad::Tensor& deltas_flat,
                                  const FeatureSet& candidates,
                                  const std::vector<std::int64_t>& ids) {
  const std::size_t m = deltas_flat.shape()[0];
  const std::size_t d = deltas_flat.shape()[1];
  const std::size_t kc = ids.size();
  ad::Tensor cand = ad::gather(candidates.vectors, ids);              // (kc, d)
  ad::Tensor displaced = ad::add(deltas_flat, anchor_vec);            // (m, d)
  ad::Tensor diff = ad::add(displaced.reshape({m, 1, d}),
                            ad::neg(cand).reshape({1, kc, d}));       // (m, kc, d)
  ad::Tensor dist = ad::euclidean_norm(diff);                         // (m, kc)
  return ad::select_min_index(dist);                                  // (m)
}

} // namespace detail

struct ClosestResult {
  ad::Tensor distance;   // scalar
  std::int64_t selected; // original candidate id of the minimizer
};

/// Minimum distance from (anchor + delta) to the candidate set, restricted to
/// the k nearest candidates of the anchor (all of them in exact mode). The
/// minimizing id is frozen for the backward pass.
inline ClosestResult closest_distance(const ad::Tensor& anchor, const ad::Tensor& delta,
                                      const FeatureSet& candidates, const KnnIndex& index,
                                      std::size_t k) {
  if (anchor.rank() != 1 || delta.rank() != 1 || anchor.shape()[0] != candidates.dim() ||
      delta.shape()[0] != candidates.dim())
    throw ShapeError("closest_distance: anchor/delta dimension does not match candidate set");
  if (index.size() != candidates.count())
    throw ContractError("closest_distance: index was not built over the candidate set");

  const std::size_t d = candidates.dim();
  auto ids = detail::candidate_ids(std::span(anchor.values()), &index, candidates.count(), k);
  ad::Tensor dmin =
      detail::probe_distances(anchor, delta.reshape({1, d}), candidates, ids); // (1)
  return {dmin.reshape({}), ids[static_cast<std::size_t>(dmin.indices()[0])]};
}

/// One channel's aggregated response: sum_i sigma_i * tanh(alpha / (d_i + beta))
/// with d_i the closest-point distance of probe i.
inline ad::Tensor g_aggregate(const ad::Tensor& anchor, const ad::Tensor& deltas,
                              const ad::Tensor& sigmas, double alpha, double beta,
                              const FeatureSet& candidates, const KnnIndex& index,
                              std::size_t k) {
  if (beta <= 0) throw ContractError("g_aggregate: beta must be positive");
  if (deltas.rank() != 2 || deltas.shape()[1] != candidates.dim())
    throw ShapeError("g_aggregate: deltas must be (s, dim) matching the candidate set");
  if (sigmas.size() != deltas.shape()[0])
    throw ShapeError("g_aggregate: sigma count does not match displacement count");
  if (index.size() != candidates.count())
    throw ContractError("g_aggregate: index was not built over the candidate set");

  auto ids = detail::candidate_ids(std::span(anchor.values()), &index, candidates.count(), k);
  ad::Tensor dmin = detail::probe_distances(anchor, deltas, candidates, ids); // (s)
  ad::Tensor kernel =
      ad::tanh(ad::mul_scalar(ad::reciprocal(ad::add_scalar(dmin, beta)), alpha));
  return ad::sum(ad::mul(kernel, sigmas.reshape({sigmas.size()})));
}

/// Feature extraction output plus the raw per-channel g values needed by the
/// activation ranking (cached off-tape).
struct Extraction {
  FeatureSet features;         // (count, d_out)
  std::vector<double> g_cache; // count × d_out, row-major
};

/// Applies one displacement bank to every anchor: entry (a, b) is
/// g_b(f_a) + rho_b · f_a. Candidates are the input set itself, restricted per
/// anchor to the anchor's k nearest neighbors unless running in exact mode.
inline Extraction feature_extraction(const FeatureSet& fin, const DisplacementBank& bank,
                                     std::size_t k) {
  bank.validate();
  if (fin.dim() != bank.d_in)
    throw ShapeError("feature_extraction: input dim " + std::to_string(fin.dim()) +
                     " does not match bank d_in " + std::to_string(bank.d_in));

  const std::size_t n = fin.count();
  const std::size_t d = bank.d_in;
  const std::size_t m = bank.d_out * bank.s;
  const bool restricted = k != 0 && k < n;

  ad::Tensor deltas_flat = bank.deltas.reshape({m, d});
  // displaced[a, j] = f_a + delta_j, for all anchors and probes at once
  ad::Tensor displaced = ad::add(fin.vectors.reshape({n, std::size_t{1}, d}), deltas_flat);

  ad::Tensor dist; // (n, m, kc) distances to each anchor's candidates
  if (restricted) {
    KnnIndex index(fin.vectors.values(), d);
    const std::size_t kc = k;
    const auto& host = fin.vectors.values();
    std::vector<std::int64_t> flat_ids;
    flat_ids.reserve(n * kc);
    for (std::size_t a = 0; a < n; ++a) {
      auto ids = detail::candidate_ids(std::span(host).subspan(a * d, d), &index, n, k);
      flat_ids.insert(flat_ids.end(), ids.begin(), ids.end());
    }
    ad::Tensor cand = ad::gather(fin.vectors, flat_ids); // (n*kc, d)
    ad::Tensor diff = ad::add(displaced.reshape({n, m, std::size_t{1}, d}),
                              ad::neg(cand).reshape({n, std::size_t{1}, kc, d}));
    dist = ad::euclidean_norm(diff);
  } else {
    ad::Tensor diff = ad::add(displaced.reshape({n, m, std::size_t{1}, d}),
                              ad::neg(fin.vectors).reshape({std::size_t{1}, std::size_t{1}, n, d}));
    dist = ad::euclidean_norm(diff);
  }

  ad::Tensor dmin = ad::select_min_index(dist); // (n, m), frozen per-probe argmin
  ad::Tensor kernel =
      ad::tanh(ad::mul_scalar(ad::reciprocal(ad::add_scalar(dmin, bank.beta)), bank.alpha));
  ad::Tensor g = ad::sum(ad::mul(kernel, bank.sigmas.reshape({m})).reshape({n, bank.d_out, bank.s}),
                         2);                                           // (n, d_out)
  ad::Tensor h = ad::sum(ad::mul(fin.vectors.reshape({n, std::size_t{1}, d}), bank.rhos), 2);
  ad::Tensor out = ad::add(g, h);

  return {FeatureSet::from(std::move(out)), g.values()};
}

/// Ranking score of one output row from its cached g values: sum_b tanh|g_b|.
inline double activation(std::span<const double> g_row) {
  double acc = 0;
  for (double g : g_row) acc += std::tanh(std::abs(g));
  return acc;
}

/// Per-row activations for a whole extraction.
inline std::vector<double> activations(const Extraction& ex) {
  const std::size_t n = ex.features.count();
  const std::size_t d = ex.features.dim();
  if (ex.g_cache.size() != n * d)
    throw ContractError("activations: extraction carries no matching g cache");
  std::vector<double> out(n);
  for (std::size_t a = 0; a < n; ++a)
    out[a] = activation(std::span(ex.g_cache).subspan(a * d, d));
  return out;
}

/// Keeps the floor(count / tau) rows with the highest activations (ties favor
/// the lower row id), in their original relative order and unmodified, so
/// gradient flows only into retained rows.
inline FeatureSet neighbor_pooling(const FeatureSet& fout, std::span<const double> acts,
                                   std::size_t tau) {
  if (tau == 0) throw ContractError("neighbor_pooling: tau must be >= 1");
  if (acts.size() != fout.count())
    throw ContractError("neighbor_pooling: activation count does not match the set");
  if (fout.count() < tau)
    throw ContractError("neighbor_pooling: cannot pool " + std::to_string(fout.count()) +
                        " vectors with tau " + std::to_string(tau));

  const std::size_t keep = fout.count() / tau;
  std::vector<std::int64_t> order(fout.count());
  std::iota(order.begin(), order.end(), std::int64_t{0});
  std::partial_sort(order.begin(), order.begin() + keep, order.end(),
                    [&](std::int64_t a, std::int64_t b) {
                      return acts[a] > acts[b] || (acts[a] == acts[b] && a < b);
                    });
  order.resize(keep);
  std::sort(order.begin(), order.end());
  return FeatureSet::from(ad::gather(fout.vectors, order));
}

/// Columnwise maximum over the set: a single vector whose element b is
/// max_a (a, b), gradient routed to the argmax row (lowest id on ties).
inline FeatureSet latent_max_pool(const FeatureSet& fin) {
  ad::Tensor pooled = ad::select_max_index(fin.vectors, 0); // (dim)
  return FeatureSet::from(pooled.reshape({std::size_t{1}, fin.dim()}));
}

/// Applies n_up independent banks to the same input and stacks the results
/// block-wise: rows [u*count, (u+1)*count) come from bank u.
inline FeatureSet upsampling(const FeatureSet& fin, const UpBank& up, std::size_t k) {
  up.validate();
  if (fin.dim() != up.banks[0].d_in)
    throw ShapeError("upsampling: input dim does not match bank d_in");

  std::vector<ad::Tensor> blocks;
  blocks.reserve(up.n_up());
  for (const auto& bank : up.banks)
    blocks.push_back(feature_extraction(fin, bank, k).features.vectors);

  const std::size_t n = fin.count();
  const std::size_t d_out = up.banks[0].d_out;
  ad::Tensor stacked = ad::stack(blocks); // (n_up, n, d_out)
  return FeatureSet::from(stacked.reshape({up.n_up() * n, d_out}));
}

} // namespace displace::op
