#pragma once

// Straight-line reference implementations used to pin down expected values.
// Everything here is deliberately naive: exhaustive scans, per-element loops,
// no shared code with the library under test.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <vector>

namespace oracle {

// Row-major matrix of points/features.
struct Mat {
  std::size_t rows = 0, cols = 0;
  std::vector<double> v;

  double at(std::size_t r, std::size_t c) const { return v[r * cols + c]; }
  double& at(std::size_t r, std::size_t c) { return v[r * cols + c]; }
};

inline double dist(const Mat& a, std::size_t i, const Mat& b, std::size_t j) {
  double acc = 0;
  for (std::size_t c = 0; c < a.cols; ++c) {
    const double d = a.at(i, c) - b.at(j, c);
    acc += d * d;
  }
  return std::sqrt(acc);
}

inline double dist_vec(const std::vector<double>& p, const Mat& b, std::size_t j) {
  double acc = 0;
  for (std::size_t c = 0; c < b.cols; ++c) {
    const double d = p[c] - b.at(j, c);
    acc += d * d;
  }
  return std::sqrt(acc);
}

// k nearest row ids of `anchor` within `pts`, ordered by (distance, id),
// then returned sorted ascending by id; k = 0 means all rows.
inline std::vector<std::size_t> candidate_rows(const Mat& pts, std::size_t anchor,
                                               std::size_t k) {
  std::vector<std::size_t> ids(pts.rows);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  if (k == 0 || k >= pts.rows) return ids;
  std::sort(ids.begin(), ids.end(), [&](std::size_t a, std::size_t b) {
    const double da = dist(pts, anchor, pts, a), db = dist(pts, anchor, pts, b);
    return da < db || (da == db && a < b);
  });
  ids.resize(k);
  std::sort(ids.begin(), ids.end());
  return ids;
}

// Parameters of one displacement bank, flat row-major.
struct Bank {
  std::size_t s = 0, d_in = 0, d_out = 0;
  std::vector<double> deltas; // d_out × s × d_in
  std::vector<double> sigmas; // d_out × s
  std::vector<double> rhos;   // d_out × d_in
  double alpha = 1.0, beta = 1e-3;
};

// Per-anchor feature extraction: out[i][b] = g + h with
// g = sum_j sigma[b][j] * tanh(alpha / (min_c |f_i + delta[b][j] - f_c| + beta))
// h = sum_c rho[b][c] * f_i[c]; g is also returned for activation checks.
struct ExtractionRef {
  Mat features; // rows × d_out
  Mat g;        // rows × d_out
};

inline ExtractionRef feature_extraction(const Mat& fin, const Bank& bank, std::size_t k) {
  ExtractionRef out;
  out.features = {fin.rows, bank.d_out, std::vector<double>(fin.rows * bank.d_out)};
  out.g = {fin.rows, bank.d_out, std::vector<double>(fin.rows * bank.d_out)};
  std::vector<double> probe(bank.d_in);
  for (std::size_t i = 0; i < fin.rows; ++i) {
    const auto cands = candidate_rows(fin, i, k);
    for (std::size_t b = 0; b < bank.d_out; ++b) {
      double g = 0;
      for (std::size_t j = 0; j < bank.s; ++j) {
        for (std::size_t c = 0; c < bank.d_in; ++c)
          probe[c] = fin.at(i, c) + bank.deltas[(b * bank.s + j) * bank.d_in + c];
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t id : cands) best = std::min(best, dist_vec(probe, fin, id));
        g += bank.sigmas[b * bank.s + j] * std::tanh(bank.alpha / (best + bank.beta));
      }
      double h = 0;
      for (std::size_t c = 0; c < bank.d_in; ++c) h += bank.rhos[b * bank.d_in + c] * fin.at(i, c);
      out.g.at(i, b) = g;
      out.features.at(i, b) = g + h;
    }
  }
  return out;
}

inline std::vector<double> activations(const Mat& g) {
  std::vector<double> acts(g.rows, 0.0);
  for (std::size_t i = 0; i < g.rows; ++i)
    for (std::size_t b = 0; b < g.cols; ++b) acts[i] += std::tanh(std::abs(g.at(i, b)));
  return acts;
}

// Keep the floor(rows/tau) rows with highest activation (ties: lower id),
// original order preserved.
inline Mat neighbor_pooling(const Mat& fout, const std::vector<double>& acts, std::size_t tau) {
  const std::size_t keep = fout.rows / tau;
  std::vector<std::size_t> ids(fout.rows);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  std::sort(ids.begin(), ids.end(), [&](std::size_t a, std::size_t b) {
    return acts[a] > acts[b] || (acts[a] == acts[b] && a < b);
  });
  ids.resize(keep);
  std::sort(ids.begin(), ids.end());
  Mat out{keep, fout.cols, {}};
  for (std::size_t id : ids)
    for (std::size_t c = 0; c < fout.cols; ++c) out.v.push_back(fout.at(id, c));
  return out;
}

inline Mat latent_max_pool(const Mat& fin) {
  Mat out{1, fin.cols, std::vector<double>(fin.cols, -std::numeric_limits<double>::infinity())};
  for (std::size_t i = 0; i < fin.rows; ++i)
    for (std::size_t c = 0; c < fin.cols; ++c) out.v[c] = std::max(out.v[c], fin.at(i, c));
  return out;
}

inline Mat upsampling(const Mat& fin, const std::vector<Bank>& banks, std::size_t k) {
  Mat out{0, banks.front().d_out, {}};
  for (const Bank& bank : banks) {
    const Mat block = feature_extraction(fin, bank, k).features;
    out.v.insert(out.v.end(), block.v.begin(), block.v.end());
    out.rows += block.rows;
  }
  return out;
}

// Sum over source rows of the distance to the nearest target row.
inline double directed_loss(const Mat& source, const Mat& target) {
  double acc = 0;
  for (std::size_t i = 0; i < source.rows; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < target.rows; ++j) best = std::min(best, dist(source, i, target, j));
    acc += best;
  }
  return acc;
}

// Sum over input rows whose nearest output row (ties: lowest id) falls in the
// leading |input| block.
inline double order_loss(const Mat& input, const Mat& output) {
  double acc = 0;
  for (std::size_t i = 0; i < input.rows; ++i) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_id = 0;
    for (std::size_t j = 0; j < output.rows; ++j) {
      const double d = dist(input, i, output, j);
      if (d < best) {
        best = d;
        best_id = j;
      }
    }
    if (best_id < input.rows) acc += best;
  }
  return acc;
}

// Exhaustive minimum-cost bijection via permutation enumeration (n <= 8).
inline double optimal_assignment_cost(const Mat& source, const Mat& target) {
  const std::size_t n = source.rows;
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  double best = std::numeric_limits<double>::infinity();
  do {
    double acc = 0;
    for (std::size_t i = 0; i < n; ++i) acc += dist(source, i, target, perm[i]);
    best = std::min(best, acc);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

inline double chamfer_l2(const Mat& pred, const Mat& gt) {
  return 0.5 * (directed_loss(pred, gt) / static_cast<double>(pred.rows) +
                directed_loss(gt, pred) / static_cast<double>(gt.rows));
}

inline double chamfer_l1(const Mat& pred, const Mat& gt) {
  auto directed = [](const Mat& from, const Mat& to) {
    double acc = 0;
    for (std::size_t i = 0; i < from.rows; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < to.rows; ++j) {
        double d = 0;
        for (std::size_t c = 0; c < from.cols; ++c) d += std::abs(from.at(i, c) - to.at(j, c));
        best = std::min(best, d);
      }
      acc += best;
    }
    return acc / static_cast<double>(from.rows);
  };
  return 0.5 * (directed(pred, gt) + directed(gt, pred));
}

inline double fscore(const Mat& pred, const Mat& gt, double threshold) {
  std::size_t hit_p = 0, hit_g = 0;
  for (std::size_t i = 0; i < pred.rows; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < gt.rows; ++j) best = std::min(best, dist(pred, i, gt, j));
    if (best <= threshold) ++hit_p;
  }
  for (std::size_t j = 0; j < gt.rows; ++j) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < pred.rows; ++i) best = std::min(best, dist(gt, j, pred, i));
    if (best <= threshold) ++hit_g;
  }
  const double precision = static_cast<double>(hit_p) / static_cast<double>(pred.rows);
  const double recall = static_cast<double>(hit_g) / static_cast<double>(gt.rows);
  if (precision + recall == 0) return 0;
  return 2 * precision * recall / (precision + recall);
}

} // namespace oracle
