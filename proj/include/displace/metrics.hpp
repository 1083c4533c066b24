#pragma once

// Evaluation-side measurements: symmetric Chamfer distance under a selectable
// point norm, F-Score at an absolute distance threshold, and voxel-grid
// per-class IoU at the (x, floor(0.6x), x) resolution rule.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "displace/errors.hpp"
#include "displace/geometry.hpp"
#include "displace/knn.hpp"

namespace displace::metric {

enum class Norm { L1, L2 };

namespace detail {

inline double nearest_distance(const Vec3& p, const Cloud& cloud, const KnnIndex* l2_index,
                               Norm norm) {
  if (norm == Norm::L2) return l2_index->nearest_distance(std::span<const double>(p));
  double best = std::numeric_limits<double>::infinity();
  for (const auto& q : cloud) best = std::min(best, manhattan_distance(p, q));
  return best;
}

inline double directed_mean(const Cloud& from, const Cloud& to, const KnnIndex* to_index,
                            Norm norm) {
  double acc = 0;
  for (const auto& p : from) acc += nearest_distance(p, to, to_index, norm);
  return acc / static_cast<double>(from.size());
}

} // namespace detail

/// Symmetric Chamfer distance: the two directed mean nearest-neighbor
/// distances averaged. Raw value; report-time scale factors are separate.
inline double chamfer(const Cloud& pred, const Cloud& gt, Norm norm) {
  if (pred.empty() || gt.empty()) throw ContractError("chamfer: point clouds must be nonempty");
  std::optional<KnnIndex> pred_index, gt_index;
  if (norm == Norm::L2) {
    pred_index.emplace(flatten(pred), 3);
    gt_index.emplace(flatten(gt), 3);
  }
  const double fwd = detail::directed_mean(pred, gt, gt_index ? &*gt_index : nullptr, norm);
  const double bwd = detail::directed_mean(gt, pred, pred_index ? &*pred_index : nullptr, norm);
  return 0.5 * (fwd + bwd);
}

/// Benchmark table conventions for presenting raw Chamfer values.
enum class ReportScale { DenseBenchmark, SceneBenchmark };

inline double chamfer_report_factor(Norm norm, ReportScale scale) {
  if (norm == Norm::L1) return 1e3;
  return scale == ReportScale::DenseBenchmark ? 1e4 : 1e3;
}

/// Harmonic mean of precision and recall at an absolute distance threshold
/// (boundary inclusive); 0 when both fractions are 0.
inline double fscore(const Cloud& pred, const Cloud& gt, double threshold = 0.01) {
  if (pred.empty() || gt.empty()) throw ContractError("fscore: point clouds must be nonempty");
  if (threshold <= 0) throw ContractError("fscore: threshold must be positive");
  KnnIndex pred_index(flatten(pred), 3), gt_index(flatten(gt), 3);
  std::size_t hit_pred = 0, hit_gt = 0;
  for (const auto& p : pred)
    if (gt_index.nearest_distance(std::span<const double>(p)) <= threshold) ++hit_pred;
  for (const auto& q : gt)
    if (pred_index.nearest_distance(std::span<const double>(q)) <= threshold) ++hit_gt;
  const double precision = static_cast<double>(hit_pred) / static_cast<double>(pred.size());
  const double recall = static_cast<double>(hit_gt) / static_cast<double>(gt.size());
  if (precision + recall == 0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

/// Dense occupancy/class grid. Cells hold -1 when empty, a class id otherwise.
struct VoxelGrid {
  std::size_t nx = 0, ny = 0, nz = 0;
  Vec3 origin{};
  Vec3 cell_size{};
  std::vector<int> cells;         // nx*ny*nz, x-major then y then z
  std::size_t skipped_points = 0; // points outside the bounds, counted not placed

  std::size_t index(std::size_t ix, std::size_t iy, std::size_t iz) const {
    return (ix * ny + iy) * nz + iz;
  }
  bool same_resolution(const VoxelGrid& other) const {
    return nx == other.nx && ny == other.ny && nz == other.nz;
  }
};

/// Buckets points into an (x, floor(0.6x), x) grid over the given bounds.
/// Cell class is the majority label (ties to the lowest class id); unlabeled
/// clouds occupy with class 0. Points outside the bounds are counted, not
/// placed; the top boundary folds into the last cell.
inline VoxelGrid voxelize(const Cloud& points, const std::vector<int>& labels, std::size_t x,
                          const Aabb& bounds) {
  if (x < 2) throw ContractError("voxelize: resolution too small for the x*0.6x*x rule");
  const Vec3 ext = bounds.extent();
  if (ext[0] <= 0 || ext[1] <= 0 || ext[2] <= 0)
    throw ContractError("voxelize: bounds are degenerate");
  if (!labels.empty() && labels.size() != points.size())
    throw ContractError("voxelize: label count does not match point count");

  VoxelGrid grid;
  grid.nx = x;
  grid.ny = static_cast<std::size_t>(std::floor(0.6 * static_cast<double>(x)));
  grid.nz = x;
  grid.origin = bounds.min;
  grid.cell_size = {ext[0] / static_cast<double>(grid.nx), ext[1] / static_cast<double>(grid.ny),
                    ext[2] / static_cast<double>(grid.nz)};
  grid.cells.assign(grid.nx * grid.ny * grid.nz, -1);

  const std::size_t dims[3] = {grid.nx, grid.ny, grid.nz};
  std::vector<std::pair<std::size_t, int>> hits; // (cell, class)
  hits.reserve(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    std::size_t idx3[3];
    bool inside = true;
    for (int a = 0; a < 3; ++a) {
      const double rel = (points[i][a] - grid.origin[a]) / grid.cell_size[a];
      if (rel < 0 || points[i][a] > bounds.max[a]) {
        inside = false;
        break;
      }
      idx3[a] = std::min(static_cast<std::size_t>(rel), dims[a] - 1);
    }
    if (!inside) {
      ++grid.skipped_points;
      continue;
    }
    hits.emplace_back(grid.index(idx3[0], idx3[1], idx3[2]), labels.empty() ? 0 : labels[i]);
  }

  // Majority per cell; sorting by (cell, class) makes the first-seen maximum
  // the lowest class id among tied counts.
  std::sort(hits.begin(), hits.end());
  for (std::size_t i = 0; i < hits.size();) {
    const std::size_t cell = hits[i].first;
    int best_class = -1;
    std::size_t best_count = 0;
    std::size_t j = i;
    while (j < hits.size() && hits[j].first == cell) {
      const int cls = hits[j].second;
      std::size_t count = 0;
      while (j < hits.size() && hits[j].first == cell && hits[j].second == cls) {
        ++count;
        ++j;
      }
      if (count > best_count) {
        best_count = count;
        best_class = cls;
      }
    }
    grid.cells[cell] = best_class;
    i = j;
  }
  return grid;
}

inline VoxelGrid voxelize(const LabeledCloud& cloud, std::size_t x, const Aabb& bounds) {
  return voxelize(cloud.points, cloud.labels, x, bounds);
}

struct IouReport {
  std::vector<std::pair<int, double>> per_class; // (class id, iou), ascending ids
  double mean = 0;                               // over classes present in either grid
};

/// Per-class intersection-over-union between equal-resolution grids. Classes
/// absent from both grids are excluded from the list and the mean.
inline IouReport iou(const VoxelGrid& pred, const VoxelGrid& gt) {
  if (!pred.same_resolution(gt)) throw ContractError("iou: grid resolutions differ");
  int max_class = -1;
  for (int c : pred.cells) max_class = std::max(max_class, c);
  for (int c : gt.cells) max_class = std::max(max_class, c);

  IouReport report;
  double acc = 0;
  for (int cls = 0; cls <= max_class; ++cls) {
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < pred.cells.size(); ++i) {
      const bool a = pred.cells[i] == cls, b = gt.cells[i] == cls;
      inter += a && b;
      uni += a || b;
    }
    if (uni == 0) continue; // class absent from both grids
    const double v = static_cast<double>(inter) / static_cast<double>(uni);
    report.per_class.emplace_back(cls, v);
    acc += v;
  }
  report.mean = report.per_class.empty() ? 0.0 : acc / static_cast<double>(report.per_class.size());
  return report;
}

/// Reported metrics of one evaluation, with the table scale factors applied.
struct MetricReport {
  double chamfer_l1_scaled = 0;
  double chamfer_l2_scaled = 0;
  double fscore_at_1pct = 0;
  std::optional<IouReport> iou;

  std::string to_kv() const {
    std::string out;
    auto line = [&out](const std::string& k, double v) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.17g", v);
      out += k + "=" + buf + "\n";
    };
    line("chamfer_l1_scaled", chamfer_l1_scaled);
    line("chamfer_l2_scaled", chamfer_l2_scaled);
    line("fscore_at_1pct", fscore_at_1pct);
    if (iou) {
      for (const auto& [cls, v] : iou->per_class) line("iou_class_" + std::to_string(cls), v);
      line("mean_iou", iou->mean);
    }
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json j{{"chamfer_l1_scaled", chamfer_l1_scaled},
                     {"chamfer_l2_scaled", chamfer_l2_scaled},
                     {"fscore_at_1pct", fscore_at_1pct}};
    if (iou) {
      nlohmann::json per = nlohmann::json::object();
      for (const auto& [cls, v] : iou->per_class) per[std::to_string(cls)] = v;
      j["per_class_iou"] = std::move(per);
      j["mean_iou"] = iou->mean;
    }
    return j;
  }
};

/// Full evaluation of one prediction at the standard thresholds and scales.
inline MetricReport evaluate(const Cloud& pred, const Cloud& gt,
                             ReportScale scale = ReportScale::DenseBenchmark) {
  MetricReport r;
  r.chamfer_l1_scaled = chamfer(pred, gt, Norm::L1) * chamfer_report_factor(Norm::L1, scale);
  r.chamfer_l2_scaled = chamfer(pred, gt, Norm::L2) * chamfer_report_factor(Norm::L2, scale);
  r.fscore_at_1pct = fscore(pred, gt, 0.01);
  return r;
}

} // namespace displace::metric
