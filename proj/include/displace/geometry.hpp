#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "displace/errors.hpp"

namespace displace {

using Vec3 = std::array<double, 3>;

/// Ordered list of 3-D points in normalized units.
using Cloud = std::vector<Vec3>;

/// Points plus one semantic class id per point.
struct LabeledCloud {
  Cloud points;
  std::vector<int> labels; // same length as points; empty means unlabeled
  int num_classes = 0;

  bool labeled() const { return !labels.empty(); }
};

struct Aabb {
  Vec3 min{0, 0, 0};
  Vec3 max{0, 0, 0};

  Vec3 center() const {
    return {(min[0] + max[0]) / 2, (min[1] + max[1]) / 2, (min[2] + max[2]) / 2};
  }
  Vec3 extent() const {
    return {max[0] - min[0], max[1] - min[1], max[2] - min[2]};
  }
};

inline Aabb bounding_box(const Cloud& cloud) {
  if (cloud.empty()) throw ContractError("bounding_box: empty cloud");
  Aabb box;
  box.min = {std::numeric_limits<double>::max(), std::numeric_limits<double>::max(),
             std::numeric_limits<double>::max()};
  box.max = {std::numeric_limits<double>::lowest(), std::numeric_limits<double>::lowest(),
             std::numeric_limits<double>::lowest()};
  for (const auto& p : cloud) {
    for (int a = 0; a < 3; ++a) {
      box.min[a] = std::min(box.min[a], p[a]);
      box.max[a] = std::max(box.max[a], p[a]);
    }
  }
  return box;
}

inline double distance(const Vec3& a, const Vec3& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

inline double manhattan_distance(const Vec3& a, const Vec3& b) {
  return std::abs(a[0] - b[0]) + std::abs(a[1] - b[1]) + std::abs(a[2] - b[2]);
}

/// Flatten a cloud to row-major coordinates (n x 3).
inline std::vector<double> flatten(const Cloud& cloud) {
  std::vector<double> out;
  out.reserve(cloud.size() * 3);
  for (const auto& p : cloud) {
    out.push_back(p[0]);
    out.push_back(p[1]);
    out.push_back(p[2]);
  }
  return out;
}

inline Cloud unflatten(const std::vector<double>& values) {
  if (values.size() % 3 != 0) throw ContractError("unflatten: length not divisible by 3");
  Cloud cloud(values.size() / 3);
  for (std::size_t i = 0; i < cloud.size(); ++i)
    cloud[i] = {values[3 * i], values[3 * i + 1], values[3 * i + 2]};
  return cloud;
}

} // namespace displace
