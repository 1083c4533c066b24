#pragma once

// Dataset plumbing: bounding-box normalization with an invertible transform
// record, seeded synthetic partial/complete pair generation with a camera
// half-space visibility cut, and directory-manifest loading with stem pairing.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "displace/errors.hpp"
#include "displace/geometry.hpp"
#include "displace/ply_io.hpp"
#include "displace/random.hpp"

namespace displace::data {

// ---------------------------------------------------------------------------
// normalization

/// Invertible record of a center-and-scale transform: q = (p - center) * scale.
struct Normalization {
  Vec3 center{0, 0, 0};
  double scale = 1.0;

  Vec3 apply(const Vec3& p) const {
    return {(p[0] - center[0]) * scale, (p[1] - center[1]) * scale, (p[2] - center[2]) * scale};
  }
  Vec3 invert(const Vec3& q) const {
    return {q[0] / scale + center[0], q[1] / scale + center[1], q[2] / scale + center[2]};
  }
  Cloud apply(const Cloud& c) const {
    Cloud out;
    out.reserve(c.size());
    for (const auto& p : c) out.push_back(apply(p));
    return out;
  }
  Cloud invert(const Cloud& c) const {
    Cloud out;
    out.reserve(c.size());
    for (const auto& q : c) out.push_back(invert(q));
    return out;
  }
};

/// Transform that maps the cloud's bounding box to be centered at the origin
/// with its longest axis spanning exactly [-1, 1].
inline Normalization normalization_for(const Cloud& cloud) {
  if (cloud.empty()) throw ContractError("normalize: empty cloud");
  const Aabb box = bounding_box(cloud);
  const Vec3 ext = box.extent();
  const double longest = std::max({ext[0], ext[1], ext[2]});
  if (longest <= 0.0)
    throw ContractError("normalize: degenerate cloud, all points coincide");
  return {box.center(), 2.0 / longest};
}

inline std::pair<Cloud, Normalization> normalize(const Cloud& cloud) {
  const Normalization n = normalization_for(cloud);
  return {n.apply(cloud), n};
}

/// Normalizes a training pair in the complete cloud's frame so that partial
/// and target live in one coordinate system.
struct NormalizedPair {
  Cloud partial;
  Cloud complete;
  Normalization transform;
};

inline NormalizedPair normalize_pair(const Cloud& partial, const Cloud& complete) {
  const Normalization n = normalization_for(complete);
  return {n.apply(partial), n.apply(complete), n};
}

// ---------------------------------------------------------------------------
// synthetic shapes

enum class Family { Plane, Box, Cylinder, Room };

struct SyntheticSpec {
  Family family = Family::Box;
  std::size_t partial_count = 256;
  std::size_t complete_count = 1024;
  Vec3 camera{0, 0, 1};      // view direction; the half-space it points into stays visible
  std::uint64_t seed = 0;
  double noise_sigma = 0.0;  // per-axis Gaussian jitter on the partial (sensor noise)
  std::vector<int> class_ids; // per-primitive labels for Room (default {0,1,2})
};

struct SyntheticSample {
  Cloud partial;
  Cloud complete;
  std::vector<int> labels; // per complete point; empty unless the family is labeled
  int num_classes = 0;
};

namespace detail {

struct SurfacePoint {
  Vec3 p;
  int label;
};

// Uniform point on the unit square [-1,1]^2 at z = 0.
inline Vec3 sample_plane(Rng& rng) {
  return {uniform(rng, -1.0, 1.0), uniform(rng, -1.0, 1.0), 0.0};
}

// Uniform point on the surface of the box [-1,1]^3, area-weighted over faces.
inline Vec3 sample_box(Rng& rng) {
  const std::size_t face = uniform_int(rng, std::size_t{0}, std::size_t{5});
  const double u = uniform(rng, -1.0, 1.0), v = uniform(rng, -1.0, 1.0);
  switch (face) {
    case 0: return {-1.0, u, v};
    case 1: return {1.0, u, v};
    case 2: return {u, -1.0, v};
    case 3: return {u, 1.0, v};
    case 4: return {u, v, -1.0};
    default: return {u, v, 1.0};
  }
}

// Uniform point on a closed cylinder: radius 0.5, axis z, height 2.
inline Vec3 sample_cylinder(Rng& rng) {
  constexpr double r = 0.5, h = 2.0;
  constexpr double lateral = 2.0 * std::numbers::pi * r * h;
  constexpr double caps = 2.0 * std::numbers::pi * r * r;
  if (uniform(rng, 0.0, lateral + caps) < lateral) {
    const double a = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    return {r * std::cos(a), r * std::sin(a), uniform(rng, -1.0, 1.0)};
  }
  const double a = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  const double rad = r * std::sqrt(uniform(rng, 0.0, 1.0));
  const double z = uniform(rng, 0.0, 1.0) < 0.5 ? -1.0 : 1.0;
  return {rad * std::cos(a), rad * std::sin(a), z};
}

// Room: floor slab, back wall, and a box of furniture, each its own class.
inline SurfacePoint sample_room(Rng& rng, const std::vector<int>& ids) {
  const double pick = uniform(rng, 0.0, 1.0);
  if (pick < 0.4) { // floor at y = -1
    return {{uniform(rng, -1.0, 1.0), -1.0, uniform(rng, -1.0, 1.0)}, ids[0]};
  }
  if (pick < 0.7) { // wall at z = -1
    return {{uniform(rng, -1.0, 1.0), uniform(rng, -1.0, 0.2), -1.0}, ids[1]};
  }
  // box [-0.2,0.4] x [-1,-0.2] x [-0.1,0.5]
  Vec3 c = sample_box(rng);
  return {{0.1 + 0.3 * c[0], -0.6 + 0.4 * c[1], 0.2 + 0.3 * c[2]}, ids[2]};
}

inline SurfacePoint sample_surface(Family family, Rng& rng, const std::vector<int>& ids) {
  switch (family) {
    case Family::Plane: return {sample_plane(rng), -1};
    case Family::Box: return {sample_box(rng), -1};
    case Family::Cylinder: return {sample_cylinder(rng), -1};
    case Family::Room: return sample_room(rng, ids);
  }
  throw ContractError("generate_synthetic: unknown family");
}

} // namespace detail

inline const char* family_name(Family f) {
  switch (f) {
    case Family::Plane: return "plane";
    case Family::Box: return "box";
    case Family::Cylinder: return "cylinder";
    case Family::Room: return "room";
  }
  return "?";
}

inline Family family_from_name(const std::string& name) {
  if (name == "plane") return Family::Plane;
  if (name == "box") return Family::Box;
  if (name == "cylinder") return Family::Cylinder;
  if (name == "room") return Family::Room;
  throw ConfigError("unknown synthetic family '" + name + "'");
}

inline Cloud resample(const Cloud& points, std::size_t count, std::uint64_t seed);

/// Generates a complete surface sampling plus a partial cloud cut from it:
/// the half-space of the surface the camera direction points into, resampled
/// to the requested count. Deterministic for a given spec. Throws when the
/// cut leaves no visible surface.
inline SyntheticSample generate_synthetic(const SyntheticSpec& spec) {
  if (spec.complete_count == 0) throw ContractError("generate_synthetic: complete_count is zero");
  const double cam_len = std::sqrt(spec.camera[0] * spec.camera[0] +
                                   spec.camera[1] * spec.camera[1] +
                                   spec.camera[2] * spec.camera[2]);
  if (!(cam_len > 0.0)) throw ContractError("generate_synthetic: zero camera direction");

  std::vector<int> ids = spec.class_ids;
  if (spec.family == Family::Room) {
    if (ids.empty()) ids = {0, 1, 2};
    if (ids.size() != 3)
      throw ContractError("generate_synthetic: room expects 3 class ids, got " +
                          std::to_string(ids.size()));
  }

  Rng rng = make_rng(spec.seed, 0xd15f1ace);
  SyntheticSample out;
  out.complete.reserve(spec.complete_count);
  for (std::size_t i = 0; i < spec.complete_count; ++i) {
    const auto sp = detail::sample_surface(spec.family, rng, ids);
    out.complete.push_back(sp.p);
    if (spec.family == Family::Room) out.labels.push_back(sp.label);
  }
  if (spec.family == Family::Room)
    out.num_classes = *std::max_element(ids.begin(), ids.end()) + 1;

  // Visibility: keep the half-space through the bounding-box center that the
  // camera direction points into.
  const Vec3 center = bounding_box(out.complete).center();
  const auto visible = [&](const Vec3& p) {
    return (p[0] - center[0]) * spec.camera[0] + (p[1] - center[1]) * spec.camera[1] +
               (p[2] - center[2]) * spec.camera[2] >=
           0.0;
  };

  // The partial is the observed subset of the complete cloud: the points the
  // camera cut keeps, resampled to the requested count. Sharing points with
  // the complete cloud mirrors how a scan relates to the surface it measured;
  // optional jitter plays the part of sensor noise.
  Cloud seen;
  for (const auto& p : out.complete)
    if (visible(p)) seen.push_back(p);
  if (seen.empty())
    throw ContractError(std::string("generate_synthetic: no visible surface for family '") +
                        family_name(spec.family) + "' under the given camera cut");
  out.partial = resample(seen, spec.partial_count, mix_seed(spec.seed, 0x9a27));
  if (spec.noise_sigma != 0.0) {
    Rng noise = make_rng(spec.seed, 0xca3e);
    for (auto& p : out.partial)
      for (double& c : p) c += gaussian(noise, 0.0, spec.noise_sigma);
  }
  return out;
}

// ---------------------------------------------------------------------------
// manifest

/// One dataset entry: a partial/complete file pair sharing a stem.
struct ManifestRecord {
  std::string stem;
  std::filesystem::path partial;
  std::filesystem::path complete;
};

struct Manifest {
  std::filesystem::path root;
  std::string split;
  std::vector<ManifestRecord> records;
};

namespace detail {

inline std::vector<std::filesystem::path> list_ply(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> out;
  if (!std::filesystem::exists(dir)) return out;
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".ply")
      out.push_back(entry.path());
  std::sort(out.begin(), out.end());
  return out;
}

} // namespace detail

/// Scans root/split/{partial,complete}/*.ply and pairs files by stem.
/// A file on either side without its counterpart is an error naming it;
/// a missing or empty split directory yields an empty manifest.
inline Manifest load_manifest(const std::filesystem::path& root, const std::string& split) {
  if (!std::filesystem::exists(root))
    throw IoError("manifest: dataset root '" + root.string() + "' does not exist");
  Manifest m{root, split, {}};
  const auto partials = detail::list_ply(root / split / "partial");
  const auto completes = detail::list_ply(root / split / "complete");

  std::size_t pi = 0, ci = 0;
  while (pi < partials.size() || ci < completes.size()) {
    const std::string ps = pi < partials.size() ? partials[pi].stem().string() : "";
    const std::string cs = ci < completes.size() ? completes[ci].stem().string() : "";
    if (pi < partials.size() && (ci == completes.size() || ps < cs))
      throw IoError("manifest: partial '" + partials[pi].string() +
                    "' has no complete counterpart");
    if (ci < completes.size() && (pi == partials.size() || cs < ps))
      throw IoError("manifest: complete '" + completes[ci].string() +
                    "' has no partial counterpart");
    m.records.push_back({ps, partials[pi], completes[ci]});
    ++pi;
    ++ci;
  }
  return m;
}

// ---------------------------------------------------------------------------
// resampling

/// Resamples a cloud to exactly `count` points: identity when sizes match,
/// seeded uniform draw with replacement when short, seeded subset (original
/// order preserved) when long. Labels, when present, follow their points.
inline void resample(Cloud& points, std::vector<int>& labels, std::size_t count,
                     std::uint64_t seed) {
  const std::size_t n = points.size();
  if (n == 0) throw ContractError("resample: empty cloud");
  if (!labels.empty() && labels.size() != n)
    throw ContractError("resample: label count does not match point count");
  if (n == count) return;

  Rng rng = make_rng(seed, 0x5e5a3b1e);
  std::vector<std::size_t> pick;
  pick.reserve(count);
  if (n < count) {
    for (std::size_t i = 0; i < count; ++i) pick.push_back(uniform_int(rng, std::size_t{0}, n - 1));
  } else {
    std::vector<std::size_t> ids(n);
    for (std::size_t i = 0; i < n; ++i) ids[i] = i;
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t j = uniform_int(rng, i, n - 1);
      std::swap(ids[i], ids[j]);
    }
    pick.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(count));
    std::sort(pick.begin(), pick.end());
  }

  Cloud np;
  np.reserve(count);
  std::vector<int> nl;
  if (!labels.empty()) nl.reserve(count);
  for (std::size_t id : pick) {
    np.push_back(points[id]);
    if (!labels.empty()) nl.push_back(labels[id]);
  }
  points = std::move(np);
  labels = std::move(nl);
}

inline Cloud resample(const Cloud& points, std::size_t count, std::uint64_t seed) {
  Cloud p = points;
  std::vector<int> no_labels;
  resample(p, no_labels, count, seed);
  return p;
}

/// A fully prepared training sample: loaded, resampled to the requested
/// counts, and normalized in the complete cloud's frame.
struct LoadedPair {
  std::string stem;
  Cloud partial;
  Cloud complete;
  std::vector<int> labels;
  int num_classes = 0;
  Normalization transform;
};

inline LoadedPair load_pair(const ManifestRecord& rec, std::size_t partial_count,
                            std::size_t complete_count, std::uint64_t seed) {
  LabeledCloud partial = ply::read_ply(rec.partial.string());
  LabeledCloud complete = ply::read_ply(rec.complete.string());
  std::vector<int> no_labels;
  resample(partial.points, no_labels, partial_count, mix_seed(seed, 1));
  resample(complete.points, complete.labels, complete_count, mix_seed(seed, 2));
  NormalizedPair norm = normalize_pair(partial.points, complete.points);
  return {rec.stem,          std::move(norm.partial),  std::move(norm.complete),
          std::move(complete.labels), complete.num_classes, norm.transform};
}

} // namespace displace::data
