#pragma once

// Finite-difference gradient verification. A target wraps a scalar function
// of a flat parameter vector together with its reverse-mode gradient; the
// harness compares central differences against the analytic gradient at
// random inputs, resampling any input that sits too close to a
// non-differentiable boundary (argmin/argmax ties, correspondence switches).

#include <cmath>
#include <cstdio>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "displace/errors.hpp"
#include "displace/random.hpp"

namespace displace::gradcheck {

struct Target {
  std::string name;
  std::size_t dim = 0;
  double lo = -2.0, hi = 2.0; // sampling range per coordinate
  std::function<double(std::span<const double>)> value;
  std::function<std::vector<double>(std::span<const double>)> gradient;
  // Smallest gap to a non-differentiability (tie margin); inputs with a
  // margin under the threshold are resampled. Absent means smooth everywhere.
  std::function<double(std::span<const double>)> margin;
};

struct Result {
  std::string name;
  double worst_rel = 0.0;
  std::size_t worst_coord = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  std::size_t instances = 0;
  std::size_t resamples = 0;
  bool pass = true;
};

struct Settings {
  double step = 1e-5;          // central-difference half-step
  double tolerance = 1e-4;     // max relative error
  double margin_floor = 1e-3;  // minimum tie margin before resampling
  std::size_t instances = 4;   // random inputs per target
  std::size_t max_resamples = 64;
};

/// rel(a, n) = |a - n| / max(|a|, |n|, 1e-4)
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), 1e-4});
}

inline Result check_target(const Target& target, Rng& rng, const Settings& s = {}) {
  if (!target.value || !target.gradient || target.dim == 0)
    throw ContractError("gradcheck: target '" + target.name + "' is incomplete");
  Result r;
  r.name = target.name;
  std::vector<double> x(target.dim);
  for (std::size_t inst = 0; inst < s.instances; ++inst) {
    // Draw an input, retrying while it sits inside a tie margin.
    std::size_t tries = 0;
    while (true) {
      for (auto& v : x) v = uniform(rng, target.lo, target.hi);
      if (!target.margin || target.margin(x) >= s.margin_floor) break;
      ++r.resamples;
      if (++tries > s.max_resamples)
        throw NumericFault("gradcheck: target '" + target.name +
                           "' found no input clear of tie margins after " +
                           std::to_string(s.max_resamples) + " attempts");
    }

    const std::vector<double> grad = target.gradient(x);
    if (grad.size() != target.dim)
      throw ContractError("gradcheck: target '" + target.name + "' returned a gradient of size " +
                          std::to_string(grad.size()) + ", expected " +
                          std::to_string(target.dim));
    for (std::size_t j = 0; j < target.dim; ++j) {
      const double keep = x[j];
      x[j] = keep + s.step;
      const double fp = target.value(x);
      x[j] = keep - s.step;
      const double fm = target.value(x);
      x[j] = keep;
      const double numeric = (fp - fm) / (2.0 * s.step);
      const double rel = relative_error(grad[j], numeric);
      if (rel > r.worst_rel) {
        r.worst_rel = rel;
        r.worst_coord = j;
        r.analytic_at_worst = grad[j];
        r.numeric_at_worst = numeric;
      }
    }
    ++r.instances;
  }
  r.pass = r.worst_rel <= s.tolerance;
  return r;
}

/// Runs every target; deterministic for a given seed.
inline std::vector<Result> check_all(const std::vector<Target>& targets, std::uint64_t seed,
                                     const Settings& s = {}) {
  std::vector<Result> out;
  out.reserve(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    Rng rng = make_rng(seed, 0x6ead ^ (i * 2 + 1));
    out.push_back(check_target(targets[i], rng, s));
  }
  return out;
}

/// Formats one table row: name, worst relative error, status.
inline std::string format_row(const Result& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-28s worst_rel=%-12.3e coord=%-5zu %s", r.name.c_str(),
                r.worst_rel, r.worst_coord, r.pass ? "ok" : "FAIL");
  return buf;
}

} // namespace displace::gradcheck
