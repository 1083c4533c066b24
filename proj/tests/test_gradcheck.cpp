#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "displace/commands.hpp"
#include "displace/errors.hpp"
#include "displace/gradcheck.hpp"
#include "displace/gradcheck_suite.hpp"

using namespace displace;
using Catch::Approx;

// ---- harness machinery ----

TEST_CASE("gradcheck: relative error uses the guarded denominator") {
  CHECK(gradcheck::relative_error(1.0, 1.0) == Approx(0.0));
  CHECK(gradcheck::relative_error(2.0, 1.0) == Approx(0.5));
  CHECK(gradcheck::relative_error(0.0, 0.0) == Approx(0.0));
  // Tiny magnitudes divide by the 1e-4 floor instead of each other.
  CHECK(gradcheck::relative_error(1e-6, 0.0) == Approx(1e-2));
}

namespace {

gradcheck::Target quadratic_target(double slope) {
  gradcheck::Target t;
  t.name = "quadratic";
  t.dim = 4;
  t.value = [](std::span<const double> x) {
    double acc = 0;
    for (double v : x) acc += v * v;
    return acc;
  };
  t.gradient = [slope](std::span<const double> x) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) g[i] = slope * x[i];
    return g;
  };
  return t;
}

} // namespace

TEST_CASE("gradcheck: a correct analytic gradient passes") {
  Rng rng = make_rng(51, 0);
  const auto r = gradcheck::check_target(quadratic_target(2.0), rng);
  CHECK(r.pass);
  CHECK(r.worst_rel < 1e-4);
  CHECK(r.instances == 4);
}

TEST_CASE("gradcheck: a wrong analytic gradient is flagged") {
  Rng rng = make_rng(52, 0);
  const auto r = gradcheck::check_target(quadratic_target(3.0), rng);
  CHECK_FALSE(r.pass);
  CHECK(r.worst_rel > 0.1);
}

TEST_CASE("gradcheck: inputs inside a tie margin are resampled") {
  auto t = quadratic_target(2.0);
  int calls = 0;
  t.margin = [&calls](std::span<const double>) {
    // The first draw sits on a tie; every later draw is clear of it.
    return ++calls == 1 ? 0.0 : 1.0;
  };
  Rng rng = make_rng(53, 0);
  const auto r = gradcheck::check_target(t, rng);
  CHECK(r.pass);
  CHECK(r.resamples == 1);
}

TEST_CASE("gradcheck: a target that never clears its margin faults") {
  auto t = quadratic_target(2.0);
  t.margin = [](std::span<const double>) { return 0.0; };
  Rng rng = make_rng(54, 0);
  CHECK_THROWS_AS(gradcheck::check_target(t, rng), NumericFault);
}

TEST_CASE("gradcheck: malformed targets are rejected") {
  Rng rng = make_rng(55, 0);
  gradcheck::Target incomplete;
  incomplete.name = "no-functions";
  incomplete.dim = 2;
  CHECK_THROWS_AS(gradcheck::check_target(incomplete, rng), ContractError);

  auto short_grad = quadratic_target(2.0);
  short_grad.gradient = [](std::span<const double>) { return std::vector<double>{1.0}; };
  CHECK_THROWS_AS(gradcheck::check_target(short_grad, rng), ContractError);
}

// ---- the standard suite ----

TEST_CASE("gradcheck: every standard target passes finite differencing") {
  const auto suite = gradcheck::standard_suite(7);
  const auto results = gradcheck::check_all(suite, 7);
  REQUIRE(results.size() == suite.size());
  for (const auto& r : results) {
    INFO(gradcheck::format_row(r));
    CHECK(r.pass);
  }
}

TEST_CASE("gradcheck: the standard suite covers operators and losses") {
  const auto suite = gradcheck::standard_suite(7);
  std::set<std::string> names;
  for (const auto& t : suite) names.insert(t.name);
  for (const char* required :
       {"add", "mul", "matvec", "euclidean_norm", "tanh", "reciprocal", "log", "sum_full",
        "sum_axis", "gather_rows", "select_min", "select_max", "closest_distance",
        "kernel_aggregate", "feature_extraction_input", "neighbor_pooling", "latent_max_pool",
        "upsampling", "loss_out_to_gt", "loss_gt_to_out", "loss_order", "loss_semantic"}) {
    INFO(required);
    CHECK(names.count(required) == 1);
  }
}

TEST_CASE("gradcheck: results are deterministic under the seed") {
  const auto suite = gradcheck::standard_suite(9);
  const auto a = gradcheck::check_all(suite, 9);
  const auto b = gradcheck::check_all(suite, 9);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].worst_rel == b[i].worst_rel);
}

// ---- the command wrapper ----

TEST_CASE("gradcheck command: clean suite exits zero") {
  cli::RunConfig cfg;
  cfg.seed = 7;
  CHECK(cli::cmd_gradcheck(cfg) == cli::kExitOk);
}

TEST_CASE("gradcheck command: an injected broken gradient flips the exit code") {
  // A tanh whose analytic gradient has the wrong sign: the harness must
  // catch it and the run must fail as a whole.
  gradcheck::Target bad;
  bad.name = "tanh_flipped";
  bad.dim = 3;
  bad.value = [](std::span<const double> x) {
    double acc = 0;
    for (double v : x) acc += std::tanh(v);
    return acc;
  };
  bad.gradient = [](std::span<const double> x) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double t = std::tanh(x[i]);
      g[i] = -(1.0 - t * t);
    }
    return g;
  };
  const std::vector<gradcheck::Target> injected = {bad};
  cli::RunConfig cfg;
  cfg.seed = 7;
  CHECK(cli::cmd_gradcheck(cfg, &injected) == cli::kExitNumeric);

  const auto results = gradcheck::check_all(injected, 7);
  REQUIRE(results.size() == 1);
  CHECK_FALSE(results[0].pass);
  CHECK(results[0].name == "tanh_flipped");
  CHECK(results[0].worst_rel > 1.0);
}
