#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "displace/errors.hpp"
#include "displace/metrics.hpp"
#include "displace/random.hpp"
#include "oracle.hpp"

using namespace displace;
using Catch::Approx;

namespace {

Cloud random_cloud(Rng& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
  Cloud c(n);
  for (auto& p : c)
    for (double& x : p) x = uniform(rng, lo, hi);
  return c;
}

oracle::Mat to_mat(const Cloud& c) {
  oracle::Mat m{c.size(), 3, {}};
  for (const auto& p : c) m.v.insert(m.v.end(), p.begin(), p.end());
  return m;
}

std::size_t occupied(const metric::VoxelGrid& g) {
  return static_cast<std::size_t>(
      std::count_if(g.cells.begin(), g.cells.end(), [](int c) { return c >= 0; }));
}

} // namespace

// ---- chamfer ----

TEST_CASE("chamfer: identical clouds score zero in both norms") {
  Cloud c = {{0, 0, 0}, {1, 2, 3}, {-0.5, 0.25, 0.75}};
  CHECK(metric::chamfer(c, c, metric::Norm::L1) == Approx(0.0).margin(1e-15));
  CHECK(metric::chamfer(c, c, metric::Norm::L2) == Approx(0.0).margin(1e-15));
}

TEST_CASE("chamfer: single pair at unit distance") {
  Cloud pred = {{0, 0, 0}};
  Cloud gt = {{1, 0, 0}};
  const double raw = metric::chamfer(pred, gt, metric::Norm::L2);
  CHECK(raw == Approx(1.0));
  CHECK(raw * metric::chamfer_report_factor(metric::Norm::L2,
                                            metric::ReportScale::DenseBenchmark) ==
        Approx(10000.0));
}

TEST_CASE("chamfer: report factors follow the table conventions") {
  using metric::Norm;
  using metric::ReportScale;
  CHECK(metric::chamfer_report_factor(Norm::L1, ReportScale::DenseBenchmark) == Approx(1e3));
  CHECK(metric::chamfer_report_factor(Norm::L1, ReportScale::SceneBenchmark) == Approx(1e3));
  CHECK(metric::chamfer_report_factor(Norm::L2, ReportScale::DenseBenchmark) == Approx(1e4));
  CHECK(metric::chamfer_report_factor(Norm::L2, ReportScale::SceneBenchmark) == Approx(1e3));
}

TEST_CASE("chamfer: symmetric under swapping the clouds") {
  Rng rng = make_rng(71, 0);
  Cloud a = random_cloud(rng, 9);
  Cloud b = random_cloud(rng, 13);
  for (auto norm : {metric::Norm::L1, metric::Norm::L2})
    CHECK(metric::chamfer(a, b, norm) == Approx(metric::chamfer(b, a, norm)).margin(1e-12));
}

TEST_CASE("chamfer: matches the exhaustive oracle") {
  Rng rng = make_rng(72, 0);
  for (int round = 0; round < 5; ++round) {
    Cloud a = random_cloud(rng, 20);
    Cloud b = random_cloud(rng, 15);
    CHECK(metric::chamfer(a, b, metric::Norm::L2) ==
          Approx(oracle::chamfer_l2(to_mat(a), to_mat(b))).margin(1e-12));
    CHECK(metric::chamfer(a, b, metric::Norm::L1) ==
          Approx(oracle::chamfer_l1(to_mat(a), to_mat(b))).margin(1e-12));
  }
}

TEST_CASE("chamfer: empty cloud is rejected") {
  Cloud c = {{0, 0, 0}};
  CHECK_THROWS_AS(metric::chamfer({}, c, metric::Norm::L2), ContractError);
  CHECK_THROWS_AS(metric::chamfer(c, {}, metric::Norm::L2), ContractError);
}

// ---- fscore ----

TEST_CASE("fscore: identical clouds score one") {
  Cloud c = {{0, 0, 0}, {0.5, 0.5, 0.5}, {-0.25, 0, 0.75}};
  CHECK(metric::fscore(c, c) == Approx(1.0));
}

TEST_CASE("fscore: boundary distance counts as within") {
  // Exact arithmetic: points and threshold are powers of two, so the shifted
  // distances equal the threshold bit-for-bit and the inclusive comparison
  // must keep them.
  Cloud gt = {{0, 0, 0}, {0.5, 0, 0}};
  Cloud pred = {{0.25, 0, 0}, {0.75, 0, 0}};
  CHECK(metric::fscore(pred, gt, 0.25) == Approx(1.0));
}

TEST_CASE("fscore: half precision and full recall combine to two thirds") {
  Cloud pred = {{0, 0, 0}, {5, 0, 0}};
  Cloud gt = {{0, 0, 0}};
  CHECK(metric::fscore(pred, gt) == Approx(2.0 / 3.0));
}

TEST_CASE("fscore: far clouds score zero") {
  Cloud pred = {{0, 0, 0}};
  Cloud gt = {{10, 0, 0}};
  CHECK(metric::fscore(pred, gt) == Approx(0.0));
}

TEST_CASE("fscore: matches the exhaustive oracle and stays within bounds") {
  Rng rng = make_rng(73, 0);
  for (int round = 0; round < 5; ++round) {
    Cloud a = random_cloud(rng, 24, -0.05, 0.05);
    Cloud b = random_cloud(rng, 18, -0.05, 0.05);
    const double f = metric::fscore(a, b);
    CHECK(f >= 0.0);
    CHECK(f <= 1.0);
    CHECK(f == Approx(oracle::fscore(to_mat(a), to_mat(b), 0.01)).margin(1e-12));
  }
}

TEST_CASE("fscore: non-positive threshold is rejected") {
  Cloud c = {{0, 0, 0}};
  CHECK_THROWS_AS(metric::fscore(c, c, 0.0), ContractError);
  CHECK_THROWS_AS(metric::fscore(c, c, -0.01), ContractError);
}

// ---- voxelize ----

namespace {

Aabb unit_box() { return {{-1, -1, -1}, {1, 1, 1}}; }

} // namespace

TEST_CASE("voxelize: grid follows the x by 0.6x by x rule") {
  auto grid = metric::voxelize(Cloud{{0, 0, 0}}, {}, 60, unit_box());
  CHECK(grid.nx == 60);
  CHECK(grid.ny == 36);
  CHECK(grid.nz == 60);
  CHECK(grid.cells.size() == 60u * 36u * 60u);
}

TEST_CASE("voxelize: one centered point occupies exactly one cell") {
  auto grid = metric::voxelize(Cloud{{0, 0, 0}}, {}, 60, unit_box());
  CHECK(occupied(grid) == 1);
  CHECK(grid.skipped_points == 0);
}

TEST_CASE("voxelize: majority label wins the cell") {
  Cloud pts = {{0.01, 0.01, 0.01}, {0.011, 0.01, 0.01}, {0.012, 0.01, 0.01}};
  auto grid = metric::voxelize(pts, {2, 2, 5}, 4, unit_box());
  REQUIRE(occupied(grid) == 1);
  const auto it = std::find_if(grid.cells.begin(), grid.cells.end(), [](int c) { return c >= 0; });
  CHECK(*it == 2);
}

TEST_CASE("voxelize: label ties resolve to the lowest class id") {
  Cloud pts = {{0.01, 0.01, 0.01}, {0.011, 0.01, 0.01}};
  auto grid = metric::voxelize(pts, {3, 1}, 4, unit_box());
  const auto it = std::find_if(grid.cells.begin(), grid.cells.end(), [](int c) { return c >= 0; });
  CHECK(*it == 1);
}

TEST_CASE("voxelize: empty cloud yields an all-empty grid") {
  auto grid = metric::voxelize(Cloud{}, {}, 4, unit_box());
  CHECK(occupied(grid) == 0);
}

TEST_CASE("voxelize: unlabeled points occupy with class zero") {
  auto grid = metric::voxelize(Cloud{{0.3, -0.2, 0.1}}, {}, 4, unit_box());
  const auto it = std::find_if(grid.cells.begin(), grid.cells.end(), [](int c) { return c >= 0; });
  CHECK(*it == 0);
}

TEST_CASE("voxelize: points outside the bounds are counted, not placed") {
  Cloud pts = {{0, 0, 0}, {2, 0, 0}, {0, -3, 0}};
  auto grid = metric::voxelize(pts, {}, 4, unit_box());
  CHECK(occupied(grid) == 1);
  CHECK(grid.skipped_points == 2);
}

TEST_CASE("voxelize: labeled-cloud overload routes labels through") {
  LabeledCloud cloud;
  cloud.points = {{0.5, 0.5, 0.5}};
  cloud.labels = {7};
  cloud.num_classes = 8;
  auto grid = metric::voxelize(cloud, 4, unit_box());
  const auto it = std::find_if(grid.cells.begin(), grid.cells.end(), [](int c) { return c >= 0; });
  CHECK(*it == 7);
}

TEST_CASE("voxelize: re-voxelizing cell centers reproduces the occupancy") {
  Rng rng = make_rng(74, 0);
  Cloud pts = random_cloud(rng, 40, -0.95, 0.95);
  auto grid = metric::voxelize(pts, {}, 10, unit_box());

  Cloud centers;
  for (std::size_t ix = 0; ix < grid.nx; ++ix)
    for (std::size_t iy = 0; iy < grid.ny; ++iy)
      for (std::size_t iz = 0; iz < grid.nz; ++iz)
        if (grid.cells[grid.index(ix, iy, iz)] >= 0)
          centers.push_back({grid.origin[0] + (static_cast<double>(ix) + 0.5) * grid.cell_size[0],
                             grid.origin[1] + (static_cast<double>(iy) + 0.5) * grid.cell_size[1],
                             grid.origin[2] + (static_cast<double>(iz) + 0.5) * grid.cell_size[2]});
  auto again = metric::voxelize(centers, {}, 10, unit_box());
  CHECK(again.cells == grid.cells);
}

TEST_CASE("voxelize: degenerate bounds and tiny resolutions are rejected") {
  CHECK_THROWS_AS(metric::voxelize(Cloud{{0, 0, 0}}, {}, 4, Aabb{{0, 0, 0}, {0, 1, 1}}),
                  ContractError);
  CHECK_THROWS_AS(metric::voxelize(Cloud{{0, 0, 0}}, {}, 1, unit_box()), ContractError);
  CHECK_THROWS_AS(metric::voxelize(Cloud{{0, 0, 0}}, {0, 1}, 4, unit_box()), ContractError);
}

// ---- iou ----

namespace {

metric::VoxelGrid toy_grid(std::initializer_list<int> cells) {
  metric::VoxelGrid g;
  g.nx = g.ny = g.nz = 2;
  g.cells.assign(cells);
  return g;
}

} // namespace

TEST_CASE("iou: identical grids score one for every present class") {
  auto g = toy_grid({0, 0, 1, -1, -1, -1, 1, 0});
  auto report = metric::iou(g, g);
  REQUIRE(report.per_class.size() == 2);
  CHECK(report.per_class[0] == std::pair<int, double>{0, 1.0});
  CHECK(report.per_class[1] == std::pair<int, double>{1, 1.0});
  CHECK(report.mean == Approx(1.0));
}

TEST_CASE("iou: disjoint occupancy scores zero") {
  auto a = toy_grid({0, -1, -1, -1, -1, -1, -1, -1});
  auto b = toy_grid({-1, 0, -1, -1, -1, -1, -1, -1});
  auto report = metric::iou(a, b);
  REQUIRE(report.per_class.size() == 1);
  CHECK(report.per_class[0].second == Approx(0.0));
}

TEST_CASE("iou: one overlapping cell out of three occupied") {
  auto pred = toy_grid({0, 0, -1, -1, -1, -1, -1, -1});
  auto gt = toy_grid({-1, 0, 0, -1, -1, -1, -1, -1});
  auto report = metric::iou(pred, gt);
  REQUIRE(report.per_class.size() == 1);
  CHECK(report.per_class[0].second == Approx(1.0 / 3.0));
  CHECK(report.mean == Approx(1.0 / 3.0));
}

TEST_CASE("iou: classes absent from both grids are excluded from the mean") {
  auto pred = toy_grid({0, 5, -1, -1, -1, -1, -1, -1});
  auto gt = toy_grid({0, 5, -1, -1, -1, -1, -1, -1});
  auto report = metric::iou(pred, gt);
  REQUIRE(report.per_class.size() == 2);
  CHECK(report.per_class[0].first == 0);
  CHECK(report.per_class[1].first == 5);
  CHECK(report.mean == Approx(1.0));
}

TEST_CASE("iou: resolution mismatch is rejected") {
  auto a = toy_grid({0, -1, -1, -1, -1, -1, -1, -1});
  metric::VoxelGrid b;
  b.nx = b.ny = b.nz = 3;
  b.cells.assign(27, -1);
  CHECK_THROWS_AS(metric::iou(a, b), ContractError);
}

TEST_CASE("iou: values stay within the unit interval on random grids") {
  Rng rng = make_rng(75, 0);
  for (int round = 0; round < 5; ++round) {
    metric::VoxelGrid a, b;
    a.nx = a.ny = a.nz = b.nx = b.ny = b.nz = 3;
    a.cells.resize(27);
    b.cells.resize(27);
    for (int& c : a.cells) c = static_cast<int>(uniform(rng, 0, 1) * 4) - 1;
    for (int& c : b.cells) c = static_cast<int>(uniform(rng, 0, 1) * 4) - 1;
    auto report = metric::iou(a, b);
    for (const auto& [cls, v] : report.per_class) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

// ---- report assembly ----

TEST_CASE("evaluate: identical clouds produce the perfect report") {
  Cloud c = {{0, 0, 0}, {0.5, 0.25, -0.5}};
  auto report = metric::evaluate(c, c);
  CHECK(report.chamfer_l1_scaled == Approx(0.0).margin(1e-12));
  CHECK(report.chamfer_l2_scaled == Approx(0.0).margin(1e-12));
  CHECK(report.fscore_at_1pct == Approx(1.0));
}

TEST_CASE("report: key-value and structured forms carry the same numbers") {
  metric::MetricReport r;
  r.chamfer_l1_scaled = 1.5;
  r.chamfer_l2_scaled = 2.5;
  r.fscore_at_1pct = 0.75;
  metric::IouReport iou;
  iou.per_class = {{0, 0.5}, {2, 1.0}};
  iou.mean = 0.75;
  r.iou = iou;

  const std::string kv = r.to_kv();
  CHECK(kv.find("chamfer_l1_scaled=1.5") != std::string::npos);
  CHECK(kv.find("fscore_at_1pct=0.75") != std::string::npos);
  CHECK(kv.find("iou_class_2=1") != std::string::npos);
  CHECK(kv.find("mean_iou=0.75") != std::string::npos);

  const auto j = r.to_json();
  CHECK(j.at("chamfer_l2_scaled").get<double>() == Approx(2.5));
  CHECK(j.at("per_class_iou").at("0").get<double>() == Approx(0.5));
  CHECK(j.at("mean_iou").get<double>() == Approx(0.75));
}
