// End-to-end acceptance suite. Each criterion prints one PASS/FAIL line;
// the process exits nonzero if any criterion fails. Training-based criteria
// drive the same code path as the command-line tool and parse its artifacts.

#include <algorithm>
#include <chrono>
#include <cstdarg>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "displace/commands.hpp"
#include "displace/data.hpp"
#include "displace/geometry.hpp"
#include "displace/gradcheck_suite.hpp"
#include "displace/knn.hpp"
#include "displace/losses.hpp"
#include "displace/metrics.hpp"
#include "displace/model.hpp"
#include "displace/operators.hpp"
#include "displace/random.hpp"
#include "displace/runconfig.hpp"
#include "oracle.hpp"

namespace fs = std::filesystem;
using namespace displace;

namespace {

// ---- small utilities ------------------------------------------------------

std::string strfmt(const char* f, ...) {
  char buf[512];
  va_list args;
  va_start(args, f);
  std::vsnprintf(buf, sizeof buf, f, args);
  va_end(args);
  return buf;
}

struct Stopwatch {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
};

// Silences std::cout/std::cerr while a training command runs so the
// criterion lines stay the only process output.
struct CaptureIo {
  std::stringstream out, err;
  std::streambuf* co;
  std::streambuf* ce;
  CaptureIo() : co(std::cout.rdbuf(out.rdbuf())), ce(std::cerr.rdbuf(err.rdbuf())) {}
  ~CaptureIo() {
    std::cout.rdbuf(co);
    std::cerr.rdbuf(ce);
  }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot read '" + p.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Value of "key=value" at the start of a line.
double kv_value(const std::string& text, const std::string& key) {
  const std::string pat = key + "=";
  std::size_t pos = 0;
  while ((pos = text.find(pat, pos)) != std::string::npos) {
    if (pos == 0 || text[pos - 1] == '\n') return std::stod(text.substr(pos + pat.size()));
    pos += pat.size();
  }
  throw std::runtime_error("key '" + key + "' not found");
}

// Value of " key=value" inside one line.
double line_field(const std::string& line, const std::string& key) {
  const std::string pat = " " + key + "=";
  const auto pos = line.find(pat);
  if (pos == std::string::npos)
    throw std::runtime_error("field '" + key + "' not found in: " + line);
  return std::stod(line.substr(pos + pat.size()));
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string l;
  while (std::getline(ss, l))
    if (!l.empty()) out.push_back(l);
  return out;
}

oracle::Mat random_mat(Rng& rng, std::size_t rows, std::size_t cols, double lo = -1.0,
                       double hi = 1.0) {
  oracle::Mat m{rows, cols, std::vector<double>(rows * cols)};
  for (auto& x : m.v) x = uniform(rng, lo, hi);
  return m;
}

ad::Tensor mat_tensor(ad::Tape& tape, const oracle::Mat& m) {
  return tape.constant({m.rows, m.cols}, m.v);
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

// Shared random displacement-bank values for the operator and its reference.
struct BankPair {
  op::DisplacementBank op_bank;
  oracle::Bank ref_bank;
};

BankPair make_bank(ad::Tape& tape, Rng& rng, std::size_t s, std::size_t d_in,
                   std::size_t d_out) {
  std::vector<double> dv(d_out * s * d_in), sv(d_out * s), rv(d_out * d_in);
  for (auto& x : dv) x = uniform(rng, -1.0, 1.0);
  for (auto& x : sv) x = uniform(rng, -1.0, 1.0);
  for (auto& x : rv) x = uniform(rng, -1.0, 1.0);

  BankPair pair;
  pair.op_bank.s = s;
  pair.op_bank.d_in = d_in;
  pair.op_bank.d_out = d_out;
  pair.op_bank.deltas = tape.constant({d_out, s, d_in}, dv);
  pair.op_bank.sigmas = tape.constant({d_out, s}, sv);
  pair.op_bank.rhos = tape.constant({d_out, d_in}, rv);
  pair.ref_bank = {s, d_in, d_out, dv, sv, rv, pair.op_bank.alpha, pair.op_bank.beta};
  return pair;
}

double mean_nearest_output_index(const Cloud& input, const Cloud& output) {
  double acc = 0;
  for (const auto& p : input) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_j = 0;
    for (std::size_t j = 0; j < output.size(); ++j) {
      const double d = distance(p, output[j]);
      if (d < best) {
        best = d;
        best_j = j;
      }
    }
    acc += static_cast<double>(best_j);
  }
  return acc / static_cast<double>(input.size());
}

// ---- shared run setup -----------------------------------------------------

// One synthetic pair, trained to convergence: the quantitative backbone of
// the overfit, ordering, and labeling criteria.
cli::RunConfig overfit_config(const fs::path& out_dir, double order_weight) {
  cli::RunConfig c;
  c.preset = "desk";
  c.seed = 7;
  c.out_dir = out_dir;
  c.synthetic.family = data::Family::Box;
  c.synthetic.partial_count = 256;
  c.synthetic.complete_count = 256;
  c.synthetic.seed = 3;
  c.synthetic.noise_sigma = 0.005;
  c.steps = 2000;
  c.batch_size = 1;
  c.checkpoint_every = 0;
  c.lr = 3e-3;
  c.lr_final = 1e-7;
  c.weights.out_to_gt = 1.0;
  c.weights.gt_to_out = 1.0;
  c.weights.order = order_weight;
  c.weights.semantic = 0.0;
  return c;
}

cli::RunConfig room_config(const fs::path& out_dir) {
  cli::RunConfig c = overfit_config(out_dir, 1.0);
  c.num_classes = 3;
  c.synthetic.family = data::Family::Room;
  c.weights.semantic = 1.0;
  return c;
}

struct Suite {
  fs::path scratch;
  int failures = 0;

  void report(int n, bool ok, const std::string& detail) {
    std::printf("%s criterion %d: %s\n", ok ? "PASS" : "FAIL", n, detail.c_str());
    std::fflush(stdout);
    if (!ok) ++failures;
  }

  template <typename Fn>
  void run(int n, Fn fn) {
    try {
      fn();
    } catch (const std::exception& e) {
      report(n, false, std::string("exception: ") + e.what());
    }
  }
};

} // namespace

int main() {
  Suite suite;
  suite.scratch = fs::temp_directory_path() / "displace_acceptance";
  fs::remove_all(suite.scratch);
  fs::create_directories(suite.scratch);

  // 1. Analytic gradients vs central finite differences, 100 instances per
  //    target, near-tie inputs resampled.
  suite.run(1, [&] {
    Stopwatch sw;
    gradcheck::Settings settings;
    settings.instances = 100;
    const auto targets = gradcheck::standard_suite(20260822);
    const auto results = gradcheck::check_all(targets, 913, settings);
    bool ok = true;
    double worst = 0;
    for (const auto& r : results) {
      ok = ok && r.pass;
      worst = std::max(worst, r.worst_rel);
    }
    const double secs = sw.seconds();
    ok = ok && secs < 120.0;
    suite.report(1, ok,
                 strfmt("%zu gradient targets x 100 instances, worst relative error %.2e "
                        "(tolerance 1e-4), %.1fs (< 120s)",
                        results.size(), worst, secs));
  });

  // 2. Operators and losses against straight-line exhaustive references.
  suite.run(2, [&] {
    Stopwatch sw;
    Rng rng = make_rng(2026, 0x5eed);
    double worst = 0;
    std::size_t instances = 0;

    for (int round = 0; round < 8; ++round) {
      ad::Tape tape;
      const std::size_t n = uniform_int<std::size_t>(rng, 4, 16);
      const std::size_t s = uniform_int<std::size_t>(rng, 1, 3);
      const std::size_t d_out = uniform_int<std::size_t>(rng, 1, 4);
      const std::size_t k = (round % 2 == 0) ? 0 : uniform_int<std::size_t>(rng, 1, n);

      const oracle::Mat cloud = random_mat(rng, n, 3);
      auto fin = op::FeatureSet::from(mat_tensor(tape, cloud));
      const BankPair bank = make_bank(tape, rng, s, 3, d_out);

      // feature extraction: outputs and raw channel responses
      const op::Extraction ex = op::feature_extraction(fin, bank.op_bank, k);
      const oracle::ExtractionRef ref = oracle::feature_extraction(cloud, bank.ref_bank, k);
      worst = std::max(worst, max_abs_diff(ex.features.vectors.values(), ref.features.v));
      worst = std::max(worst, max_abs_diff(ex.g_cache, ref.g.v));

      // neighbor pooling on those responses
      const std::size_t tau = std::min<std::size_t>(n, (round % 2 == 0) ? 2 : 4);
      const auto acts = op::activations(ex);
      const auto ref_acts = oracle::activations(ref.g);
      worst = std::max(worst, max_abs_diff(acts, ref_acts));
      const auto pooled = op::neighbor_pooling(ex.features, acts, tau);
      const auto ref_pooled = oracle::neighbor_pooling(ref.features, ref_acts, tau);
      worst = std::max(worst, max_abs_diff(pooled.vectors.values(), ref_pooled.v));

      // columnwise max over the set
      const auto pooled_max = op::latent_max_pool(fin);
      const auto ref_max = oracle::latent_max_pool(cloud);
      worst = std::max(worst, max_abs_diff(pooled_max.vectors.values(), ref_max.v));

      // up-sampling with independent banks
      const std::size_t n_up = 2 + (round % 2);
      op::UpBank up;
      std::vector<oracle::Bank> ref_banks;
      for (std::size_t u = 0; u < n_up; ++u) {
        BankPair b = make_bank(tape, rng, s, 3, d_out);
        up.banks.push_back(std::move(b.op_bank));
        ref_banks.push_back(std::move(b.ref_bank));
      }
      const auto upsampled = op::upsampling(fin, up, k);
      const auto ref_up = oracle::upsampling(cloud, ref_banks, k);
      worst = std::max(worst, max_abs_diff(upsampled.vectors.values(), ref_up.v));
      ++instances;
    }

    for (int round = 0; round < 8; ++round) {
      ad::Tape tape;
      const std::size_t ns = uniform_int<std::size_t>(rng, 2, 16);
      const std::size_t nt = uniform_int<std::size_t>(rng, 2, 16);
      const oracle::Mat src = random_mat(rng, ns, 3);
      const oracle::Mat tgt = random_mat(rng, nt, 3);
      const auto ts = mat_tensor(tape, src);
      const auto tt = mat_tensor(tape, tgt);

      const double directed = loss::directed_closest_loss(ts, tt).value.values()[0];
      worst = std::max(worst, std::abs(directed - oracle::directed_loss(src, tgt)));

      const std::size_t ni = std::min(ns, nt);
      const auto ti = tape.constant({ni, std::size_t{3}},
                                    std::vector<double>(src.v.begin(), src.v.begin() + ni * 3));
      const oracle::Mat inp{ni, 3, std::vector<double>(src.v.begin(), src.v.begin() + ni * 3)};
      const double order = loss::order_loss(ti, tt).values()[0];
      worst = std::max(worst, std::abs(order - oracle::order_loss(inp, tgt)));
      ++instances;
    }

    // bijective matching within 1% of the exhaustively optimal cost
    bool assignment_ok = true;
    for (int round = 0; round < 8; ++round) {
      ad::Tape tape;
      const std::size_t n = uniform_int<std::size_t>(rng, 2, 8);
      const oracle::Mat src = random_mat(rng, n, 3);
      const oracle::Mat tgt = random_mat(rng, n, 3);
      const double got =
          loss::assignment_loss(mat_tensor(tape, src), mat_tensor(tape, tgt)).value.values()[0];
      const double opt = oracle::optimal_assignment_cost(src, tgt);
      assignment_ok = assignment_ok && got >= opt - 1e-9 && got <= opt * 1.01 + 1e-12;
    }

    const double secs = sw.seconds();
    const bool ok = worst <= 1e-12 && assignment_ok && secs < 60.0;
    suite.report(2, ok,
                 strfmt("operators and closest/order losses match exhaustive references, "
                        "worst difference %.2e (<= 1e-12) over %zu instances; matching cost "
                        "within 1%% of optimal on 8 instances; %.1fs (< 60s)",
                        worst, instances, secs));
  });

  // 3. Neighbor queries identical to brute force across dimensions.
  suite.run(3, [&] {
    Stopwatch sw;
    Rng rng = make_rng(2026, 0x3ca5);
    std::size_t queries = 0, mismatches = 0;
    for (const std::size_t dim : {std::size_t{3}, std::size_t{16}, std::size_t{64}}) {
      for (int set = 0; set < 8; ++set) {
        const std::size_t n = uniform_int<std::size_t>(rng, 1, 2048);
        std::vector<double> pts(n * dim);
        for (auto& x : pts) x = uniform(rng, -1.0, 1.0);
        const KnnIndex index(pts, dim);
        for (int q = 0; q < 42; ++q) {
          std::vector<double> probe(dim);
          for (auto& x : probe) x = uniform(rng, -1.0, 1.0);
          const std::size_t k = uniform_int<std::size_t>(rng, 1, std::min<std::size_t>(n, 32));

          std::vector<int> ids(n);
          std::iota(ids.begin(), ids.end(), 0);
          auto d2 = [&](int id) {
            double acc = 0;
            for (std::size_t c = 0; c < dim; ++c) {
              const double d = probe[c] - pts[id * dim + c];
              acc += d * d;
            }
            return acc;
          };
          std::partial_sort(ids.begin(), ids.begin() + k, ids.end(), [&](int a, int b) {
            const double da = d2(a), db = d2(b);
            return da < db || (da == db && a < b);
          });
          ids.resize(k);

          if (index.query(probe, k) != ids) ++mismatches;
          ++queries;
        }
      }
    }
    const double secs = sw.seconds();
    const bool ok = mismatches == 0 && queries >= 1000 && secs < 60.0;
    suite.report(3, ok,
                 strfmt("%zu randomized queries (dims 3/16/64, n <= 2048), %zu mismatches "
                        "vs brute force, %.1fs (< 60s)",
                        queries, mismatches, secs));
  });

  // 4. Cardinality laws of the full-scale configuration.
  suite.run(4, [&] {
    const auto arch = model::ArchitectureConfig::paper();
    std::size_t count = arch.input_count;
    std::vector<std::size_t> trace{count};
    std::vector<std::size_t> taus;
    std::size_t product = 1;
    for (const auto& layer : arch.layers) {
      if (const auto* np = std::get_if<model::NeighborPoolingLayer>(&layer)) {
        taus.push_back(np->tau);
        count /= np->tau;
        trace.push_back(count);
      } else if (std::holds_alternative<model::MaxPoolLayer>(layer)) {
        count = 1;
        trace.push_back(count);
      } else if (const auto* up = std::get_if<model::UpSamplingLayer>(&layer)) {
        product *= up->n_up;
      }
    }
    const bool trace_ok = trace == std::vector<std::size_t>{2048, 256, 64, 16, 1};
    const bool taus_ok = taus == std::vector<std::size_t>{8, 4, 4};
    const bool product_ok = product == 16384 && arch.output_count() == 16384;

    Rng rng = make_rng(4, 4);
    Cloud input(arch.input_count);
    for (auto& p : input) p = {uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1)};
    const model::Model m(arch, 1);
    const auto fwd = m.forward(input);
    const bool fwd_ok = fwd.points.size() == 16384;

    suite.report(4, trace_ok && taus_ok && product_ok && fwd_ok,
                 strfmt("forward maps 2048x3 -> %zux3; decoder replication product %zu; "
                        "pooling trace 2048->%zu->%zu->%zu->%zu with tau %zu,%zu,%zu",
                        fwd.points.size(), product, trace[1], trace[2], trace[3], trace[4],
                        taus.size() > 0 ? taus[0] : 0, taus.size() > 1 ? taus[1] : 0,
                        taus.size() > 2 ? taus[2] : 0));
  });

  // 5. Single-pair overfit: accuracy thresholds and decay of the order term.
  const cli::RunConfig cfg_order = overfit_config(suite.scratch / "overfit_order", 1.0);
  suite.run(5, [&] {
    Stopwatch sw;
    int rc = -1;
    {
      CaptureIo quiet;
      rc = cli::cmd_train(cfg_order);
    }
    const double secs = sw.seconds();
    const std::string report = slurp(cfg_order.out_dir / "report.kv");
    const auto curve = lines_of(slurp(cfg_order.out_dir / "loss_curve.txt"));
    const double l2_raw = kv_value(report, "chamfer_l2_raw");
    const double f = kv_value(report, "fscore_at_1pct");
    const double order_first = line_field(curve.front(), "order");
    const double order_last = line_field(curve.back(), "order");
    const double ratio = order_last / order_first;
    const bool ok =
        rc == 0 && l2_raw < 1e-3 && f > 0.95 && ratio < 0.10 && secs < 600.0;
    suite.report(5, ok,
                 strfmt("2000-step overfit: raw symmetric L2 chamfer %.2e (< 1e-3), "
                        "f-score@0.01 %.3f (> 0.95), order term at %.1f%% of initial "
                        "(< 10%%), %.0fs (< 600s)",
                        l2_raw, f, ratio * 100.0, secs));
  });

  // 6. Ordering effect: nearest completions of the observed points sit at
  //    earlier output indices when the order penalty was trained.
  suite.run(6, [&] {
    const cli::RunConfig cfg_plain = overfit_config(suite.scratch / "overfit_noorder", 0.0);
    int rc = -1;
    Cloud input;
    {
      CaptureIo quiet;
      rc = cli::cmd_train(cfg_plain);
      const auto arch = cli::resolve_architecture(cfg_order);
      input = cli::detail::prepare_data(cfg_order, arch).samples[0].partial;
    }
    const model::Model with_order =
        model::Model::load_checkpoint((cfg_order.out_dir / "checkpoint.bin").string());
    const model::Model without_order =
        model::Model::load_checkpoint((cfg_plain.out_dir / "checkpoint.bin").string());
    const double idx_with = mean_nearest_output_index(input, with_order.forward(input).points);
    const double idx_without =
        mean_nearest_output_index(input, without_order.forward(input).points);
    const bool ok = rc == 0 && idx_with < idx_without;
    suite.report(6, ok,
                 strfmt("mean nearest-output index over the input %.1f with the order term "
                        "vs %.1f without (same seed)",
                        idx_with, idx_without));
  });

  // 7. Semantic weighting: exact coefficient values, then a labeled overfit
  //    that must recover the per-point classes.
  suite.run(7, [&] {
    Stopwatch sw;
    ad::Tape tape;
    const loss::LabeledSet pred{tape.constant({1, 3}, {0, 0, 0}),
                                tape.constant({1, 2}, {0.5, 0.5})};
    const loss::LabeledSet gt{tape.constant({1, 3}, {0, 0, 0}),
                              tape.constant({1, 2}, {1.0, 0.0})};
    loss::Correspondence corr;
    corr.target_ids = {0};
    corr.distances = {0.0};
    const double g_half = loss::semantic_loss(pred, gt, corr, 0.25, 0.25).gamma;
    const double g_one = loss::semantic_loss(pred, gt, corr, 0.5, 0.5).gamma;
    const bool gamma_ok = g_half == 0.02 && g_one == 0.01;

    const cli::RunConfig cfg_room = room_config(suite.scratch / "overfit_room");
    int rc = -1;
    model::TrainSample sample;
    {
      CaptureIo quiet;
      rc = cli::cmd_train(cfg_room);
      const auto arch = cli::resolve_architecture(cfg_room);
      sample = cli::detail::prepare_data(cfg_room, arch).samples[0];
    }
    const model::Model m =
        model::Model::load_checkpoint((cfg_room.out_dir / "checkpoint.bin").string());
    const auto fwd = m.forward(sample.partial);
    const auto pred_labels =
        cli::detail::argmax_labels(fwd.class_probs, fwd.points.size(), m.config().num_classes);

    std::size_t correct = 0;
    for (std::size_t i = 0; i < fwd.points.size(); ++i) {
      double best = std::numeric_limits<double>::infinity();
      std::size_t best_j = 0;
      for (std::size_t j = 0; j < sample.complete.size(); ++j) {
        const double d = distance(fwd.points[i], sample.complete[j]);
        if (d < best) {
          best = d;
          best_j = j;
        }
      }
      if (pred_labels[i] == sample.labels[best_j]) ++correct;
    }
    const double accuracy = static_cast<double>(correct) / static_cast<double>(fwd.points.size());
    const double secs = sw.seconds();
    const bool ok = gamma_ok && rc == 0 && accuracy > 0.9 && secs < 600.0;
    suite.report(7, ok,
                 strfmt("gamma(0.5)=%.17g and gamma(1.0)=%.17g exact; labeled room overfit "
                        "per-point label accuracy %.3f (> 0.9), %.0fs (< 600s)",
                        g_half, g_one, accuracy, secs));
  });

  // 8. Metric identities on equal clouds and the self-evaluation bound.
  suite.run(8, [&] {
    data::SyntheticSpec spec;
    spec.family = data::Family::Room;
    spec.partial_count = 128;
    spec.complete_count = 800;
    spec.seed = 12;
    const auto sample = data::generate_synthetic(spec);
    const auto [cloud, transform] = data::normalize(sample.complete);
    (void)transform;

    const double c1 = metric::chamfer(cloud, cloud, metric::Norm::L1);
    const double c2 = metric::chamfer(cloud, cloud, metric::Norm::L2);
    const double f = metric::fscore(cloud, cloud);
    const auto grid = metric::voxelize(cloud, sample.labels, 32, bounding_box(cloud));
    const auto overlap = metric::iou(grid, grid);
    bool iou_ok = !overlap.per_class.empty() && overlap.mean == 1.0;
    for (const auto& [cls, v] : overlap.per_class) iou_ok = iou_ok && v == 1.0;
    const double self_f = metric::evaluate(cloud, cloud).fscore_at_1pct;

    const bool ok = c1 == 0.0 && c2 == 0.0 && f == 1.0 && iou_ok && self_f >= 0.95;
    suite.report(8, ok,
                 strfmt("identical clouds: chamfer L1 %g, L2 %g, f-score %g, iou 1.0 over "
                        "%zu present classes; ground-truth self-evaluation f-score %.2f "
                        "(>= 0.95)",
                        c1, c2, f, overlap.per_class.size(), self_f));
  });

  // 9. Checkpoint round trip reproduces the forward pass bit for bit.
  suite.run(9, [&] {
    data::SyntheticSpec spec;
    spec.family = data::Family::Box;
    spec.partial_count = 256;
    spec.complete_count = 256;
    spec.seed = 3;
    spec.noise_sigma = 0.005;
    const auto sample = data::generate_synthetic(spec);
    const auto norm = data::normalize_pair(sample.partial, sample.complete);

    model::Model m(model::ArchitectureConfig::desk(), 5);
    std::vector<model::TrainSample> batch{{norm.partial, norm.complete, {}}};
    model::LossWeights weights;
    weights.order = 1.0;
    for (int i = 0; i < 3; ++i) m.train_step(batch, weights, 1);

    const fs::path path = suite.scratch / "roundtrip.bin";
    m.save_checkpoint(path.string());
    const model::Model loaded = model::Model::load_checkpoint(path.string());

    const auto a = m.forward(norm.partial);
    const auto b = loaded.forward(norm.partial);
    const bool points_ok =
        a.points.size() == b.points.size() &&
        std::memcmp(a.points.data(), b.points.data(), a.points.size() * sizeof(Vec3)) == 0;
    const bool probs_ok = a.class_probs == b.class_probs;
    suite.report(9, points_ok && probs_ok,
                 strfmt("save/load then forward is bit-identical on a fixed input "
                        "(%zu points)",
                        a.points.size()));
  });

  std::printf("acceptance: %d/9 criteria passed\n", 9 - suite.failures);
  return suite.failures == 0 ? 0 : 1;
}
