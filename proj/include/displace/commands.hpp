#pragma once

// Subcommand implementations behind the command-line front end. Each command
// takes a fully resolved RunConfig, performs its work, and returns a process
// exit code; run_guarded maps the library's error taxonomy onto the exit-code
// contract (0 ok, 2 input/IO, 3 numeric fault, 4 configuration mismatch).

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <span>
#include <string>
#include <vector>

#include "displace/data.hpp"
#include "displace/errors.hpp"
#include "displace/gradcheck_suite.hpp"
#include "displace/metrics.hpp"
#include "displace/model.hpp"
#include "displace/ply_io.hpp"
#include "displace/runconfig.hpp"

namespace displace::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUnexpected = 1;
inline constexpr int kExitInput = 2;
inline constexpr int kExitNumeric = 3;
inline constexpr int kExitConfig = 4;

/// Runs a command body and converts thrown errors to exit codes.
inline int run_guarded(const std::function<int()>& body) {
  try {
    return body();
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const NumericFault& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const std::exception& e) {
    std::cerr << "unexpected error: " << e.what() << "\n";
    return kExitUnexpected;
  }
}

namespace detail {

inline std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

inline void echo_config(const RunConfig& cfg) {
  std::filesystem::create_directories(cfg.out_dir);
  write_text(cfg.out_dir / "config.json", to_json(cfg).dump(2) + "\n");
}

// Resamples in place, warning when the count actually changes.
inline void resample_warned(Cloud& points, std::vector<int>& labels, std::size_t count,
                            std::uint64_t seed, const std::string& what) {
  if (points.size() != count) {
    std::cerr << "warning: resampling " << what << " from " << points.size() << " to " << count
              << " points\n";
    data::resample(points, labels, count, seed);
  }
}

struct Prepared {
  std::vector<model::TrainSample> samples;
  std::vector<std::string> stems;
  std::vector<data::Normalization> transforms;
  int num_classes = 0;
};

// Loads the configured data source and shapes every sample to the model's
// input/output counts, normalized in the complete cloud's frame.
inline Prepared prepare_data(const RunConfig& cfg, const model::ArchitectureConfig& arch) {
  Prepared out;
  if (!cfg.dataset_root.empty()) {
    const data::Manifest manifest = data::load_manifest(cfg.dataset_root, cfg.split);
    for (std::size_t i = 0; i < manifest.records.size(); ++i) {
      data::LoadedPair pair = data::load_pair(manifest.records[i], arch.input_count,
                                              arch.output_count(), mix_seed(cfg.seed, i));
      out.samples.push_back(
          {std::move(pair.partial), std::move(pair.complete), std::move(pair.labels)});
      out.stems.push_back(pair.stem);
      out.transforms.push_back(pair.transform);
      out.num_classes = std::max(out.num_classes, pair.num_classes);
    }
  } else {
    data::SyntheticSpec spec = cfg.synthetic;
    data::SyntheticSample sample = data::generate_synthetic(spec);
    std::vector<int> no_labels;
    resample_warned(sample.partial, no_labels, arch.input_count, mix_seed(cfg.seed, 101),
                    "synthetic partial");
    resample_warned(sample.complete, sample.labels, arch.output_count(),
                    mix_seed(cfg.seed, 102), "synthetic complete");
    data::NormalizedPair norm = data::normalize_pair(sample.partial, sample.complete);
    out.samples.push_back(
        {std::move(norm.partial), std::move(norm.complete), std::move(sample.labels)});
    out.stems.push_back(std::string("synthetic-") + data::family_name(spec.family));
    out.transforms.push_back(norm.transform);
    out.num_classes = sample.num_classes;
  }

  if (cfg.weights.semantic != 0.0) {
    if (out.num_classes == 0)
      throw ConfigError("semantic weight is set but the data carries no labels");
    if (static_cast<std::size_t>(out.num_classes) != arch.num_classes)
      throw ConfigError("data has " + std::to_string(out.num_classes) +
                        " classes but the architecture head has " +
                        std::to_string(arch.num_classes));
  }
  return out;
}

inline model::Model load_model_checked(const RunConfig& cfg) {
  model::Model m = model::Model::load_checkpoint(cfg.checkpoint.string());
  const nlohmann::json want = model::to_json(resolve_architecture(cfg));
  const nlohmann::json have = model::to_json(m.config());
  if (want != have)
    throw ConfigError("checkpoint architecture does not match the configured one (checkpoint '" +
                      cfg.checkpoint.string() + "')");
  return m;
}

inline std::vector<int> argmax_labels(const std::vector<double>& probs, std::size_t n,
                                      std::size_t classes) {
  std::vector<int> out(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    double best = probs[i * classes];
    for (std::size_t c = 1; c < classes; ++c)
      if (probs[i * classes + c] > best) {
        best = probs[i * classes + c];
        out[i] = static_cast<int>(c);
      }
  }
  return out;
}

// Evaluation of one prediction against its ground truth, with raw chamfer
// values alongside the scaled report and voxel IoU when both sides are
// labeled.
struct SampleEval {
  metric::MetricReport report;
  double chamfer_l1_raw = 0;
  double chamfer_l2_raw = 0;
};

inline SampleEval evaluate_sample(const Cloud& pred, const std::vector<int>& pred_labels,
                                  const Cloud& gt, const std::vector<int>& gt_labels,
                                  int num_classes, const RunConfig& cfg) {
  SampleEval ev;
  ev.chamfer_l1_raw = metric::chamfer(pred, gt, metric::Norm::L1);
  ev.chamfer_l2_raw = metric::chamfer(pred, gt, metric::Norm::L2);
  ev.report.chamfer_l1_scaled =
      ev.chamfer_l1_raw * metric::chamfer_report_factor(metric::Norm::L1, cfg.scale);
  ev.report.chamfer_l2_scaled =
      ev.chamfer_l2_raw * metric::chamfer_report_factor(metric::Norm::L2, cfg.scale);
  ev.report.fscore_at_1pct = metric::fscore(pred, gt, 0.01);
  if (!pred_labels.empty() && !gt_labels.empty() && num_classes > 0) {
    const Aabb bounds = bounding_box(gt);
    LabeledCloud lp{pred, pred_labels, num_classes};
    LabeledCloud lg{gt, gt_labels, num_classes};
    ev.report.iou = metric::iou(metric::voxelize(lp, cfg.voxel_resolution, bounds),
                                metric::voxelize(lg, cfg.voxel_resolution, bounds));
  }
  return ev;
}

inline std::string plot_text(const Cloud& points, const std::vector<int>& labels) {
  std::string out;
  for (std::size_t i = 0; i < points.size(); ++i) {
    out += fmt(points[i][0]) + " " + fmt(points[i][1]) + " " + fmt(points[i][2]);
    if (!labels.empty()) out += " " + std::to_string(labels[i]);
    out += "\n";
  }
  return out;
}

} // namespace detail

inline int cmd_train(const RunConfig& cfg) {
  const model::ArchitectureConfig arch = resolve_architecture(cfg);
  detail::echo_config(cfg);

  model::Model m = cfg.checkpoint.empty() ? model::Model(arch, cfg.seed)
                                          : detail::load_model_checked(cfg);
  m.optimizer().lr = cfg.lr;

  detail::Prepared data = detail::prepare_data(cfg, arch);
  const std::size_t n = data.samples.size();
  if (n == 0) throw IoError("train: split '" + cfg.split + "' holds no samples");

  std::ofstream curve(cfg.out_dir / "loss_curve.txt", std::ios::trunc);
  if (!curve) throw IoError("cannot open the loss curve file for writing");

  const std::filesystem::path ckpt_path = cfg.out_dir / "checkpoint.bin";
  std::vector<model::TrainSample> batch;
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    if (cfg.lr_final && cfg.steps > 1) {
      // half-cosine ramp from lr down to lr_final over the run
      const double t = double(step - 1) / double(cfg.steps - 1);
      m.optimizer().lr = *cfg.lr_final + (cfg.lr - *cfg.lr_final) * 0.5 * (1.0 + std::cos(t * 3.14159265358979323846));
    }
    batch.clear();
    for (std::size_t b = 0; b < cfg.batch_size; ++b)
      batch.push_back(data.samples[((step - 1) * cfg.batch_size + b) % n]);
    const model::LossBreakdown bd = m.train_step(batch, cfg.weights, cfg.workers);

    curve << "step=" << step << " total=" << detail::fmt(bd.total)
          << " out_to_gt=" << detail::fmt(bd.out_to_gt)
          << " gt_to_out=" << detail::fmt(bd.gt_to_out);
    if (bd.order) curve << " order=" << detail::fmt(*bd.order);
    if (bd.semantic)
      curve << " semantic=" << detail::fmt(*bd.semantic) << " gamma=" << detail::fmt(bd.gamma);
    curve << "\n" << std::flush;

    if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0)
      m.save_checkpoint(ckpt_path.string());
  }
  m.save_checkpoint(ckpt_path.string());

  // Post-training evaluation on the training samples.
  metric::MetricReport agg;
  double l1_raw = 0, l2_raw = 0, mean_iou = 0;
  std::size_t labeled = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = data.samples[i];
    const model::ForwardResult fwd = m.forward(s.partial);
    std::vector<int> pred_labels;
    if (!fwd.class_probs.empty())
      pred_labels = detail::argmax_labels(fwd.class_probs, fwd.points.size(),
                                          m.config().num_classes);
    const detail::SampleEval ev = detail::evaluate_sample(fwd.points, pred_labels, s.complete,
                                                          s.labels, data.num_classes, cfg);
    agg.chamfer_l1_scaled += ev.report.chamfer_l1_scaled;
    agg.chamfer_l2_scaled += ev.report.chamfer_l2_scaled;
    agg.fscore_at_1pct += ev.report.fscore_at_1pct;
    l1_raw += ev.chamfer_l1_raw;
    l2_raw += ev.chamfer_l2_raw;
    if (ev.report.iou) {
      mean_iou += ev.report.iou->mean;
      ++labeled;
    }
  }
  const double dn = static_cast<double>(n);
  agg.chamfer_l1_scaled /= dn;
  agg.chamfer_l2_scaled /= dn;
  agg.fscore_at_1pct /= dn;

  std::string kv = "samples=" + std::to_string(n) + "\n" + agg.to_kv() +
                   "chamfer_l1_raw=" + detail::fmt(l1_raw / dn) + "\n" +
                   "chamfer_l2_raw=" + detail::fmt(l2_raw / dn) + "\n";
  if (labeled > 0)
    kv += "mean_iou=" + detail::fmt(mean_iou / static_cast<double>(labeled)) + "\n";
  detail::write_text(cfg.out_dir / "report.kv", kv);

  nlohmann::json jr = agg.to_json();
  jr["samples"] = n;
  jr["chamfer_l1_raw"] = l1_raw / dn;
  jr["chamfer_l2_raw"] = l2_raw / dn;
  if (labeled > 0) jr["mean_iou"] = mean_iou / static_cast<double>(labeled);
  detail::write_text(cfg.out_dir / "report.json", jr.dump(2) + "\n");

  std::cout << kv;
  return kExitOk;
}

inline int cmd_eval(const RunConfig& cfg) {
  if (cfg.checkpoint.empty()) throw ConfigError("eval requires a checkpoint");
  detail::echo_config(cfg);
  model::Model m = detail::load_model_checked(cfg);

  detail::Prepared data = detail::prepare_data(cfg, m.config());
  if (data.samples.empty()) {
    const std::string kv = "samples=0\nempty=1\n";
    detail::write_text(cfg.out_dir / "report.kv", kv);
    detail::write_text(cfg.out_dir / "report.json", "{\"samples\": 0, \"empty\": true}\n");
    std::cout << kv;
    return kExitOk;
  }

  std::string per_sample;
  metric::MetricReport agg;
  double l1_raw = 0, l2_raw = 0, mean_iou = 0;
  std::size_t labeled = 0;
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    const auto& s = data.samples[i];
    const model::ForwardResult fwd = m.forward(s.partial);
    std::vector<int> pred_labels;
    if (!fwd.class_probs.empty())
      pred_labels = detail::argmax_labels(fwd.class_probs, fwd.points.size(),
                                          m.config().num_classes);
    const detail::SampleEval ev = detail::evaluate_sample(fwd.points, pred_labels, s.complete,
                                                          s.labels, data.num_classes, cfg);
    per_sample += "sample=" + data.stems[i] +
                  " chamfer_l1_scaled=" + detail::fmt(ev.report.chamfer_l1_scaled) +
                  " chamfer_l2_scaled=" + detail::fmt(ev.report.chamfer_l2_scaled) +
                  " fscore_at_1pct=" + detail::fmt(ev.report.fscore_at_1pct);
    if (ev.report.iou) per_sample += " mean_iou=" + detail::fmt(ev.report.iou->mean);
    per_sample += "\n";
    agg.chamfer_l1_scaled += ev.report.chamfer_l1_scaled;
    agg.chamfer_l2_scaled += ev.report.chamfer_l2_scaled;
    agg.fscore_at_1pct += ev.report.fscore_at_1pct;
    l1_raw += ev.chamfer_l1_raw;
    l2_raw += ev.chamfer_l2_raw;
    if (ev.report.iou) {
      mean_iou += ev.report.iou->mean;
      ++labeled;
    }
  }
  const double dn = static_cast<double>(data.samples.size());
  agg.chamfer_l1_scaled /= dn;
  agg.chamfer_l2_scaled /= dn;
  agg.fscore_at_1pct /= dn;

  std::string kv = "samples=" + std::to_string(data.samples.size()) + "\n" + agg.to_kv() +
                   "chamfer_l1_raw=" + detail::fmt(l1_raw / dn) + "\n" +
                   "chamfer_l2_raw=" + detail::fmt(l2_raw / dn) + "\n";
  if (labeled > 0)
    kv += "mean_iou=" + detail::fmt(mean_iou / static_cast<double>(labeled)) + "\n";
  detail::write_text(cfg.out_dir / "per_sample.txt", per_sample);
  detail::write_text(cfg.out_dir / "report.kv", kv);

  nlohmann::json jr = agg.to_json();
  jr["samples"] = data.samples.size();
  jr["chamfer_l1_raw"] = l1_raw / dn;
  jr["chamfer_l2_raw"] = l2_raw / dn;
  if (labeled > 0) jr["mean_iou"] = mean_iou / static_cast<double>(labeled);
  detail::write_text(cfg.out_dir / "report.json", jr.dump(2) + "\n");

  std::cout << kv;
  return kExitOk;
}

inline int cmd_complete(const RunConfig& cfg) {
  if (cfg.checkpoint.empty()) throw ConfigError("complete requires a checkpoint");
  if (cfg.input.empty()) throw ConfigError("complete requires an input cloud");
  detail::echo_config(cfg);

  // The checkpoint's architecture is authoritative here; no preset comparison.
  model::Model m = model::Model::load_checkpoint(cfg.checkpoint.string());

  LabeledCloud in = ply::read_ply(cfg.input.string());
  if (in.points.empty()) throw ParseError("complete: input '" + cfg.input.string() + "' is empty");
  std::vector<int> in_labels; // input labels are not consumed
  detail::resample_warned(in.points, in_labels, m.config().input_count, cfg.seed, "input cloud");

  const auto [normalized, transform] = data::normalize(in.points);
  const model::ForwardResult fwd = m.forward(normalized);
  const Cloud restored = transform.invert(fwd.points);

  std::vector<int> labels;
  if (!fwd.class_probs.empty())
    labels = detail::argmax_labels(fwd.class_probs, fwd.points.size(), m.config().num_classes);

  ply::write_ply((cfg.out_dir / "completed.ply").string(), restored, labels);
  detail::write_text(cfg.out_dir / "completed.txt", detail::plot_text(restored, labels));
  std::cout << "completed " << restored.size() << " points -> "
            << (cfg.out_dir / "completed.ply").string() << "\n";
  return kExitOk;
}

/// Gradient verification over the standard target suite (or an injected one,
/// which is how tests plant known-bad gradients).
inline int cmd_gradcheck(const RunConfig& cfg,
                         const std::vector<gradcheck::Target>* injected = nullptr) {
  const std::vector<gradcheck::Target> suite =
      injected ? *injected : gradcheck::standard_suite(cfg.seed);
  const std::vector<gradcheck::Result> results = gradcheck::check_all(suite, cfg.seed);
  bool all_ok = true;
  for (const auto& r : results) {
    std::cout << gradcheck::format_row(r) << "\n";
    all_ok = all_ok && r.pass;
  }
  std::cout << (all_ok ? "gradcheck: all targets ok" : "gradcheck: FAILURES above") << "\n";
  return all_ok ? kExitOk : kExitNumeric;
}

} // namespace displace::cli
