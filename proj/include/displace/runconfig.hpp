#pragma once

// Run configuration: a JSON document shared by all subcommands, covering
// architecture selection (preset or inline layer list), data source (dataset
// directory or synthetic generator), training hyperparameters, and
// evaluation settings. Command-line flags override individual fields; the
// effective configuration is echoed into the output directory.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "displace/data.hpp"
#include "displace/errors.hpp"
#include "displace/metrics.hpp"
#include "displace/model.hpp"

namespace displace::cli {

struct RunConfig {
  // architecture: inline definition wins over the preset name
  std::string preset = "desk"; // "desk" | "paper"
  std::optional<model::ArchitectureConfig> arch;
  std::size_t num_classes = 0; // class head width for the desk preset

  std::uint64_t seed = 0;
  std::filesystem::path out_dir = "out";
  std::filesystem::path checkpoint; // load path; training resumes from it

  // data: a dataset directory, or the synthetic generator when absent
  std::filesystem::path dataset_root;
  std::string split = "train";
  data::SyntheticSpec synthetic;

  // training
  std::size_t steps = 1000;
  std::size_t batch_size = 1;
  std::size_t checkpoint_every = 250;
  double lr = 1e-4;
  std::optional<double> lr_final; // cosine-decay floor; absent = constant rate
  model::LossWeights weights;

  // evaluation
  metric::ReportScale scale = metric::ReportScale::DenseBenchmark;
  std::size_t voxel_resolution = 32;

  // completion input
  std::filesystem::path input;

  std::size_t workers = 1;
};

inline model::ArchitectureConfig resolve_architecture(const RunConfig& cfg) {
  if (cfg.arch) return *cfg.arch;
  if (cfg.preset == "desk") return model::ArchitectureConfig::desk(cfg.num_classes);
  if (cfg.preset == "paper") return model::ArchitectureConfig::paper();
  throw ConfigError("unknown architecture preset '" + cfg.preset + "'");
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  try {
    c.preset = j.value("preset", c.preset);
    if (j.contains("architecture")) c.arch = model::config_from_json(j.at("architecture"));
    c.num_classes = j.value("num_classes", c.num_classes);
    c.seed = j.value("seed", c.seed);
    c.out_dir = j.value("out_dir", c.out_dir.string());
    c.checkpoint = j.value("checkpoint", c.checkpoint.string());
    c.dataset_root = j.value("dataset_root", c.dataset_root.string());
    c.split = j.value("split", c.split);
    if (j.contains("synthetic")) {
      const auto& s = j.at("synthetic");
      c.synthetic.family = data::family_from_name(s.value("family", "box"));
      c.synthetic.partial_count = s.value("partial_count", c.synthetic.partial_count);
      c.synthetic.complete_count = s.value("complete_count", c.synthetic.complete_count);
      if (s.contains("camera")) {
        const auto& cam = s.at("camera");
        if (!cam.is_array() || cam.size() != 3)
          throw ConfigError("synthetic.camera must be an [x, y, z] array");
        for (int a = 0; a < 3; ++a) c.synthetic.camera[a] = cam[a].get<double>();
      }
      c.synthetic.seed = s.value("seed", c.synthetic.seed);
      c.synthetic.noise_sigma = s.value("noise_sigma", c.synthetic.noise_sigma);
      if (s.contains("class_ids"))
        c.synthetic.class_ids = s.at("class_ids").get<std::vector<int>>();
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      c.steps = t.value("steps", c.steps);
      c.batch_size = t.value("batch_size", c.batch_size);
      c.checkpoint_every = t.value("checkpoint_every", c.checkpoint_every);
      c.lr = t.value("lr", c.lr);
      if (t.contains("lr_final")) c.lr_final = t.at("lr_final").get<double>();
      if (t.contains("weights")) {
        const auto& w = t.at("weights");
        c.weights.out_to_gt = w.value("out_to_gt", c.weights.out_to_gt);
        c.weights.gt_to_out = w.value("gt_to_out", c.weights.gt_to_out);
        c.weights.order = w.value("order", c.weights.order);
        c.weights.semantic = w.value("semantic", c.weights.semantic);
      }
    }
    if (j.contains("eval")) {
      const auto& e = j.at("eval");
      const std::string scale = e.value("scale", "dense");
      if (scale == "dense")
        c.scale = metric::ReportScale::DenseBenchmark;
      else if (scale == "scene")
        c.scale = metric::ReportScale::SceneBenchmark;
      else
        throw ConfigError("eval.scale must be 'dense' or 'scene', got '" + scale + "'");
      c.voxel_resolution = e.value("voxel_resolution", c.voxel_resolution);
    }
    c.input = j.value("input", c.input.string());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }
  return c;
}

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j{
      {"preset", c.preset},
      {"num_classes", c.num_classes},
      {"seed", c.seed},
      {"out_dir", c.out_dir.string()},
      {"checkpoint", c.checkpoint.string()},
      {"dataset_root", c.dataset_root.string()},
      {"split", c.split},
      {"synthetic",
       {{"family", data::family_name(c.synthetic.family)},
        {"partial_count", c.synthetic.partial_count},
        {"complete_count", c.synthetic.complete_count},
        {"camera", {c.synthetic.camera[0], c.synthetic.camera[1], c.synthetic.camera[2]}},
        {"seed", c.synthetic.seed},
        {"noise_sigma", c.synthetic.noise_sigma},
        {"class_ids", c.synthetic.class_ids}}},
      {"train",
       {{"steps", c.steps},
        {"batch_size", c.batch_size},
        {"checkpoint_every", c.checkpoint_every},
        {"lr", c.lr},
        {"weights",
         {{"out_to_gt", c.weights.out_to_gt},
          {"gt_to_out", c.weights.gt_to_out},
          {"order", c.weights.order},
          {"semantic", c.weights.semantic}}}}},
      {"eval",
       {{"scale", c.scale == metric::ReportScale::DenseBenchmark ? "dense" : "scene"},
        {"voxel_resolution", c.voxel_resolution}}},
      {"input", c.input.string()}};
  if (c.lr_final) j["train"]["lr_final"] = *c.lr_final;
  if (c.arch) j["architecture"] = model::to_json(*c.arch);
  return j;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("run config: cannot open '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("run config '" + path.string() + "': " + e.what());
  }
  return run_config_from_json(j);
}

/// Worker-thread count: the DISPLACE_WORKERS environment variable, else 1.
inline std::size_t worker_count_from_env() {
  const char* env = std::getenv("DISPLACE_WORKERS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1)
    throw ConfigError(std::string("DISPLACE_WORKERS must be a positive integer, got '") + env +
                      "'");
  return static_cast<std::size_t>(v);
}

} // namespace displace::cli
