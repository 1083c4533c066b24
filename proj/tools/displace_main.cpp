// Command-line front end: train / eval / complete / gradcheck over a JSON
// run configuration, with flag overrides for the common fields.

#include <cstdint>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "displace/commands.hpp"
#include "displace/runconfig.hpp"

int main(int argc, char** argv) {
  CLI::App app{"learned local-displacement completion of partial point clouds"};
  app.require_subcommand(1);

  std::string config_path, out_dir, checkpoint, input;
  std::optional<std::uint64_t> seed;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON run configuration file");
    sub->add_option("--seed", seed, "random seed override");
    sub->add_option("--out", out_dir, "output directory override");
    sub->add_option("--checkpoint", checkpoint, "checkpoint file to load");
  };

  CLI::App* train = app.add_subcommand("train", "fit a model and write checkpoints");
  CLI::App* eval = app.add_subcommand("eval", "score a checkpoint against ground truth");
  CLI::App* complete = app.add_subcommand("complete", "complete one partial cloud");
  CLI::App* gradcheck =
      app.add_subcommand("gradcheck", "verify gradients against finite differences");
  for (CLI::App* sub : {train, eval, complete, gradcheck}) add_common(sub);
  complete->add_option("--input", input, "partial cloud to complete (.ply)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? displace::cli::kExitOk : displace::cli::kExitInput;
  }

  return displace::cli::run_guarded([&]() {
    displace::cli::RunConfig cfg;
    if (!config_path.empty()) cfg = displace::cli::load_run_config(config_path);
    if (seed) cfg.seed = *seed;
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    if (!checkpoint.empty()) cfg.checkpoint = checkpoint;
    if (!input.empty()) cfg.input = input;
    cfg.workers = displace::cli::worker_count_from_env();

    if (train->parsed()) return displace::cli::cmd_train(cfg);
    if (eval->parsed()) return displace::cli::cmd_eval(cfg);
    if (complete->parsed()) return displace::cli::cmd_complete(cfg);
    return displace::cli::cmd_gradcheck(cfg);
  });
}
