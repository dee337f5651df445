#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "cgnsde/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"cgnsde: conditional Gaussian neural SDE experiments"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "run an experiment from a JSON config");
  std::string config_path, out_dir, stage;
  std::optional<std::uint64_t> seed;
  bool dry_run = false, quiet = false;
  run->add_option("config", config_path, "experiment config (JSON)")->required();
  run->add_option("--out", out_dir, "output directory (overrides the config)");
  run->add_flag("--dry-run", dry_run, "print the resolved config and planned stages, then exit");
  run->add_option("--stage", stage, "run stages up to and including this one")
      ->check(CLI::IsMember({"data", "identify", "train", "assimilate", "evaluate"}));
  run->add_option("--seed", seed, "master seed (overrides the config)");
  run->add_flag("-q,--quiet", quiet, "no progress log");

  CLI11_PARSE(app, argc, argv);

  try {
    auto cfg = cgnsde::load_config(config_path);
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    if (seed) cfg.seed = *seed;
    cgnsde::RunOptions opt;
    if (!stage.empty()) opt.until = cgnsde::parse_stage(stage);
    opt.log = quiet ? nullptr : &std::cerr;
    opt.write_files = !dry_run;
    cgnsde::ExperimentRunner runner(cfg, opt);
    if (dry_run) {
      std::cout << cgnsde::config_to_json(runner.config()).dump(2) << '\n' << runner.plan();
      return 0;
    }
    runner.run();
    std::cout << "wrote " << runner.files().size() << " files to " << cfg.out_dir << '\n';
    if (!runner.metrics().empty()) {
      std::cout << cgnsde::read_text_file((std::filesystem::path(cfg.out_dir) / "metrics.csv").string());
    }
  } catch (const cgnsde::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
