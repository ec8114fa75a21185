// calm: run, sweep, validate and report continual pre-training experiments.

#include <CLI11.hpp>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "calm/error.hpp"
#include "calm/experiment.hpp"
#include "calm/metrics.hpp"
#include "calm/synth.hpp"

namespace fs = std::filesystem;

namespace {

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> output_dir;
};

calm::ExperimentConfig load(const std::string& path, const Overrides& o) {
  calm::ExperimentConfig c = calm::load_config(path);
  if (o.seed) c.seed = *o.seed;
  if (o.output_dir) c.output_dir = *o.output_dir;
  return c;
}

bool report_invalid(const calm::ExperimentConfig& c) {
  const auto violations = calm::validate(c);
  for (const auto& v : violations) std::cerr << "violation: " << v << "\n";
  return !violations.empty();
}

int cmd_report(const fs::path& dir) {
  if (fs::is_regular_file(dir)) {
    std::cout << calm::render_table(calm::load_report(dir));
    return 0;
  }
  if (fs::exists(dir / "report.json")) {
    std::cout << calm::render_table(calm::load_report(dir / "report.json"));
    return 0;
  }
  std::vector<fs::path> found;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_directory() && fs::exists(entry.path() / "report.json")) found.push_back(entry.path() / "report.json");
  if (found.empty()) throw calm::IoError("no report.json under " + dir.string());
  std::sort(found.begin(), found.end());
  std::vector<calm::MetricsReport> reports;
  for (const auto& p : found) reports.push_back(calm::load_report(p));
  std::cout << calm::render_summary(reports);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TOP_PAD, 256 << 20);
#endif
  CLI::App app{"Continual masked-LM pre-training experiments"};
  app.require_subcommand(1);

  Overrides overrides;
  auto add_overrides = [&](CLI::App* cmd) {
    cmd->add_option("--seed", overrides.seed, "Override the run seed");
    cmd->add_option("--output-dir", overrides.output_dir, "Override the output directory");
  };

  std::string config_path;
  bool resume = false;
  auto* run = app.add_subcommand("run", "Run every stage of an experiment");
  run->add_option("config", config_path, "Experiment config (JSON)")->required();
  run->add_flag("--resume", resume, "Reuse completed stages found in the output directory");
  add_overrides(run);

  std::string grid_path;
  auto* sweep = app.add_subcommand("sweep", "Run a hyperparameter grid");
  sweep->add_option("config", config_path, "Base experiment config (JSON)")->required();
  sweep->add_option("--grid", grid_path, "Grid file (JSON)")->required();
  sweep->add_flag("--resume", resume, "Reuse completed stages found in the output directories");
  add_overrides(sweep);

  auto* validate = app.add_subcommand("validate", "Check a config without running it");
  validate->add_option("config", config_path, "Experiment config (JSON)")->required();
  add_overrides(validate);

  std::string report_dir;
  auto* report = app.add_subcommand("report", "Print the tables of a run or sweep directory");
  report->add_option("ledger-dir", report_dir, "Run or sweep output directory")->required();

  std::string style_name, synth_out;
  std::size_t synth_bytes = 2 << 20;
  std::uint64_t synth_seed = 0;
  auto* synth = app.add_subcommand("synth", "Write a synthetic corpus");
  synth->add_option("style", style_name, "prose, code or clinical")->required();
  synth->add_option("output", synth_out, "Output file")->required();
  synth->add_option("--bytes", synth_bytes, "Minimum size in bytes");
  synth->add_option("--seed", synth_seed, "Generator seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      const auto c = load(config_path, overrides);
      if (report_invalid(c)) return 2;
      calm::RunOptions options;
      options.resume = resume;
      const auto result = calm::run(c, options);
      std::cout << calm::render_table(result.report) << "report: " << result.report_path.string() << "\n";
    } else if (*sweep) {
      const auto c = load(config_path, overrides);
      if (report_invalid(c)) return 2;
      calm::RunOptions options;
      options.resume = resume;
      const auto result = calm::sweep(c, calm::load_grid(grid_path), options);
      std::cout << result.summary;
      if (!result.failures.empty()) return 1;
    } else if (*validate) {
      const auto c = load(config_path, overrides);
      if (report_invalid(c)) return 2;
      std::cout << "valid: " << c.stages.size() << " stage(s), " << c.domains.size() << " domain(s)\n";
    } else if (*report) {
      return cmd_report(report_dir);
    } else if (*synth) {
      auto style = calm::parse_synth_style(style_name);
      if (!style) {
        std::cerr << "error: unknown style '" << style_name << "'\n";
        return 2;
      }
      calm::write_synthetic_corpus(synth_out, *style, synth_bytes, synth_seed);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
