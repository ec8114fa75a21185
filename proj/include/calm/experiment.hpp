#pragma once

// Configuration-driven continual pre-training runs: stages of training under
// a forgetting-mitigation strategy, evaluation checkpoints, persisted stage
// artifacts with resume, and grid sweeps over strategy hyperparameters.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "calm/continual.hpp"
#include "calm/metrics.hpp"
#include "calm/model.hpp"
#include "calm/optim.hpp"

namespace calm {

struct DomainSpec {
  std::string domain_id;
  std::filesystem::path path;
  friend bool operator==(const DomainSpec&, const DomainSpec&) = default;
};

struct StageConfig {
  std::vector<std::string> train_domains;
  StrategyConfig strategy;
  std::size_t epochs = 1;
  std::size_t batch_size = 16;
  std::size_t seq_len = 64;
  double mask_prob = 0.15;
  /// Cap on batches per epoch; 0 means one full pass over the training windows.
  std::size_t max_steps_per_epoch = 0;
  /// total_steps is derived from the stage length when the stage runs.
  TrainingSchedule schedule;
  friend bool operator==(const StageConfig&, const StageConfig&) = default;
};

struct EvalConfig {
  double mask_prob = 0.15;
  std::size_t seq_len = 64;
  std::size_t batch_size = 32;
  /// Defaults to a substream of the run seed.
  std::optional<std::uint64_t> eval_seed;
  friend bool operator==(const EvalConfig&, const EvalConfig&) = default;
};

/// model.vocab_size and model.seed are not part of the file format; the
/// runner takes them from the corpora and the run seed.
struct ExperimentConfig {
  std::string name = "run";
  ModelConfig model;
  std::vector<DomainSpec> domains;
  std::vector<StageConfig> stages;
  EvalConfig eval;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir;
  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

/// Parses JSON (comments allowed). Relative corpus paths and output_dir are
/// resolved against `base_dir` when it is non-empty. Throws DataError on
/// malformed input, unknown keys or unknown enum names.
ExperimentConfig parse_config(const std::string& text, const std::filesystem::path& base_dir = {});
ExperimentConfig load_config(const std::filesystem::path& path);
std::string serialize_config(const ExperimentConfig& config);

/// Every schema and invariant violation; empty means the config is runnable.
std::vector<std::string> validate(const ExperimentConfig& config);

/// Worker cap from CALM_THREADS, else the hardware concurrency (at least 1).
std::size_t thread_budget();

struct LedgerEntry {
  std::size_t stage = 0;
  std::size_t step = 0;
  double loss = 0.0;
  double penalty = 0.0;
  double lr = 0.0;
  std::size_t replayed_batches = 0;
};

/// Append-only JSON-lines log of training steps and checkpoint files. Steps
/// must increase strictly within a stage. Every line is flushed.
class RunLedger {
 public:
  RunLedger() = default;
  /// Truncates `path`.
  explicit RunLedger(const std::filesystem::path& path);

  /// Throws ContractError when the step does not increase.
  void append(const LedgerEntry& entry);
  void checkpoint(std::size_t stage, const std::string& label, const std::filesystem::path& file);

 private:
  void write(const std::string& line);

  std::ofstream out_;
  std::filesystem::path path_;
  std::optional<std::size_t> last_stage_;
  std::size_t last_step_ = 0;
};

/// One read of corpus tokens, as reported by the access-audit hook.
struct AccessRecord {
  /// Training stage during which the read happened.
  std::size_t stage = 0;
  /// "train", "eval" or "transition".
  std::string phase;
  std::string domain_id;
  std::string purpose;
  friend bool operator==(const AccessRecord&, const AccessRecord&) = default;
};

struct RunOptions {
  /// Reuse persisted stage artifacts whose configuration prefix matches.
  bool resume = false;
  /// Stop after this many stages (simulates an interrupted run).
  std::optional<std::size_t> stop_after_stages;
  /// 0 means thread_budget().
  std::size_t threads = 0;
  /// Keep one AccessRecord per distinct (stage, phase, domain, purpose).
  bool record_access = false;
};

struct RunResult {
  MetricsReport report;
  std::filesystem::path report_path;
  std::filesystem::path final_model_path;
  /// Stages trained in this invocation (resumed stages excluded).
  std::size_t stages_trained = 0;
  std::vector<AccessRecord> accesses;
};

/// Runs every stage in order. Output directory layout:
///   config.json, ledger.jsonl, report.json, report.txt, final.calm,
///   init/ and stage<k>/ with checkpoint.json, model.calm (stages only),
///   fingerprint.json and ledger.jsonl; penalties/task<k>.calm.
/// Throws ContractError listing the violations of an invalid config before
/// any compute.
RunResult run(const ExperimentConfig& config, const RunOptions& options = {});

struct SweepGrid {
  std::vector<double> lambdas;
  std::vector<double> fisher_fractions;
  std::vector<ReplayMode> replay_modes;
};

/// JSON object with optional arrays "lambda", "fisher_fraction" and
/// "replay_mode". Throws DataError on malformed input.
SweepGrid parse_grid(const std::string& text);
SweepGrid load_grid(const std::filesystem::path& path);

/// Grid points: the cartesian product of the non-empty axes, as configs with
/// derived names and output directories. Throws ContractError when every
/// axis is empty.
std::vector<ExperimentConfig> expand_grid(const ExperimentConfig& base, const SweepGrid& grid);

struct SweepFailure {
  std::string run_id;
  std::string message;
};

struct SweepResult {
  /// Completed runs, best first.
  std::vector<MetricsReport> ranked;
  std::vector<SweepFailure> failures;
  std::string summary;
};

/// Ranks by (ratio of the first stage's domain, final perplexity of the last
/// stage's domain), both ascending; reports lacking a key sort last.
void rank_reports(std::vector<MetricsReport>& reports, const std::string& source_domain,
                  const std::string& target_domain);

/// One run per grid point; a failing run is recorded and the sweep goes on.
/// Writes summary.txt under the base output directory.
SweepResult sweep(const ExperimentConfig& base, const SweepGrid& grid, const RunOptions& options = {});

}  // namespace calm
