#pragma once

// Forgetting mitigation: elastic weight consolidation (Fisher diagonal and
// anchored quadratic penalty), its no-Fisher ablation, experience replay
// scheduling, and the per-step composition of a strategy with the optimizer.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "calm/autodiff.hpp"
#include "calm/container.hpp"
#include "calm/data.hpp"
#include "calm/model.hpp"
#include "calm/optim.hpp"

namespace calm {

/// Per-parameter mean of squared per-sample gradients, keyed by name.
struct FisherDiagonal {
  std::map<std::string, Tensor> values;
  std::size_t sample_count = 0;

  friend bool operator==(const FisherDiagonal&, const FisherDiagonal&) = default;
};

/// One completed task's consolidation state.
struct TaskPenalty {
  FisherDiagonal fisher;
  ModelSnapshot anchor;
  double lambda = 1.0;
  std::string task_id;

  friend bool operator==(const TaskPenalty&, const TaskPenalty&) = default;
};

enum class StrategyKind { none, mdl, ewc, ewc_no_fisher, lrc, er };
enum class ReplayMode { interval, epoch_end };
/// Which stored task penalties a later EWC stage trains against.
enum class PenaltyMode { accumulate, latest, first };

std::string_view to_string(StrategyKind kind);
std::string_view to_string(ReplayMode mode);
std::string_view to_string(PenaltyMode mode);
std::optional<StrategyKind> parse_strategy_kind(std::string_view name);
std::optional<ReplayMode> parse_replay_mode(std::string_view name);
std::optional<PenaltyMode> parse_penalty_mode(std::string_view name);

struct EwcOptions {
  double lambda = 1.0;
  double fisher_fraction = 0.001;
  PenaltyMode penalty_mode = PenaltyMode::accumulate;
  friend bool operator==(const EwcOptions&, const EwcOptions&) = default;
};

struct ReplayOptions {
  ReplayMode mode = ReplayMode::epoch_end;
  std::size_t interval_steps = 1000;
  std::size_t updates_per_event = 10;
  /// Share of the source domain's training windows kept for replay.
  double buffer_fraction = 0.001;
  friend bool operator==(const ReplayOptions&, const ReplayOptions&) = default;
};

struct StrategyConfig {
  StrategyKind kind = StrategyKind::none;
  EwcOptions ewc;
  ReplayOptions er;
  /// Mixing weights for mdl; empty means proportional to training windows.
  std::vector<double> mdl_weights;
  friend bool operator==(const StrategyConfig&, const StrategyConfig&) = default;
};

bool uses_penalty(StrategyKind kind);

// --- Fisher ----------------------------------------------------------------

/// Runs `backward_sample(j)` for j in [0, n) with gradients zeroed before
/// each call and averages the squared gradients left in `params`. Partial
/// sums are formed over fixed chunks of samples and combined pairwise in
/// chunk order. Gradients are zero on return. Throws ContractError if n == 0.
FisherDiagonal fisher_from_samples(std::span<Parameter> params, std::size_t n,
                                   const std::function<void(std::size_t)>& backward_sample);

struct FisherOptions {
  std::size_t seq_len = 64;
  double mask_prob = 0.15;
  /// Worker replicas for the per-sample passes; the result does not depend on it.
  std::size_t workers = 1;
};

/// Empirical Fisher diagonal of the masked-LM loss over
/// N = ceil(fraction * window_count) windows drawn without replacement, each
/// masked and evaluated as its own batch of one. Samples whose draw masks no
/// position are skipped and do not count toward N.
FisherDiagonal compute_fisher(MlmModel& model, const Corpus& corpus, double fraction, std::uint64_t seed,
                              const FisherOptions& options = {});

/// Number of Fisher samples for a corpus of `window_count` windows.
std::size_t fisher_sample_count(double fraction, std::size_t window_count);

// --- EWC penalty -----------------------------------------------------------

/// Sum over tasks and parameters of lambda * F * (theta - anchor)^2, recorded
/// as one differentiable op over `params`. Throws ContractError when
/// `penalties` is empty or a task's names or shapes do not match `params`.
Var ewc_penalty(Tape& tape, std::span<Parameter> params, std::span<const TaskPenalty> penalties);

/// Penalty with a unit Fisher, i.e. lambda * ||theta - anchor||^2.
TaskPenalty make_no_fisher_penalty(const ModelSnapshot& anchor, double lambda, std::string task_id = {});

Container to_container(const TaskPenalty& penalty);
TaskPenalty penalty_from_container(const Container& c);

// --- Replay ----------------------------------------------------------------

struct ReplayEvent {
  std::size_t step = 0;
  std::size_t updates = 0;
  friend bool operator==(const ReplayEvent&, const ReplayEvent&) = default;
};

/// Replay batches needed to cover `fraction` of `source_windows`, at least 1.
std::size_t replay_batch_count(double fraction, std::size_t source_windows, std::size_t batch_size);

/// Replay events within one epoch of `epoch_len` steps. Interval mode fires
/// every interval_steps; epoch_end fires once at epoch_len with enough
/// batches to cover buffer_fraction of the source windows.
std::vector<ReplayEvent> replay_plan(const ReplayOptions& options, std::size_t epoch_len,
                                     std::size_t source_windows = 0, std::size_t batch_size = 1);

/// Buffer size used by a replay configuration.
std::size_t replay_capacity(const ReplayOptions& options, std::size_t source_windows, std::size_t batch_size);

// --- Training step ---------------------------------------------------------

struct StepMetrics {
  std::size_t step = 0;
  double loss = 0.0;
  double penalty = 0.0;
  double lr = 0.0;
  std::size_t replayed_batches = 0;
};

/// Mutable state of one stage of continual training.
struct ContinualContext {
  MlmModel* model = nullptr;
  AdamState adam;
  TrainingSchedule schedule;
  StrategyConfig strategy;
  /// Required for ewc and ewc_no_fisher.
  std::span<const TaskPenalty> penalties;
  /// Required for er.
  ReplayBuffer* replay = nullptr;
  /// Replay events relative to the start of each epoch.
  std::vector<ReplayEvent> plan;
  std::size_t steps_per_epoch = 0;

  /// Optimizer updates taken so far, replay updates included.
  std::size_t updates = 0;
  /// Main-stream batches consumed in the current epoch.
  std::size_t epoch_step = 0;
};

/// Throws ContractError when the context lacks what its strategy needs.
void check_context(const ContinualContext& ctx);

/// One training update on `batch` (plus the EWC penalty for EWC strategies),
/// followed by any replay updates the plan schedules after this batch. Replay
/// updates are plain masked-LM steps at the learning rate of their own update
/// index. Throws EmptyLossError, leaving the model untouched, if the batch has
/// no targets.
StepMetrics continual_step(ContinualContext& ctx, const TokenBatch& batch);

}  // namespace calm
