#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <optional>
#include <vector>

#include "calm/autodiff.hpp"
#include "calm/container.hpp"

namespace calm {

enum class ScheduleKind { polynomial, stlr };

std::string_view to_string(ScheduleKind kind);
std::optional<ScheduleKind> parse_schedule_kind(std::string_view name);

/// Learning-rate policy over `total_steps` updates plus the per-layer-group
/// decay factor (1 disables layerwise control).
struct TrainingSchedule {
  ScheduleKind kind = ScheduleKind::polynomial;
  double base_lr = 1e-3;
  std::size_t total_steps = 1;
  double warmup_frac = 0.06;  // polynomial
  double cut_frac = 0.1;      // stlr
  double ratio = 32.0;        // stlr
  double layer_decay = 1.0;

  std::vector<std::string> violations() const;
  friend bool operator==(const TrainingSchedule&, const TrainingSchedule&) = default;
};

/// Learning rate at step t in [0, total_steps].
///
/// polynomial: linear warmup over floor(warmup_frac * T) steps, then linear
/// decay to 0 at T.
/// stlr: with cut = floor(cut_frac * T), p = t / cut up to the cut and
/// 1 - (t - cut) / (T - cut) after it; lr = base * (1 + p (ratio - 1)) / ratio.
/// The falling side's denominator equals cut (1/cut_frac - 1) whenever
/// cut_frac * T is whole, and otherwise still lands exactly on base / ratio
/// at T.
///
/// Throws ContractError for t outside [0, T] or an invalid schedule.
double lr_at(const TrainingSchedule& schedule, std::size_t t);

/// base / layer_decay^(top_group - group). Throws ContractError unless
/// 0 <= group <= top_group.
double layer_lr(const TrainingSchedule& schedule, double base, int group, int top_group);

/// Adam moments with bias correction and decoupled weight decay.
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::size_t step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
};

/// One update with the same learning rate for every parameter.
void adam_step(std::span<Parameter> params, AdamState& state, double lr);

/// One update at schedule step t, each parameter scaled by layer_lr for its
/// group. Throws NonFiniteError naming the first parameter whose gradient is
/// not finite; no parameter is modified in that case.
void adam_step(std::span<Parameter> params, AdamState& state, const TrainingSchedule& schedule, std::size_t t,
               int top_group);

Container to_container(const AdamState& state, std::span<const Parameter> params);
/// Throws CheckpointError when the moments do not match `params`.
AdamState adam_state_from_container(const Container& c, std::span<const Parameter> params);

}  // namespace calm
