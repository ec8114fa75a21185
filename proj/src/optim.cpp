#include "calm/optim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "calm/error.hpp"

namespace calm {

std::string_view to_string(ScheduleKind kind) { return kind == ScheduleKind::stlr ? "stlr" : "polynomial"; }

std::optional<ScheduleKind> parse_schedule_kind(std::string_view name) {
  if (name == "polynomial") return ScheduleKind::polynomial;
  if (name == "stlr") return ScheduleKind::stlr;
  return std::nullopt;
}

std::vector<std::string> TrainingSchedule::violations() const {
  std::vector<std::string> out;
  if (!(base_lr > 0.0)) out.push_back("base_lr must be > 0");
  if (total_steps < 1) out.push_back("total_steps must be >= 1");
  if (!(warmup_frac >= 0.0 && warmup_frac < 1.0)) out.push_back("warmup_frac must lie in [0, 1)");
  if (!(cut_frac > 0.0 && cut_frac < 1.0)) out.push_back("cut_frac must lie in (0, 1)");
  if (!(ratio > 1.0)) out.push_back("ratio must be > 1");
  if (!(layer_decay >= 1.0)) out.push_back("layer_decay must be >= 1");
  return out;
}

double lr_at(const TrainingSchedule& s, std::size_t t) {
  if (auto v = s.violations(); !v.empty()) throw ContractError("schedule: " + v.front());
  const std::size_t total = s.total_steps;
  if (t > total) {
    throw ContractError("lr_at: step " + std::to_string(t) + " outside [0, " + std::to_string(total) + "]");
  }
  const auto td = static_cast<double>(t);
  if (s.kind == ScheduleKind::polynomial) {
    const auto warmup = static_cast<std::size_t>(std::floor(s.warmup_frac * static_cast<double>(total)));
    if (t < warmup) return s.base_lr * td / static_cast<double>(warmup);
    return s.base_lr * static_cast<double>(total - t) / static_cast<double>(total - warmup);
  }
  std::size_t cut = static_cast<std::size_t>(std::floor(s.cut_frac * static_cast<double>(total)));
  cut = std::clamp<std::size_t>(cut, 1, total);
  if (t == cut) return s.base_lr;
  double p = 0.0;
  if (t < cut) {
    p = td / static_cast<double>(cut);
  } else {
    p = 1.0 - static_cast<double>(t - cut) / static_cast<double>(total - cut);
  }
  return s.base_lr * (1.0 + p * (s.ratio - 1.0)) / s.ratio;
}

double layer_lr(const TrainingSchedule& schedule, double base, int group, int top_group) {
  if (group < 0 || group > top_group) {
    throw ContractError("layer_lr: group " + std::to_string(group) + " outside [0, " + std::to_string(top_group) + "]");
  }
  if (schedule.layer_decay == 1.0) return base;
  return base / std::pow(schedule.layer_decay, top_group - group);
}

namespace {

template <typename LrFn>
void adam_update(std::span<Parameter> params, AdamState& state, LrFn&& lr_for) {
  for (const auto& p : params) check_finite(p.grad, "gradient of " + p.name);
  if (state.m.size() != params.size()) {
    state.m.clear();
    state.v.clear();
    for (const auto& p : params) {
      state.m.emplace_back(p.value.shape());
      state.v.emplace_back(p.value.shape());
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = params[i];
    if (state.m[i].shape() != p.value.shape()) {
      throw ContractError("adam: moment shape mismatch for " + p.name);
    }
    const double lr = lr_for(p);
    auto theta = p.value.data();
    auto g = p.grad.data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    for (std::size_t j = 0; j < theta.size(); ++j) {
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      theta[j] -= lr * (m_hat / (std::sqrt(v_hat) + state.eps) + state.weight_decay * theta[j]);
    }
  }
}

}  // namespace

void adam_step(std::span<Parameter> params, AdamState& state, double lr) {
  adam_update(params, state, [lr](const Parameter&) { return lr; });
}

void adam_step(std::span<Parameter> params, AdamState& state, const TrainingSchedule& schedule, std::size_t t,
               int top_group) {
  const double base = lr_at(schedule, t);
  adam_update(params, state,
              [&](const Parameter& p) { return layer_lr(schedule, base, p.layer_group, top_group); });
}

namespace {

std::string format_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

}  // namespace

Container to_container(const AdamState& state, std::span<const Parameter> params) {
  Container c;
  c.metadata["kind"] = "adam";
  c.metadata["beta1"] = format_double(state.beta1);
  c.metadata["beta2"] = format_double(state.beta2);
  c.metadata["eps"] = format_double(state.eps);
  c.metadata["weight_decay"] = format_double(state.weight_decay);
  c.metadata["step"] = std::to_string(state.step);
  for (std::size_t i = 0; i < state.m.size() && i < params.size(); ++i) {
    c.tensors.emplace_back("m." + params[i].name, state.m[i]);
    c.tensors.emplace_back("v." + params[i].name, state.v[i]);
  }
  return c;
}

AdamState adam_state_from_container(const Container& c, std::span<const Parameter> params) {
  if (c.meta("kind") != "adam") throw CheckpointError("container does not hold optimizer state");
  AdamState s;
  s.beta1 = std::stod(c.meta("beta1"));
  s.beta2 = std::stod(c.meta("beta2"));
  s.eps = std::stod(c.meta("eps"));
  s.weight_decay = std::stod(c.meta("weight_decay"));
  s.step = std::stoull(c.meta("step"));
  if (c.tensors.empty()) return s;
  if (c.tensors.size() != 2 * params.size()) throw CheckpointError("optimizer state covers a different parameter set");
  for (const auto& p : params) {
    const Tensor* m = c.find("m." + p.name);
    const Tensor* v = c.find("v." + p.name);
    if (!m || !v || m->shape() != p.value.shape() || v->shape() != p.value.shape()) {
      throw CheckpointError("optimizer state does not match parameter " + p.name);
    }
    s.m.push_back(*m);
    s.v.push_back(*v);
  }
  return s;
}

}  // namespace calm
