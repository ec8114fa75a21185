#include "calm/continual.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <thread>

#include "calm/error.hpp"
#include "calm/rng.hpp"

namespace calm {

std::string_view to_string(StrategyKind kind) {
  switch (kind) {
    case StrategyKind::none: return "none";
    case StrategyKind::mdl: return "mdl";
    case StrategyKind::ewc: return "ewc";
    case StrategyKind::ewc_no_fisher: return "ewc_no_fisher";
    case StrategyKind::lrc: return "lrc";
    case StrategyKind::er: return "er";
  }
  return "none";
}

std::string_view to_string(ReplayMode mode) { return mode == ReplayMode::interval ? "interval" : "epoch_end"; }

std::string_view to_string(PenaltyMode mode) {
  switch (mode) {
    case PenaltyMode::accumulate: return "accumulate";
    case PenaltyMode::latest: return "latest";
    case PenaltyMode::first: return "first";
  }
  return "accumulate";
}

std::optional<StrategyKind> parse_strategy_kind(std::string_view name) {
  for (auto k : {StrategyKind::none, StrategyKind::mdl, StrategyKind::ewc, StrategyKind::ewc_no_fisher,
                 StrategyKind::lrc, StrategyKind::er}) {
    if (to_string(k) == name) return k;
  }
  return std::nullopt;
}

std::optional<ReplayMode> parse_replay_mode(std::string_view name) {
  if (name == "interval") return ReplayMode::interval;
  if (name == "epoch_end") return ReplayMode::epoch_end;
  return std::nullopt;
}

std::optional<PenaltyMode> parse_penalty_mode(std::string_view name) {
  for (auto m : {PenaltyMode::accumulate, PenaltyMode::latest, PenaltyMode::first}) {
    if (to_string(m) == name) return m;
  }
  return std::nullopt;
}

bool uses_penalty(StrategyKind kind) { return kind == StrategyKind::ewc || kind == StrategyKind::ewc_no_fisher; }

// ---------------------------------------------------------------------------
// Fisher

namespace {

constexpr std::size_t kFisherChunk = 8;

using Accumulator = std::vector<Tensor>;

Accumulator zeros_like(std::span<const Parameter> params) {
  Accumulator acc;
  acc.reserve(params.size());
  for (const auto& p : params) acc.emplace_back(p.value.shape());
  return acc;
}

// Squared-gradient sum over samples [begin, end), in sample order.
Accumulator accumulate_chunk(std::span<Parameter> params, std::size_t begin, std::size_t end,
                             const std::function<void(std::size_t)>& backward_sample) {
  Accumulator acc = zeros_like(params);
  for (std::size_t j = begin; j < end; ++j) {
    zero_grads(params);
    backward_sample(j);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto g = params[i].grad.data();
      auto a = acc[i].data();
      for (std::size_t k = 0; k < g.size(); ++k) a[k] += g[k] * g[k];
    }
  }
  zero_grads(params);
  return acc;
}

// Pairwise combination in chunk order: ((c0 + c1) + (c2 + c3)) + ...
Accumulator combine_chunks(std::vector<Accumulator> chunks) {
  while (chunks.size() > 1) {
    std::vector<Accumulator> next;
    next.reserve((chunks.size() + 1) / 2);
    for (std::size_t c = 0; c + 1 < chunks.size(); c += 2) {
      Accumulator& left = chunks[c];
      const Accumulator& right = chunks[c + 1];
      for (std::size_t i = 0; i < left.size(); ++i) {
        auto l = left[i].data();
        auto r = right[i].data();
        for (std::size_t k = 0; k < l.size(); ++k) l[k] += r[k];
      }
      next.push_back(std::move(left));
    }
    if (chunks.size() % 2 == 1) next.push_back(std::move(chunks.back()));
    chunks = std::move(next);
  }
  return std::move(chunks.front());
}

FisherDiagonal finalize(std::span<const Parameter> params, Accumulator total, std::size_t n) {
  FisherDiagonal f;
  f.sample_count = n;
  const double inv = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (double& v : total[i].data()) v *= inv;
    f.values.emplace(params[i].name, std::move(total[i]));
  }
  return f;
}

std::size_t chunk_count(std::size_t n) { return (n + kFisherChunk - 1) / kFisherChunk; }

}  // namespace

FisherDiagonal fisher_from_samples(std::span<Parameter> params, std::size_t n,
                                   const std::function<void(std::size_t)>& backward_sample) {
  if (n == 0) throw ContractError("fisher: need at least one sample");
  std::vector<Accumulator> chunks;
  for (std::size_t c = 0; c < chunk_count(n); ++c) {
    chunks.push_back(accumulate_chunk(params, c * kFisherChunk, std::min(n, (c + 1) * kFisherChunk), backward_sample));
  }
  return finalize(params, combine_chunks(std::move(chunks)), n);
}

std::size_t fisher_sample_count(double fraction, std::size_t window_count) {
  return static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(window_count) - 1e-9));
}

FisherDiagonal compute_fisher(MlmModel& model, const Corpus& corpus, double fraction, std::uint64_t seed,
                              const FisherOptions& options) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ContractError("compute_fisher: fraction must lie in (0, 1]");
  const IdMatrix windows = make_windows(corpus, options.seq_len, "fisher");
  const std::size_t wanted = fisher_sample_count(fraction, windows.rows);
  if (wanted == 0) throw ContractError("compute_fisher: corpus " + corpus.domain_id() + " yields no sample");

  std::vector<std::size_t> order(windows.rows);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng pick(derive_seed(seed, "fisher"));
  pick.shuffle(order);

  std::vector<TokenBatch> samples;
  for (std::size_t j = 0; j < wanted; ++j) {
    IdMatrix seq(1, options.seq_len);
    std::copy_n(windows.values.begin() + static_cast<std::ptrdiff_t>(order[j] * options.seq_len), options.seq_len,
                seq.values.begin());
    Rng mask_rng(derive_seed(derive_seed(seed, "fisher-mask"), j));
    TokenBatch b = mask_batch(seq, options.mask_prob, mask_rng, corpus.vocab_size(), corpus.domain_id());
    if (b.target_count() > 0) samples.push_back(std::move(b));
  }
  if (samples.empty()) throw ContractError("compute_fisher: no sample has a masked position");
  const std::size_t n = samples.size();

  auto sample_fn = [&samples](MlmModel& m) {
    return [&samples, &m](std::size_t j) {
      Tape tape;
      tape.backward(m.mlm_loss(tape, samples[j]));
    };
  };

  const std::size_t chunks = chunk_count(n);
  const std::size_t workers = std::clamp<std::size_t>(options.workers, 1, chunks);
  std::vector<Accumulator> partial(chunks);
  if (workers == 1) {
    auto fn = sample_fn(model);
    for (std::size_t c = 0; c < chunks; ++c) {
      partial[c] = accumulate_chunk(model.parameters(), c * kFisherChunk, std::min(n, (c + 1) * kFisherChunk), fn);
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          MlmModel replica = model;
          auto fn = sample_fn(replica);
          for (std::size_t c = next++; c < chunks; c = next++) {
            partial[c] = accumulate_chunk(replica.parameters(), c * kFisherChunk, std::min(n, (c + 1) * kFisherChunk), fn);
          }
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  zero_grads(model.parameters());
  return finalize(model.parameters(), combine_chunks(std::move(partial)), n);
}

// ---------------------------------------------------------------------------
// EWC penalty

Var ewc_penalty(Tape& tape, std::span<Parameter> params, std::span<const TaskPenalty> penalties) {
  if (penalties.empty()) throw ContractError("ewc_penalty: no task penalties");
  struct Term {
    const double* fisher;
    const double* anchor;
    double lambda;
  };
  // terms[t * params.size() + i] belongs to task t, parameter i.
  std::vector<Term> terms;
  terms.reserve(penalties.size() * params.size());
  for (const auto& task : penalties) {
    if (task.fisher.values.size() != params.size() || task.anchor.size() != params.size()) {
      throw ContractError("ewc_penalty: task '" + task.task_id + "' does not cover the model's parameters");
    }
    for (const auto& p : params) {
      auto f = task.fisher.values.find(p.name);
      auto a = task.anchor.find(p.name);
      if (f == task.fisher.values.end() || a == task.anchor.end() || f->second.shape() != p.value.shape() ||
          a->second.shape() != p.value.shape()) {
        throw ContractError("ewc_penalty: task '" + task.task_id + "' does not match parameter " + p.name);
      }
      terms.push_back({f->second.data().data(), a->second.data().data(), task.lambda});
    }
  }

  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (auto& p : params) leaves.push_back(tape.parameter(p));

  const std::size_t n_params = params.size();
  double total = 0.0;
  for (std::size_t t = 0; t < penalties.size(); ++t) {
    double task_sum = 0.0;
    for (std::size_t i = 0; i < n_params; ++i) {
      const Term& term = terms[t * n_params + i];
      auto theta = params[i].value.data();
      for (std::size_t k = 0; k < theta.size(); ++k) {
        const double d = theta[k] - term.anchor[k];
        task_sum += term.fisher[k] * d * d;
      }
    }
    total += penalties[t].lambda * task_sum;
  }

  const std::size_t n_tasks = penalties.size();
  return tape.record(Tensor::scalar(total), leaves,
                     [leaves, terms = std::move(terms), n_tasks, n_params](Tape& tp, const Tensor& g, const Tensor&) {
                       for (std::size_t i = 0; i < n_params; ++i) {
                         const Tensor& theta = tp.value(leaves[i]);
                         Tensor& grad = tp.grad(leaves[i]);
                         for (std::size_t t = 0; t < n_tasks; ++t) {
                           const Term& term = terms[t * n_params + i];
                           if (term.lambda == 0.0) continue;
                           const double s = 2.0 * term.lambda * g[0];
                           for (std::size_t k = 0; k < theta.size(); ++k) {
                             grad[k] += s * term.fisher[k] * (theta[k] - term.anchor[k]);
                           }
                         }
                       }
                     });
}

TaskPenalty make_no_fisher_penalty(const ModelSnapshot& anchor, double lambda, std::string task_id) {
  if (!(lambda > 0.0)) throw ContractError("make_no_fisher_penalty: lambda must be > 0");
  TaskPenalty p;
  p.anchor = anchor;
  p.lambda = lambda;
  p.task_id = std::move(task_id);
  for (const auto& [name, t] : anchor) p.fisher.values.emplace(name, Tensor(t.shape(), 1.0));
  return p;
}

namespace {

std::string format_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

}  // namespace

Container to_container(const TaskPenalty& penalty) {
  Container c;
  c.metadata["kind"] = "task_penalty";
  c.metadata["lambda"] = format_double(penalty.lambda);
  c.metadata["task_id"] = penalty.task_id;
  c.metadata["sample_count"] = std::to_string(penalty.fisher.sample_count);
  for (const auto& [name, t] : penalty.fisher.values) c.tensors.emplace_back("fisher." + name, t);
  for (const auto& [name, t] : penalty.anchor) c.tensors.emplace_back("anchor." + name, t);
  return c;
}

TaskPenalty penalty_from_container(const Container& c) {
  if (c.meta("kind") != "task_penalty") throw CheckpointError("container does not hold a task penalty");
  TaskPenalty p;
  p.lambda = std::stod(c.meta("lambda"));
  p.task_id = c.meta("task_id");
  p.fisher.sample_count = std::stoull(c.meta("sample_count"));
  for (const auto& [name, t] : c.tensors) {
    if (name.starts_with("fisher.")) {
      p.fisher.values.emplace(name.substr(7), t);
    } else if (name.starts_with("anchor.")) {
      p.anchor.emplace(name.substr(7), t);
    } else {
      throw CheckpointError("unexpected tensor '" + name + "' in task penalty");
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Replay

std::size_t replay_batch_count(double fraction, std::size_t source_windows, std::size_t batch_size) {
  if (batch_size == 0) throw ContractError("replay: batch_size must be positive");
  const std::size_t windows = fisher_sample_count(fraction, source_windows);
  return std::max<std::size_t>(1, (windows + batch_size - 1) / batch_size);
}

std::vector<ReplayEvent> replay_plan(const ReplayOptions& options, std::size_t epoch_len, std::size_t source_windows,
                                     std::size_t batch_size) {
  std::vector<ReplayEvent> plan;
  if (options.mode == ReplayMode::interval) {
    if (options.interval_steps == 0) throw ContractError("replay_plan: interval_steps must be >= 1");
    for (std::size_t s = options.interval_steps; s <= epoch_len; s += options.interval_steps) {
      plan.push_back({s, options.updates_per_event});
    }
  } else if (epoch_len > 0) {
    plan.push_back({epoch_len, replay_batch_count(options.buffer_fraction, source_windows, batch_size)});
  }
  return plan;
}

std::size_t replay_capacity(const ReplayOptions& options, std::size_t source_windows, std::size_t batch_size) {
  const std::size_t share = replay_batch_count(options.buffer_fraction, source_windows, batch_size);
  return options.mode == ReplayMode::interval ? std::max(share, options.updates_per_event) : share;
}

// ---------------------------------------------------------------------------
// Training step

void check_context(const ContinualContext& ctx) {
  if (!ctx.model) throw ContractError("continual_step: no model");
  if (uses_penalty(ctx.strategy.kind) && ctx.penalties.empty()) {
    throw ContractError("continual_step: strategy " + std::string(to_string(ctx.strategy.kind)) +
                        " needs task penalties");
  }
  if (ctx.strategy.kind == StrategyKind::er) {
    if (!ctx.replay || ctx.replay->empty()) throw ContractError("continual_step: strategy er needs a filled replay buffer");
    if (ctx.steps_per_epoch == 0) throw ContractError("continual_step: strategy er needs steps_per_epoch");
  }
}

StepMetrics continual_step(ContinualContext& ctx, const TokenBatch& batch) {
  check_context(ctx);
  if (batch.target_count() == 0) throw EmptyLossError("continual_step: batch has no prediction targets");
  MlmModel& model = *ctx.model;
  auto params = model.parameters();

  StepMetrics metrics;
  zero_grads(params);
  {
    Tape tape;
    Var loss = model.mlm_loss(tape, batch);
    metrics.loss = loss.value().item();
    if (uses_penalty(ctx.strategy.kind)) {
      Var penalty = ewc_penalty(tape, params, ctx.penalties);
      metrics.penalty = penalty.value().item();
      loss = add(loss, penalty);
    }
    tape.backward(loss);
  }
  metrics.lr = lr_at(ctx.schedule, ctx.updates);
  adam_step(params, ctx.adam, ctx.schedule, ctx.updates, model.top_group());
  ++ctx.updates;
  ++ctx.epoch_step;

  if (ctx.strategy.kind == StrategyKind::er) {
    for (const auto& event : ctx.plan) {
      if (event.step != ctx.epoch_step) continue;
      for (std::size_t u = 0; u < event.updates; ++u) {
        const TokenBatch& replay = ctx.replay->next_replay();
        if (replay.target_count() == 0) continue;
        zero_grads(params);
        Tape tape;
        tape.backward(model.mlm_loss(tape, replay));
        adam_step(params, ctx.adam, ctx.schedule, ctx.updates, model.top_group());
        ++ctx.updates;
        ++metrics.replayed_batches;
      }
    }
  }
  if (ctx.steps_per_epoch > 0 && ctx.epoch_step == ctx.steps_per_epoch) ctx.epoch_step = 0;
  metrics.step = ctx.updates;
  return metrics;
}

}  // namespace calm
