#include <catch_amalgamated.hpp>

#include <cmath>

#include "calm/continual.hpp"
#include "calm/error.hpp"
#include "support.hpp"

using namespace calm;
using calm::test::random_tensor;
using calm::test::rel_error;

namespace {

ModelConfig toy_config() {
  ModelConfig c;
  c.vocab_size = 5;
  c.d_model = 2;
  c.n_heads = 1;
  c.n_layers = 1;
  c.d_ff = 2;
  c.max_seq_len = 4;
  c.seed = 11;
  return c;
}

Corpus toy_corpus(std::size_t tokens, std::size_t vocab, std::uint64_t seed, std::string domain = "A") {
  Rng rng(seed);
  std::vector<std::int32_t> doc(tokens);
  for (auto& t : doc) t = static_cast<std::int32_t>(kFirstSymbolId + rng.below(vocab - kFirstSymbolId));
  return Corpus(std::move(domain), {doc}, vocab);
}

ModelConfig small_config(std::size_t vocab) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_layers = 1;
  c.d_ff = 16;
  c.max_seq_len = 8;
  c.seed = 1;
  return c;
}

}  // namespace

TEST_CASE("fisher of one scalar parameter") {
  std::vector<Parameter> params;
  params.emplace_back("w", Tensor(Shape{1}), 0);
  params.emplace_back("unused", Tensor(Shape{2}), 0);
  const double grads[] = {1.0, -3.0};
  const FisherDiagonal f = fisher_from_samples(params, 2, [&](std::size_t j) { params[0].grad[0] += grads[j]; });
  CHECK(f.values.at("w")[0] == 5.0);
  CHECK(f.values.at("unused").values() == std::vector<double>{0.0, 0.0});
  CHECK(f.sample_count == 2);
  CHECK(params[0].grad[0] == 0.0);
  CHECK_THROWS_AS(fisher_from_samples(params, 0, [](std::size_t) {}), ContractError);
}

TEST_CASE("fisher of a linear model equals the per-example average") {
  Rng rng(3);
  std::vector<Parameter> params;
  params.emplace_back("w", random_tensor({3}, rng), 0);
  std::vector<Tensor> xs;
  std::vector<double> ys;
  for (int j = 0; j < 8; ++j) {
    xs.push_back(random_tensor({3}, rng));
    ys.push_back(rng.uniform());
  }
  const FisherDiagonal f = fisher_from_samples(params, 8, [&](std::size_t j) {
    Tape tape;
    Var pred = sum(mul(tape.parameter(params[0]), tape.constant(xs[j])));
    Var err = add(pred, tape.constant(Tensor::scalar(-ys[j])));
    tape.backward(mul(err, err));
  });
  std::vector<double> expected(3, 0.0);
  for (int j = 0; j < 8; ++j) {
    double r = -ys[j];
    for (int i = 0; i < 3; ++i) r += params[0].value[i] * xs[j][i];
    for (int i = 0; i < 3; ++i) expected[i] += (2 * r * xs[j][i]) * (2 * r * xs[j][i]) / 8.0;
  }
  CHECK(rel_error(f.values.at("w").data(), expected) <= 1e-12);
}

TEST_CASE("compute_fisher matches a brute-force pass over the same samples") {
  MlmModel model(toy_config());
  REQUIRE(model.parameter_count() <= 100);
  const Corpus corpus = toy_corpus(4 * 60 - 1, 5, 9);
  const FisherOptions opts{4, 0.5, 1};
  const double fraction = 0.25;
  const std::uint64_t seed = 21;
  const FisherDiagonal f = compute_fisher(model, corpus, fraction, seed, opts);

  // Brute force: the same windows and masks, one plain backward each.
  const IdMatrix windows = make_windows(corpus, 4);
  std::vector<std::size_t> order(windows.rows);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng pick(derive_seed(seed, "fisher"));
  pick.shuffle(order);
  const std::size_t wanted = static_cast<std::size_t>(std::ceil(fraction * double(windows.rows)));
  std::map<std::string, std::vector<double>> total;
  std::size_t used = 0;
  for (std::size_t j = 0; j < wanted; ++j) {
    IdMatrix seq(1, 4);
    for (std::size_t c = 0; c < 4; ++c) seq.values[c] = windows.at(order[j], c);
    Rng mask_rng(derive_seed(derive_seed(seed, "fisher-mask"), j));
    const TokenBatch b = mask_batch(seq, 0.5, mask_rng, 5, "A");
    if (b.target_count() == 0) continue;
    ++used;
    zero_grads(model.parameters());
    Tape tape;
    tape.backward(model.mlm_loss(tape, b));
    for (const auto& p : model.parameters()) {
      auto& acc = total[p.name];
      acc.resize(p.grad.size(), 0.0);
      for (std::size_t i = 0; i < p.grad.size(); ++i) acc[i] += p.grad[i] * p.grad[i];
    }
  }
  REQUIRE(used == f.sample_count);
  for (const auto& p : model.parameters()) {
    std::vector<double> expected = total[p.name];
    for (double& v : expected) v /= double(used);
    INFO(p.name);
    CHECK(rel_error(f.values.at(p.name).data(), expected) <= 1e-12);
    for (double v : f.values.at(p.name).data()) CHECK(v >= 0.0);
  }
}

TEST_CASE("compute_fisher does not depend on the worker count") {
  MlmModel model(small_config(20));
  const Corpus corpus = toy_corpus(8 * 200 - 1, 20, 4);
  const FisherDiagonal one = compute_fisher(model, corpus, 0.2, 5, {8, 0.15, 1});
  const FisherDiagonal three = compute_fisher(model, corpus, 0.2, 5, {8, 0.15, 3});
  CHECK(one == three);
  CHECK(fisher_sample_count(0.001, 1000000) == 1000);
  CHECK_THROWS_AS(compute_fisher(model, corpus, 0.0, 5), ContractError);
}

TEST_CASE("ewc penalty examples") {
  std::vector<Parameter> params;
  params.emplace_back("w", Tensor(Shape{1}, 1.5), 0);
  TaskPenalty task;
  task.lambda = 1.0;
  task.fisher.values.emplace("w", Tensor(Shape{1}, 2.0));
  task.anchor.emplace("w", Tensor(Shape{1}, 1.0));
  {
    Tape tape;
    CHECK(ewc_penalty(tape, params, std::span(&task, 1)).value().item() == 0.5);
  }
  params[0].value[0] = 1.0;
  {
    Tape tape;
    CHECK(ewc_penalty(tape, params, std::span(&task, 1)).value().item() == 0.0);
  }
  Tape tape;
  CHECK_THROWS_AS(ewc_penalty(tape, params, {}), ContractError);
  std::vector<Parameter> wrong;
  wrong.emplace_back("v", Tensor(Shape{1}), 0);
  CHECK_THROWS_AS(ewc_penalty(tape, wrong, std::span(&task, 1)), ContractError);
}

TEST_CASE("ewc penalty gradient matches finite differences") {
  Rng rng(17);
  for (int draw = 0; draw < 20; ++draw) {
    std::vector<Parameter> params;
    params.emplace_back("a", random_tensor({2, 2}, rng), 0);
    params.emplace_back("b", random_tensor({1}, rng), 1);
    std::vector<TaskPenalty> tasks(1 + rng.below(3));
    for (auto& t : tasks) {
      t.lambda = 10.0 * rng.uniform();
      for (const auto& p : params) {
        Tensor f = random_tensor(p.value.shape(), rng);
        for (double& v : f.data()) v = std::abs(v);
        t.fisher.values.emplace(p.name, f);
        t.anchor.emplace(p.name, random_tensor(p.value.shape(), rng));
      }
    }
    const double worst = calm::test::gradcheck(params, [&](Tape& tape, std::vector<Var>&) {
      return ewc_penalty(tape, params, tasks);
    });
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("no-Fisher penalty is the plain squared distance") {
  ModelSnapshot anchor{{"w", Tensor(Shape{2}, std::vector<double>{0.0, 0.0})}};
  const TaskPenalty p = make_no_fisher_penalty(anchor, 1.0, "A");
  for (double v : p.fisher.values.at("w").data()) CHECK(v == 1.0);
  std::vector<Parameter> params;
  params.emplace_back("w", Tensor(Shape{2}, std::vector<double>{1.0, 2.0}), 0);
  Tape tape;
  CHECK(ewc_penalty(tape, params, std::span(&p, 1)).value().item() == 5.0);

  TaskPenalty unit;
  unit.lambda = 1.0;
  unit.anchor = anchor;
  unit.fisher.values.emplace("w", Tensor(Shape{2}, 1.0));
  Tape t2;
  CHECK(ewc_penalty(t2, params, std::span(&unit, 1)).value().item() == 5.0);
  CHECK_THROWS_AS(make_no_fisher_penalty(anchor, 0.0), ContractError);
}

TEST_CASE("task penalties round-trip through a container") {
  TaskPenalty p;
  p.lambda = 0.5;
  p.task_id = "s1:A";
  p.fisher.sample_count = 7;
  p.fisher.values.emplace("w", Tensor(Shape{2}, std::vector<double>{0.1, 0.2}));
  p.anchor.emplace("w", Tensor(Shape{2}, std::vector<double>{-1.0, 1.0 / 3.0}));
  CHECK(penalty_from_container(decode_container(encode_container(to_container(p)))) == p);
}

TEST_CASE("replay plans") {
  ReplayOptions interval;
  interval.mode = ReplayMode::interval;
  interval.interval_steps = 1000;
  interval.updates_per_event = 10;
  CHECK(replay_plan(interval, 3000) == std::vector<ReplayEvent>{{1000, 10}, {2000, 10}, {3000, 10}});
  CHECK(replay_plan(interval, 999).empty());

  ReplayOptions end;
  end.mode = ReplayMode::epoch_end;
  end.buffer_fraction = 0.001;
  CHECK(replay_plan(end, 5000, 1000000, 32) == std::vector<ReplayEvent>{{5000, 32}});
  CHECK(replay_capacity(end, 1000000, 32) == 32);
  CHECK(replay_capacity(interval, 1000, 32) == 10);
  CHECK(replay_batch_count(0.001, 10, 16) == 1);
}

TEST_CASE("ewc with zero lambda retraces strategy none bit for bit") {
  const Corpus corpus = toy_corpus(8 * 64 - 1, 20, 12);
  auto trajectory = [&](StrategyKind kind) {
    MlmModel model(small_config(20));
    TaskPenalty task;
    task.lambda = 0.0;
    task.anchor = snapshot(model);
    for (const auto& [name, t] : task.anchor) task.fisher.values.emplace(name, Tensor(t.shape(), 3.0));
    std::vector<TaskPenalty> tasks{task};

    ContinualContext ctx;
    ctx.model = &model;
    ctx.schedule.total_steps = 6;
    ctx.schedule.base_lr = 0.01;
    ctx.strategy.kind = kind;
    ctx.penalties = tasks;
    BatchStream stream(corpus, {4, 8, 0.3, 2});
    std::vector<double> losses;
    for (int i = 0; i < 6; ++i) {
      const StepMetrics m = continual_step(ctx, stream.next());
      CHECK(m.penalty >= 0.0);
      losses.push_back(m.loss);
    }
    return std::pair{losses, snapshot(model)};
  };
  CHECK(trajectory(StrategyKind::none) == trajectory(StrategyKind::ewc));
}

TEST_CASE("ewc steps pull toward the anchor") {
  const Corpus corpus = toy_corpus(8 * 64 - 1, 20, 12);
  auto distance_after = [&](double lambda) {
    MlmModel model(small_config(20));
    const ModelSnapshot anchor = snapshot(model);
    std::vector<TaskPenalty> tasks{make_no_fisher_penalty(anchor, lambda)};
    ContinualContext ctx;
    ctx.model = &model;
    ctx.schedule.total_steps = 20;
    ctx.schedule.base_lr = 0.01;
    ctx.schedule.warmup_frac = 0.0;
    ctx.strategy.kind = StrategyKind::ewc_no_fisher;
    ctx.penalties = tasks;
    BatchStream stream(corpus, {4, 8, 0.3, 2});
    for (int i = 0; i < 20; ++i) continual_step(ctx, stream.next());
    double d = 0.0;
    for (const auto& p : model.parameters())
      for (std::size_t i = 0; i < p.value.size(); ++i) d += std::pow(p.value[i] - anchor.at(p.name)[i], 2);
    return d;
  };
  CHECK(distance_after(1000.0) < distance_after(1e-6));
}

TEST_CASE("replay events run their scheduled updates") {
  const Corpus a = toy_corpus(8 * 64 - 1, 20, 1, "A");
  const Corpus b = toy_corpus(8 * 64 - 1, 20, 2, "B");
  MlmModel model(small_config(20));
  BatchStream source(a, {4, 8, 0.3, 3});
  ReplayBuffer buffer(3);
  buffer_fill(buffer, source, 3);

  ContinualContext ctx;
  ctx.model = &model;
  ctx.strategy.kind = StrategyKind::er;
  ctx.strategy.er.mode = ReplayMode::interval;
  ctx.strategy.er.interval_steps = 2;
  ctx.strategy.er.updates_per_event = 3;
  ctx.replay = &buffer;
  ctx.steps_per_epoch = 4;
  ctx.plan = replay_plan(ctx.strategy.er, 4);
  ctx.schedule.total_steps = 2 * (4 + 6);
  BatchStream stream(b, {4, 8, 0.3, 4});
  std::vector<std::size_t> replayed;
  for (int i = 0; i < 8; ++i) replayed.push_back(continual_step(ctx, stream.next()).replayed_batches);
  CHECK(replayed == std::vector<std::size_t>{0, 3, 0, 3, 0, 3, 0, 3});
  CHECK(ctx.updates == 20);
}

TEST_CASE("steps refuse incomplete contexts and empty batches") {
  MlmModel model(small_config(20));
  ContinualContext ctx;
  ctx.model = &model;
  ctx.strategy.kind = StrategyKind::ewc;
  const Corpus a = toy_corpus(8 * 64 - 1, 20, 1);
  BatchStream stream(a, {4, 8, 0.3, 3});
  CHECK_THROWS_AS(continual_step(ctx, stream.next()), ContractError);
  ctx.strategy.kind = StrategyKind::er;
  CHECK_THROWS_AS(continual_step(ctx, stream.next()), ContractError);

  ctx.strategy.kind = StrategyKind::none;
  ctx.schedule.total_steps = 4;
  TokenBatch empty = stream.next();
  std::fill(empty.targets.values.begin(), empty.targets.values.end(), kIgnoreIndex);
  const ModelSnapshot before = snapshot(model);
  CHECK_THROWS_AS(continual_step(ctx, empty), EmptyLossError);
  CHECK(snapshot(model) == before);
}
