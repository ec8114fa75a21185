#include <catch_amalgamated.hpp>

#include <cstdlib>
#include <set>

#include "calm/error.hpp"
#include "calm/experiment.hpp"
#include "calm/synth.hpp"
#include "support.hpp"

using namespace calm;
using calm::test::read_file;
using calm::test::TempDir;

namespace fs = std::filesystem;

namespace {

struct Workspace {
  TempDir dir{"experiment"};
  Workspace() {
    write_synthetic_corpus(dir / "a.txt", SynthStyle::prose, 20000, 1);
    write_synthetic_corpus(dir / "b.txt", SynthStyle::code, 20000, 2);
    write_synthetic_corpus(dir / "c.txt", SynthStyle::clinical, 12000, 3);
  }
};

StageConfig stage(std::vector<std::string> domains, StrategyKind kind) {
  StageConfig s;
  s.train_domains = std::move(domains);
  s.strategy.kind = kind;
  s.batch_size = 4;
  s.seq_len = 16;
  s.max_steps_per_epoch = 3;
  s.schedule.base_lr = 0.005;
  s.strategy.ewc.fisher_fraction = 0.02;
  s.strategy.er.buffer_fraction = 0.02;
  return s;
}

ExperimentConfig tiny_config(const Workspace& ws, std::vector<StageConfig> stages, const std::string& out) {
  ExperimentConfig c;
  c.name = "tiny";
  c.seed = 5;
  c.model.d_model = 8;
  c.model.n_heads = 2;
  c.model.n_layers = 1;
  c.model.d_ff = 16;
  c.model.max_seq_len = 16;
  c.domains = {{"A", ws.dir / "a.txt"}, {"B", ws.dir / "b.txt"}, {"C", ws.dir / "c.txt"}};
  c.eval.seq_len = 16;
  c.eval.batch_size = 16;
  c.stages = std::move(stages);
  c.output_dir = ws.dir / out;
  return c;
}

bool contains(const std::vector<std::string>& v, const std::string& needle) {
  for (const auto& s : v)
    if (s.find(needle) != std::string::npos) return true;
  return false;
}

}  // namespace

TEST_CASE("config text round-trips") {
  Workspace ws;
  ExperimentConfig c = tiny_config(ws, {stage({"A"}, StrategyKind::none), stage({"B"}, StrategyKind::ewc)}, "out");
  c.stages[1].strategy.ewc.lambda = 0.5;
  c.stages[1].schedule.kind = ScheduleKind::stlr;
  c.eval.eval_seed = 99;
  CHECK(parse_config(serialize_config(c)) == c);

  const std::string text = R"({
    // comments are allowed
    "name": "rel", "output_dir": "runs/x",
    "domains": [{"id": "A", "path": "data/a.txt"}],
    "stages": [{"train": "A"}]
  })";
  const ExperimentConfig rel = parse_config(text, "/base");
  CHECK(rel.domains[0].path == fs::path("/base/data/a.txt"));
  CHECK(rel.output_dir == fs::path("/base/runs/x"));
  CHECK(rel.stages[0].train_domains == std::vector<std::string>{"A"});

  CHECK_THROWS_AS(parse_config(R"({"stagez": []})"), DataError);
  CHECK_THROWS_AS(parse_config(R"({"stages": [{"train": "A", "strategy": {"kind": "magic"}}]})"), DataError);
  CHECK_THROWS_AS(parse_config("{"), DataError);
}

TEST_CASE("validation reports every violation") {
  Workspace ws;
  ExperimentConfig mdl = tiny_config(ws, {stage({"A"}, StrategyKind::mdl)}, "out");
  CHECK(contains(validate(mdl), "mdl requires ≥2 domains"));

  ExperimentConfig ewc = tiny_config(ws, {stage({"A"}, StrategyKind::none), stage({"B"}, StrategyKind::ewc)}, "out");
  ewc.stages[1].strategy.ewc.lambda = -1.0;
  CHECK(contains(validate(ewc), "lambda_weight must be > 0"));

  ExperimentConfig bad = tiny_config(ws, {stage({"Z"}, StrategyKind::er)}, "out");
  bad.stages[0].seq_len = 99;
  const auto v = validate(bad);
  CHECK(contains(v, "undeclared domain 'Z'"));
  CHECK(contains(v, "er needs an earlier stage"));
  CHECK(contains(v, "seq_len"));

  ExperimentConfig empty = tiny_config(ws, {}, "out");
  CHECK(contains(validate(empty), "at least one stage"));
}

TEST_CASE("a strategy matrix validates cleanly") {
  Workspace ws;
  const StageConfig base = stage({"A"}, StrategyKind::none);
  const std::vector<ExperimentConfig> matrix{
      tiny_config(ws, {base}, "base"),
      tiny_config(ws, {base, stage({"B"}, StrategyKind::none)}, "none"),
      tiny_config(ws, {stage({"A", "B"}, StrategyKind::mdl)}, "mdl"),
      tiny_config(ws, {base, stage({"B"}, StrategyKind::ewc)}, "ewc"),
      tiny_config(ws, {base, stage({"B"}, StrategyKind::lrc)}, "lrc"),
      tiny_config(ws, {base, stage({"B"}, StrategyKind::er)}, "er"),
  };
  for (const auto& c : matrix) CHECK(validate(c).empty());

  for (const auto& entry : fs::directory_iterator(fs::path(CALM_SOURCE_DIR) / "configs")) {
    if (entry.path().extension() != ".json" || entry.path().filename().string().starts_with("grid")) continue;
    INFO(entry.path());
    CHECK(validate(load_config(entry.path())).empty());
  }
}

TEST_CASE("one stage gives an init and a post-stage checkpoint") {
  Workspace ws;
  const ExperimentConfig c = tiny_config(ws, {stage({"A"}, StrategyKind::none)}, "one");
  const RunResult r = run(c);
  REQUIRE(r.report.checkpoints.size() == 2);
  CHECK(r.report.checkpoints[0].label == "init");
  CHECK(r.report.checkpoints[1].label == "s1:A");
  CHECK(r.report.checkpoints[1].step == 3);
  CHECK(r.report.strategy == "none");
  CHECK(fs::exists(c.output_dir / "report.json"));
  CHECK(fs::exists(c.output_dir / "report.txt"));
  CHECK(fs::exists(c.output_dir / "final.calm"));
  CHECK(load_report(c.output_dir / "report.json") == r.report);

  // Three step lines and a checkpoint line.
  const std::string ledger = read_file(c.output_dir / "ledger.jsonl");
  CHECK(std::count(ledger.begin(), ledger.end(), '\n') == 4);
}

TEST_CASE("an ewc stage is anchored at the previous stage") {
  Workspace ws;
  const ExperimentConfig c =
      tiny_config(ws, {stage({"A"}, StrategyKind::none), stage({"B"}, StrategyKind::ewc)}, "ewc");
  RunOptions opts;
  opts.record_access = true;
  const RunResult r = run(c, opts);

  const TaskPenalty p = penalty_from_container(read_container(c.output_dir / "penalties" / "task0-A.calm"));
  const MlmModel after_a = load_checkpoint(c.output_dir / "stage0" / "model.calm");
  CHECK(p.anchor == snapshot(after_a));
  CHECK(p.fisher.sample_count > 0);

  REQUIRE(r.report.deltas.size() == 3);
  const ForgettingDelta* a = r.report.delta_for("A");
  REQUIRE(a);
  CHECK(a->from_label == "s1:A");
  CHECK(a->to_label == "s2:B");
  CHECK(a->ratio == Catch::Approx(r.report.checkpoints[2].at("A").perplexity / r.report.checkpoints[1].at("A").perplexity));
  CHECK(r.report.delta_for("B")->from_label == "s1:A");

  // Stage isolation: while stage 1 trains, only B is read, and only for training.
  for (const auto& rec : r.accesses) {
    if (rec.stage == 1 && rec.phase == "train") {
      CHECK(rec.domain_id == "B");
      CHECK(rec.purpose == "train");
    }
  }
  const AccessRecord fisher_read{1, "transition", "A", "fisher"};
  CHECK(std::find(r.accesses.begin(), r.accesses.end(), fisher_read) != r.accesses.end());
}

TEST_CASE("identical runs emit identical bytes") {
  Workspace ws;
  ExperimentConfig c = tiny_config(ws, {stage({"A"}, StrategyKind::none), stage({"B"}, StrategyKind::er)}, "x");
  run(c);
  const std::string first = read_file(c.output_dir / "report.json");
  const std::string first_ledger = read_file(c.output_dir / "ledger.jsonl");
  c.output_dir = ws.dir / "y";
  run(c);
  CHECK(read_file(c.output_dir / "report.json") == first);
  CHECK(read_file(c.output_dir / "ledger.jsonl") == first_ledger);
}

TEST_CASE("a resumed run matches an uninterrupted one") {
  Workspace ws;
  ExperimentConfig c = tiny_config(
      ws, {stage({"A"}, StrategyKind::none), stage({"B"}, StrategyKind::ewc), stage({"C"}, StrategyKind::ewc)}, "full");
  run(c);
  const std::string expected = read_file(c.output_dir / "report.json");

  c.output_dir = ws.dir / "interrupted";
  RunOptions stop;
  stop.stop_after_stages = 2;
  const RunResult partial = run(c, stop);
  CHECK(partial.stages_trained == 2);
  CHECK(partial.report_path.empty());

  RunOptions resume;
  resume.resume = true;
  const RunResult resumed = run(c, resume);
  CHECK(resumed.stages_trained == 1);
  CHECK(read_file(c.output_dir / "report.json") == expected);
  CHECK(read_file(c.output_dir / "final.calm") == read_file(ws.dir / "full" / "final.calm"));
}

TEST_CASE("zero-lambda ewc matches strategy none") {
  Workspace ws;
  ExperimentConfig none = tiny_config(ws, {stage({"A"}, StrategyKind::none), stage({"B"}, StrategyKind::none)}, "n");
  ExperimentConfig ewc = none;
  ewc.stages[1].strategy.kind = StrategyKind::ewc;
  ewc.stages[1].strategy.ewc.lambda = 0.0;
  ewc.output_dir = ws.dir / "e";
  const RunResult a = run(none);
  const RunResult b = run(ewc);
  CHECK(a.report.checkpoints == b.report.checkpoints);
  CHECK(a.report.deltas == b.report.deltas);
  CHECK(read_file(a.final_model_path) == read_file(b.final_model_path));
}

TEST_CASE("mdl, lrc and replay strategies run") {
  Workspace ws;
  const RunResult mdl = run(tiny_config(ws, {stage({"A", "B"}, StrategyKind::mdl)}, "mdl"));
  CHECK(mdl.report.checkpoints.back().label == "s1:A+B");

  const RunResult lrc = run(tiny_config(ws, {stage({"A"}, StrategyKind::none), stage({"B"}, StrategyKind::lrc)}, "lrc"));
  CHECK(lrc.report.hyperparameters.at("stage1.schedule") == "stlr");
  CHECK(lrc.report.hyperparameters.at("stage1.layer_decay") == "2.6");

  ExperimentConfig er = tiny_config(ws, {stage({"A"}, StrategyKind::none), stage({"B"}, StrategyKind::er)}, "er");
  run(er);
  const std::string ledger = read_file(er.output_dir / "stage1" / "ledger.jsonl");
  // Only the last step of the epoch carries the replay event.
  std::size_t zeros = 0;
  for (std::size_t at = ledger.find("\"replayed\":0"); at != std::string::npos; at = ledger.find("\"replayed\":0", at + 1)) ++zeros;
  CHECK(zeros == 2);

  er.stages[1].strategy.er.mode = ReplayMode::interval;
  er.stages[1].strategy.er.interval_steps = 1;
  er.stages[1].strategy.er.updates_per_event = 2;
  er.output_dir = ws.dir / "er-interval";
  run(er);
  const std::string interval = read_file(er.output_dir / "stage1" / "ledger.jsonl");
  CHECK(std::count(interval.begin(), interval.end(), '\n') == 4);
  CHECK(interval.find("\"replayed\":2") != std::string::npos);
}

TEST_CASE("invalid configs are rejected before any work") {
  Workspace ws;
  ExperimentConfig c = tiny_config(ws, {stage({"A"}, StrategyKind::mdl)}, "never");
  CHECK_THROWS_AS(run(c), ContractError);
  CHECK_FALSE(fs::exists(c.output_dir));
}

TEST_CASE("ledger steps must increase within a stage") {
  TempDir dir("ledger");
  RunLedger ledger(dir / "l.jsonl");
  ledger.append({0, 1, 1.0, 0.0, 0.1, 0});
  ledger.append({0, 2, 1.0, 0.0, 0.1, 0});
  CHECK_THROWS_AS(ledger.append({0, 2, 1.0, 0.0, 0.1, 0}), ContractError);
  ledger.append({1, 1, 1.0, 0.0, 0.1, 0});
}

TEST_CASE("grid expansion") {
  Workspace ws;
  const ExperimentConfig base =
      tiny_config(ws, {stage({"A"}, StrategyKind::none), stage({"B"}, StrategyKind::ewc)}, "sweep");
  SweepGrid grid;
  grid.lambdas = {0.5, 1.0, 5.0, 10.0};
  grid.fisher_fractions = {0.001, 0.01, 0.1};
  const auto points = expand_grid(base, grid);
  CHECK(points.size() == 12);
  std::set<fs::path> dirs;
  std::set<std::string> names;
  for (const auto& p : points) {
    dirs.insert(p.output_dir);
    names.insert(p.name);
  }
  CHECK(dirs.size() == 12);
  CHECK(names.size() == 12);
  CHECK(points[0].stages[1].strategy.ewc.lambda == 0.5);
  CHECK(points[0].stages[1].strategy.ewc.fisher_fraction == 0.001);
  CHECK(points[11].stages[1].strategy.ewc.lambda == 10.0);
  CHECK(points[11].stages[1].strategy.ewc.fisher_fraction == 0.1);
  CHECK_THROWS_AS(expand_grid(base, SweepGrid{}), ContractError);

  const SweepGrid parsed = parse_grid(R"({"lambda": [1.0], "replay_mode": ["interval", "epoch_end"]})");
  CHECK(parsed.lambdas == std::vector<double>{1.0});
  CHECK(parsed.replay_modes == std::vector<ReplayMode>{ReplayMode::interval, ReplayMode::epoch_end});
  CHECK_THROWS_AS(parse_grid(R"({"lambda": [1.0], "beta": [2]})"), DataError);
}

TEST_CASE("sweep ranking is lexicographic") {
  auto report = [](std::string id, double source_ratio, double target_ppl) {
    MetricsReport r;
    r.run_id = std::move(id);
    r.strategy = "ewc";
    r.checkpoints.push_back({"s2:B", 2, 10, {{"A", 3.0, 1}, {"B", target_ppl, 1}}});
    r.deltas.push_back({"A", "s1:A", "s2:B", 0.0, source_ratio});
    return r;
  };
  std::vector<MetricsReport> reports{report("lambda=10", 1.01, 500.0), report("lambda=1", 1.0, 20.0),
                                     report("lambda=5", 1.2, 10.0)};
  rank_reports(reports, "A", "B");
  CHECK(reports[0].run_id == "lambda=1");
  CHECK(reports[1].run_id == "lambda=10");
  CHECK(reports[2].run_id == "lambda=5");
}

TEST_CASE("sweep runs every grid point and survives failures") {
  Workspace ws;
  const ExperimentConfig base =
      tiny_config(ws, {stage({"A"}, StrategyKind::none), stage({"B"}, StrategyKind::ewc)}, "sweep");
  SweepGrid grid;
  grid.lambdas = {0.5, 1.0, 5.0, 10.0};
  grid.fisher_fractions = {0.001, 0.01, 0.1};
  const SweepResult r = sweep(base, grid);
  CHECK(r.ranked.size() == 12);
  CHECK(r.failures.empty());
  CHECK(fs::exists(base.output_dir / "summary.txt"));

  SweepGrid broken;
  broken.lambdas = {1.0, -2.0};
  const SweepResult partial = sweep(base, broken);
  CHECK(partial.ranked.size() == 1);
  REQUIRE(partial.failures.size() == 1);
  CHECK(partial.failures[0].message.find("lambda_weight must be > 0") != std::string::npos);
  CHECK(partial.summary.find("FAILED") != std::string::npos);
}

TEST_CASE("thread budget honours CALM_THREADS") {
  setenv("CALM_THREADS", "3", 1);
  CHECK(thread_budget() == 3);
  setenv("CALM_THREADS", "zero", 1);
  CHECK(thread_budget() >= 1);
  unsetenv("CALM_THREADS");
}
