#include "calm/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <json.hpp>
#include <limits>
#include <memory>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>
#include <tuple>

#include "calm/error.hpp"
#include "calm/rng.hpp"

namespace calm {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

std::string join(const std::vector<std::string>& parts, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

std::string number(double x) { return json(x).dump(); }

// ---------------------------------------------------------------------------
// Config parsing

void check_keys(const json& j, std::initializer_list<std::string_view> allowed, const std::string& where) {
  if (!j.is_object()) throw DataError(where + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw DataError(where + ": unknown key '" + key + "'");
    }
  }
}

template <class T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

fs::path resolve(const fs::path& p, const fs::path& base) {
  if (p.empty() || base.empty() || p.is_absolute()) return p;
  return (base / p).lexically_normal();
}

StrategyConfig parse_strategy(const json& j, const std::string& where) {
  check_keys(j,
             {"kind", "lambda", "fisher_fraction", "penalty_mode", "replay_mode", "interval_steps", "updates_per_event",
              "buffer_fraction", "mdl_weights"},
             where);
  StrategyConfig s;
  const auto kind = j.at("kind").get<std::string>();
  if (auto k = parse_strategy_kind(kind)) {
    s.kind = *k;
  } else {
    throw DataError(where + ": unknown strategy '" + kind + "'");
  }
  read(j, "lambda", s.ewc.lambda);
  read(j, "fisher_fraction", s.ewc.fisher_fraction);
  if (j.contains("penalty_mode")) {
    const auto name = j.at("penalty_mode").get<std::string>();
    auto m = parse_penalty_mode(name);
    if (!m) throw DataError(where + ": unknown penalty_mode '" + name + "'");
    s.ewc.penalty_mode = *m;
  }
  if (j.contains("replay_mode")) {
    const auto name = j.at("replay_mode").get<std::string>();
    auto m = parse_replay_mode(name);
    if (!m) throw DataError(where + ": unknown replay_mode '" + name + "'");
    s.er.mode = *m;
  }
  read(j, "interval_steps", s.er.interval_steps);
  read(j, "updates_per_event", s.er.updates_per_event);
  read(j, "buffer_fraction", s.er.buffer_fraction);
  read(j, "mdl_weights", s.mdl_weights);
  return s;
}

TrainingSchedule parse_schedule(const json& j, const std::string& where) {
  check_keys(j, {"kind", "base_lr", "warmup_frac", "cut_frac", "ratio", "layer_decay"}, where);
  TrainingSchedule s;
  if (j.contains("kind")) {
    const auto name = j.at("kind").get<std::string>();
    auto k = parse_schedule_kind(name);
    if (!k) throw DataError(where + ": unknown schedule '" + name + "'");
    s.kind = *k;
  }
  read(j, "base_lr", s.base_lr);
  read(j, "warmup_frac", s.warmup_frac);
  read(j, "cut_frac", s.cut_frac);
  read(j, "ratio", s.ratio);
  read(j, "layer_decay", s.layer_decay);
  return s;
}

json strategy_json(const StrategyConfig& s) {
  json j;
  j["kind"] = std::string(to_string(s.kind));
  j["lambda"] = s.ewc.lambda;
  j["fisher_fraction"] = s.ewc.fisher_fraction;
  j["penalty_mode"] = std::string(to_string(s.ewc.penalty_mode));
  j["replay_mode"] = std::string(to_string(s.er.mode));
  j["interval_steps"] = s.er.interval_steps;
  j["updates_per_event"] = s.er.updates_per_event;
  j["buffer_fraction"] = s.er.buffer_fraction;
  j["mdl_weights"] = s.mdl_weights;
  return j;
}

json schedule_json(const TrainingSchedule& s) {
  json j;
  j["kind"] = std::string(to_string(s.kind));
  j["base_lr"] = s.base_lr;
  j["warmup_frac"] = s.warmup_frac;
  j["cut_frac"] = s.cut_frac;
  j["ratio"] = s.ratio;
  j["layer_decay"] = s.layer_decay;
  return j;
}

json model_json(const ModelConfig& m) {
  json j;
  j["d_model"] = m.d_model;
  j["n_heads"] = m.n_heads;
  j["n_layers"] = m.n_layers;
  j["d_ff"] = m.d_ff;
  j["max_seq_len"] = m.max_seq_len;
  return j;
}

json stage_json(const StageConfig& s) {
  json j;
  j["train"] = s.train_domains;
  j["strategy"] = strategy_json(s.strategy);
  j["epochs"] = s.epochs;
  j["batch_size"] = s.batch_size;
  j["seq_len"] = s.seq_len;
  j["mask_prob"] = s.mask_prob;
  j["max_steps_per_epoch"] = s.max_steps_per_epoch;
  j["schedule"] = schedule_json(s.schedule);
  return j;
}

json domains_json(const std::vector<DomainSpec>& domains) {
  json j = json::array();
  for (const auto& d : domains) j.push_back({{"id", d.domain_id}, {"path", d.path.generic_string()}});
  return j;
}

json eval_json(const EvalConfig& e) {
  json j;
  j["mask_prob"] = e.mask_prob;
  j["seq_len"] = e.seq_len;
  j["batch_size"] = e.batch_size;
  if (e.eval_seed) j["eval_seed"] = *e.eval_seed;
  return j;
}

}  // namespace

ExperimentConfig parse_config(const std::string& text, const fs::path& base_dir) {
  try {
    const json j = json::parse(text, nullptr, true, true);
    check_keys(j, {"name", "seed", "output_dir", "model", "domains", "eval", "stages"}, "config");
    ExperimentConfig c;
    read(j, "name", c.name);
    read(j, "seed", c.seed);
    if (j.contains("output_dir")) c.output_dir = resolve(j.at("output_dir").get<std::string>(), base_dir);
    if (j.contains("model")) {
      const json& m = j.at("model");
      check_keys(m, {"d_model", "n_heads", "n_layers", "d_ff", "max_seq_len"}, "model");
      read(m, "d_model", c.model.d_model);
      read(m, "n_heads", c.model.n_heads);
      read(m, "n_layers", c.model.n_layers);
      read(m, "d_ff", c.model.d_ff);
      read(m, "max_seq_len", c.model.max_seq_len);
    }
    if (j.contains("domains")) {
      for (const auto& d : j.at("domains")) {
        check_keys(d, {"id", "path"}, "domain");
        c.domains.push_back({d.at("id").get<std::string>(), resolve(d.at("path").get<std::string>(), base_dir)});
      }
    }
    if (j.contains("eval")) {
      const json& e = j.at("eval");
      check_keys(e, {"mask_prob", "seq_len", "batch_size", "eval_seed"}, "eval");
      read(e, "mask_prob", c.eval.mask_prob);
      read(e, "seq_len", c.eval.seq_len);
      read(e, "batch_size", c.eval.batch_size);
      if (e.contains("eval_seed")) c.eval.eval_seed = e.at("eval_seed").get<std::uint64_t>();
    }
    if (j.contains("stages")) {
      std::size_t k = 0;
      for (const auto& s : j.at("stages")) {
        const std::string where = "stage " + std::to_string(k++);
        check_keys(s,
                   {"train", "strategy", "epochs", "batch_size", "seq_len", "mask_prob", "max_steps_per_epoch",
                    "schedule"},
                   where);
        StageConfig st;
        const json& train = s.at("train");
        if (train.is_string()) {
          st.train_domains.push_back(train.get<std::string>());
        } else {
          st.train_domains = train.get<std::vector<std::string>>();
        }
        if (s.contains("strategy")) st.strategy = parse_strategy(s.at("strategy"), where + " strategy");
        read(s, "epochs", st.epochs);
        read(s, "batch_size", st.batch_size);
        read(s, "seq_len", st.seq_len);
        read(s, "mask_prob", st.mask_prob);
        read(s, "max_steps_per_epoch", st.max_steps_per_epoch);
        if (s.contains("schedule")) st.schedule = parse_schedule(s.at("schedule"), where + " schedule");
        c.stages.push_back(std::move(st));
      }
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed config: ") + e.what());
  }
}

ExperimentConfig load_config(const fs::path& path) {
  return parse_config(read_text(path), path.has_parent_path() ? path.parent_path() : fs::path("."));
}

std::string serialize_config(const ExperimentConfig& c) {
  json j;
  j["name"] = c.name;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir.generic_string();
  j["model"] = model_json(c.model);
  j["domains"] = domains_json(c.domains);
  j["eval"] = eval_json(c.eval);
  j["stages"] = json::array();
  for (const auto& s : c.stages) j["stages"].push_back(stage_json(s));
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Validation

std::vector<std::string> validate(const ExperimentConfig& c) {
  std::vector<std::string> out;
  ModelConfig m = c.model;
  m.vocab_size = 256;
  for (const auto& v : m.violations()) out.push_back("model: " + v);

  std::set<std::string> declared;
  if (c.domains.empty()) out.push_back("at least one domain is required");
  for (const auto& d : c.domains) {
    if (d.domain_id.empty()) out.push_back("domain ids must be non-empty");
    if (d.path.empty()) out.push_back("domain " + d.domain_id + ": path is required");
    if (!declared.insert(d.domain_id).second) out.push_back("domain " + d.domain_id + " is declared twice");
  }

  if (!(c.eval.mask_prob > 0.0 && c.eval.mask_prob <= 1.0)) out.push_back("eval: mask_prob must lie in (0, 1]");
  if (c.eval.batch_size == 0) out.push_back("eval: batch_size must be positive");
  if (c.eval.seq_len == 0 || c.eval.seq_len > c.model.max_seq_len) {
    out.push_back("eval: seq_len must lie in [1, max_seq_len]");
  }

  if (c.stages.empty()) out.push_back("at least one stage is required");
  for (std::size_t k = 0; k < c.stages.size(); ++k) {
    const StageConfig& s = c.stages[k];
    const std::string at = "stage " + std::to_string(k) + ": ";
    const StrategyKind kind = s.strategy.kind;
    const std::string kind_name(to_string(kind));

    std::set<std::string> seen;
    for (const auto& d : s.train_domains) {
      if (!declared.count(d)) out.push_back(at + "references undeclared domain '" + d + "'");
      if (!seen.insert(d).second) out.push_back(at + "names domain '" + d + "' twice");
    }
    if (kind == StrategyKind::mdl) {
      if (s.train_domains.size() < 2) out.push_back(at + "mdl requires ≥2 domains");
      const auto& w = s.strategy.mdl_weights;
      if (!w.empty()) {
        double total = 0.0;
        bool negative = false;
        for (double x : w) {
          negative = negative || !(x >= 0.0);
          total += x;
        }
        if (w.size() != s.train_domains.size()) out.push_back(at + "mdl_weights must match the train domains");
        if (negative || std::abs(total - 1.0) > 1e-9) out.push_back(at + "mdl_weights must be non-negative and sum to 1");
      }
    } else if (s.train_domains.size() != 1) {
      out.push_back(at + "strategy " + kind_name + " trains exactly one domain");
    }

    if (uses_penalty(kind)) {
      if (!(s.strategy.ewc.lambda >= 0.0) || !std::isfinite(s.strategy.ewc.lambda)) {
        out.push_back(at + "lambda_weight must be > 0");
      }
      if (kind == StrategyKind::ewc_no_fisher && !(s.strategy.ewc.lambda > 0.0)) {
        out.push_back(at + "lambda_weight must be > 0");
      }
      if (kind == StrategyKind::ewc &&
          !(s.strategy.ewc.fisher_fraction > 0.0 && s.strategy.ewc.fisher_fraction <= 1.0)) {
        out.push_back(at + "fisher_fraction must lie in (0, 1]");
      }
    }
    if ((uses_penalty(kind) || kind == StrategyKind::er) && k == 0) {
      out.push_back(at + kind_name + " needs an earlier stage");
    }
    if (kind == StrategyKind::er) {
      const auto& er = s.strategy.er;
      if (!(er.buffer_fraction > 0.0 && er.buffer_fraction <= 1.0)) out.push_back(at + "buffer_fraction must lie in (0, 1]");
      if (er.mode == ReplayMode::interval) {
        if (er.interval_steps == 0) out.push_back(at + "interval_steps must be positive");
        if (er.updates_per_event == 0) out.push_back(at + "updates_per_event must be positive");
      }
    }

    if (s.epochs == 0) out.push_back(at + "epochs must be positive");
    if (s.batch_size == 0) out.push_back(at + "batch_size must be positive");
    if (s.seq_len == 0 || s.seq_len > c.model.max_seq_len) out.push_back(at + "seq_len must lie in [1, max_seq_len]");
    if (!(s.mask_prob > 0.0 && s.mask_prob <= 1.0)) out.push_back(at + "mask_prob must lie in (0, 1]");
    TrainingSchedule sched = s.schedule;
    sched.total_steps = 1;
    for (const auto& v : sched.violations()) out.push_back(at + "schedule: " + v);
  }
  return out;
}

std::size_t thread_budget() {
  if (const char* env = std::getenv("CALM_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

// ---------------------------------------------------------------------------
// Ledger

RunLedger::RunLedger(const fs::path& path) : out_(path, std::ios::binary | std::ios::trunc), path_(path) {
  if (!out_) throw IoError("cannot write ledger " + path.string());
}

void RunLedger::write(const std::string& line) {
  out_ << line << '\n';
  out_.flush();
  if (!out_) throw IoError("ledger write failed: " + path_.string());
}

void RunLedger::append(const LedgerEntry& e) {
  if (last_stage_ == e.stage && e.step <= last_step_) {
    throw ContractError("ledger: step " + std::to_string(e.step) + " does not follow " + std::to_string(last_step_) +
                        " in stage " + std::to_string(e.stage));
  }
  last_stage_ = e.stage;
  last_step_ = e.step;
  json j;
  j["stage"] = e.stage;
  j["step"] = e.step;
  j["loss"] = e.loss;
  j["penalty"] = e.penalty;
  j["lr"] = e.lr;
  j["replayed"] = e.replayed_batches;
  write(j.dump());
}

void RunLedger::checkpoint(std::size_t stage, const std::string& label, const fs::path& file) {
  json j;
  j["stage"] = stage;
  j["checkpoint"] = label;
  j["file"] = file.generic_string();
  write(j.dump());
}

// ---------------------------------------------------------------------------
// Run

namespace {

// Shared by every corpus handle of a run; enforces stage isolation.
struct Audit {
  std::mutex mu;
  std::size_t stage = 0;
  std::string phase = "setup";
  std::set<std::string> allowed;
  bool record = false;
  std::set<std::tuple<std::size_t, std::string, std::string, std::string>> seen;
  std::vector<AccessRecord> records;

  void enter(std::size_t s, std::string p, std::set<std::string> domains = {}) {
    std::lock_guard lock(mu);
    stage = s;
    phase = std::move(p);
    allowed = std::move(domains);
  }

  void note(std::string_view domain, std::string_view purpose) {
    std::lock_guard lock(mu);
    if (phase == "train" && (purpose != "train" || !allowed.count(std::string(domain)))) {
      throw ContractError("stage isolation: domain " + std::string(domain) + " read for " + std::string(purpose) +
                          " while training stage " + std::to_string(stage));
    }
    if (phase == "eval" && purpose != "eval") {
      throw ContractError("stage isolation: domain " + std::string(domain) + " read for " + std::string(purpose) +
                          " during evaluation");
    }
    if (record && seen.emplace(stage, phase, std::string(domain), std::string(purpose)).second) {
      records.push_back({stage, phase, std::string(domain), std::string(purpose)});
    }
  }
};

json checkpoint_json(const Checkpoint& c) {
  json j;
  j["label"] = c.label;
  j["stage"] = c.stage;
  j["step"] = c.step;
  j["perplexities"] = json::array();
  for (const auto& p : c.perplexities) {
    j["perplexities"].push_back({{"domain_id", p.domain_id}, {"perplexity", p.perplexity}, {"token_count", p.token_count}});
  }
  return j;
}

Checkpoint checkpoint_from_json(const json& j) {
  Checkpoint c;
  c.label = j.at("label").get<std::string>();
  c.stage = j.at("stage").get<std::size_t>();
  c.step = j.at("step").get<std::size_t>();
  for (const auto& p : j.at("perplexities")) {
    c.perplexities.push_back(
        {p.at("domain_id").get<std::string>(), p.at("perplexity").get<double>(), p.at("token_count").get<std::size_t>()});
  }
  return c;
}

std::string base_fingerprint(const ExperimentConfig& c, std::size_t vocab_size) {
  json j;
  j["model"] = model_json(c.model);
  j["vocab_size"] = vocab_size;
  j["domains"] = domains_json(c.domains);
  j["eval"] = eval_json(c.eval);
  j["seed"] = c.seed;
  return j.dump();
}

std::string stage_fingerprint(const ExperimentConfig& c, std::size_t vocab_size, std::size_t k) {
  json j;
  j["base"] = base_fingerprint(c, vocab_size);
  j["stages"] = json::array();
  for (std::size_t i = 0; i <= k; ++i) j["stages"].push_back(stage_json(c.stages[i]));
  return j.dump();
}

bool fingerprint_matches(const fs::path& dir, const std::string& fp) {
  const fs::path file = dir / "fingerprint.json";
  if (!fs::exists(file)) return false;
  try {
    return read_text(file) == fp + "\n";
  } catch (const IoError&) {
    return false;
  }
}

std::string stage_label(const StageConfig& s, std::size_t k) {
  return "s" + std::to_string(k + 1) + ":" + join(s.train_domains, "+");
}

std::string report_strategy(const ExperimentConfig& c) {
  if (c.stages.size() == 1) return std::string(to_string(c.stages[0].strategy.kind));
  std::vector<std::string> kinds;
  for (std::size_t k = 1; k < c.stages.size(); ++k) {
    std::string name(to_string(c.stages[k].strategy.kind));
    if (std::find(kinds.begin(), kinds.end(), name) == kinds.end()) kinds.push_back(name);
  }
  return join(kinds, "+");
}

TrainingSchedule effective_schedule(const StageConfig& s) {
  TrainingSchedule sched = s.schedule;
  if (s.strategy.kind == StrategyKind::lrc) {
    sched.kind = ScheduleKind::stlr;
    sched.layer_decay = 2.6;
  }
  return sched;
}

std::map<std::string, std::string> hyperparameters(const ExperimentConfig& c) {
  std::map<std::string, std::string> h;
  h["seed"] = std::to_string(c.seed);
  for (std::size_t k = 0; k < c.stages.size(); ++k) {
    const StageConfig& s = c.stages[k];
    const TrainingSchedule sched = effective_schedule(s);
    const std::string p = "stage" + std::to_string(k) + ".";
    h[p + "train"] = join(s.train_domains, "+");
    h[p + "strategy"] = std::string(to_string(s.strategy.kind));
    h[p + "epochs"] = std::to_string(s.epochs);
    h[p + "schedule"] = std::string(to_string(sched.kind));
    h[p + "base_lr"] = number(sched.base_lr);
    h[p + "layer_decay"] = number(sched.layer_decay);
    if (uses_penalty(s.strategy.kind)) {
      h[p + "lambda"] = number(s.strategy.ewc.lambda);
      h[p + "penalty_mode"] = std::string(to_string(s.strategy.ewc.penalty_mode));
    }
    if (s.strategy.kind == StrategyKind::ewc) h[p + "fisher_fraction"] = number(s.strategy.ewc.fisher_fraction);
    if (s.strategy.kind == StrategyKind::er) {
      h[p + "replay_mode"] = std::string(to_string(s.strategy.er.mode));
      h[p + "buffer_fraction"] = number(s.strategy.er.buffer_fraction);
    }
  }
  return h;
}

std::vector<ForgettingDelta> compute_deltas(const ExperimentConfig& c, const std::vector<Checkpoint>& cps) {
  std::vector<ForgettingDelta> out;
  const std::size_t n = c.stages.size();
  if (cps.size() != n + 1) return out;
  for (const auto& d : c.domains) {
    std::optional<std::size_t> last;
    for (std::size_t k = 0; k < n; ++k) {
      const auto& t = c.stages[k].train_domains;
      if (std::find(t.begin(), t.end(), d.domain_id) != t.end()) last = k;
    }
    const std::size_t before = (last && *last + 1 < n) ? *last + 1 : n - 1;
    ForgettingDelta delta = forgetting_delta(cps[before].at(d.domain_id), cps[n].at(d.domain_id));
    delta.from_label = cps[before].label;
    delta.to_label = cps[n].label;
    out.push_back(std::move(delta));
  }
  return out;
}

struct RunState {
  const ExperimentConfig& config;
  const RunOptions& options;
  fs::path out;
  std::size_t threads = 1;
  std::size_t vocab_size = 0;
  std::shared_ptr<Audit> audit;
  std::map<std::string, CorpusSplit> splits;
  EvalOptions eval;

  fs::path stage_dir(std::size_t k) const { return out / ("stage" + std::to_string(k)); }

  Checkpoint evaluate(MlmModel& model, std::string label, std::size_t stage, std::size_t step) {
    audit->enter(stage, "eval");
    Checkpoint cp{std::move(label), stage, step, {}};
    for (const auto& d : config.domains) cp.perplexities.push_back(perplexity(model, splits.at(d.domain_id).test, eval));
    return cp;
  }

  // Consolidation state of task j (stage j's training on `domain`), anchored
  // at the stage-j model and cached under penalties/.
  TaskPenalty task_penalty(std::size_t j, const std::string& domain, const StageConfig& user) {
    const StrategyConfig& st = user.strategy;
    const bool fisher = st.kind == StrategyKind::ewc;
    const fs::path dir = out / "penalties";
    fs::create_directories(dir);
    const std::string stem = "task" + std::to_string(j) + "-" + domain + (fisher ? "" : "-nofisher");
    json fp;
    fp["stage"] = stage_fingerprint(config, vocab_size, j);
    fp["domain"] = domain;
    if (fisher) {
      fp["fisher_fraction"] = st.ewc.fisher_fraction;
      fp["seq_len"] = user.seq_len;
      fp["mask_prob"] = user.mask_prob;
    }
    const std::string fp_text = fp.dump() + "\n";
    const fs::path file = dir / (stem + ".calm");
    const fs::path fp_file = dir / (stem + ".json");

    TaskPenalty penalty;
    if (fs::exists(file) && fs::exists(fp_file) && read_text(fp_file) == fp_text) {
      penalty = penalty_from_container(read_container(file));
    } else {
      MlmModel anchor_model = load_checkpoint(stage_dir(j) / "model.calm");
      penalty.anchor = snapshot(anchor_model);
      if (fisher) {
        const std::uint64_t seed = derive_seed(derive_seed(derive_seed(config.seed, "fisher"), j), domain);
        penalty.fisher = compute_fisher(anchor_model, splits.at(domain).train, st.ewc.fisher_fraction, seed,
                                        {user.seq_len, user.mask_prob, threads});
      } else {
        for (const auto& [name, t] : penalty.anchor) penalty.fisher.values.emplace(name, Tensor(t.shape(), 1.0));
      }
      penalty.task_id = "s" + std::to_string(j + 1) + ":" + domain;
      penalty.lambda = st.ewc.lambda;
      write_container(file, to_container(penalty));
      write_text(fp_file, fp_text);
    }
    penalty.lambda = st.ewc.lambda;
    return penalty;
  }

  std::vector<TaskPenalty> penalties_for(std::size_t k) {
    const StageConfig& s = config.stages[k];
    std::vector<std::size_t> tasks;
    switch (s.strategy.ewc.penalty_mode) {
      case PenaltyMode::accumulate:
        for (std::size_t j = 0; j < k; ++j) tasks.push_back(j);
        break;
      case PenaltyMode::latest:
        tasks.push_back(k - 1);
        break;
      case PenaltyMode::first:
        tasks.push_back(0);
        break;
    }
    std::vector<TaskPenalty> out;
    for (std::size_t j : tasks)
      for (const auto& d : config.stages[j].train_domains) out.push_back(task_penalty(j, d, s));
    return out;
  }

  // Replay sources are the domains trained before stage k and not in it.
  ReplayBuffer fill_replay(std::size_t k) {
    const StageConfig& s = config.stages[k];
    const ReplayOptions& er = s.strategy.er;
    std::vector<std::string> sources;
    for (std::size_t j = 0; j < k; ++j)
      for (const auto& d : config.stages[j].train_domains) {
        const bool current = std::find(s.train_domains.begin(), s.train_domains.end(), d) != s.train_domains.end();
        if (!current && std::find(sources.begin(), sources.end(), d) == sources.end()) sources.push_back(d);
      }
    if (sources.empty()) throw ContractError("stage " + std::to_string(k) + ": er has no earlier domain to replay");

    const std::uint64_t seed = derive_seed(derive_seed(config.seed, "replay"), k);
    std::vector<BatchStream> streams;
    std::vector<std::size_t> counts;
    for (const auto& d : sources) {
      streams.emplace_back(splits.at(d).train, StreamOptions{s.batch_size, s.seq_len, s.mask_prob, derive_seed(seed, d)},
                           "replay");
      std::size_t n = replay_batch_count(er.buffer_fraction, streams.back().window_count(), s.batch_size);
      if (er.mode == ReplayMode::interval) n = std::max(n, (er.updates_per_event + sources.size() - 1) / sources.size());
      counts.push_back(n);
    }
    std::size_t capacity = 0;
    for (std::size_t n : counts) capacity += n;
    ReplayBuffer buffer(capacity);
    for (std::size_t i = 0; i < streams.size(); ++i) buffer_fill(buffer, streams[i], counts[i]);
    for (const auto& d : s.train_domains) buffer.check_excludes(d);
    return buffer;
  }
};

class StreamSource {
 public:
  StreamSource(const std::vector<Corpus>& corpora, const StrategyConfig& strategy, const StreamOptions& options) {
    if (corpora.size() == 1) {
      single_.emplace(corpora.front(), options, "train");
      return;
    }
    std::vector<double> weights = strategy.mdl_weights;
    if (weights.empty()) {
      double total = 0.0;
      for (const auto& c : corpora) {
        weights.push_back(static_cast<double>(make_windows(c, options.seq_len, "train").rows));
        total += weights.back();
      }
      for (double& w : weights) w /= total;
    }
    mixed_.emplace(corpora, weights, options);
  }

  TokenBatch next() { return single_ ? single_->next() : mixed_->next(); }
  std::size_t batches_per_epoch() const { return single_ ? single_->batches_per_epoch() : mixed_->batches_per_epoch(); }

 private:
  std::optional<BatchStream> single_;
  std::optional<MixedStream> mixed_;
};

void concatenate(const std::vector<fs::path>& parts, const fs::path& dest) {
  std::string text;
  for (const auto& p : parts)
    if (fs::exists(p)) text += read_text(p);
  write_text(dest, text);
}

}  // namespace

RunResult run(const ExperimentConfig& config, const RunOptions& options) {
  if (auto v = validate(config); !v.empty()) throw ContractError("invalid config:\n  " + join(v, "\n  "));
  if (config.output_dir.empty()) throw ContractError("invalid config: output_dir is required");

  RunState state{config, options, config.output_dir, 1, 0, nullptr, {}, {}};
  state.threads = options.threads ? options.threads : thread_budget();
  state.audit = std::make_shared<Audit>();
  state.audit->record = options.record_access;
  const fs::path& out = state.out;
  fs::create_directories(out);
  write_text(out / "config.json", serialize_config(config));

  std::vector<fs::path> paths;
  for (const auto& d : config.domains) paths.push_back(d.path);
  const Vocabulary vocab = Vocabulary::from_files(paths);
  vocab.save(out / "vocab.txt");
  state.vocab_size = vocab.size();

  for (const auto& d : config.domains) {
    CorpusSplit s = split(ingest(d.path, d.domain_id, vocab), derive_seed(derive_seed(config.seed, "split"), d.domain_id));
    auto audit = state.audit;
    AccessHook hook = [audit](std::string_view domain, std::string_view purpose) { audit->note(domain, purpose); };
    s.train.set_access_hook(hook);
    s.valid.set_access_hook(hook);
    s.test.set_access_hook(hook);
    state.splits.emplace(d.domain_id, std::move(s));
  }
  state.eval = {config.eval.seq_len, config.eval.batch_size, config.eval.mask_prob,
                config.eval.eval_seed.value_or(derive_seed(config.seed, "eval"))};

  ModelConfig mc = config.model;
  mc.vocab_size = vocab.size();
  mc.seed = config.seed;
  MlmModel model(mc);

  const std::size_t n = config.stages.size();
  std::vector<Checkpoint> checkpoints;

  // Resume: the longest run of completed stages whose configuration prefix
  // matches this config.
  const fs::path init_dir = out / "init";
  const std::string base_fp = base_fingerprint(config, state.vocab_size);
  std::size_t start = 0;
  if (options.resume && fingerprint_matches(init_dir, base_fp)) {
    checkpoints.push_back(checkpoint_from_json(json::parse(read_text(init_dir / "checkpoint.json"))));
    while (start < n && fingerprint_matches(state.stage_dir(start), stage_fingerprint(config, state.vocab_size, start))) {
      checkpoints.push_back(checkpoint_from_json(json::parse(read_text(state.stage_dir(start) / "checkpoint.json"))));
      ++start;
    }
    if (start > 0) model = load_checkpoint(state.stage_dir(start - 1) / "model.calm");
  } else {
    fs::create_directories(init_dir);
    checkpoints.push_back(state.evaluate(model, "init", 0, 0));
    write_text(init_dir / "checkpoint.json", checkpoint_json(checkpoints.back()).dump(2) + "\n");
    write_text(init_dir / "fingerprint.json", base_fp + "\n");
  }

  RunResult result;
  std::size_t step_base = checkpoints.back().step;
  for (std::size_t k = start; k < n; ++k) {
    if (options.stop_after_stages && k >= *options.stop_after_stages) break;
    const StageConfig& s = config.stages[k];
    const fs::path dir = state.stage_dir(k);
    fs::create_directories(dir);
    fs::remove(dir / "fingerprint.json");

    state.audit->enter(k, "transition");
    std::vector<TaskPenalty> penalties;
    if (uses_penalty(s.strategy.kind)) penalties = state.penalties_for(k);
    ReplayBuffer buffer;
    if (s.strategy.kind == StrategyKind::er) buffer = state.fill_replay(k);

    state.audit->enter(k, "train", {s.train_domains.begin(), s.train_domains.end()});
    std::vector<Corpus> corpora;
    for (const auto& d : s.train_domains) corpora.push_back(state.splits.at(d).train);
    const StreamOptions so{s.batch_size, s.seq_len, s.mask_prob, derive_seed(derive_seed(config.seed, "stage"), k)};
    StreamSource stream(corpora, s.strategy, so);
    std::size_t spe = stream.batches_per_epoch();
    if (s.max_steps_per_epoch > 0) spe = std::min(spe, s.max_steps_per_epoch);

    ContinualContext ctx;
    ctx.model = &model;
    ctx.strategy = s.strategy;
    ctx.penalties = penalties;
    ctx.steps_per_epoch = spe;
    if (s.strategy.kind == StrategyKind::er) {
      ctx.replay = &buffer;
      ctx.plan = replay_plan(s.strategy.er, spe, 0, s.batch_size);
      if (s.strategy.er.mode == ReplayMode::epoch_end)
        for (auto& e : ctx.plan) e.updates = buffer.size();
    }
    std::size_t replay_per_epoch = 0;
    for (const auto& e : ctx.plan) replay_per_epoch += e.updates;
    ctx.schedule = effective_schedule(s);
    ctx.schedule.total_steps = std::max<std::size_t>(1, s.epochs * (spe + replay_per_epoch));

    {
      RunLedger ledger(dir / "ledger.jsonl");
      for (std::size_t e = 0; e < s.epochs; ++e) {
        for (std::size_t i = 0; i < spe; ++i) {
          const StepMetrics m = continual_step(ctx, stream.next());
          ledger.append({k, step_base + m.step, m.loss, m.penalty, m.lr, m.replayed_batches});
        }
      }
      step_base += ctx.updates;
      save_checkpoint(dir / "model.calm", model);
      checkpoints.push_back(state.evaluate(model, stage_label(s, k), k + 1, step_base));
      write_text(dir / "checkpoint.json", checkpoint_json(checkpoints.back()).dump(2) + "\n");
      ledger.checkpoint(k, checkpoints.back().label, fs::path("stage" + std::to_string(k)) / "model.calm");
    }
    write_text(dir / "fingerprint.json", stage_fingerprint(config, state.vocab_size, k) + "\n");
    ++result.stages_trained;
  }

  MetricsReport& report = result.report;
  report.run_id = config.name;
  report.strategy = report_strategy(config);
  report.hyperparameters = hyperparameters(config);
  report.checkpoints = checkpoints;
  report.deltas = compute_deltas(config, checkpoints);
  result.accesses = state.audit->records;

  if (checkpoints.size() == n + 1) {
    std::vector<fs::path> parts;
    for (std::size_t k = 0; k < n; ++k) parts.push_back(state.stage_dir(k) / "ledger.jsonl");
    concatenate(parts, out / "ledger.jsonl");
    result.final_model_path = out / "final.calm";
    if (n > 0) fs::copy_file(state.stage_dir(n - 1) / "model.calm", result.final_model_path,
                             fs::copy_options::overwrite_existing);
    result.report_path = out / "report.json";
    emit_report(report, result.report_path);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Sweep

SweepGrid parse_grid(const std::string& text) {
  try {
    const json j = json::parse(text, nullptr, true, true);
    check_keys(j, {"lambda", "fisher_fraction", "replay_mode"}, "grid");
    SweepGrid g;
    read(j, "lambda", g.lambdas);
    read(j, "fisher_fraction", g.fisher_fractions);
    if (j.contains("replay_mode")) {
      for (const auto& name : j.at("replay_mode").get<std::vector<std::string>>()) {
        auto m = parse_replay_mode(name);
        if (!m) throw DataError("grid: unknown replay_mode '" + name + "'");
        g.replay_modes.push_back(*m);
      }
    }
    return g;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed grid: ") + e.what());
  }
}

SweepGrid load_grid(const fs::path& path) { return parse_grid(read_text(path)); }

std::vector<ExperimentConfig> expand_grid(const ExperimentConfig& base, const SweepGrid& grid) {
  if (grid.lambdas.empty() && grid.fisher_fractions.empty() && grid.replay_modes.empty()) {
    throw ContractError("sweep: grid is empty");
  }
  // An empty axis contributes the single "unchanged" point.
  const std::vector<std::optional<double>> lambdas = [&] {
    std::vector<std::optional<double>> v(grid.lambdas.begin(), grid.lambdas.end());
    if (v.empty()) v.push_back(std::nullopt);
    return v;
  }();
  const std::vector<std::optional<double>> fractions = [&] {
    std::vector<std::optional<double>> v(grid.fisher_fractions.begin(), grid.fisher_fractions.end());
    if (v.empty()) v.push_back(std::nullopt);
    return v;
  }();
  std::vector<std::optional<ReplayMode>> modes(grid.replay_modes.begin(), grid.replay_modes.end());
  if (modes.empty()) modes.push_back(std::nullopt);

  std::vector<ExperimentConfig> out;
  for (const auto& lambda : lambdas)
    for (const auto& fraction : fractions)
      for (const auto& mode : modes) {
        ExperimentConfig c = base;
        std::vector<std::string> id, dir;
        if (lambda) {
          id.push_back("lambda=" + number(*lambda));
          dir.push_back("lambda-" + number(*lambda));
        }
        if (fraction) {
          id.push_back("fisher_fraction=" + number(*fraction));
          dir.push_back("fisher_fraction-" + number(*fraction));
        }
        if (mode) {
          id.push_back("replay_mode=" + std::string(to_string(*mode)));
          dir.push_back("replay_mode-" + std::string(to_string(*mode)));
        }
        for (auto& s : c.stages) {
          if (lambda && uses_penalty(s.strategy.kind)) s.strategy.ewc.lambda = *lambda;
          if (fraction && s.strategy.kind == StrategyKind::ewc) s.strategy.ewc.fisher_fraction = *fraction;
          if (mode && s.strategy.kind == StrategyKind::er) s.strategy.er.mode = *mode;
        }
        c.name = base.name + "[" + join(id, ",") + "]";
        c.output_dir = base.output_dir / join(dir, "_");
        out.push_back(std::move(c));
      }
  return out;
}

void rank_reports(std::vector<MetricsReport>& reports, const std::string& source, const std::string& target) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  auto key = [&](const MetricsReport& r) {
    const ForgettingDelta* d = r.delta_for(source);
    double ratio = d ? d->ratio : inf;
    double ppl = inf;
    if (!r.checkpoints.empty())
      for (const auto& p : r.checkpoints.back().perplexities)
        if (p.domain_id == target) ppl = p.perplexity;
    return std::pair{ratio, ppl};
  };
  std::stable_sort(reports.begin(), reports.end(),
                   [&](const MetricsReport& a, const MetricsReport& b) { return key(a) < key(b); });
}

SweepResult sweep(const ExperimentConfig& base, const SweepGrid& grid, const RunOptions& options) {
  const std::vector<ExperimentConfig> points = expand_grid(base, grid);
  const std::size_t threads = options.threads ? options.threads : thread_budget();
  const std::size_t workers = std::min(threads, points.size());

  std::vector<std::optional<MetricsReport>> reports(points.size());
  std::vector<std::string> errors(points.size());
  auto run_one = [&](std::size_t i, std::size_t run_threads) {
    try {
      RunOptions o = options;
      o.threads = run_threads;
      reports[i] = run(points[i], o).report;
    } catch (const std::exception& e) {
      errors[i] = e.what();
      if (errors[i].empty()) errors[i] = "unknown failure";
    }
  };
  if (workers <= 1) {
    for (std::size_t i = 0; i < points.size(); ++i) run_one(i, threads);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < points.size(); i = next++) run_one(i, 1);
      });
    }
    for (auto& t : pool) t.join();
  }

  SweepResult result;
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (reports[i]) {
      result.ranked.push_back(std::move(*reports[i]));
    } else {
      result.failures.push_back({points[i].name, errors[i]});
    }
  }
  if (!base.stages.empty()) {
    rank_reports(result.ranked, base.stages.front().train_domains.front(), base.stages.back().train_domains.front());
  }
  result.summary = render_summary(result.ranked);
  for (const auto& f : result.failures) result.summary += "FAILED " + f.run_id + ": " + f.message + "\n";
  fs::create_directories(base.output_dir);
  write_text(base.output_dir / "summary.txt", result.summary);
  return result;
}

}  // namespace calm
