#include "calm/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <set>
#include <sstream>

#include "calm/error.hpp"
#include "calm/rng.hpp"

namespace calm {

using ordered_json = nlohmann::ordered_json;

DomainPerplexity perplexity_from_nll(std::string domain_id, double nll_sum, std::size_t count) {
  if (count == 0) throw ContractError("perplexity: no masked positions in " + domain_id);
  return {std::move(domain_id), std::exp(nll_sum / static_cast<double>(count)), count};
}

DomainPerplexity perplexity(MlmModel& model, const Corpus& corpus, const EvalOptions& options) {
  if (options.batch_size == 0) throw ContractError("perplexity: batch_size must be positive");
  const IdMatrix windows = make_windows(corpus, options.seq_len, "eval");
  const std::uint64_t mask_seed = derive_seed(options.eval_seed, "eval");
  double nll = 0.0;
  std::size_t count = 0;
  for (std::size_t first = 0, b = 0; first < windows.rows; first += options.batch_size, ++b) {
    const std::size_t rows = std::min(options.batch_size, windows.rows - first);
    IdMatrix seqs(rows, options.seq_len);
    std::copy_n(windows.values.begin() + static_cast<std::ptrdiff_t>(first * options.seq_len), rows * options.seq_len,
                seqs.values.begin());
    Rng rng(derive_seed(mask_seed, b));
    const TokenBatch batch = mask_batch(seqs, options.mask_prob, rng, corpus.vocab_size(), corpus.domain_id());
    const NllTotals t = model.masked_nll(batch);
    nll += t.nll_sum;
    count += t.count;
  }
  return perplexity_from_nll(corpus.domain_id(), nll, count);
}

ForgettingDelta forgetting_delta(const DomainPerplexity& before, const DomainPerplexity& after) {
  if (before.domain_id != after.domain_id) {
    throw ContractError("forgetting_delta: domains differ (" + before.domain_id + " vs " + after.domain_id + ")");
  }
  return {before.domain_id, {}, {}, after.perplexity - before.perplexity, after.perplexity / before.perplexity};
}

const DomainPerplexity& Checkpoint::at(const std::string& domain_id) const {
  for (const auto& p : perplexities)
    if (p.domain_id == domain_id) return p;
  throw ContractError("checkpoint " + label + " has no perplexity for domain " + domain_id);
}

const ForgettingDelta* MetricsReport::delta_for(const std::string& domain_id) const {
  for (const auto& d : deltas)
    if (d.domain_id == domain_id) return &d;
  return nullptr;
}

void check_report(const MetricsReport& report) {
  if (report.checkpoints.empty()) return;
  auto domains = [](const Checkpoint& c) {
    std::vector<std::string> out;
    for (const auto& p : c.perplexities) out.push_back(p.domain_id);
    return out;
  };
  const auto first = domains(report.checkpoints.front());
  for (const auto& c : report.checkpoints) {
    if (domains(c) != first) throw ContractError("report " + report.run_id + ": checkpoint " + c.label + " covers different domains");
  }
}

// ---------------------------------------------------------------------------
// JSON

std::string report_to_json(const MetricsReport& report) {
  ordered_json j;
  j["run_id"] = report.run_id;
  j["strategy"] = report.strategy;
  j["hyperparameters"] = ordered_json::object();
  for (const auto& [k, v] : report.hyperparameters) j["hyperparameters"][k] = v;
  j["observable"] = "masked-token perplexity on held-out test splits (stands in for downstream task scores)";
  j["checkpoints"] = ordered_json::array();
  for (const auto& c : report.checkpoints) {
    ordered_json cj;
    cj["label"] = c.label;
    cj["stage"] = c.stage;
    cj["step"] = c.step;
    cj["perplexities"] = ordered_json::array();
    for (const auto& p : c.perplexities) {
      cj["perplexities"].push_back({{"domain_id", p.domain_id}, {"perplexity", p.perplexity}, {"token_count", p.token_count}});
    }
    j["checkpoints"].push_back(std::move(cj));
  }
  j["deltas"] = ordered_json::array();
  for (const auto& d : report.deltas) {
    j["deltas"].push_back({{"domain_id", d.domain_id},
                           {"from", d.from_label},
                           {"to", d.to_label},
                           {"delta", d.delta},
                           {"ratio", d.ratio}});
  }
  return j.dump(2) + "\n";
}

MetricsReport report_from_json(const std::string& text) {
  try {
    const auto j = ordered_json::parse(text);
    MetricsReport r;
    r.run_id = j.at("run_id").get<std::string>();
    r.strategy = j.at("strategy").get<std::string>();
    for (const auto& [k, v] : j.at("hyperparameters").items()) r.hyperparameters[k] = v.get<std::string>();
    for (const auto& cj : j.at("checkpoints")) {
      Checkpoint c;
      c.label = cj.at("label").get<std::string>();
      c.stage = cj.at("stage").get<std::size_t>();
      c.step = cj.at("step").get<std::size_t>();
      for (const auto& pj : cj.at("perplexities")) {
        c.perplexities.push_back({pj.at("domain_id").get<std::string>(), pj.at("perplexity").get<double>(),
                                  pj.at("token_count").get<std::size_t>()});
      }
      r.checkpoints.push_back(std::move(c));
    }
    for (const auto& dj : j.at("deltas")) {
      r.deltas.push_back({dj.at("domain_id").get<std::string>(), dj.at("from").get<std::string>(),
                          dj.at("to").get<std::string>(), dj.at("delta").get<double>(), dj.at("ratio").get<double>()});
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed report: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Tables

namespace {

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

std::string pad_right(const std::string& s, std::size_t width) {
  return s.size() >= width ? s : s + std::string(width - s.size(), ' ');
}

std::string pad_left(const std::string& s, std::size_t width) {
  return s.size() >= width ? s : std::string(width - s.size(), ' ') + s;
}

// Renders rows of cells with the first column left-aligned and the rest
// right-aligned, separated by two spaces, with a rule under the header.
std::string layout(const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width;
  for (const auto& row : rows)
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (width.size() <= c) width.push_back(0);
      width[c] = std::max(width[c], row[c].size());
    }
  std::string out;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::string line;
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      if (c) line += "  ";
      line += c == 0 ? pad_right(rows[r][c], width[c]) : pad_left(rows[r][c], width[c]);
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    out += line + "\n";
    if (r == 0) {
      std::size_t total = 0;
      for (std::size_t c = 0; c < width.size(); ++c) total += width[c] + (c ? 2 : 0);
      out += std::string(total, '-') + "\n";
    }
  }
  return out;
}

std::vector<std::string> domain_order(const MetricsReport& r) {
  std::vector<std::string> out;
  if (!r.checkpoints.empty())
    for (const auto& p : r.checkpoints.front().perplexities) out.push_back(p.domain_id);
  return out;
}

}  // namespace

std::string render_table(const MetricsReport& report) {
  check_report(report);
  const auto domains = domain_order(report);
  std::string out = "run " + report.run_id + " (" + report.strategy + ")\n";
  out += "masked-token perplexity on held-out test splits\n\n";
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> header{"checkpoint"};
  for (const auto& d : domains) header.push_back(d);
  rows.push_back(header);
  for (const auto& c : report.checkpoints) {
    std::vector<std::string> row{c.label};
    for (const auto& p : c.perplexities) row.push_back(fixed(p.perplexity, 4));
    rows.push_back(std::move(row));
  }
  out += layout(rows);
  if (!report.deltas.empty()) {
    out += "\n";
    std::vector<std::vector<std::string>> drows{{"domain", "from", "to", "delta", "ratio"}};
    for (const auto& d : report.deltas) {
      drows.push_back({d.domain_id, d.from_label, d.to_label, fixed(d.delta, 4), fixed(d.ratio, 4)});
    }
    out += layout(drows);
  }
  return out;
}

std::string render_summary(std::span<const MetricsReport> reports) {
  std::vector<std::string> domains;
  std::set<std::string> seen;
  for (const auto& r : reports)
    for (const auto& d : domain_order(r))
      if (seen.insert(d).second) domains.push_back(d);

  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> header{"run"};
  for (const auto& d : domains) header.push_back(d);
  for (const auto& d : domains) header.push_back(d + " ratio");
  rows.push_back(header);
  for (const auto& r : reports) {
    std::vector<std::string> row{r.run_id + " (" + r.strategy + ")"};
    for (const auto& d : domains) {
      std::string cell = "-";
      if (!r.checkpoints.empty())
        for (const auto& p : r.checkpoints.back().perplexities)
          if (p.domain_id == d) cell = fixed(p.perplexity, 4);
      row.push_back(cell);
    }
    for (const auto& d : domains) {
      const ForgettingDelta* delta = r.delta_for(d);
      row.push_back(delta ? fixed(delta->ratio, 4) : "-");
    }
    rows.push_back(std::move(row));
  }
  return "final masked-token perplexity on held-out test splits\n\n" + layout(rows);
}

void emit_report(const MetricsReport& report, const std::filesystem::path& path) {
  check_report(report);
  auto write = [](const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw IoError("cannot write report " + p.string());
    out << text;
    if (!out) throw IoError("write failed: " + p.string());
  };
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  write(path, report_to_json(report));
  std::filesystem::path table = path;
  table.replace_extension(".txt");
  write(table, render_table(report));
}

MetricsReport load_report(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read report " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return report_from_json(ss.str());
}

}  // namespace calm
