#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "calm/data.hpp"
#include "calm/model.hpp"

namespace calm {

struct DomainPerplexity {
  std::string domain_id;
  double perplexity = 1.0;
  std::size_t token_count = 0;
  friend bool operator==(const DomainPerplexity&, const DomainPerplexity&) = default;
};

/// exp(nll_sum / count). Throws ContractError when count is zero.
DomainPerplexity perplexity_from_nll(std::string domain_id, double nll_sum, std::size_t count);

struct EvalOptions {
  std::size_t seq_len = 64;
  std::size_t batch_size = 32;
  double mask_prob = 0.15;
  std::uint64_t eval_seed = 0;
};

/// Masked-position perplexity over every window of a held-out corpus. The
/// mask depends only on (corpus, options), so every model evaluated with the
/// same options is scored on the same positions. No parameter is modified.
DomainPerplexity perplexity(MlmModel& model, const Corpus& corpus, const EvalOptions& options);

struct ForgettingDelta {
  std::string domain_id;
  std::string from_label;
  std::string to_label;
  double delta = 0.0;  // after - before
  double ratio = 1.0;  // after / before
  friend bool operator==(const ForgettingDelta&, const ForgettingDelta&) = default;
};

/// Throws ContractError when the two measurements are of different domains.
ForgettingDelta forgetting_delta(const DomainPerplexity& before, const DomainPerplexity& after);

struct Checkpoint {
  std::string label;
  std::size_t stage = 0;
  std::size_t step = 0;
  std::vector<DomainPerplexity> perplexities;

  /// Throws ContractError if the domain was not evaluated.
  const DomainPerplexity& at(const std::string& domain_id) const;
  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

struct MetricsReport {
  std::string run_id;
  std::string strategy;
  std::map<std::string, std::string> hyperparameters;
  std::vector<Checkpoint> checkpoints;
  std::vector<ForgettingDelta> deltas;

  /// Delta for a domain, or nullptr.
  const ForgettingDelta* delta_for(const std::string& domain_id) const;
  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

/// Throws ContractError unless every checkpoint covers the same domains.
void check_report(const MetricsReport& report);

std::string report_to_json(const MetricsReport& report);
/// Throws DataError on malformed input.
MetricsReport report_from_json(const std::string& text);

/// One row per checkpoint, one perplexity column per domain, followed by the
/// forgetting deltas.
std::string render_table(const MetricsReport& report);
/// One row per report (its final checkpoint), one column per domain, plus the
/// forgetting ratio of each domain that has a delta.
std::string render_summary(std::span<const MetricsReport> reports);

/// Writes `path` (JSON) and `path` with extension ".txt" (table). Output
/// bytes depend only on the report contents. Throws IoError naming the path.
void emit_report(const MetricsReport& report, const std::filesystem::path& path);
MetricsReport load_report(const std::filesystem::path& path);

}  // namespace calm
