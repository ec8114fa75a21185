#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "calm/autodiff.hpp"
#include "calm/container.hpp"
#include "calm/data.hpp"

namespace calm {

struct ModelConfig {
  std::size_t vocab_size = 200;
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  std::size_t n_layers = 4;
  std::size_t d_ff = 512;
  std::size_t max_seq_len = 128;
  std::uint64_t seed = 0;

  /// Human-readable problems; empty when the config is usable.
  std::vector<std::string> violations() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Sum of masked-token negative log-likelihoods and how many tokens it covers.
struct NllTotals {
  double nll_sum = 0.0;
  std::size_t count = 0;
};

/// Bidirectional pre-layer-norm transformer encoder with a masked-LM head.
///
/// Layer groups: token and position embeddings are group 0, block i is
/// group i + 1, and the head (final layer norm plus output bias) is group
/// n_layers + 1. The head projects through the transposed token embedding.
class MlmModel {
 public:
  /// Seeded N(0, 0.02) weights, unit layer-norm gains, zero biases.
  /// Throws ContractError for an invalid config.
  explicit MlmModel(const ModelConfig& config);

  const ModelConfig& config() const noexcept { return config_; }
  std::span<Parameter> parameters() noexcept { return params_; }
  std::span<const Parameter> parameters() const noexcept { return params_; }
  /// Throws ContractError for an unknown name.
  Parameter& parameter(const std::string& name);
  const Parameter& parameter(const std::string& name) const;
  /// Total number of scalar weights.
  std::size_t parameter_count() const noexcept;
  int top_group() const noexcept { return static_cast<int>(config_.n_layers) + 1; }

  /// Final-layer-norm hidden states, shape (B, L, d_model). When
  /// `attention` is given, each block's softmax weights (B, H, L, L) are
  /// appended to it. With track_grad false the weights enter the tape as
  /// constants and no gradient reaches the parameters.
  Var hidden_states(Tape& tape, const IdMatrix& inputs, bool track_grad = true,
                    std::vector<Tensor>* attention = nullptr);

  /// Mean cross-entropy over the batch's non-ignored targets. Throws
  /// EmptyLossError when the batch has none.
  Var mlm_loss(Tape& tape, const TokenBatch& batch, bool track_grad = true);

  /// Summed masked-token NLL without touching gradients.
  NllTotals masked_nll(const TokenBatch& batch);

 private:
  Var param_var(Tape& tape, std::size_t index, bool track_grad);
  std::size_t add_parameter(std::string name, Tensor value, int group);

  struct BlockSlots {
    std::size_t ln1_gain, ln1_bias, wq, bq, wk, bk, wv, bv, wo, bo;
    std::size_t ln2_gain, ln2_bias, w1, b1, w2, b2;
  };

  ModelConfig config_;
  std::vector<Parameter> params_;
  std::size_t token_embed_ = 0, position_embed_ = 0, head_gain_ = 0, head_bias_ln_ = 0, head_bias_ = 0;
  std::vector<BlockSlots> blocks_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

/// Parameter values keyed by name.
using ModelSnapshot = std::map<std::string, Tensor>;

ModelSnapshot snapshot(const MlmModel& model);
/// Overwrites values (grads untouched). Throws CheckpointError unless the
/// snapshot holds exactly the model's names with matching shapes.
void restore(MlmModel& model, const ModelSnapshot& snap);

Container to_container(const ModelConfig& config);
ModelConfig config_from_container(const Container& c);

void save_checkpoint(const std::filesystem::path& path, const MlmModel& model);
MlmModel load_checkpoint(const std::filesystem::path& path);

}  // namespace calm
