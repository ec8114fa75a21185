#include "calm/model.hpp"

#include <cmath>

#include "calm/error.hpp"
#include "calm/rng.hpp"

namespace calm {

std::vector<std::string> ModelConfig::violations() const {
  std::vector<std::string> out;
  auto positive = [&](std::size_t v, const char* name) {
    if (v == 0) out.push_back(std::string(name) + " must be positive");
  };
  positive(vocab_size, "vocab_size");
  positive(d_model, "d_model");
  positive(n_heads, "n_heads");
  positive(n_layers, "n_layers");
  positive(d_ff, "d_ff");
  positive(max_seq_len, "max_seq_len");
  if (vocab_size > 0 && vocab_size <= static_cast<std::size_t>(kFirstSymbolId)) {
    out.push_back("vocab_size must exceed the 3 reserved ids");
  }
  if (n_heads > 0 && d_model % n_heads != 0) out.push_back("d_model must be divisible by n_heads");
  return out;
}

std::size_t MlmModel::add_parameter(std::string name, Tensor value, int group) {
  const std::size_t i = params_.size();
  index_.emplace(name, i);
  params_.emplace_back(std::move(name), std::move(value), group);
  return i;
}

MlmModel::MlmModel(const ModelConfig& config) : config_(config) {
  if (auto v = config.violations(); !v.empty()) throw ContractError("model config: " + v.front());
  Rng rng(derive_seed(config.seed, "init"));
  const std::size_t d = config.d_model;
  auto normal = [&](Shape shape) {
    Tensor t(std::move(shape));
    for (double& x : t.data()) x = 0.02 * rng.normal();
    return t;
  };
  auto ones = [](std::size_t n) { return Tensor(Shape{n}, 1.0); };
  auto zeros = [](std::size_t n) { return Tensor(Shape{n}); };

  params_.reserve(5 + 16 * config.n_layers);
  token_embed_ = add_parameter("embed.token", normal({config.vocab_size, d}), 0);
  position_embed_ = add_parameter("embed.position", normal({config.max_seq_len, d}), 0);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    const std::string p = "block" + std::to_string(l) + ".";
    const int g = static_cast<int>(l) + 1;
    BlockSlots s{};
    s.ln1_gain = add_parameter(p + "ln1.gain", ones(d), g);
    s.ln1_bias = add_parameter(p + "ln1.bias", zeros(d), g);
    s.wq = add_parameter(p + "attn.wq", normal({d, d}), g);
    s.bq = add_parameter(p + "attn.bq", zeros(d), g);
    s.wk = add_parameter(p + "attn.wk", normal({d, d}), g);
    s.bk = add_parameter(p + "attn.bk", zeros(d), g);
    s.wv = add_parameter(p + "attn.wv", normal({d, d}), g);
    s.bv = add_parameter(p + "attn.bv", zeros(d), g);
    s.wo = add_parameter(p + "attn.wo", normal({d, d}), g);
    s.bo = add_parameter(p + "attn.bo", zeros(d), g);
    s.ln2_gain = add_parameter(p + "ln2.gain", ones(d), g);
    s.ln2_bias = add_parameter(p + "ln2.bias", zeros(d), g);
    s.w1 = add_parameter(p + "ffn.w1", normal({d, config.d_ff}), g);
    s.b1 = add_parameter(p + "ffn.b1", zeros(config.d_ff), g);
    s.w2 = add_parameter(p + "ffn.w2", normal({config.d_ff, d}), g);
    s.b2 = add_parameter(p + "ffn.b2", zeros(d), g);
    blocks_.push_back(s);
  }
  const int head = top_group();
  head_gain_ = add_parameter("head.ln.gain", ones(d), head);
  head_bias_ln_ = add_parameter("head.ln.bias", zeros(d), head);
  head_bias_ = add_parameter("head.bias", zeros(config.vocab_size), head);
}

Parameter& MlmModel::parameter(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("model has no parameter named " + name);
  return params_[it->second];
}

const Parameter& MlmModel::parameter(const std::string& name) const {
  return const_cast<MlmModel*>(this)->parameter(name);
}

std::size_t MlmModel::parameter_count() const noexcept {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

Var MlmModel::param_var(Tape& tape, std::size_t index, bool track_grad) {
  return track_grad ? tape.parameter(params_[index]) : tape.constant(params_[index].value);
}

Var MlmModel::hidden_states(Tape& tape, const IdMatrix& inputs, bool track_grad, std::vector<Tensor>* attention) {
  const std::size_t batch = inputs.rows;
  const std::size_t len = inputs.cols;
  if (len == 0 || len > config_.max_seq_len) {
    throw ContractError("sequence length " + std::to_string(len) + " outside [1, " +
                        std::to_string(config_.max_seq_len) + "]");
  }
  const std::size_t d = config_.d_model;
  const std::size_t heads = config_.n_heads;
  const std::size_t dh = d / heads;
  auto P = [&](std::size_t i) { return param_var(tape, i, track_grad); };

  std::vector<std::int32_t> positions(len);
  for (std::size_t i = 0; i < len; ++i) positions[i] = static_cast<std::int32_t>(i);
  Var x = embedding(P(token_embed_), inputs.values, Shape{batch, len});
  x = add(x, embedding(P(position_embed_), positions, Shape{len}));

  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  for (const auto& s : blocks_) {
    Var h = layer_norm(x, P(s.ln1_gain), P(s.ln1_bias));
    auto split_heads = [&](std::size_t w, std::size_t b) {
      return transpose(reshape(add(matmul(h, P(w)), P(b)), Shape{batch, len, heads, dh}), 1, 2);
    };
    Var q = split_heads(s.wq, s.bq);
    Var k = split_heads(s.wk, s.bk);
    Var v = split_heads(s.wv, s.bv);
    Var weights = softmax(scale(matmul(q, transpose(k, 2, 3)), inv_sqrt_dh));
    if (attention) attention->push_back(weights.value());
    Var ctx = reshape(transpose(matmul(weights, v), 1, 2), Shape{batch, len, d});
    x = add(x, add(matmul(ctx, P(s.wo)), P(s.bo)));

    Var h2 = layer_norm(x, P(s.ln2_gain), P(s.ln2_bias));
    Var ff = add(matmul(gelu(add(matmul(h2, P(s.w1)), P(s.b1))), P(s.w2)), P(s.b2));
    x = add(x, ff);
  }
  return layer_norm(x, P(head_gain_), P(head_bias_ln_));
}

Var MlmModel::mlm_loss(Tape& tape, const TokenBatch& batch, bool track_grad) {
  std::vector<std::size_t> rows;
  std::vector<std::int32_t> targets;
  for (std::size_t i = 0; i < batch.targets.values.size(); ++i) {
    if (batch.targets.values[i] != kIgnoreIndex) {
      rows.push_back(i);
      targets.push_back(batch.targets.values[i]);
    }
  }
  if (rows.empty()) throw EmptyLossError("mlm_loss: batch has no prediction targets");
  for (auto t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= config_.vocab_size) {
      throw ContractError("mlm_loss: target id " + std::to_string(t) + " outside vocabulary");
    }
  }
  Var hidden = hidden_states(tape, batch.inputs, track_grad);
  Var flat = reshape(hidden, Shape{batch.inputs.rows * batch.inputs.cols, config_.d_model});
  // Only masked positions are projected onto the vocabulary.
  Var picked = gather_rows(flat, rows);
  Var logits = add(matmul(picked, transpose(param_var(tape, token_embed_, track_grad), 0, 1)),
                   param_var(tape, head_bias_, track_grad));
  return cross_entropy(logits, targets, kIgnoreIndex);
}

NllTotals MlmModel::masked_nll(const TokenBatch& batch) {
  const std::size_t count = batch.target_count();
  if (count == 0) return {};
  Tape tape;
  const double mean = mlm_loss(tape, batch, /*track_grad=*/false).value().item();
  return {mean * static_cast<double>(count), count};
}

ModelSnapshot snapshot(const MlmModel& model) {
  ModelSnapshot snap;
  for (const auto& p : model.parameters()) snap.emplace(p.name, p.value);
  return snap;
}

void restore(MlmModel& model, const ModelSnapshot& snap) {
  if (snap.size() != model.parameters().size()) {
    throw CheckpointError("snapshot holds " + std::to_string(snap.size()) + " tensors, model has " +
                          std::to_string(model.parameters().size()));
  }
  for (const auto& p : model.parameters()) {
    auto it = snap.find(p.name);
    if (it == snap.end()) throw CheckpointError("snapshot lacks parameter " + p.name);
    if (it->second.shape() != p.value.shape()) {
      throw CheckpointError("parameter " + p.name + " has shape " + to_string(p.value.shape()) + ", snapshot has " +
                            to_string(it->second.shape()));
    }
  }
  for (auto& p : model.parameters()) p.value = snap.at(p.name);
}

Container to_container(const ModelConfig& config) {
  Container c;
  c.metadata["kind"] = "model";
  c.metadata["config.vocab_size"] = std::to_string(config.vocab_size);
  c.metadata["config.d_model"] = std::to_string(config.d_model);
  c.metadata["config.n_heads"] = std::to_string(config.n_heads);
  c.metadata["config.n_layers"] = std::to_string(config.n_layers);
  c.metadata["config.d_ff"] = std::to_string(config.d_ff);
  c.metadata["config.max_seq_len"] = std::to_string(config.max_seq_len);
  c.metadata["config.seed"] = std::to_string(config.seed);
  return c;
}

ModelConfig config_from_container(const Container& c) {
  auto num = [&](const char* key) {
    const std::string& v = c.meta(key);
    try {
      return std::stoull(v);
    } catch (const std::exception&) {
      throw CheckpointError(std::string("bad value for ") + key + ": " + v);
    }
  };
  ModelConfig config;
  config.vocab_size = num("config.vocab_size");
  config.d_model = num("config.d_model");
  config.n_heads = num("config.n_heads");
  config.n_layers = num("config.n_layers");
  config.d_ff = num("config.d_ff");
  config.max_seq_len = num("config.max_seq_len");
  config.seed = num("config.seed");
  return config;
}

void save_checkpoint(const std::filesystem::path& path, const MlmModel& model) {
  Container c = to_container(model.config());
  for (const auto& p : model.parameters()) c.tensors.emplace_back(p.name, p.value);
  write_container(path, c);
}

MlmModel load_checkpoint(const std::filesystem::path& path) {
  const Container c = read_container(path);
  MlmModel model(config_from_container(c));
  ModelSnapshot snap;
  for (const auto& [name, t] : c.tensors) snap.emplace(name, t);
  restore(model, snap);
  return model;
}

}  // namespace calm
