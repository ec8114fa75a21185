#include <catch_amalgamated.hpp>

#include <cmath>

#include "calm/container.hpp"
#include "calm/error.hpp"
#include "calm/model.hpp"
#include "support.hpp"

using namespace calm;
using calm::test::rel_error;
using calm::test::TempDir;

namespace {

ModelConfig tiny(std::size_t vocab = 12, std::size_t d = 8, std::size_t layers = 1) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.d_model = d;
  c.n_heads = 2;
  c.n_layers = layers;
  c.d_ff = 2 * d;
  c.max_seq_len = 16;
  c.seed = 3;
  return c;
}

TokenBatch random_batch(std::size_t rows, std::size_t len, std::size_t vocab, std::uint64_t seed, double p = 0.3) {
  Rng rng(seed);
  IdMatrix seqs(rows, len);
  for (auto& v : seqs.values) v = static_cast<std::int32_t>(kFirstSymbolId + rng.below(vocab - kFirstSymbolId));
  TokenBatch b = mask_batch(seqs, p, rng, vocab, "A");
  if (b.target_count() == 0) b.targets.values[0] = seqs.values[0];
  return b;
}

}  // namespace

TEST_CASE("parameter count matches the closed form") {
  ModelConfig c;
  c.vocab_size = 40;
  c.d_model = 64;
  c.n_heads = 4;
  c.n_layers = 2;
  c.d_ff = 128;
  c.max_seq_len = 64;
  const MlmModel m(c);
  const std::size_t V = 40, d = 64, L = 64, ff = 128, layers = 2;
  const std::size_t per_block = 2 * d                 // ln1
                                + 4 * (d * d + d)     // q, k, v, o
                                + 2 * d               // ln2
                                + d * ff + ff         // ffn in
                                + ff * d + d;         // ffn out
  const std::size_t expected = V * d + L * d + layers * per_block + 2 * d + V;
  CHECK(m.parameter_count() == expected);
  CHECK(m.top_group() == 3);
}

TEST_CASE("initialization is seeded with unit layer-norm gains") {
  const MlmModel a(tiny()), b(tiny());
  REQUIRE(a.parameters().size() == b.parameters().size());
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    CHECK(a.parameters()[i].value == b.parameters()[i].value);
    const auto& p = a.parameters()[i];
    if (p.name.ends_with(".gain")) {
      for (double v : p.value.data()) CHECK(v == 1.0);
    }
  }
  ModelConfig other = tiny();
  other.seed = 4;
  CHECK(MlmModel(other).parameter("embed.token").value != a.parameter("embed.token").value);
  CHECK_THROWS_AS(a.parameter("nope"), ContractError);
  ModelConfig bad = tiny();
  bad.d_model = 9;
  CHECK_THROWS_AS(MlmModel(bad), ContractError);
}

TEST_CASE("layer groups run from embeddings to head") {
  const MlmModel m(tiny(12, 8, 2));
  CHECK(m.parameter("embed.token").layer_group == 0);
  CHECK(m.parameter("block0.attn.wq").layer_group == 1);
  CHECK(m.parameter("block1.ffn.w2").layer_group == 2);
  CHECK(m.parameter("head.bias").layer_group == 3);
}

TEST_CASE("attention rows sum to one") {
  MlmModel m(tiny(12, 8, 2));
  const TokenBatch b = random_batch(3, 7, 12, 1);
  Tape tape;
  std::vector<Tensor> attention;
  const Var h = m.hidden_states(tape, b.inputs, false, &attention);
  CHECK(h.shape() == Shape{3, 7, 8});
  REQUIRE(attention.size() == 2);
  for (const auto& a : attention) {
    REQUIRE(a.shape() == Shape{3, 2, 7, 7});
    for (std::size_t row = 0; row < a.size() / 7; ++row) {
      double total = 0.0;
      for (std::size_t j = 0; j < 7; ++j) total += a[row * 7 + j];
      CHECK(total == Catch::Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("full masked-LM gradient matches finite differences") {
  MlmModel m(tiny(12, 8, 1));
  // Spread the weights so the loss is not flat around the initialization.
  Rng rng(5);
  for (auto& p : m.parameters())
    for (double& v : p.value.data()) v += 0.3 * (rng.uniform() - 0.5);
  const TokenBatch b = random_batch(2, 6, 12, 7, 0.5);

  auto params = m.parameters();
  zero_grads(params);
  {
    Tape tape;
    tape.backward(m.mlm_loss(tape, b));
  }
  auto loss_at = [&] {
    Tape tape;
    return m.mlm_loss(tape, b, false).value().item();
  };
  const double h = 1e-5;
  double worst = 0.0;
  for (auto& p : params) {
    std::vector<double> numeric(p.value.size());
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double saved = p.value[i];
      p.value[i] = saved + h;
      const double up = loss_at();
      p.value[i] = saved - h;
      const double down = loss_at();
      p.value[i] = saved;
      numeric[i] = (up - down) / (2 * h);
    }
    const double err = rel_error(p.grad.data(), numeric);
    INFO(p.name);
    CHECK(err < 1e-5);
    worst = std::max(worst, err);
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("untrained loss is near the uniform baseline") {
  const std::size_t vocab = 40;
  MlmModel m(tiny(vocab, 16, 2));
  double total = 0.0;
  for (int i = 0; i < 50; ++i) {
    Tape tape;
    total += m.mlm_loss(tape, random_batch(4, 16, vocab, 100 + i, 0.15), false).value().item();
  }
  const double mean = total / 50.0;
  CHECK(std::abs(mean - std::log(double(vocab))) <= 0.15 * std::log(double(vocab)));
}

TEST_CASE("loss edge cases") {
  MlmModel m(tiny());
  TokenBatch b = random_batch(2, 6, 12, 9);
  TokenBatch empty = b;
  std::fill(empty.targets.values.begin(), empty.targets.values.end(), kIgnoreIndex);
  Tape tape;
  CHECK_THROWS_AS(m.mlm_loss(tape, empty), EmptyLossError);

  TokenBatch doubled;
  doubled.inputs = IdMatrix(4, 6);
  doubled.targets = IdMatrix(4, 6);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 6; ++c) {
      doubled.inputs.at(r, c) = b.inputs.at(r % 2, c);
      doubled.targets.at(r, c) = b.targets.at(r % 2, c);
    }
  Tape t1, t2;
  CHECK(m.mlm_loss(t1, doubled, false).value().item() ==
        Catch::Approx(m.mlm_loss(t2, b, false).value().item()).epsilon(1e-12));

  const NllTotals totals = m.masked_nll(b);
  CHECK(totals.count == b.target_count());
  Tape t3;
  CHECK(totals.nll_sum / double(totals.count) == Catch::Approx(m.mlm_loss(t3, b, false).value().item()).epsilon(1e-12));

  TokenBatch too_long = random_batch(1, 17, 12, 2);
  Tape t4;
  CHECK_THROWS_AS(m.mlm_loss(t4, too_long), ContractError);
}

TEST_CASE("snapshots, checkpoints and containers") {
  MlmModel m(tiny());
  const ModelSnapshot snap = snapshot(m);
  m.parameters()[0].value[0] += 1.0;
  CHECK(snap.at(m.parameters()[0].name) != m.parameters()[0].value);
  restore(m, snap);
  for (const auto& p : m.parameters()) CHECK(p.value == snap.at(p.name));

  MlmModel wider(tiny(12, 16, 1));
  CHECK_THROWS_AS(restore(wider, snap), CheckpointError);

  TempDir dir("ckpt");
  save_checkpoint(dir / "m.calm", m);
  const MlmModel loaded = load_checkpoint(dir / "m.calm");
  CHECK(loaded.config() == m.config());
  for (std::size_t i = 0; i < m.parameters().size(); ++i) CHECK(loaded.parameters()[i].value == m.parameters()[i].value);

  const std::string bytes = encode_container(to_container(m.config()));
  CHECK(decode_container(bytes) == to_container(m.config()));
  CHECK(config_from_container(decode_container(bytes)) == m.config());
  CHECK_THROWS_AS(decode_container(bytes.substr(0, bytes.size() - 3)), CheckpointError);
  CHECK_THROWS_AS(decode_container("CALM2" + bytes.substr(5)), CheckpointError);
  CHECK_THROWS_AS(decode_container(bytes + "x"), CheckpointError);
  CHECK_THROWS_AS(load_checkpoint(dir / "absent.calm"), IoError);
}
