#include <doctest.h>

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "rad2ct/error.hpp"
#include "rad2ct/optim.hpp"
#include "rad2ct/translator.hpp"

using namespace rad2ct;
using rad2ct::testing::gradcheck;

namespace {

TokenGrid random_grid(std::size_t h, std::size_t w, std::size_t d, Modality m, std::size_t n, std::mt19937_64& rng) {
  TokenGrid g{h, w, d, std::vector<TokenId>(h * w * d), m};
  for (auto& t : g.indices) t = static_cast<TokenId>(rng() % n);
  return g;
}

TranslatorConfig small(std::size_t n = 8, std::size_t context = 16) {
  TranslatorConfig c;
  c.blocks = 2;
  c.heads = 2;
  c.embed = 8;
  c.context = context;
  c.codebook_size = n;
  return c;
}

TranslationSequence random_sequence(std::size_t n, std::mt19937_64& rng, std::size_t hw = 2, std::size_t d = 2) {
  return build_sequence(random_grid(hw, hw, 1, Modality::thrx, n, rng), random_grid(hw, hw, 1, Modality::thrx, n, rng),
                        random_grid(hw, hw, d, Modality::ct, n, rng), n);
}

}  // namespace

TEST_CASE("flatten raster order") {
  TokenGrid g{2, 2, 1, {1, 2, 3, 4}, Modality::thrx};
  CHECK(flatten_tokens(g) == std::vector<TokenId>{1, 2, 3, 4});
  // 2x1x2: height 2, width 1, depth 2 -> depth-major concatenation of two 2x1 rasters
  TokenGrid g3{2, 1, 2, {10, 11, 20, 21}, Modality::ct};
  auto flat = flatten_tokens(g3);
  CHECK(flat == std::vector<TokenId>{10, 11, 20, 21});
  std::mt19937_64 rng(1);
  for (int i = 0; i < 20; ++i) {
    auto r = random_grid(1 + rng() % 4, 1 + rng() % 4, 1 + rng() % 4, Modality::ct, 9, rng);
    CHECK(unflatten_tokens(flatten_tokens(r), r.height, r.width, r.depth, r.modality) == r);
  }
  CHECK_THROWS_AS(unflatten_tokens(flat, 2, 2, 2, Modality::ct), DimensionError);
}

TEST_CASE("build_sequence layout") {
  std::mt19937_64 rng(2);
  SUBCASE("desk lengths and all-zero offsets") {
    TokenGrid z2{4, 4, 1, std::vector<TokenId>(16, 0), Modality::thrx};
    TokenGrid z3{4, 4, 4, std::vector<TokenId>(64, 0), Modality::ct};
    auto s = build_sequence(z2, z2, z3, 256);
    REQUIRE(s.tokens.size() == 97);
    CHECK(s.tokens[0] == 512);
    for (std::size_t i = 1; i < 33; ++i) CHECK(s.tokens[i] == 0);
    for (std::size_t i = 33; i < 97; ++i) CHECK(s.tokens[i] == 256);
    CHECK(s.layout.ct_begin() == 33);
    CHECK(ct_grid(s.tokens, s.layout, 256, 4, 4, 4) == z3);
  }
  SUBCASE("paper lengths") {
    auto s = build_sequence(random_grid(16, 16, 1, Modality::thrx, 8192, rng),
                            random_grid(16, 16, 1, Modality::thrx, 8192, rng),
                            random_grid(16, 16, 16, Modality::ct, 8192, rng), 8192);
    CHECK(s.tokens.size() == 4609);
    CHECK(s.layout.total() == TranslatorConfig::paper().context);
  }
  SUBCASE("span ranges") {
    auto s = random_sequence(8, rng);
    for (std::size_t p = 0; p < s.tokens.size(); ++p) {
      auto [lo, hi] = allowed_range(s.layout, p, 8);
      CHECK(s.tokens[p] >= lo);
      CHECK(s.tokens[p] < hi);
    }
  }
  SUBCASE("modality mismatch") {
    auto a = random_grid(2, 2, 1, Modality::thrx, 8, rng);
    auto c = random_grid(2, 2, 2, Modality::ct, 8, rng);
    CHECK_THROWS_AS(build_sequence(a, c, c, 8), UsageError);
    CHECK_THROWS_AS(build_sequence(a, a, a, 8), UsageError);
  }
}

TEST_CASE("config validation") {
  auto c = small();
  c.embed = 9;
  CHECK_THROWS_AS(c.validate(), UsageError);
  CHECK_NOTHROW(TranslatorConfig::paper().validate());
  auto round = TranslatorConfig::from_config(small().to_config("m"), "m", TranslatorConfig{});
  CHECK(round.embed == 8);
  CHECK(round.codebook_size == 8);
}

TEST_CASE("fresh model logits are finite and initial loss is near uniform") {
  Translator tr(TranslatorConfig::desk(), 3);
  std::mt19937_64 rng(3);
  std::vector<TranslationSequence> batch;
  for (int i = 0; i < 4; ++i) batch.push_back(random_sequence(256, rng, 4, 4));
  Tensor logits = tr.forward(batch[0].tokens);
  for (Real v : logits.values()) CHECK(std::isfinite(v));
  const double l = tr.loss(batch).item();
  CHECK(std::abs(l - std::log(513.0)) < 0.1 * std::log(513.0));
}

TEST_CASE("too long sequences and bad tokens are rejected") {
  Translator tr(small(8, 10), 4);
  std::vector<TokenId> tokens(11, 0);
  CHECK_THROWS_AS(tr.forward(tokens), UsageError);
  tokens.resize(5);
  tokens[2] = 17;
  CHECK_THROWS_AS(tr.forward(tokens), IndexError);
  TranslationSequence s{{16, 3, 99}, {}, 8};
  CHECK_THROWS_AS(tr.loss(std::span(&s, 1)), IndexError);
}

TEST_CASE("causal mask: later tokens never change earlier logits") {
  Translator tr(small(8, 16), 5);
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<TokenId> a(16);
    for (auto& t : a) t = static_cast<TokenId>(rng() % 17);
    const std::size_t pos = rng() % 16;
    auto b = a;
    b[pos] = static_cast<TokenId>((b[pos] + 1 + rng() % 16) % 17);
    Tensor ta = tr.forward(a), tb = tr.forward(b);
    auto la = ta.values(), lb = tb.values();
    const std::size_t v = tr.config().vocab();
    CHECK(std::equal(la.begin(), la.begin() + pos * v, lb.begin()));
    CHECK(!std::equal(la.begin() + pos * v, la.end(), lb.begin() + pos * v));
  }
}

TEST_CASE("full model gradient matches finite differences") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Translator tr(small(4, 8), seed);
    std::mt19937_64 rng(seed);
    TranslationSequence s;
    s.codebook_size = 4;
    for (int i = 0; i < 8; ++i) s.tokens.push_back(static_cast<TokenId>(rng() % 9));
    auto params = tr.parameters();
    auto r = gradcheck([&] { return tr.loss(std::span(&s, 1)); }, params, 1e-6, 1e-6, 8);
    CHECK(r.max_rel_error < 1e-3);
  }
}

TEST_CASE("cached incremental logits equal the full forward pass") {
  Translator tr(small(8, 16), 6);
  std::mt19937_64 rng(6);
  std::vector<TokenId> tokens(16);
  for (auto& t : tokens) t = static_cast<TokenId>(rng() % 17);
  Tensor logits = tr.forward(tokens);
  auto full = logits.values();
  auto cached = tr.cached_logits(tokens);
  CHECK(std::equal(full.begin(), full.end(), cached.begin(), cached.end()));
}

TEST_CASE("generation respects span vocabularies") {
  Translator tr(small(8, 13), 7);
  SequenceLayout layout{2, 2, 8};
  const std::vector<TokenId> sos{16};
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    SamplingConfig s{SamplingStrategy::top_k, 1.0, 100, seed};
    auto mono = tr.generate(std::vector<TokenId>{16, 1, 2}, layout, 10, s);
    REQUIRE(mono.size() == 10);
    for (std::size_t i = 0; i < 2; ++i) CHECK((mono[i] >= 0 && mono[i] < 8));
    for (std::size_t i = 2; i < 10; ++i) CHECK((mono[i] >= 8 && mono[i] < 16));
    auto bi = tr.generate(std::vector<TokenId>{16, 1, 2, 3, 4}, layout, 8, s);
    for (TokenId t : bi) CHECK((t >= 8 && t < 16));
  }
  CHECK_THROWS_AS(tr.generate(std::vector<TokenId>{1}, layout, 2, {}), UsageError);
  CHECK_THROWS_AS(tr.generate(sos, layout, 13, {}), UsageError);
  CHECK_THROWS_AS(tr.generate(sos, SequenceLayout{1, 1, 1}, 4, {}), UsageError);
}

TEST_CASE("greedy generation is deterministic") {
  Translator tr(small(8, 13), 8);
  SequenceLayout layout{2, 2, 8};
  const std::vector<TokenId> prompt{16, 3, 1, 0, 7};
  auto first = tr.generate(prompt, layout, 8, {});
  for (int i = 0; i < 10; ++i) CHECK(tr.generate(prompt, layout, 8, {}) == first);
}

TEST_CASE("one-sample overfit reproduces the sequence greedily") {
  std::mt19937_64 rng(9);
  auto s = random_sequence(8, rng);
  Translator tr(small(8, s.tokens.size()), 9);
  auto params = tr.parameters();
  OptimizerHyper hyper;
  hyper.learning_rate = 1e-2;
  auto state = make_optimizer_state(params, hyper);
  double first = 0, last = 0;
  for (int step = 0; step < 500; ++step) {
    zero_grads(params);
    Tensor l = tr.loss(std::span(&s, 1), true);
    if (step == 0) first = l.item();
    last = l.item();
    l.backward();
    optimizer_step(params, state);
  }
  MESSAGE("loss " << first << " -> " << last);
  CHECK(last < 0.01);
  const std::size_t prompt = s.layout.ct_begin();
  auto gen = tr.generate(std::span(s.tokens).first(prompt), s.layout, s.layout.ct, {});
  CHECK(std::equal(gen.begin(), gen.end(), s.tokens.begin() + prompt));
}

TEST_CASE("identical seeds give identical loss trajectories") {
  std::mt19937_64 rng(10);
  auto s = random_sequence(8, rng);
  auto run = [&] {
    auto cfg = small(8, s.tokens.size());
    cfg.dropout = 0.1;
    Translator tr(cfg, 10);
    auto params = tr.parameters();
    auto state = make_optimizer_state(params, OptimizerHyper{});
    std::vector<double> trace;
    for (int step = 0; step < 20; ++step) {
      zero_grads(params);
      Tensor l = tr.loss(std::span(&s, 1), true);
      trace.push_back(l.item());
      l.backward();
      optimizer_step(params, state);
    }
    return trace;
  };
  CHECK(run() == run());
}

TEST_CASE("checkpoint round trip keeps logits") {
  Translator tr(small(8, 12), 11);
  auto ckpt = tr.to_checkpoint("gpt", 11);
  auto back = Translator::from_checkpoint(decode_checkpoint(encode_checkpoint(ckpt)));
  CHECK(encode_checkpoint(back.to_checkpoint("gpt", 11)) == encode_checkpoint(ckpt));
  std::vector<TokenId> tokens{16, 1, 2, 3};
  Tensor ta = tr.forward(tokens), tb = back.forward(tokens);
  auto a = ta.values(), b = tb.values();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) < 1e-5);
}

TEST_CASE("token text round trip") {
  std::vector<TokenId> t{512, 0, 7, 300};
  CHECK(format_tokens(t) == "512 0 7 300");
  CHECK(parse_tokens(format_tokens(t)) == t);
  CHECK(parse_tokens("  1\t2 ").size() == 2);
  try {
    parse_tokens("1 2 x3");
    FAIL("accepted garbage");
  } catch (const ParseError& e) {
    CHECK(e.offset() == 4);
  }
}
