#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "gradcheck.hpp"
#include "rad2ct/error.hpp"
#include "rad2ct/ops.hpp"
#include "rad2ct/optim.hpp"

using namespace rad2ct;
using rad2ct::testing::gradcheck;
using rad2ct::testing::random_tensor;

static_assert(sizeof(Real) == 8, "correctness tests run at 64-bit precision");

TEST_CASE("matmul examples") {
  auto eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  auto m = Tensor::from({2, 2}, {1, 2, 3, 4});
  auto r = matmul(eye, m);
  CHECK(std::vector<Real>(r.values().begin(), r.values().end()) == std::vector<Real>{1, 2, 3, 4});

  auto proj = matmul(Tensor::from({2, 2}, {1, 0, 0, 0}), Tensor::from({2, 1}, {5, 7}));
  CHECK(proj[0] == 5);
  CHECK(proj[1] == 0);

  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), DimensionError);
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
  } catch (const DimensionError& e) {
    CHECK(std::string(e.what()).find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("matmul gradient of sum is ones * b^T") {
  std::mt19937_64 rng(1);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({4, 2}, rng);
  sum(matmul(a, b)).backward();
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 4; ++k) CHECK(a.grad()[i * 4 + k] == doctest::Approx(b[k * 2] + b[k * 2 + 1]));
  auto res = gradcheck([&] { return sum(matmul(a, b)); }, {a, b});
  CHECK(res.max_rel_error < 1e-5);
}

TEST_CASE("conv examples") {
  auto x = Tensor::from({1, 1, 2, 3}, {1, 2, 3, 4, 5, 6});
  auto id = conv(x, Tensor::from({1, 1, 1, 1}, {1}), Tensor{}, 1, 0, 2);
  CHECK(id.shape() == Shape{1, 1, 2, 3});
  for (std::size_t i = 0; i < 6; ++i) CHECK(id[i] == x[i]);

  auto x3 = Tensor::from({1, 1, 2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  auto id3 = conv(x3, Tensor::from({1, 1, 1, 1, 1}, {1}), Tensor{}, 1, 0, 3);
  for (std::size_t i = 0; i < 8; ++i) CHECK(id3[i] == x3[i]);

  auto ones = conv(Tensor::full({1, 1, 5, 5}, 1), Tensor::full({1, 1, 3, 3}, 1), Tensor{}, 1, 0, 2);
  CHECK(ones.shape() == Shape{1, 1, 3, 3});
  for (Real v : ones.values()) CHECK(v == 9);

  // floor((in + 2·pad − k)/stride) + 1
  auto strided = conv(Tensor::zeros({2, 3, 7, 6}), Tensor::zeros({4, 3, 3, 3}), Tensor::zeros({4}), 2, 1, 2);
  CHECK(strided.shape() == Shape{2, 4, 4, 3});

  CHECK_THROWS_AS(conv(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 3, 3, 3}), Tensor{}, 1, 0, 2), DimensionError);
  CHECK_THROWS_AS(conv(Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 3, 3}), Tensor{}, 1, 0, 2), DimensionError);
  CHECK_NOTHROW(conv(Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 3, 3}), Tensor{}, 1, 1, 2));
}

TEST_CASE("conv direct summation oracle") {
  std::mt19937_64 rng(7);
  auto x = random_tensor({2, 3, 5, 6}, rng, false);
  auto w = random_tensor({2, 3, 3, 2}, rng, false);
  auto y = conv(x, w, Tensor{}, 2, 1, 2);
  const std::size_t oh = (5 + 2 - 3) / 2 + 1, ow = (6 + 2 - 2) / 2 + 1;
  REQUIRE(y.shape() == Shape{2, 2, oh, ow});
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t co = 0; co < 2; ++co)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          double s = 0;
          for (std::size_t ci = 0; ci < 3; ++ci)
            for (std::size_t ky = 0; ky < 3; ++ky)
              for (std::size_t kx = 0; kx < 2; ++kx) {
                long iy = static_cast<long>(i * 2 + ky) - 1, ix = static_cast<long>(j * 2 + kx) - 1;
                if (iy < 0 || ix < 0 || iy >= 5 || ix >= 6) continue;
                s += x[((b * 3 + ci) * 5 + iy) * 6 + ix] * w[((co * 3 + ci) * 3 + ky) * 2 + kx];
              }
          CHECK(y[((b * 2 + co) * oh + i) * ow + j] == doctest::Approx(s).epsilon(1e-12));
        }
}

TEST_CASE("conv and conv_transpose gradients match finite differences") {
  std::mt19937_64 rng(3);
  SUBCASE("3D conv 1x4x4x4 input, 2x2x2 kernel") {
    auto x = random_tensor({1, 1, 4, 4, 4}, rng);
    auto w = random_tensor({1, 1, 2, 2, 2}, rng);
    auto r = random_tensor({1, 1, 3, 3, 3}, rng, false);
    auto res = gradcheck([&] { return sum(mul(conv(x, w, Tensor{}, 1, 0, 3), r)); }, {x, w});
    CHECK(res.max_rel_error < 1e-4);
  }
  SUBCASE("strided padded 3D conv with bias") {
    auto x = random_tensor({2, 2, 4, 4, 4}, rng);
    auto w = random_tensor({3, 2, 4, 4, 4}, rng);
    auto b = random_tensor({3}, rng);
    auto r = random_tensor({2, 3, 2, 2, 2}, rng, false);
    auto res = gradcheck([&] { return sum(mul(conv(x, w, b, 2, 1, 3), r)); }, {x, w, b});
    CHECK(res.max_rel_error < 1e-4);
  }
  SUBCASE("2D transposed conv") {
    auto x = random_tensor({2, 3, 3, 2}, rng);
    auto w = random_tensor({3, 2, 4, 4}, rng);
    auto b = random_tensor({2}, rng);
    auto y = conv_transpose(x, w, b, 2, 1, 2);
    REQUIRE(y.shape() == Shape{2, 2, 6, 4});
    auto r = random_tensor(y.shape(), rng, false);
    auto res = gradcheck([&] { return sum(mul(conv_transpose(x, w, b, 2, 1, 2), r)); }, {x, w, b});
    CHECK(res.max_rel_error < 1e-4);
  }
  SUBCASE("3D transposed conv doubles extents") {
    auto x = random_tensor({1, 2, 2, 2, 2}, rng);
    auto w = random_tensor({2, 1, 4, 4, 4}, rng);
    auto y = conv_transpose(x, w, Tensor{}, 2, 1, 3);
    REQUIRE(y.shape() == Shape{1, 1, 4, 4, 4});
    auto r = random_tensor(y.shape(), rng, false);
    auto res = gradcheck([&] { return sum(mul(conv_transpose(x, w, Tensor{}, 2, 1, 3), r)); }, {x, w});
    CHECK(res.max_rel_error < 1e-4);
  }
}

TEST_CASE("conv_transpose is the adjoint of conv") {
  // <conv(x), y> == <x, conv_transpose(y)> for the same kernel
  std::mt19937_64 rng(11);
  auto x = random_tensor({1, 2, 6, 6}, rng, false);
  auto w = random_tensor({3, 2, 4, 4}, rng, false);
  auto cx = conv(x, w, Tensor{}, 2, 1, 2);
  auto y = random_tensor(cx.shape(), rng, false);
  auto ty = conv_transpose(y, w, Tensor{}, 2, 1, 2);
  REQUIRE(ty.shape() == x.shape());
  double lhs = 0, rhs = 0;
  for (std::size_t i = 0; i < cx.size(); ++i) lhs += cx[i] * y[i];
  for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * ty[i];
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("softmax") {
  auto s = softmax(Tensor::from({2}, {0, 0}), 0);
  CHECK(s[0] == 0.5);
  CHECK(s[1] == 0.5);

  auto big = softmax(Tensor::from({2}, {1000, 0}), 0);
  CHECK(std::isfinite(big[0]));
  CHECK(big[0] == doctest::Approx(1.0));
  CHECK(big[1] < 1e-300);

  std::mt19937_64 rng(5);
  auto x = random_tensor({8}, rng, false, -3, 3);
  auto y = softmax(x, 0);
  double total = 0;
  std::size_t arg_x = 0, arg_y = 0;
  for (std::size_t i = 0; i < 8; ++i) {
    total += y[i];
    CHECK(y[i] > 0);
    CHECK(y[i] < 1);
    if (x[i] > x[arg_x]) arg_x = i;
    if (y[i] > y[arg_y]) arg_y = i;
  }
  CHECK(std::abs(total - 1.0) < 1e-12);
  CHECK(arg_x == arg_y);

  CHECK_THROWS_AS(softmax(x, 1), DimensionError);
}

TEST_CASE("softmax over a middle axis sums to one and passes gradcheck") {
  std::mt19937_64 rng(6);
  auto x = random_tensor({2, 5, 3}, rng);
  auto y = softmax(x, 1);
  for (std::size_t o = 0; o < 2; ++o)
    for (std::size_t j = 0; j < 3; ++j) {
      double total = 0;
      for (std::size_t i = 0; i < 5; ++i) total += y[(o * 5 + i) * 3 + j];
      CHECK(std::abs(total - 1.0) < 1e-12);
    }
  auto r = random_tensor({2, 5, 3}, rng, false);
  CHECK(gradcheck([&] { return sum(mul(softmax(x, 1), r)); }, {x}).max_rel_error < 1e-4);
}

TEST_CASE("cross_entropy") {
  std::vector<TokenId> target{2};
  auto confident = cross_entropy(Tensor::from({1, 4}, {0, 0, 20, 0}), target);
  CHECK(confident.item() < 1e-8);

  auto uniform = cross_entropy(Tensor::zeros({3, 8}), std::vector<TokenId>{0, 5, 7});
  CHECK(std::abs(uniform.item() - std::log(8.0)) < 1e-12);

  std::mt19937_64 rng(9);
  auto logits = random_tensor({5, 10}, rng, true, -2, 2);
  std::vector<TokenId> t{1, 0, 9, 4, 4};
  CHECK(gradcheck([&] { return cross_entropy(logits, t); }, {logits}).max_rel_error < 1e-5);

  // (softmax - onehot) / T
  logits.zero_grad();
  cross_entropy(logits, t).backward();
  auto p = softmax(logits.detach(), 1);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 10; ++c) {
      double expect = (p[r * 10 + c] - (static_cast<TokenId>(c) == t[r] ? 1.0 : 0.0)) / 5.0;
      CHECK(logits.grad()[r * 10 + c] == doctest::Approx(expect).epsilon(1e-12));
    }

  CHECK_THROWS_AS(cross_entropy(logits, std::vector<TokenId>{1, 0, 10, 4, 4}), IndexError);
  CHECK_THROWS_AS(cross_entropy(logits, std::vector<TokenId>{1, 0, -1, 4, 4}), IndexError);
}

TEST_CASE("layer_norm") {
  auto g = Tensor::full({4}, 1);
  auto b = Tensor::zeros({4});
  auto c = layer_norm(Tensor::full({1, 4}, 3.5), g, b);
  for (Real v : c.values()) CHECK(v == 0);

  // [1, -1] -> mean 0, var 1 -> x / sqrt(1 + eps)
  auto two = layer_norm(Tensor::from({1, 2}, {1, -1}), Tensor::full({2}, 1), Tensor::zeros({2}));
  CHECK(two[0] == doctest::Approx(1.0 / std::sqrt(1.0 + 1e-5)).epsilon(1e-14));
  CHECK(two[1] == doctest::Approx(-1.0 / std::sqrt(1.0 + 1e-5)).epsilon(1e-14));

  std::mt19937_64 rng(2);
  auto x = random_tensor({3, 16}, rng, true, -5, 5);
  auto y = layer_norm(x, Tensor::full({16}, 1), Tensor::zeros({16}));
  for (std::size_t r = 0; r < 3; ++r) {
    double m = 0, v = 0;
    for (std::size_t i = 0; i < 16; ++i) m += y[r * 16 + i];
    m /= 16;
    for (std::size_t i = 0; i < 16; ++i) v += (y[r * 16 + i] - m) * (y[r * 16 + i] - m);
    v /= 16;
    CHECK(std::abs(m) < 1e-10);
    CHECK(std::abs(v - 1.0) < 1e-3);
  }

  auto gain = random_tensor({16}, rng);
  auto bias = random_tensor({16}, rng);
  auto r = random_tensor({3, 16}, rng, false);
  CHECK(gradcheck([&] { return sum(mul(layer_norm(x, gain, bias), r)); }, {x, gain, bias}).max_rel_error < 1e-4);

  CHECK_THROWS_AS(layer_norm(x, Tensor::full({15}, 1), Tensor::zeros({16})), DimensionError);
}

TEST_CASE("group_norm gradient") {
  std::mt19937_64 rng(4);
  auto x = random_tensor({2, 4, 3, 3}, rng, true, -2, 2);
  auto gain = random_tensor({4}, rng);
  auto bias = random_tensor({4}, rng);
  auto r = random_tensor({2, 4, 3, 3}, rng, false);
  CHECK(gradcheck([&] { return sum(mul(group_norm(x, 2, gain, bias), r)); }, {x, gain, bias}).max_rel_error < 1e-4);
  CHECK_THROWS_AS(group_norm(x, 3, gain, bias), DimensionError);
}

TEST_CASE("elementwise ops, reshapes and losses pass gradcheck") {
  std::mt19937_64 rng(8);
  auto x = random_tensor({2, 3, 4}, rng);
  auto y = random_tensor({2, 3, 4}, rng);
  auto bias = random_tensor({4}, rng);
  auto r = random_tensor({2, 3, 4}, rng, false);
  CHECK(gradcheck([&] { return sum(mul(silu(x), r)); }, {x}).max_rel_error < 1e-4);
  CHECK(gradcheck([&] { return sum(mul(tanh(x), r)); }, {x}).max_rel_error < 1e-4);
  CHECK(gradcheck([&] { return sum(mul(square(sub(x, y)), r)); }, {x, y}).max_rel_error < 1e-4);
  CHECK(gradcheck([&] { return mean(mul(add(x, scale(y, 0.3)), r)); }, {x, y}).max_rel_error < 1e-4);
  CHECK(gradcheck([&] { return sum(mul(add_bias(x, bias), r)); }, {x, bias}).max_rel_error < 1e-4);
  CHECK(gradcheck([&] { return sum(mul(abs(x), r)); }, {x}).max_rel_error < 1e-4);
  CHECK(gradcheck([&] { return mse_loss(x, y); }, {x, y}).max_rel_error < 1e-4);
  CHECK(gradcheck([&] { return slice_l1_loss(x, y, 3); }, {x, y}).max_rel_error < 1e-4);
  CHECK(gradcheck([&] { return sum(row_mean(reshape(mul(x, r), {6, 4}))); }, {x}).max_rel_error < 1e-4);

  auto img = random_tensor({2, 3, 2, 2}, rng);
  auto rows_r = random_tensor({8, 3}, rng, false);
  CHECK(gradcheck([&] { return sum(mul(channels_last(img), rows_r)); }, {img}).max_rel_error < 1e-4);
  auto back = channels_first(channels_last(img), img.shape());
  for (std::size_t i = 0; i < img.size(); ++i) CHECK(back[i] == img[i]);
}

TEST_CASE("embedding and causal attention gradients") {
  std::mt19937_64 rng(10);
  auto table = random_tensor({6, 4}, rng);
  std::vector<TokenId> idx{0, 3, 3, 5};
  auto r = random_tensor({4, 4}, rng, false);
  CHECK(gradcheck([&] { return sum(mul(embedding(table, idx), r)); }, {table}).max_rel_error < 1e-4);
  CHECK_THROWS_AS(embedding(table, std::vector<TokenId>{6}), IndexError);

  auto qkv = random_tensor({2 * 5, 3 * 4}, rng);
  auto ro = random_tensor({2 * 5, 4}, rng, false);
  CHECK(gradcheck([&] { return sum(mul(causal_attention(qkv, 2, 5, 2), ro)); }, {qkv}).max_rel_error < 1e-4);
}

TEST_CASE("straight-through passes the gradient unchanged to the latent") {
  auto z = Tensor::from({2}, {0.2, 0.4}, true);
  auto q = Tensor::from({2}, {0.0, 1.0}, true);
  auto st = straight_through(z, q);
  CHECK(st[0] == 0.0);
  CHECK(st[1] == 1.0);
  sum(mul(st, Tensor::from({2}, {3.0, -2.0}))).backward();
  CHECK(z.grad()[0] == 3.0);
  CHECK(z.grad()[1] == -2.0);
  CHECK(q.grad()[0] == 0.0);
  CHECK(q.grad()[1] == 0.0);
}

TEST_CASE("backward") {
  auto x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  sum(x).backward();
  for (Real g : x.grad()) CHECK(g == 1);

  auto a = Tensor::from({3}, {1, 2, 3}, true);
  auto b = Tensor::from({3}, {4, 5, 6}, true);
  auto loss = sum(mul(a, b));
  loss.backward();
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(a.grad()[i] == b[i]);
    CHECK(b.grad()[i] == a[i]);
  }
  // repeated backward accumulates into leaves
  loss.backward();
  for (std::size_t i = 0; i < 3; ++i) CHECK(a.grad()[i] == 2 * b[i]);

  CHECK_THROWS_AS(mul(a, b).backward(), UsageError);

  auto inf = Tensor::from({1}, {0.0}, true);
  CHECK_THROWS_AS(sum(mul(inf, Tensor::from({1}, {INFINITY}))).backward(), NumericalError);
}

TEST_CASE("no-grad mode builds no tape") {
  auto x = Tensor::from({2}, {1, 2}, true);
  NoGradGuard guard;
  auto y = mul(x, x);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("optimizer_step") {
  SUBCASE("first adam step moves by lr") {
    std::vector<Tensor> p{Tensor::from({1}, {1.0}, true)};
    p[0].mutable_grad()[0] = 1.0;
    auto st = make_optimizer_state(p, {.kind = OptimizerKind::adam, .learning_rate = 0.1});
    optimizer_step(p, st);
    CHECK(p[0][0] == doctest::Approx(0.9).epsilon(1e-9));
    CHECK(st.step == 1);
  }
  SUBCASE("zero gradient leaves adam parameters unchanged") {
    std::vector<Tensor> p{Tensor::from({3}, {1.0, -2.0, 0.5}, true)};
    auto st = make_optimizer_state(p, {.kind = OptimizerKind::adam, .learning_rate = 0.1});
    for (int i = 0; i < 3; ++i) optimizer_step(p, st);
    CHECK(p[0][0] == 1.0);
    CHECK(p[0][1] == -2.0);
    CHECK(p[0][2] == 0.5);
    CHECK(st.step == 3);
  }
  SUBCASE("adamw with zero decay equals adam bit for bit") {
    std::mt19937_64 rng(21);
    auto init = random_tensor({10}, rng, false);
    std::vector<Tensor> pa{Tensor::from({10}, {init.values().begin(), init.values().end()}, true)};
    std::vector<Tensor> pw{Tensor::from({10}, {init.values().begin(), init.values().end()}, true)};
    auto sa = make_optimizer_state(pa, {.kind = OptimizerKind::adam, .learning_rate = 0.01});
    auto sw = make_optimizer_state(pw, {.kind = OptimizerKind::adamw, .learning_rate = 0.01, .weight_decay = 0.0});
    for (int step = 0; step < 20; ++step) {
      for (auto* ps : {&pa, &pw}) {
        (*ps)[0].zero_grad();
        sum(square((*ps)[0])).backward();
      }
      optimizer_step(pa, sa);
      optimizer_step(pw, sw);
      for (std::size_t i = 0; i < 10; ++i) REQUIRE(pa[0][i] == pw[0][i]);
    }
  }
  SUBCASE("adamw shrinks before the moment update") {
    std::vector<Tensor> p{Tensor::from({1}, {2.0}, true)};
    auto st = make_optimizer_state(p, {.kind = OptimizerKind::adamw, .learning_rate = 0.1, .weight_decay = 0.01});
    optimizer_step(p, st);  // zero gradient: only the decay acts
    CHECK(p[0][0] == doctest::Approx(2.0 - 0.1 * 0.01 * 2.0).epsilon(1e-15));
  }
  SUBCASE("NaN gradient fails fast") {
    std::vector<Tensor> p{Tensor::from({2}, {1.0, 1.0}, true)};
    p[0].mutable_grad()[1] = NAN;
    auto st = make_optimizer_state(p, {});
    CHECK_THROWS_AS(optimizer_step(p, st), NumericalError);
    CHECK(st.step == 0);
    CHECK(p[0][0] == 1.0);
  }
}

TEST_CASE("cosine_warmup_lr") {
  CHECK(cosine_warmup_lr(0, 10, 100, 0.5) == 0.0);
  CHECK(cosine_warmup_lr(10, 10, 100, 0.5) == 0.5);
  CHECK(cosine_warmup_lr(5, 10, 100, 0.5) == doctest::Approx(0.25));
  CHECK(std::abs(cosine_warmup_lr(100, 10, 100, 0.5)) < 1e-12);
  CHECK(cosine_warmup_lr(55, 10, 100, 0.5) == doctest::Approx(0.25));
  double prev = 1.0;
  for (std::uint64_t s = 10; s <= 100; ++s) {
    double lr = cosine_warmup_lr(s, 10, 100, 0.5);
    CHECK(lr >= 0.0);
    CHECK(lr <= prev);
    prev = lr;
  }
  CHECK_THROWS_AS(cosine_warmup_lr(101, 10, 100, 0.5), UsageError);
  CHECK_THROWS_AS(cosine_warmup_lr(0, 100, 100, 0.5), UsageError);
}
