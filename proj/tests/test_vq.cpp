#include <doctest.h>

#include <algorithm>
#include <random>

#include "gradcheck.hpp"
#include "rad2ct/error.hpp"
#include "rad2ct/ops.hpp"
#include "rad2ct/vq.hpp"

using namespace rad2ct;
using rad2ct::testing::random_tensor;

namespace {

// Exhaustive oracle: every distance in long double, first minimum wins.
TokenId brute_force(const Real* z, const Codebook& cb) {
  auto e = cb.entries().values();
  std::vector<long double> dist(cb.size());
  for (std::size_t k = 0; k < cb.size(); ++k) {
    long double s = 0;
    for (std::size_t i = 0; i < cb.dim(); ++i) {
      const long double d = static_cast<long double>(z[i]) - e[k * cb.dim() + i];
      s += d * d;
    }
    dist[k] = s;
  }
  return static_cast<TokenId>(std::min_element(dist.begin(), dist.end()) - dist.begin());
}

Codebook codebook_from(std::size_t n, std::size_t d, std::vector<Real> v) {
  return Codebook(Tensor::from({n, d}, std::move(v), true));
}

}  // namespace

TEST_CASE("exact match returns that entry") {
  std::mt19937_64 rng(1);
  Codebook cb(16, 4, rng);
  auto e = cb.entries().values();
  Tensor z = Tensor::from({1, 4}, std::vector<Real>(e.begin() + 20, e.begin() + 24));
  auto q = quantize(z, cb);
  CHECK(q.indices[0] == 5);
  for (std::size_t i = 0; i < 4; ++i) CHECK(q.quantized[i] == z[i]);
}

TEST_CASE("two-entry example") {
  Codebook cb = codebook_from(2, 2, {0, 0, 1, 1});
  CHECK(quantize(Tensor::from({1, 2}, {0.2, 0.1}), cb).indices[0] == 0);
}

TEST_CASE("ties go to the lowest index") {
  std::vector<Real> v(8 * 2, 5.0);
  v[3 * 2] = 0.25, v[3 * 2 + 1] = 0.5;
  v[7 * 2] = -0.25, v[7 * 2 + 1] = -0.5;
  Codebook cb = codebook_from(8, 2, v);
  CHECK(quantize(Tensor::from({1, 2}, {0.0, 0.0}), cb).indices[0] == 3);
}

TEST_CASE("quantizer matches brute force on random latents") {
  std::mt19937_64 rng(2);
  Codebook cb(256, 8, rng);
  Tensor z = random_tensor({1000, 8}, rng, false, -0.01, 0.01);
  auto q = quantize(z, cb);
  auto rows = z.values();
  for (std::size_t p = 0; p < 1000; ++p) CHECK(q.indices[p] == brute_force(&rows[p * 8], cb));
}

TEST_CASE("quantize is idempotent") {
  std::mt19937_64 rng(3);
  Codebook cb(64, 3, rng);
  Tensor z = random_tensor({50, 3}, rng, false, -0.05, 0.05);
  auto q1 = quantize(z, cb);
  auto q2 = quantize(q1.quantized.detach(), cb);
  CHECK(q1.indices == q2.indices);
}

TEST_CASE("quantize errors and usage counting") {
  Codebook empty;
  CHECK_THROWS_AS(quantize(Tensor::zeros({1, 2}), empty), UsageError);
  std::mt19937_64 rng(4);
  Codebook cb(4, 2, rng);
  CHECK_THROWS_AS(quantize(Tensor::zeros({1, 3}), cb), DimensionError);
  quantize(Tensor::zeros({5, 2}), cb, true);
  std::uint64_t total = 0;
  for (auto u : cb.usage()) total += u;
  CHECK(total == 5);
  CHECK(cb.usage_fraction() == 0.25);
  CHECK_THROWS_AS(Codebook(1, 4, rng), UsageError);
}

TEST_CASE("codebook initialization range") {
  std::mt19937_64 rng(5);
  Codebook cb(128, 16, rng);
  for (Real v : cb.entries().values()) CHECK(std::abs(v) <= 1.0 / 128);
}

TEST_CASE("vq loss terms") {
  std::mt19937_64 rng(6);
  SUBCASE("perfect fit gives zero") {
    Tensor x = random_tensor({2, 3}, rng);
    Tensor z = random_tensor({4, 2}, rng);
    auto t = vq_loss(x, x, z, z, 0.25);
    CHECK(t.total.item() == 0.0);
  }
  SUBCASE("total equals independently summed terms") {
    Tensor x = random_tensor({2, 5}, rng), xh = random_tensor({2, 5}, rng);
    Tensor z = random_tensor({3, 4}, rng), e = random_tensor({3, 4}, rng);
    const Real beta = 0.25;
    auto t = vq_loss(x, xh, z, e, beta);
    double rec = 0, code = 0;
    for (std::size_t i = 0; i < 10; ++i) rec += (x[i] - xh[i]) * (x[i] - xh[i]);
    for (std::size_t i = 0; i < 12; ++i) code += (z[i] - e[i]) * (z[i] - e[i]);
    rec /= 10;
    code /= 12;
    CHECK(std::abs(t.total.item() - (rec + code + beta * code)) < 1e-12);
    CHECK(std::abs(t.commitment.item() - beta * code) < 1e-12);
  }
  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(vq_loss(Tensor::zeros({2}), Tensor::zeros({3}), Tensor::zeros({1, 2}), Tensor::zeros({1, 2}), 1),
                    DimensionError);
  }
}

TEST_CASE("loss term gradient routing") {
  // latent -> quantize -> linear decoder -> reconstruction; each term alone.
  std::mt19937_64 rng(7);
  Codebook cb(8, 3, rng);
  Tensor w = random_tensor({3, 3}, rng);
  Tensor x = random_tensor({6, 3}, rng, false);
  Tensor z = random_tensor({6, 3}, rng, true, -0.2, 0.2);
  auto grads = [&](int term) {
    z.zero_grad();
    cb.entries().zero_grad();
    auto q = quantize(z, cb);
    Tensor xh = matmul(q.quantized, w);
    auto t = vq_loss(x, xh, z, q.selected, 0.25);
    Tensor pick = term == 1 ? t.reconstruction : term == 2 ? t.codebook : t.commitment;
    pick.backward();
    auto nz = [](const Tensor& t) {
      if (!t.has_grad()) return false;
      for (Real g : t.grad()) {
        if (g != 0) return true;
      }
      return false;
    };
    return std::pair{nz(cb.entries()), nz(z)};
  };
  CHECK(grads(1) == std::pair{false, true});
  CHECK(grads(2) == std::pair{true, false});
  CHECK(grads(3) == std::pair{false, true});
}

TEST_CASE("straight-through gradient equals the downstream gradient") {
  std::mt19937_64 rng(8);
  Codebook cb(8, 2, rng);
  Tensor w = random_tensor({2, 2}, rng, false);
  Tensor target = random_tensor({5, 2}, rng, false);
  Tensor z = random_tensor({5, 2}, rng, true, -0.2, 0.2);
  auto q = quantize(z, cb);
  mse_loss(matmul(q.quantized, w), target).backward();

  // downstream-only function of the quantized values, differentiated numerically
  Tensor e = q.selected.detach();
  auto ev = e.mutable_values();
  const double h = 1e-6;
  for (std::size_t i = 0; i < ev.size(); ++i) {
    const Real saved = ev[i];
    ev[i] = saved + h;
    const double up = mse_loss(matmul(e, w), target).item();
    ev[i] = saved - h;
    const double down = mse_loss(matmul(e, w), target).item();
    ev[i] = saved;
    CHECK(std::abs(z.grad()[i] - (up - down) / (2 * h)) < 1e-8);
  }
}

TEST_CASE("dead code reset") {
  std::mt19937_64 rng(9);
  Codebook cb(4, 2, rng);
  Tensor latents = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6});
  SUBCASE("all used") {
    cb.usage() = {3, 3, 3, 3};
    const auto before = std::vector<Real>(cb.entries().values().begin(), cb.entries().values().end());
    CHECK(reset_dead_codes(cb, latents, 2, rng) == 0);
    CHECK(std::equal(before.begin(), before.end(), cb.entries().values().begin()));
    CHECK(cb.usage() == std::vector<std::uint64_t>{0, 0, 0, 0});
  }
  SUBCASE("unused entry lands on a batch latent") {
    cb.usage() = {3, 0, 3, 3};
    CHECK(reset_dead_codes(cb, latents, 1, rng) == 1);
    auto e = cb.entries().values();
    bool hit = false;
    for (std::size_t r = 0; r < 3; ++r) hit |= e[2] == latents[2 * r] && e[3] == latents[2 * r + 1];
    CHECK(hit);
  }
  SUBCASE("min_usage zero") {
    cb.usage() = {0, 0, 0, 0};
    CHECK(reset_dead_codes(cb, latents, 0, rng) == 0);
  }
}
