#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "dualdec/common.hpp"
#include "dualdec/tensor.hpp"

using namespace dualdec;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, bool requires_grad = true) {
  Tensor t = Tensor::zeros(std::move(shape), requires_grad);
  for (auto& x : t.data()) x = rng.uniform(-1.0, 1.0);
  return t;
}

// Central finite differences of a scalar-valued function of one tensor entry.
template <class F>
real fd_grad(Tensor& t, size_t idx, F&& forward, real h = 1e-5) {
  NoGradGuard ng;
  const real orig = t.data()[idx];
  t.data()[idx] = orig + h;
  const real hi = forward();
  t.data()[idx] = orig - h;
  const real lo = forward();
  t.data()[idx] = orig;
  return (hi - lo) / (2 * h);
}

template <class F>
void check_grads_fd(std::vector<Tensor> inputs, F&& forward, real tol = 1e-4) {
  Tensor loss = forward();
  backward(loss);
  for (auto& t : inputs) {
    REQUIRE(t.has_grad());
    for (size_t i = 0; i < t.numel(); ++i) {
      const real fd = fd_grad(t, i, [&] { return forward().value(); });
      const real an = t.grad()[i];
      const real denom = std::max<real>({std::fabs(fd), std::fabs(an), 1e-8});
      REQUIRE(std::fabs(fd - an) / denom < tol);
    }
  }
}

}  // namespace

TEST_CASE("attention with identical keys gives uniform weights") {
  Tensor q = Tensor::from_values({3, 2}, {0.3, -1.2, 5.0, 0.0, -0.7, 0.7});
  Tensor k = Tensor::from_values({2, 2}, {0.5, 0.5, 0.5, 0.5});
  Tensor v = Tensor::from_values({2, 2}, {1, 0, 0, 1});
  Tensor out = scaled_dot_attention(q, k, v);
  for (size_t i = 0; i < out.numel(); ++i) REQUIRE(out.data()[i] == Catch::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("attention mask admitting one key copies that value row") {
  Tensor q = Tensor::from_values({1, 2}, {0.9, -0.4});
  Tensor k = Tensor::from_values({3, 2}, {1, 0, 0, 1, 1, 1});
  Tensor v = Tensor::from_values({3, 1}, {10, 20, 30});
  std::vector<uint8_t> mask = {0, 1, 0};
  Tensor out = scaled_dot_attention(q, k, v, &mask);
  REQUIRE(out.data()[0] == 20.0);
}

TEST_CASE("attention matches hand-computed softmax") {
  // weights = softmax(1/sqrt(2), 0); out = w0*1 + w1*2
  Tensor q = Tensor::from_values({1, 2}, {1, 0});
  Tensor k = Tensor::from_values({2, 2}, {1, 0, 0, 1});
  Tensor v = Tensor::from_values({2, 1}, {1, 2});
  Tensor out = scaled_dot_attention(q, k, v);
  const real e = std::exp(1.0 / std::sqrt(2.0));
  const real w0 = e / (e + 1.0);
  const real expected = w0 * 1.0 + (1.0 - w0) * 2.0;
  REQUIRE(out.data()[0] == Catch::Approx(expected).epsilon(1e-12));
  REQUIRE(out.data()[0] == Catch::Approx(1.3302384507).margin(1e-9));
}

TEST_CASE("attention rows sum to one and masked keys get zero weight") {
  Rng rng(7);
  Tensor q = random_tensor({4, 3}, rng, false);
  Tensor k = random_tensor({5, 3}, rng, false);
  std::vector<uint8_t> mask(20, 1);
  mask[2] = 0;
  mask[7] = 0;
  Tensor w = softmax_rows(scale(matmul_nt(q, k), 1.0 / std::sqrt(3.0)), &mask);
  for (int i = 0; i < 4; ++i) {
    real s = 0.0;
    for (int j = 0; j < 5; ++j) s += w.at(i, j);
    REQUIRE(s == Catch::Approx(1.0).epsilon(1e-12));
  }
  REQUIRE(w.data()[2] == 0.0);
  REQUIRE(w.data()[7] == 0.0);
}

TEST_CASE("attention is permutation-equivariant in key/value rows") {
  Rng rng(13);
  Tensor q = random_tensor({3, 4}, rng, false);
  Tensor k = random_tensor({5, 4}, rng, false);
  Tensor v = random_tensor({5, 2}, rng, false);
  Tensor base = scaled_dot_attention(q, k, v);

  std::vector<int> perm = {3, 0, 4, 1, 2};
  Tensor kp = Tensor::zeros({5, 4});
  Tensor vp = Tensor::zeros({5, 2});
  for (int i = 0; i < 5; ++i) {
    for (int j = 0; j < 4; ++j) kp.data()[i * 4 + j] = k.at(perm[i], j);
    for (int j = 0; j < 2; ++j) vp.data()[i * 2 + j] = v.at(perm[i], j);
  }
  Tensor permuted = scaled_dot_attention(q, kp, vp);
  for (size_t i = 0; i < base.numel(); ++i)
    REQUIRE(base.data()[i] == Catch::Approx(permuted.data()[i]).margin(1e-12));
}

TEST_CASE("attention error cases") {
  Tensor q = Tensor::from_values({1, 2}, {1, 0});
  Tensor k3 = Tensor::from_values({2, 3}, {1, 0, 0, 0, 1, 0});
  Tensor v = Tensor::from_values({2, 1}, {1, 2});
  REQUIRE_THROWS_AS(scaled_dot_attention(q, k3, v), DimensionError);

  Tensor k = Tensor::from_values({2, 2}, {1, 0, 0, 1});
  std::vector<uint8_t> all_masked = {0, 0};
  REQUIRE_THROWS_AS(scaled_dot_attention(q, k, v, &all_masked), DegenerateMaskError);
}

TEST_CASE("layer_norm worked examples") {
  Tensor gain1 = Tensor::from_values({3}, {1, 1, 1});
  Tensor bias1 = Tensor::from_values({3}, {0, 0, 0});
  Tensor c = Tensor::from_values({1, 3}, {4.2, 4.2, 4.2});
  Tensor out = layer_norm(c, gain1, bias1, 1e-5);
  for (size_t i = 0; i < 3; ++i) REQUIRE(out.data()[i] == Catch::Approx(0.0).margin(1e-9));

  Tensor gain2 = Tensor::from_values({2}, {1, 1});
  Tensor bias2 = Tensor::from_values({2}, {0, 0});
  Tensor pm = Tensor::from_values({1, 2}, {1, -1});
  Tensor out2 = layer_norm(pm, gain2, bias2, 1e-12);
  REQUIRE(out2.data()[0] == Catch::Approx(1.0).epsilon(1e-6));
  REQUIRE(out2.data()[1] == Catch::Approx(-1.0).epsilon(1e-6));

  Tensor gain3 = Tensor::from_values({2}, {2, 2});
  Tensor bias3 = Tensor::from_values({2}, {1, 1});
  Tensor x3 = Tensor::from_values({1, 2}, {0, 2});
  Tensor out3 = layer_norm(x3, gain3, bias3, 0.0);
  REQUIRE(out3.data()[0] == Catch::Approx(-1.0).epsilon(1e-12));
  REQUIRE(out3.data()[1] == Catch::Approx(3.0).epsilon(1e-12));
}

TEST_CASE("layer_norm normalizes rows to zero mean unit variance") {
  Rng rng(3);
  Tensor x = random_tensor({4, 6}, rng, false);
  Tensor gain = Tensor::from_values({6}, std::vector<real>(6, 1.0));
  Tensor bias = Tensor::from_values({6}, std::vector<real>(6, 0.0));
  Tensor out = layer_norm(x, gain, bias, 1e-12);
  for (int i = 0; i < 4; ++i) {
    real mean = 0, var = 0;
    for (int j = 0; j < 6; ++j) mean += out.at(i, j);
    mean /= 6;
    for (int j = 0; j < 6; ++j) var += (out.at(i, j) - mean) * (out.at(i, j) - mean);
    var /= 6;
    REQUIRE(mean == Catch::Approx(0.0).margin(1e-9));
    REQUIRE(var == Catch::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("backward of sum is all ones") {
  Rng rng(1);
  Tensor x = random_tensor({2, 3}, rng);
  Tensor loss = sum(x);
  backward(loss);
  for (size_t i = 0; i < x.numel(); ++i) REQUIRE(x.grad()[i] == 1.0);
}

TEST_CASE("backward of scalar product is the product rule") {
  Tensor x = Tensor::scalar(3.0, true);
  Tensor y = Tensor::scalar(-2.0, true);
  Tensor loss = mul(x, y);
  backward(loss);
  REQUIRE(x.grad()[0] == -2.0);
  REQUIRE(y.grad()[0] == 3.0);
}

TEST_CASE("second backward on the same loss throws") {
  Tensor x = Tensor::scalar(1.0, true);
  Tensor loss = mul(x, x);
  backward(loss);
  REQUIRE_THROWS_AS(backward(loss), InternalError);
}

TEST_CASE("finite differences confirm gradients of composite ops") {
  Rng rng(42);

  SECTION("matmul chain with relu and sum") {
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4, 2}, rng);
    check_grads_fd({a, b}, [&] { return sum(relu(matmul(a, b))); });
  }

  SECTION("matmul_nt") {
    Tensor a = random_tensor({2, 5}, rng);
    Tensor b = random_tensor({3, 5}, rng);
    check_grads_fd({a, b}, [&] { return sum(matmul_nt(a, b)); });
  }

  SECTION("softmax rows weighted") {
    Tensor a = random_tensor({3, 4}, rng);
    std::vector<real> w;
    for (int i = 0; i < 12; ++i) w.push_back(rng.uniform(-1, 1));
    check_grads_fd({a}, [&] { return weighted_sum(softmax_rows(a), w); });
  }

  SECTION("masked softmax") {
    Tensor a = random_tensor({2, 4}, rng);
    std::vector<uint8_t> mask = {1, 1, 0, 1, 0, 1, 1, 1};
    std::vector<real> w;
    for (int i = 0; i < 8; ++i) w.push_back(rng.uniform(-1, 1));
    check_grads_fd({a}, [&] { return weighted_sum(softmax_rows(a, &mask), w); });
  }

  SECTION("log softmax") {
    Tensor a = random_tensor({3, 5}, rng);
    std::vector<real> w;
    for (int i = 0; i < 15; ++i) w.push_back(rng.uniform(-1, 1));
    check_grads_fd({a}, [&] { return weighted_sum(log_softmax_rows(a), w); });
  }

  SECTION("layer norm") {
    Tensor x = random_tensor({2, 4}, rng);
    Tensor gain = random_tensor({4}, rng);
    Tensor bias = random_tensor({4}, rng);
    std::vector<real> w;
    for (int i = 0; i < 8; ++i) w.push_back(rng.uniform(-1, 1));
    check_grads_fd({x, gain, bias},
                   [&] { return weighted_sum(layer_norm(x, gain, bias, 1e-3), w); });
  }

  SECTION("full attention") {
    Tensor q = random_tensor({3, 4}, rng);
    Tensor k = random_tensor({5, 4}, rng);
    Tensor v = random_tensor({5, 2}, rng);
    std::vector<real> w;
    for (int i = 0; i < 6; ++i) w.push_back(rng.uniform(-1, 1));
    check_grads_fd({q, k, v}, [&] { return weighted_sum(scaled_dot_attention(q, k, v), w); });
  }

  SECTION("embedding and slicing") {
    Tensor table = random_tensor({6, 4}, rng);
    Ids ids = {1, 4, 1, 0};
    std::vector<real> w;
    for (int i = 0; i < 8; ++i) w.push_back(rng.uniform(-1, 1));
    check_grads_fd({table}, [&] {
      Tensor e = embedding(table, ids);
      return weighted_sum(slice_cols(e, 1, 2), w);
    });
  }

  SECTION("concat, add_row, sub, scale") {
    Tensor a = random_tensor({2, 2}, rng);
    Tensor b = random_tensor({2, 3}, rng);
    Tensor row = random_tensor({5}, rng);
    Tensor c = random_tensor({2, 5}, rng);
    std::vector<real> w;
    for (int i = 0; i < 10; ++i) w.push_back(rng.uniform(-1, 1));
    check_grads_fd({a, b, row, c}, [&] {
      Tensor cat = concat_cols({a, b});
      return weighted_sum(sub(scale(add_row(cat, row), 1.7), c), w);
    });
  }
}

TEST_CASE("tensor invariants") {
  REQUIRE_THROWS_AS(Tensor::zeros({0, 3}), DimensionError);
  REQUIRE_THROWS_AS(Tensor::from_values({2, 2}, {1, 2, 3}), DimensionError);

  Tensor x = Tensor::from_values({2}, {1.0, std::numeric_limits<real>::quiet_NaN()}, true);
  Tensor loss = sum(x);
  REQUIRE_THROWS_AS(backward(loss), NumericError);
}
