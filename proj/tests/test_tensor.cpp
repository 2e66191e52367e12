#include <cmath>
#include <vector>

#include "doctest.h"
#include "fewshot/tensor.hpp"
#include "test_util.hpp"

using namespace fewshot;
using testutil::finite_difference_check;
using testutil::random_tensor;
using testutil::uniform_values;
using testutil::weighted_sum;

namespace {

Tensor<double> T2(std::size_t r, std::size_t c, std::vector<double> v, bool grad = false) {
  auto t = Tensor<double>::from({r, c}, std::move(v));
  t.set_requires_grad(grad);
  return t;
}

// out[n][f][y][x] = sum_c,i,j in[n][c][y*s-p+i][x*s-p+j] * k[f][c][i][j], zero outside.
std::vector<double> naive_conv(const std::vector<double>& in, const std::vector<double>& k, std::size_t n,
                               std::size_t c, std::size_t h, std::size_t w, std::size_t f, std::size_t kh,
                               std::size_t kw, std::size_t s, std::size_t p, std::size_t& oh, std::size_t& ow) {
  oh = (h + 2 * p - kh) / s + 1;
  ow = (w + 2 * p - kw) / s + 1;
  std::vector<double> out(n * f * oh * ow, 0.0);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < f; ++o)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
          double acc = 0;
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < kh; ++i)
              for (std::size_t j = 0; j < kw; ++j) {
                const long iy = static_cast<long>(y * s + i) - static_cast<long>(p);
                const long ix = static_cast<long>(x * s + j) - static_cast<long>(p);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
                acc += in[((b * c + ch) * h + iy) * w + ix] * k[((o * c + ch) * kh + i) * kw + j];
              }
          out[((b * f + o) * oh + y) * ow + x] = acc;
        }
  return out;
}

}  // namespace

TEST_CASE("tensor construction follows row-major layout") {
  auto t = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
  CHECK(t.at({1, 0}) == 3);
  auto z = Tensor<double>::from({3}, {0, 0, 0});
  for (double v : z.values()) CHECK(v == 0);
  CHECK_ERRC(Tensor<double>::from({2}, {1, 2, 3}), Errc::shape_mismatch);
  CHECK_ERRC(Tensor<double>::from({1}, {std::nan("")}), Errc::non_finite);
}

TEST_CASE("matmul examples") {
  auto eye = T2(2, 2, {1, 0, 0, 1});
  auto b = T2(2, 2, {5, 6, 7, 8});
  auto r = matmul(eye, b);
  CHECK(std::vector<double>(r.values().begin(), r.values().end()) == std::vector<double>{5, 6, 7, 8});
  auto a = T2(2, 2, {1, 2, 3, 4});
  auto p = matmul(a, b);
  CHECK(std::vector<double>(p.values().begin(), p.values().end()) == std::vector<double>{19, 22, 43, 50});
  auto z = matmul(a, Tensor<double>::zeros({2, 3}));
  for (double v : z.values()) CHECK(v == 0);
  CHECK_ERRC(matmul(a, Tensor<double>::zeros({3, 2})), Errc::shape_mismatch);
}

TEST_CASE("conv2d examples") {
  auto ones = Tensor<double>::full({1, 1, 3, 3}, 1.0);
  auto k2 = Tensor<double>::from({1, 1, 1, 1}, {2});
  auto y = conv2d(ones, k2, 1, 0);
  CHECK(y.shape() == Shape{1, 1, 3, 3});
  for (double v : y.values()) CHECK(v == 2);

  auto img = Tensor<double>::from({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  auto box = Tensor<double>::full({1, 1, 2, 2}, 1.0);
  auto s = conv2d(img, box, 1, 0);
  CHECK(s.shape() == Shape{1, 1, 2, 2});
  CHECK(std::vector<double>(s.values().begin(), s.values().end()) == std::vector<double>{12, 16, 24, 28});
}

TEST_CASE("conv2d matches direct enumeration across geometries") {
  struct G {
    std::size_t n, c, h, w, f, kh, kw, s, p;
  };
  const G cases[] = {{2, 3, 5, 5, 4, 3, 3, 1, 1}, {1, 2, 7, 6, 3, 3, 3, 2, 1}, {3, 4, 8, 8, 2, 1, 1, 2, 0},
                     {2, 2, 4, 4, 3, 1, 1, 1, 0}, {1, 1, 5, 4, 2, 2, 3, 1, 2}, {2, 3, 6, 6, 2, 3, 2, 3, 0},
                     {1, 2, 3, 3, 1, 3, 3, 1, 3}, {1, 1, 2, 2, 1, 3, 3, 2, 1}, {3, 5, 9, 7, 6, 3, 3, 1, 0},
                     {2, 3, 6, 9, 4, 3, 3, 1, 2}, {5, 4, 8, 8, 3, 3, 3, 1, 1}, {1, 2, 1, 1, 2, 3, 3, 1, 1},
                     {2, 1, 3, 4, 2, 3, 3, 1, 0}};
  std::uint64_t seed = 1;
  for (const auto& g : cases) {
    auto xv = uniform_values(g.n * g.c * g.h * g.w, seed++);
    auto kv = uniform_values(g.f * g.c * g.kh * g.kw, seed++);
    std::size_t oh = 0, ow = 0;
    const auto expect = naive_conv(xv, kv, g.n, g.c, g.h, g.w, g.f, g.kh, g.kw, g.s, g.p, oh, ow);
    auto y = conv2d(Tensor<double>::from({g.n, g.c, g.h, g.w}, xv), Tensor<double>::from({g.f, g.c, g.kh, g.kw}, kv),
                    g.s, g.p);
    REQUIRE(y.shape() == Shape{g.n, g.f, oh, ow});
    for (std::size_t i = 0; i < expect.size(); ++i) CHECK(y.values()[i] == doctest::Approx(expect[i]).epsilon(1e-12));
  }
}

TEST_CASE("pointwise conv2d equals a per-pixel matmul") {
  const std::size_t n = 2, c = 3, h = 4, w = 5, f = 4;
  auto xv = uniform_values(n * c * h * w, 11);
  auto kv = uniform_values(f * c, 12);
  auto y = conv2d(Tensor<double>::from({n, c, h, w}, xv), Tensor<double>::from({f, c, 1, 1}, kv), 1, 0);
  auto kmat = Tensor<double>::from({f, c}, kv);
  for (std::size_t b = 0; b < n; ++b) {
    std::vector<double> slice(xv.begin() + b * c * h * w, xv.begin() + (b + 1) * c * h * w);
    auto m = matmul(kmat, Tensor<double>::from({c, h * w}, slice));
    for (std::size_t i = 0; i < f * h * w; ++i) CHECK(y.values()[b * f * h * w + i] == doctest::Approx(m.values()[i]));
  }
}

TEST_CASE("elementwise and reduction examples") {
  auto r = relu(Tensor<double>::from({3}, {-1, 0, 2}));
  CHECK(std::vector<double>(r.values().begin(), r.values().end()) == std::vector<double>{0, 0, 2});
  CHECK(exp(Tensor<double>::from({1}, {0})).item() == 1.0);
  auto m = mul(Tensor<double>::from({2}, {2, 3}), Tensor<double>::from({2}, {4, 5}));
  CHECK(std::vector<double>(m.values().begin(), m.values().end()) == std::vector<double>{8, 15});
  CHECK(sum(Tensor<double>::from({3}, {1, 2, 3})).item() == 6);
  auto cm = mean(T2(2, 2, {1, 2, 3, 4}), 0);
  CHECK(std::vector<double>(cm.values().begin(), cm.values().end()) == std::vector<double>{2, 3});
  CHECK(max(Tensor<double>::from({1}, {-5})).item() == -5);
  CHECK_ERRC(log(Tensor<double>::from({2}, {1, 0})), Errc::domain_error);
  CHECK_ERRC(add(Tensor<double>::zeros({2}), Tensor<double>::zeros({3})), Errc::shape_mismatch);
}

TEST_CASE("l2_normalize examples") {
  auto n = l2_normalize(Tensor<double>::from({1, 2}, {3, 4}));
  CHECK(n.values()[0] == doctest::Approx(0.6));
  CHECK(n.values()[1] == doctest::Approx(0.8));
  auto u = l2_normalize(Tensor<double>::from({1, 2}, {0.6, 0.8}));
  CHECK(u.values()[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK_ERRC(l2_normalize(Tensor<double>::from({1, 2}, {0, 0})), Errc::domain_error);
}

TEST_CASE("backward examples") {
  auto x = Tensor<double>::from({1}, {3});
  x.set_requires_grad(true);
  backward(mul(x, x));
  CHECK(x.grad()[0] == 6);

  auto v = Tensor<double>::from({3}, {1, -2, 5});
  v.set_requires_grad(true);
  auto c = Tensor<double>::from({3}, {0.5, 2, -3});
  backward(sum(mul(c, v)));
  for (std::size_t i = 0; i < 3; ++i) CHECK(v.grad()[i] == c.values()[i]);
}

TEST_CASE("backward overwrites leaf gradients and consumes the tape") {
  auto x = Tensor<double>::from({2}, {1, 2});
  x.set_requires_grad(true);
  auto loss = sum(mul(x, x));
  backward(loss);
  CHECK(x.grad()[1] == 4);
  CHECK_ERRC(backward(loss), Errc::autograd);
  backward(sum(scalar_mul(x, 3.0)));
  CHECK(x.grad()[1] == 3);
  CHECK_ERRC(backward(mul(x, x)), Errc::autograd);
}

TEST_CASE("NoGradGuard stops recording") {
  auto x = random_tensor({3}, 5);
  {
    NoGradGuard guard;
    CHECK_FALSE(grad_enabled());
    auto y = mul(x, x);
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(grad_enabled());
  CHECK(mul(x, x).requires_grad());
}

TEST_CASE("max routes its gradient to the first maximal element") {
  auto x = Tensor<double>::from({4}, {1, 3, 3, 2});
  x.set_requires_grad(true);
  backward(max(x));
  CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>{0, 1, 0, 0});
}

TEST_CASE("relu derivative at zero is zero") {
  auto x = Tensor<double>::from({3}, {-1, 0, 1});
  x.set_requires_grad(true);
  backward(sum(relu(x)));
  CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>{0, 0, 1});
}

TEST_CASE("finite differences: elementwise primitives") {
  auto a = random_tensor({3, 4}, 1);
  auto b = random_tensor({3, 4}, 2);
  auto pos = random_tensor({3, 4}, 3, 0.2, 2.0);
  auto away = random_tensor({3, 4}, 4, 0.1, 1.0);
  // relu away from the kink: alternate signs on a magnitude bounded from zero
  {
    auto vals = away.mutable_values();
    for (std::size_t i = 0; i < vals.size(); i += 2) vals[i] = -vals[i];
  }
  CHECK(finite_difference_check({away}, [&] { return weighted_sum(relu(away), 10); }).max_rel < 1e-6);
  CHECK(finite_difference_check({a}, [&] { return weighted_sum(exp(a), 11); }).max_rel < 1e-6);
  CHECK(finite_difference_check({pos}, [&] { return weighted_sum(log(pos), 12); }).max_rel < 1e-6);
  CHECK(finite_difference_check({a, b}, [&] { return weighted_sum(add(a, b), 13); }).max_rel < 1e-6);
  CHECK(finite_difference_check({a, b}, [&] { return weighted_sum(sub(a, b), 14); }).max_rel < 1e-6);
  CHECK(finite_difference_check({a, b}, [&] { return weighted_sum(mul(a, b), 15); }).max_rel < 1e-6);
  CHECK(finite_difference_check({a}, [&] { return weighted_sum(mul(a, a), 16); }).max_rel < 1e-6);
  CHECK(finite_difference_check({a}, [&] { return weighted_sum(scalar_mul(a, -2.5), 17); }).max_rel < 1e-6);
}

TEST_CASE("finite differences: reductions and reshapes") {
  auto x = random_tensor({3, 4, 2}, 21);
  for (auto op : {ReduceOp::sum, ReduceOp::mean, ReduceOp::max}) {
    CHECK(finite_difference_check({x}, [&] { return weighted_sum(reduce(op, x), 22); }).max_rel < 1e-6);
    for (std::size_t axis = 0; axis < 3; ++axis) {
      CHECK(finite_difference_check({x}, [&] { return weighted_sum(reduce(op, x, axis), 23 + axis); }).max_rel < 1e-6);
    }
  }
  auto m = random_tensor({3, 5}, 30);
  CHECK(finite_difference_check({m}, [&] { return weighted_sum(transpose(m), 31); }).max_rel < 1e-6);
  CHECK(finite_difference_check({m}, [&] { return weighted_sum(reshape(m, {5, 3}), 32); }).max_rel < 1e-6);
}

TEST_CASE("finite differences: matmul, bias, normalisation, softmax, pick") {
  auto a = random_tensor({3, 4}, 41);
  auto b = random_tensor({4, 2}, 42);
  auto bias = random_tensor({2}, 43);
  CHECK(finite_difference_check({a, b}, [&] { return weighted_sum(matmul(a, b), 44); }).max_rel < 1e-6);
  auto x = random_tensor({3, 2}, 45);
  CHECK(finite_difference_check({x, bias}, [&] { return weighted_sum(add_bias(x, bias), 46); }).max_rel < 1e-6);
  CHECK(finite_difference_check({a}, [&] { return weighted_sum(l2_normalize(a), 47); }).max_rel < 1e-6);
  auto logits = random_tensor({4, 5}, 48, -3, 3);
  CHECK(finite_difference_check({logits}, [&] { return weighted_sum(log_softmax(logits), 49); }).max_rel < 1e-6);
  const std::vector<std::size_t> idx{4, 0, 2, 2};
  CHECK(finite_difference_check({logits}, [&] { return weighted_sum(pick(logits, idx), 50); }).max_rel < 1e-6);
}

TEST_CASE("finite differences: conv2d, pooling and batch norm") {
  auto x = random_tensor({2, 3, 5, 5}, 61);
  auto k = random_tensor({4, 3, 3, 3}, 62);
  auto k1 = random_tensor({2, 3, 1, 1}, 63);
  CHECK(finite_difference_check({x, k}, [&] { return weighted_sum(conv2d(x, k, 1, 1), 64); }).max_rel < 1e-6);
  CHECK(finite_difference_check({x, k}, [&] { return weighted_sum(conv2d(x, k, 2, 1), 65); }).max_rel < 1e-6);
  CHECK(finite_difference_check({x, k1}, [&] { return weighted_sum(conv2d(x, k1, 2, 0), 66); }).max_rel < 1e-6);
  CHECK(finite_difference_check({x, k1}, [&] { return weighted_sum(conv2d(x, k1, 1, 0), 67); }).max_rel < 1e-6);
  CHECK(finite_difference_check({x}, [&] { return weighted_sum(global_avg_pool(x), 68); }).max_rel < 1e-6);

  auto gamma = random_tensor({3}, 69, 0.5, 1.5);
  auto beta = random_tensor({3}, 70);
  auto rm = Tensor<double>::zeros({3});
  auto rv = Tensor<double>::full({3}, 1.0);
  BatchNormOptions batch;
  batch.update_running = false;
  CHECK(finite_difference_check({x, gamma, beta},
                                [&] { return weighted_sum(batch_norm(x, gamma, beta, rm, rv, batch), 71); })
            .max_rel < 1e-5);
  BatchNormOptions running;
  running.use_batch_stats = false;
  auto rm2 = random_tensor({3}, 72, -0.2, 0.2, false);
  auto rv2 = random_tensor({3}, 73, 0.5, 2.0, false);
  CHECK(finite_difference_check({x, gamma, beta},
                                [&] { return weighted_sum(batch_norm(x, gamma, beta, rm2, rv2, running), 74); })
            .max_rel < 1e-6);
}

TEST_CASE("composite conv -> relu -> mean gradient") {
  auto x = random_tensor({2, 2, 6, 6}, 81);
  auto k = random_tensor({3, 2, 3, 3}, 82);
  const auto rep = finite_difference_check({x, k}, [&] { return mean(relu(conv2d(x, k, 1, 1))); });
  CHECK(rep.max_rel < 1e-4);
}

TEST_CASE("batch norm updates running statistics with the unbiased variance") {
  auto x = Tensor<double>::from({2, 1, 1, 2}, {1, 2, 3, 6});
  auto g = Tensor<double>::full({1}, 1.0);
  auto b = Tensor<double>::zeros({1});
  auto rm = Tensor<double>::zeros({1});
  auto rv = Tensor<double>::full({1}, 1.0);
  BatchNormOptions opt;
  opt.momentum = 0.5;
  batch_norm(x, g, b, rm, rv, opt);
  // mean 3, unbiased variance (4+1+0+9)/3
  CHECK(rm.values()[0] == doctest::Approx(1.5));
  CHECK(rv.values()[0] == doctest::Approx(0.5 + 0.5 * 14.0 / 3.0));
}

TEST_CASE("custom operators record through Tensor::record") {
  auto x = random_tensor({3}, 91);
  auto cube = [](const Tensor<double>& t) {
    std::vector<double> out;
    for (double v : t.values()) out.push_back(v * v * v);
    return Tensor<double>::record(t.shape(), out, {t}, "cube", [t](std::span<const double> dy, GradSink<double>& sink) {
      auto d = sink.grad(0);
      for (std::size_t i = 0; i < dy.size(); ++i) d[i] += 3 * t.values()[i] * t.values()[i] * dy[i];
    });
  };
  CHECK(finite_difference_check({x}, [&] { return weighted_sum(cube(x), 92); }).max_rel < 1e-6);
}

TEST_CASE("finite checks flag non-finite results") {
  auto big = Tensor<double>::from({1}, {800});
  CHECK_ERRC(exp(big), Errc::non_finite);
  set_finite_checks(false);
  CHECK(std::isinf(exp(big).item()));
  set_finite_checks(true);
}

TEST_CASE("results do not depend on where buffers are allocated") {
  // Every op is run under many heap layouts; outputs and gradients must agree bitwise.
  auto run = [](std::size_t shift) {
    std::vector<std::vector<float>> filler;
    for (std::size_t k = 0; k <= shift; ++k) filler.emplace_back(1 + 3 * k);
    auto make = [](Shape s, std::uint64_t seed) {
      const auto v = uniform_values(shape_numel(s), seed);
      auto t = Tensor<float>::from(s, std::vector<float>(v.begin(), v.end()));
      t.set_requires_grad(true);
      return t;
    };
    auto x = make({3, 5, 9, 9}, 1);
    auto k = make({6, 5, 3, 3}, 2);
    auto gamma = make({6}, 3);
    auto beta = make({6}, 4);
    auto rm = Tensor<float>::zeros({6});
    auto rv = Tensor<float>::full({6}, 1.0f);
    auto row = make({1, 37}, 5);
    auto w = make({37, 11}, 6);
    auto col = make({11, 1}, 7);
    auto y = batch_norm(relu(conv2d(x, k, 1, 1)), gamma, beta, rm, rv, BatchNormOptions{});
    auto pooled = global_avg_pool(y);
    auto v = matmul(matmul(row, w), col);
    auto loss = add(add(sum(mul(pooled, pooled)), sum(v)), sum(log_softmax(matmul(row, w))));
    backward(loss);
    std::vector<float> out{loss.item(), rm.values()[2], rv.values()[5]};
    for (const auto* t : {&x, &k, &gamma, &beta, &row, &w, &col}) out.insert(out.end(), t->grad().begin(), t->grad().end());
    return out;
  };
  const auto ref = run(0);
  for (std::size_t shift = 1; shift < 24; ++shift) REQUIRE(run(shift) == ref);
}
