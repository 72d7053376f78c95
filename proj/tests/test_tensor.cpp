#include <cmath>
#include <sstream>

#include "doctest.h"
#include "gradcheck.hpp"
#include "xlris/errors.hpp"
#include "xlris/ops.hpp"

using namespace xlris;
using xlris::testing::grad_check;
using xlris::testing::inner;
using xlris::testing::random_tensor;

namespace {

// Straight loop reference for cross-correlation with zero padding.
Tensor naive_conv(const Tensor& x, const Tensor& k, const Tensor& b, int s, int p) {
  const int C = int(x.dim(0)), H = int(x.dim(1)), W = int(x.dim(2));
  const int O = int(k.dim(0)), kh = int(k.dim(2)), kw = int(k.dim(3));
  const int Ho = (H + 2 * p - kh) / s + 1, Wo = (W + 2 * p - kw) / s + 1;
  Tensor out = Tensor::zeros({std::size_t(O), std::size_t(Ho), std::size_t(Wo)});
  for (int o = 0; o < O; ++o)
    for (int oh = 0; oh < Ho; ++oh)
      for (int ow = 0; ow < Wo; ++ow) {
        double acc = b.defined() ? b[o] : 0.0;
        for (int c = 0; c < C; ++c)
          for (int i = 0; i < kh; ++i)
            for (int j = 0; j < kw; ++j) {
              const int ih = oh * s - p + i, iw = ow * s - p + j;
              if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
              acc += k[((o * C + c) * kh + i) * kw + j] * x[(c * H + ih) * W + iw];
            }
        out.data()[(o * Ho + oh) * Wo + ow] = acc;
      }
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("conv2d identity kernel") {
  std::mt19937_64 gen(1);
  Tape tape(false);
  auto x = random_tensor({1, 5, 6}, gen);
  auto y = ops::conv2d(tape, x, Tensor::filled({1, 1, 1, 1}, 1.0), Tensor::zeros({1}));
  CHECK(max_abs_diff(x, y) == 0.0);
}

TEST_CASE("conv2d counts overlaps") {
  Tape tape(false);
  auto y = ops::conv2d(tape, Tensor::filled({1, 4, 4}, 1.0), Tensor::filled({1, 1, 3, 3}, 1.0), Tensor::zeros({1}), 1, 1);
  CHECK(y[0] == 4.0);
  CHECK(y[3] == 4.0);
  CHECK(y[1] == 6.0);
  CHECK(y[4] == 6.0);
  CHECK(y[5] == 9.0);
  CHECK(y[15] == 4.0);
}

TEST_CASE("conv2d matches loop reference") {
  std::mt19937_64 gen(2);
  Tape tape(false);
  auto x = random_tensor({2, 8, 8}, gen);
  auto k = random_tensor({32, 2, 3, 3}, gen);
  auto b = random_tensor({32}, gen);
  for (int s : {1, 2})
    for (int p : {0, 1, 2}) {
      auto y = ops::conv2d(tape, x, k, b, s, p);
      CHECK(y.dim(1) == std::size_t((8 + 2 * p - 3) / s + 1));
      CHECK(max_abs_diff(y, naive_conv(x, k, b, s, p)) <= 1e-12);
    }
  auto k2 = random_tensor({4, 2, 2, 2}, gen);
  CHECK(max_abs_diff(ops::conv2d(tape, x, k2, Tensor(), 2, 0), naive_conv(x, k2, Tensor(), 2, 0)) <= 1e-12);
}

TEST_CASE("conv2d rejects bad shapes") {
  Tape tape(false);
  CHECK_THROWS_AS(ops::conv2d(tape, Tensor::zeros({3, 4, 4}), Tensor::zeros({1, 2, 3, 3}), Tensor()), DimensionError);
  CHECK_THROWS_AS(ops::conv2d(tape, Tensor::zeros({1, 2, 2}), Tensor::zeros({1, 1, 3, 3}), Tensor()), DimensionError);
  CHECK_THROWS_AS(ops::conv2d(tape, Tensor::zeros({1, 4, 4}), Tensor::zeros({1, 1, 3, 3}), Tensor(), 0), ArgumentError);
}

TEST_CASE("conv2d_transpose is the adjoint of conv2d") {
  std::mt19937_64 gen(3);
  Tape tape(false);
  auto k = random_tensor({8, 2, 3, 3}, gen);
  for (int s : {1, 2}) {
    auto x = random_tensor({2, 6, 6}, gen);
    auto cx = ops::conv2d(tape, x, k, Tensor(), s, 1);
    auto y = random_tensor(cx.shape(), gen);
    auto ty = ops::conv2d_transpose(tape, y, k, s, 1);
    if (s == 1) CHECK(ty.shape() == x.shape());
    if (ty.shape() == x.shape()) CHECK(std::abs(inner(cx, y) - inner(x, ty)) <= 1e-12 * std::abs(inner(cx, y)) + 1e-12);
  }
  auto x = random_tensor({1, 4, 5}, gen);
  auto scaled = ops::conv2d_transpose(tape, x, Tensor::filled({1, 1, 1, 1}, 2.5), 1, 0);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(scaled[i] == 2.5 * x[i]);
  auto zero = ops::conv2d_transpose(tape, x, Tensor::zeros({1, 3, 3, 3}), 1, 1);
  for (double v : zero.data()) CHECK(v == 0.0);
}

TEST_CASE("depthwise conv") {
  std::mt19937_64 gen(4);
  Tape tape(false);
  auto x = random_tensor({4, 5, 5}, gen);
  auto center = Tensor::zeros({4, 1, 3, 3});
  for (int c = 0; c < 4; ++c) center.data()[c * 9 + 4] = 1.0;
  CHECK(max_abs_diff(ops::depthwise_conv2d(tape, x, center, 1), x) == 0.0);
  auto k = random_tensor({4, 1, 3, 3}, gen);
  auto block = Tensor::zeros({4, 4, 3, 3});
  for (int c = 0; c < 4; ++c)
    for (int t = 0; t < 9; ++t) block.data()[(c * 4 + c) * 9 + t] = k[c * 9 + t];
  CHECK(max_abs_diff(ops::depthwise_conv2d(tape, x, k, 1), ops::conv2d(tape, x, block, Tensor(), 1, 1)) <= 1e-12);
  auto zero = ops::depthwise_conv2d(tape, x, Tensor::zeros({4, 1, 3, 3}), 1);
  for (double v : zero.data()) CHECK(v == 0.0);
}

TEST_CASE("prelu") {
  std::mt19937_64 gen(5);
  Tape tape(false);
  auto pos = Tensor({2, 1, 2}, {0.0, 1.0, 2.0, 3.0});
  CHECK(max_abs_diff(ops::prelu(tape, pos, Tensor({2}, {0.3, 0.4})), pos) == 0.0);
  auto x = random_tensor({2, 3, 3}, gen);
  CHECK(max_abs_diff(ops::prelu(tape, x, Tensor::filled({2}, 1.0)), x) == 0.0);
  auto slope = Tensor({2}, {0.2, -0.4}, true);
  auto xr = random_tensor({2, 3, 3}, gen, true);
  auto r = grad_check([&](Tape& t) { return ops::prelu(t, xr, slope); }, {xr, slope});
  CHECK(r.worst_rel_err <= 1e-6);
}

TEST_CASE("soft threshold") {
  Tape tape(false);
  auto x = Tensor({3}, {1.5, -1.5, 0.3});
  auto y = ops::soft_threshold(tape, x, 1.0);
  CHECK(y[0] == doctest::Approx(0.5));
  CHECK(y[1] == doctest::Approx(-0.5));
  CHECK(y[2] == 0.0);
  CHECK(max_abs_diff(ops::soft_threshold(tape, x, 0.0), x) == 0.0);
  CHECK_THROWS_AS(ops::soft_threshold(tape, x, -0.1), ArgumentError);

  Tape rec;
  auto xg = Tensor({2}, {1.0, 2.0}, true);
  auto out = ops::soft_threshold(rec, xg, 1.0);
  rec.backward(ops::sum(rec, out));
  CHECK(xg.grad()[0] == 0.0);  // |x| = tau
  CHECK(xg.grad()[1] == 1.0);
}

TEST_CASE("layer norm") {
  std::mt19937_64 gen(6);
  Tape tape(false);
  auto ones = Tensor::filled({3}, 1.0);
  auto zeros = Tensor::zeros({3});
  auto c = ops::layer_norm(tape, Tensor::filled({3, 2, 2}, 4.2), ones, zeros);
  for (double v : c.data()) CHECK(v == 0.0);
  auto x = random_tensor({5, 3, 4}, gen, false, 3.0);
  auto y = ops::layer_norm(tape, x, Tensor::filled({5}, 1.0), Tensor::zeros({5}));
  for (std::size_t p = 0; p < 12; ++p) {
    double m = 0.0, v = 0.0;
    for (std::size_t ch = 0; ch < 5; ++ch) m += y[ch * 12 + p] / 5.0;
    for (std::size_t ch = 0; ch < 5; ++ch) v += (y[ch * 12 + p] - m) * (y[ch * 12 + p] - m) / 5.0;
    CHECK(std::abs(m) <= 1e-10);
    CHECK(std::abs(v - 1.0) <= 1e-5);
  }
  auto xg = random_tensor({4, 3, 3}, gen, true);
  auto sc = random_tensor({4}, gen, true);
  auto sh = random_tensor({4}, gen, true);
  auto r = grad_check([&](Tape& t) { return ops::layer_norm(t, xg, sc, sh); }, {xg, sc, sh});
  CHECK(r.worst_rel_err <= 1e-5);
}

TEST_CASE("global average pool") {
  std::mt19937_64 gen(7);
  Tape tape(false);
  CHECK(ops::global_avg_pool(tape, Tensor::filled({1, 3, 3}, 1.7))[0] == doctest::Approx(1.7));
  CHECK(ops::global_avg_pool(tape, Tensor({1, 2, 2}, {1, 2, 3, 4}))[0] == 2.5);
  auto x = random_tensor({3, 4, 5}, gen);
  auto g = ops::global_avg_pool(tape, x);
  CHECK(g.shape() == Shape{3, 1, 1});
  for (std::size_t c = 0; c < 3; ++c) {
    double acc = 0.0;
    for (std::size_t p = 0; p < 20; ++p) acc += x[c * 20 + p];
    CHECK(std::abs(g[c] - acc / 20.0) <= 1e-12);
  }
}

TEST_CASE("pixel shuffle") {
  std::mt19937_64 gen(8);
  Tape tape(false);
  auto x = random_tensor({3, 2, 2}, gen);
  CHECK(max_abs_diff(ops::pixel_shuffle(tape, x, 1), x) == 0.0);
  auto four = ops::pixel_shuffle(tape, Tensor({4, 1, 1}, {0, 1, 2, 3}), 2);
  CHECK(four.shape() == Shape{1, 2, 2});
  for (int i = 0; i < 4; ++i) CHECK(four[i] == double(i));  // channel i*r + j lands at (i, j)
  auto big = random_tensor({8, 3, 2}, gen);
  CHECK(max_abs_diff(ops::space_to_depth(tape, ops::pixel_shuffle(tape, big, 2), 2), big) == 0.0);
  CHECK_THROWS_AS(ops::pixel_shuffle(tape, Tensor::zeros({3, 1, 1}), 2), ArgumentError);
}

TEST_CASE("backward basics") {
  std::mt19937_64 gen(9);
  auto x = random_tensor({2, 3}, gen, true);
  Tape tape;
  tape.backward(ops::sum(tape, x));
  for (double g : x.grad()) CHECK(g == 1.0);
  Tape t2;
  auto y = ops::scale(t2, x, 2.0);
  CHECK_THROWS_AS(t2.backward(y), ArgumentError);
}

TEST_CASE("composite graph gradients and determinism") {
  std::mt19937_64 gen(10);
  auto x = random_tensor({2, 6, 6}, gen, true);
  auto k = random_tensor({4, 2, 3, 3}, gen, true, 0.5);
  auto b = random_tensor({4}, gen, true);
  auto slope = Tensor::filled({4}, 0.1, true);
  auto sc = Tensor::filled({4}, 1.0, true);
  auto sh = Tensor::zeros({4}, true);
  auto f = [&](Tape& t) {
    auto h = ops::conv2d(t, x, k, b, 1, 1);
    h = ops::prelu(t, h, slope);
    return ops::layer_norm(t, h, sc, sh);
  };
  auto r = grad_check(f, {x, k, b, slope, sc, sh});
  CHECK(r.probes >= 20);
  INFO(r.worst_where);
  CHECK(r.worst_rel_err <= 1e-4);

  auto run = [&] {
    for (auto* t : {&x, &k, &b}) t->zero_grad();
    Tape tape;
    tape.backward(ops::sum(tape, f(tape)));
    return std::vector<double>(k.grad().begin(), k.grad().end());
  };
  CHECK(run() == run());
}

TEST_CASE("every primitive passes gradient checks") {
  std::mt19937_64 gen(11);
  auto a = random_tensor({3, 4, 4}, gen, true);
  auto b = random_tensor({3, 4, 4}, gen, true);
  auto s = Tensor::scalar(0.7, true);
  auto m = random_tensor({3, 1, 1}, gen, true);
  auto k = random_tensor({5, 3, 3, 3}, gen, true);
  auto kb = random_tensor({5}, gen, true);
  auto kt = random_tensor({3, 2, 3, 3}, gen, true);
  auto dk = random_tensor({3, 1, 3, 3}, gen, true);
  auto db = random_tensor({3}, gen, true);
  auto k2 = random_tensor({4, 3, 2, 2}, gen, true);
  auto mat = random_tensor({4, 6}, gen, true);
  auto tau = Tensor::scalar(0.3, true);
  auto ps = random_tensor({12, 2, 2}, gen, true);
  auto fixed = random_tensor({4, 6}, gen);

  const std::vector<std::pair<std::string, std::function<Tensor(Tape&)>>> cases = {
      {"add", [&](Tape& t) { return ops::add(t, a, b); }},
      {"sub", [&](Tape& t) { return ops::sub(t, a, b); }},
      {"mul", [&](Tape& t) { return ops::mul(t, a, b); }},
      {"scale", [&](Tape& t) { return ops::scale(t, a, s); }},
      {"channel_mul", [&](Tape& t) { return ops::channel_mul(t, a, m); }},
      {"relu", [&](Tape& t) { return ops::relu(t, a); }},
      {"squared_distance", [&](Tape& t) { return ops::squared_distance(t, a, b); }},
      {"squared_norm", [&](Tape& t) { return ops::squared_norm(t, a); }},
      {"concat", [&](Tape& t) { return ops::concat_channels(t, a, b); }},
      {"conv2d", [&](Tape& t) { return ops::conv2d(t, a, k, kb, 1, 1); }},
      {"conv2d_stride2", [&](Tape& t) { return ops::conv2d(t, a, k2, Tensor(), 2, 0); }},
      {"conv2d_transpose", [&](Tape& t) { return ops::conv2d_transpose(t, a, kt, 1, 1); }},
      {"conv2d_transpose_stride2", [&](Tape& t) { return ops::conv2d_transpose(t, b, kt, 2, 0); }},
      {"depthwise", [&](Tape& t) { return ops::depthwise_conv2d(t, a, dk, 1, db); }},
      {"soft_threshold", [&](Tape& t) { return ops::soft_threshold(t, a, tau); }},
      {"global_avg_pool", [&](Tape& t) { return ops::global_avg_pool(t, a); }},
      {"pixel_shuffle", [&](Tape& t) { return ops::pixel_shuffle(t, ps, 2); }},
      {"space_to_depth", [&](Tape& t) { return ops::space_to_depth(t, a, 2); }},
      {"matmul_right", [&](Tape& t) { return ops::matmul_right(t, a, fixed); }},
      {"matmul_right_param", [&](Tape& t) {
         return ops::matmul_right_transposed(t, ops::matmul_right(t, a, mat), mat);
       }},
  };
  for (const auto& [name, f] : cases) {
    auto r = grad_check(f, {a, b, s, m, k, kb, kt, dk, db, k2, mat, tau, ps});
    INFO(name << ": " << r.worst_where);
    CHECK(r.worst_rel_err <= 1e-4);
  }
}

TEST_CASE("tensor file round trip") {
  std::mt19937_64 gen(12);
  auto x = random_tensor({2, 3, 4}, gen);
  std::stringstream ss;
  write_tensor(ss, x);
  CHECK(ss.str().substr(0, 4) == "TNSR");
  auto y = read_tensor(ss);
  CHECK(y.shape() == x.shape());
  CHECK(max_abs_diff(x, y) == 0.0);
  CHECK_THROWS_AS(load_tensor("/nonexistent/file.tnsr"), IoError);
}
