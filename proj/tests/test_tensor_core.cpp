#include <catch2/catch_amalgamated.hpp>

#include <map>
#include <set>

#include "msrf/msrf.hpp"
#include "op_gradcases.hpp"
#include "oracles.hpp"

using namespace msrf;
using Catch::Matchers::WithinAbs;

TEST_CASE("tensor construction and indexing") {
  Tensor<double> t({2, 3, 4, 5}, 1.5);
  CHECK(t.size() == 120);
  CHECK(t.rank() == 4);
  t.at(1, 2, 3, 4) = 7.0;
  CHECK(t[119] == 7.0);
  CHECK(t.at(0, 0, 0, 0) == 1.5);
  CHECK_THROWS_AS(Tensor<double>({2, 0, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor<double>({2, 2}, std::vector<double>(3)), ShapeError);
  CHECK_THROWS_AS(t.reshaped({7}), ShapeError);
  CHECK(t.reshaped({120}).dim(0) == 120);
}

TEST_CASE("conv2d matches direct nested-loop convolution") {
  Rng rng(1);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t n = 1 + rng.below(2), cin = 1 + rng.below(4), cout = 1 + rng.below(4);
    const std::size_t h = 3 + rng.below(7), w = 3 + rng.below(7);
    const std::size_t k = std::vector<std::size_t>{1, 3, 5}[rng.below(3)];
    const std::size_t stride = 1 + rng.below(2);
    const bool same = k > std::min(h, w) || rng.below(2) == 0;
    const auto x = oracle::random_tensor({n, cin, h, w}, rng);
    const auto wt = oracle::random_tensor({cout, cin, k, k}, rng);
    const auto b = oracle::random_tensor({cout}, rng);
    Tape<double> tape;
    const auto y = conv2d(tape.constant(x), tape.constant(wt), tape.constant(b), stride,
                          same ? Padding::same : Padding::valid);
    const auto ref = oracle::conv2d(x, wt, b, stride, same);
    REQUIRE(y.shape() == ref.shape());
    CHECK(oracle::max_abs_diff(y.value(), ref) < 1e-12);
  }
}

TEST_CASE("same padding output size is ceil(H / stride)") {
  for (std::size_t h : {5u, 6u, 7u, 64u}) {
    for (std::size_t s : {1u, 2u}) {
      const auto g = conv_geometry(1, h, h, 3, 3, s, Padding::same);
      CHECK(g.out_h == (h + s - 1) / s);
    }
  }
  CHECK_THROWS_AS(conv_geometry(1, 4, 4, 3, 3, 0, Padding::same), ConfigError);
  CHECK_THROWS_AS(conv_geometry(1, 2, 2, 3, 3, 1, Padding::valid), ShapeError);
}

TEST_CASE("conv_transpose2d matches scatter oracle and doubles spatial size") {
  Rng rng(2);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t n = 1 + rng.below(2), cin = 1 + rng.below(3), cout = 1 + rng.below(3);
    const std::size_t h = 1 + rng.below(5), w = 1 + rng.below(5);
    const std::size_t k = 1 + rng.below(4);
    const std::size_t stride = 1 + rng.below(2);
    const auto x = oracle::random_tensor({n, cin, h, w}, rng);
    const auto wt = oracle::random_tensor({cin, cout, k, k}, rng);
    const auto b = oracle::random_tensor({cout}, rng);
    Tape<double> tape;
    const auto y = conv_transpose2d(tape.constant(x), tape.constant(wt), tape.constant(b), stride);
    REQUIRE(y.shape() == Shape{n, cout, h * stride, w * stride});
    CHECK(oracle::max_abs_diff(y.value(), oracle::conv_transpose2d(x, wt, b, stride)) < 1e-12);
  }
}

TEST_CASE("conv_transpose2d is the adjoint of the same-padded strided conv") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t c1 = 1 + rng.below(3), c2 = 1 + rng.below(3), h = 1 + rng.below(4);
    const auto x = oracle::random_tensor({1, c1, 2 * h, 2 * h}, rng);
    const auto y = oracle::random_tensor({1, c2, h, h}, rng);
    const auto wt = oracle::random_tensor({c2, c1, 3, 3}, rng);  // conv: c1 -> c2, transposed: c2 -> c1
    const Tensor<double> zb1({c1}), zb2({c2});
    Tape<double> tape;
    const auto cx = conv2d(tape.constant(x), tape.constant(wt), tape.constant(zb2), 2, Padding::same);
    const auto ty = conv_transpose2d(tape.constant(y), tape.constant(wt), tape.constant(zb1), 2);
    double lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < y.size(); ++i) lhs += cx.value()[i] * y[i];
    for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * ty.value()[i];
    CHECK_THAT(lhs, WithinAbs(rhs, 1e-10));
  }
}

TEST_CASE("dense matches oracle") {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + rng.below(3), cin = 1 + rng.below(6), cout = 1 + rng.below(6);
    const auto x = oracle::random_tensor({n, cin}, rng);
    const auto w = oracle::random_tensor({cout, cin}, rng);
    const auto b = oracle::random_tensor({cout}, rng);
    Tape<double> tape;
    CHECK(oracle::max_abs_diff(dense(tape.constant(x), tape.constant(w), tape.constant(b)).value(),
                               oracle::dense(x, w, b)) < 1e-12);
  }
}

TEST_CASE("maxpool2 matches brute-force windows") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = oracle::random_tensor({1 + rng.below(2), 1 + rng.below(3), 2 * (1 + rng.below(4)), 2 * (1 + rng.below(4))}, rng);
    Tape<double> tape;
    CHECK(maxpool2(tape.constant(x)).value() == oracle::maxpool2(x));
  }
  Tape<double> tape;
  CHECK_THROWS_AS(maxpool2(tape.constant(Tensor<double>({1, 1, 3, 4}))), ConfigError);
}

TEST_CASE("maxpool2 routes a tied window's gradient to its first element") {
  Tape<double> tape;
  auto x = tape.variable(Tensor<double>({1, 1, 2, 2}, 0.5));
  tape.backward(sum(maxpool2(x)));
  const auto& g = tape.grad(x);
  CHECK(g[0] == 1.0);
  CHECK(g[1] == 0.0);
  CHECK(g[2] == 0.0);
  CHECK(g[3] == 0.0);
}

TEST_CASE("bilinear resize matches per-pixel oracle and keeps constants exact") {
  Rng rng(6);
  for (int trial = 0; trial < 30; ++trial) {
    const auto x = oracle::random_tensor({1, 2, 1 + rng.below(6), 1 + rng.below(6)}, rng);
    const std::size_t oh = 1 + rng.below(12), ow = 1 + rng.below(12);
    Tape<double> tape;
    CHECK(oracle::max_abs_diff(bilinear_resize(tape.constant(x), oh, ow).value(), oracle::bilinear(x, oh, ow)) < 1e-12);
  }
  Tape<double> tape;
  const auto c = bilinear_resize(tape.constant(Tensor<double>({1, 1, 4, 4}, 0.3)), 16, 16);
  for (double v : c.value().data()) CHECK(v == 0.3);
  const auto x = oracle::random_tensor({1, 1, 5, 7}, rng);
  CHECK(bilinear_resize(tape.constant(x), 5, 7).value() == x);
}

TEST_CASE("elementwise ops and reductions match direct formulas") {
  Rng rng(7);
  const auto a = oracle::random_tensor({2, 3, 4, 4}, rng);
  const auto b = oracle::random_tensor({2, 3, 4, 4}, rng);
  const auto s = oracle::random_tensor({2, 3}, rng);
  const auto m = oracle::random_tensor({2, 1, 4, 4}, rng);
  Tape<double> t;
  auto va = t.constant(a), vb = t.constant(b);
  CHECK(oracle::max_abs_diff(add_scaled(va, vb, 0.4).value(), oracle::add(a, b, 0.4)) < 1e-15);
  CHECK(oracle::max_abs_diff(leaky_relu(va, 0.01).value(), oracle::map(a, [](double v) { return oracle::leaky(v, 0.01); })) == 0.0);
  CHECK(oracle::max_abs_diff(sigmoid(va).value(), oracle::map(a, oracle::sigmoid)) < 1e-15);
  CHECK(oracle::max_abs_diff(global_avg_pool(va).value(), oracle::global_avg(a)) < 1e-15);
  CHECK(oracle::max_abs_diff(scale_channels(va, t.constant(s)).value(), oracle::scale_channels(a, s)) == 0.0);
  CHECK(oracle::max_abs_diff(mul_map(va, t.constant(m)).value(), oracle::mul_map(a, m)) == 0.0);
  CHECK(concat<double>({va, vb}).value() == oracle::concat({a, b}));
  CHECK(slice_channels(concat<double>({va, vb}), 3, 3).value() == b);
  double total = 0;
  for (double v : a.data()) total += v;
  CHECK_THAT(sum(va).value()[0], WithinAbs(total, 1e-12));
}

TEST_CASE("add_scaled with w = 0 is a bitwise copy of its first input") {
  Rng rng(8);
  const auto a = oracle::random_tensor({1, 2, 3, 3}, rng);
  const auto b = oracle::random_tensor({1, 2, 3, 3}, rng, -1e300, 1e300);
  Tape<double> t;
  CHECK(add_scaled(t.constant(a), t.constant(b), 0.0).value() == a);
}

TEST_CASE("dropout is inverted, seeded and off outside training") {
  Tape<double> t;
  auto x = t.constant(Tensor<double>({1, 4, 16, 16}, 1.0));
  Rng r1(9), r2(9);
  const auto y1 = dropout(x, 0.25, true, r1);
  const auto y2 = dropout(x, 0.25, true, r2);
  CHECK(y1.value() == y2.value());
  std::size_t kept = 0;
  for (double v : y1.value().data()) {
    CHECK((v == 0.0 || v == 1.0 / 0.75));
    kept += v != 0.0;
  }
  CHECK(kept > 600);
  CHECK(kept < 940);
  Rng r3(9);
  CHECK(dropout(x, 0.25, false, r3).value() == x.value());
  CHECK_THROWS_AS(dropout(x, 1.0, true, r3), ConfigError);
}

TEST_CASE("every primitive passes central-difference gradient checks") {
  std::map<std::string, std::size_t> instances;
  for (const auto& c : gradcases::all_cases()) {
    const auto report = gradcheck_op(c.fn, c.inputs, 11, 1e-4);
    INFO(c.op << " worst rel err " << report.worst_error());
    CHECK(report.passed());
    ++instances[c.op];
  }
  for (const auto& [op, count] : instances) {
    INFO(op);
    CHECK(count >= 10);
  }
  CHECK(instances.size() >= 22);
}

TEST_CASE("fan-out accumulates gradients and parameters are reported by name") {
  Tape<double> t;
  auto p = t.parameter("p", Tensor<double>({3}, std::vector<double>{1, 2, 3}));
  auto loss = sum(add(hadamard(p, p), scale(p, 2.0)));
  const auto grads = t.backward(loss);
  REQUIRE(grads.count("p") == 1);
  CHECK(grads.at("p") == Tensor<double>({3}, std::vector<double>{4, 6, 8}));
}

TEST_CASE("tape usage errors") {
  Tape<double> t1, t2;
  auto a = t1.variable(Tensor<double>({2}, 1.0));
  auto b = t2.variable(Tensor<double>({2}, 1.0));
  CHECK_THROWS_AS(add(a, b), UsageError);
  CHECK_THROWS_AS(t1.backward(a), UsageError);
  auto w = t1.constant(Tensor<double>({2, 3, 3, 3}));
  auto bias = t1.constant(Tensor<double>({2}));
  auto x = t1.constant(Tensor<double>({1, 4, 5, 5}));
  CHECK_THROWS_AS(conv2d(x, w, bias, 1, Padding::same), ShapeError);
  CHECK_THROWS_AS(add(t1.constant(Tensor<double>({2})), t1.constant(Tensor<double>({3}))), ShapeError);
}

TEST_CASE("parallel_for covers every index exactly once") {
  std::vector<int> hits(1000, 0);
  parallel_for(hits.size(), [&](std::size_t i) { hits[i] += 1; });
  for (int h : hits) CHECK(h == 1);
  CHECK_THROWS_AS(parallel_for(8, [](std::size_t i) {
                    if (i == 5) throw NumericError("boom");
                  }),
                  NumericError);
}

TEST_CASE("derived seeds and the generator are reproducible") {
  CHECK(derive_seed(1, "a") == derive_seed(1, "a"));
  CHECK(derive_seed(1, "a") != derive_seed(1, "b"));
  CHECK(derive_seed(1, "a") != derive_seed(2, "a"));
  Rng a(5), b(5);
  for (int i = 0; i < 100; ++i) CHECK(a.uniform() == b.uniform());
  std::set<std::uint64_t> seen;
  Rng r(3);
  for (int i = 0; i < 1000; ++i) {
    const auto v = r.below(7);
    CHECK(v < 7);
    seen.insert(v);
  }
  CHECK(seen.size() == 7);
}
