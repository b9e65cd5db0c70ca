#include <catch2/catch_amalgamated.hpp>

#include "msrf/msrf.hpp"
#include "oracles.hpp"

using namespace msrf;

namespace {

ParamStore<double> init(const ParamSpecs& specs, std::uint64_t seed) {
  auto store = ParamStore<double>::initialize(specs, seed);
  // Glorot leaves biases at zero; randomise them so bias paths are exercised.
  Rng rng(seed + 1);
  for (auto& [name, t] : store) {
    if (name.ends_with(".b")) {
      for (auto& v : t.data()) v = rng.uniform(-0.5, 0.5);
    }
  }
  return store;
}

Tensor<double> clr_ref(const ParamStore<double>& p, const std::string& prefix, const Tensor<double>& x, double slope) {
  return oracle::map(oracle::conv2d(x, p.at(prefix + ".w"), p.at(prefix + ".b"), 1, true),
                     [slope](double v) { return oracle::leaky(v, slope); });
}

Tensor<double> se_ref(const ParamStore<double>& p, const std::string& prefix, const Tensor<double>& x) {
  auto hidden = oracle::map(oracle::dense(oracle::global_avg(x), p.at(prefix + ".fc1.w"), p.at(prefix + ".fc1.b")),
                            [](double v) { return std::max(v, 0.0); });
  auto s = oracle::map(oracle::dense(hidden, p.at(prefix + ".fc2.w"), p.at(prefix + ".fc2.b")), oracle::sigmoid);
  return oracle::scale_channels(x, s);
}

Tensor<double> conv1(const ParamStore<double>& p, const std::string& prefix, const Tensor<double>& x,
                     std::size_t stride = 1) {
  return oracle::conv2d(x, p.at(prefix + ".w"), p.at(prefix + ".b"), stride, true);
}

}  // namespace

TEST_CASE("CLR is a same-padded 3x3 conv followed by LeakyReLU") {
  Rng rng(1);
  for (int trial = 0; trial < 5; ++trial) {
    ParamSpecs specs;
    const std::size_t cin = 1 + rng.below(4), cout = 1 + rng.below(4);
    clr_params(specs, "c", cin, cout);
    const auto p = init(specs, 10 + trial);
    const auto x = oracle::random_tensor({2, cin, 6, 5}, rng);
    Graph<double> g(p, false);
    const auto y = clr(g, "c", g.input(x), 0.01);
    CHECK(y.shape() == Shape{2, cout, 6, 5});
    CHECK(oracle::max_abs_diff(y.value(), clr_ref(p, "c", x, 0.01)) < 1e-12);
  }
}

TEST_CASE("squeeze-excitation matches composition oracle") {
  Rng rng(2);
  ParamSpecs specs;
  se_params(specs, "se", 8, 4);
  CHECK(specs.size() == 4);
  const auto p = init(specs, 3);
  const auto x = oracle::random_tensor({3, 8, 4, 4}, rng);
  Graph<double> g(p, false);
  CHECK(oracle::max_abs_diff(se_block(g, "se", g.input(x)).value(), se_ref(p, "se", x)) < 1e-12);
  ParamSpecs bad;
  CHECK_THROWS_AS(se_params(bad, "se", 6, 4), ConfigError);
}

TEST_CASE("residual block adds two CLRs to its input") {
  Rng rng(3);
  ParamSpecs specs;
  residual_params(specs, "rb", 3);
  const auto p = init(specs, 4);
  const auto x = oracle::random_tensor({1, 3, 5, 5}, rng);
  Graph<double> g(p, false);
  const auto expect = oracle::add(x, clr_ref(p, "rb.clr2", clr_ref(p, "rb.clr1", x, 0.2), 0.2));
  CHECK(oracle::max_abs_diff(residual_block(g, "rb", g.input(x), 0.2).value(), expect) < 1e-12);
}

TEST_CASE("gated convolution gates the shape stream by a sigmoid map") {
  Rng rng(4);
  ParamSpecs specs;
  gated_conv_params(specs, "gc", 3, 5);
  const auto p = init(specs, 5);
  const auto s = oracle::random_tensor({2, 3, 6, 6}, rng);
  const auto x = oracle::random_tensor({2, 5, 6, 6}, rng);
  Graph<double> g(p, false);
  const auto out = gated_conv(g, "gc", g.input(s), g.input(x), 0.01);
  const auto alpha = oracle::map(conv1(p, "gc.gate", oracle::concat({s, x})), oracle::sigmoid);
  const auto gated = oracle::mul_map(s, alpha);
  const auto expect = oracle::add(gated, clr_ref(p, "gc.rb.clr2", clr_ref(p, "gc.rb.clr1", gated, 0.01), 0.01));
  CHECK(out.alpha.shape() == Shape{2, 1, 6, 6});
  CHECK(oracle::max_abs_diff(out.alpha.value(), alpha) < 1e-12);
  CHECK(oracle::max_abs_diff(out.shape.value(), expect) < 1e-12);
  for (double a : out.alpha.value().data()) CHECK((a > 0.0 && a < 1.0));
  CHECK_THROWS_AS(gated_conv(g, "gc", g.input(s), g.input(oracle::random_tensor({2, 5, 3, 3}, rng)), 0.01),
                  UsageError);
}

TEST_CASE("attention gate matches composition oracle at the skip resolution") {
  Rng rng(5);
  for (int trial = 0; trial < 4; ++trial) {
    const std::size_t cx = 1 + rng.below(4), cd = 1 + rng.below(4), h = 2 * (1 + rng.below(4));
    ParamSpecs specs;
    attention_gate_params(specs, "ag", cx, cd);
    const auto p = init(specs, 6 + trial);
    const auto x = oracle::random_tensor({2, cx, h, h}, rng);
    const auto d = oracle::random_tensor({2, cd, h / 2, h / 2}, rng);
    Graph<double> g(p, false);
    const auto y = attention_gate(g, "ag", g.input(x), g.input(d));
    const auto inner = oracle::add(conv1(p, "ag.theta", x, 2), conv1(p, "ag.phi", d));
    const auto psi = oracle::map(conv1(p, "ag.psi", inner), oracle::sigmoid);
    const auto expect = oracle::conv_transpose2d(psi, p.at("ag.omega.w"), p.at("ag.omega.b"), 2);
    REQUIRE(y.shape() == Shape{2, 1, h, h});
    CHECK(oracle::max_abs_diff(y.value(), expect) < 1e-12);
  }
  ParamSpecs specs;
  attention_gate_params(specs, "ag", 2, 2);
  const auto p = init(specs, 1);
  Graph<double> g(p, false);
  CHECK_THROWS_AS(attention_gate(g, "ag", g.input(Tensor<double>({1, 2, 8, 8})), g.input(Tensor<double>({1, 2, 8, 8}))),
                  ShapeError);
}

TEST_CASE("block parameter gradients agree with finite differences") {
  ParamSpecs specs;
  se_params(specs, "se", 4, 2);
  gated_conv_params(specs, "gc", 2, 4);
  attention_gate_params(specs, "ag", 4, 3);
  const auto p = init(specs, 7);
  Rng rng(8);
  const auto s = oracle::random_tensor({2, 2, 4, 4}, rng);
  const auto x = oracle::random_tensor({2, 4, 4, 4}, rng);
  const auto d = oracle::random_tensor({2, 3, 2, 2}, rng);
  auto build = [&](Graph<double>& g) {
    auto a = se_block(g, "se", g.input(x));
    auto b = gated_conv(g, "gc", g.input(s), a, 0.01).shape;
    auto c = mul_map(b, attention_gate(g, "ag", a, g.input(d)));
    return sum(hadamard(c, c));
  };
  Graph<double> g(p, true);
  const auto grads = g.backward(build(g));
  const auto report = gradcheck_params(
      p,
      [&](const ParamStore<double>& q) {
        Graph<double> h(q, true, 0, false);
        return build(h).value()[0];
      },
      grads, 60, 1e-4, 9);
  INFO("worst " << report.worst_error());
  CHECK(report.passed());
}
