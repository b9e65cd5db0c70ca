#include <catch2/catch_amalgamated.hpp>

#include "msrf/msrf.hpp"
#include "oracles.hpp"

using namespace msrf;

namespace {

ParamStore<double> init(const ParamSpecs& specs, std::uint64_t seed) {
  auto store = ParamStore<double>::initialize(specs, seed);
  Rng rng(seed + 1);
  for (auto& [name, t] : store) {
    if (name.ends_with(".b")) {
      for (auto& v : t.data()) v = rng.uniform(-0.3, 0.3);
    }
  }
  return store;
}

// Straight transcription of the dense dual-stream recurrence with oracle
// primitives: every stage concatenates the stream's previous stage, the
// other stream's previous stage resampled, and all earlier stages.
std::pair<Tensor<double>, Tensor<double>> dsdf_ref(const ParamStore<double>& p, const Tensor<double>& xh,
                                                   const Tensor<double>& xl, double slope, double w) {
  auto P = [&](const std::string& s) -> const Tensor<double>& { return p.at("blk." + s); };
  auto clr = [&](const std::string& s, const Tensor<double>& x) {
    return oracle::map(oracle::conv2d(x, P(s + ".w"), P(s + ".b"), 1, true),
                       [slope](double v) { return oracle::leaky(v, slope); });
  };
  std::vector<Tensor<double>> H{xh}, L{xl};
  for (int d = 1; d <= 5; ++d) {
    const std::string ds = std::to_string(d);
    const auto up = oracle::conv_transpose2d(L[d - 1], P("h.up" + ds + ".w"), P("h.up" + ds + ".b"), 2);
    const auto down = oracle::conv2d(H[d - 1], P("l.down" + ds + ".w"), P("l.down" + ds + ".b"), 2, true);
    std::vector<Tensor<double>> ph{H[d - 1], up}, pl{L[d - 1], down};
    for (int j = d - 2; j >= 0; --j) {
      ph.push_back(H[j]);
      pl.push_back(L[j]);
    }
    H.push_back(clr("h.clr" + ds, oracle::concat(ph)));
    L.push_back(clr("l.clr" + ds, oracle::concat(pl)));
  }
  auto fh = oracle::conv2d(H.back(), P("h.fuse.w"), P("h.fuse.b"), 1, true);
  auto fl = oracle::conv2d(L.back(), P("l.fuse.w"), P("l.fuse.b"), 1, true);
  return {oracle::add(xh, fh, w), oracle::add(xl, fl, w)};
}

}  // namespace

TEST_CASE("DSDF owns 22 weight tensors with dense stage widths") {
  const DsdfConfig cfg{8, 16, 16, 0.4};
  const auto specs = dsdf_param_shapes(cfg, "blk");
  std::size_t weights = 0;
  for (const auto& s : specs) weights += s.name.ends_with(".w");
  CHECK(weights == 22);
  CHECK(specs.size() == 44);
  auto find = [&](const std::string& name) {
    for (const auto& s : specs)
      if (s.name == name) return s.shape;
    FAIL("missing " << name);
    return Shape{};
  };
  for (std::size_t d = 1; d <= 5; ++d) {
    const std::string ds = std::to_string(d);
    CHECK(find("blk.h.clr" + ds + ".w") == Shape{16, 8 + (d - 1) * 16 + 16, 3, 3});
    CHECK(find("blk.l.clr" + ds + ".w") == Shape{16, 16 + (d - 1) * 16 + 16, 3, 3});
  }
  CHECK(find("blk.h.up1.w") == Shape{16, 16, 3, 3});
  CHECK(find("blk.l.down1.w") == Shape{16, 8, 3, 3});
  CHECK(find("blk.h.fuse.w") == Shape{8, 16, 1, 1});
  CHECK(find("blk.l.fuse.w") == Shape{16, 16, 1, 1});
}

TEST_CASE("DSDF stage sources list previous stage, cross-scale input, then history") {
  const auto s3 = dsdf_stage_sources(3);
  REQUIRE(s3.size() == 4);
  CHECK((!s3[0].cross && s3[0].index == 2));
  CHECK((s3[1].cross && s3[1].index == 2));
  CHECK((!s3[2].cross && s3[2].index == 1));
  CHECK((!s3[3].cross && s3[3].index == 0));
  CHECK(dsdf_stage_sources(1).size() == 2);
  CHECK_THROWS_AS(dsdf_stage_sources(6), UsageError);
}

TEST_CASE("DSDF forward matches transcribed recurrence") {
  Rng rng(3);
  for (int trial = 0; trial < 3; ++trial) {
    const std::size_t ch = 1 + rng.below(3), cl = 1 + rng.below(3), k = 1 + rng.below(3);
    const DsdfConfig cfg{ch, cl, k, 0.4};
    const auto p = init(dsdf_param_shapes(cfg, "blk"), 20 + trial);
    const auto xh = oracle::random_tensor({2, ch, 8, 8}, rng);
    const auto xl = oracle::random_tensor({2, cl, 4, 4}, rng);
    Graph<double> g(p, false);
    const auto out = dsdf_forward(g, "blk", g.input(xh), g.input(xl), cfg, 0.01);
    const auto [rh, rl] = dsdf_ref(p, xh, xl, 0.01, 0.4);
    CHECK(out.high.shape() == xh.shape());
    CHECK(out.low.shape() == xl.shape());
    CHECK(oracle::max_abs_diff(out.high.value(), rh) < 1e-12);
    CHECK(oracle::max_abs_diff(out.low.value(), rl) < 1e-12);
  }
}

TEST_CASE("DSDF is an exact identity at w = 0") {
  Rng rng(4);
  const DsdfConfig cfg{3, 5, 4, 0.0};
  const auto p = init(dsdf_param_shapes(cfg, "blk"), 5);
  const auto xh = oracle::random_tensor({1, 3, 8, 8}, rng);
  const auto xl = oracle::random_tensor({1, 5, 4, 4}, rng);
  Graph<double> g(p, false);
  const auto out = dsdf_forward(g, "blk", g.input(xh), g.input(xl), cfg, 0.01);
  CHECK(out.high.value() == xh);
  CHECK(out.low.value() == xl);
}

TEST_CASE("DSDF rejects mismatched inputs and configs") {
  const DsdfConfig cfg{2, 2, 2, 0.4};
  const auto p = init(dsdf_param_shapes(cfg, "blk"), 6);
  Graph<double> g(p, false);
  CHECK_THROWS_AS(dsdf_forward(g, "blk", g.input(Tensor<double>({1, 2, 8, 8})), g.input(Tensor<double>({1, 2, 8, 8})), cfg, 0.01),
                  ShapeError);
  CHECK_THROWS_AS(dsdf_forward(g, "blk", g.input(Tensor<double>({1, 3, 8, 8})), g.input(Tensor<double>({1, 2, 4, 4})), cfg, 0.01),
                  ShapeError);
  CHECK_THROWS_AS(dsdf_param_shapes(DsdfConfig{2, 2, 2, 1.5}), ConfigError);
  CHECK_THROWS_AS(dsdf_param_shapes(DsdfConfig{2, 2, 0, 0.4}), ConfigError);
}

TEST_CASE("DSDF parameter gradients agree with finite differences") {
  const DsdfConfig cfg{2, 3, 2, 0.4};
  const auto p = init(dsdf_param_shapes(cfg, "blk"), 7);
  Rng rng(8);
  const auto xh = oracle::random_tensor({2, 2, 4, 4}, rng);
  const auto xl = oracle::random_tensor({2, 3, 2, 2}, rng);
  const auto r1 = oracle::random_tensor({2, 2, 4, 4}, rng);
  const auto r2 = oracle::random_tensor({2, 3, 2, 2}, rng);
  auto build = [&](Graph<double>& g) {
    const auto out = dsdf_forward(g, "blk", g.input(xh), g.input(xl), cfg, 0.01);
    return add(sum(hadamard(out.high, g.input(r1))), sum(hadamard(out.low, g.input(r2))));
  };
  Graph<double> g(p, true);
  const auto grads = g.backward(build(g));
  const auto report = gradcheck_params(
      p,
      [&](const ParamStore<double>& q) {
        Graph<double> h(q, true, 0, false);
        return build(h).value()[0];
      },
      grads, 80, 1e-4, 3);
  INFO("worst " << report.worst_error());
  CHECK(report.passed());
}
