#include <catch2/catch_amalgamated.hpp>

#include "msrf/msrf.hpp"
#include "oracles.hpp"

using namespace msrf;

namespace {

MsrfNetConfig tiny() {
  MsrfNetConfig c = MsrfNetConfig::gradcheck_toy();
  c.growth = {4, 4, 4};
  c.msrf_layers = 4;
  return c;
}

Tensor<double> images(std::size_t n, const MsrfNetConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  return oracle::random_tensor({n, c.in_channels, c.height, c.width}, rng, 0.0, 1.0);
}

ParamStore<double> init(const MsrfNetConfig& c, std::uint64_t seed) {
  auto p = ParamStore<double>::initialize(msrfnet_param_specs(c), seed);
  Rng rng(seed + 1);
  for (auto& [name, t] : p) {
    if (name.ends_with(".b")) {
      for (auto& v : t.data()) v = rng.uniform(-0.2, 0.2);
    }
  }
  return p;
}

}  // namespace

TEST_CASE("parameter report groups every tensor") {
  for (const auto& cfg : {MsrfNetConfig::toy(), MsrfNetConfig::gradcheck_toy(), MsrfNetConfig::paper_scale()}) {
    std::size_t total = 0;
    for (const auto& [group, count] : parameter_report(cfg)) {
      CHECK(count > 0);
      total += count;
    }
    CHECK(total == count_elements(msrfnet_param_specs(cfg)));
  }
}

TEST_CASE("toggles remove their parameters") {
  auto base = MsrfNetConfig::toy();
  const auto full = count_elements(msrfnet_param_specs(base));
  auto c = base;
  c.shape_stream = false;
  CHECK(count_elements(msrfnet_param_specs(c)) < full);
  c = base;
  c.deep_supervision = false;
  CHECK(count_elements(msrfnet_param_specs(c)) < full);
  c = base;
  c.decoder_attention = false;
  CHECK(count_elements(msrfnet_param_specs(c)) < full);
  c = base;
  c.subnet_variant = SubnetVariant::no_subnet;
  CHECK(count_elements(msrfnet_param_specs(c)) < full);
}

TEST_CASE("forward produces probability maps of the input size") {
  const auto cfg = tiny();
  const auto p = init(cfg, 1);
  Graph<double> g(p, false);
  const auto out = msrfnet_forward(g, images(2, cfg, 2), cfg);
  const Shape expect{2, 1, cfg.height, cfg.width};
  CHECK(out.pred.shape() == expect);
  REQUIRE(out.ds0);
  REQUIRE(out.ds1);
  REQUIRE(out.edge);
  for (const auto* v : {&out.pred, &*out.ds0, &*out.ds1, &*out.edge}) {
    CHECK(v->shape() == expect);
    for (double x : v->value().data()) CHECK((x > 0.0 && x < 1.0));
  }
}

TEST_CASE("every ablation toggle runs forward and backward") {
  for (const auto& name : ablation_names()) {
    INFO(name);
    auto cfg = tiny();
    apply_ablation(cfg, name);
    const auto p = init(cfg, 3);
    Graph<double> g(p, true, 4);
    const auto x = images(2, cfg, 5);
    const auto y = binarize(images(2, cfg, 6).reshaped({2, 1, cfg.height, cfg.width}));
    const auto loss = msrfnet_loss(g, x, y, boundary_map(y), cfg);
    CHECK(std::isfinite(loss.total.value()[0]));
    const auto grads = g.backward(loss.total);
    CHECK(grads.size() == p.size());
    CHECK(loss.ds0.has_value() == cfg.deep_supervision);
    CHECK(loss.shape.has_value() == cfg.shape_stream);
  }
}

TEST_CASE("decoder block without attention is CLR(CLR(skip ++ up(prev)))") {
  auto cfg = tiny();
  cfg.decoder_attention = false;
  ParamSpecs specs;
  decoder_block_params(specs, "dec", 4, 6, false, 4, 0);
  const auto p = ParamStore<double>::initialize(specs, 7);
  Rng rng(8);
  const auto x = oracle::random_tensor({2, 4, 8, 8}, rng);
  const auto d = oracle::random_tensor({2, 6, 4, 4}, rng);
  Graph<double> g(p, false);
  const auto out = decoder_block_forward(g, "dec", g.input(x), g.input(d), cfg);
  auto clr = [&](const std::string& s, const Tensor<double>& t) {
    return oracle::map(oracle::conv2d(t, p.at(s + ".w"), p.at(s + ".b"), 1, true),
                       [](double v) { return oracle::leaky(v, 0.01); });
  };
  const auto up = oracle::conv_transpose2d(d, p.at("dec.up.w"), p.at("dec.up.b"), 2);
  CHECK(oracle::max_abs_diff(out.value(), clr("dec.clr2", clr("dec.clr1", oracle::concat({x, up})))) < 1e-12);
}

TEST_CASE("decoder block with attention matches composition oracle") {
  const auto cfg = tiny();
  ParamSpecs specs;
  decoder_block_params(specs, "dec", 4, 6, true, 2, 3);
  auto p = ParamStore<double>::initialize(specs, 9);
  Rng rng(10);
  for (auto& [name, t] : p) {
    if (name.ends_with(".b")) {
      for (auto& v : t.data()) v = rng.uniform(-0.3, 0.3);
    }
  }
  const auto x = oracle::random_tensor({2, 4, 8, 8}, rng);
  const auto d = oracle::random_tensor({2, 6, 4, 4}, rng);
  const auto e = oracle::random_tensor({2, 3, 8, 8}, rng);
  Graph<double> g(p, false);
  const auto out = decoder_block_forward(g, "dec", g.input(x), g.input(d), cfg, std::optional(g.input(e)));

  auto conv = [&](const std::string& s, const Tensor<double>& t, std::size_t stride = 1) {
    return oracle::conv2d(t, p.at(s + ".w"), p.at(s + ".b"), stride, true);
  };
  auto clr = [&](const std::string& s, const Tensor<double>& t) {
    return oracle::map(conv(s, t), [](double v) { return oracle::leaky(v, 0.01); });
  };
  auto hidden = oracle::map(oracle::dense(oracle::global_avg(x), p.at("dec.se.fc1.w"), p.at("dec.se.fc1.b")),
                            [](double v) { return std::max(v, 0.0); });
  auto se = oracle::scale_channels(
      x, oracle::map(oracle::dense(hidden, p.at("dec.se.fc2.w"), p.at("dec.se.fc2.b")), oracle::sigmoid));
  auto spatial = oracle::map(conv("dec.spatial", x), [](double v) { return oracle::sigmoid(v) + 1.0; });
  auto d_sc = oracle::mul_map(se, spatial);
  auto psi = oracle::map(conv("dec.ag.psi", oracle::add(conv("dec.ag.theta", x, 2), conv("dec.ag.phi", d))),
                         oracle::sigmoid);
  auto ag = oracle::conv_transpose2d(psi, p.at("dec.ag.omega.w"), p.at("dec.ag.omega.b"), 2);
  auto gated = oracle::mul_map(x, ag);
  auto up = oracle::conv_transpose2d(d, p.at("dec.up.w"), p.at("dec.up.b"), 2);
  auto expect = clr("dec.clr2", oracle::concat({clr("dec.clr1", oracle::concat({d_sc, gated, up})), e}));
  CHECK(out.shape() == Shape{2, 4, 8, 8});
  CHECK(oracle::max_abs_diff(out.value(), expect) < 1e-12);
}

TEST_CASE("sobel magnitude is zero on flat images and peaks at a step edge") {
  const auto flat = sobel_magnitude(Tensor<double>({1, 1, 8, 8}, 0.7));
  for (double v : flat.data()) CHECK(v == 0.0);
  Tensor<double> step({1, 1, 6, 6});
  for (std::size_t y = 0; y < 6; ++y)
    for (std::size_t x = 3; x < 6; ++x) step.at(0, 0, y, x) = 1.0;
  const auto m = sobel_magnitude(step);
  for (std::size_t y = 0; y < 6; ++y) {
    CHECK(m.at(0, 0, y, 0) == 0.0);
    CHECK(m.at(0, 0, y, 2) == 1.0);
    CHECK(m.at(0, 0, y, 3) == 1.0);
    CHECK(m.at(0, 0, y, 5) == 0.0);
  }
}

TEST_CASE("network input validation") {
  const auto cfg = tiny();
  const auto p = init(cfg, 11);
  Graph<double> g(p, false);
  auto bad = images(1, cfg, 12);
  bad[0] = 1.5;
  CHECK_THROWS_AS(msrfnet_forward(g, bad, cfg), UsageError);
  CHECK_THROWS_AS(msrfnet_forward(g, Tensor<double>({1, 1, 24, 24}), cfg), ShapeError);
  auto c = cfg;
  c.height = 20;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = cfg;
  c.in_channels = 2;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("full network gradients agree with finite differences") {
  const auto report = network_gradcheck(MsrfNetConfig::gradcheck_toy(), 40, 1e-4, 13);
  INFO(format_gradcheck(report));
  CHECK(report.entries.size() == 40);
  CHECK(report.passed());
}
