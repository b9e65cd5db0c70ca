#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "msrf/data.hpp"
#include "msrf/gradcheck.hpp"
#include "msrf/metrics.hpp"
#include "msrf/network.hpp"
#include "msrf/optim.hpp"

namespace msrf {

// ---- run configuration ----

enum class Precision { f64, f32 };

struct RunConfig {
  MsrfNetConfig net;
  std::size_t epochs = 200;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  double lr = 1e-4;
  std::string data;
  std::string out;
  std::size_t checkpoint_every = 0;  // 0: only best.ckpt and last.ckpt
  Precision precision = Precision::f64;
  bool split = true;  // false: train on everything and validate on the training set
  bool augment = false;

  void validate() const {
    net.validate();
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    AdamConfig{lr}.validate();
  }
};

/// Named ablation settings applied on top of the current network config.
inline void apply_ablation(MsrfNetConfig& net, const std::string& name) {
  if (name == "full") {
    net.subnet_variant = SubnetVariant::full;
  } else if (name == "no_subnet") {
    net.subnet_variant = SubnetVariant::no_subnet;
  } else if (name == "subset") {
    net.subnet_variant = SubnetVariant::subset;
  } else if (name == "no_cross_23") {
    net.subnet_variant = SubnetVariant::no_cross_23;
  } else if (name == "no_scaling") {
    net.subnet_variant = SubnetVariant::no_scaling;
  } else if (name == "no_deep_supervision") {
    net.deep_supervision = false;
  } else if (name == "no_decoder_attention") {
    net.decoder_attention = false;
  } else if (name == "no_shape_stream") {
    net.shape_stream = false;
  } else if (name == "bce_only") {
    net.loss.mode = LossMode::bce_only;
  } else if (name == "dice_only") {
    net.loss.mode = LossMode::dice_only;
  } else {
    throw ConfigError("unknown ablation '" + name + "'");
  }
}

inline const std::vector<std::string>& ablation_names() {
  static const std::vector<std::string> names{
      "full",    "no_subnet",           "subset",        "no_cross_23",     "no_scaling",
      "no_deep_supervision", "no_decoder_attention", "no_shape_stream", "bce_only", "dice_only"};
  return names;
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  unsigned long long x = 0;
  try {
    if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
    x = std::stoull(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return x;
}

inline double parse_real(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double x = 0.0;
  try {
    x = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return x;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

template <std::size_t N>
std::array<std::size_t, N> parse_list(const std::string& key, const std::string& v) {
  std::array<std::size_t, N> out{};
  std::stringstream ss(v);
  std::string item;
  std::size_t n = 0;
  while (std::getline(ss, item, ',')) {
    if (n == N) throw ConfigError(key + ": expected " + std::to_string(N) + " values");
    out[n++] = parse_uint(key, trim(item));
  }
  if (n != N) throw ConfigError(key + ": expected " + std::to_string(N) + " values");
  return out;
}

}  // namespace detail

/// Flat `key = value` lines; `#` starts a comment. `preset` (toy,
/// gradcheck_toy, paper_scale) is applied before every other key regardless
/// of position, `ablation` right after it. Unknown or repeated keys are errors.
inline RunConfig parse_run_config(const std::string& text, const std::string& source = "config") {
  std::vector<std::pair<std::string, std::string>> entries;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    std::string key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(source + ":" + std::to_string(lineno) + ": empty key");
    for (const auto& [k, _] : entries) {
      if (k == key) throw ConfigError(source + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
    }
    entries.emplace_back(std::move(key), std::move(value));
  }

  RunConfig cfg;
  auto find = [&](const char* key) -> const std::string* {
    for (const auto& [k, v] : entries) {
      if (k == key) return &v;
    }
    return nullptr;
  };
  if (const auto* p = find("preset")) {
    if (*p == "toy") cfg.net = MsrfNetConfig::toy();
    else if (*p == "gradcheck_toy") cfg.net = MsrfNetConfig::gradcheck_toy();
    else if (*p == "paper_scale") cfg.net = MsrfNetConfig::paper_scale();
    else throw ConfigError("unknown preset '" + *p + "'");
  }
  if (const auto* a = find("ablation")) apply_ablation(cfg.net, *a);

  MsrfNetConfig& n = cfg.net;
  for (const auto& [key, v] : entries) {
    if (key == "preset" || key == "ablation") continue;
    if (key == "in_channels") n.in_channels = detail::parse_uint(key, v);
    else if (key == "height") n.height = detail::parse_uint(key, v);
    else if (key == "width") n.width = detail::parse_uint(key, v);
    else if (key == "widths") n.widths = detail::parse_list<4>(key, v);
    else if (key == "growth") n.growth = detail::parse_list<3>(key, v);
    else if (key == "msrf_layers") n.msrf_layers = detail::parse_uint(key, v);
    else if (key == "w") n.w = detail::parse_real(key, v);
    else if (key == "leaky_slope") n.leaky_slope = detail::parse_real(key, v);
    else if (key == "dropout") n.dropout = detail::parse_real(key, v);
    else if (key == "se_reduction") n.se_reduction = detail::parse_uint(key, v);
    else if (key == "shape_channels") n.shape_channels = detail::parse_uint(key, v);
    else if (key == "shape_stream") n.shape_stream = detail::parse_bool(key, v);
    else if (key == "deep_supervision") n.deep_supervision = detail::parse_bool(key, v);
    else if (key == "decoder_attention") n.decoder_attention = detail::parse_bool(key, v);
    else if (key == "subnet_variant") n.subnet_variant = parse_subnet_variant(v);
    else if (key == "loss_mode") n.loss.mode = parse_loss_mode(v);
    else if (key == "lambda1") n.loss.lambda1 = detail::parse_real(key, v);
    else if (key == "lambda2") n.loss.lambda2 = detail::parse_real(key, v);
    else if (key == "alpha") n.loss.alpha = detail::parse_real(key, v);
    else if (key == "beta1") n.loss.beta1 = detail::parse_real(key, v);
    else if (key == "beta2") n.loss.beta2 = detail::parse_real(key, v);
    else if (key == "gamma") n.loss.gamma = detail::parse_real(key, v);
    else if (key == "epochs") cfg.epochs = detail::parse_uint(key, v);
    else if (key == "batch_size") cfg.batch_size = detail::parse_uint(key, v);
    else if (key == "seed") cfg.seed = detail::parse_uint(key, v);
    else if (key == "lr") cfg.lr = detail::parse_real(key, v);
    else if (key == "data") cfg.data = v;
    else if (key == "out") cfg.out = v;
    else if (key == "checkpoint_every") cfg.checkpoint_every = detail::parse_uint(key, v);
    else if (key == "precision") {
      if (v == "double") cfg.precision = Precision::f64;
      else if (v == "float") cfg.precision = Precision::f32;
      else throw ConfigError("precision: expected double or float, got '" + v + "'");
    } else if (key == "split") {
      if (v == "standard") cfg.split = true;
      else if (v == "none") cfg.split = false;
      else throw ConfigError("split: expected standard or none, got '" + v + "'");
    } else if (key == "augment") cfg.augment = detail::parse_bool(key, v);
    else throw ConfigError(source + ": unknown key '" + key + "'");
  }
  cfg.validate();
  return cfg;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  RunConfig cfg = parse_run_config(ss.str(), path.string());
  // Relative paths inside a config resolve against the config's directory.
  const auto base = path.parent_path();
  if (!cfg.data.empty() && std::filesystem::path(cfg.data).is_relative()) cfg.data = (base / cfg.data).string();
  if (!cfg.out.empty() && std::filesystem::path(cfg.out).is_relative()) cfg.out = (base / cfg.out).string();
  return cfg;
}

// ---- batching ----

/// Stacks samples into [B, C, H, W]; grayscale is replicated for C = 3.
template <std::floating_point T>
Tensor<T> stack_images(const std::vector<const Sample*>& batch, std::size_t channels) {
  const std::size_t h = batch.front()->image.dim(1), w = batch.front()->image.dim(2);
  Tensor<T> out({batch.size(), channels, h, w});
  for (std::size_t b = 0; b < batch.size(); ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      T* dst = out.ptr() + (b * channels + c) * h * w;
      for (std::size_t i = 0; i < h * w; ++i) dst[i] = static_cast<T>(batch[b]->image[i]);
    }
  }
  return out;
}

template <std::floating_point T>
Tensor<T> stack_masks(const std::vector<const Sample*>& batch) {
  const std::size_t h = batch.front()->mask.dim(1), w = batch.front()->mask.dim(2);
  Tensor<T> out({batch.size(), 1, h, w});
  for (std::size_t b = 0; b < batch.size(); ++b) {
    for (std::size_t i = 0; i < h * w; ++i) out[b * h * w + i] = static_cast<T>(batch[b]->mask[i]);
  }
  return out;
}

inline void require_sample_size(const std::vector<Sample>& data, const MsrfNetConfig& net) {
  for (const auto& s : data) {
    if (s.image.dim(1) != net.height || s.image.dim(2) != net.width) {
      throw ConfigError("sample " + s.id + " is " + std::to_string(s.image.dim(1)) + "x" +
                        std::to_string(s.image.dim(2)) + ", config expects " + std::to_string(net.height) +
                        "x" + std::to_string(net.width));
    }
  }
}

// ---- inference and evaluation ----

/// Probability maps [B, 1, H, W] (and edge maps when the shape stream is on),
/// computed without dropout and without recording gradients.
template <std::floating_point T>
struct Prediction {
  Tensor<T> mask;
  std::optional<Tensor<T>> edge;
};

template <std::floating_point T>
Prediction<T> predict_batch(const ParamStore<T>& params, const Tensor<T>& images, const MsrfNetConfig& net) {
  Graph<T> g(params, false, 0, false);
  const auto out = msrfnet_forward(g, images, net);
  Prediction<T> p{out.pred.value(), std::nullopt};
  if (out.edge) p.edge = out.edge->value();
  return p;
}

/// Per-image metrics of thresholded predictions, in dataset order.
template <std::floating_point T>
MetricsReport evaluate_samples(const ParamStore<T>& params, const std::vector<Sample>& data,
                               const MsrfNetConfig& net, std::size_t batch_size = 4) {
  std::vector<ImageMetrics> rows;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    std::vector<const Sample*> batch;
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) batch.push_back(&data[i]);
    const Tensor<T> images = stack_images<T>(batch, net.in_channels);
    const Tensor<double> probs = predict_batch(params, images, net).mask.template cast<double>();
    const Tensor<double> bin = binarize(probs);
    const std::size_t hw = net.height * net.width;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto counts = confusion_counts<double>(std::span(bin.ptr() + b * hw, hw),
                                                   std::span(batch[b]->mask.ptr(), hw));
      rows.push_back(image_metrics(batch[b]->id, counts));
    }
  }
  return MetricsReport::from_rows(std::move(rows));
}

// ---- training ----

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_dsc = 0.0;
};

inline std::string format_epoch(const EpochRecord& r) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%zu,%.10f,%.10f\n", r.epoch, r.train_loss, r.val_dsc);
  return buf;
}

template <std::floating_point T>
struct TrainResult {
  ParamStore<T> last;
  ParamStore<T> best;
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_val_dsc = -1.0;
};

/// Called after every epoch; returning false ends training after that epoch.
using EpochCallback = std::function<bool(const EpochRecord&)>;

/// Mini-batch Adam on the total loss. Shuffling, dropout masks and
/// augmentation draw from streams derived from cfg.seed, so a run is a pure
/// function of its config and data when MSRF_THREADS=1. When cfg.out is set
/// the log and checkpoints are written there.
template <std::floating_point T>
TrainResult<T> train(const RunConfig& cfg, const std::vector<Sample>& data, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (data.empty()) throw ConfigError("training set is empty");
  require_sample_size(data, cfg.net);
  const ParamSpecs specs = msrfnet_param_specs(cfg.net);

  std::vector<Sample> train_set, val_set;
  if (cfg.split) {
    DatasetSplit parts = split_dataset(data, cfg.seed);
    train_set = std::move(parts.train);
    val_set = std::move(parts.val);
  } else {
    train_set = data;
  }
  // Too few samples for a validation share: select on the training set.
  const std::vector<Sample>& selection = val_set.empty() ? train_set : val_set;

  namespace fs = std::filesystem;
  const bool write = !cfg.out.empty();
  if (write) fs::create_directories(cfg.out);

  TrainResult<T> result;
  result.last = ParamStore<double>::initialize(specs, derive_seed(cfg.seed, "init")).template cast<T>();
  Adam<T> adam(AdamConfig{cfg.lr});
  std::string log = "epoch,train_loss,val_dsc\n";

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const std::string tag = std::to_string(epoch);
    std::vector<std::size_t> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffler(derive_seed(cfg.seed, "shuffle/" + tag));
    shuffle(order.begin(), order.end(), shuffler);

    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      std::vector<Sample> augmented;
      std::vector<const Sample*> batch;
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      augmented.reserve(stop - start);
      for (std::size_t i = start; i < stop; ++i) {
        const Sample& s = train_set[order[i]];
        if (cfg.augment) {
          const std::uint64_t aseed = derive_seed(cfg.seed, "augment/" + tag + "/" + s.id);
          Rng pick(aseed);
          std::vector<AugmentOp> ops;
          for (AugmentOp op : {AugmentOp::hflip, AugmentOp::vflip, AugmentOp::random_crop}) {
            if (pick.uniform() < 0.5) ops.push_back(op);
          }
          // rot90 keeps the frame only for square inputs
          if (cfg.net.height == cfg.net.width) {
            for (std::uint64_t r = pick.below(4); r > 0; --r) ops.push_back(AugmentOp::rot90);
          }
          augmented.push_back(augment(s, pick.next(), ops));
          batch.push_back(&augmented.back());
        } else {
          batch.push_back(&s);
        }
      }
      const Tensor<T> images = stack_images<T>(batch, cfg.net.in_channels);
      const Tensor<T> masks = stack_masks<T>(batch);
      const Tensor<T> edges = boundary_map(masks);
      Graph<T> g(result.last, true, derive_seed(cfg.seed, "dropout/" + tag + "/" + std::to_string(batches)));
      const auto loss = msrfnet_loss(g, images, masks, edges, cfg.net);
      const T value = loss.total.value()[0];
      if (!std::isfinite(static_cast<double>(value))) {
        throw NumericError("non-finite loss at epoch " + tag);
      }
      const GradMap<T> grads = g.backward(loss.total);
      adam.step(result.last, grads);
      loss_sum += static_cast<double>(value);
      ++batches;
    }

    EpochRecord rec{epoch, loss_sum / static_cast<double>(batches),
                    evaluate_samples(result.last, selection, cfg.net).dsc.mean};
    result.history.push_back(rec);
    log += format_epoch(rec);
    if (rec.val_dsc > result.best_val_dsc) {
      result.best_val_dsc = rec.val_dsc;
      result.best_epoch = epoch;
      result.best = result.last;
      if (write) save_checkpoint(result.best, fs::path(cfg.out) / "best.ckpt");
    }
    if (write) {
      detail::write_file_atomic(fs::path(cfg.out) / "train_log.csv", log);
      if (cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0) {
        char name[32];
        std::snprintf(name, sizeof name, "epoch_%04zu.ckpt", epoch);
        save_checkpoint(result.last, fs::path(cfg.out) / name);
      }
    }
    if (on_epoch && !on_epoch(rec)) break;
  }
  if (write) save_checkpoint(result.last, fs::path(cfg.out) / "last.ckpt");
  return result;
}

// ---- gradient check of the full network ----

/// Checks parameter gradients of the total loss on two synthetic samples at
/// the configured size. Dropout stays on with a fixed seed, so every forward
/// pass sees the same masks.
inline GradcheckReport network_gradcheck(const MsrfNetConfig& net, std::size_t samples, double tolerance,
                                         std::uint64_t seed = 0) {
  net.validate();
  if (net.height != net.width) throw ConfigError("gradcheck: needs a square input size");
  const ParamSpecs specs = msrfnet_param_specs(net);
  ParamStore<double> params = ParamStore<double>::initialize(specs, derive_seed(seed, "init"));
  // Zero biases leave many deep pre-activations within a step of the leaky
  // ReLU kink, where central differences are meaningless. Random biases move
  // the check to a generic point.
  Rng bias_rng(derive_seed(seed, "bias"));
  for (auto& [name, t] : params) {
    if (name.ends_with(".b")) {
      for (auto& v : t.data()) v = bias_rng.uniform(-0.2, 0.2);
    }
  }
  const auto data = synth_dataset(2, net.height, derive_seed(seed, "data"));
  std::vector<const Sample*> batch{&data[0], &data[1]};
  const Tensor<double> images = stack_images<double>(batch, net.in_channels);
  const Tensor<double> masks = stack_masks<double>(batch);
  const Tensor<double> edges = boundary_map(masks);
  const std::uint64_t dropout_seed = derive_seed(seed, "dropout");

  auto loss_of = [&](const ParamStore<double>& p) {
    Graph<double> g(p, true, dropout_seed, false);
    return msrfnet_loss(g, images, masks, edges, net).total.value()[0];
  };
  Graph<double> g(params, true, dropout_seed);
  const auto loss = msrfnet_loss(g, images, masks, edges, net);
  const GradMap<double> grads = g.backward(loss.total);
  return gradcheck_params(params, loss_of, grads, samples, tolerance, seed);
}

inline std::string format_gradcheck(const GradcheckReport& r) {
  std::string out;
  char buf[256];
  for (const auto& e : r.entries) {
    std::snprintf(buf, sizeof buf, "%-28s [%6zu]  analytic % .8e  numeric % .8e  rel_err %.3e\n", e.name.c_str(),
                  e.index, e.analytic, e.numeric, e.error);
    out += buf;
  }
  if (const auto* w = r.worst()) {
    std::snprintf(buf, sizeof buf, "worst rel_err %.3e at %s[%zu] (tol %.1e): %s\n", w->error, w->name.c_str(),
                  w->index, r.tolerance, r.passed() ? "PASS" : "FAIL");
    out += buf;
  }
  return out;
}

}  // namespace msrf
