// Command-line front end: synth, train, eval, predict, gradcheck.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "msrf/msrf.hpp"

namespace fs = std::filesystem;
using namespace msrf;

namespace {

template <std::floating_point T>
ParamStore<T> load_params(const RunConfig& cfg, const std::string& checkpoint) {
  return load_checkpoint<T>(checkpoint, msrfnet_param_specs(cfg.net));
}

template <std::floating_point T>
void run_train(const RunConfig& cfg) {
  if (cfg.data.empty()) throw ConfigError("config has no 'data' directory");
  if (cfg.out.empty()) throw ConfigError("config has no 'out' directory");
  const auto data = load_dataset(cfg.data);
  const auto result = train<T>(cfg, data, [](const EpochRecord& r) {
    std::printf("%s", format_epoch(r).c_str());
    std::fflush(stdout);
    return true;
  });
  std::printf("best epoch %zu, val dsc %.4f\n", result.best_epoch, result.best_val_dsc);
}

template <std::floating_point T>
void run_eval(const RunConfig& cfg, const std::string& checkpoint, const std::string& data_dir,
              const std::string& out) {
  const auto data = load_dataset(data_dir);
  if (data.empty()) throw IoError("no images in " + data_dir);
  require_sample_size(data, cfg.net);
  const ParamStore<T> params = load_params<T>(cfg, checkpoint);
  MetricsReport report = evaluate_samples(params, data, cfg.net);
  const Tensor<T> one = stack_images<T>({&data.front()}, cfg.net.in_channels);
  report.fps = measure_fps([&] { predict_batch(params, one, cfg.net); }, 1, 3);
  if (!out.empty()) {
    if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
    detail::write_file_atomic(out, report.to_csv());
  }
  std::printf("%s", report.to_table().c_str());
}

template <std::floating_point T>
void run_predict(const RunConfig& cfg, const std::string& checkpoint, const std::string& in,
                 const std::string& out) {
  std::vector<fs::path> inputs;
  if (fs::is_directory(in)) {
    for (const auto& e : fs::directory_iterator(in)) {
      if (e.is_regular_file() && e.path().extension() == ".pgm") inputs.push_back(e.path());
    }
    std::sort(inputs.begin(), inputs.end());
  } else {
    inputs.push_back(in);
  }
  if (inputs.empty()) throw IoError("no .pgm images in " + in);
  const ParamStore<T> params = load_params<T>(cfg, checkpoint);
  fs::create_directories(out);
  for (const auto& path : inputs) {
    Sample s{path.stem().string(), load_pgm(path), {}};
    MsrfNetConfig net = cfg.net;
    net.height = s.image.dim(1);
    net.width = s.image.dim(2);
    const auto pred = predict_batch(params, stack_images<T>({&s}, net.in_channels), net);
    save_pgm(binarize(pred.mask), fs::path(out) / (s.id + "_mask.pgm"));
    if (pred.edge) save_pgm(*pred.edge, fs::path(out) / (s.id + "_edge.pgm"));
    std::printf("%s\n", (fs::path(out) / (s.id + "_mask.pgm")).string().c_str());
  }
}

template <class Fn>
void dispatch(Precision p, Fn&& fn) {
  if (p == Precision::f32) fn(float{});
  else fn(double{});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-scale residual fusion segmentation network"};
  app.require_subcommand(1);

  std::size_t synth_n = 20, synth_size = 64;
  std::uint64_t synth_seed = 7;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "write a synthetic shapes dataset");
  synth->add_option("--n", synth_n, "number of samples");
  synth->add_option("--size", synth_size, "image side in pixels");
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_option("--out", synth_out, "output dataset root")->required();

  std::string config, checkpoint, data_dir, out, in;
  auto* train_cmd = app.add_subcommand("train", "train from a config file");
  train_cmd->add_option("--config", config)->required();

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset directory");
  eval_cmd->add_option("--config", config)->required();
  eval_cmd->add_option("--checkpoint", checkpoint)->required();
  eval_cmd->add_option("--data", data_dir)->required();
  eval_cmd->add_option("--out", out, "per-image CSV report");

  auto* predict_cmd = app.add_subcommand("predict", "write predicted masks and edge maps");
  predict_cmd->add_option("--config", config)->required();
  predict_cmd->add_option("--checkpoint", checkpoint)->required();
  predict_cmd->add_option("--in", in, "image or directory of images")->required();
  predict_cmd->add_option("--out", out, "output directory")->required();

  std::size_t gc_samples = 25;
  double gc_tol = 1e-4;
  auto* gc_cmd = app.add_subcommand("gradcheck", "compare network gradients with finite differences");
  gc_cmd->add_option("--config", config)->required();
  gc_cmd->add_option("--samples", gc_samples, "sampled parameters");
  gc_cmd->add_option("--tol", gc_tol, "relative tolerance");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "error: usage: %s\n", e.what());
    return 2;
  }

  try {
    if (*synth) {
      save_dataset(synth_dataset(synth_n, synth_size, synth_seed), synth_out);
      std::printf("wrote %zu samples to %s\n", synth_n, synth_out.c_str());
    } else if (*train_cmd) {
      const RunConfig cfg = load_run_config(config);
      dispatch(cfg.precision, [&](auto t) { run_train<decltype(t)>(cfg); });
    } else if (*eval_cmd) {
      const RunConfig cfg = load_run_config(config);
      dispatch(cfg.precision, [&](auto t) { run_eval<decltype(t)>(cfg, checkpoint, data_dir, out); });
    } else if (*predict_cmd) {
      const RunConfig cfg = load_run_config(config);
      dispatch(cfg.precision, [&](auto t) { run_predict<decltype(t)>(cfg, checkpoint, in, out); });
    } else if (*gc_cmd) {
      const RunConfig cfg = load_run_config(config);
      const auto report = network_gradcheck(cfg.net, gc_samples, gc_tol, cfg.seed);
      std::printf("%s", format_gradcheck(report).c_str());
      if (!report.passed()) {
        std::fprintf(stderr, "error: numeric: gradient check failed (worst rel_err %.3e > %.1e)\n",
                     report.worst_error(), gc_tol);
        return 1;
      }
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s: %s\n", e.kind().c_str(), e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: internal: %s\n", e.what());
    return 1;
  }
  return 0;
}
