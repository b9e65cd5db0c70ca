#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "msrf/autodiff.hpp"
#include "msrf/random.hpp"
#include "msrf/tensor.hpp"

namespace msrf {

enum class Init { glorot_uniform, zeros };

struct ParamSpec {
  std::string name;
  Shape shape;
  Init init = Init::zeros;
  std::size_t fan_in = 0;
  std::size_t fan_out = 0;
};

using ParamSpecs = std::vector<ParamSpec>;

// ---- spec builders ----

/// Conv kernel [cout, cin, k, k] plus bias.
inline void add_conv_params(ParamSpecs& specs, const std::string& prefix, std::size_t cin,
                            std::size_t cout, std::size_t k) {
  specs.push_back({prefix + ".w", {cout, cin, k, k}, Init::glorot_uniform, cin * k * k, cout * k * k});
  specs.push_back({prefix + ".b", {cout}, Init::zeros, 0, 0});
}

/// Transposed-conv kernel [cin, cout, k, k] plus bias.
inline void add_conv_transpose_params(ParamSpecs& specs, const std::string& prefix,
                                      std::size_t cin, std::size_t cout, std::size_t k) {
  specs.push_back({prefix + ".w", {cin, cout, k, k}, Init::glorot_uniform, cout * k * k, cin * k * k});
  specs.push_back({prefix + ".b", {cout}, Init::zeros, 0, 0});
}

inline void add_dense_params(ParamSpecs& specs, const std::string& prefix, std::size_t cin,
                             std::size_t cout) {
  specs.push_back({prefix + ".w", {cout, cin}, Init::glorot_uniform, cin, cout});
  specs.push_back({prefix + ".b", {cout}, Init::zeros, 0, 0});
}

inline std::size_t count_elements(const ParamSpecs& specs) {
  std::size_t total = 0;
  for (const auto& s : specs) total += shape_numel(s.shape);
  return total;
}

/// Named trainable tensors, iterated in name order.
template <std::floating_point T>
class ParamStore {
 public:
  using Map = std::map<std::string, Tensor<T>>;

  ParamStore() = default;

  /// Glorot-uniform weights and zero biases. Each tensor draws from its own
  /// stream derived from (seed, name), so the values do not depend on the
  /// order specs are listed in.
  static ParamStore initialize(const ParamSpecs& specs, std::uint64_t seed) {
    ParamStore store;
    for (const auto& spec : specs) {
      if (store.tensors_.count(spec.name)) throw ConfigError("duplicate parameter " + spec.name);
      Tensor<T> t(spec.shape);
      if (spec.init == Init::glorot_uniform) {
        Rng rng(derive_seed(seed, spec.name));
        const double limit = std::sqrt(6.0 / static_cast<double>(spec.fan_in + spec.fan_out));
        for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-limit, limit));
      }
      store.tensors_.emplace(spec.name, std::move(t));
    }
    return store;
  }

  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }

  const Tensor<T>& at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw UsageError("unknown parameter " + name);
    return it->second;
  }
  Tensor<T>& at(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw UsageError("unknown parameter " + name);
    return it->second;
  }

  void set(const std::string& name, Tensor<T> value) { tensors_[name] = std::move(value); }

  std::size_t size() const noexcept { return tensors_.size(); }
  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& [_, t] : tensors_) n += t.size();
    return n;
  }

  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }
  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }

  template <std::floating_point U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [name, t] : tensors_) out.set(name, t.template cast<U>());
    return out;
  }

  /// Every spec present with its declared shape, and nothing else.
  void validate(const ParamSpecs& specs) const {
    for (const auto& spec : specs) {
      auto it = tensors_.find(spec.name);
      if (it == tensors_.end()) throw ConfigError("missing parameter " + spec.name);
      if (it->second.shape() != spec.shape) {
        throw ConfigError("parameter " + spec.name + " has shape " + to_string(it->second.shape()) +
                          ", expected " + to_string(spec.shape));
      }
    }
    if (specs.size() != tensors_.size()) {
      throw ConfigError("parameter set has " + std::to_string(tensors_.size()) +
                        " tensors, configuration expects " + std::to_string(specs.size()));
    }
  }

 private:
  Map tensors_;
};

// ---- checkpoints ----
//
// "MSRF1" | u64 count | count x { u32 name_len | name | u32 rank | rank x u64 extent |
// numel x f64 } with every integer and double stored little-endian.

namespace detail {

inline void put_u64(std::string& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}
inline void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

class ByteReader {
 public:
  ByteReader(const std::string& data, std::string path) : data_(data), path_(std::move(path)) {}

  std::uint64_t u64() { return read_le(8); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(read_le(4)); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string out = data_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  bool at_end() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw IoError(path_ + ": truncated checkpoint");
  }
  std::uint64_t read_le(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    }
    pos_ += static_cast<std::size_t>(width);
    return v;
  }

  const std::string& data_;
  std::string path_;
  std::size_t pos_ = 0;
};

/// Writes to a sibling temp file, then renames over the target.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp + " to " + path.string() + ": " + ec.message());
}

}  // namespace detail

inline constexpr char kCheckpointMagic[] = "MSRF1";

template <std::floating_point T>
std::string encode_checkpoint(const ParamStore<T>& store) {
  std::string buf(kCheckpointMagic, 5);
  detail::put_u64(buf, store.size());
  for (const auto& [name, t] : store) {
    detail::put_u32(buf, static_cast<std::uint32_t>(name.size()));
    buf += name;
    detail::put_u32(buf, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) detail::put_u64(buf, e);
    for (T v : t.data()) detail::put_u64(buf, std::bit_cast<std::uint64_t>(static_cast<double>(v)));
  }
  return buf;
}

template <std::floating_point T>
void save_checkpoint(const ParamStore<T>& store, const std::filesystem::path& path) {
  detail::write_file_atomic(path, encode_checkpoint(store));
}

/// Loads a checkpoint and checks it against the expected parameter specs.
template <std::floating_point T>
ParamStore<T> load_checkpoint(const std::filesystem::path& path, const ParamSpecs& expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  const std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  detail::ByteReader rd(data, path.string());
  if (rd.bytes(5) != std::string(kCheckpointMagic, 5)) {
    throw IoError(path.string() + ": bad checkpoint magic");
  }
  const std::uint64_t count = rd.u64();
  ParamStore<T> store;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string name = rd.bytes(rd.u32());
    const std::uint32_t rank = rd.u32();
    if (rank == 0 || rank > 8) throw IoError(path.string() + ": bad rank for " + name);
    Shape shape(rank);
    for (auto& e : shape) e = rd.u64();
    std::vector<T> values(shape_numel(shape));
    for (auto& v : values) v = static_cast<T>(rd.f64());
    store.set(name, Tensor<T>(std::move(shape), std::move(values)));
  }
  if (!rd.at_end()) throw IoError(path.string() + ": trailing bytes after checkpoint");
  store.validate(expected);
  return store;
}

// ---- forward context ----

/// One forward pass: owns the tape, binds parameters as leaves (once per
/// name, so fan-out gradients accumulate) and carries the run mode.
template <std::floating_point T>
class Graph {
 public:
  Graph(const ParamStore<T>& params, bool training, std::uint64_t dropout_seed = 0,
        bool track_grads = true)
      : params_(params), training_(training), track_grads_(track_grads), rng_(dropout_seed) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Tape<T>& tape() noexcept { return tape_; }
  bool training() const noexcept { return training_; }
  Rng& rng() noexcept { return rng_; }

  Var<T> param(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    const Tensor<T>& value = params_.at(name);
    Var<T> v = track_grads_ ? tape_.parameter(name, value) : tape_.constant(value);
    bound_.emplace(name, v);
    return v;
  }

  Var<T> input(Tensor<T> value) { return tape_.constant(std::move(value)); }

  GradMap<T> backward(Var<T> loss) { return tape_.backward(loss); }

 private:
  const ParamStore<T>& params_;
  bool training_;
  bool track_grads_;
  Rng rng_;
  Tape<T> tape_;
  std::unordered_map<std::string, Var<T>> bound_;
};

}  // namespace msrf
