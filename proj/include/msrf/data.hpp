#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "msrf/params.hpp"
#include "msrf/random.hpp"
#include "msrf/tensor.hpp"

namespace msrf {

/// One image/mask pair, both [1, H, W]; the mask is strictly 0/1.
struct Sample {
  std::string id;
  Tensor<double> image;
  Tensor<double> mask;
};

// ---- PGM (binary P5, maxval 255) ----

namespace detail {

inline void skip_pgm_space(const std::string& buf, std::size_t& pos) {
  while (pos < buf.size()) {
    if (buf[pos] == '#') {
      while (pos < buf.size() && buf[pos] != '\n') ++pos;
    } else if (std::isspace(static_cast<unsigned char>(buf[pos]))) {
      ++pos;
    } else {
      break;
    }
  }
}

inline std::size_t read_pgm_int(const std::string& buf, std::size_t& pos, const std::string& path) {
  skip_pgm_space(buf, pos);
  const std::size_t start = pos;
  std::size_t v = 0;
  while (pos < buf.size() && buf[pos] >= '0' && buf[pos] <= '9') {
    v = v * 10 + static_cast<std::size_t>(buf[pos] - '0');
    if (v > 1u << 20) throw IoError(path + ": PGM header value too large");
    ++pos;
  }
  if (pos == start) throw IoError(path + ": malformed PGM header");
  return v;
}

}  // namespace detail

/// Reads an 8-bit P5 file into [1, H, W] with values byte / 255.
inline Tensor<double> load_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string name = path.string();
  if (buf.size() < 2 || buf[0] != 'P' || buf[1] != '5') {
    throw IoError(name + ": bad magic (expected binary PGM 'P5')");
  }
  std::size_t pos = 2;
  const std::size_t width = detail::read_pgm_int(buf, pos, name);
  const std::size_t height = detail::read_pgm_int(buf, pos, name);
  const std::size_t maxval = detail::read_pgm_int(buf, pos, name);
  if (maxval != 255) throw IoError(name + ": maxval " + std::to_string(maxval) + " (only 255 supported)");
  if (width == 0 || height == 0) throw IoError(name + ": empty image");
  if (pos >= buf.size() || !std::isspace(static_cast<unsigned char>(buf[pos]))) {
    throw IoError(name + ": malformed PGM header");
  }
  ++pos;
  if (buf.size() - pos < width * height) throw IoError(name + ": truncated pixel data");
  Tensor<double> out({1, height, width});
  for (std::size_t i = 0; i < width * height; ++i) {
    out[i] = static_cast<double>(static_cast<unsigned char>(buf[pos + i])) / 255.0;
  }
  return out;
}

/// Reads a mask: pixels >= 128 become 1, the rest 0.
inline Tensor<double> load_mask_pgm(const std::filesystem::path& path) {
  Tensor<double> m = load_pgm(path);
  for (auto& v : m.data()) v = v * 255.0 >= 127.5 ? 1.0 : 0.0;
  return m;
}

/// Writes the last two axes of a tensor holding a single plane, values
/// clamped to [0, 1] and rounded to 8 bits.
template <std::floating_point T>
void save_pgm(const Tensor<T>& image, const std::filesystem::path& path) {
  if (image.rank() < 2) throw ShapeError("save_pgm: need at least rank 2");
  const std::size_t h = image.dim(image.rank() - 2), w = image.dim(image.rank() - 1);
  if (image.size() != h * w) throw ShapeError("save_pgm: tensor " + to_string(image.shape()) + " holds more than one plane");
  std::string bytes = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (T v : image.data()) {
    const double c = std::clamp(static_cast<double>(v), 0.0, 1.0);
    bytes.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0))));
  }
  detail::write_file_atomic(path, bytes);
}

// ---- synthetic data ----

/// n images of 1-3 ellipses/rectangles on a noisy background. Each sample
/// draws from its own stream derived from (seed, index).
inline std::vector<Sample> synth_dataset(std::size_t n, std::size_t size, std::uint64_t seed) {
  if (size < 8) throw ConfigError("synth: image size must be >= 8");
  std::vector<Sample> out;
  out.reserve(n);
  const double side = static_cast<double>(size);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, "synth/" + std::to_string(i)));
    const double background = rng.uniform(0.05, 0.35);
    const double contrast = rng.uniform(0.3, 0.55);
    const std::size_t shapes = 1 + rng.below(3);
    Tensor<double> mask({1, size, size});
    for (std::size_t s = 0; s < shapes; ++s) {
      // Area fraction 5%-40% of the image, shared among the shapes.
      const double area = rng.uniform(0.05, 0.40) / static_cast<double>(shapes) * side * side;
      const double aspect = rng.uniform(0.6, 1.6);
      const bool ellipse = rng.uniform() < 0.5;
      const double theta = rng.uniform(0.0, std::numbers::pi);
      double rx, ry;
      if (ellipse) {
        rx = std::sqrt(area * aspect / std::numbers::pi);
        ry = area / (std::numbers::pi * rx);
      } else {
        rx = std::sqrt(area * aspect) / 2.0;
        ry = area / (4.0 * rx);
      }
      const double reach = std::min(std::max(rx, ry), side / 2.0);
      const double cx = rng.uniform(reach, side - reach);
      const double cy = rng.uniform(reach, side - reach);
      const double ct = std::cos(theta), st = std::sin(theta);
      for (std::size_t y = 0; y < size; ++y) {
        for (std::size_t x = 0; x < size; ++x) {
          const double dx = static_cast<double>(x) + 0.5 - cx;
          const double dy = static_cast<double>(y) + 0.5 - cy;
          const double u = ct * dx + st * dy, v = -st * dx + ct * dy;
          const bool inside = ellipse ? (u * u) / (rx * rx) + (v * v) / (ry * ry) <= 1.0
                                      : std::fabs(u) <= rx && std::fabs(v) <= ry;
          if (inside) mask[y * size + x] = 1.0;
        }
      }
    }
    Tensor<double> image({1, size, size});
    for (std::size_t p = 0; p < size * size; ++p) {
      const double v = background + contrast * mask[p] + 0.04 * rng.normal();
      image[p] = std::clamp(v, 0.0, 1.0);
    }
    char id[32];
    std::snprintf(id, sizeof id, "synth_%04zu", i);
    out.push_back({id, std::move(image), std::move(mask)});
  }
  return out;
}

// ---- augmentation ----

enum class AugmentOp { hflip, vflip, rot90, random_crop };

inline AugmentOp parse_augment_op(const std::string& s) {
  if (s == "hflip") return AugmentOp::hflip;
  if (s == "vflip") return AugmentOp::vflip;
  if (s == "rot90") return AugmentOp::rot90;
  if (s == "random_crop") return AugmentOp::random_crop;
  throw ConfigError("unknown augmentation '" + s + "'");
}

namespace detail {

template <class Fn>
Tensor<double> remap_plane(const Tensor<double>& src, std::size_t out_h, std::size_t out_w, Fn&& source_of) {
  Tensor<double> out({1, out_h, out_w});
  const std::size_t w = src.dim(2);
  for (std::size_t y = 0; y < out_h; ++y) {
    for (std::size_t x = 0; x < out_w; ++x) {
      const auto [sy, sx, valid] = source_of(y, x);
      out[y * out_w + x] = valid ? src[sy * w + sx] : 0.0;
    }
  }
  return out;
}

struct Source {
  std::size_t y, x;
  bool valid;
};

}  // namespace detail

/// Applies each op in order to image and mask alike. Flips and the 90 degree
/// (counter-clockwise) rotation are deterministic; random_crop keeps a random
/// window of 70-100% per side and re-pads it, centred, to the original size.
inline Sample augment(const Sample& sample, std::uint64_t seed, const std::vector<AugmentOp>& ops) {
  Rng rng(seed);
  Sample out = sample;
  for (AugmentOp op : ops) {
    const std::size_t h = out.image.dim(1), w = out.image.dim(2);
    auto apply = [&](auto&& source_of, std::size_t oh, std::size_t ow) {
      out.image = detail::remap_plane(out.image, oh, ow, source_of);
      out.mask = detail::remap_plane(out.mask, oh, ow, source_of);
    };
    switch (op) {
      case AugmentOp::hflip:
        apply([&](std::size_t y, std::size_t x) { return detail::Source{y, w - 1 - x, true}; }, h, w);
        break;
      case AugmentOp::vflip:
        apply([&](std::size_t y, std::size_t x) { return detail::Source{h - 1 - y, x, true}; }, h, w);
        break;
      case AugmentOp::rot90:
        apply([&](std::size_t y, std::size_t x) { return detail::Source{x, w - 1 - y, true}; }, w, h);
        break;
      case AugmentOp::random_crop: {
        const auto ch = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(rng.uniform(0.7, 1.0) * h)));
        const auto cw = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(rng.uniform(0.7, 1.0) * w)));
        const std::size_t y0 = rng.below(h - ch + 1), x0 = rng.below(w - cw + 1);
        const std::size_t py = (h - ch) / 2, px = (w - cw) / 2;
        apply(
            [&](std::size_t y, std::size_t x) {
              if (y < py || y >= py + ch || x < px || x >= px + cw) return detail::Source{0, 0, false};
              return detail::Source{y - py + y0, x - px + x0, true};
            },
            h, w);
        break;
      }
    }
  }
  return out;
}

// ---- boundary maps ----

/// 1 where the mask is 1 and some 4-neighbour is 0; out-of-image counts as 0.
template <std::floating_point T>
Tensor<T> boundary_map(const Tensor<T>& mask) {
  if (mask.rank() < 2) throw ShapeError("boundary_map: need at least rank 2");
  const std::size_t h = mask.dim(mask.rank() - 2), w = mask.dim(mask.rank() - 1);
  const std::size_t planes = mask.size() / (h * w);
  Tensor<T> out(mask.shape());
  for (std::size_t p = 0; p < planes; ++p) {
    const T* m = mask.ptr() + p * h * w;
    T* o = out.ptr() + p * h * w;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        if (m[y * w + x] == T{0}) continue;
        const bool edge = y == 0 || x == 0 || y + 1 == h || x + 1 == w || m[(y - 1) * w + x] == T{0} ||
                          m[(y + 1) * w + x] == T{0} || m[y * w + x - 1] == T{0} ||
                          m[y * w + x + 1] == T{0};
        o[y * w + x] = edge ? T{1} : T{0};
      }
    }
  }
  return out;
}

// ---- splitting and directories ----

struct DatasetSplit {
  std::vector<Sample> train, val, test;
};

/// Seeded shuffle, then floor(10%) validation, floor(10%) test, the rest training.
inline DatasetSplit split_dataset(const std::vector<Sample>& data, std::uint64_t seed) {
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(seed, "split"));
  shuffle(order.begin(), order.end(), rng);
  const std::size_t n_val = data.size() / 10, n_test = data.size() / 10;
  DatasetSplit out;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const Sample& s = data[order[i]];
    if (i < n_val) out.val.push_back(s);
    else if (i < n_val + n_test) out.test.push_back(s);
    else out.train.push_back(s);
  }
  return out;
}

/// <root>/images/<id>.pgm with <root>/masks/<id>.pgm, sorted by id.
inline std::vector<Sample> load_dataset(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  const fs::path images = root / "images", masks = root / "masks";
  if (!fs::is_directory(images)) throw IoError("missing directory " + images.string());
  std::vector<std::string> ids;
  for (const auto& entry : fs::directory_iterator(images)) {
    if (entry.is_regular_file() && entry.path().extension() == ".pgm") {
      ids.push_back(entry.path().stem().string());
    }
  }
  std::sort(ids.begin(), ids.end());
  std::vector<Sample> out;
  for (const auto& id : ids) {
    const fs::path mp = masks / (id + ".pgm");
    if (!fs::exists(mp)) throw IoError("no mask for image " + id + " (expected " + mp.string() + ")");
    Sample s{id, load_pgm(images / (id + ".pgm")), load_mask_pgm(mp)};
    if (s.image.shape() != s.mask.shape()) {
      throw IoError("image/mask size mismatch for " + id);
    }
    out.push_back(std::move(s));
  }
  return out;
}

inline void save_dataset(const std::vector<Sample>& data, const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");
  for (const auto& s : data) {
    save_pgm(s.image, root / "images" / (s.id + ".pgm"));
    save_pgm(s.mask, root / "masks" / (s.id + ".pgm"));
  }
}

}  // namespace msrf
