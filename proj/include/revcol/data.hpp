#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "revcol/rng.hpp"
#include "revcol/tensor.hpp"

namespace revcol {

template <class T>
struct Batch {
  Tensor<T> images;
  std::vector<std::int64_t> labels;
};

template <class T>
struct Dataset {
  Tensor<T> images;  // [S, 3, H, W], values in [0,1]
  std::vector<std::int64_t> labels;
  std::int64_t classes = 0;

  std::int64_t size() const { return images.defined() ? images.dim(0) : 0; }
  std::int64_t height() const { return images.dim(2); }
  std::int64_t width() const { return images.dim(3); }
};

// ------------------------------------------------------------------ IDX ---

namespace detail {

inline std::uint32_t read_be_u32(std::istream& in, const std::string& what) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw IoError("idx: truncated file while reading " + what);
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
         std::uint32_t(b[3]);
}

}  // namespace detail

inline std::int64_t pad_to_32(std::int64_t v) { return ((v + 31) / 32) * 32; }

// Big-endian IDX files (the MNIST container format): images are u8 tensors
// with magic 0x00000803, labels with 0x00000801. Pixels are normalized to
// [0,1], grayscale is replicated to three channels, and the image is
// zero-padded (content centered) up to a multiple of 32.
template <class T>
Dataset<T> load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw IoError("idx: cannot open images file " + images_path);
  std::ifstream lbl(labels_path, std::ios::binary);
  if (!lbl) throw IoError("idx: cannot open labels file " + labels_path);

  const std::uint32_t img_magic = detail::read_be_u32(img, "images magic");
  if (img_magic != 0x00000803u) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "0x%08X", img_magic);
    throw IoError("idx: wrong magic in images file: found " + std::string(buf) +
                  ", expected 0x00000803");
  }
  const std::uint32_t lbl_magic = detail::read_be_u32(lbl, "labels magic");
  if (lbl_magic != 0x00000801u) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "0x%08X", lbl_magic);
    throw IoError("idx: wrong magic in labels file: found " + std::string(buf) +
                  ", expected 0x00000801");
  }

  const std::int64_t count = detail::read_be_u32(img, "image count");
  const std::int64_t rows = detail::read_be_u32(img, "rows");
  const std::int64_t cols = detail::read_be_u32(img, "cols");
  const std::int64_t lbl_count = detail::read_be_u32(lbl, "label count");
  if (count != lbl_count)
    throw IoError("idx: image count " + std::to_string(count) + " does not match label count " +
                  std::to_string(lbl_count));
  if (count < 1) throw IoError("idx: empty dataset");

  std::vector<unsigned char> pixels(static_cast<std::size_t>(count * rows * cols));
  img.read(reinterpret_cast<char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!img) throw IoError("idx: truncated image payload");
  std::vector<unsigned char> raw_labels(static_cast<std::size_t>(count));
  lbl.read(reinterpret_cast<char*>(raw_labels.data()), static_cast<std::streamsize>(raw_labels.size()));
  if (!lbl) throw IoError("idx: truncated label payload");

  const std::int64_t oh = pad_to_32(rows), ow = pad_to_32(cols);
  const std::int64_t top = (oh - rows) / 2, left = (ow - cols) / 2;
  Dataset<T> ds;
  ds.images = Tensor<T>::zeros({count, 3, oh, ow});
  ds.labels.assign(raw_labels.begin(), raw_labels.end());
  ds.classes = 1 + *std::max_element(ds.labels.begin(), ds.labels.end());
  T* out = ds.images.data();
  for (std::int64_t i = 0; i < count; ++i)
    for (std::int64_t y = 0; y < rows; ++y)
      for (std::int64_t x = 0; x < cols; ++x) {
        const T v = static_cast<T>(pixels[static_cast<std::size_t>(i * rows * cols + y * cols + x)]) /
                    static_cast<T>(255);
        for (std::int64_t c = 0; c < 3; ++c)
          out[((i * 3 + c) * oh + (y + top)) * ow + (x + left)] = v;
      }
  return ds;
}

// ------------------------------------------------------------ synthetic ---

enum class SynthKind { gaussian_blobs, striped_textures };

inline SynthKind parse_synth_kind(const std::string& s) {
  if (s == "blobs" || s == "gaussian_blobs") return SynthKind::gaussian_blobs;
  if (s == "textures" || s == "striped_textures") return SynthKind::striped_textures;
  throw ConfigError("unknown synthetic dataset kind '" + s + "' (expected blobs|textures)");
}

// gaussian_blobs: each class is a fixed smooth bump pattern plus small
// noise, linearly separable from raw pixels. striped_textures: each class
// is an oriented grating with a random phase per sample, so no fixed pixel
// weighting separates the classes but spatial features do.
template <class T>
Dataset<T> synth_dataset(SynthKind kind, std::int64_t classes, std::int64_t samples,
                         std::int64_t size, std::uint64_t seed) {
  if (classes < 2) throw ConfigError("synth_dataset: classes must be >= 2");
  if (size % 32 != 0) throw ConfigError("synth_dataset: size must be a multiple of 32");
  Dataset<T> ds;
  ds.classes = classes;
  ds.images = Tensor<T>::zeros({samples, 3, size, size});
  ds.labels.resize(static_cast<std::size_t>(samples));

  struct Bump {
    double cx, cy, sigma, amp;
  };
  std::vector<std::vector<Bump>> class_bumps;  // [class][channel*bumps]
  if (kind == SynthKind::gaussian_blobs) {
    for (std::int64_t k = 0; k < classes; ++k) {
      Rng crng(seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(k) + 1);
      std::vector<Bump> bumps;
      for (int j = 0; j < 9; ++j)  // three bumps per channel
        bumps.push_back({crng.uniform(0.15, 0.85), crng.uniform(0.15, 0.85),
                         crng.uniform(0.12, 0.25), crng.uniform(0.5, 1.0) * (crng.uniform() < 0.5 ? -1 : 1)});
      class_bumps.push_back(std::move(bumps));
    }
  }

  Rng rng(seed);
  T* out = ds.images.data();
  const std::int64_t plane = size * size;
  for (std::int64_t i = 0; i < samples; ++i) {
    const std::int64_t k = i % classes;
    ds.labels[static_cast<std::size_t>(i)] = k;
    if (kind == SynthKind::gaussian_blobs) {
      const auto& bumps = class_bumps[static_cast<std::size_t>(k)];
      for (std::int64_t c = 0; c < 3; ++c)
        for (std::int64_t y = 0; y < size; ++y)
          for (std::int64_t x = 0; x < size; ++x) {
            double v = 0.5;
            for (int j = 0; j < 3; ++j) {
              const Bump& b = bumps[static_cast<std::size_t>(c * 3 + j)];
              const double dx = static_cast<double>(x) / size - b.cx;
              const double dy = static_cast<double>(y) / size - b.cy;
              v += 0.45 * b.amp * std::exp(-(dx * dx + dy * dy) / (2 * b.sigma * b.sigma));
            }
            v += rng.normal(0.0, 0.05);
            out[((i * 3 + c) * size + y) * size + x] = static_cast<T>(std::clamp(v, 0.0, 1.0));
          }
    } else {
      const double theta = 3.14159265358979323846 * static_cast<double>(k) / static_cast<double>(classes);
      const double cycles = 3.0 + static_cast<double>(k % 3);
      const double phase = rng.uniform(0.0, 2 * 3.14159265358979323846);
      const double kx = std::cos(theta) * 2 * 3.14159265358979323846 * cycles / size;
      const double ky = std::sin(theta) * 2 * 3.14159265358979323846 * cycles / size;
      for (std::int64_t y = 0; y < size; ++y)
        for (std::int64_t x = 0; x < size; ++x) {
          const double g = std::sin(kx * static_cast<double>(x) + ky * static_cast<double>(y) + phase);
          const double v = std::clamp(0.5 + 0.35 * g + rng.normal(0.0, 0.06), 0.0, 1.0);
          for (std::int64_t c = 0; c < 3; ++c)
            out[((i * 3 + c) * size + y) * size + x] = static_cast<T>(v);
        }
    }
  }
  return ds;
}

// -------------------------------------------------------------- batching ---

// Iteration order is a pure function of (seed, epoch).
inline std::vector<std::int64_t> epoch_order(std::int64_t size, std::uint64_t seed,
                                             std::int64_t epoch) {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(size));
  for (std::int64_t i = 0; i < size; ++i) idx[static_cast<std::size_t>(i)] = i;
  Rng rng(seed ^ (0xA24BAED4963EE407ULL + static_cast<std::uint64_t>(epoch) * 0x9E3779B97F4A7C15ULL));
  for (std::int64_t i = size - 1; i > 0; --i)
    std::swap(idx[static_cast<std::size_t>(i)],
              idx[static_cast<std::size_t>(rng.next_below(static_cast<std::uint64_t>(i + 1)))]);
  return idx;
}

template <class T>
Batch<T> gather_batch(const Dataset<T>& ds, const std::vector<std::int64_t>& order,
                      std::int64_t start, std::int64_t batch_size) {
  const std::int64_t n = std::min<std::int64_t>(batch_size, ds.size() - start);
  const std::int64_t chw = 3 * ds.height() * ds.width();
  Batch<T> b;
  b.images = Tensor<T>::zeros({n, 3, ds.height(), ds.width()});
  b.labels.resize(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const std::int64_t src = order[static_cast<std::size_t>(start + i)];
    std::copy(ds.images.data() + src * chw, ds.images.data() + (src + 1) * chw,
              b.images.data() + i * chw);
    b.labels[static_cast<std::size_t>(i)] = ds.labels[static_cast<std::size_t>(src)];
  }
  return b;
}

}  // namespace revcol
