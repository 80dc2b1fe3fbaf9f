#ifndef TRILEVEL_DATA_HPP
#define TRILEVEL_DATA_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "trilevel/errors.hpp"

namespace trilevel {

/// Images stored as 8-bit C x H x W planes, one after another.
struct Dataset {
  std::size_t channels = 0;
  std::size_t image_size = 0;
  std::size_t num_classes = 0;
  std::vector<std::uint8_t> pixels;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_numel() const { return channels * image_size * image_size; }
  std::span<const std::uint8_t> image(std::size_t i) const {
    return std::span<const std::uint8_t>(pixels).subspan(i * image_numel(), image_numel());
  }
};

struct DatasetSplit {
  Dataset train;
  Dataset test;
};

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string(), 0);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& buf, std::size_t offset, const std::string& file) {
  if (offset + 4 > buf.size()) throw FormatError(file + ": truncated header", buf.size());
  return (std::uint32_t{buf[offset]} << 24) | (std::uint32_t{buf[offset + 1]} << 16) |
         (std::uint32_t{buf[offset + 2]} << 8) | std::uint32_t{buf[offset + 3]};
}

}  // namespace detail

/// One IDX image/label file pair (magic 0x00000803 / 0x00000801).
inline Dataset load_idx_pair(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  const auto img = detail::read_file(images_path);
  const auto lab = detail::read_file(labels_path);
  const std::string iname = images_path.filename().string(), lname = labels_path.filename().string();
  if (detail::read_be32(img, 0, iname) != 0x00000803) throw FormatError(iname + ": bad IDX image magic", 0);
  if (detail::read_be32(lab, 0, lname) != 0x00000801) throw FormatError(lname + ": bad IDX label magic", 0);
  const std::size_t n = detail::read_be32(img, 4, iname);
  const std::size_t rows = detail::read_be32(img, 8, iname);
  const std::size_t cols = detail::read_be32(img, 12, iname);
  const std::size_t nl = detail::read_be32(lab, 4, lname);
  if (rows != cols) throw FormatError(iname + ": non-square images are not supported", 8);
  if (nl != n) throw FormatError(lname + ": label count " + std::to_string(nl) + " != image count " + std::to_string(n), 4);
  if (img.size() < 16 + n * rows * cols) throw FormatError(iname + ": short file", img.size());
  if (lab.size() < 8 + n) throw FormatError(lname + ": short file", lab.size());
  Dataset d;
  d.channels = 1;
  d.image_size = rows;
  d.num_classes = 10;
  d.pixels.assign(img.begin() + 16, img.begin() + 16 + static_cast<std::ptrdiff_t>(n * rows * cols));
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    d.labels[i] = lab[8 + i];
    if (d.labels[i] > 9) throw FormatError(lname + ": label out of range", 8 + i);
  }
  return d;
}

inline DatasetSplit load_mnist(const std::filesystem::path& dir) {
  return {load_idx_pair(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte"),
          load_idx_pair(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte")};
}

/// Appends the 3073-byte records (label byte + 3072 pixel bytes) of one CIFAR-10 batch.
inline void append_cifar10_batch(Dataset& d, const std::filesystem::path& path) {
  constexpr std::size_t kRecord = 3073;
  const auto buf = detail::read_file(path);
  const std::string name = path.filename().string();
  if (buf.empty() || buf.size() % kRecord != 0)
    throw FormatError(name + ": size " + std::to_string(buf.size()) + " is not a multiple of 3073",
                      buf.size() - buf.size() % kRecord);
  d.channels = 3;
  d.image_size = 32;
  d.num_classes = 10;
  for (std::size_t off = 0; off < buf.size(); off += kRecord) {
    if (buf[off] > 9) throw FormatError(name + ": label out of range", off);
    d.labels.push_back(buf[off]);
    d.pixels.insert(d.pixels.end(), buf.begin() + static_cast<std::ptrdiff_t>(off + 1),
                    buf.begin() + static_cast<std::ptrdiff_t>(off + kRecord));
  }
}

inline DatasetSplit load_cifar10(const std::filesystem::path& dir) {
  DatasetSplit s;
  for (int b = 1; b <= 5; ++b) append_cifar10_batch(s.train, dir / ("data_batch_" + std::to_string(b) + ".bin"));
  append_cifar10_batch(s.test, dir / "test_batch.bin");
  return s;
}

/// Labeled Gaussian blobs: each class has its own blob position and per-channel
/// intensity; images add positional jitter and pixel noise. Fully determined by `seed`.
inline Dataset make_synthetic(std::size_t n, std::size_t classes, std::size_t image_size, std::size_t channels,
                              std::uint64_t seed) {
  if (classes == 0 || image_size == 0 || channels == 0) throw ConfigError("synthetic dataset needs positive sizes");
  Dataset d;
  d.channels = channels;
  d.image_size = image_size;
  d.num_classes = classes;
  d.pixels.resize(n * d.image_numel());
  d.labels.resize(n);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pick(0, static_cast<int>(classes) - 1);
  std::normal_distribution<double> jitter(0.0, static_cast<double>(image_size) / 16.0);
  std::normal_distribution<double> noise(0.0, 18.0);
  const double s = static_cast<double>(image_size);
  for (std::size_t i = 0; i < n; ++i) {
    const int c = pick(rng);
    d.labels[i] = c;
    const double angle = 2.0 * std::numbers::pi * c / static_cast<double>(classes);
    const double cx = s / 2 + 0.3 * s * std::cos(angle) + jitter(rng);
    const double cy = s / 2 + 0.3 * s * std::sin(angle) + jitter(rng);
    const double sigma = s / 6.0;
    for (std::size_t ch = 0; ch < channels; ++ch) {
      const double amp = 140.0 + 100.0 * std::cos(angle + 2.0 * std::numbers::pi * ch / 3.0);
      for (std::size_t y = 0; y < image_size; ++y)
        for (std::size_t x = 0; x < image_size; ++x) {
          const double dx = x - cx, dy = y - cy;
          double v = 20.0 + amp * std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma)) + noise(rng);
          d.pixels[(i * channels + ch) * image_size * image_size + y * image_size + x] =
              static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
        }
    }
  }
  return d;
}

/// Maps 8-bit pixels to [-1, 1].
template <typename T>
void normalize_into(std::span<const std::uint8_t> src, std::span<T> dst) {
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<T>(src[i]) / T(127.5) - T(1);
}

/// Random crop from a zero-padded image plus a random horizontal flip.
template <typename T>
void augment_into(std::span<const std::uint8_t> src, std::size_t channels, std::size_t size, std::mt19937_64& rng,
                  std::span<T> dst) {
  const int pad = static_cast<int>(std::max<std::size_t>(1, size / 8));
  std::uniform_int_distribution<int> shift(-pad, pad);
  std::uniform_int_distribution<int> coin(0, 1);
  const int dx = shift(rng), dy = shift(rng);
  const bool flip = coin(rng) == 1;
  const int n = static_cast<int>(size);
  for (std::size_t ch = 0; ch < channels; ++ch)
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        const int sx = (flip ? n - 1 - x : x) + dx, sy = y + dy;
        const std::size_t o = (ch * size + static_cast<std::size_t>(y)) * size + static_cast<std::size_t>(x);
        if (sx < 0 || sy < 0 || sx >= n || sy >= n) {
          dst[o] = T(-1);
        } else {
          const auto p = src[(ch * size + static_cast<std::size_t>(sy)) * size + static_cast<std::size_t>(sx)];
          dst[o] = static_cast<T>(p) / T(127.5) - T(1);
        }
      }
}

}  // namespace trilevel

#endif  // TRILEVEL_DATA_HPP
