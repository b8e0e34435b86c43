#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace mkd {

using Shape = std::vector<int>;

std::string to_string(const Shape& shape);

/// Dense row-major array of doubles. Activations are laid out (C, H, W);
/// convolution weights (out, in, k, k).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // (C, H, W) accessors; valid for rank-3 tensors only.
  int channels() const { return dim(0); }
  int height() const { return dim(1); }
  int width() const { return dim(2); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(int c, int y, int x) { return data_[index(c, y, x)]; }
  double at(int c, int y, int x) const { return data_[index(c, y, x)]; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  void fill(double v);
  Tensor& operator+=(const Tensor& other);

  bool operator==(const Tensor& other) const = default;

 private:
  std::size_t index(int c, int y, int x) const {
    return (static_cast<std::size_t>(c) * static_cast<std::size_t>(shape_[1]) +
            static_cast<std::size_t>(y)) *
               static_cast<std::size_t>(shape_[2]) +
           static_cast<std::size_t>(x);
  }

  Shape shape_;
  std::vector<double> data_;
};

/// Single-channel image, shape (1, H, W).
using Image = Tensor;

/// Per-pixel categorical distribution, shape (C, H, W).
using ProbabilityMap = Tensor;

/// Per-pixel integer class labels.
class LabelMap {
 public:
  LabelMap() = default;
  LabelMap(int height, int width, std::uint8_t fill = 0)
      : height_(height), width_(width),
        data_(static_cast<std::size_t>(height) * static_cast<std::size_t>(width), fill) {}
  LabelMap(int height, int width, std::vector<std::uint8_t> values);

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t size() const { return data_.size(); }

  std::uint8_t& operator[](std::size_t i) { return data_[i]; }
  std::uint8_t operator[](std::size_t i) const { return data_[i]; }
  std::uint8_t& at(int y, int x) { return data_[static_cast<std::size_t>(y * width_ + x)]; }
  std::uint8_t at(int y, int x) const { return data_[static_cast<std::size_t>(y * width_ + x)]; }

  std::span<const std::uint8_t> values() const { return data_; }
  std::span<std::uint8_t> values() { return data_; }

  /// Pixel count for each class id in [0, num_classes).
  std::vector<std::size_t> histogram(int num_classes) const;

  bool operator==(const LabelMap& other) const = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<std::uint8_t> data_;
};

/// Throws InputError unless `t` has rank 3.
void require_chw(const Tensor& t, const char* what);

/// Throws InputError unless every pixel's class vector is nonnegative and
/// sums to 1 within `tolerance`.
void require_probability_map(const ProbabilityMap& p, double tolerance = 1e-5);

/// Per-pixel argmax over channels; ties resolve to the lowest class index.
LabelMap argmax(const ProbabilityMap& p);

/// One-hot encoding of a label map as a (num_classes, H, W) tensor.
ProbabilityMap one_hot(const LabelMap& labels, int num_classes);

/// 64-bit FNV-1a over the raw bytes of the given values.
std::uint64_t fingerprint(std::span<const double> values, std::uint64_t seed = 14695981039346656037ULL);

}  // namespace mkd
