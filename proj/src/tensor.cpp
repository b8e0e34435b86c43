#include "mkd/tensor.hpp"

#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include "mkd/errors.hpp"

namespace mkd {

namespace {

std::size_t element_count(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw InputError("negative tensor dimension in " + to_string(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

}  // namespace

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  if (data_.size() != element_count(shape_)) {
    throw InputError("tensor value count " + std::to_string(data_.size()) +
                     " does not match shape " + to_string(shape_));
  }
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Tensor& Tensor::operator+=(const Tensor& other) {
  if (other.shape_ != shape_) {
    throw InputError("tensor add: shape " + to_string(other.shape_) + " vs " + to_string(shape_));
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

LabelMap::LabelMap(int height, int width, std::vector<std::uint8_t> values)
    : height_(height), width_(width), data_(std::move(values)) {
  if (data_.size() != static_cast<std::size_t>(height) * static_cast<std::size_t>(width)) {
    throw InputError("label map value count does not match " + std::to_string(height) + "x" +
                     std::to_string(width));
  }
}

std::vector<std::size_t> LabelMap::histogram(int num_classes) const {
  std::vector<std::size_t> counts(static_cast<std::size_t>(num_classes), 0);
  for (std::uint8_t v : data_) {
    if (v >= num_classes) {
      throw InputError("label " + std::to_string(v) + " out of range for " +
                       std::to_string(num_classes) + " classes");
    }
    ++counts[v];
  }
  return counts;
}

void require_chw(const Tensor& t, const char* what) {
  if (t.rank() != 3) {
    throw InputError(std::string(what) + ": expected (C, H, W) tensor, got " + to_string(t.shape()));
  }
}

void require_probability_map(const ProbabilityMap& p, double tolerance) {
  require_chw(p, "probability map");
  const int c = p.channels();
  const std::size_t plane = static_cast<std::size_t>(p.height()) * static_cast<std::size_t>(p.width());
  for (std::size_t i = 0; i < plane; ++i) {
    double sum = 0.0;
    for (int k = 0; k < c; ++k) {
      const double v = p[static_cast<std::size_t>(k) * plane + i];
      if (!(v >= 0.0)) throw InputError("probability map has a negative or NaN entry");
      sum += v;
    }
    if (std::abs(sum - 1.0) > tolerance) {
      throw InputError("probability map pixel " + std::to_string(i) + " sums to " + std::to_string(sum));
    }
  }
}

LabelMap argmax(const ProbabilityMap& p) {
  require_chw(p, "argmax");
  LabelMap out(p.height(), p.width());
  const std::size_t plane = out.size();
  for (std::size_t i = 0; i < plane; ++i) {
    int best = 0;
    double best_v = p[i];
    for (int k = 1; k < p.channels(); ++k) {
      const double v = p[static_cast<std::size_t>(k) * plane + i];
      if (v > best_v) {
        best_v = v;
        best = k;
      }
    }
    out[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

ProbabilityMap one_hot(const LabelMap& labels, int num_classes) {
  ProbabilityMap out({num_classes, labels.height(), labels.width()});
  const std::size_t plane = labels.size();
  for (std::size_t i = 0; i < plane; ++i) {
    const int k = labels[i];
    if (k >= num_classes) {
      throw InputError("class index " + std::to_string(k) + " >= " + std::to_string(num_classes));
    }
    out[static_cast<std::size_t>(k) * plane + i] = 1.0;
  }
  return out;
}

std::uint64_t fingerprint(std::span<const double> values, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (double v : values) {
    unsigned char bytes[sizeof(double)];
    std::memcpy(bytes, &v, sizeof(double));
    for (unsigned char b : bytes) {
      h ^= b;
      h *= 1099511628211ULL;
    }
  }
  return h;
}

}  // namespace mkd
