#include "mkd/kernels.hpp"

#include <algorithm>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "mkd/errors.hpp"

namespace mkd::kernels {

std::size_t ConvGeometry::input_size() const {
  return static_cast<std::size_t>(in_channels) * static_cast<std::size_t>(in_height) *
         static_cast<std::size_t>(in_width);
}

std::size_t ConvGeometry::output_size() const {
  return static_cast<std::size_t>(out_channels) * static_cast<std::size_t>(out_height()) *
         static_cast<std::size_t>(out_width());
}

std::size_t ConvGeometry::weight_size() const {
  return static_cast<std::size_t>(out_channels) * static_cast<std::size_t>(in_channels) *
         static_cast<std::size_t>(kernel) * static_cast<std::size_t>(kernel);
}

namespace {

void check(const ConvGeometry& g, std::size_t in, std::size_t w, std::size_t out) {
  if (g.kernel < 1 || g.stride < 1 || g.pad < 0 || g.out_height() < 1 || g.out_width() < 1) {
    throw InputError("invalid convolution geometry");
  }
  if (in != g.input_size() || w != g.weight_size() || out != g.output_size()) {
    throw InputError("convolution buffer sizes do not match geometry (in " + std::to_string(in) +
                     ", weight " + std::to_string(w) + ", out " + std::to_string(out) + ")");
  }
}

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix, 0, Eigen::OuterStride<>>;

// Eigen picks its vectorized path from operand addresses. Products run on
// owned, aligned copies so results depend on the shapes alone.
RowMatrix owned(const double* p, Eigen::Index rows, Eigen::Index cols) {
  return ConstMap(p, rows, cols, Eigen::OuterStride<>(cols));
}

// Work is split into blocks whose boundaries depend only on the geometry,
// never on the thread count.
constexpr int kColumnsPerBlock = 512;
constexpr int kChannelsPerGroup = 4;

int rows_per_block(const ConvGeometry& g) { return std::max(1, kColumnsPerBlock / g.out_width()); }

// Rows [ic0, ic1) x k x k of the im2col matrix for output rows [y0, y1).
// Row r = (ic * k + ky) * k + kx, column (y - y0) * ow + x.
void im2col(const ConvGeometry& g, const double* in, int ic0, int ic1, int y0, int y1, double* col) {
  const int ow = g.out_width();
  const int k = g.kernel;
  const int s = g.stride;
  const std::size_t cols = static_cast<std::size_t>(y1 - y0) * ow;
  for (int ic = ic0; ic < ic1; ++ic) {
    const double* plane = in + static_cast<std::size_t>(ic) * g.in_height * g.in_width;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        double* dst = col + (static_cast<std::size_t>((ic - ic0) * k + ky) * k + kx) * cols;
        for (int y = y0; y < y1; ++y) {
          const int iy = y * s + ky - g.pad;
          double* row = dst + static_cast<std::size_t>(y - y0) * ow;
          if (iy < 0 || iy >= g.in_height) {
            std::fill(row, row + ow, 0.0);
            continue;
          }
          const double* src = plane + static_cast<std::size_t>(iy) * g.in_width;
          for (int x = 0; x < ow; ++x) {
            const int ix = x * s + kx - g.pad;
            row[x] = (ix >= 0 && ix < g.in_width) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

// Adds the columns of `col` (laid out as in im2col over all output rows) back
// onto input channels [ic0, ic1).
void col2im(const ConvGeometry& g, const double* col, int ic0, int ic1, double* grad_in) {
  const int oh = g.out_height();
  const int ow = g.out_width();
  const int k = g.kernel;
  const int s = g.stride;
  const std::size_t cols = static_cast<std::size_t>(oh) * ow;
  for (int ic = ic0; ic < ic1; ++ic) {
    double* plane = grad_in + static_cast<std::size_t>(ic) * g.in_height * g.in_width;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const double* src = col + (static_cast<std::size_t>((ic - ic0) * k + ky) * k + kx) * cols;
        for (int y = 0; y < oh; ++y) {
          const int iy = y * s + ky - g.pad;
          if (iy < 0 || iy >= g.in_height) continue;
          double* dst = plane + static_cast<std::size_t>(iy) * g.in_width;
          const double* row = src + static_cast<std::size_t>(y) * ow;
          for (int x = 0; x < ow; ++x) {
            const int ix = x * s + kx - g.pad;
            if (ix >= 0 && ix < g.in_width) dst[ix] += row[x];
          }
        }
      }
    }
  }
}

}  // namespace

void conv2d_forward(const ConvGeometry& g, std::span<const double> input,
                    std::span<const double> weight, std::span<const double> bias,
                    std::span<double> output) {
  check(g, input.size(), weight.size(), output.size());
  const int oh = g.out_height();
  const int ow = g.out_width();
  const int kk = g.kernel * g.kernel;
  const Eigen::Index r = static_cast<Eigen::Index>(g.in_channels) * kk;
  const std::size_t plane = static_cast<std::size_t>(oh) * ow;
  const int rows = rows_per_block(g);
  const int blocks = (oh + rows - 1) / rows;
  const RowMatrix w = owned(weight.data(), g.out_channels, r);

#pragma omp parallel
  {
    RowMatrix col, prod;
#pragma omp for schedule(static)
    for (int b = 0; b < blocks; ++b) {
      const int y0 = b * rows;
      const int y1 = std::min(oh, y0 + rows);
      const Eigen::Index n = static_cast<Eigen::Index>(y1 - y0) * ow;
      col.resize(r, n);
      im2col(g, input.data(), 0, g.in_channels, y0, y1, col.data());
      prod.noalias() = w * col;
      for (int oc = 0; oc < g.out_channels; ++oc) {
        const double add = bias.empty() ? 0.0 : bias[static_cast<std::size_t>(oc)];
        double* dst = output.data() + static_cast<std::size_t>(oc) * plane + static_cast<std::size_t>(y0) * ow;
        for (Eigen::Index j = 0; j < n; ++j) dst[j] = prod(oc, j) + add;
      }
    }
  }
}

void conv2d_backward_input(const ConvGeometry& g, std::span<const double> grad_output,
                           std::span<const double> weight, std::span<double> grad_input) {
  check(g, grad_input.size(), weight.size(), grad_output.size());
  const int kk = g.kernel * g.kernel;
  const Eigen::Index r = static_cast<Eigen::Index>(g.in_channels) * kk;
  const Eigen::Index plane = static_cast<Eigen::Index>(g.out_height()) * g.out_width();
  const int groups = (g.in_channels + kChannelsPerGroup - 1) / kChannelsPerGroup;
  const RowMatrix w = owned(weight.data(), g.out_channels, r);
  const RowMatrix go = owned(grad_output.data(), g.out_channels, plane);

#pragma omp parallel
  {
    RowMatrix col;
#pragma omp for schedule(static)
    for (int grp = 0; grp < groups; ++grp) {
      const int ic0 = grp * kChannelsPerGroup;
      const int ic1 = std::min(g.in_channels, ic0 + kChannelsPerGroup);
      const Eigen::Index rg = static_cast<Eigen::Index>(ic1 - ic0) * kk;
      col.noalias() = w.middleCols(static_cast<Eigen::Index>(ic0) * kk, rg).transpose() * go;
      col2im(g, col.data(), ic0, ic1, grad_input.data());
    }
  }
}

void conv2d_backward_weight(const ConvGeometry& g, std::span<const double> grad_output,
                            std::span<const double> input, std::span<double> grad_weight,
                            std::span<double> grad_bias) {
  check(g, input.size(), grad_weight.size(), grad_output.size());
  if (!grad_bias.empty() && grad_bias.size() != static_cast<std::size_t>(g.out_channels)) {
    throw InputError("bias gradient size does not match output channels");
  }
  const int oh = g.out_height();
  const int kk = g.kernel * g.kernel;
  const Eigen::Index r = static_cast<Eigen::Index>(g.in_channels) * kk;
  const Eigen::Index plane = static_cast<Eigen::Index>(oh) * g.out_width();
  const int groups = (g.in_channels + kChannelsPerGroup - 1) / kChannelsPerGroup;
  const RowMatrix go = owned(grad_output.data(), g.out_channels, plane);

  if (!grad_bias.empty()) {
#pragma omp parallel for schedule(static)
    for (int oc = 0; oc < g.out_channels; ++oc) grad_bias[static_cast<std::size_t>(oc)] += go.row(oc).sum();
  }

#pragma omp parallel
  {
    RowMatrix col, part;
#pragma omp for schedule(static)
    for (int grp = 0; grp < groups; ++grp) {
      const int ic0 = grp * kChannelsPerGroup;
      const int ic1 = std::min(g.in_channels, ic0 + kChannelsPerGroup);
      const Eigen::Index rg = static_cast<Eigen::Index>(ic1 - ic0) * kk;
      col.resize(rg, plane);
      im2col(g, input.data(), ic0, ic1, 0, oh, col.data());
      part.noalias() = go * col.transpose();
      for (int oc = 0; oc < g.out_channels; ++oc) {
        double* dst = grad_weight.data() + static_cast<std::size_t>(oc) * r + static_cast<std::size_t>(ic0) * kk;
        for (Eigen::Index j = 0; j < rg; ++j) dst[j] += part(oc, j);
      }
    }
  }
}

namespace reference {

namespace {

double input_at(const ConvGeometry& g, std::span<const double> in, int c, int y, int x) {
  if (y < 0 || x < 0 || y >= g.in_height || x >= g.in_width) return 0.0;
  return in[(static_cast<std::size_t>(c) * g.in_height + y) * g.in_width + x];
}

std::size_t weight_index(const ConvGeometry& g, int oc, int ic, int ky, int kx) {
  return ((static_cast<std::size_t>(oc) * g.in_channels + ic) * g.kernel + ky) * g.kernel + kx;
}

}  // namespace

void conv2d_forward(const ConvGeometry& g, std::span<const double> input,
                    std::span<const double> weight, std::span<const double> bias,
                    std::span<double> output) {
  check(g, input.size(), weight.size(), output.size());
  const int oh = g.out_height();
  const int ow = g.out_width();
  for (int oc = 0; oc < g.out_channels; ++oc) {
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        double sum = bias.empty() ? 0.0 : bias[static_cast<std::size_t>(oc)];
        for (int ic = 0; ic < g.in_channels; ++ic) {
          for (int ky = 0; ky < g.kernel; ++ky) {
            for (int kx = 0; kx < g.kernel; ++kx) {
              sum += weight[weight_index(g, oc, ic, ky, kx)] *
                     input_at(g, input, ic, y * g.stride + ky - g.pad, x * g.stride + kx - g.pad);
            }
          }
        }
        output[(static_cast<std::size_t>(oc) * oh + y) * ow + x] = sum;
      }
    }
  }
}

void conv2d_backward_input(const ConvGeometry& g, std::span<const double> grad_output,
                           std::span<const double> weight, std::span<double> grad_input) {
  check(g, grad_input.size(), weight.size(), grad_output.size());
  const int oh = g.out_height();
  const int ow = g.out_width();
  for (int oc = 0; oc < g.out_channels; ++oc) {
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        const double go = grad_output[(static_cast<std::size_t>(oc) * oh + y) * ow + x];
        for (int ic = 0; ic < g.in_channels; ++ic) {
          for (int ky = 0; ky < g.kernel; ++ky) {
            for (int kx = 0; kx < g.kernel; ++kx) {
              const int iy = y * g.stride + ky - g.pad;
              const int ix = x * g.stride + kx - g.pad;
              if (iy < 0 || ix < 0 || iy >= g.in_height || ix >= g.in_width) continue;
              grad_input[(static_cast<std::size_t>(ic) * g.in_height + iy) * g.in_width + ix] +=
                  weight[weight_index(g, oc, ic, ky, kx)] * go;
            }
          }
        }
      }
    }
  }
}

void conv2d_backward_weight(const ConvGeometry& g, std::span<const double> grad_output,
                            std::span<const double> input, std::span<double> grad_weight,
                            std::span<double> grad_bias) {
  check(g, input.size(), grad_weight.size(), grad_output.size());
  const int oh = g.out_height();
  const int ow = g.out_width();
  for (int oc = 0; oc < g.out_channels; ++oc) {
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        const double go = grad_output[(static_cast<std::size_t>(oc) * oh + y) * ow + x];
        if (!grad_bias.empty()) grad_bias[static_cast<std::size_t>(oc)] += go;
        for (int ic = 0; ic < g.in_channels; ++ic) {
          for (int ky = 0; ky < g.kernel; ++ky) {
            for (int kx = 0; kx < g.kernel; ++kx) {
              grad_weight[weight_index(g, oc, ic, ky, kx)] +=
                  go * input_at(g, input, ic, y * g.stride + ky - g.pad, x * g.stride + kx - g.pad);
            }
          }
        }
      }
    }
  }
}

}  // namespace reference

}  // namespace mkd::kernels
