#pragma once

#include <span>

namespace mkd::kernels {

/// Shape of a square-kernel 2-D convolution over a (C, H, W) input with
/// symmetric zero padding.
struct ConvGeometry {
  int in_channels = 1;
  int in_height = 1;
  int in_width = 1;
  int out_channels = 1;
  int kernel = 3;
  int stride = 1;
  int pad = 1;

  int out_height() const { return (in_height + 2 * pad - kernel) / stride + 1; }
  int out_width() const { return (in_width + 2 * pad - kernel) / stride + 1; }
  std::size_t input_size() const;
  std::size_t output_size() const;
  std::size_t weight_size() const;
};

// OpenMP-parallel kernels. Each output element is owned by exactly one thread
// and accumulated in a fixed order, so results are bitwise identical for any
// thread count.

/// out = conv(in, weight) + bias. `bias` may be empty.
void conv2d_forward(const ConvGeometry& g, std::span<const double> input,
                    std::span<const double> weight, std::span<const double> bias,
                    std::span<double> output);

/// grad_input += d(out)/d(in)^T grad_output.
void conv2d_backward_input(const ConvGeometry& g, std::span<const double> grad_output,
                           std::span<const double> weight, std::span<double> grad_input);

/// grad_weight += ..., grad_bias += ... (grad_bias may be empty).
void conv2d_backward_weight(const ConvGeometry& g, std::span<const double> grad_output,
                            std::span<const double> input, std::span<double> grad_weight,
                            std::span<double> grad_bias);

/// Serial, bounds-checked direct loops. Kept as the oracle the parallel
/// kernels are tested and benchmarked against.
namespace reference {

void conv2d_forward(const ConvGeometry& g, std::span<const double> input,
                    std::span<const double> weight, std::span<const double> bias,
                    std::span<double> output);
void conv2d_backward_input(const ConvGeometry& g, std::span<const double> grad_output,
                           std::span<const double> weight, std::span<double> grad_input);
void conv2d_backward_weight(const ConvGeometry& g, std::span<const double> grad_output,
                            std::span<const double> input, std::span<double> grad_weight,
                            std::span<double> grad_bias);

}  // namespace reference

}  // namespace mkd::kernels
