#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "mkd/autodiff.hpp"
#include "mkd/tensor.hpp"

namespace mkd {

enum class NetworkKind { generator, discriminator, segmentor };

/// Adversarial formulation. Also selects the discriminator's output head:
/// sigmoid for vanilla, identity for least squares.
enum class GanVariant { vanilla, least_squares };

std::string to_string(NetworkKind k);
std::string to_string(GanVariant v);
GanVariant parse_gan_variant(const std::string& s);

/// Architecture of one network.
///
/// generator (width w, depth d), channels c_i = w * 2^i:
///   stem   conv3x3 1 -> w, IN, ReLU
///   down_i conv3x3/2 c_i -> c_{i+1}, IN, ReLU            (i = 0..d-1)
///   res    [conv3x3 c_d -> c_d, IN, ReLU, conv3x3, IN] + identity
///   up_i   conv3x3 c_{i+1} -> c_i, IN, ReLU, upsample x2  (i = d-1..0)
///   head   conv3x3 w -> 1, tanh
///
/// discriminator (PatchGAN), channels c_i = w * 2^i:
///   conv4x4/2 1 -> w, LeakyReLU(0.2)
///   conv4x4/2 c_{i-1} -> c_i, IN, LeakyReLU(0.2)         (i = 1..d-1)
///   head conv3x3 c_{d-1} -> 1 [sigmoid for vanilla]
///   output grid: (H / 2^d) x (W / 2^d)
///
/// segmentor (residual U-Net), channels c_i = w * 2^i:
///   stem   conv3x3 1 -> w, IN, ReLU                       -> skip_0
///   down_i conv3x3/2 c_i -> c_{i+1}, IN, ReLU, res block  -> skip_{i+1}
///   up_i   conv3x3 c_{i+1} -> c_i, IN, ReLU, upsample x2,
///          concat skip_i, conv3x3 2c_i -> c_i, IN, ReLU
///   head   conv1x1 w -> num_classes, softmax
///
/// Every convolution carries a bias. IN is instance normalization without
/// affine parameters.
struct NetworkSpec {
  NetworkKind kind = NetworkKind::segmentor;
  int width = 8;
  int depth = 2;
  int num_classes = 0;  ///< segmentor only
  GanVariant head = GanVariant::vanilla;  ///< discriminator only

  void validate() const;
  bool operator==(const NetworkSpec&) const = default;
};

/// Parameter tensor shapes in storage order.
std::vector<Shape> parameter_shapes(const NetworkSpec& spec);

/// Side length of the discriminator's realness grid for a square input.
int patch_grid_size(int image_size, int depth);

class Network {
 public:
  Network() = default;
  Network(NetworkSpec spec, std::vector<Tensor> params);

  const NetworkSpec& spec() const { return spec_; }
  const std::vector<Tensor>& params() const { return params_; }
  std::vector<Tensor>& mutable_params() { return params_; }

  std::size_t parameter_count() const;
  /// Hash of all parameter values; changes iff any parameter changes.
  std::uint64_t fingerprint() const;

 private:
  NetworkSpec spec_;
  std::vector<Tensor> params_;
};

/// He-scaled zero-mean Gaussian weights, zero biases; deterministic in `init_seed`.
Network build_network(const NetworkSpec& spec, std::uint64_t init_seed);

/// A network's parameters placed on a graph. Frozen bindings let gradients
/// flow through the network to its input without touching its parameters.
struct BoundNetwork {
  const Network* network = nullptr;
  std::vector<ad::Var> params;
  bool trainable = false;
};

BoundNetwork bind(ad::Graph& g, const Network& net, bool trainable);
ad::Var forward(ad::Graph& g, const BoundNetwork& bound, ad::Var x);
/// d(loss)/d(params) after Graph::backward; zeros for frozen bindings.
std::vector<Tensor> gradients(const ad::Graph& g, const BoundNetwork& bound);

/// Inference helpers; never modify the network.
Image translate(const Network& generator, const Image& x);
Tensor discriminate(const Network& discriminator, const Image& x);
ProbabilityMap segment(const Network& segmentor, const Image& x);

void save_network(const Network& net, std::ostream& os);
Network load_network(std::istream& is, const std::string& source = "network");
void save_network(const Network& net, const std::filesystem::path& file);
Network load_network(const std::filesystem::path& file);

}  // namespace mkd
