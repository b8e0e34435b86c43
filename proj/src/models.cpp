#include "mkd/models.hpp"

#include <cmath>
#include <fstream>

#include "mkd/binary_io.hpp"
#include "mkd/errors.hpp"
#include "mkd/random.hpp"

namespace mkd {

std::string to_string(NetworkKind k) {
  switch (k) {
    case NetworkKind::generator: return "generator";
    case NetworkKind::discriminator: return "discriminator";
    case NetworkKind::segmentor: return "segmentor";
  }
  return "unknown";
}

std::string to_string(GanVariant v) { return v == GanVariant::vanilla ? "vanilla" : "least_squares"; }

GanVariant parse_gan_variant(const std::string& s) {
  if (s == "vanilla") return GanVariant::vanilla;
  if (s == "least_squares" || s == "lsgan") return GanVariant::least_squares;
  throw ConfigError("unknown gan variant '" + s + "' (expected vanilla or least_squares)");
}

void NetworkSpec::validate() const {
  if (width < 4) throw ConfigError("network spec: width must be >= 4");
  if (depth < 1) throw ConfigError("network spec: depth must be >= 1");
  if (depth > 6) throw ConfigError("network spec: depth must be <= 6");
  if (kind == NetworkKind::segmentor && num_classes < 2) {
    throw ConfigError("network spec: segmentor requires num_classes >= 2");
  }
}

namespace {

int channels_at(int width, int level) { return width << level; }

void conv_shapes(std::vector<Shape>& out, int in, int outc, int k) {
  out.push_back({outc, in, k, k});
  out.push_back({outc});
}

}  // namespace

std::vector<Shape> parameter_shapes(const NetworkSpec& spec) {
  spec.validate();
  std::vector<Shape> s;
  const int w = spec.width;
  const int d = spec.depth;
  switch (spec.kind) {
    case NetworkKind::generator: {
      conv_shapes(s, 1, w, 3);
      for (int i = 0; i < d; ++i) conv_shapes(s, channels_at(w, i), channels_at(w, i + 1), 3);
      const int cb = channels_at(w, d);
      conv_shapes(s, cb, cb, 3);
      conv_shapes(s, cb, cb, 3);
      for (int i = d - 1; i >= 0; --i) conv_shapes(s, channels_at(w, i + 1), channels_at(w, i), 3);
      conv_shapes(s, w, 1, 3);
      break;
    }
    case NetworkKind::discriminator: {
      conv_shapes(s, 1, w, 4);
      for (int i = 1; i < d; ++i) conv_shapes(s, channels_at(w, i - 1), channels_at(w, i), 4);
      conv_shapes(s, channels_at(w, d - 1), 1, 3);
      break;
    }
    case NetworkKind::segmentor: {
      conv_shapes(s, 1, w, 3);
      for (int i = 0; i < d; ++i) {
        const int c = channels_at(w, i + 1);
        conv_shapes(s, channels_at(w, i), c, 3);
        conv_shapes(s, c, c, 3);
        conv_shapes(s, c, c, 3);
      }
      for (int i = d - 1; i >= 0; --i) {
        const int c = channels_at(w, i);
        conv_shapes(s, channels_at(w, i + 1), c, 3);
        conv_shapes(s, 2 * c, c, 3);
      }
      conv_shapes(s, w, spec.num_classes, 1);
      break;
    }
  }
  return s;
}

int patch_grid_size(int image_size, int depth) {
  int n = image_size;
  for (int i = 0; i < depth; ++i) n = (n + 2 - 4) / 2 + 1;  // conv4x4, stride 2, pad 1
  return n;                                                  // 3x3 head keeps the size
}

Network::Network(NetworkSpec spec, std::vector<Tensor> params) : spec_(spec), params_(std::move(params)) {
  const auto shapes = parameter_shapes(spec_);
  if (shapes.size() != params_.size()) throw ConfigError("network: parameter count does not match spec");
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    if (params_[i].shape() != shapes[i]) {
      throw ConfigError("network: parameter " + std::to_string(i) + " has shape " + to_string(params_[i].shape()) +
                        ", expected " + to_string(shapes[i]));
    }
  }
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor& t : params_) n += t.size();
  return n;
}

std::uint64_t Network::fingerprint() const {
  std::uint64_t h = 14695981039346656037ULL;
  for (const Tensor& t : params_) h = mkd::fingerprint(t.values(), h);
  return h;
}

Network build_network(const NetworkSpec& spec, std::uint64_t init_seed) {
  const auto shapes = parameter_shapes(spec);
  Rng rng(derive_seed(init_seed, "network-init"));
  std::vector<Tensor> params;
  params.reserve(shapes.size());
  for (const Shape& shape : shapes) {
    Tensor t(shape);
    if (shape.size() == 4) {
      const double fan_in = static_cast<double>(shape[1] * shape[2] * shape[3]);
      const double stddev = std::sqrt(2.0 / fan_in);
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = stddev * standard_normal(rng);
    }
    params.push_back(std::move(t));
  }
  return Network(spec, std::move(params));
}

BoundNetwork bind(ad::Graph& g, const Network& net, bool trainable) {
  BoundNetwork b;
  b.network = &net;
  b.trainable = trainable;
  b.params.reserve(net.params().size());
  for (const Tensor& t : net.params()) b.params.push_back(g.leaf(t, trainable));
  return b;
}

namespace {

class Cursor {
 public:
  explicit Cursor(const BoundNetwork& b) : b_(b) {}
  ad::Var conv(ad::Graph& g, ad::Var x, int stride, int pad) {
    const ad::Var w = b_.params.at(next_++);
    const ad::Var bias = b_.params.at(next_++);
    return ad::conv2d(g, x, w, bias, stride, pad);
  }
  bool exhausted() const { return next_ == b_.params.size(); }

 private:
  const BoundNetwork& b_;
  std::size_t next_ = 0;
};

ad::Var conv_norm_relu(ad::Graph& g, Cursor& p, ad::Var x, int stride) {
  return ad::relu(g, ad::instance_norm(g, p.conv(g, x, stride, 1)));
}

ad::Var residual_block(ad::Graph& g, Cursor& p, ad::Var x) {
  const ad::Var h = conv_norm_relu(g, p, x, 1);
  return ad::add(g, x, ad::instance_norm(g, p.conv(g, h, 1, 1)));
}

void check_input(const NetworkSpec& spec, const Tensor& x) {
  if (x.rank() != 3 || x.channels() != 1) {
    throw InputError(to_string(spec.kind) + ": expected (1, H, W) input, got " + to_string(x.shape()));
  }
  const int m = 1 << spec.depth;
  if (x.height() % m != 0 || x.width() % m != 0 || x.height() < 2 * m || x.width() < 2 * m) {
    throw InputError(to_string(spec.kind) + ": input " + to_string(x.shape()) +
                     " must have sides divisible by " + std::to_string(m) + " and at least " +
                     std::to_string(2 * m));
  }
}

}  // namespace

ad::Var forward(ad::Graph& g, const BoundNetwork& bound, ad::Var x) {
  const NetworkSpec& spec = bound.network->spec();
  check_input(spec, g.value(x));
  Cursor p(bound);
  const int d = spec.depth;
  ad::Var out;
  switch (spec.kind) {
    case NetworkKind::generator: {
      ad::Var h = conv_norm_relu(g, p, x, 1);
      for (int i = 0; i < d; ++i) h = conv_norm_relu(g, p, h, 2);
      h = residual_block(g, p, h);
      for (int i = d - 1; i >= 0; --i) h = ad::upsample2x(g, conv_norm_relu(g, p, h, 1));
      out = ad::tanh(g, p.conv(g, h, 1, 1));
      break;
    }
    case NetworkKind::discriminator: {
      ad::Var h = ad::leaky_relu(g, p.conv(g, x, 2, 1), 0.2);
      for (int i = 1; i < d; ++i) h = ad::leaky_relu(g, ad::instance_norm(g, p.conv(g, h, 2, 1)), 0.2);
      h = p.conv(g, h, 1, 1);
      out = spec.head == GanVariant::vanilla ? ad::sigmoid(g, h, 1e-12) : h;
      break;
    }
    case NetworkKind::segmentor: {
      std::vector<ad::Var> skips;
      ad::Var h = conv_norm_relu(g, p, x, 1);
      skips.push_back(h);
      for (int i = 0; i < d; ++i) {
        h = conv_norm_relu(g, p, h, 2);
        h = residual_block(g, p, h);
        skips.push_back(h);
      }
      for (int i = d - 1; i >= 0; --i) {
        h = ad::upsample2x(g, conv_norm_relu(g, p, h, 1));
        h = conv_norm_relu(g, p, ad::concat(g, h, skips[static_cast<std::size_t>(i)]), 1);
      }
      out = ad::softmax_channels(g, p.conv(g, h, 1, 0));
      break;
    }
  }
  if (!p.exhausted()) throw ConfigError("network forward did not consume every parameter");
  return out;
}

std::vector<Tensor> gradients(const ad::Graph& g, const BoundNetwork& bound) {
  std::vector<Tensor> out;
  out.reserve(bound.params.size());
  for (ad::Var v : bound.params) out.push_back(g.grad(v));
  return out;
}

namespace {

Tensor run_inference(const Network& net, NetworkKind expected, const Image& x) {
  if (net.spec().kind != expected) {
    throw InputError("expected a " + to_string(expected) + ", got a " + to_string(net.spec().kind));
  }
  ad::Graph g;
  const BoundNetwork b = bind(g, net, false);
  const ad::Var out = forward(g, b, g.constant(x));
  return g.value(out);
}

}  // namespace

Image translate(const Network& generator, const Image& x) {
  return run_inference(generator, NetworkKind::generator, x);
}

Tensor discriminate(const Network& discriminator, const Image& x) {
  return run_inference(discriminator, NetworkKind::discriminator, x);
}

ProbabilityMap segment(const Network& segmentor, const Image& x) {
  return run_inference(segmentor, NetworkKind::segmentor, x);
}

namespace {

constexpr std::uint32_t kNetMagic = 0x4E444B4D;  // "MKDN"
constexpr std::uint32_t kNetVersion = 1;

}  // namespace

void save_network(const Network& net, std::ostream& os) {
  io::Writer w(os);
  const NetworkSpec& s = net.spec();
  w.put<std::uint32_t>(kNetMagic);
  w.put<std::uint32_t>(kNetVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(s.kind));
  w.put<std::int32_t>(s.width);
  w.put<std::int32_t>(s.depth);
  w.put<std::int32_t>(s.num_classes);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(s.head));
  w.put<std::uint64_t>(net.params().size());
  for (const Tensor& t : net.params()) w.put_tensor(t);
  w.put<std::uint64_t>(net.fingerprint());
}

Network load_network(std::istream& is, const std::string& source) {
  io::Reader r(is, source);
  if (r.get<std::uint32_t>() != kNetMagic) r.fail("not a network checkpoint");
  if (r.get<std::uint32_t>() != kNetVersion) r.fail("unsupported network checkpoint version");
  NetworkSpec s;
  const auto kind = r.get<std::uint32_t>();
  if (kind > 2) r.fail("unknown network kind");
  s.kind = static_cast<NetworkKind>(kind);
  s.width = r.get<std::int32_t>();
  s.depth = r.get<std::int32_t>();
  s.num_classes = r.get<std::int32_t>();
  const auto head = r.get<std::uint32_t>();
  if (head > 1) r.fail("unknown discriminator head");
  s.head = static_cast<GanVariant>(head);
  std::vector<Shape> shapes;
  try {
    shapes = parameter_shapes(s);
  } catch (const ConfigError& e) {
    r.fail(e.what());
  }
  const auto count = r.get<std::uint64_t>();
  if (count != shapes.size()) r.fail("parameter tensor count does not match spec");
  std::vector<Tensor> params;
  for (std::size_t i = 0; i < count; ++i) {
    Tensor t = r.get_tensor();
    if (t.shape() != shapes[i]) r.fail("parameter " + std::to_string(i) + " shape mismatch");
    params.push_back(std::move(t));
  }
  Network net(s, std::move(params));
  if (r.get<std::uint64_t>() != net.fingerprint()) r.fail("fingerprint mismatch");
  return net;
}

void save_network(const Network& net, const std::filesystem::path& file) {
  std::ofstream os(file, std::ios::binary | std::ios::trunc);
  if (!os) throw LoadError("cannot write " + file.string());
  save_network(net, os);
}

Network load_network(const std::filesystem::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw LoadError("cannot open " + file.string());
  return load_network(is, file.string());
}

}  // namespace mkd
