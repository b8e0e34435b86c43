#include "mkd/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mkd/errors.hpp"
#include "mkd/kernels.hpp"

namespace mkd::ad {

const Graph::Node& Graph::node(Var v) const {
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
    throw InputError("graph: invalid variable id " + std::to_string(v.id));
  }
  return nodes_[static_cast<std::size_t>(v.id)];
}

Graph::Node& Graph::node(Var v) {
  return const_cast<Node&>(static_cast<const Graph*>(this)->node(v));
}

Var Graph::constant(Tensor value) { return leaf(std::move(value), false); }

Var Graph::leaf(Tensor value, bool trainable) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = trainable;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size() - 1)};
}

Var Graph::record(Tensor value, std::span<const Var> inputs, BackwardFn backward) {
  bool needs = false;
  for (Var in : inputs) needs = needs || node(in).requires_grad;
  Node n;
  n.value = std::move(value);
  n.requires_grad = needs;
  if (needs) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size() - 1)};
}

const Tensor& Graph::value(Var v) const { return node(v).value; }

bool Graph::requires_grad(Var v) const { return node(v).requires_grad; }

Tensor Graph::grad(Var v) const {
  const Node& n = node(v);
  if (n.has_grad) return n.grad;
  return Tensor::zeros_like(n.value);
}

Tensor& Graph::grad_buffer(Var v) {
  Node& n = node(v);
  if (!n.has_grad) {
    n.grad = Tensor::zeros_like(n.value);
    n.has_grad = true;
  }
  return n.grad;
}

void Graph::backward(Var loss) {
  if (node(loss).value.size() != 1) {
    throw InputError("backward: loss must be a scalar, got shape " + to_string(node(loss).value.shape()));
  }
  for (Node& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor();
  }
  if (!node(loss).requires_grad) return;
  grad_buffer(loss)[0] = 1.0;
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.has_grad || !n.backward) continue;
    n.backward(*this, n.grad);
  }
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw InputError(std::string(op) + ": shape " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

// y = f(x) elementwise, dy/dx evaluated from x.
template <typename F, typename DF>
Var unary(Graph& g, Var x, F f, DF df) {
  const Tensor& xv = g.value(x);
  Tensor out = Tensor::zeros_like(xv);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  const Var inputs[] = {x};
  return g.record(std::move(out), inputs, [x, df](Graph& gr, const Tensor& go) {
    if (!gr.requires_grad(x)) return;
    const Tensor& xv2 = gr.value(x);
    Tensor& gx = gr.grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i] * df(xv2[i]);
  });
}

double sigmoid_value(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

}  // namespace

Var conv2d(Graph& g, Var x, Var weight, Var bias, int stride, int pad) {
  const Tensor& xv = g.value(x);
  const Tensor& wv = g.value(weight);
  require_chw(xv, "conv2d input");
  if (wv.rank() != 4 || wv.dim(2) != wv.dim(3) || wv.dim(1) != xv.channels()) {
    throw InputError("conv2d: weight " + to_string(wv.shape()) + " incompatible with input " +
                     to_string(xv.shape()));
  }
  kernels::ConvGeometry geo{xv.channels(), xv.height(), xv.width(), wv.dim(0), wv.dim(2), stride, pad};
  if (geo.out_height() < 1 || geo.out_width() < 1) {
    throw InputError("conv2d: input " + to_string(xv.shape()) + " too small for kernel");
  }
  std::span<const double> bias_span;
  if (bias.valid()) {
    const Tensor& bv = g.value(bias);
    if (bv.size() != static_cast<std::size_t>(geo.out_channels)) {
      throw InputError("conv2d: bias size does not match output channels");
    }
    bias_span = bv.values();
  }
  Tensor out({geo.out_channels, geo.out_height(), geo.out_width()});
  kernels::conv2d_forward(geo, xv.values(), wv.values(), bias_span, out.values());

  std::vector<Var> inputs{x, weight};
  if (bias.valid()) inputs.push_back(bias);
  return g.record(std::move(out), inputs, [x, weight, bias, geo](Graph& gr, const Tensor& go) {
    if (gr.requires_grad(x)) {
      kernels::conv2d_backward_input(geo, go.values(), gr.value(weight).values(),
                                     gr.grad_buffer(x).values());
    }
    const bool need_w = gr.requires_grad(weight);
    const bool need_b = bias.valid() && gr.requires_grad(bias);
    if (need_w) {
      std::span<double> gb;
      if (need_b) gb = gr.grad_buffer(bias).values();
      kernels::conv2d_backward_weight(geo, go.values(), gr.value(x).values(),
                                      gr.grad_buffer(weight).values(), gb);
    } else if (need_b) {
      Tensor& gb = gr.grad_buffer(bias);
      const std::size_t plane = static_cast<std::size_t>(geo.out_height()) * geo.out_width();
      for (int c = 0; c < geo.out_channels; ++c) {
        double s = 0.0;
        for (std::size_t i = 0; i < plane; ++i) s += go[static_cast<std::size_t>(c) * plane + i];
        gb[static_cast<std::size_t>(c)] += s;
      }
    }
  });
}

Var add(Graph& g, Var a, Var b) {
  require_same_shape(g.value(a), g.value(b), "add");
  Tensor out = g.value(a);
  out += g.value(b);
  const Var inputs[] = {a, b};
  return g.record(std::move(out), inputs, [a, b](Graph& gr, const Tensor& go) {
    if (gr.requires_grad(a)) gr.grad_buffer(a) += go;
    if (gr.requires_grad(b)) gr.grad_buffer(b) += go;
  });
}

Var relu(Graph& g, Var x) {
  return unary(
      g, x, [](double v) { return v < 0.0 ? 0.0 : v; }, [](double v) { return v < 0.0 ? 0.0 : 1.0; });
}

Var leaky_relu(Graph& g, Var x, double slope) {
  return unary(
      g, x, [slope](double v) { return v < 0.0 ? slope * v : v; },
      [slope](double v) { return v < 0.0 ? slope : 1.0; });
}

Var tanh(Graph& g, Var x) {
  return unary(
      g, x, [](double v) { return std::tanh(v); },
      [](double v) {
        const double t = std::tanh(v);
        return 1.0 - t * t;
      });
}

Var sigmoid(Graph& g, Var x, double clamp) {
  return unary(
      g, x, [clamp](double v) { return std::clamp(sigmoid_value(v), clamp, 1.0 - clamp); },
      [](double v) {
    const double s = sigmoid_value(v);
    return s * (1.0 - s);
  });
}

Var instance_norm(Graph& g, Var x, double eps) {
  const Tensor& xv = g.value(x);
  require_chw(xv, "instance_norm");
  const int c = xv.channels();
  const std::size_t plane = static_cast<std::size_t>(xv.height()) * xv.width();
  Tensor out = Tensor::zeros_like(xv);
  std::vector<double> inv_std(static_cast<std::size_t>(c));
#pragma omp parallel for schedule(static)
  for (int ch = 0; ch < c; ++ch) {
    const double* src = xv.data() + static_cast<std::size_t>(ch) * plane;
    double* dst = out.data() + static_cast<std::size_t>(ch) * plane;
    double mean = 0.0;
    for (std::size_t i = 0; i < plane; ++i) mean += src[i];
    mean /= static_cast<double>(plane);
    double var = 0.0;
    for (std::size_t i = 0; i < plane; ++i) var += (src[i] - mean) * (src[i] - mean);
    var /= static_cast<double>(plane);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(ch)] = is;
    for (std::size_t i = 0; i < plane; ++i) dst[i] = (src[i] - mean) * is;
  }
  Tensor normalized = out;
  const Var inputs[] = {x};
  return g.record(std::move(out), inputs,
                  [x, inv_std = std::move(inv_std), normalized = std::move(normalized), plane, c](
                      Graph& gr, const Tensor& go) {
                    if (!gr.requires_grad(x)) return;
                    Tensor& gx = gr.grad_buffer(x);
                    const double n = static_cast<double>(plane);
#pragma omp parallel for schedule(static)
                    for (int ch = 0; ch < c; ++ch) {
                      const std::size_t off = static_cast<std::size_t>(ch) * plane;
                      double mean_g = 0.0;
                      double mean_gy = 0.0;
                      for (std::size_t i = 0; i < plane; ++i) {
                        mean_g += go[off + i];
                        mean_gy += go[off + i] * normalized[off + i];
                      }
                      mean_g /= n;
                      mean_gy /= n;
                      const double is = inv_std[static_cast<std::size_t>(ch)];
                      for (std::size_t i = 0; i < plane; ++i) {
                        gx[off + i] += is * (go[off + i] - mean_g - normalized[off + i] * mean_gy);
                      }
                    }
                  });
}

Var upsample2x(Graph& g, Var x) {
  const Tensor& xv = g.value(x);
  require_chw(xv, "upsample2x");
  const int c = xv.channels();
  const int h = xv.height();
  const int w = xv.width();
  Tensor out({c, 2 * h, 2 * w});
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < 2 * h; ++y) {
      for (int xx = 0; xx < 2 * w; ++xx) out.at(ch, y, xx) = xv.at(ch, y / 2, xx / 2);
    }
  }
  const Var inputs[] = {x};
  return g.record(std::move(out), inputs, [x, c, h, w](Graph& gr, const Tensor& go) {
    if (!gr.requires_grad(x)) return;
    Tensor& gx = gr.grad_buffer(x);
    for (int ch = 0; ch < c; ++ch) {
      for (int y = 0; y < 2 * h; ++y) {
        for (int xx = 0; xx < 2 * w; ++xx) gx.at(ch, y / 2, xx / 2) += go.at(ch, y, xx);
      }
    }
  });
}

Var concat(Graph& g, Var a, Var b) {
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  require_chw(av, "concat");
  require_chw(bv, "concat");
  if (av.height() != bv.height() || av.width() != bv.width()) {
    throw InputError("concat: spatial shapes " + to_string(av.shape()) + " vs " + to_string(bv.shape()));
  }
  Tensor out({av.channels() + bv.channels(), av.height(), av.width()});
  std::copy(av.data(), av.data() + av.size(), out.data());
  std::copy(bv.data(), bv.data() + bv.size(), out.data() + av.size());
  const std::size_t split = av.size();
  const Var inputs[] = {a, b};
  return g.record(std::move(out), inputs, [a, b, split](Graph& gr, const Tensor& go) {
    if (gr.requires_grad(a)) {
      Tensor& ga = gr.grad_buffer(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i];
    }
    if (gr.requires_grad(b)) {
      Tensor& gb = gr.grad_buffer(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += go[split + i];
    }
  });
}

Var softmax_channels(Graph& g, Var logits) {
  const Tensor& lv = g.value(logits);
  require_chw(lv, "softmax");
  const int c = lv.channels();
  const std::size_t plane = static_cast<std::size_t>(lv.height()) * lv.width();
  Tensor out = Tensor::zeros_like(lv);
  for (std::size_t i = 0; i < plane; ++i) {
    double mx = lv[i];
    for (int k = 1; k < c; ++k) mx = std::max(mx, lv[static_cast<std::size_t>(k) * plane + i]);
    double sum = 0.0;
    for (int k = 0; k < c; ++k) {
      const double e = std::exp(lv[static_cast<std::size_t>(k) * plane + i] - mx);
      out[static_cast<std::size_t>(k) * plane + i] = e;
      sum += e;
    }
    for (int k = 0; k < c; ++k) out[static_cast<std::size_t>(k) * plane + i] /= sum;
  }
  Tensor probs = out;
  const Var inputs[] = {logits};
  return g.record(std::move(out), inputs,
                  [logits, probs = std::move(probs), c, plane](Graph& gr, const Tensor& go) {
                    if (!gr.requires_grad(logits)) return;
                    Tensor& gl = gr.grad_buffer(logits);
                    for (std::size_t i = 0; i < plane; ++i) {
                      double dot = 0.0;
                      for (int k = 0; k < c; ++k) {
                        const std::size_t j = static_cast<std::size_t>(k) * plane + i;
                        dot += go[j] * probs[j];
                      }
                      for (int k = 0; k < c; ++k) {
                        const std::size_t j = static_cast<std::size_t>(k) * plane + i;
                        gl[j] += probs[j] * (go[j] - dot);
                      }
                    }
                  });
}

Var weighted_sum(Graph& g, std::span<const Var> scalars, std::span<const double> weights) {
  if (scalars.size() != weights.size()) throw InputError("weighted_sum: size mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    if (g.value(scalars[i]).size() != 1) throw InputError("weighted_sum: operands must be scalars");
    total += weights[i] * g.value(scalars[i])[0];
  }
  std::vector<Var> ins(scalars.begin(), scalars.end());
  std::vector<double> ws(weights.begin(), weights.end());
  return g.record(Tensor({1}, total), ins, [ins, ws](Graph& gr, const Tensor& go) {
    for (std::size_t i = 0; i < ins.size(); ++i) {
      if (gr.requires_grad(ins[i])) gr.grad_buffer(ins[i])[0] += ws[i] * go[0];
    }
  });
}

Var detach(Graph& g, Var x) { return g.constant(g.value(x)); }

}  // namespace mkd::ad
