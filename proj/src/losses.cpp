#include "mkd/losses.hpp"

#include <cmath>
#include <string>

#include "mkd/errors.hpp"

namespace mkd {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw InputError(std::string(what) + ": shape " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

void require_label_fits(const LabelMap& target, const ProbabilityMap& pred, const char* what) {
  require_chw(pred, what);
  if (target.height() != pred.height() || target.width() != pred.width()) {
    throw InputError(std::string(what) + ": label map " + std::to_string(target.height()) + "x" +
                     std::to_string(target.width()) + " vs prediction " + to_string(pred.shape()));
  }
  for (std::uint8_t v : target.values()) {
    if (v >= pred.channels()) {
      throw InputError(std::string(what) + ": class index " + std::to_string(v) + " >= " +
                       std::to_string(pred.channels()));
    }
  }
}

void require_open_unit(const Tensor& t, const char* what) {
  for (double v : t.values()) {
    if (!(v > 0.0 && v < 1.0)) {
      throw DomainError(std::string("vanilla adversarial loss: ") + what + " value " + std::to_string(v) +
                        " outside (0, 1)");
    }
  }
}

double clamped_log(double p) { return std::log(std::max(p, kProbabilityClamp)); }

struct DiceTerms {
  std::vector<double> inter, pred_sum, target_sum;
  int included = 0;
};

DiceTerms dice_terms(const LabelMap& target, const ProbabilityMap& pred, const DiceOptions& opts) {
  const int c = pred.channels();
  const std::size_t plane = target.size();
  DiceTerms t;
  t.inter.assign(static_cast<std::size_t>(c), 0.0);
  t.pred_sum.assign(static_cast<std::size_t>(c), 0.0);
  t.target_sum.assign(static_cast<std::size_t>(c), 0.0);
  for (int k = 0; k < c; ++k) {
    for (std::size_t i = 0; i < plane; ++i) {
      const double p = pred[static_cast<std::size_t>(k) * plane + i];
      const double gt = target[i] == k ? 1.0 : 0.0;
      t.inter[static_cast<std::size_t>(k)] += p * gt;
      t.pred_sum[static_cast<std::size_t>(k)] += p;
      t.target_sum[static_cast<std::size_t>(k)] += gt;
    }
  }
  t.included = opts.include_background ? c : c - 1;
  if (t.included < 1) throw InputError("soft dice: no classes to average");
  return t;
}

}  // namespace

AdversarialLoss adversarial_loss(const Tensor& d_real_out, const Tensor& d_fake_out, GanVariant variant) {
  require_same_shape(d_real_out, d_fake_out, "adversarial loss");
  if (d_real_out.empty()) throw InputError("adversarial loss: empty realness map");
  AdversarialLoss out;
  const double n = static_cast<double>(d_real_out.size());
  if (variant == GanVariant::vanilla) {
    require_open_unit(d_real_out, "real");
    require_open_unit(d_fake_out, "fake");
    double lr = 0.0;
    double lf = 0.0;
    double lg = 0.0;
    for (std::size_t i = 0; i < d_real_out.size(); ++i) {
      lr += std::log(d_real_out[i]);
      lf += std::log1p(-d_fake_out[i]);
      lg += std::log(d_fake_out[i]);
    }
    out.d_loss = -lr / n - lf / n;
    out.g_loss = -lg / n;
  } else {
    double lr = 0.0;
    double lf = 0.0;
    double lg = 0.0;
    for (std::size_t i = 0; i < d_real_out.size(); ++i) {
      lr += (d_real_out[i] - 1.0) * (d_real_out[i] - 1.0);
      lf += d_fake_out[i] * d_fake_out[i];
      lg += (d_fake_out[i] - 1.0) * (d_fake_out[i] - 1.0);
    }
    out.d_loss = lr / n + lf / n;
    out.g_loss = lg / n;
  }
  return out;
}

std::pair<Tensor, Tensor> adversarial_d_grad(const Tensor& d_real_out, const Tensor& d_fake_out, GanVariant variant) {
  require_same_shape(d_real_out, d_fake_out, "adversarial loss");
  const double n = static_cast<double>(d_real_out.size());
  Tensor gr = Tensor::zeros_like(d_real_out);
  Tensor gf = Tensor::zeros_like(d_fake_out);
  for (std::size_t i = 0; i < gr.size(); ++i) {
    if (variant == GanVariant::vanilla) {
      gr[i] = -1.0 / (n * d_real_out[i]);
      gf[i] = 1.0 / (n * (1.0 - d_fake_out[i]));
    } else {
      gr[i] = 2.0 * (d_real_out[i] - 1.0) / n;
      gf[i] = 2.0 * d_fake_out[i] / n;
    }
  }
  return {std::move(gr), std::move(gf)};
}

Tensor adversarial_g_grad(const Tensor& d_fake_out, GanVariant variant) {
  const double n = static_cast<double>(d_fake_out.size());
  Tensor gf = Tensor::zeros_like(d_fake_out);
  for (std::size_t i = 0; i < gf.size(); ++i) {
    gf[i] = variant == GanVariant::vanilla ? -1.0 / (n * d_fake_out[i]) : 2.0 * (d_fake_out[i] - 1.0) / n;
  }
  return gf;
}

double cycle_loss(const Image& x_a, const Image& x_a_rec, const Image& x_t, const Image& x_t_rec) {
  require_same_shape(x_a, x_a_rec, "cycle loss (assistant)");
  require_same_shape(x_t, x_t_rec, "cycle loss (target)");
  auto mae = [](const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(b[i] - a[i]);
    return s / static_cast<double>(a.size());
  };
  return mae(x_a, x_a_rec) + mae(x_t, x_t_rec);
}

double generator_objective(double adv_g, double cyc, double lambda_cyc) {
  if (lambda_cyc < 0.0) throw ConfigError("lambda_cyc must be >= 0");
  return adv_g + lambda_cyc * cyc;
}

double cross_entropy(const ProbabilityMap& target, const ProbabilityMap& pred) {
  require_chw(pred, "cross entropy");
  require_same_shape(target, pred, "cross entropy");
  const std::size_t plane = static_cast<std::size_t>(pred.height()) * pred.width();
  double s = 0.0;
  for (std::size_t j = 0; j < pred.size(); ++j) {
    if (target[j] != 0.0) s += target[j] * clamped_log(pred[j]);
  }
  return -s / static_cast<double>(plane);
}

double cross_entropy(const LabelMap& target, const ProbabilityMap& pred) {
  require_label_fits(target, pred, "cross entropy");
  const std::size_t plane = target.size();
  double s = 0.0;
  for (std::size_t i = 0; i < plane; ++i) s += clamped_log(pred[target[i] * plane + i]);
  return -s / static_cast<double>(plane);
}

Tensor cross_entropy_grad(const ProbabilityMap& target, const ProbabilityMap& pred) {
  require_chw(pred, "cross entropy");
  require_same_shape(target, pred, "cross entropy");
  const double n = static_cast<double>(pred.height()) * pred.width();
  Tensor g = Tensor::zeros_like(pred);
  for (std::size_t j = 0; j < pred.size(); ++j) {
    if (pred[j] > kProbabilityClamp) g[j] = -target[j] / (n * pred[j]);
  }
  return g;
}

double soft_dice_loss(const LabelMap& target, const ProbabilityMap& pred, const DiceOptions& opts) {
  require_label_fits(target, pred, "soft dice");
  const DiceTerms t = dice_terms(target, pred, opts);
  const int first = opts.include_background ? 0 : 1;
  double sum = 0.0;
  for (int k = first; k < pred.channels(); ++k) {
    const auto kk = static_cast<std::size_t>(k);
    sum += (2.0 * t.inter[kk] + opts.smooth) / (t.pred_sum[kk] + t.target_sum[kk] + opts.smooth);
  }
  return 1.0 - sum / t.included;
}

Tensor soft_dice_grad(const LabelMap& target, const ProbabilityMap& pred, const DiceOptions& opts) {
  require_label_fits(target, pred, "soft dice");
  const DiceTerms t = dice_terms(target, pred, opts);
  const int first = opts.include_background ? 0 : 1;
  const std::size_t plane = target.size();
  Tensor g = Tensor::zeros_like(pred);
  for (int k = first; k < pred.channels(); ++k) {
    const auto kk = static_cast<std::size_t>(k);
    const double num = 2.0 * t.inter[kk] + opts.smooth;
    const double den = t.pred_sum[kk] + t.target_sum[kk] + opts.smooth;
    for (std::size_t i = 0; i < plane; ++i) {
      const double gt = target[i] == k ? 1.0 : 0.0;
      const double d_dice = (2.0 * gt * den - num) / (den * den);
      g[kk * plane + i] = -d_dice / t.included;
    }
  }
  return g;
}

double supervised_loss(const LabelMap& target, const ProbabilityMap& pred, const DiceOptions& opts) {
  return cross_entropy(target, pred) + soft_dice_loss(target, pred, opts);
}

double kd_loss(const ProbabilityMap& teacher, const ProbabilityMap& student) {
  return cross_entropy(teacher, student);
}

double segmentor_objective(double sup, double kd, double lambda_kd) {
  if (lambda_kd < 0.0) throw ConfigError("lambda_kd must be >= 0");
  return sup + lambda_kd * kd;
}

namespace loss_ops {

namespace {

ad::Var scalar_node(ad::Graph& g, double value, std::span<const ad::Var> inputs, ad::Graph::BackwardFn fn) {
  return g.record(Tensor({1}, value), inputs, std::move(fn));
}

}  // namespace

ad::Var adversarial_d(ad::Graph& g, ad::Var d_real_out, ad::Var d_fake_out, GanVariant variant) {
  const AdversarialLoss l = adversarial_loss(g.value(d_real_out), g.value(d_fake_out), variant);
  const ad::Var inputs[] = {d_real_out, d_fake_out};
  return scalar_node(g, l.d_loss, inputs, [d_real_out, d_fake_out, variant](ad::Graph& gr, const Tensor& go) {
    auto [g_real, g_fake] = adversarial_d_grad(gr.value(d_real_out), gr.value(d_fake_out), variant);
    if (gr.requires_grad(d_real_out)) {
      Tensor& b = gr.grad_buffer(d_real_out);
      for (std::size_t i = 0; i < b.size(); ++i) b[i] += go[0] * g_real[i];
    }
    if (gr.requires_grad(d_fake_out)) {
      Tensor& b = gr.grad_buffer(d_fake_out);
      for (std::size_t i = 0; i < b.size(); ++i) b[i] += go[0] * g_fake[i];
    }
  });
}

ad::Var adversarial_g(ad::Graph& g, ad::Var d_fake_out, GanVariant variant) {
  const Tensor& fake = g.value(d_fake_out);
  const AdversarialLoss l = adversarial_loss(fake, fake, variant);
  const ad::Var inputs[] = {d_fake_out};
  return scalar_node(g, l.g_loss, inputs, [d_fake_out, variant](ad::Graph& gr, const Tensor& go) {
    if (!gr.requires_grad(d_fake_out)) return;
    const Tensor gf = adversarial_g_grad(gr.value(d_fake_out), variant);
    Tensor& b = gr.grad_buffer(d_fake_out);
    for (std::size_t i = 0; i < b.size(); ++i) b[i] += go[0] * gf[i];
  });
}

ad::Var l1(ad::Graph& g, ad::Var a, ad::Var b) {
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  require_same_shape(av, bv, "l1");
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += std::abs(av[i] - bv[i]);
  const double n = static_cast<double>(av.size());
  const ad::Var inputs[] = {a, b};
  return scalar_node(g, s / n, inputs, [a, b, n](ad::Graph& gr, const Tensor& go) {
    const Tensor& av2 = gr.value(a);
    const Tensor& bv2 = gr.value(b);
    const bool ga = gr.requires_grad(a);
    const bool gb = gr.requires_grad(b);
    for (std::size_t i = 0; i < av2.size(); ++i) {
      const double diff = av2[i] - bv2[i];
      const double sgn = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
      if (ga) gr.grad_buffer(a)[i] += go[0] * sgn / n;
      if (gb) gr.grad_buffer(b)[i] -= go[0] * sgn / n;
    }
  });
}

ad::Var cycle(ad::Graph& g, ad::Var x_a, ad::Var x_a_rec, ad::Var x_t, ad::Var x_t_rec) {
  const ad::Var terms[] = {l1(g, x_a_rec, x_a), l1(g, x_t_rec, x_t)};
  const double weights[] = {1.0, 1.0};
  return ad::weighted_sum(g, terms, weights);
}

ad::Var cross_entropy(ad::Graph& g, const LabelMap& target, ad::Var pred) {
  const double value = mkd::cross_entropy(target, g.value(pred));
  const ad::Var inputs[] = {pred};
  return scalar_node(g, value, inputs, [target, pred](ad::Graph& gr, const Tensor& go) {
    const Tensor& p = gr.value(pred);
    const Tensor grad = cross_entropy_grad(one_hot(target, p.channels()), p);
    Tensor& b = gr.grad_buffer(pred);
    for (std::size_t i = 0; i < b.size(); ++i) b[i] += go[0] * grad[i];
  });
}

ad::Var soft_dice(ad::Graph& g, const LabelMap& target, ad::Var pred, const DiceOptions& opts) {
  const double value = soft_dice_loss(target, g.value(pred), opts);
  const ad::Var inputs[] = {pred};
  return scalar_node(g, value, inputs, [target, pred, opts](ad::Graph& gr, const Tensor& go) {
    const Tensor grad = soft_dice_grad(target, gr.value(pred), opts);
    Tensor& b = gr.grad_buffer(pred);
    for (std::size_t i = 0; i < b.size(); ++i) b[i] += go[0] * grad[i];
  });
}

ad::Var supervised(ad::Graph& g, const LabelMap& target, ad::Var pred, const DiceOptions& opts) {
  const ad::Var terms[] = {cross_entropy(g, target, pred), soft_dice(g, target, pred, opts)};
  const double weights[] = {1.0, 1.0};
  return ad::weighted_sum(g, terms, weights);
}

ad::Var kd(ad::Graph& g, const ProbabilityMap& teacher, ad::Var student) {
  const double value = kd_loss(teacher, g.value(student));
  const ad::Var inputs[] = {student};
  return scalar_node(g, value, inputs, [teacher, student](ad::Graph& gr, const Tensor& go) {
    const Tensor grad = cross_entropy_grad(teacher, gr.value(student));
    Tensor& b = gr.grad_buffer(student);
    for (std::size_t i = 0; i < b.size(); ++i) b[i] += go[0] * grad[i];
  });
}

}  // namespace loss_ops

}  // namespace mkd
