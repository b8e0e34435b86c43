#include "mkd/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "mkd/binary_io.hpp"
#include "mkd/errors.hpp"

namespace mkd {

namespace {

constexpr std::uint32_t kCheckpointMagic = 0x43444B4D;  // "MKDC"
constexpr std::uint32_t kCheckpointVersion = 1;

using ad::Graph;
using ad::Var;

double scalar(const Graph& g, Var v) { return g.value(v)[0]; }

void require_finite(double v, const char* term, std::int64_t iteration) {
  if (!std::isfinite(v)) {
    throw TrainingError("non-finite " + std::string(term) + " (" + std::to_string(v) + ") at iteration " +
                        std::to_string(iteration));
  }
}

void accumulate(std::vector<Tensor>& acc, const std::vector<Tensor>& g) {
  if (acc.empty()) {
    acc = g;
    return;
  }
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
}

void scale(std::vector<Tensor>& grads, double s) {
  for (Tensor& t : grads) {
    for (double& v : t.values()) v *= s;
  }
}

void require_batches(const IterationContext& ctx, bool need_assistant) {
  if (ctx.batch_t == nullptr || ctx.batch_t->empty()) throw InputError("training step: empty target batch");
  if (need_assistant && (ctx.batch_a == nullptr || ctx.batch_a->size() != ctx.batch_t->size())) {
    throw InputError("training step: assistant batch must match the target batch size");
  }
}

std::int64_t current_iteration(const TrainerState& s) { return s.iteration + 1; }

std::uint64_t checksum(std::string_view bytes) {
  std::uint64_t h = 14695981039346656037ULL;
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  return h;
}

Var weighted(Graph& g, std::initializer_list<Var> terms, std::initializer_list<double> weights) {
  std::vector<Var> t(terms);
  std::vector<double> w(weights);
  return ad::weighted_sum(g, t, w);
}

// Supervised update of one segmentor on a batch; used by the single-segmentor modes.
double supervised_update(TrainerState& s, NetId id, const Batch& batch, const TrainingConfig& cfg) {
  std::vector<Tensor> acc;
  double loss = 0.0;
  for (const LabeledSample& x : batch) {
    Graph g;
    BoundNetwork net = bind(g, s.net(id), true);
    Var sup = loss_ops::supervised(g, x.label, forward(g, net, g.constant(x.image)), cfg.dice_options());
    loss += scalar(g, sup);
    g.backward(sup);
    accumulate(acc, gradients(g, net));
  }
  loss /= static_cast<double>(batch.size());
  require_finite(loss, "sup", current_iteration(s));
  scale(acc, 1.0 / static_cast<double>(batch.size()));
  adam_update(s.net(id), s.optimizer(id), acc);
  return loss;
}

void update_discriminator(TrainerState& s, NetId id, const Batch& real, const std::vector<Image>& fakes,
                          ReplayBuffer& pool, const TrainingConfig& cfg, double& report, const char* term) {
  if (fakes.size() != real.size()) throw InputError("discriminator step: generator step has not run");
  std::vector<Tensor> acc;
  double loss = 0.0;
  for (std::size_t i = 0; i < real.size(); ++i) {
    const Image fake = pool.query(fakes[i], s.pool_rng);
    Graph g;
    BoundNetwork d = bind(g, s.net(id), true);
    Var d_real = forward(g, d, g.constant(real[i].image));
    Var d_fake = forward(g, d, g.constant(fake));
    Var l = loss_ops::adversarial_d(g, d_real, d_fake, cfg.gan_variant);
    loss += scalar(g, l);
    g.backward(l);
    accumulate(acc, gradients(g, d));
  }
  loss /= static_cast<double>(real.size());
  require_finite(loss, term, current_iteration(s));
  report = loss;
  scale(acc, 1.0 / static_cast<double>(real.size()));
  adam_update(s.net(id), s.optimizer(id), acc);
}

void shuffle(std::vector<std::uint32_t>& order, Rng& rng) {
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[uniform_index(rng, i)]);
  }
}

std::vector<std::uint32_t> iota_order(std::size_t n) {
  std::vector<std::uint32_t> v(n);
  std::iota(v.begin(), v.end(), 0u);
  return v;
}

}  // namespace

std::string to_string(TrainingMode m) {
  switch (m) {
    case TrainingMode::mkd: return "mkd";
    case TrainingMode::baseline: return "baseline";
    case TrainingMode::fine_tune: return "fine_tune";
    case TrainingMode::joint_training: return "joint_training";
    case TrainingMode::no_iam: return "no_iam";
    case TrainingMode::kd_s2r_only: return "kd_s2r_only";
    case TrainingMode::kd_r2s_only: return "kd_r2s_only";
  }
  return "?";
}

TrainingMode parse_training_mode(const std::string& s) {
  for (TrainingMode m : {TrainingMode::mkd, TrainingMode::baseline, TrainingMode::fine_tune,
                         TrainingMode::joint_training, TrainingMode::no_iam, TrainingMode::kd_s2r_only,
                         TrainingMode::kd_r2s_only}) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError("unknown training mode '" + s + "'");
}

bool single_segmentor_mode(TrainingMode m) {
  return m == TrainingMode::baseline || m == TrainingMode::fine_tune || m == TrainingMode::joint_training;
}

std::string to_string(NetId id) {
  static const char* names[] = {"G_a2t", "G_t2a", "D_a", "D_t", "S_syn", "S_real"};
  return names[static_cast<int>(id)];
}

void TrainingConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (!(lambda_cyc >= 0.0)) fail("lambda_cyc must be >= 0");
  if (!(lambda_kd1 >= 0.0)) fail("lambda_kd1 must be >= 0");
  if (!(lambda_kd2 >= 0.0)) fail("lambda_kd2 must be >= 0");
  if (!(lr > 0.0) || !std::isfinite(lr)) fail("lr must be > 0");
  if (!(segmentor_decay > 0.0 && segmentor_decay <= 1.0)) fail("segmentor_decay must be in (0, 1]");
  if (decay_every < 1) fail("decay_every must be >= 1");
  if (epochs < 0) fail("epochs must be >= 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (replay_buffer_size < 0) fail("replay_buffer_size must be >= 0");
  if (!(gan_beta1 >= 0.0 && gan_beta1 < 1.0) || !(seg_beta1 >= 0.0 && seg_beta1 < 1.0)) {
    fail("beta1 must be in [0, 1)");
  }
  if (!(beta2 >= 0.0 && beta2 < 1.0)) fail("beta2 must be in [0, 1)");
  if (!(adam_eps > 0.0)) fail("adam_eps must be > 0");
  if (!(gen_sup_weight >= 0.0)) fail("gen_sup_weight must be >= 0");
  if (early_stop_patience < 0) fail("early_stop_patience must be >= 0");
  if (checkpoint_every < 0) fail("checkpoint_every must be >= 0");
  if (checkpoint_every > 0 && checkpoint_dir.empty()) fail("checkpoint_every needs checkpoint_dir");
  NetworkSpec{NetworkKind::generator, gen_width, gen_depth, 0, gan_variant}.validate();
  NetworkSpec{NetworkKind::discriminator, disc_width, disc_depth, 0, gan_variant}.validate();
  NetworkSpec{NetworkKind::segmentor, seg_width, seg_depth, 2, gan_variant}.validate();
}

double TrainingConfig::effective_lambda_kd1() const { return mode == TrainingMode::kd_r2s_only ? 0.0 : lambda_kd1; }
double TrainingConfig::effective_lambda_kd2() const { return mode == TrainingMode::kd_s2r_only ? 0.0 : lambda_kd2; }

AdamState make_adam(const Network& net, double lr, double beta1, double beta2, double eps) {
  AdamState s;
  for (const Tensor& p : net.params()) {
    s.m.push_back(Tensor::zeros_like(p));
    s.v.push_back(Tensor::zeros_like(p));
  }
  s.base_lr = lr;
  s.lr = lr;
  s.beta1 = beta1;
  s.beta2 = beta2;
  s.eps = eps;
  return s;
}

void adam_update(Network& net, AdamState& opt, const std::vector<Tensor>& grads) {
  auto& params = net.mutable_params();
  if (grads.size() != params.size() || opt.m.size() != params.size()) {
    throw InputError("adam: gradient / state count does not match the network");
  }
  ++opt.step;
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(opt.step));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(opt.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k].values();
    auto g = grads[k].values();
    auto m = opt.m[k].values();
    auto v = opt.v[k].values();
    if (g.size() != p.size()) throw InputError("adam: gradient shape mismatch");
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i];
      v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i];
      p[i] -= opt.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + opt.eps);
    }
  }
}

void decay_segmentor_lr(AdamState& opt, int epoch, const TrainingConfig& cfg) {
  opt.lr = opt.base_lr * std::pow(cfg.segmentor_decay, static_cast<double>(epoch / cfg.decay_every));
}

Image ReplayBuffer::query(const Image& image, Rng& rng) {
  if (capacity_ == 0) return image;
  if (images_.size() < capacity_) {
    images_.push_back(image);
    return image;
  }
  if (uniform(rng, 0.0, 1.0) < 0.5) {
    const std::size_t k = uniform_index(rng, images_.size());
    Image old = std::move(images_[k]);
    images_[k] = image;
    return old;
  }
  return image;
}

namespace {

struct MetricField {
  const char* name;
  double LossReport::*member;
};

constexpr MetricField kMetricFields[] = {
    {"adv_t", &LossReport::adv_t},       {"adv_a", &LossReport::adv_a},       {"cyc", &LossReport::cyc},
    {"sup_syn", &LossReport::sup_syn},   {"sup_real", &LossReport::sup_real}, {"kd_s2r", &LossReport::kd_s2r},
    {"kd_r2s", &LossReport::kd_r2s},     {"seg_syn", &LossReport::seg_syn},   {"seg_real", &LossReport::seg_real},
    {"total", &LossReport::total},       {"d_t", &LossReport::d_t},           {"d_a", &LossReport::d_a},
};

std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string format_metrics_line(const MetricsRecord& r) {
  std::string out = "iter=" + std::to_string(r.iteration) + " epoch=" + std::to_string(r.epoch) +
                    " seg_lr=" + g17(r.seg_lr);
  for (const MetricField& f : kMetricFields) out += std::string(" ") + f.name + "=" + g17(r.report.*f.member);
  return out;
}

MetricsRecord parse_metrics_line(const std::string& line) {
  MetricsRecord r;
  std::istringstream is(line);
  std::string tok;
  while (is >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) throw FormatError("metrics line: malformed token '" + tok + "'");
    const std::string key = tok.substr(0, eq);
    const std::string val = tok.substr(eq + 1);
    try {
      if (key == "iter") {
        r.iteration = std::stoll(val);
      } else if (key == "epoch") {
        r.epoch = std::stoi(val);
      } else if (key == "seg_lr") {
        r.seg_lr = std::stod(val);
      } else {
        bool found = false;
        for (const MetricField& f : kMetricFields) {
          if (key == f.name) {
            r.report.*f.member = std::stod(val);
            found = true;
          }
        }
        if (!found) throw FormatError("metrics line: unknown key '" + key + "'");
      }
    } catch (const std::logic_error&) {
      throw FormatError("metrics line: bad value for '" + key + "'");
    }
  }
  return r;
}

double metric_value(const MetricsRecord& r, const std::string& field) {
  if (field == "seg_lr") return r.seg_lr;
  for (const MetricField& f : kMetricFields) {
    if (field == f.name) return r.report.*f.member;
  }
  throw ConfigError("unknown metrics field '" + field + "'");
}

TrainerState initialize_state(const TrainingConfig& cfg, int num_classes) {
  cfg.validate();
  const NetworkSpec gen{NetworkKind::generator, cfg.gen_width, cfg.gen_depth, 0, cfg.gan_variant};
  const NetworkSpec disc{NetworkKind::discriminator, cfg.disc_width, cfg.disc_depth, 0, cfg.gan_variant};
  const NetworkSpec seg{NetworkKind::segmentor, cfg.seg_width, cfg.seg_depth, num_classes, cfg.gan_variant};
  TrainerState s;
  for (int i = 0; i < kNetworkCount; ++i) {
    const auto id = static_cast<NetId>(i);
    const NetworkSpec& spec = (id == NetId::g_a2t || id == NetId::g_t2a) ? gen
                              : (id == NetId::d_a || id == NetId::d_t) ? disc
                                                                         : seg;
    s.nets[static_cast<std::size_t>(i)] = build_network(spec, derive_seed(cfg.seed, "init-" + to_string(id)));
    const bool segmentor = spec.kind == NetworkKind::segmentor;
    s.opt[static_cast<std::size_t>(i)] = make_adam(s.nets[static_cast<std::size_t>(i)], cfg.lr,
                                                   segmentor ? cfg.seg_beta1 : cfg.gan_beta1, cfg.beta2, cfg.adam_eps);
  }
  s.pool_t = ReplayBuffer(static_cast<std::size_t>(cfg.replay_buffer_size));
  s.pool_a = ReplayBuffer(static_cast<std::size_t>(cfg.replay_buffer_size));
  s.pool_rng.seed(derive_seed(cfg.seed, "replay"));
  s.sampler.shuffle_rng.seed(derive_seed(cfg.seed, "shuffle"));
  s.sampler.assistant_rng.seed(derive_seed(cfg.seed, "assistant"));
  s.sampler.augment_rng.seed(derive_seed(cfg.seed, "augment"));
  return s;
}

namespace steps {

void update_generator_a2t(TrainerState& s, IterationContext& ctx, const TrainingConfig& cfg) {
  require_batches(ctx, true);
  const Batch& bt = *ctx.batch_t;
  const Batch& ba = *ctx.batch_a;
  std::vector<Tensor> acc;
  double adv = 0.0, cyc = 0.0;
  ctx.fake_t.clear();
  for (std::size_t i = 0; i < bt.size(); ++i) {
    Graph g;
    BoundNetwork g_a2t = bind(g, s.net(NetId::g_a2t), true);
    BoundNetwork g_t2a = bind(g, s.net(NetId::g_t2a), false);
    BoundNetwork d_t = bind(g, s.net(NetId::d_t), false);
    BoundNetwork s_syn = bind(g, s.net(NetId::s_syn), false);
    Var x_a = g.constant(ba[i].image);
    Var x_t = g.constant(bt[i].image);

    Var fake_t = forward(g, g_a2t, x_a);
    Var rec_a = forward(g, g_t2a, fake_t);
    Var rec_t = forward(g, g_a2t, forward(g, g_t2a, x_t));
    Var l_adv = loss_ops::adversarial_g(g, forward(g, d_t, fake_t), cfg.gan_variant);
    Var l_cyc = loss_ops::cycle(g, x_a, rec_a, x_t, rec_t);
    Var l_sup = loss_ops::supervised(g, ba[i].label, forward(g, s_syn, fake_t), cfg.dice_options());
    Var obj = weighted(g, {l_adv, l_cyc, l_sup}, {1.0, cfg.lambda_cyc, cfg.gen_sup_weight});

    adv += scalar(g, l_adv);
    cyc += scalar(g, l_cyc);
    require_finite(scalar(g, obj), "gan_a2t", current_iteration(s));
    ctx.fake_t.push_back(g.value(fake_t));
    g.backward(obj);
    accumulate(acc, gradients(g, g_a2t));
  }
  const double n = static_cast<double>(bt.size());
  ctx.report.adv_t = adv / n;
  ctx.report.cyc = cyc / n;
  require_finite(ctx.report.adv_t, "adv_t", current_iteration(s));
  require_finite(ctx.report.cyc, "cyc", current_iteration(s));
  scale(acc, 1.0 / n);
  adam_update(s.net(NetId::g_a2t), s.optimizer(NetId::g_a2t), acc);
}

void update_discriminator_t(TrainerState& s, IterationContext& ctx, const TrainingConfig& cfg) {
  require_batches(ctx, true);
  update_discriminator(s, NetId::d_t, *ctx.batch_t, ctx.fake_t, s.pool_t, cfg, ctx.report.d_t, "d_t");
}

void update_generator_t2a(TrainerState& s, IterationContext& ctx, const TrainingConfig& cfg) {
  require_batches(ctx, true);
  const Batch& bt = *ctx.batch_t;
  const Batch& ba = *ctx.batch_a;
  std::vector<Tensor> acc;
  double adv = 0.0;
  ctx.fake_a.clear();
  ctx.fake_t_current.clear();
  for (std::size_t i = 0; i < bt.size(); ++i) {
    Graph g;
    BoundNetwork g_t2a = bind(g, s.net(NetId::g_t2a), true);
    BoundNetwork g_a2t = bind(g, s.net(NetId::g_a2t), false);
    BoundNetwork d_a = bind(g, s.net(NetId::d_a), false);
    Var x_a = g.constant(ba[i].image);
    Var x_t = g.constant(bt[i].image);

    Var fake_a = forward(g, g_t2a, x_t);
    Var rec_t = forward(g, g_a2t, fake_a);
    Var fake_t = forward(g, g_a2t, x_a);
    Var rec_a = forward(g, g_t2a, fake_t);
    Var l_adv = loss_ops::adversarial_g(g, forward(g, d_a, fake_a), cfg.gan_variant);
    Var l_cyc = loss_ops::cycle(g, x_a, rec_a, x_t, rec_t);
    Var obj = weighted(g, {l_adv, l_cyc}, {1.0, cfg.lambda_cyc});

    adv += scalar(g, l_adv);
    require_finite(scalar(g, obj), "gan_t2a", current_iteration(s));
    ctx.fake_a.push_back(g.value(fake_a));
    ctx.fake_t_current.push_back(g.value(fake_t));
    g.backward(obj);
    accumulate(acc, gradients(g, g_t2a));
  }
  const double n = static_cast<double>(bt.size());
  ctx.report.adv_a = adv / n;
  require_finite(ctx.report.adv_a, "adv_a", current_iteration(s));
  scale(acc, 1.0 / n);
  adam_update(s.net(NetId::g_t2a), s.optimizer(NetId::g_t2a), acc);
}

void update_discriminator_a(TrainerState& s, IterationContext& ctx, const TrainingConfig& cfg) {
  require_batches(ctx, true);
  update_discriminator(s, NetId::d_a, *ctx.batch_a, ctx.fake_a, s.pool_a, cfg, ctx.report.d_a, "d_a");
}

void compute_segmentor_losses(TrainerState& s, IterationContext& ctx, const TrainingConfig& cfg) {
  require_batches(ctx, true);
  const Batch& bt = *ctx.batch_t;
  const Batch& ba = *ctx.batch_a;
  const double l1 = cfg.effective_lambda_kd1();
  const double l2 = cfg.effective_lambda_kd2();
  const DiceOptions dice = cfg.dice_options();
  std::vector<Tensor> acc_syn, acc_real;
  double sup_syn = 0.0, sup_real = 0.0, kd_s2r = 0.0, kd_r2s = 0.0;
  for (std::size_t i = 0; i < bt.size(); ++i) {
    Image source;
    if (cfg.mode == TrainingMode::no_iam) {
      source = ba[i].image;
    } else if (ctx.fake_t_current.size() == bt.size()) {
      source = ctx.fake_t_current[i];
    } else {
      source = translate(s.net(NetId::g_a2t), ba[i].image);
    }
    Graph g;
    BoundNetwork s_syn = bind(g, s.net(NetId::s_syn), true);
    BoundNetwork s_real = bind(g, s.net(NetId::s_real), true);
    Var x_src = g.constant(source);
    Var x_t = g.constant(bt[i].image);

    Var p_syn_src = forward(g, s_syn, x_src);
    Var p_syn_t = forward(g, s_syn, x_t);
    Var p_real_t = forward(g, s_real, x_t);
    Var l_sup_syn = loss_ops::supervised(g, ba[i].label, p_syn_src, dice);
    Var l_sup_real = loss_ops::supervised(g, bt[i].label, p_real_t, dice);
    // Each student sees its peer's prediction as a constant.
    Var l_kd_r2s = loss_ops::kd(g, g.value(p_real_t), p_syn_t);

    std::vector<Var> terms{l_sup_syn, l_sup_real, l_kd_r2s};
    std::vector<double> weights{1.0, 1.0, l2};
    if (l1 > 0.0) {
      Var p_real_src = forward(g, s_real, x_src);
      Var l_kd_s2r = loss_ops::kd(g, g.value(p_syn_src), p_real_src);
      kd_s2r += scalar(g, l_kd_s2r);
      terms.push_back(l_kd_s2r);
      weights.push_back(l1);
    } else {
      kd_s2r += kd_loss(g.value(p_syn_src), segment(s.net(NetId::s_real), source));
    }
    sup_syn += scalar(g, l_sup_syn);
    sup_real += scalar(g, l_sup_real);
    kd_r2s += scalar(g, l_kd_r2s);

    const char* names[] = {"sup_syn", "sup_real", "kd_r2s", "kd_s2r"};
    for (std::size_t k = 0; k < terms.size(); ++k) require_finite(scalar(g, terms[k]), names[k], current_iteration(s));
    Var obj = ad::weighted_sum(g, terms, weights);
    g.backward(obj);
    accumulate(acc_syn, gradients(g, s_syn));
    accumulate(acc_real, gradients(g, s_real));
  }
  const double n = static_cast<double>(bt.size());
  LossReport& r = ctx.report;
  r.sup_syn = sup_syn / n;
  r.sup_real = sup_real / n;
  r.kd_s2r = kd_s2r / n;
  r.kd_r2s = kd_r2s / n;
  r.seg_syn = segmentor_objective(r.sup_syn, r.kd_r2s, l2);
  r.seg_real = segmentor_objective(r.sup_real, r.kd_s2r, l1);
  const std::int64_t it = current_iteration(s);
  require_finite(r.sup_syn, "sup_syn", it);
  require_finite(r.sup_real, "sup_real", it);
  require_finite(r.kd_s2r, "kd_s2r", it);
  require_finite(r.kd_r2s, "kd_r2s", it);
  scale(acc_syn, 1.0 / n);
  scale(acc_real, 1.0 / n);
  ctx.grad_s_syn = std::move(acc_syn);
  ctx.grad_s_real = std::move(acc_real);
  ctx.segmentor_grads_ready = true;
}

void update_synthetic_segmentor(TrainerState& s, IterationContext& ctx, const TrainingConfig&) {
  if (!ctx.segmentor_grads_ready) throw InputError("segmentor update: losses have not been computed");
  adam_update(s.net(NetId::s_syn), s.optimizer(NetId::s_syn), ctx.grad_s_syn);
}

void update_real_segmentor(TrainerState& s, IterationContext& ctx, const TrainingConfig&) {
  if (!ctx.segmentor_grads_ready) throw InputError("segmentor update: losses have not been computed");
  adam_update(s.net(NetId::s_real), s.optimizer(NetId::s_real), ctx.grad_s_real);
}

}  // namespace steps

LossReport train_iteration(TrainerState& state, const Batch& batch_t, const Batch& batch_a,
                           const TrainingConfig& cfg) {
  IterationContext ctx;
  ctx.batch_t = &batch_t;
  ctx.batch_a = &batch_a;
  LossReport& r = ctx.report;
  switch (cfg.mode) {
    case TrainingMode::baseline:
      r.sup_real = supervised_update(state, NetId::s_real, batch_t, cfg);
      r.seg_real = r.sup_real;
      break;
    case TrainingMode::fine_tune:
      if (batch_t.empty()) {
        r.sup_syn = supervised_update(state, NetId::s_real, batch_a, cfg);
      } else {
        r.sup_real = supervised_update(state, NetId::s_real, batch_t, cfg);
        r.seg_real = r.sup_real;
      }
      break;
    case TrainingMode::joint_training:
      r.sup_real = supervised_update(state, NetId::s_real, batch_t, cfg);
      r.sup_syn = supervised_update(state, NetId::s_real, batch_a, cfg);
      r.seg_real = r.sup_real;
      break;
    case TrainingMode::no_iam:
      steps::compute_segmentor_losses(state, ctx, cfg);
      steps::update_synthetic_segmentor(state, ctx, cfg);
      steps::update_real_segmentor(state, ctx, cfg);
      break;
    case TrainingMode::mkd:
    case TrainingMode::kd_s2r_only:
    case TrainingMode::kd_r2s_only:
      steps::update_generator_a2t(state, ctx, cfg);
      steps::update_discriminator_t(state, ctx, cfg);
      steps::update_generator_t2a(state, ctx, cfg);
      steps::update_discriminator_a(state, ctx, cfg);
      steps::compute_segmentor_losses(state, ctx, cfg);
      steps::update_synthetic_segmentor(state, ctx, cfg);
      steps::update_real_segmentor(state, ctx, cfg);
      break;
  }
  if (cfg.mode == TrainingMode::mkd || cfg.mode == TrainingMode::kd_s2r_only ||
      cfg.mode == TrainingMode::kd_r2s_only) {
    r.finalize(cfg.lambda_cyc);
  } else {
    r.total = r.seg_syn + r.seg_real;
  }
  require_finite(r.total, "total", current_iteration(state));
  ++state.iteration;
  return r;
}

Trainer::Trainer(const Dataset& target, const Dataset& assistant, TrainingConfig cfg)
    : Trainer(target, assistant, cfg, initialize_state(cfg, target.num_classes)) {}

Trainer::Trainer(const Dataset& target, const Dataset& assistant, TrainingConfig cfg, TrainerState resumed)
    : target_(target), assistant_(assistant), cfg_(std::move(cfg)), state_(std::move(resumed)) {
  cfg_.validate();
  if (target_.size() == 0) throw ConfigError("training needs a non-empty target dataset");
  target_.validate();
  if (cfg_.mode != TrainingMode::baseline) {
    if (assistant_.size() == 0) throw ConfigError("mode " + to_string(cfg_.mode) + " needs assistant data");
    assistant_.validate();
    if (assistant_.num_classes != target_.num_classes) {
      throw ConfigError("assistant and target datasets disagree on num_classes (" +
                        std::to_string(assistant_.num_classes) + " vs " + std::to_string(target_.num_classes) + ")");
    }
    if (assistant_.image_size() != target_.image_size()) {
      throw ConfigError("assistant and target datasets disagree on image size (" +
                        std::to_string(assistant_.image_size()) + " vs " + std::to_string(target_.image_size()) + ")");
    }
  }
  if (state_.net(NetId::s_real).spec().num_classes != target_.num_classes) {
    throw ConfigError("segmentor class count does not match the target dataset");
  }
}

int Trainer::total_epochs() const { return cfg_.mode == TrainingMode::fine_tune ? 2 * cfg_.epochs : cfg_.epochs; }

bool Trainer::pretraining_phase() const {
  return cfg_.mode == TrainingMode::fine_tune && state_.epoch < cfg_.epochs;
}

const Dataset& Trainer::primary_dataset() const { return pretraining_phase() ? assistant_ : target_; }

std::int64_t Trainer::iterations_per_epoch() const {
  const auto n = static_cast<std::int64_t>(primary_dataset().size());
  return (n + cfg_.batch_size - 1) / cfg_.batch_size;
}

bool Trainer::finished() const { return state_.stopped_early || state_.epoch >= total_epochs(); }

void Trainer::begin_epoch() {
  SamplerState& sp = state_.sampler;
  sp.primary_order = iota_order(primary_dataset().size());
  shuffle(sp.primary_order, sp.shuffle_rng);
  sp.primary_cursor = 0;
  decay_segmentor_lr(state_.optimizer(NetId::s_syn), state_.epoch, cfg_);
  decay_segmentor_lr(state_.optimizer(NetId::s_real), state_.epoch, cfg_);
}

void Trainer::end_epoch() {
  const int finished_epoch = state_.epoch;
  state_.epoch += 1;
  state_.step_in_epoch = 0;
  // Leave the optimizers at the rate of the epoch about to start.
  decay_segmentor_lr(state_.optimizer(NetId::s_syn), state_.epoch, cfg_);
  decay_segmentor_lr(state_.optimizer(NetId::s_real), state_.epoch, cfg_);
  if (validation_ && cfg_.early_stop_patience > 0) {
    const double score = validation_(state_);
    if (score > state_.best_validation) {
      state_.best_validation = score;
      state_.epochs_without_improvement = 0;
    } else if (++state_.epochs_without_improvement >= cfg_.early_stop_patience) {
      state_.stopped_early = true;
    }
  }
  if (cfg_.checkpoint_every > 0 && (finished_epoch + 1) % cfg_.checkpoint_every == 0) {
    std::filesystem::create_directories(cfg_.checkpoint_dir);
    char name[64];
    std::snprintf(name, sizeof name, "checkpoint_epoch_%03d.bin", finished_epoch + 1);
    checkpoint_save(state_, std::filesystem::path(cfg_.checkpoint_dir) / name);
  }
}

LabeledSample Trainer::maybe_augment(const LabeledSample& s) {
  if (!cfg_.augment) return s;
  return augment_sample(s, state_.sampler.augment_rng());
}

Batch Trainer::next_primary_batch() {
  SamplerState& sp = state_.sampler;
  const Dataset& d = primary_dataset();
  Batch b;
  while (b.size() < static_cast<std::size_t>(cfg_.batch_size) && sp.primary_cursor < sp.primary_order.size()) {
    b.push_back(maybe_augment(d.samples[sp.primary_order[sp.primary_cursor++]]));
  }
  if (&d == &assistant_) state_.assistant_reads += static_cast<std::int64_t>(b.size());
  return b;
}

Batch Trainer::next_assistant_batch(std::size_t n) {
  SamplerState& sp = state_.sampler;
  Batch b;
  while (b.size() < n) {
    if (sp.assistant_cursor >= sp.assistant_order.size()) {
      sp.assistant_order = iota_order(assistant_.size());
      shuffle(sp.assistant_order, sp.assistant_rng);
      sp.assistant_cursor = 0;
    }
    b.push_back(maybe_augment(assistant_.samples[sp.assistant_order[sp.assistant_cursor++]]));
    ++state_.assistant_reads;
  }
  return b;
}

std::optional<MetricsRecord> Trainer::step() {
  if (finished()) return std::nullopt;
  if (state_.step_in_epoch == 0) begin_epoch();
  LossReport report;
  if (cfg_.mode == TrainingMode::baseline) {
    report = train_iteration(state_, next_primary_batch(), {}, cfg_);
  } else if (pretraining_phase()) {
    report = train_iteration(state_, {}, next_primary_batch(), cfg_);
  } else {
    Batch bt = next_primary_batch();
    Batch ba = cfg_.mode == TrainingMode::fine_tune ? Batch{} : next_assistant_batch(bt.size());
    report = train_iteration(state_, bt, ba, cfg_);
  }
  MetricsRecord rec{state_.iteration, state_.epoch, state_.optimizer(NetId::s_real).lr, report};
  metrics_.push_back(rec);
  if (sink_) sink_(rec);
  if (++state_.step_in_epoch >= iterations_per_epoch()) end_epoch();
  return rec;
}

void Trainer::run() {
  while (!finished()) step();
}

TrainingResult run_training(const Dataset& target, const Dataset& assistant, const TrainingConfig& cfg,
                            Trainer::ValidationFn validation) {
  Trainer t(target, assistant, cfg);
  t.set_validation(std::move(validation));
  t.run();
  return {t.state(), t.metrics()};
}

namespace {

void put_adam(io::Writer& w, const AdamState& a) {
  w.put<std::int64_t>(a.step);
  for (double v : {a.base_lr, a.lr, a.beta1, a.beta2, a.eps}) w.put<double>(v);
  w.put<std::uint64_t>(a.m.size());
  for (const Tensor& t : a.m) w.put_tensor(t);
  for (const Tensor& t : a.v) w.put_tensor(t);
}

AdamState get_adam(io::Reader& r, const Network& net) {
  AdamState a;
  a.step = r.get<std::int64_t>();
  a.base_lr = r.get<double>();
  a.lr = r.get<double>();
  a.beta1 = r.get<double>();
  a.beta2 = r.get<double>();
  a.eps = r.get<double>();
  const auto n = r.get<std::uint64_t>();
  if (n != net.params().size()) r.fail("optimizer state does not match its network");
  for (std::size_t i = 0; i < n; ++i) a.m.push_back(r.get_tensor());
  for (std::size_t i = 0; i < n; ++i) a.v.push_back(r.get_tensor());
  for (std::size_t i = 0; i < n; ++i) {
    if (a.m[i].shape() != net.params()[i].shape() || a.v[i].shape() != net.params()[i].shape()) {
      r.fail("optimizer moment shape mismatch");
    }
  }
  return a;
}

void put_pool(io::Writer& w, const ReplayBuffer& p) {
  w.put<std::uint64_t>(p.capacity());
  w.put<std::uint64_t>(p.images().size());
  for (const Image& im : p.images()) w.put_tensor(im);
}

ReplayBuffer get_pool(io::Reader& r) {
  ReplayBuffer p(r.get<std::uint64_t>());
  const auto n = r.get<std::uint64_t>();
  if (n > p.capacity()) r.fail("replay buffer larger than its capacity");
  for (std::size_t i = 0; i < n; ++i) p.mutable_images().push_back(r.get_tensor());
  return p;
}

void put_order(io::Writer& w, const std::vector<std::uint32_t>& v, std::size_t cursor) {
  w.put<std::uint64_t>(v.size());
  for (std::uint32_t x : v) w.put<std::uint32_t>(x);
  w.put<std::uint64_t>(cursor);
}

std::vector<std::uint32_t> get_order(io::Reader& r, std::size_t& cursor) {
  const auto n = r.get<std::uint64_t>();
  if (n > (1u << 28)) r.fail("sampler order too large");
  std::vector<std::uint32_t> v(n);
  for (auto& x : v) x = r.get<std::uint32_t>();
  cursor = r.get<std::uint64_t>();
  if (cursor > n) r.fail("sampler cursor out of range");
  return v;
}

Rng get_rng(io::Reader& r) {
  const std::string text = r.get_string();
  try {
    return deserialize_rng(text);
  } catch (const std::exception& e) {
    r.fail(std::string("bad generator state: ") + e.what());
  }
}

}  // namespace

void checkpoint_save(const TrainerState& s, const std::filesystem::path& file) {
  std::ostringstream os(std::ios::binary);
  io::Writer w(os);
  w.put<std::uint32_t>(kCheckpointMagic);
  w.put<std::uint32_t>(kCheckpointVersion);
  for (const Network& n : s.nets) save_network(n, os);
  for (const AdamState& a : s.opt) put_adam(w, a);
  put_pool(w, s.pool_t);
  put_pool(w, s.pool_a);
  w.put_string(serialize_rng(s.pool_rng));
  put_order(w, s.sampler.primary_order, s.sampler.primary_cursor);
  put_order(w, s.sampler.assistant_order, s.sampler.assistant_cursor);
  w.put_string(serialize_rng(s.sampler.shuffle_rng));
  w.put_string(serialize_rng(s.sampler.assistant_rng));
  w.put_string(serialize_rng(s.sampler.augment_rng));
  w.put<std::int64_t>(s.iteration);
  w.put<std::int32_t>(s.epoch);
  w.put<std::int64_t>(s.step_in_epoch);
  w.put<std::int64_t>(s.assistant_reads);
  w.put<double>(s.best_validation);
  w.put<std::int32_t>(s.epochs_without_improvement);
  w.put<std::uint8_t>(s.stopped_early ? 1 : 0);
  const std::string body = os.str();
  w.put<std::uint64_t>(checksum(body));

  const std::filesystem::path tmp = file.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw LoadError("cannot write " + tmp.string());
    const std::string all = os.str();
    out.write(all.data(), static_cast<std::streamsize>(all.size()));
    if (!out) throw LoadError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, file);
}

TrainerState checkpoint_load(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw LoadError("cannot open " + file.string());
  const std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (all.size() < 16) throw LoadError(file.string() + ": unexpected end of file (truncated)");
  std::istringstream is(all, std::ios::binary);
  io::Reader r(is, file.string());
  if (r.get<std::uint32_t>() != kCheckpointMagic) r.fail("not a training checkpoint");
  if (r.get<std::uint32_t>() != kCheckpointVersion) r.fail("unsupported checkpoint version");
  TrainerState s;
  for (Network& n : s.nets) n = load_network(is, file.string());
  for (std::size_t i = 0; i < s.opt.size(); ++i) s.opt[i] = get_adam(r, s.nets[i]);
  s.pool_t = get_pool(r);
  s.pool_a = get_pool(r);
  s.pool_rng = get_rng(r);
  s.sampler.primary_order = get_order(r, s.sampler.primary_cursor);
  s.sampler.assistant_order = get_order(r, s.sampler.assistant_cursor);
  s.sampler.shuffle_rng = get_rng(r);
  s.sampler.assistant_rng = get_rng(r);
  s.sampler.augment_rng = get_rng(r);
  s.iteration = r.get<std::int64_t>();
  s.epoch = r.get<std::int32_t>();
  s.step_in_epoch = r.get<std::int64_t>();
  s.assistant_reads = r.get<std::int64_t>();
  s.best_validation = r.get<double>();
  s.epochs_without_improvement = r.get<std::int32_t>();
  s.stopped_early = r.get<std::uint8_t>() != 0;
  const auto body_len = static_cast<std::size_t>(is.tellg());
  const auto stored = r.get<std::uint64_t>();
  if (stored != checksum(std::string_view(all).substr(0, body_len))) r.fail("checksum mismatch");
  if (static_cast<std::size_t>(is.tellg()) != all.size()) r.fail("trailing bytes after checkpoint");
  return s;
}

}  // namespace mkd
