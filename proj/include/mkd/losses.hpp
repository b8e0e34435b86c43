#pragma once

#include "mkd/autodiff.hpp"
#include "mkd/models.hpp"
#include "mkd/tensor.hpp"

namespace mkd {

/// Probabilities are clamped to at least this before taking logs.
inline constexpr double kProbabilityClamp = 1e-7;

struct DiceOptions {
  double smooth = 1e-5;
  bool include_background = true;
};

struct AdversarialLoss {
  double d_loss = 0.0;
  double g_loss = 0.0;
};

/// vanilla:       d = -mean log D(real) - mean log(1 - D(fake)),  g = -mean log D(fake)
/// least squares: d = mean (D(real) - 1)^2 + mean D(fake)^2,     g = mean (D(fake) - 1)^2
/// Vanilla requires every value strictly inside (0, 1); throws DomainError otherwise.
AdversarialLoss adversarial_loss(const Tensor& d_real_out, const Tensor& d_fake_out, GanVariant variant);

/// mean|x_a_rec - x_a| + mean|x_t_rec - x_t|
double cycle_loss(const Image& x_a, const Image& x_a_rec, const Image& x_t, const Image& x_t_rec);

double generator_objective(double adv_g, double cyc, double lambda_cyc);

/// -mean over pixels of Σ_c target_c log max(pred_c, clamp).
double cross_entropy(const ProbabilityMap& target, const ProbabilityMap& pred);
double cross_entropy(const LabelMap& target, const ProbabilityMap& pred);

/// 1 - mean_c (2 Σ p_c g_c + ε) / (Σ p_c + Σ g_c + ε)
double soft_dice_loss(const LabelMap& target, const ProbabilityMap& pred, const DiceOptions& opts = {});

double supervised_loss(const LabelMap& target, const ProbabilityMap& pred, const DiceOptions& opts = {});

/// Cross-entropy of the student against a constant teacher distribution.
double kd_loss(const ProbabilityMap& teacher, const ProbabilityMap& student);

double segmentor_objective(double sup, double kd, double lambda_kd);

// Analytic gradients with respect to the prediction / student / realness maps.
Tensor cross_entropy_grad(const ProbabilityMap& target, const ProbabilityMap& pred);
Tensor soft_dice_grad(const LabelMap& target, const ProbabilityMap& pred, const DiceOptions& opts = {});
/// Returns {d d_loss / d real, d d_loss / d fake}.
std::pair<Tensor, Tensor> adversarial_d_grad(const Tensor& d_real_out, const Tensor& d_fake_out, GanVariant variant);
Tensor adversarial_g_grad(const Tensor& d_fake_out, GanVariant variant);

/// Per-iteration loss terms. `total` is the framework objective
/// gan_a2t + gan_t2a + seg_syn + seg_real, where gan_x = adv_x + λ_cyc · cyc.
struct LossReport {
  double adv_t = 0.0;
  double adv_a = 0.0;
  double cyc = 0.0;
  double sup_syn = 0.0;
  double sup_real = 0.0;
  double kd_s2r = 0.0;
  double kd_r2s = 0.0;
  double seg_syn = 0.0;
  double seg_real = 0.0;
  double total = 0.0;
  double d_t = 0.0;  ///< discriminator losses, logged but not part of total
  double d_a = 0.0;

  double gan_a2t(double lambda_cyc) const { return generator_objective(adv_t, cyc, lambda_cyc); }
  double gan_t2a(double lambda_cyc) const { return generator_objective(adv_a, cyc, lambda_cyc); }
  void finalize(double lambda_cyc) { total = gan_a2t(lambda_cyc) + gan_t2a(lambda_cyc) + seg_syn + seg_real; }
};

namespace loss_ops {

ad::Var adversarial_d(ad::Graph& g, ad::Var d_real_out, ad::Var d_fake_out, GanVariant variant);
ad::Var adversarial_g(ad::Graph& g, ad::Var d_fake_out, GanVariant variant);
/// mean |a - b|
ad::Var l1(ad::Graph& g, ad::Var a, ad::Var b);
ad::Var cycle(ad::Graph& g, ad::Var x_a, ad::Var x_a_rec, ad::Var x_t, ad::Var x_t_rec);
ad::Var cross_entropy(ad::Graph& g, const LabelMap& target, ad::Var pred);
ad::Var soft_dice(ad::Graph& g, const LabelMap& target, ad::Var pred, const DiceOptions& opts = {});
ad::Var supervised(ad::Graph& g, const LabelMap& target, ad::Var pred, const DiceOptions& opts = {});
/// The teacher is taken by value: there is no graph path back to whatever produced it.
ad::Var kd(ad::Graph& g, const ProbabilityMap& teacher, ad::Var student);

}  // namespace loss_ops

}  // namespace mkd
