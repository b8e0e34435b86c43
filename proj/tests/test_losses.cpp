#include <doctest.h>

#include <cmath>
#include <functional>

#include "mkd/errors.hpp"
#include "mkd/losses.hpp"
#include "mkd/models.hpp"
#include "test_util.hpp"

using namespace mkd;
using ad::Graph;
using ad::Var;

namespace {

const double kLn2 = std::log(2.0);
const double kLn4 = std::log(4.0);

Tensor filled(const Shape& s, double v) { return Tensor(s, v); }

ProbabilityMap uniform_map(int c, int h, int w) { return filled({c, h, w}, 1.0 / c); }

using LossFn = std::function<Var(Graph&, const BoundNetwork&)>;

// Relative error between backprop and central differences over every
// parameter of `net`, for the scalar built by `loss`.
double network_gradient_error(Network net, const LossFn& loss) {
  auto eval = [&](bool grad, std::vector<Tensor>* out) {
    Graph g;
    const BoundNetwork b = bind(g, net, true);
    const Var l = loss(g, b);
    if (grad) {
      g.backward(l);
      *out = gradients(g, b);
    }
    return g.value(l)[0];
  };
  std::vector<Tensor> grads;
  eval(true, &grads);
  std::vector<double> analytic, numeric;
  for (std::size_t k = 0; k < net.params().size(); ++k) {
    for (std::size_t i = 0; i < net.params()[k].size(); ++i) {
      analytic.push_back(grads[k][i]);
      numeric.push_back(test::central_difference([&] { return eval(false, nullptr); }, net.mutable_params()[k][i]));
    }
  }
  return test::relative_error(analytic, numeric);
}

Network tiny(NetworkKind kind, GanVariant head = GanVariant::vanilla, int classes = 0) {
  NetworkSpec s{kind, 4, 1, classes, head};
  if (kind == NetworkKind::discriminator) s.depth = 2;
  Network n = build_network(s, 77);
  REQUIRE(n.parameter_count() <= 5000);
  return n;
}

}  // namespace

TEST_CASE("vanilla adversarial loss at one half") {
  const Tensor half = filled({1, 4, 4}, 0.5);
  const AdversarialLoss l = adversarial_loss(half, half, GanVariant::vanilla);
  CHECK(l.d_loss == doctest::Approx(2.0 * kLn2).epsilon(1e-12));
  CHECK(l.g_loss == doctest::Approx(kLn2).epsilon(1e-12));
  CHECK(l.d_loss == doctest::Approx(1.3863).epsilon(1e-4));
}

TEST_CASE("least-squares adversarial loss for a perfect discriminator") {
  const AdversarialLoss l = adversarial_loss(filled({1, 3, 3}, 1.0), filled({1, 3, 3}, 0.0), GanVariant::least_squares);
  CHECK(l.d_loss == 0.0);
  CHECK(l.g_loss == 1.0);
}

TEST_CASE("adversarial losses match their closed forms on random maps") {
  const Tensor r = test::random_tensor({1, 5, 5}, 1, 0.01, 0.99);
  const Tensor f = test::random_tensor({1, 5, 5}, 2, 0.01, 0.99);
  double d = 0.0, g = 0.0, dls = 0.0, gls = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    d += -std::log(r[i]) - std::log(1.0 - f[i]);
    g += -std::log(f[i]);
    dls += (r[i] - 1.0) * (r[i] - 1.0) + f[i] * f[i];
    gls += (f[i] - 1.0) * (f[i] - 1.0);
  }
  const double n = static_cast<double>(r.size());
  const AdversarialLoss v = adversarial_loss(r, f, GanVariant::vanilla);
  const AdversarialLoss ls = adversarial_loss(r, f, GanVariant::least_squares);
  CHECK(v.d_loss == doctest::Approx(d / n).epsilon(1e-12));
  CHECK(v.g_loss == doctest::Approx(g / n).epsilon(1e-12));
  CHECK(ls.d_loss == doctest::Approx(dls / n).epsilon(1e-12));
  CHECK(ls.g_loss == doctest::Approx(gls / n).epsilon(1e-12));
  CHECK(v.d_loss >= 0.0);
  CHECK(v.g_loss >= 0.0);
}

TEST_CASE("adversarial loss errors") {
  CHECK_THROWS_AS(adversarial_loss(filled({1, 2, 2}, 1.0), filled({1, 2, 2}, 0.5), GanVariant::vanilla), DomainError);
  CHECK_THROWS_AS(adversarial_loss(filled({1, 2, 2}, 0.5), filled({1, 2, 2}, 0.0), GanVariant::vanilla), DomainError);
  CHECK_THROWS_AS(adversarial_loss(filled({1, 2, 2}, 0.5), filled({1, 3, 3}, 0.5), GanVariant::vanilla), InputError);
}

TEST_CASE("cycle loss oracles") {
  const Image xa = test::random_tensor({1, 6, 6}, 3);
  const Image xt = test::random_tensor({1, 6, 6}, 4);
  CHECK(cycle_loss(xa, xa, xt, xt) == 0.0);
  Image xa1 = xa, xt1 = xt;
  for (double& v : xa1.values()) v += 0.1;
  for (double& v : xt1.values()) v += 0.1;
  CHECK(cycle_loss(xa, xa1, xt, xt1) == doctest::Approx(0.2).epsilon(1e-12));
  const Image ra = test::random_tensor({1, 6, 6}, 5);
  const Image rt = test::random_tensor({1, 6, 6}, 6);
  CHECK(cycle_loss(xa, ra, xt, rt) == doctest::Approx(cycle_loss(xt, rt, xa, ra)).epsilon(1e-15));
  CHECK_THROWS_AS(cycle_loss(xa, Image({1, 5, 5}), xt, rt), InputError);
}

TEST_CASE("generator objective") {
  CHECK(generator_objective(0.6931, 0.2, 10.0) == doctest::Approx(2.6931).epsilon(1e-12));
  CHECK(generator_objective(0.7, 0.3, 0.0) == 0.7);
  CHECK(generator_objective(0.7, 0.0, 10.0) == 0.7);
}

TEST_CASE("cross-entropy oracles") {
  CHECK(cross_entropy(test::random_labels(3, 3, 4, 1), uniform_map(4, 3, 3)) == doctest::Approx(kLn4).epsilon(1e-12));
  const LabelMap y = test::random_labels(4, 4, 3, 2);
  const double perfect = cross_entropy(y, one_hot(y, 3));
  CHECK(perfect >= 0.0);
  CHECK(perfect < 1e-12);
  // Soft target (0.8, 0.2) against a uniform two-class prediction.
  ProbabilityMap t({2, 1, 1}, std::vector<double>{0.8, 0.2});
  CHECK(cross_entropy(t, uniform_map(2, 1, 1)) == doctest::Approx(-0.8 * std::log(0.5) - 0.2 * std::log(0.5)));
  CHECK(cross_entropy(t, uniform_map(2, 1, 1)) == doctest::Approx(0.6931).epsilon(1e-4));
  // Hard labels behave like their one-hot encoding.
  const ProbabilityMap p = test::random_probabilities(3, 4, 4, 3);
  CHECK(cross_entropy(y, p) == doctest::Approx(cross_entropy(one_hot(y, 3), p)).epsilon(1e-14));
  LabelMap bad(1, 1, std::vector<std::uint8_t>{5});
  CHECK_THROWS_AS(cross_entropy(bad, uniform_map(4, 1, 1)), InputError);
}

TEST_CASE("soft dice oracles") {
  const LabelMap y = test::random_labels(5, 5, 3, 4);
  CHECK(soft_dice_loss(y, one_hot(y, 3)) < 1e-5);
  // Two pixels both of class 0 with p_0 = 0.5; only class 0 counted.
  LabelMap two(1, 2, std::vector<std::uint8_t>{0, 0});
  ProbabilityMap half({2, 1, 2}, std::vector<double>{0.5, 0.5, 0.5, 0.5});
  const DiceOptions no_smooth{0.0, true};
  // class 0: 2*1 / (1 + 2); class 1: 0 / (1 + 0)
  CHECK(soft_dice_loss(two, half, no_smooth) == doctest::Approx(1.0 - (2.0 / 3.0 + 0.0) / 2.0).epsilon(1e-12));
  const double eps = 1e-5;
  const double c0 = (2.0 + eps) / (3.0 + eps);
  const double c1 = eps / (1.0 + eps);
  CHECK(soft_dice_loss(two, half) == doctest::Approx(1.0 - (c0 + c1) / 2.0).epsilon(1e-12));
}

TEST_CASE("dice without background averages foreground classes only") {
  const LabelMap y = test::random_labels(4, 4, 3, 8);
  const ProbabilityMap p = test::random_probabilities(3, 4, 4, 9);
  const DiceOptions fg{1e-5, false};
  double sum = 0.0;
  for (int c = 1; c < 3; ++c) {
    double inter = 0.0, ps = 0.0, gs = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double g = y[i] == c ? 1.0 : 0.0;
      inter += p[c * 16 + i] * g;
      ps += p[c * 16 + i];
      gs += g;
    }
    sum += (2.0 * inter + 1e-5) / (ps + gs + 1e-5);
  }
  CHECK(soft_dice_loss(y, p, fg) == doctest::Approx(1.0 - sum / 2.0).epsilon(1e-12));
}

TEST_CASE("supervised loss is cross-entropy plus dice") {
  const LabelMap y = test::random_labels(4, 4, 4, 10);
  const ProbabilityMap p = test::random_probabilities(4, 4, 4, 11);
  CHECK(supervised_loss(y, p) == doctest::Approx(cross_entropy(y, p) + soft_dice_loss(y, p)).epsilon(1e-14));
  CHECK(supervised_loss(y, one_hot(y, 4)) < 1e-5);
  // Uniform prediction on an all-background 2x2 image.
  LabelMap zeros(2, 2, 0);
  const double eps = 1e-5;
  const double d0 = (2.0 * 1.0 + eps) / (1.0 + 4.0 + eps);
  const double dk = eps / (1.0 + eps);
  const double dice = 1.0 - (d0 + 3.0 * dk) / 4.0;
  CHECK(supervised_loss(zeros, uniform_map(4, 2, 2)) == doctest::Approx(kLn4 + dice).epsilon(1e-12));
}

TEST_CASE("kd loss oracles") {
  const LabelMap y = test::random_labels(3, 3, 3, 12);
  CHECK(kd_loss(one_hot(y, 3), one_hot(y, 3)) < 1e-12);
  CHECK(kd_loss(uniform_map(2, 3, 3), uniform_map(2, 3, 3)) == doctest::Approx(kLn2).epsilon(1e-12));
  CHECK_THROWS_AS(kd_loss(uniform_map(2, 3, 3), uniform_map(3, 3, 3)), InputError);
}

TEST_CASE("kd loss is minimized at the teacher") {
  // Gibbs' inequality, probed by moving the student along random simplex directions.
  const ProbabilityMap t = test::random_probabilities(4, 3, 3, 13);
  const double at_teacher = kd_loss(t, t);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const ProbabilityMap q = test::random_probabilities(4, 3, 3, 100 + seed);
    for (double step : {1e-3, 0.1, 0.5, 1.0}) {
      ProbabilityMap s = t;
      for (std::size_t i = 0; i < s.size(); ++i) s[i] = (1.0 - step) * t[i] + step * q[i];
      CHECK(kd_loss(t, s) >= at_teacher - 1e-15);
    }
  }
}

TEST_CASE("segmentor objective") {
  CHECK(segmentor_objective(1.0, 0.5, 0.5) == 1.25);
  CHECK(segmentor_objective(0.8, 3.0, 0.0) == 0.8);
}

TEST_CASE("loss report total is the sum of the four objectives") {
  LossReport r;
  r.adv_t = 0.7;
  r.adv_a = 0.9;
  r.cyc = 0.05;
  r.seg_syn = 1.1;
  r.seg_real = 1.3;
  r.d_t = 5.0;
  r.finalize(10.0);
  CHECK(r.total == doctest::Approx((0.7 + 10.0 * 0.05) + (0.9 + 10.0 * 0.05) + 1.1 + 1.3).epsilon(1e-15));
}

TEST_CASE("analytic map gradients match central differences") {
  const LabelMap y = test::random_labels(3, 3, 3, 20);
  ProbabilityMap p = test::random_probabilities(3, 3, 3, 21);
  const ProbabilityMap t = test::random_probabilities(3, 3, 3, 22);
  auto check = [&](const Tensor& g, const std::function<double()>& f, Tensor& x) {
    std::vector<double> a, n;
    for (std::size_t i = 0; i < x.size(); ++i) {
      a.push_back(g[i]);
      n.push_back(test::central_difference(f, x[i]));
    }
    return test::relative_error(a, n);
  };
  CHECK(check(soft_dice_grad(y, p), [&] { return soft_dice_loss(y, p); }, p) < 1e-6);
  CHECK(check(cross_entropy_grad(t, p), [&] { return cross_entropy(t, p); }, p) < 1e-6);
  for (GanVariant v : {GanVariant::vanilla, GanVariant::least_squares}) {
    Tensor r = test::random_tensor({1, 3, 3}, 23, 0.1, 0.9);
    Tensor f = test::random_tensor({1, 3, 3}, 24, 0.1, 0.9);
    const auto [gr, gf] = adversarial_d_grad(r, f, v);
    CHECK(check(gr, [&] { return adversarial_loss(r, f, v).d_loss; }, r) < 1e-6);
    CHECK(check(gf, [&] { return adversarial_loss(r, f, v).d_loss; }, f) < 1e-6);
    CHECK(check(adversarial_g_grad(f, v), [&] { return adversarial_loss(r, f, v).g_loss; }, f) < 1e-6);
  }
}

TEST_CASE("graph losses agree with the scalar functions") {
  const LabelMap y = test::random_labels(4, 4, 3, 30);
  const ProbabilityMap p = test::random_probabilities(3, 4, 4, 31);
  const ProbabilityMap t = test::random_probabilities(3, 4, 4, 32);
  Graph g;
  const Var pv = g.constant(p);
  CHECK(g.value(loss_ops::cross_entropy(g, y, pv))[0] == doctest::Approx(cross_entropy(y, p)).epsilon(1e-14));
  CHECK(g.value(loss_ops::soft_dice(g, y, pv))[0] == doctest::Approx(soft_dice_loss(y, p)).epsilon(1e-14));
  CHECK(g.value(loss_ops::supervised(g, y, pv))[0] == doctest::Approx(supervised_loss(y, p)).epsilon(1e-14));
  CHECK(g.value(loss_ops::kd(g, t, pv))[0] == doctest::Approx(kd_loss(t, p)).epsilon(1e-14));
  const Image a = test::random_tensor({1, 4, 4}, 33), b = test::random_tensor({1, 4, 4}, 34);
  const Image c = test::random_tensor({1, 4, 4}, 35), d = test::random_tensor({1, 4, 4}, 36);
  CHECK(g.value(loss_ops::cycle(g, g.constant(a), g.constant(b), g.constant(c), g.constant(d)))[0] ==
        doctest::Approx(cycle_loss(a, b, c, d)).epsilon(1e-14));
  const Tensor r = test::random_tensor({1, 3, 3}, 37, 0.1, 0.9), f = test::random_tensor({1, 3, 3}, 38, 0.1, 0.9);
  for (GanVariant v : {GanVariant::vanilla, GanVariant::least_squares}) {
    const AdversarialLoss ref = adversarial_loss(r, f, v);
    CHECK(g.value(loss_ops::adversarial_d(g, g.constant(r), g.constant(f), v))[0] ==
          doctest::Approx(ref.d_loss).epsilon(1e-14));
    CHECK(g.value(loss_ops::adversarial_g(g, g.constant(f), v))[0] == doctest::Approx(ref.g_loss).epsilon(1e-14));
  }
}

TEST_CASE("discriminator loss gradients on a tiny network") {
  const Image real = test::random_tensor({1, 16, 16}, 40);
  const Image fake = test::random_tensor({1, 16, 16}, 41);
  for (GanVariant v : {GanVariant::vanilla, GanVariant::least_squares}) {
    const double err = network_gradient_error(tiny(NetworkKind::discriminator, v), [&](Graph& g, const BoundNetwork& b) {
      return loss_ops::adversarial_d(g, forward(g, b, g.constant(real)), forward(g, b, g.constant(fake)), v);
    });
    CHECK(err < 1e-4);
  }
}

TEST_CASE("generator adversarial and cycle gradients on tiny networks") {
  const Image xa = test::random_tensor({1, 16, 16}, 42);
  const Image xt = test::random_tensor({1, 16, 16}, 43);
  const Network d = tiny(NetworkKind::discriminator);
  const Network back = tiny(NetworkKind::generator);
  const double adv = network_gradient_error(tiny(NetworkKind::generator), [&](Graph& g, const BoundNetwork& b) {
    const BoundNetwork db = bind(g, d, false);
    return loss_ops::adversarial_g(g, forward(g, db, forward(g, b, g.constant(xa))), GanVariant::vanilla);
  });
  CHECK(adv < 1e-4);
  const double cyc = network_gradient_error(tiny(NetworkKind::generator), [&](Graph& g, const BoundNetwork& b) {
    const BoundNetwork gb = bind(g, back, false);
    const Var xav = g.constant(xa), xtv = g.constant(xt);
    const Var rec_a = forward(g, gb, forward(g, b, xav));
    const Var rec_t = forward(g, b, forward(g, gb, xtv));
    return loss_ops::cycle(g, xav, rec_a, xtv, rec_t);
  });
  CHECK(cyc < 1e-4);
}

TEST_CASE("segmentation loss gradients on a tiny network") {
  const Image x = test::random_tensor({1, 16, 16}, 44);
  const LabelMap y = test::random_labels(16, 16, 3, 45);
  const ProbabilityMap teacher = test::random_probabilities(3, 16, 16, 46);
  const Network s = tiny(NetworkKind::segmentor, GanVariant::vanilla, 3);
  CHECK(network_gradient_error(s, [&](Graph& g, const BoundNetwork& b) {
          return loss_ops::cross_entropy(g, y, forward(g, b, g.constant(x)));
        }) < 1e-4);
  CHECK(network_gradient_error(s, [&](Graph& g, const BoundNetwork& b) {
          return loss_ops::soft_dice(g, y, forward(g, b, g.constant(x)));
        }) < 1e-4);
  CHECK(network_gradient_error(s, [&](Graph& g, const BoundNetwork& b) {
          return loss_ops::kd(g, teacher, forward(g, b, g.constant(x)));
        }) < 1e-4);
}

TEST_CASE("kd sends no gradient to the teacher network") {
  const Image x = test::random_tensor({1, 16, 16}, 47);
  const Network teacher = tiny(NetworkKind::segmentor, GanVariant::vanilla, 3);
  Network student = tiny(NetworkKind::segmentor, GanVariant::vanilla, 3);
  student.mutable_params()[0][0] += 0.3;
  Graph g;
  const BoundNetwork tb = bind(g, teacher, true);
  const BoundNetwork sb = bind(g, student, true);
  const Var pt = forward(g, tb, g.constant(x));
  const Var ps = forward(g, sb, g.constant(x));
  g.backward(loss_ops::kd(g, g.value(pt), ps));
  for (const Tensor& t : gradients(g, tb)) {
    for (double v : t.values()) CHECK(v == 0.0);
  }
  double norm = 0.0;
  for (const Tensor& t : gradients(g, sb)) {
    for (double v : t.values()) norm += v * v;
  }
  CHECK(norm > 0.0);
}
