#include <doctest.h>
#include <omp.h>

#include "mkd/errors.hpp"
#include "mkd/kernels.hpp"
#include "test_util.hpp"

using namespace mkd;
using kernels::ConvGeometry;

namespace {

std::vector<double> random_values(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (double& x : v) x = uniform(rng, -1.0, 1.0);
  return v;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

std::vector<ConvGeometry> geometries() {
  std::vector<ConvGeometry> out;
  for (int k : {1, 3, 4}) {
    for (int s : {1, 2}) {
      for (int p : {0, 1}) {
        out.push_back({3, 9, 10, 5, k, s, p});
        out.push_back({1, 16, 16, 4, k, s, p});
      }
    }
  }
  return out;
}

}  // namespace

TEST_CASE("conv forward on a hand-computed 3x3 example") {
  // 2x2 kernel of ones over 1..9 sums each 2x2 window.
  ConvGeometry g{1, 3, 3, 1, 2, 1, 0};
  std::vector<double> in{1, 2, 3, 4, 5, 6, 7, 8, 9};
  std::vector<double> w{1, 1, 1, 1};
  std::vector<double> b{0.5};
  std::vector<double> out(4);
  kernels::conv2d_forward(g, in, w, b, out);
  CHECK(out == std::vector<double>{12.5, 16.5, 24.5, 28.5});
}

TEST_CASE("padded stride-2 output size") {
  ConvGeometry g{1, 16, 16, 1, 3, 2, 1};
  CHECK(g.out_height() == 8);
  ConvGeometry d{1, 16, 16, 1, 4, 2, 1};
  CHECK(d.out_width() == 8);
}

TEST_CASE("parallel forward matches the serial reference") {
  std::uint64_t seed = 1;
  for (const ConvGeometry& g : geometries()) {
    const auto in = random_values(g.input_size(), seed++);
    const auto w = random_values(g.weight_size(), seed++);
    const auto b = random_values(static_cast<std::size_t>(g.out_channels), seed++);
    std::vector<double> fast(g.output_size()), ref(g.output_size());
    kernels::conv2d_forward(g, in, w, b, fast);
    kernels::reference::conv2d_forward(g, in, w, b, ref);
    CHECK(max_abs_diff(fast, ref) < 1e-12);
  }
}

TEST_CASE("parallel backward kernels match the serial reference") {
  std::uint64_t seed = 100;
  for (const ConvGeometry& g : geometries()) {
    const auto in = random_values(g.input_size(), seed++);
    const auto w = random_values(g.weight_size(), seed++);
    const auto go = random_values(g.output_size(), seed++);

    std::vector<double> gi(g.input_size(), 0.25), gi_ref(g.input_size(), 0.25);
    kernels::conv2d_backward_input(g, go, w, gi);
    kernels::reference::conv2d_backward_input(g, go, w, gi_ref);
    CHECK(max_abs_diff(gi, gi_ref) < 1e-12);

    std::vector<double> gw(g.weight_size(), -0.5), gw_ref(g.weight_size(), -0.5);
    std::vector<double> gb(static_cast<std::size_t>(g.out_channels), 1.0), gb_ref = gb;
    kernels::conv2d_backward_weight(g, go, in, gw, gb);
    kernels::reference::conv2d_backward_weight(g, go, in, gw_ref, gb_ref);
    CHECK(max_abs_diff(gw, gw_ref) < 1e-12);
    CHECK(max_abs_diff(gb, gb_ref) < 1e-12);
  }
}

TEST_CASE("input gradient is the adjoint of the forward map") {
  // <conv(x), y> == <x, conv^T(y)> for every geometry (bias-free).
  std::uint64_t seed = 200;
  for (const ConvGeometry& g : geometries()) {
    const auto x = random_values(g.input_size(), seed++);
    const auto w = random_values(g.weight_size(), seed++);
    const auto y = random_values(g.output_size(), seed++);
    std::vector<double> cx(g.output_size());
    kernels::conv2d_forward(g, x, w, {}, cx);
    std::vector<double> cty(g.input_size(), 0.0);
    kernels::conv2d_backward_input(g, y, w, cty);
    double lhs = 0.0, rhs = 0.0;
    for (std::size_t i = 0; i < cx.size(); ++i) lhs += cx[i] * y[i];
    for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * cty[i];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
  }
}

TEST_CASE("weight gradient is linear in the input: dW(x) at unit grad equals correlation") {
  // For a 1x1 kernel, d<conv(x), y>/dw = sum_pixels x * y.
  ConvGeometry g{1, 5, 5, 1, 1, 1, 0};
  const auto x = random_values(25, 7);
  const auto y = random_values(25, 8);
  std::vector<double> gw(1, 0.0), gb(1, 0.0);
  kernels::conv2d_backward_weight(g, y, x, gw, gb);
  double dot = 0.0, sum = 0.0;
  for (int i = 0; i < 25; ++i) {
    dot += x[i] * y[i];
    sum += y[i];
  }
  CHECK(gw[0] == doctest::Approx(dot).epsilon(1e-14));
  CHECK(gb[0] == doctest::Approx(sum).epsilon(1e-14));
}

TEST_CASE("kernels are bitwise identical across thread counts") {
  ConvGeometry g{8, 32, 32, 16, 3, 1, 1};
  const auto in = random_values(g.input_size(), 11);
  const auto w = random_values(g.weight_size(), 12);
  const auto go = random_values(g.output_size(), 13);
  auto run = [&](int threads) {
    omp_set_num_threads(threads);
    std::vector<double> out(g.output_size()), gi(g.input_size(), 0.0), gw(g.weight_size(), 0.0), gb(16, 0.0);
    kernels::conv2d_forward(g, in, w, {}, out);
    kernels::conv2d_backward_input(g, go, w, gi);
    kernels::conv2d_backward_weight(g, go, in, gw, gb);
    out.insert(out.end(), gi.begin(), gi.end());
    out.insert(out.end(), gw.begin(), gw.end());
    out.insert(out.end(), gb.begin(), gb.end());
    return out;
  };
  const auto one = run(1);
  const auto four = run(4);
  omp_set_num_threads(omp_get_num_procs());
  CHECK(one == four);
}

TEST_CASE("kernel results do not depend on buffer alignment") {
  for (const ConvGeometry& g : {ConvGeometry{4, 16, 16, 8, 3, 1, 1}, ConvGeometry{3, 9, 10, 5, 4, 2, 1}}) {
    const auto in = random_values(g.input_size(), 21);
    const auto w = random_values(g.weight_size(), 22);
    const auto go = random_values(g.output_size(), 23);
    const auto b = random_values(static_cast<std::size_t>(g.out_channels), 24);
    // Each operand is placed `shift` doubles into a larger buffer.
    auto run = [&](std::size_t shift) {
      auto place = [shift](const std::vector<double>& v) {
        std::vector<double> buf(v.size() + shift, 0.0);
        std::copy(v.begin(), v.end(), buf.begin() + static_cast<std::ptrdiff_t>(shift));
        return buf;
      };
      const auto pin = place(in), pw = place(w), pgo = place(go), pb = place(b);
      std::vector<double> out(g.output_size() + shift), gi(g.input_size() + shift, 0.0),
          gw(g.weight_size() + shift, 0.0), gb(b.size() + shift, 0.0);
      auto tail = [shift](auto& v) { return std::span(v).subspan(shift); };
      kernels::conv2d_forward(g, tail(pin), tail(pw), tail(pb), tail(out));
      kernels::conv2d_backward_input(g, tail(pgo), tail(pw), tail(gi));
      kernels::conv2d_backward_weight(g, tail(pgo), tail(pin), tail(gw), tail(gb));
      std::vector<double> all(out.begin() + static_cast<std::ptrdiff_t>(shift), out.end());
      for (auto* v : {&gi, &gw, &gb}) all.insert(all.end(), v->begin() + static_cast<std::ptrdiff_t>(shift), v->end());
      return all;
    };
    const auto base = run(0);
    for (std::size_t shift : {1, 3, 5, 7}) {
      CAPTURE(shift);
      CHECK(run(shift) == base);
    }
  }
}

TEST_CASE("mismatched buffer sizes are rejected") {
  ConvGeometry g{2, 8, 8, 3, 3, 1, 1};
  std::vector<double> in(g.input_size()), w(g.weight_size()), out(g.output_size());
  std::vector<double> short_w(w.size() - 1);
  CHECK_THROWS_AS(kernels::conv2d_forward(g, in, short_w, {}, out), InputError);
  CHECK_THROWS_AS(kernels::reference::conv2d_forward(g, in, short_w, {}, out), InputError);
  ConvGeometry bad{1, 2, 2, 1, 5, 1, 0};
  std::vector<double> tiny(4), wk(25), o(1);
  CHECK_THROWS_AS(kernels::conv2d_forward(bad, tiny, wk, {}, o), InputError);
}
