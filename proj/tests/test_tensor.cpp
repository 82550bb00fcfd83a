#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <cmath>
#include <vector>

#include "tvseg/gradcheck.hpp"
#include "tvseg/tensor.hpp"

using namespace tvseg;

namespace {

std::vector<double> random_vec(Rng& rng, std::int64_t n, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(n));
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

// naive triple-loop reference
std::vector<double> matmul_oracle(const std::vector<double>& a, const std::vector<double>& b,
                                  int m, int k, int n) {
  std::vector<double> c(static_cast<std::size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      for (int p = 0; p < k; ++p)
        c[static_cast<std::size_t>(i) * n + j] += a[static_cast<std::size_t>(i) * k + p] * b[static_cast<std::size_t>(p) * n + j];
  return c;
}

// naive six-loop cross-correlation with zero padding
std::vector<double> conv2d_oracle(const std::vector<double>& x, const std::vector<double>& w,
                                  const std::vector<double>& b, int ci, int h, int wd, int co,
                                  int kh, int kw, int stride, int dilation, int padding, int ho,
                                  int wo) {
  std::vector<double> y(static_cast<std::size_t>(co) * ho * wo, 0.0);
  for (int oc = 0; oc < co; ++oc)
    for (int oh = 0; oh < ho; ++oh)
      for (int ow = 0; ow < wo; ++ow) {
        double acc = b[static_cast<std::size_t>(oc)];
        for (int ic = 0; ic < ci; ++ic)
          for (int r = 0; r < kh; ++r)
            for (int q = 0; q < kw; ++q) {
              const int ih = oh * stride - padding + r * dilation;
              const int iw = ow * stride - padding + q * dilation;
              if (ih < 0 || ih >= h || iw < 0 || iw >= wd) continue;
              acc += x[(static_cast<std::size_t>(ic) * h + ih) * wd + iw] *
                     w[((static_cast<std::size_t>(oc) * ci + ic) * kh + r) * kw + q];
            }
        y[(static_cast<std::size_t>(oc) * ho + oh) * wo + ow] = acc;
      }
  return y;
}

}  // namespace

TEST_CASE("matmul basics") {
  Graph g;
  SECTION("identity times any") {
    std::vector<double> eye = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    Rng rng(7);
    auto bv = random_vec(rng, 9);
    Tensor a = g.constant({3, 3}, eye);
    Tensor b = g.constant({3, 3}, bv);
    Tensor c = matmul(a, b);
    for (int i = 0; i < 9; ++i) REQUIRE(c.value()[i] == bv[i]);
  }
  SECTION("zeros times any") {
    Rng rng(8);
    Tensor a = g.full({2, 2}, 0.0);
    Tensor b = g.constant({2, 2}, random_vec(rng, 4));
    Tensor c = matmul(a, b);
    for (double v : c.value()) REQUIRE(v == 0.0);
  }
  SECTION("shape mismatch names both shapes") {
    Tensor a = g.full({2, 3}, 1.0);
    Tensor b = g.full({4, 2}, 1.0);
    REQUIRE_THROWS_MATCHES(matmul(a, b), ShapeError,
                           Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("[2,3]") &&
                                                           Catch::Matchers::ContainsSubstring("[4,2]")));
  }
}

TEST_CASE("matmul matches naive oracle on random instances") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    const int m = 1 + rng.uniform_int(8), k = 1 + rng.uniform_int(8), n = 1 + rng.uniform_int(8);
    auto av = random_vec(rng, static_cast<std::int64_t>(m) * k);
    auto bv = random_vec(rng, static_cast<std::int64_t>(k) * n);
    Graph g;
    Tensor c = matmul(g.constant({m, k}, av), g.constant({k, n}, bv));
    auto want = matmul_oracle(av, bv, m, k, n);
    for (std::size_t i = 0; i < want.size(); ++i)
      REQUIRE_THAT(c.value()[i], Catch::Matchers::WithinAbs(want[i], 1e-12));
  }
}

TEST_CASE("softmax_lastdim") {
  SECTION("uniform input") {
    Graph g;
    Tensor y = softmax_lastdim(g.full({3}, 0.0));
    for (double v : y.value()) REQUIRE_THAT(v, Catch::Matchers::WithinAbs(1.0 / 3.0, 1e-15));
  }
  SECTION("shift invariance and row sums") {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      Rng rng(seed + 100);
      const int rows = 1 + rng.uniform_int(4), c = 1 + rng.uniform_int(7);
      auto xv = random_vec(rng, static_cast<std::int64_t>(rows) * c, -5.0, 5.0);
      const double shift = rng.uniform(-10.0, 10.0);
      auto xs = xv;
      for (double& v : xs) v += shift;
      Graph g;
      Tensor y0 = softmax_lastdim(g.constant({rows, c}, xv));
      Tensor y1 = softmax_lastdim(g.constant({rows, c}, xs));
      for (std::size_t i = 0; i < y0.value().size(); ++i)
        REQUIRE_THAT(y0.value()[i], Catch::Matchers::WithinAbs(y1.value()[i], 1e-12));
      for (int r = 0; r < rows; ++r) {
        double sum = 0.0;
        for (int j = 0; j < c; ++j) sum += y0.value()[static_cast<std::size_t>(r) * c + j];
        REQUIRE_THAT(sum, Catch::Matchers::WithinAbs(1.0, 1e-12));
        for (int j = 0; j < c; ++j) REQUIRE(y0.value()[static_cast<std::size_t>(r) * c + j] >= 0.0);
      }
    }
  }
  SECTION("direct exp/sum oracle") {
    Graph g;
    std::vector<double> xv = {1, 2, 3};
    Tensor y = softmax_lastdim(g.constant({3}, xv));
    const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    for (int i = 0; i < 3; ++i)
      REQUIRE_THAT(y.value()[i], Catch::Matchers::WithinAbs(std::exp(xv[static_cast<std::size_t>(i)]) / z, 1e-14));
  }
}

TEST_CASE("layer_norm") {
  SECTION("constant slice maps to zeros") {
    Graph g;
    Tensor y = layer_norm(g.full({4}, 3.7), g.full({4}, 1.0), g.full({4}, 0.0), 1e-5);
    for (double v : y.value()) REQUIRE(v == 0.0);
  }
  SECTION("already normalized slice") {
    Graph g;
    std::vector<double> xv = {1.0, -1.0};
    Tensor y = layer_norm(g.constant({2}, xv), g.full({2}, 1.0), g.full({2}, 0.0), 1e-12);
    REQUIRE_THAT(y.value()[0], Catch::Matchers::WithinAbs(1.0, 1e-6));
    REQUIRE_THAT(y.value()[1], Catch::Matchers::WithinAbs(-1.0, 1e-6));
  }
  SECTION("normalized moments on random slices") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(seed + 31);
      const int c = 4 + rng.uniform_int(13);
      auto xv = random_vec(rng, c, -3.0, 3.0);
      Graph g;
      Tensor y = layer_norm(g.constant({c}, xv), g.full({c}, 1.0), g.full({c}, 0.0), 1e-10);
      double mean = 0.0;
      for (double v : y.value()) mean += v;
      mean /= c;
      double var = 0.0;
      for (double v : y.value()) var += (v - mean) * (v - mean);
      var /= c;
      REQUIRE_THAT(mean, Catch::Matchers::WithinAbs(0.0, 1e-10));
      REQUIRE_THAT(var, Catch::Matchers::WithinAbs(1.0, 1e-6));
    }
  }
}

TEST_CASE("conv2d") {
  SECTION("1x1 identity kernel") {
    Rng rng(5);
    auto xv = random_vec(rng, 2 * 4 * 4);
    std::vector<double> wv = {1, 0, 0, 1};  // [2,2,1,1]
    Graph g;
    Tensor y = conv2d(g.constant({2, 4, 4}, xv), g.constant({2, 2, 1, 1}, wv), g.full({2}, 0.0));
    for (std::size_t i = 0; i < xv.size(); ++i) REQUIRE(y.value()[i] == xv[i]);
  }
  SECTION("all-ones 3x3 counting") {
    Graph g;
    Tensor y = conv2d(g.full({1, 3, 3}, 1.0), g.full({1, 1, 3, 3}, 1.0), g.full({1}, 0.0), 1, 1, 1);
    REQUIRE(y.shape() == Shape{1, 3, 3});
    REQUIRE(y.value()[4] == 9.0);  // center
    REQUIRE(y.value()[0] == 4.0);  // corner
  }
  SECTION("non-positive output extent") {
    Graph g;
    REQUIRE_THROWS_AS(conv2d(g.full({1, 2, 2}, 1.0), g.full({1, 1, 3, 3}, 1.0), g.full({1}, 0.0)), ShapeError);
  }
  SECTION("random instances vs naive six-loop oracle") {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      Rng rng(seed + 1000);
      const int ci = 1 + rng.uniform_int(3), co = 1 + rng.uniform_int(3);
      const int h = 2 + rng.uniform_int(7), w = 2 + rng.uniform_int(7);
      const int kh = 1 + rng.uniform_int(3), kw = 1 + rng.uniform_int(3);
      const int stride = 1 + rng.uniform_int(2), dilation = 1 + rng.uniform_int(2);
      const int padding = rng.uniform_int(3);
      const int ho = (h + 2 * padding - dilation * (kh - 1) - 1) / stride + 1;
      const int wo = (w + 2 * padding - dilation * (kw - 1) - 1) / stride + 1;
      if (ho < 1 || wo < 1) continue;
      auto xv = random_vec(rng, static_cast<std::int64_t>(ci) * h * w);
      auto wv = random_vec(rng, static_cast<std::int64_t>(co) * ci * kh * kw);
      auto bv = random_vec(rng, co);
      Graph g;
      Tensor y = conv2d(g.constant({ci, h, w}, xv), g.constant({co, ci, kh, kw}, wv),
                        g.constant({co}, bv), stride, dilation, padding);
      auto want = conv2d_oracle(xv, wv, bv, ci, h, w, co, kh, kw, stride, dilation, padding, ho, wo);
      REQUIRE(y.shape() == Shape{co, ho, wo});
      for (std::size_t i = 0; i < want.size(); ++i)
        REQUIRE_THAT(y.value()[i], Catch::Matchers::WithinAbs(want[i], 1e-12));
    }
  }
}

TEST_CASE("bilinear_upsample") {
  SECTION("factor 1 is identity") {
    Rng rng(3);
    auto xv = random_vec(rng, 2 * 3 * 3);
    Graph g;
    Tensor y = bilinear_upsample(g.constant({2, 3, 3}, xv), 1);
    for (std::size_t i = 0; i < xv.size(); ++i) REQUIRE(y.value()[i] == xv[i]);
  }
  SECTION("constant map stays constant") {
    Graph g;
    Tensor y = bilinear_upsample(g.full({1, 2, 2}, 0.25), 3);
    for (double v : y.value()) REQUIRE_THAT(v, Catch::Matchers::WithinAbs(0.25, 1e-15));
  }
  SECTION("2x2 ramp against per-pixel oracle") {
    std::vector<double> xv = {0, 1, 2, 3};  // [[0,1],[2,3]]
    Graph g;
    Tensor y = bilinear_upsample(g.constant({1, 2, 2}, xv), 2);
    auto sample = [&](double si, double sj) {
      int i0 = static_cast<int>(std::floor(si)), j0 = static_cast<int>(std::floor(sj));
      double ti = si - i0, tj = sj - j0;
      int i1 = i0 + 1, j1 = j0 + 1;
      if (i0 < 0) { i0 = i1 = 0; ti = 0; }
      if (i1 > 1) { i0 = i1 = 1; ti = 0; }
      if (j0 < 0) { j0 = j1 = 0; tj = 0; }
      if (j1 > 1) { j0 = j1 = 1; tj = 0; }
      auto at = [&](int i, int j) { return xv[static_cast<std::size_t>(i) * 2 + j]; };
      return (1 - ti) * ((1 - tj) * at(i0, j0) + tj * at(i0, j1)) + ti * ((1 - tj) * at(i1, j0) + tj * at(i1, j1));
    };
    for (int oy = 0; oy < 4; ++oy)
      for (int ox = 0; ox < 4; ++ox) {
        const double want = sample((oy + 0.5) / 2.0 - 0.5, (ox + 0.5) / 2.0 - 0.5);
        REQUIRE_THAT(y.value()[static_cast<std::size_t>(oy) * 4 + ox], Catch::Matchers::WithinAbs(want, 1e-14));
      }
  }
}

TEST_CASE("elementwise basics") {
  Graph g;
  SECTION("sigmoid and relu") {
    Tensor s = sigmoid(g.full({1}, 0.0));
    REQUIRE(s.value()[0] == 0.5);
    Tensor r = relu(g.constant({2}, std::vector<double>{-2.0, 3.0}));
    REQUIRE(r.value()[0] == 0.0);
    REQUIRE(r.value()[1] == 3.0);
  }
  SECTION("concat then slice round trip is exact") {
    Rng rng(11);
    auto av = random_vec(rng, 2 * 3);
    auto bv = random_vec(rng, 2 * 5);
    Tensor a = g.constant({2, 3}, av);
    Tensor b = g.constant({2, 5}, bv);
    Tensor cat = concat_lastdim(a, b);
    REQUIRE(cat.shape() == Shape{2, 8});
    Tensor a2 = slice(cat, 1, 0, 3);
    Tensor b2 = slice(cat, 1, 3, 5);
    REQUIRE(a2.value() == av);
    REQUIRE(b2.value() == bv);
  }
  SECTION("concat/slice round trip on random axes") {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
      Rng rng(seed + 500);
      const int d0 = 1 + rng.uniform_int(4), d1 = 1 + rng.uniform_int(4), d2 = 1 + rng.uniform_int(4);
      const int axis = rng.uniform_int(3);
      auto av = random_vec(rng, static_cast<std::int64_t>(d0) * d1 * d2);
      Shape bs = {d0, d1, d2};
      bs[static_cast<std::size_t>(axis)] = 1 + rng.uniform_int(4);
      auto bv = random_vec(rng, numel(bs));
      Graph gg;
      Tensor a = gg.constant({d0, d1, d2}, av);
      Tensor b = gg.constant(bs, bv);
      Tensor cat = concat({a, b}, axis);
      Tensor a2 = slice(cat, axis, 0, a.dim(axis));
      Tensor b2 = slice(cat, axis, a.dim(axis), b.dim(axis));
      REQUIRE(a2.value() == av);
      REQUIRE(b2.value() == bv);
    }
  }
}

TEST_CASE("backward basics") {
  SECTION("identity") {
    Graph g;
    Tensor x = g.leaf({1}, std::vector<double>{4.2}, true);
    Tensor y = reshape(x, {1});
    g.backward(y);
    REQUIRE(x.grad()[0] == 1.0);
  }
  SECTION("product rule") {
    Graph g;
    Tensor x = g.leaf({1}, std::vector<double>{2.0}, true);
    Tensor y = g.leaf({1}, std::vector<double>{3.0}, true);
    g.backward(mul(x, y));
    REQUIRE(x.grad()[0] == 3.0);
    REQUIRE(y.grad()[0] == 2.0);
  }
  SECTION("unreachable leaf has exactly zero gradient") {
    Graph g;
    Tensor x = g.leaf({2}, std::vector<double>{1.0, 2.0}, true);
    Tensor unused = g.leaf({3}, std::vector<double>{5.0, 6.0, 7.0}, true);
    g.backward(sum_all(x));
    REQUIRE(unused.grad() == std::vector<double>{0.0, 0.0, 0.0});
  }
  SECTION("seed must be scalar and in-graph") {
    Graph g, g2;
    Tensor x = g.leaf({2}, std::vector<double>{1.0, 2.0}, true);
    REQUIRE_THROWS_AS(g.backward(x), UsageError);
    Tensor y = g2.scalar(1.0);
    REQUIRE_THROWS_AS(g.backward(y), UsageError);
  }
}

TEST_CASE("finite differences on closed forms") {
  SECTION("quadratic is exact to roundoff") {
    Param p("p", {4});
    Rng rng(9);
    for (double& v : p.value) v = rng.uniform(-2.0, 2.0);
    auto build = [&](Graph& g, Bindings& b) {
      Tensor t = b.bind(g, p);
      return sum_all(mul(t, t));
    };
    std::vector<Param*> params = {&p};
    auto rep = finite_diff_check(build, params, 1e-5, 1e-9);
    REQUIRE(rep.max_rel_err < 1e-9);
    REQUIRE(rep.pass);
  }
  SECTION("dead relu region") {
    Param p("p", {3});
    p.value = {-1.0, -2.0, -0.5};
    auto build = [&](Graph& g, Bindings& b) { return sum_all(relu(b.bind(g, p))); };
    std::vector<Param*> params = {&p};
    auto rep = finite_diff_check(build, params, 1e-5, 1e-9);
    REQUIRE(rep.pass);
    REQUIRE(p.grad == std::vector<double>{0.0, 0.0, 0.0});
  }
}

TEST_CASE("gradients of композite ops match finite differences") {
  // random chains over the op set used by the model
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    Rng rng(seed + 77);
    const int n = 2 + rng.uniform_int(3), c = 2 + rng.uniform_int(3);
    Param x("x", {n, c});
    Param w("w", {c, c});
    Param gm("gamma", {c});
    Param bt("beta", {c});
    for (double& v : x.value) v = rng.uniform(-1.5, 1.5);
    for (double& v : w.value) v = rng.uniform(-1.0, 1.0);
    for (double& v : gm.value) v = rng.uniform(0.5, 1.5);
    for (double& v : bt.value) v = rng.uniform(-0.5, 0.5);
    auto build = [&](Graph& g, Bindings& b) {
      Tensor tx = b.bind(g, x);
      Tensor tw = b.bind(g, w);
      Tensor tg = b.bind(g, gm);
      Tensor tb = b.bind(g, bt);
      Tensor h = layer_norm(matmul(tx, tw), tg, tb);
      Tensor s = softmax_lastdim(h);
      Tensor act = sigmoid(slice(s, 1, 0, c)) + relu(h) + clamp(h, -0.7, 0.7);
      return mean_all(mul(act, act)) + sum_all(tangent(clamp(h, -0.9, 0.9))) * 0.05;
    };
    std::vector<Param*> params = {&x, &w, &gm, &bt};
    auto rep = finite_diff_check(build, params, 1e-5, 1e-4);
    INFO("seed " << seed << " max_rel_err " << rep.max_rel_err);
    REQUIRE(rep.pass);
  }
}

TEST_CASE("gradients of conv, upsample and losses match finite differences") {
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    Rng rng(seed + 2024);
    const int ci = 1 + rng.uniform_int(2), co = 1 + rng.uniform_int(2);
    const int h = 3 + rng.uniform_int(3), w = 3 + rng.uniform_int(3);
    Param x("x", {ci, h, w});
    Param k("k", {co, ci, 3, 3});
    Param b("b", {co});
    for (double& v : x.value) v = rng.uniform(-1.0, 1.0);
    for (double& v : k.value) v = rng.uniform(-0.8, 0.8);
    for (double& v : b.value) v = rng.uniform(-0.3, 0.3);
    std::vector<double> target(static_cast<std::size_t>(co) * 2 * h * 2 * w, 0.0);
    for (double& v : target) v = rng.uniform(0.0, 1.0) > 0.5 ? 1.0 : 0.0;
    auto build = [&](Graph& g, Bindings& bd) {
      Tensor tx = bd.bind(g, x);
      Tensor tk = bd.bind(g, k);
      Tensor tb = bd.bind(g, b);
      Tensor y = conv2d(tx, tk, tb, 1, 1, 1);
      Tensor up = bilinear_upsample(y, 2);
      Tensor tgt = g.constant({co, 2 * h, 2 * w}, target);
      return bce_with_logits(up, tgt) + bce_probs(sigmoid(up), tgt) * 0.5;
    };
    std::vector<Param*> params = {&x, &k, &b};
    auto rep = finite_diff_check(build, params, 1e-5, 1e-4);
    INFO("seed " << seed << " max_rel_err " << rep.max_rel_err);
    REQUIRE(rep.pass);
  }
}

TEST_CASE("cosine similarity ops and gradients") {
  SECTION("values and zero-norm diagnostics") {
    Graph g;
    std::vector<double> uv = {1, 0, 0, 1, 0, 0, 0, 0};  // rows: e0, e1... last row zero
    Tensor u = g.constant({4, 2}, std::vector<double>{1, 0, 0, 1, 1, 1, 0, 0});
    Tensor v = g.constant({2}, std::vector<double>{1, 0});
    Tensor s = cosine_rows(u, v);
    REQUIRE_THAT(s.value()[0], Catch::Matchers::WithinAbs(1.0, 1e-15));
    REQUIRE_THAT(s.value()[1], Catch::Matchers::WithinAbs(0.0, 1e-15));
    REQUIRE_THAT(s.value()[2], Catch::Matchers::WithinAbs(std::sqrt(0.5), 1e-15));
    REQUIRE(s.value()[3] == 0.0);
    REQUIRE(g.diagnostics.zero_norm_cosine == 1);
  }
  SECTION("gradcheck for cosine_rows and cosine_pairs") {
    for (std::uint64_t seed = 0; seed < 8; ++seed) {
      Rng rng(seed + 4242);
      const int p = 3, c = 4;
      Param u("u", {p, c});
      Param w("w", {p, c});
      Param v("v", {c});
      for (double& x : u.value) x = rng.uniform(-1.0, 1.0);
      for (double& x : w.value) x = rng.uniform(-1.0, 1.0);
      for (double& x : v.value) x = rng.uniform(-1.0, 1.0);
      std::vector<std::pair<int, int>> pairs = {{0, 0}, {0, 1}, {1, 2}, {2, 0}};
      auto build = [&](Graph& g, Bindings& bd) {
        Tensor tu = bd.bind(g, u);
        Tensor tw = bd.bind(g, w);
        Tensor tv = bd.bind(g, v);
        Tensor s1 = cosine_rows(tu, tv);
        Tensor s2 = cosine_pairs(tu, tw, pairs);
        return sum_all(mul(s1, s1)) + sum_all(tangent(scale(clamp(s2, -0.999, 0.999), 1.2)));
      };
      std::vector<Param*> params = {&u, &w, &v};
      auto rep = finite_diff_check(build, params, 1e-6, 1e-4);
      INFO("seed " << seed << " max_rel_err " << rep.max_rel_err);
      REQUIRE(rep.pass);
    }
  }
}
