#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "aunet/ops.hpp"
#include "aunet/rng.hpp"
#include "aunet/tensor.hpp"

using namespace aunet;

namespace {

Tensor random_tensor(Rng& rng, Shape s, double lo = -1.0, double hi = 1.0) {
    Tensor t = Tensor::zeros(std::move(s));
    for (double& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

// independent naive oracle: six nested loops over output and kernel coords
Tensor conv2d_oracle(const Tensor& x, const Tensor& w, int stride, int padding) {
    const int ci = x.dim(0), h = x.dim(1), ww = x.dim(2);
    const int co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const int oh = (h + 2 * padding - kh) / stride + 1;
    const int ow = (ww + 2 * padding - kw) / stride + 1;
    Tensor out = Tensor::zeros({co, oh, ow});
    for (int c = 0; c < co; ++c)
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox)
                for (int ic = 0; ic < ci; ++ic)
                    for (int ky = 0; ky < kh; ++ky)
                        for (int kx = 0; kx < kw; ++kx) {
                            int iy = oy * stride + ky - padding;
                            int ix = ox * stride + kx - padding;
                            if (iy < 0 || iy >= h || ix < 0 || ix >= ww) continue;
                            out.at(c, oy, ox) += x.at(ic, iy, ix) * w.at(c, ic, ky, kx);
                        }
    return out;
}

Tensor max_pool_oracle(const Tensor& x, int win) {
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor out = Tensor::zeros({c, h / win, w / win});
    for (int ic = 0; ic < c; ++ic)
        for (int oy = 0; oy < h / win; ++oy)
            for (int ox = 0; ox < w / win; ++ox) {
                double best = x.at(ic, oy * win, ox * win);
                for (int ky = 0; ky < win; ++ky)
                    for (int kx = 0; kx < win; ++kx) best = std::max(best, x.at(ic, oy * win + ky, ox * win + kx));
                out.at(ic, oy, ox) = best;
            }
    return out;
}

}  // namespace

TEST_CASE("matmul: identity, hand oracle, annihilator") {
    Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor b = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor r = ops::matmul(eye, b);
    for (int i = 0; i < 6; ++i) CHECK(r.data()[i] == b.data()[i]);

    Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor v = Tensor::from({2, 1}, {0, 1});
    Tensor h = ops::matmul(a, v);
    CHECK(h.at(0, 0) == 2.0);
    CHECK(h.at(1, 0) == 4.0);

    Tensor z = ops::matmul(a, Tensor::zeros({2, 4}));
    for (double x : z.data()) CHECK(x == 0.0);

    CHECK_THROWS_AS(ops::matmul(a, Tensor::zeros({3, 2})), DimensionError);
}

TEST_CASE("matmul backward matches dA = G B^T, dB = A^T G") {
    Rng rng(11);
    Tensor a = random_tensor(rng, {3, 4}).set_requires_grad(true);
    Tensor b = random_tensor(rng, {4, 2}).set_requires_grad(true);
    Tensor coeff = random_tensor(rng, {3, 2});
    Graph g;
    {
        TapeScope scope(g);
        g.backward(ops::sum(ops::mul(ops::matmul(a, b), coeff)));
    }
    for (int i = 0; i < 3; ++i)
        for (int l = 0; l < 4; ++l) {
            double expect = 0;
            for (int j = 0; j < 2; ++j) expect += coeff.at(i, j) * b.at(l, j);
            CHECK(a.grad()[i * 4 + l] == doctest::Approx(expect).epsilon(1e-12));
        }
    for (int l = 0; l < 4; ++l)
        for (int j = 0; j < 2; ++j) {
            double expect = 0;
            for (int i = 0; i < 3; ++i) expect += a.at(i, l) * coeff.at(i, j);
            CHECK(b.grad()[l * 2 + j] == doctest::Approx(expect).epsilon(1e-12));
        }
}

TEST_CASE("softmax: symmetry, shift invariance, exp-normalize oracle") {
    Tensor u = ops::softmax(Tensor::from({3}, {0, 0, 0}), 0);
    for (double v : u.data()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-15));

    for (double c : {-5.0, 0.0, 3.25}) {
        double t = 0.75;
        Tensor s = ops::softmax(Tensor::from({2}, {c, c + t}), 0);
        double st = 1.0 / (1.0 + std::exp(t));  // sigma(-t)
        CHECK(std::fabs(s.at(0) - st) < 1e-12);
        CHECK(std::fabs(s.at(1) - (1.0 - st)) < 1e-12);
    }

    Tensor x = Tensor::from({3}, {1, 2, 3});
    Tensor s = ops::softmax(x, 0);
    double denom = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    for (int i = 0; i < 3; ++i) CHECK(std::fabs(s.at(i) - std::exp(1.0 + i) / denom) < 1e-15);
}

TEST_CASE("softmax rows sum to 1 within 1e-12 and are shift-invariant, 2-D both axes") {
    Rng rng(22);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor x = random_tensor(rng, {5, 7}, -30, 30);
        Tensor s = ops::softmax(x, 1);
        for (int i = 0; i < 5; ++i) {
            double acc = 0;
            for (int j = 0; j < 7; ++j) acc += s.at(i, j);
            CHECK(std::fabs(acc - 1.0) < 1e-12);
        }
        Tensor shifted = ops::add_scalar(x, 17.5);
        Tensor s2 = ops::softmax(shifted, 1);
        for (int i = 0; i < 35; ++i) CHECK(std::fabs(s.data()[i] - s2.data()[i]) < 1e-12);

        Tensor sc = ops::softmax(x, 0);
        for (int j = 0; j < 7; ++j) {
            double acc = 0;
            for (int i = 0; i < 5; ++i) acc += sc.at(i, j);
            CHECK(std::fabs(acc - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("conv2d: 1x1 identity kernel, constant field, random vs naive oracle") {
    Tensor x = Tensor::from({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    Tensor k1 = Tensor::from({1, 1, 1, 1}, {1});
    Tensor y = ops::conv2d(x, k1, 1, 0);
    for (int i = 0; i < 9; ++i) CHECK(y.data()[i] == x.data()[i]);

    Tensor c = Tensor::full({1, 5, 5}, 2.5);
    Tensor ones = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor z = ops::conv2d(c, ones, 1, 0);
    CHECK(z.dim(1) == 3);
    for (double v : z.data()) CHECK(v == doctest::Approx(9 * 2.5).epsilon(1e-15));

    Rng rng(33);
    Tensor xr = random_tensor(rng, {2, 4, 4});
    Tensor wr = random_tensor(rng, {3, 2, 3, 3});
    for (auto [stride, pad] : std::vector<std::pair<int, int>>{{1, 0}, {1, 1}}) {
        Tensor got = ops::conv2d(xr, wr, stride, pad);
        Tensor want = conv2d_oracle(xr, wr, stride, pad);
        REQUIRE(got.shape() == want.shape());
        for (std::size_t i = 0; i < got.data().size(); ++i) CHECK(got.data()[i] == want.data()[i]);
    }
    Tensor xs = random_tensor(rng, {2, 5, 5});
    Tensor gs = ops::conv2d(xs, wr, 2, 1);
    Tensor ws = conv2d_oracle(xs, wr, 2, 1);
    REQUIRE(gs.shape() == ws.shape());
    for (std::size_t i = 0; i < gs.data().size(); ++i) CHECK(gs.data()[i] == ws.data()[i]);

    CHECK_THROWS_AS(ops::conv2d(xr, wr, 2, 1), ConfigError);  // (4+2-3)/2 not integral
}

TEST_CASE("max_pool2d: constant, strict max, window-scan oracle, tie routing") {
    Tensor c = Tensor::full({2, 4, 4}, 3.25);
    Tensor p = ops::max_pool2d(c);
    for (double v : p.data()) CHECK(v == 3.25);

    Tensor w = Tensor::from({1, 2, 2}, {1, 2, 3, 4});
    CHECK(ops::max_pool2d(w).at(0, 0, 0) == 4.0);

    Rng rng(44);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor x = random_tensor(rng, {3, 4, 4});
        Tensor got = ops::max_pool2d(x);
        Tensor want = max_pool_oracle(x, 2);
        for (std::size_t i = 0; i < got.data().size(); ++i) CHECK(got.data()[i] == want.data()[i]);
    }

    // ties route gradient to the first (row-major) position
    Tensor t = Tensor::from({1, 2, 2}, {7, 7, 7, 7}).set_requires_grad(true);
    Graph g;
    {
        TapeScope scope(g);
        g.backward(ops::sum(ops::max_pool2d(t)));
    }
    CHECK(t.grad()[0] == 1.0);
    CHECK(t.grad()[1] == 0.0);
    CHECK(t.grad()[2] == 0.0);
    CHECK(t.grad()[3] == 0.0);

    CHECK_THROWS_AS(ops::max_pool2d(Tensor::zeros({1, 3, 4})), ConfigError);
}

TEST_CASE("elementwise: sigmoid(0)=0.5, layer_norm constant -> zeros, gelu vs erf oracle") {
    CHECK(ops::sigmoid(Tensor::scalar(0.0)).value() == 0.5);

    Tensor cv = Tensor::full({6}, 4.2);
    Tensor gamma = Tensor::full({6}, 1.0);
    Tensor beta = Tensor::zeros({6});
    Tensor ln = ops::layer_norm(ops::reshape(cv, {1, 6}), gamma, beta);
    for (double v : ln.data()) CHECK(v == 0.0);  // zero variance handled by eps

    for (double x = -3.0; x <= 3.0; x += 0.25) {
        double expect = 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
        CHECK(std::fabs(ops::gelu(Tensor::scalar(x)).value() - expect) < 1e-10);
    }
}

TEST_CASE("clamp forward and gradient gating") {
    Tensor x = Tensor::from({4}, {-2.0, 0.25, 0.75, 2.0}).set_requires_grad(true);
    Tensor y = ops::clamp(x, 0.0, 1.0);
    CHECK(y.at(0) == 0.0);
    CHECK(y.at(1) == 0.25);
    CHECK(y.at(3) == 1.0);
    Graph g;
    {
        TapeScope scope(g);
        g.backward(ops::sum(ops::clamp(x, 0.0, 1.0)));
    }
    CHECK(x.grad()[0] == 0.0);
    CHECK(x.grad()[1] == 1.0);
    CHECK(x.grad()[2] == 1.0);
    CHECK(x.grad()[3] == 0.0);
}

TEST_CASE("reshape/transpose/narrow/concat round structure") {
    Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor t = ops::transpose(a);
    CHECK(t.shape() == Shape{3, 2});
    CHECK(t.at(2, 1) == 6.0);

    Tensor r = ops::reshape(a, {3, 2});
    CHECK(r.at(2, 1) == 6.0);
    CHECK_THROWS_AS(ops::reshape(a, {4, 2}), DimensionError);

    Tensor n = ops::narrow(a, 1, 1, 2);
    CHECK(n.shape() == Shape{2, 2});
    CHECK(n.at(0, 0) == 2.0);
    CHECK(n.at(1, 1) == 6.0);
    CHECK_THROWS_AS(ops::narrow(a, 1, 2, 2), DimensionError);

    Tensor c = ops::concat({a, a}, 0);
    CHECK(c.shape() == Shape{4, 3});
    CHECK(c.at(3, 2) == 6.0);
    Tensor c1 = ops::concat({a, a}, 1);
    CHECK(c1.shape() == Shape{2, 6});
    CHECK(c1.at(0, 3) == 1.0);
    CHECK_THROWS_AS(ops::concat({a, Tensor::zeros({3, 3})}, 1), DimensionError);
}

TEST_CASE("detach cuts the tape") {
    Tensor p = Tensor::from({2}, {1, 2}).set_requires_grad(true);
    Graph g;
    {
        TapeScope scope(g);
        Tensor mid = ops::mul(p, p);
        Tensor cut = ops::detach(mid);
        CHECK_FALSE(cut.requires_grad());
        Tensor loss = ops::sum(ops::mul(cut, p));
        g.backward(loss);
    }
    // d/dp of sum(const * p) = const = p^2 values, no path through mid
    CHECK(p.grad()[0] == doctest::Approx(1.0));
    CHECK(p.grad()[1] == doctest::Approx(4.0));
}

TEST_CASE("keep_topk rows/cols: sort-and-keep oracle and tie handling") {
    Tensor row = Tensor::from({1, 4}, {0.4, 0.3, 0.2, 0.1});
    Tensor kept = ops::keep_topk_rows(row, 2);
    CHECK(kept.at(0, 0) == 0.4);
    CHECK(kept.at(0, 1) == 0.3);
    CHECK(kept.at(0, 2) == 0.0);
    CHECK(kept.at(0, 3) == 0.0);

    // ties keep the lower index
    Tensor tie = Tensor::from({1, 4}, {0.5, 0.2, 0.5, 0.5});
    Tensor kt = ops::keep_topk_rows(tie, 2);
    CHECK(kt.at(0, 0) == 0.5);
    CHECK(kt.at(0, 2) == 0.5);
    CHECK(kt.at(0, 3) == 0.0);

    Tensor col = ops::transpose(row);  // [4,1]
    Tensor kc = ops::keep_topk_cols(col, 2);
    CHECK(kc.at(0, 0) == 0.4);
    CHECK(kc.at(1, 0) == 0.3);
    CHECK(kc.at(2, 0) == 0.0);

    CHECK_THROWS_AS(ops::keep_topk_rows(row, 0), ConfigError);
    CHECK_THROWS_AS(ops::keep_topk_rows(row, 5), ConfigError);
}

TEST_CASE("topk_col_sum matches sort-and-sum oracle on random inputs") {
    Rng rng(55);
    for (int trial = 0; trial < 200; ++trial) {
        int n = 2 + static_cast<int>(rng.uniform_int(11));
        Tensor p = random_tensor(rng, {n, n});
        for (int k : {1, 2, n}) {
            if (k > n) continue;
            Tensor got = ops::topk_col_sum(p, k);
            for (int j = 0; j < n; ++j) {
                std::vector<double> col(n);
                for (int i = 0; i < n; ++i) col[i] = p.at(i, j);
                std::sort(col.begin(), col.end(), std::greater<double>());
                double want = 0;
                for (int t = 0; t < k; ++t) want += col[t];
                CHECK(got.at(j) == want);
            }
        }
    }
    CHECK_THROWS_AS(ops::topk_col_sum(Tensor::zeros({3, 3}), 4), ConfigError);
}

TEST_CASE("col_mask_ste: hard forward, straight-through backward vs reference graph") {
    Rng rng(66);
    for (int trial = 0; trial < 25; ++trial) {
        const int n = 5;
        Tensor a = ops::softmax(random_tensor(rng, {n, n}, -2, 2), 1);
        Tensor logits = Tensor::zeros({n});
        for (double& v : logits.data()) {
            do {
                v = rng.uniform(-2, 2);
            } while (std::fabs(v) < 0.1);  // stay away from the threshold
        }
        logits.set_requires_grad(true);
        Tensor coeff = random_tensor(rng, {n, n});

        Graph g;
        {
            TapeScope scope(g);
            Tensor masked = ops::col_mask_ste(a, logits);
            g.backward(ops::sum(ops::mul(ops::gelu(masked), coeff)));
        }
        std::vector<double> got = logits.grad();

        // reference: hard mask values as a free tensor, gradient w.r.t. it,
        // then chain through sigmoid' (the straight-through substitution)
        Tensor m = Tensor::zeros({n});
        for (int j = 0; j < n; ++j) m.data()[j] = 1.0 / (1.0 + std::exp(-logits.at(j))) > 0.5 ? 1.0 : 0.0;
        m.set_requires_grad(true);
        Graph gref;
        {
            TapeScope scope(gref);
            Tensor masked = ops::col_mask_mul(a, m);
            gref.backward(ops::sum(ops::mul(ops::gelu(masked), coeff)));
        }
        for (int j = 0; j < n; ++j) {
            double s = 1.0 / (1.0 + std::exp(-logits.at(j)));
            double want = m.grad()[j] * s * (1.0 - s);
            CHECK(got[j] == doctest::Approx(want).epsilon(1e-12));
        }

        // forward exactness: masked entries are M_j * A_ij with M in {0,1}
        Tensor masked = ops::col_mask_ste(a, logits);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                double mj = m.at(j);
                CHECK(masked.at(i, j) == mj * a.at(i, j));
            }
    }
    CHECK_THROWS_AS(ops::col_mask_ste(Tensor::zeros({2, 3}), Tensor::zeros({2})), DimensionError);
}

TEST_CASE("broadcast helpers: bias_chw, add_rowvec, mul_chan, mean_spatial") {
    Tensor x = Tensor::zeros({2, 2, 2});
    Tensor b = Tensor::from({2}, {1.0, -2.0});
    Tensor y = ops::bias_chw(x, b);
    CHECK(y.at(0, 1, 1) == 1.0);
    CHECK(y.at(1, 0, 0) == -2.0);

    Tensor m = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor rv = Tensor::from({3}, {10, 20, 30});
    Tensor s = ops::add_rowvec(m, rv);
    CHECK(s.at(1, 2) == 36.0);

    Tensor img = Tensor::full({3, 2, 2}, 2.0);
    Tensor plane = Tensor::from({1, 2, 2}, {0.0, 0.5, 1.0, 2.0});
    Tensor mc = ops::mul_chan(img, plane);
    CHECK(mc.at(2, 0, 0) == 0.0);
    CHECK(mc.at(1, 1, 1) == 4.0);

    Tensor gap = ops::mean_spatial(Tensor::from({2, 1, 2}, {1, 3, 5, 7}));
    CHECK(gap.at(0) == 2.0);
    CHECK(gap.at(1) == 6.0);
}
