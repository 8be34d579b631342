#include "aunet/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "aunet/ops.hpp"
#include "aunet/rng.hpp"

namespace aunet {

double GradCheckResult::worst() const {
    double w = 0.0;
    for (const auto& p : params) w = std::max(w, p.max_rel_err);
    return w;
}

namespace {

double rel_err(double a, double n) {
    const double denom = std::max({std::fabs(a), std::fabs(n), 1e-6});
    return std::fabs(a - n) / denom;
}

double eval_value(const std::function<Tensor()>& f) {
    Tensor l = f();  // no active tape: forward only
    return l.value();
}

}  // namespace

GradCheckResult grad_check(const std::function<Tensor()>& f,
                           const std::vector<std::pair<std::string, Tensor>>& params,
                           double h, double tol) {
    GradCheckResult res;
    res.tol = tol;

    const double v0 = eval_value(f);
    const double v1 = eval_value(f);
    if (v0 != v1) {
        res.valid = false;
        res.pass = false;
        res.message = "non-deterministic closure: repeated forward passes differ";
        return res;
    }

    // analytic gradients
    std::vector<std::vector<double>> analytic;
    {
        Graph g;
        TapeScope scope(g);
        Tensor loss = f();
        g.backward(loss);
        for (const auto& [name, p] : params) {
            if (p.has_grad())
                analytic.push_back(p.impl->grad);
            else
                analytic.emplace_back(p.data().size(), 0.0);
            Tensor handle = p;
            handle.zero_grad();
        }
    }

    res.pass = true;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        const auto& [name, p] = params[pi];
        GradCheckResult::PerParam pp;
        pp.name = name;
        Tensor handle = p;
        auto& vals = handle.data();
        for (std::size_t i = 0; i < vals.size(); ++i) {
            const double saved = vals[i];
            vals[i] = saved + h;
            const double up = eval_value(f);
            vals[i] = saved - h;
            const double dn = eval_value(f);
            vals[i] = saved;
            const double numeric = (up - dn) / (2.0 * h);
            pp.max_rel_err = std::max(pp.max_rel_err, rel_err(analytic[pi][i], numeric));
        }
        if (pp.max_rel_err >= tol) res.pass = false;
        res.params.push_back(std::move(pp));
    }
    return res;
}

namespace {

Tensor random_tensor(Rng& rng, Shape s, double lo = -1.0, double hi = 1.0) {
    Tensor t = Tensor::zeros(std::move(s));
    for (double& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

// Weighted sum so the scalar loss mixes all output entries with distinct
// coefficients; catches transposed/reordered gradients that plain sum() hides.
Tensor weighted_sum(const Tensor& t, const Tensor& coeffs) {
    return ops::sum(ops::mul(t, coeffs));
}

struct OpCase {
    std::string name;
    // builds loss from the single parameter tensor
    std::function<Tensor(const Tensor&)> loss;
    Shape shape;
};

// negative-control fixture: forward x^2, backward deliberately 3x
Tensor bad_square(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape());
    for (std::size_t i = 0; i < x.data().size(); ++i) out.data()[i] = x.data()[i] * x.data()[i];
    if (Graph::active() && x.requires_grad()) {
        out.impl->requires_grad = true;
        auto xi = x.impl, oi = out.impl;
        Graph::active()->record(TapeNode{[xi, oi] {
                                             if (oi->adjoint.empty()) return;
                                             auto& gx = adjoint_buffer(*xi);
                                             for (std::size_t i = 0; i < gx.size(); ++i)
                                                 gx[i] += 3.0 * xi->data[i] * oi->adjoint[i];
                                         },
                                         {xi},
                                         oi});
    }
    return out;
}

}  // namespace

OpCheckReport gradcheck_suite(std::uint64_t seed, bool inject_bug) {
    OpCheckReport report;
    Rng shape_rng(derive_seed(seed, "gradcheck-shapes"));

    auto rand_dim = [&shape_rng](int lo, int hi) {
        return lo + static_cast<int>(shape_rng.uniform_int(static_cast<std::uint64_t>(hi - lo + 1)));
    };

    std::vector<OpCase> cases;
    auto add_case = [&](std::string name, Shape shape, std::function<Tensor(const Tensor&)> loss) {
        cases.push_back(OpCase{std::move(name), std::move(loss), std::move(shape)});
    };

    Rng rng(derive_seed(seed, "gradcheck-data"));
    const Shape s2{rand_dim(2, 5), rand_dim(2, 5)};
    const Tensor c2 = random_tensor(rng, s2);

    add_case("add", s2, [=](const Tensor& x) { return weighted_sum(ops::add(x, c2), c2); });
    add_case("sub", s2, [=](const Tensor& x) { return weighted_sum(ops::sub(c2, x), c2); });
    add_case("mul", s2, [=](const Tensor& x) { return weighted_sum(ops::mul(x, c2), c2); });
    add_case("scale", s2, [=](const Tensor& x) { return weighted_sum(ops::scale(x, -1.7), c2); });
    add_case("add_scalar", s2, [=](const Tensor& x) { return weighted_sum(ops::add_scalar(x, 0.3), c2); });
    add_case("rsub_scalar", s2, [=](const Tensor& x) { return weighted_sum(ops::rsub_scalar(2.0, x), c2); });
    add_case("sigmoid", s2, [=](const Tensor& x) { return weighted_sum(ops::sigmoid(x), c2); });
    add_case("gelu", s2, [=](const Tensor& x) { return weighted_sum(ops::gelu(x), c2); });
    add_case("log", s2, [=](const Tensor& x) { return weighted_sum(ops::log(ops::add_scalar(ops::sigmoid(x), 0.5)), c2); });
    add_case("clamp", s2, [=](const Tensor& x) { return weighted_sum(ops::clamp(x, -10.0, 10.0), c2); });
    add_case("softmax_rows", s2, [=](const Tensor& x) { return weighted_sum(ops::softmax(x, 1), c2); });
    add_case("softmax_cols", s2, [=](const Tensor& x) { return weighted_sum(ops::softmax(x, 0), c2); });
    add_case("transpose", s2, [=](const Tensor& x) { return ops::sum(ops::mul(ops::transpose(x), ops::transpose(c2))); });
    const Tensor c2flat = Tensor::from({s2[0] * s2[1]}, c2.data());
    add_case("reshape", s2, [=](const Tensor& x) { return weighted_sum(ops::reshape(x, {x.dim(0) * x.dim(1)}), c2flat); });
    add_case("sum", s2, [](const Tensor& x) { return ops::sum(x); });
    add_case("mean", s2, [](const Tensor& x) { return ops::mean(x); });

    const int mn = rand_dim(2, 4);
    const Tensor mb = random_tensor(rng, {s2[1], mn});
    const Tensor mc = random_tensor(rng, {s2[0], mn});
    add_case("matmul_lhs", s2, [=](const Tensor& x) { return weighted_sum(ops::matmul(x, mb), mc); });
    const Tensor ma = random_tensor(rng, {mn, s2[0]});
    const Tensor mc2 = random_tensor(rng, {mn, s2[1]});
    add_case("matmul_rhs", s2, [=](const Tensor& x) { return weighted_sum(ops::matmul(ma, x), mc2); });

    const Shape chw{rand_dim(1, 3), 4, 4};
    const Tensor cimg = random_tensor(rng, chw);
    const Tensor cvec = random_tensor(rng, {chw[0]});
    add_case("mean_spatial", chw, [=](const Tensor& x) { return weighted_sum(ops::mean_spatial(x), cvec); });

    const Tensor convw = random_tensor(rng, {2, chw[0], 3, 3});
    const Tensor convc = random_tensor(rng, {2, 4, 4});
    add_case("conv2d_input", chw, [=](const Tensor& x) { return weighted_sum(ops::conv2d(x, convw, 1, 1), convc); });
    add_case("conv2d_weight", {2, chw[0], 3, 3}, [=](const Tensor& w) { return weighted_sum(ops::conv2d(cimg, w, 1, 1), convc); });
    const Tensor cimg2 = random_tensor(rng, chw);
    add_case("bias_chw", {chw[0]}, [=](const Tensor& b) { return weighted_sum(ops::bias_chw(cimg, b), cimg2); });
    const Tensor cpool = random_tensor(rng, {chw[0], 2, 2});
    add_case("max_pool2d", chw, [=](const Tensor& x) { return weighted_sum(ops::max_pool2d(x, 2, 2), cpool); });
    const Tensor cplane = random_tensor(rng, {1, 4, 4});
    add_case("mul_chan", chw, [=](const Tensor& x) { return weighted_sum(ops::mul_chan(x, cplane), cimg2); });

    const Tensor rb = random_tensor(rng, {s2[1]});
    add_case("add_rowvec", s2, [=](const Tensor& x) { return weighted_sum(ops::add_rowvec(x, rb), c2); });

    const Tensor lng = random_tensor(rng, {s2[1]}, 0.5, 1.5);
    const Tensor lnb = random_tensor(rng, {s2[1]});
    add_case("layer_norm_x", s2, [=](const Tensor& x) { return weighted_sum(ops::layer_norm(x, lng, lnb), c2); });
    add_case("layer_norm_scale", {s2[1]}, [=](const Tensor& g) { return weighted_sum(ops::layer_norm(c2, g, lnb), c2); });

    const int nlen = std::max(1, s2[1] - 1);
    const Tensor cnarrow = random_tensor(rng, {s2[0], nlen});
    add_case("narrow", s2, [=](const Tensor& x) { return weighted_sum(ops::narrow(x, 1, 0, nlen), cnarrow); });
    add_case("concat", s2, [=](const Tensor& x) {
        Tensor both = ops::concat({x, c2}, 0);
        return ops::mean(ops::mul(both, both));
    });

    const int nn = 4;
    const Tensor sq = random_tensor(rng, {nn, nn});
    const Tensor svec = random_tensor(rng, {nn});
    add_case("keep_topk_rows", {nn, nn}, [=](const Tensor& x) { return weighted_sum(ops::keep_topk_rows(x, 2), sq); });
    add_case("keep_topk_cols", {nn, nn}, [=](const Tensor& x) { return weighted_sum(ops::keep_topk_cols(x, 2), sq); });
    add_case("topk_col_sum", {nn, nn}, [=](const Tensor& x) { return weighted_sum(ops::topk_col_sum(x, 2), svec); });
    add_case("col_mask_mul", {nn}, [=](const Tensor& m) { return weighted_sum(ops::col_mask_mul(sq, m), sq); });

    if (inject_bug) {
        add_case("bad_square", s2, [=](const Tensor& x) { return weighted_sum(bad_square(x), c2); });
    }

    Rng data_rng(derive_seed(seed, "gradcheck-params"));
    for (const auto& oc : cases) {
        OpCheckReport::Entry e;
        e.op = oc.name;
        double worst = 0.0;
        for (int trial = 0; trial < 10; ++trial) {
            Tensor p = random_tensor(data_rng, oc.shape, -0.9, 0.9);
            p.set_requires_grad(true);
            auto res = grad_check([&] { return oc.loss(p); }, {{oc.name, p}}, 1e-5, 1e-4);
            worst = std::max(worst, res.worst());
            if (!res.valid) worst = 1.0;
        }
        e.max_rel_err = worst;
        e.pass = worst < 1e-4;
        if (!e.pass) report.pass = false;
        report.entries.push_back(std::move(e));
    }
    return report;
}

}  // namespace aunet
