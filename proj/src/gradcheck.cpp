#include "ddp/gradcheck.hpp"

#include <functional>
#include <iomanip>
#include <ostream>

#include "ddp/ops.hpp"

namespace ddp {

namespace {

using DT = TensorT<double>;
using DV = Var<double>;

DT randt(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    DT t(s);
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = dist(rng);
    return t;
}

// Random fixed projection turning a tensor-valued op into a scalar function.
double project(const DT& y, const DT& w) {
    double s = 0.0;
    for (std::int64_t i = 0; i < y.numel(); ++i) s += y[i] * w[i];
    return s;
}

using Builder = std::function<DV(const ops::OpCtx&, const std::vector<DV>&)>;

// Checks d(project(op(inputs)))/d(inputs[j]) against central differences.
GradCheckResult check_op(const std::string& name, const std::vector<DT>& inputs, std::size_t j,
                         const Builder& build, Rng& rng, double tol, double eps) {
    ops::OpCtx ctx;
    ctx.train = true;
    ctx.update_stats = false;

    auto run = [&](const DT& xj, bool record) {
        ops::OpCtx c = ctx;
        c.record = record;
        std::vector<DV> vars;
        for (std::size_t i = 0; i < inputs.size(); ++i)
            vars.push_back(leaf<double>(i == j ? xj : inputs[i], record));
        DV out = build(c, vars);
        return std::pair{out, vars[j]};
    };

    const Shape out_shape = run(inputs[j], false).first->value.shape();
    const DT w = randt(out_shape, rng);

    auto f = [&](const DT& xj) { return project(run(xj, false).first->value, w); };
    auto analytic = [&](const DT& xj) {
        auto [out, xv] = run(xj, true);
        auto loss = ops::make_node<double>(
            ops::OpCtx{.record = true}, DT(Shape{1, 1, 1, 1}, project(out->value, w)), {out},
            [w](Node<double>& node) {
                DT g(w.shape());
                for (std::int64_t i = 0; i < g.numel(); ++i) g[i] = w[i] * node.grad[0];
                node.inputs[0]->accumulate(g);
            });
        backward(loss);
        return xv->has_grad ? xv->grad : DT(xj.shape());
    };

    GradCheckResult r;
    r.name = name;
    r.worst_rel_err = finite_diff_check<double>(f, analytic, inputs[j], eps);
    r.pass = r.worst_rel_err < tol;
    return r;
}

GradCheckResult check_scalar_op(const std::string& name, const DT& x,
                                const std::function<DV(const ops::OpCtx&, const DV&)>& build,
                                double tol, double eps) {
    auto f = [&](const DT& xv) {
        ops::OpCtx c;
        c.train = true;
        c.update_stats = false;
        return build(c, leaf<double>(xv))->value[0];
    };
    auto analytic = [&](const DT& xv) {
        ops::OpCtx c;
        c.record = true;
        c.train = true;
        c.update_stats = false;
        DV x0 = leaf<double>(xv, true);
        DV loss = build(c, x0);
        backward(loss);
        return x0->has_grad ? x0->grad : DT(xv.shape());
    };
    GradCheckResult r;
    r.name = name;
    r.worst_rel_err = finite_diff_check<double>(f, analytic, x, eps);
    r.pass = r.worst_rel_err < tol;
    return r;
}

}  // namespace

ModelSpec micro_spec() {
    ModelSpec s;
    s.name = "micro";
    s.variant = "cityscapes";
    s.classes = 2;
    s.stem_width = 4;
    s.growth = 4;
    s.blocks = {BlockSpec{1, LayerVariant::Plain, {}}, BlockSpec{1, LayerVariant::Plain, {}},
                BlockSpec{1, LayerVariant::DpmB, {2}}, BlockSpec{1, LayerVariant::DpmC, {2}}};
    s.plain_bottleneck = 8;
    s.dpm_branch_bottleneck = 4;
    s.decoder_compress = 8;
    s.filter_window = 3;
    s.shuffle_r = 2;
    s.dropout_p = 0.0;
    return s;
}

std::vector<GradCheckResult> run_gradient_checks(std::uint64_t seed, double tol, double eps) {
    Rng rng = substream(seed, "gradcheck");
    std::vector<GradCheckResult> out;

    // conv2d: several geometries, gradient w.r.t. input, weight and bias
    struct ConvCase {
        std::string name;
        ops::ConvParams p;
        Shape in;
    };
    const std::vector<ConvCase> convs = {
        {"conv 1x1", {.in_channels = 3, .out_channels = 4, .kh = 1, .kw = 1}, {2, 3, 5, 6}},
        {"conv 3x3 pad1",
         {.in_channels = 3, .out_channels = 4, .kh = 3, .kw = 3, .ph = 1, .pw = 1},
         {2, 3, 5, 6}},
        {"conv 3x3 s2",
         {.in_channels = 2, .out_channels = 3, .kh = 3, .kw = 3, .sh = 2, .sw = 2, .ph = 1,
          .pw = 1},
         {1, 2, 8, 8}},
        {"conv 3x3 dil2",
         {.in_channels = 2, .out_channels = 3, .kh = 3, .kw = 3, .ph = 2, .pw = 2, .dh = 2,
          .dw = 2},
         {1, 2, 7, 7}},
        {"conv 3x3 bias",
         {.in_channels = 2, .out_channels = 3, .kh = 3, .kw = 3, .ph = 1, .pw = 1,
          .has_bias = true},
         {1, 2, 6, 6}},
    };
    for (const auto& cc : convs) {
        const Shape ws{cc.p.out_channels, cc.p.in_channels, cc.p.kh, cc.p.kw};
        std::vector<DT> ins = {randt(cc.in, rng), randt(ws, rng)};
        if (cc.p.has_bias) ins.push_back(randt(Shape{1, cc.p.out_channels, 1, 1}, rng));
        auto build = [p = cc.p](const ops::OpCtx& c, const std::vector<DV>& v) {
            return ops::conv2d(c, v[0], v[1], p.has_bias ? v[2] : nullptr, p);
        };
        out.push_back(check_op(cc.name + " d/dx", ins, 0, build, rng, tol, eps));
        out.push_back(check_op(cc.name + " d/dw", ins, 1, build, rng, tol, eps));
        if (cc.p.has_bias) out.push_back(check_op(cc.name + " d/db", ins, 2, build, rng, tol, eps));
    }

    // batch norm, train and eval paths
    {
        const Shape xs{3, 4, 5, 5};
        std::vector<DT> ins = {randt(xs, rng), randt(Shape{1, 4, 1, 1}, rng, 0.5, 1.5),
                               randt(Shape{1, 4, 1, 1}, rng)};
        DT rm = randt(Shape{1, 4, 1, 1}, rng, -0.2, 0.2);
        DT rv = randt(Shape{1, 4, 1, 1}, rng, 0.5, 1.5);
        for (bool train : {true, false}) {
            auto build = [rm, rv, train](const ops::OpCtx& c, const std::vector<DV>& v) mutable {
                ops::OpCtx cc = c;
                cc.train = train;
                return ops::batch_norm(cc, v[0], v[1], v[2], rm, rv, 0.1, 1e-5);
            };
            const std::string tag = train ? "batch_norm train" : "batch_norm eval";
            out.push_back(check_op(tag + " d/dx", ins, 0, build, rng, tol, eps));
            out.push_back(check_op(tag + " d/dgamma", ins, 1, build, rng, tol, eps));
            out.push_back(check_op(tag + " d/dbeta", ins, 2, build, rng, tol, eps));
        }
    }

    // elementwise and structural ops
    {
        DT x = randt(Shape{2, 3, 4, 5}, rng);
        for (std::int64_t i = 0; i < x.numel(); ++i)  // keep clear of the kink at zero
            if (std::abs(x[i]) < 0.05) x[i] = x[i] < 0 ? -0.05 : 0.05;
        out.push_back(check_op(
            "relu", {x}, 0,
            [](const ops::OpCtx& c, const std::vector<DV>& v) { return ops::relu(c, v[0]); }, rng,
            tol, eps));
        out.push_back(check_op(
            "dropout p=0", {x}, 0,
            [](const ops::OpCtx& c, const std::vector<DV>& v) { return ops::dropout(c, v[0], 0.0); },
            rng, tol, eps));
    }
    {
        DT x = randt(Shape{2, 3, 6, 6}, rng);
        out.push_back(check_op(
            "avg_pool2x2", {x}, 0,
            [](const ops::OpCtx& c, const std::vector<DV>& v) {
                return ops::pool2x2(c, v[0], ops::PoolKind::Avg);
            },
            rng, tol, eps));
        out.push_back(check_op(
            "max_pool2x2", {x}, 0,
            [](const ops::OpCtx& c, const std::vector<DV>& v) {
                return ops::pool2x2(c, v[0], ops::PoolKind::Max);
            },
            rng, tol, eps));
        out.push_back(check_op(
            "bilinear x2", {x}, 0,
            [](const ops::OpCtx& c, const std::vector<DV>& v) {
                return ops::bilinear_upsample(c, v[0], 2);
            },
            rng, tol, eps));
    }
    {
        DT x = randt(Shape{2, 8, 3, 4}, rng);
        out.push_back(check_op(
            "pixel_shuffle r=2", {x}, 0,
            [](const ops::OpCtx& c, const std::vector<DV>& v) {
                return ops::pixel_shuffle(c, v[0], 2);
            },
            rng, tol, eps));
        out.push_back(check_op(
            "channel_softmax", {x}, 0,
            [](const ops::OpCtx& c, const std::vector<DV>& v) {
                return ops::channel_softmax(c, v[0]);
            },
            rng, tol, eps));
        out.push_back(check_op(
            "slice_channels", {x}, 0,
            [](const ops::OpCtx& c, const std::vector<DV>& v) {
                return ops::slice_channels(c, v[0], 2, 4);
            },
            rng, tol, eps));
    }
    {
        std::vector<DT> ins = {randt(Shape{1, 3, 4, 4}, rng), randt(Shape{1, 2, 4, 4}, rng)};
        auto build = [](const ops::OpCtx& c, const std::vector<DV>& v) {
            return ops::concat(c, std::vector<DV>{v[0], v[1]});
        };
        out.push_back(check_op("concat d/da", ins, 0, build, rng, tol, eps));
        out.push_back(check_op("concat d/db", ins, 1, build, rng, tol, eps));
    }
    {
        std::vector<DT> ins = {randt(Shape{1, 3, 4, 4}, rng), randt(Shape{1, 3, 4, 4}, rng)};
        auto build = [](const ops::OpCtx& c, const std::vector<DV>& v) {
            return ops::add_op(c, v[0], v[1]);
        };
        out.push_back(check_op("add d/da", ins, 0, build, rng, tol, eps));
        out.push_back(check_op("add d/db", ins, 1, build, rng, tol, eps));
    }
    {
        std::vector<DT> ins = {randt(Shape{1, 2, 5, 5}, rng), randt(Shape{1, 9, 5, 5}, rng)};
        auto build = [](const ops::OpCtx& c, const std::vector<DV>& v) {
            return ops::dynamic_filter_apply(c, v[0], v[1]);
        };
        out.push_back(check_op("dynamic_filter d/dheat", ins, 0, build, rng, tol, eps));
        out.push_back(check_op("dynamic_filter d/dfilter", ins, 1, build, rng, tol, eps));
    }

    // cross entropy (scalar output; includes ignored pixels)
    {
        DT logits = randt(Shape{2, 3, 4, 4}, rng);
        std::vector<std::int32_t> labels(2 * 4 * 4);
        std::uniform_int_distribution<int> ldist(0, 3);
        for (auto& l : labels) {
            const int v = ldist(rng);
            l = v == 3 ? kIgnoreLabel : v;
        }
        out.push_back(check_scalar_op(
            "cross_entropy", logits,
            [labels](const ops::OpCtx& c, const DV& x) {
                return ops::cross_entropy_loss(c, x, labels, kIgnoreLabel);
            },
            tol, eps));
    }

    // end-to-end: micro network, loss gradient w.r.t. every parameter tensor,
    // finite differences over a handful of sampled elements each
    {
        auto model = build_ddpnet<double>(micro_spec(), 7);
        // jitter every parameter away from the zero-init point: with beta = 0
        // and bias = 0 several activations sit exactly on the ReLU kink, where
        // the loss is genuinely one-sided
        {
            std::uniform_real_distribution<double> jitter(-0.2, 0.2);
            for (const auto& pname : model.store.param_order) {
                auto& p = model.store.params.at(pname);
                for (std::int64_t i = 0; i < p->value.numel(); ++i) p->value[i] += jitter(rng);
            }
        }
        const DT input = randt(Shape{1, 3, 64, 64}, rng, 0.0, 1.0);
        std::vector<std::int32_t> labels(64 * 64);
        std::uniform_int_distribution<int> ldist(0, 2);
        for (auto& l : labels) {
            const int v = ldist(rng);
            l = v == 2 ? kIgnoreLabel : v;
        }

        auto loss_value = [&]() {
            ops::OpCtx c;
            c.train = true;
            c.update_stats = false;
            auto logits = forward_graph(model.graph, model.store, {leaf<double>(input)}, c);
            return ops::cross_entropy_loss(c, logits, labels, kIgnoreLabel)->value[0];
        };

        model.store.zero_grad();
        {
            ops::OpCtx c;
            c.record = true;
            c.train = true;
            c.update_stats = false;
            auto logits = forward_graph(model.graph, model.store, {leaf<double>(input)}, c);
            backward(ops::cross_entropy_loss(c, logits, labels, kIgnoreLabel));
        }

        GradCheckResult r;
        r.name = "end-to-end micro net (sampled params)";
        for (const auto& pname : model.store.param_order) {
            auto& p = model.store.params.at(pname);
            const DT grad = p->has_grad ? p->grad : DT(p->value.shape());
            const std::int64_t n = p->value.numel();
            std::uniform_int_distribution<std::int64_t> idist(0, n - 1);
            for (int s = 0; s < std::min<std::int64_t>(n, 4); ++s) {
                const std::int64_t i = idist(rng);
                const double orig = p->value[i];
                const double ana = grad[i];
                // A composed network is only piecewise smooth (ReLU kinks,
                // max-pool argmax boundaries). Shrink the step until the
                // stencil no longer straddles a kink; a wrong backward rule
                // disagrees at every step size.
                double best = std::numeric_limits<double>::infinity();
                for (double h = eps; h >= eps / 64.0; h /= 8.0) {
                    p->value[i] = orig + h;
                    const double fp = loss_value();
                    p->value[i] = orig - h;
                    const double fm = loss_value();
                    p->value[i] = orig;
                    const double num = (fp - fm) / (2.0 * h);
                    const double denom = std::max({std::abs(num), std::abs(ana), 1e-8});
                    best = std::min(best, std::abs(num - ana) / denom);
                    if (best < tol) break;
                }
                r.worst_rel_err = std::max(r.worst_rel_err, best);
            }
        }
        r.pass = r.worst_rel_err < tol;
        out.push_back(r);
    }

    return out;
}

bool print_gradient_checks(std::ostream& os, const std::vector<GradCheckResult>& results) {
    bool all = true;
    for (const auto& r : results) {
        os << std::left << std::setw(42) << r.name << std::scientific << std::setprecision(3)
           << r.worst_rel_err << (r.pass ? "  PASS" : "  FAIL") << "\n";
        os.unsetf(std::ios::scientific);
        all = all && r.pass;
    }
    os << (all ? "all gradient checks passed" : "GRADIENT CHECK FAILURES PRESENT") << "\n";
    return all;
}

}  // namespace ddp
