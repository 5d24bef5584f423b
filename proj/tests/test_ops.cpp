#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ddp/ops.hpp"

using namespace ddp;

namespace {

ops::OpCtx eval_ctx() { return {}; }

ops::OpCtx train_ctx(Rng* rng = nullptr) {
    ops::OpCtx c;
    c.train = true;
    c.rng = rng;
    return c;
}

Var<float> vleaf(Tensor t) { return leaf<float>(std::move(t)); }

Tensor random_tensor(const Shape& s, Rng& rng, float lo = -1.0f, float hi = 1.0f) {
    std::uniform_real_distribution<float> d(lo, hi);
    Tensor t(s);
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = d(rng);
    return t;
}

}  // namespace

TEST_CASE("conv output extent formula and validation") {
    ops::ConvParams p{.in_channels = 3, .out_channels = 8, .kh = 3, .kw = 3, .sh = 2, .sw = 2,
                      .ph = 1, .pw = 1};
    CHECK(ops::conv_output_shape(Shape{1, 3, 64, 64}, p) == Shape{1, 8, 32, 32});
    p.dh = p.dw = 2;
    p.ph = p.pw = 2;
    p.sh = p.sw = 1;
    CHECK(ops::conv_output_shape(Shape{1, 3, 64, 64}, p) == Shape{1, 8, 64, 64});
    CHECK_THROWS_AS(ops::conv_output_shape(Shape{1, 4, 8, 8}, p), ShapeError);
    ops::ConvParams big{.in_channels = 1, .out_channels = 1, .kh = 9, .kw = 9};
    CHECK_THROWS_AS(ops::conv_output_shape(Shape{1, 1, 4, 4}, big), ShapeError);
}

TEST_CASE("conv2d: ones image, ones 3x3 kernel, pad 1 counts the valid taps") {
    auto x = vleaf(Tensor(Shape{1, 1, 3, 3}, 1.0f));
    auto w = vleaf(Tensor(Shape{1, 1, 3, 3}, 1.0f));
    ops::ConvParams p{.in_channels = 1, .out_channels = 1, .kh = 3, .kw = 3, .ph = 1, .pw = 1};
    auto y = ops::conv2d<float>(eval_ctx(), x, w, nullptr, p);
    const float expected[9] = {4, 6, 4, 6, 9, 6, 4, 6, 4};
    for (int i = 0; i < 9; ++i) CHECK(y->value[i] == expected[i]);
}

TEST_CASE("conv2d: dilation 2 center tap count") {
    auto x = vleaf(Tensor(Shape{1, 1, 5, 5}, 1.0f));
    auto w = vleaf(Tensor(Shape{1, 1, 3, 3}, 1.0f));
    ops::ConvParams p{.in_channels = 1, .out_channels = 1, .kh = 3, .kw = 3, .ph = 2, .pw = 2,
                      .dh = 2, .dw = 2};
    auto y = ops::conv2d<float>(eval_ctx(), x, w, nullptr, p);
    CHECK(y->value.shape() == Shape{1, 1, 5, 5});
    CHECK(y->value.at(0, 0, 2, 2) == 9.0f);  // all nine dilated taps inside
    CHECK(y->value.at(0, 0, 0, 0) == 4.0f);  // corner: only the lower-right quad
}

TEST_CASE("conv2d: strided 1x1 identity kernel samples even coordinates") {
    Tensor xv(Shape{1, 1, 4, 4});
    for (std::int64_t i = 0; i < 16; ++i) xv[i] = static_cast<float>(i);
    auto x = vleaf(xv);
    auto w = vleaf(Tensor(Shape{1, 1, 1, 1}, 1.0f));
    ops::ConvParams p{.in_channels = 1, .out_channels = 1, .kh = 1, .kw = 1, .sh = 2, .sw = 2};
    auto y = ops::conv2d<float>(eval_ctx(), x, w, nullptr, p);
    CHECK(y->value.shape() == Shape{1, 1, 2, 2});
    CHECK(y->value[0] == 0.0f);
    CHECK(y->value[1] == 2.0f);
    CHECK(y->value[2] == 8.0f);
    CHECK(y->value[3] == 10.0f);
}

TEST_CASE("conv2d: dilated conv equals conv with a zero-inflated kernel") {
    Rng rng(21);
    Tensor xv = random_tensor(Shape{1, 2, 9, 9}, rng);
    Tensor wv = random_tensor(Shape{3, 2, 3, 3}, rng);
    ops::ConvParams dil{.in_channels = 2, .out_channels = 3, .kh = 3, .kw = 3, .ph = 2, .pw = 2,
                        .dh = 2, .dw = 2};
    auto y_dil = ops::conv2d<float>(eval_ctx(), vleaf(xv), vleaf(wv), nullptr, dil);

    // the equivalent 5x5 kernel with zeros between taps
    Tensor w5(Shape{3, 2, 5, 5});
    for (std::int64_t oc = 0; oc < 3; ++oc)
        for (std::int64_t ic = 0; ic < 2; ++ic)
            for (std::int64_t i = 0; i < 3; ++i)
                for (std::int64_t j = 0; j < 3; ++j)
                    w5.at(oc, ic, 2 * i, 2 * j) = wv.at(oc, ic, i, j);
    ops::ConvParams plain{.in_channels = 2, .out_channels = 3, .kh = 5, .kw = 5, .ph = 2, .pw = 2};
    auto y_plain = ops::conv2d<float>(eval_ctx(), vleaf(xv), vleaf(w5), nullptr, plain);

    REQUIRE(y_dil->value.shape() == y_plain->value.shape());
    for (std::int64_t i = 0; i < y_dil->value.numel(); ++i)
        CHECK(y_dil->value[i] == doctest::Approx(y_plain->value[i]).epsilon(1e-5));
}

TEST_CASE("conv2d bias adds per output channel") {
    auto x = vleaf(Tensor(Shape{1, 1, 2, 2}, 0.0f));
    auto w = vleaf(Tensor(Shape{2, 1, 1, 1}, 1.0f));
    auto b = vleaf(Tensor(Shape{1, 2, 1, 1}, std::vector<float>{0.5f, -1.0f}));
    ops::ConvParams p{.in_channels = 1, .out_channels = 2, .kh = 1, .kw = 1, .has_bias = true};
    auto y = ops::conv2d(eval_ctx(), x, w, b, p);
    CHECK(y->value.at(0, 0, 1, 1) == 0.5f);
    CHECK(y->value.at(0, 1, 0, 0) == -1.0f);
}

TEST_CASE("batch_norm eval with identity statistics is a 1/sqrt(1+eps) scale") {
    Rng rng(5);
    Tensor xv = random_tensor(Shape{2, 3, 4, 4}, rng);
    Tensor rm(Shape{1, 3, 1, 1});
    Tensor rv(Shape{1, 3, 1, 1}, 1.0f);
    auto y = ops::batch_norm(eval_ctx(), vleaf(xv), vleaf(Tensor(Shape{1, 3, 1, 1}, 1.0f)),
                             vleaf(Tensor(Shape{1, 3, 1, 1})), rm, rv, 0.1f, 1e-5f);
    const float k = 1.0f / std::sqrt(1.0f + 1e-5f);
    for (std::int64_t i = 0; i < xv.numel(); ++i)
        CHECK(y->value[i] == doctest::Approx(xv[i] * k).epsilon(1e-6));
}

TEST_CASE("batch_norm train: constant input collapses to beta") {
    Tensor xv(Shape{2, 2, 3, 3}, 4.2f);
    Tensor rm(Shape{1, 2, 1, 1});
    Tensor rv(Shape{1, 2, 1, 1}, 1.0f);
    auto beta = vleaf(Tensor(Shape{1, 2, 1, 1}, std::vector<float>{0.7f, -0.3f}));
    auto y = ops::batch_norm(train_ctx(), vleaf(xv), vleaf(Tensor(Shape{1, 2, 1, 1}, 1.0f)), beta,
                             rm, rv, 0.1f, 1e-5f);
    for (std::int64_t c = 0; c < 2; ++c)
        for (std::int64_t i = 0; i < 9; ++i)
            CHECK(y->value.at(0, c, i / 3, i % 3) ==
                  doctest::Approx(beta->value[c]).epsilon(1e-5));
}

TEST_CASE("batch_norm train: output statistics match gamma/beta") {
    Rng rng(6);
    Tensor xv = random_tensor(Shape{4, 3, 8, 8}, rng, -2.0f, 3.0f);
    Tensor rm(Shape{1, 3, 1, 1});
    Tensor rv(Shape{1, 3, 1, 1}, 1.0f);
    Tensor gv(Shape{1, 3, 1, 1}, std::vector<float>{1.0f, 2.0f, 0.5f});
    Tensor bv(Shape{1, 3, 1, 1}, std::vector<float>{0.0f, -1.0f, 0.25f});
    auto y = ops::batch_norm(train_ctx(), vleaf(xv), vleaf(gv), vleaf(bv), rm, rv, 0.1f, 1e-5f);
    const std::int64_t per_channel = 4 * 8 * 8;
    for (std::int64_t c = 0; c < 3; ++c) {
        double mean = 0, var = 0;
        for (std::int64_t n = 0; n < 4; ++n)
            for (std::int64_t i = 0; i < 64; ++i) mean += y->value.at(n, c, i / 8, i % 8);
        mean /= per_channel;
        for (std::int64_t n = 0; n < 4; ++n)
            for (std::int64_t i = 0; i < 64; ++i) {
                const double d = y->value.at(n, c, i / 8, i % 8) - mean;
                var += d * d;
            }
        var /= per_channel;
        CHECK(mean == doctest::Approx(bv[c]).epsilon(1e-4));
        CHECK(var == doctest::Approx(gv[c] * gv[c]).epsilon(1e-3));
    }
}

TEST_CASE("batch_norm running statistics update with unbiased variance") {
    Tensor xv(Shape{1, 1, 1, 4}, std::vector<float>{1, 2, 3, 4});
    Tensor rm(Shape{1, 1, 1, 1}, 10.0f);
    Tensor rv(Shape{1, 1, 1, 1}, 5.0f);
    auto ctx = train_ctx();
    (void)ops::batch_norm(ctx, vleaf(xv), vleaf(Tensor(Shape{1, 1, 1, 1}, 1.0f)),
                          vleaf(Tensor(Shape{1, 1, 1, 1})), rm, rv, 0.1f, 1e-5f);
    // batch mean 2.5; unbiased variance = 5/3
    CHECK(rm[0] == doctest::Approx(0.9f * 10.0f + 0.1f * 2.5f).epsilon(1e-6));
    CHECK(rv[0] == doctest::Approx(0.9f * 5.0f + 0.1f * (5.0f / 3.0f)).epsilon(1e-6));
}

TEST_CASE("batch_norm with update_stats=false leaves buffers untouched") {
    Tensor xv(Shape{1, 1, 1, 4}, std::vector<float>{1, 2, 3, 4});
    Tensor rm(Shape{1, 1, 1, 1}, 10.0f);
    Tensor rv(Shape{1, 1, 1, 1}, 5.0f);
    auto ctx = train_ctx();
    ctx.update_stats = false;
    (void)ops::batch_norm(ctx, vleaf(xv), vleaf(Tensor(Shape{1, 1, 1, 1}, 1.0f)),
                          vleaf(Tensor(Shape{1, 1, 1, 1})), rm, rv, 0.1f, 1e-5f);
    CHECK(rm[0] == 10.0f);
    CHECK(rv[0] == 5.0f);
}

TEST_CASE("relu definition") {
    auto y = ops::relu(eval_ctx(), vleaf(Tensor(Shape{1, 1, 1, 3},
                                                std::vector<float>{-1.0f, 0.0f, 2.0f})));
    CHECK(y->value[0] == 0.0f);
    CHECK(y->value[1] == 0.0f);
    CHECK(y->value[2] == 2.0f);
}

TEST_CASE("dropout p=0 is the identity in train mode") {
    Rng rng(8);
    Tensor xv = random_tensor(Shape{1, 2, 4, 4}, rng);
    auto ctx = train_ctx(&rng);
    auto y = ops::dropout(ctx, vleaf(xv), 0.0);
    CHECK(y->value == xv);
}

TEST_CASE("dropout eval mode is the identity at any rate") {
    Rng rng(8);
    Tensor xv = random_tensor(Shape{1, 2, 4, 4}, rng);
    auto y = ops::dropout(eval_ctx(), vleaf(xv), 0.5);
    CHECK(y->value == xv);
}

TEST_CASE("dropout large-sample statistics: survivors and mean preserved") {
    Rng rng(9);
    const Shape s{1, 1, 1000, 1000};
    Tensor xv(s, 1.0f);
    auto ctx = train_ctx(&rng);
    auto y = ops::dropout(ctx, vleaf(xv), 0.1);
    std::int64_t survivors = 0;
    double sum = 0.0;
    for (std::int64_t i = 0; i < y->value.numel(); ++i) {
        if (y->value[i] != 0.0f) ++survivors;
        sum += y->value[i];
    }
    const double frac = static_cast<double>(survivors) / static_cast<double>(s.numel());
    CHECK(frac == doctest::Approx(0.9).epsilon(0.011));
    CHECK(sum / static_cast<double>(s.numel()) == doctest::Approx(1.0).epsilon(0.01));
    // surviving elements carry the 1/(1-p) inverted scale
    for (std::int64_t i = 0; i < y->value.numel(); ++i)
        if (y->value[i] != 0.0f) {
            CHECK(y->value[i] == doctest::Approx(1.0f / 0.9f).epsilon(1e-6));
            break;
        }
}

TEST_CASE("pool2x2 hand cases") {
    Tensor xv(Shape{1, 1, 2, 2}, std::vector<float>{1, 3, 5, 7});
    CHECK(ops::pool2x2(eval_ctx(), vleaf(xv), ops::PoolKind::Avg)->value[0] == 4.0f);
    CHECK(ops::pool2x2(eval_ctx(), vleaf(xv), ops::PoolKind::Max)->value[0] == 7.0f);
    Tensor cv(Shape{2, 3, 4, 4}, 2.5f);
    CHECK(ops::pool2x2(eval_ctx(), vleaf(cv), ops::PoolKind::Avg)->value ==
          Tensor(Shape{2, 3, 2, 2}, 2.5f));
    CHECK(ops::pool2x2(eval_ctx(), vleaf(cv), ops::PoolKind::Max)->value ==
          Tensor(Shape{2, 3, 2, 2}, 2.5f));
    CHECK_THROWS_AS(ops::pool2x2(eval_ctx(), vleaf(Tensor(Shape{1, 1, 3, 4})), ops::PoolKind::Avg),
                    ShapeError);
}

TEST_CASE("max pool ties resolve to the first element in scan order") {
    // verified through the gradient: the tie winner receives it
    Tensor xv(Shape{1, 1, 2, 2}, 1.0f);
    ops::OpCtx ctx;
    ctx.record = true;
    ctx.train = true;
    auto x = leaf<float>(xv, true);
    auto y = ops::pool2x2(ctx, x, ops::PoolKind::Max);
    y->requires_grad = true;
    y->accumulate(Tensor(Shape{1, 1, 1, 1}, 1.0f));
    y->backward_fn(*y);
    CHECK(x->grad[0] == 1.0f);
    CHECK(x->grad[1] == 0.0f);
    CHECK(x->grad[2] == 0.0f);
    CHECK(x->grad[3] == 0.0f);
}

TEST_CASE("bilinear upsample: half-pixel mapping on [0,1]") {
    Tensor xv(Shape{1, 1, 1, 2}, std::vector<float>{0.0f, 1.0f});
    auto y = ops::bilinear_upsample(eval_ctx(), vleaf(xv), 2);
    REQUIRE(y->value.shape() == Shape{1, 1, 2, 4});
    CHECK(y->value.at(0, 0, 0, 0) == doctest::Approx(0.0f));
    CHECK(y->value.at(0, 0, 0, 1) == doctest::Approx(0.25f));
    CHECK(y->value.at(0, 0, 0, 2) == doctest::Approx(0.75f));
    CHECK(y->value.at(0, 0, 0, 3) == doctest::Approx(1.0f));
}

TEST_CASE("bilinear upsample: constants and factor 1") {
    Tensor cv(Shape{1, 2, 3, 3}, 1.7f);
    auto y = ops::bilinear_upsample(eval_ctx(), vleaf(cv), 4);
    for (std::int64_t i = 0; i < y->value.numel(); ++i)
        CHECK(y->value[i] == doctest::Approx(1.7f));
    CHECK(ops::bilinear_upsample(eval_ctx(), vleaf(cv), 1)->value == cv);
}

TEST_CASE("pixel shuffle channel-to-space order") {
    Tensor xv(Shape{1, 4, 1, 1}, std::vector<float>{1, 2, 3, 4});
    auto y = ops::pixel_shuffle(eval_ctx(), vleaf(xv), 2);
    REQUIRE(y->value.shape() == Shape{1, 1, 2, 2});
    CHECK(y->value.at(0, 0, 0, 0) == 1.0f);
    CHECK(y->value.at(0, 0, 0, 1) == 2.0f);
    CHECK(y->value.at(0, 0, 1, 0) == 3.0f);
    CHECK(y->value.at(0, 0, 1, 1) == 4.0f);
}

TEST_CASE("pixel shuffle: identity at r=1 and element conservation") {
    Rng rng(10);
    Tensor xv = random_tensor(Shape{2, 8, 3, 5}, rng);
    CHECK(ops::pixel_shuffle(eval_ctx(), vleaf(xv), 1)->value == xv);
    auto y = ops::pixel_shuffle(eval_ctx(), vleaf(xv), 2);
    CHECK(y->value.numel() == xv.numel());
    CHECK(y->value.shape() == Shape{2, 2, 6, 10});
}

TEST_CASE("channel softmax: symmetry, closed form and normalization") {
    auto y = ops::channel_softmax(eval_ctx(), vleaf(Tensor(Shape{1, 9, 2, 2}, 3.0f)));
    for (std::int64_t i = 0; i < y->value.numel(); ++i)
        CHECK(y->value[i] == doctest::Approx(1.0f / 9.0f));

    Tensor two(Shape{1, 2, 1, 1}, std::vector<float>{std::log(2.0f), 0.0f});
    auto z = ops::channel_softmax(eval_ctx(), vleaf(two));
    CHECK(z->value[0] == doctest::Approx(2.0f / 3.0f));
    CHECK(z->value[1] == doctest::Approx(1.0f / 3.0f));

    Rng rng(11);
    Tensor xv = random_tensor(Shape{2, 5, 3, 3}, rng, -50.0f, 50.0f);
    auto s = ops::channel_softmax(eval_ctx(), vleaf(xv));
    for (std::int64_t n = 0; n < 2; ++n)
        for (std::int64_t i = 0; i < 9; ++i) {
            float sum = 0;
            for (std::int64_t c = 0; c < 5; ++c) sum += s->value.at(n, c, i / 3, i % 3);
            CHECK(sum == doctest::Approx(1.0f).epsilon(1e-6));
        }
}

TEST_CASE("channel softmax is stable for extreme logits") {
    Tensor xv(Shape{1, 2, 1, 1}, std::vector<float>{1000.0f, -1000.0f});
    auto y = ops::channel_softmax(eval_ctx(), vleaf(xv));
    CHECK(y->value[0] == doctest::Approx(1.0f));
    CHECK(y->value[1] == doctest::Approx(0.0f));
}

TEST_CASE("dynamic filter: uniform weights average, delta passes through") {
    Rng rng(12);
    Tensor heat(Shape{1, 2, 4, 4}, 3.3f);
    Tensor uni(Shape{1, 9, 4, 4}, 1.0f / 9.0f);
    auto y = ops::dynamic_filter_apply(eval_ctx(), vleaf(heat), vleaf(uni));
    // interior positions: convex combination of a constant
    CHECK(y->value.at(0, 0, 1, 1) == doctest::Approx(3.3f));
    CHECK(y->value.at(0, 1, 2, 2) == doctest::Approx(3.3f));

    Tensor hv = random_tensor(Shape{1, 3, 5, 5}, rng);
    Tensor delta(Shape{1, 9, 5, 5});
    for (std::int64_t i = 0; i < 25; ++i) delta.at(0, 4, i / 5, i % 5) = 1.0f;  // center tap
    auto z = ops::dynamic_filter_apply(eval_ctx(), vleaf(hv), vleaf(delta));
    CHECK(z->value == hv);
}

TEST_CASE("dynamic filter equals a brute-force zero-padded box filter") {
    Rng rng(13);
    Tensor hv = random_tensor(Shape{1, 2, 5, 6}, rng);
    Tensor uni(Shape{1, 9, 5, 6}, 1.0f / 9.0f);
    auto y = ops::dynamic_filter_apply(eval_ctx(), vleaf(hv), vleaf(uni));
    for (std::int64_t c = 0; c < 2; ++c)
        for (std::int64_t i = 0; i < 5; ++i)
            for (std::int64_t j = 0; j < 6; ++j) {
                float acc = 0.0f;
                for (std::int64_t di = -1; di <= 1; ++di)
                    for (std::int64_t dj = -1; dj <= 1; ++dj) {
                        const std::int64_t y_ = i + di, x_ = j + dj;
                        if (y_ < 0 || y_ >= 5 || x_ < 0 || x_ >= 6) continue;
                        acc += hv.at(0, c, y_, x_) / 9.0f;
                    }
                CHECK(y->value.at(0, c, i, j) == doctest::Approx(acc).epsilon(1e-5));
            }
}

TEST_CASE("cross entropy: uniform logits give ln C") {
    auto logits = vleaf(Tensor(Shape{1, 4, 2, 2}));
    std::vector<std::int32_t> labels(4, 1);
    auto loss = ops::cross_entropy_loss(eval_ctx(), logits, labels, kIgnoreLabel);
    CHECK(loss->value[0] == doctest::Approx(std::log(4.0f)).epsilon(1e-6));
}

TEST_CASE("cross entropy: all pixels ignored gives zero loss and gradient") {
    ops::OpCtx ctx;
    ctx.record = true;
    auto logits = leaf<float>(Tensor(Shape{1, 3, 2, 2}, 1.0f), true);
    std::vector<std::int32_t> labels(4, kIgnoreLabel);
    auto loss = ops::cross_entropy_loss(ctx, logits, labels, kIgnoreLabel);
    CHECK(loss->value[0] == 0.0f);
    backward(loss);
    if (logits->has_grad)
        for (std::int64_t i = 0; i < logits->grad.numel(); ++i) CHECK(logits->grad[i] == 0.0f);
}

TEST_CASE("cross entropy: confident correct prediction") {
    auto logits = vleaf(Tensor(Shape{1, 2, 1, 1}, std::vector<float>{10.0f, -10.0f}));
    std::vector<std::int32_t> labels{0};
    auto loss = ops::cross_entropy_loss(eval_ctx(), logits, labels, kIgnoreLabel);
    CHECK(static_cast<double>(loss->value[0]) == doctest::Approx(2.061e-9).epsilon(0.01));
}

TEST_CASE("cross entropy rejects out-of-range labels") {
    auto logits = vleaf(Tensor(Shape{1, 2, 1, 1}));
    std::vector<std::int32_t> labels{5};
    CHECK_THROWS_AS(ops::cross_entropy_loss(eval_ctx(), logits, labels, kIgnoreLabel), DataError);
}

TEST_CASE("op-level concat/slice round trip through the tape types") {
    Rng rng(14);
    Tensor a = random_tensor(Shape{1, 3, 4, 4}, rng);
    Tensor b = random_tensor(Shape{1, 5, 4, 4}, rng);
    auto cat = ops::concat(eval_ctx(), std::vector<Var<float>>{vleaf(a), vleaf(b)});
    CHECK(cat->value.shape() == Shape{1, 8, 4, 4});
    CHECK(ops::slice_channels(eval_ctx(), cat, 0, 3)->value == a);
    CHECK(ops::slice_channels(eval_ctx(), cat, 3, 5)->value == b);
    CHECK_THROWS_AS(ops::slice_channels(eval_ctx(), cat, 6, 4), ShapeError);
}
