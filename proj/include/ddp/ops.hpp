#pragma once

#include <cmath>
#include <optional>

#include "ddp/autodiff.hpp"

namespace ddp {
namespace ops {

struct ConvParams {
    std::int64_t in_channels = 0;
    std::int64_t out_channels = 0;
    std::int64_t kh = 1, kw = 1;
    std::int64_t sh = 1, sw = 1;
    std::int64_t ph = 0, pw = 0;
    std::int64_t dh = 1, dw = 1;
    bool has_bias = false;
};

inline std::int64_t conv_extent(std::int64_t in, std::int64_t pad, std::int64_t dil,
                                std::int64_t k, std::int64_t stride) {
    return (in + 2 * pad - dil * (k - 1) - 1) / stride + 1;
}

inline Shape conv_output_shape(const Shape& in, const ConvParams& p) {
    if (in.c != p.in_channels)
        throw ShapeError("conv2d: input channels " + std::to_string(in.c) + " != " +
                         std::to_string(p.in_channels));
    if (p.sh < 1 || p.sw < 1 || p.dh < 1 || p.dw < 1)
        throw ConfigError("conv2d: stride and dilation must be >= 1");
    const std::int64_t oh = conv_extent(in.h, p.ph, p.dh, p.kh, p.sh);
    const std::int64_t ow = conv_extent(in.w, p.pw, p.dw, p.kw, p.sw);
    if (oh < 1 || ow < 1) throw ShapeError("conv2d: non-positive output extent for " + in.str());
    return Shape{in.n, p.out_channels, oh, ow};
}

// Execution context for one forward pass. `record` links results onto the
// tape; `train` selects batch-statistics / dropout behavior; `update_stats`
// lets gradient checks evaluate train mode without touching running stats.
struct OpCtx {
    bool record = false;
    bool train = false;
    bool update_stats = true;
    Rng* rng = nullptr;
};

template <typename T>
Var<T> make_node(const OpCtx& ctx, TensorT<T> value, std::vector<Var<T>> inputs,
                 std::function<void(Node<T>&)> bw) {
    auto n = std::make_shared<Node<T>>(std::move(value));
    if (ctx.record && any_requires_grad(inputs)) {
        n->requires_grad = true;
        n->inputs = std::move(inputs);
        n->backward_fn = std::move(bw);
    }
    return n;
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation, zero padding, stride, dilation)
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> conv2d_forward(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>* bias,
                          const ConvParams& p) {
    const Shape& in = x.shape();
    const Shape out_s = conv_output_shape(in, p);
    if (!(w.shape() == Shape{p.out_channels, p.in_channels, p.kh, p.kw}))
        throw ShapeError("conv2d: weight shape " + w.shape().str() + " does not match params");
    TensorT<T> y(out_s);
    const std::int64_t N = in.n, IC = in.c, H = in.h, W = in.w;
    const std::int64_t OC = out_s.c, OH = out_s.h, OW = out_s.w;
    const T* xd = x.data();
    const T* wd = w.data();
    T* yd = y.data();

    if (p.kh == 1 && p.kw == 1 && p.sh == 1 && p.sw == 1 && p.ph == 0 && p.pw == 0) {
        const std::int64_t plane = H * W;
#pragma omp parallel for schedule(static)
        for (std::int64_t noc = 0; noc < N * OC; ++noc) {
            const std::int64_t n = noc / OC, oc = noc % OC;
            T* out = yd + (n * OC + oc) * plane;
            const T b = bias ? (*bias)[oc] : T(0);
            for (std::int64_t s = 0; s < plane; ++s) out[s] = b;
            for (std::int64_t ic = 0; ic < IC; ++ic) {
                const T wv = wd[oc * IC + ic];
                const T* src = xd + (n * IC + ic) * plane;
                for (std::int64_t s = 0; s < plane; ++s) out[s] += wv * src[s];
            }
        }
        return y;
    }

#pragma omp parallel for schedule(static)
    for (std::int64_t noc = 0; noc < N * OC; ++noc) {
        const std::int64_t n = noc / OC, oc = noc % OC;
        T* out = yd + (n * OC + oc) * OH * OW;
        const T b = bias ? (*bias)[oc] : T(0);
        for (std::int64_t s = 0; s < OH * OW; ++s) out[s] = b;
        for (std::int64_t ic = 0; ic < IC; ++ic) {
            const T* src = xd + (n * IC + ic) * H * W;
            const T* wrow = wd + (oc * IC + ic) * p.kh * p.kw;
            for (std::int64_t kh = 0; kh < p.kh; ++kh) {
                for (std::int64_t kw = 0; kw < p.kw; ++kw) {
                    const T wv = wrow[kh * p.kw + kw];
                    if (wv == T(0)) continue;
                    for (std::int64_t oh = 0; oh < OH; ++oh) {
                        const std::int64_t ih = oh * p.sh - p.ph + kh * p.dh;
                        if (ih < 0 || ih >= H) continue;
                        const T* srow = src + ih * W;
                        T* orow = out + oh * OW;
                        // valid ow range: 0 <= ow*sw - pw + kw*dw < W
                        const std::int64_t base = p.pw - kw * p.dw;
                        std::int64_t lo = 0;
                        if (base > 0) lo = (base + p.sw - 1) / p.sw;
                        std::int64_t hi = OW;  // exclusive
                        {
                            const std::int64_t lim = W - 1 + base;  // max iw index condition
                            if (lim < 0)
                                hi = 0;
                            else
                                hi = std::min<std::int64_t>(OW, lim / p.sw + 1);
                        }
                        std::int64_t iw = lo * p.sw - base;
                        for (std::int64_t ow = lo; ow < hi; ++ow, iw += p.sw)
                            orow[ow] += wv * srow[iw];
                    }
                }
            }
        }
    }
    return y;
}

template <typename T>
void conv2d_backward(const TensorT<T>& x, const TensorT<T>& w, const ConvParams& p,
                     const TensorT<T>& dy, TensorT<T>* dx, TensorT<T>* dw, TensorT<T>* db) {
    const Shape& in = x.shape();
    const Shape out_s = dy.shape();
    const std::int64_t N = in.n, IC = in.c, H = in.h, W = in.w;
    const std::int64_t OC = out_s.c, OH = out_s.h, OW = out_s.w;
    for (std::int64_t n = 0; n < N; ++n) {
        for (std::int64_t oc = 0; oc < OC; ++oc) {
            for (std::int64_t oh = 0; oh < OH; ++oh) {
                for (std::int64_t ow = 0; ow < OW; ++ow) {
                    const T g = dy.at(n, oc, oh, ow);
                    if (g == T(0)) continue;
                    if (db) (*db)[oc] += g;
                    for (std::int64_t ic = 0; ic < IC; ++ic) {
                        for (std::int64_t kh = 0; kh < p.kh; ++kh) {
                            const std::int64_t ih = oh * p.sh - p.ph + kh * p.dh;
                            if (ih < 0 || ih >= H) continue;
                            for (std::int64_t kw = 0; kw < p.kw; ++kw) {
                                const std::int64_t iw = ow * p.sw - p.pw + kw * p.dw;
                                if (iw < 0 || iw >= W) continue;
                                const T xv = x.at(n, ic, ih, iw);
                                if (dw) dw->at(oc, ic, kh, kw) += xv * g;
                                if (dx) dx->at(n, ic, ih, iw) += w.at(oc, ic, kh, kw) * g;
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
Var<T> conv2d(const OpCtx& ctx, const Var<T>& x, const Var<T>& w, const Var<T>& bias,
              const ConvParams& p) {
    const TensorT<T>* b = bias ? &bias->value : nullptr;
    TensorT<T> y = conv2d_forward(x->value, w->value, b, p);
    std::vector<Var<T>> ins{x, w};
    if (bias) ins.push_back(bias);
    return make_node<T>(ctx, std::move(y), std::move(ins), [p](Node<T>& node) {
        const auto& x_ = node.inputs[0];
        const auto& w_ = node.inputs[1];
        const bool has_b = node.inputs.size() > 2;
        TensorT<T> dx(x_->value.shape());
        TensorT<T> dw(w_->value.shape());
        TensorT<T> db = has_b ? TensorT<T>(node.inputs[2]->value.shape()) : TensorT<T>();
        conv2d_backward(x_->value, w_->value, p, node.grad,
                        x_->requires_grad ? &dx : nullptr, w_->requires_grad ? &dw : nullptr,
                        has_b && node.inputs[2]->requires_grad ? &db : nullptr);
        if (x_->requires_grad) x_->accumulate(dx);
        if (w_->requires_grad) w_->accumulate(dw);
        if (has_b && node.inputs[2]->requires_grad) node.inputs[2]->accumulate(db);
    });
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

// Learnable scale/shift live in gamma/beta (shape (1,C,1,1)); running
// statistics are plain buffers owned by the caller. Normalization uses the
// biased batch variance; running stats use the unbiased one.
template <typename T>
Var<T> batch_norm(const OpCtx& ctx, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  TensorT<T>& running_mean, TensorT<T>& running_var, T momentum, T eps) {
    const Shape& s = x.get()->value.shape();
    const std::int64_t C = s.c;
    if (gamma->value.numel() != C || beta->value.numel() != C || running_mean.numel() != C ||
        running_var.numel() != C)
        throw ShapeError("batch_norm: channel mismatch for C=" + std::to_string(C));
    const std::int64_t count = s.n * s.h * s.w;
    const std::int64_t plane = s.h * s.w;

    TensorT<T> mean(Shape{1, C, 1, 1});
    TensorT<T> var(Shape{1, C, 1, 1});
    if (ctx.train) {
        for (std::int64_t c = 0; c < C; ++c) {
            T m = 0;
            for (std::int64_t n = 0; n < s.n; ++n) {
                const T* src = x->value.data() + (n * C + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) m += src[i];
            }
            m /= static_cast<T>(count);
            T v = 0;
            for (std::int64_t n = 0; n < s.n; ++n) {
                const T* src = x->value.data() + (n * C + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) {
                    const T d = src[i] - m;
                    v += d * d;
                }
            }
            v /= static_cast<T>(count);
            mean[c] = m;
            var[c] = v;
        }
        if (ctx.update_stats) {
            const T unbias = count > 1 ? static_cast<T>(count) / static_cast<T>(count - 1) : T(1);
            for (std::int64_t c = 0; c < C; ++c) {
                running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * mean[c];
                running_var[c] = (T(1) - momentum) * running_var[c] + momentum * var[c] * unbias;
            }
        }
    } else {
        mean = running_mean;
        var = running_var;
    }

    TensorT<T> y(s);
    TensorT<T> xhat(s);
    for (std::int64_t n = 0; n < s.n; ++n) {
        for (std::int64_t c = 0; c < C; ++c) {
            const T inv = T(1) / std::sqrt(var[c] + eps);
            const T g = gamma->value[c], b = beta->value[c], m = mean[c];
            const T* src = x->value.data() + (n * C + c) * plane;
            T* xh = xhat.data() + (n * C + c) * plane;
            T* dst = y.data() + (n * C + c) * plane;
            for (std::int64_t i = 0; i < plane; ++i) {
                xh[i] = (src[i] - m) * inv;
                dst[i] = g * xh[i] + b;
            }
        }
    }

    const bool train = ctx.train;
    return make_node<T>(
        ctx, std::move(y), {x, gamma, beta},
        [train, xhat = std::move(xhat), var, eps, count, plane, C](Node<T>& node) {
            const auto& x_ = node.inputs[0];
            const auto& gamma_ = node.inputs[1];
            const auto& beta_ = node.inputs[2];
            const Shape& s = x_->value.shape();
            const TensorT<T>& dy = node.grad;
            TensorT<T> dgamma(Shape{1, C, 1, 1});
            TensorT<T> dbeta(Shape{1, C, 1, 1});
            for (std::int64_t n = 0; n < s.n; ++n)
                for (std::int64_t c = 0; c < C; ++c) {
                    const T* dyp = dy.data() + (n * C + c) * plane;
                    const T* xh = xhat.data() + (n * C + c) * plane;
                    for (std::int64_t i = 0; i < plane; ++i) {
                        dgamma[c] += dyp[i] * xh[i];
                        dbeta[c] += dyp[i];
                    }
                }
            if (x_->requires_grad) {
                TensorT<T> dx(s);
                for (std::int64_t c = 0; c < C; ++c) {
                    const T inv = T(1) / std::sqrt(var[c] + eps);
                    const T g = gamma_->value[c];
                    if (train) {
                        const T mean_dy = dbeta[c] / static_cast<T>(count);
                        const T mean_dyxh = dgamma[c] / static_cast<T>(count);
                        for (std::int64_t n = 0; n < s.n; ++n) {
                            const T* dyp = dy.data() + (n * C + c) * plane;
                            const T* xh = xhat.data() + (n * C + c) * plane;
                            T* dxp = dx.data() + (n * C + c) * plane;
                            for (std::int64_t i = 0; i < plane; ++i)
                                dxp[i] = g * inv * (dyp[i] - mean_dy - xh[i] * mean_dyxh);
                        }
                    } else {
                        for (std::int64_t n = 0; n < s.n; ++n) {
                            const T* dyp = dy.data() + (n * C + c) * plane;
                            T* dxp = dx.data() + (n * C + c) * plane;
                            for (std::int64_t i = 0; i < plane; ++i) dxp[i] = g * inv * dyp[i];
                        }
                    }
                }
                x_->accumulate(dx);
            }
            if (gamma_->requires_grad) gamma_->accumulate(dgamma);
            if (beta_->requires_grad) beta_->accumulate(dbeta);
        });
}

// ---------------------------------------------------------------------------
// Elementwise / structural ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> relu(const OpCtx& ctx, const Var<T>& x) {
    TensorT<T> y(x->value.shape());
    for (std::int64_t i = 0; i < y.numel(); ++i) y[i] = x->value[i] > T(0) ? x->value[i] : T(0);
    return make_node<T>(ctx, std::move(y), {x}, [](Node<T>& node) {
        const auto& x_ = node.inputs[0];
        if (!x_->requires_grad) return;
        TensorT<T> dx(x_->value.shape());
        // subgradient 0 at exactly 0
        for (std::int64_t i = 0; i < dx.numel(); ++i)
            dx[i] = x_->value[i] > T(0) ? node.grad[i] : T(0);
        x_->accumulate(dx);
    });
}

template <typename T>
Var<T> dropout(const OpCtx& ctx, const Var<T>& x, double p) {
    if (p < 0.0 || p >= 1.0) throw ConfigError("dropout: p must be in [0, 1)");
    if (!ctx.train || p == 0.0) {
        TensorT<T> y = x->value;
        return make_node<T>(ctx, std::move(y), {x}, [](Node<T>& node) {
            if (node.inputs[0]->requires_grad) node.inputs[0]->accumulate(node.grad);
        });
    }
    if (!ctx.rng) throw UsageError("dropout: train mode needs an rng");
    const T scale = static_cast<T>(1.0 / (1.0 - p));
    std::bernoulli_distribution keep(1.0 - p);
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(x->value.numel()));
    TensorT<T> y(x->value.shape());
    for (std::int64_t i = 0; i < y.numel(); ++i) {
        mask[static_cast<std::size_t>(i)] = keep(*ctx.rng) ? 1 : 0;
        y[i] = mask[static_cast<std::size_t>(i)] ? x->value[i] * scale : T(0);
    }
    return make_node<T>(ctx, std::move(y), {x}, [mask = std::move(mask), scale](Node<T>& node) {
        const auto& x_ = node.inputs[0];
        if (!x_->requires_grad) return;
        TensorT<T> dx(x_->value.shape());
        for (std::int64_t i = 0; i < dx.numel(); ++i)
            dx[i] = mask[static_cast<std::size_t>(i)] ? node.grad[i] * scale : T(0);
        x_->accumulate(dx);
    });
}

enum class PoolKind { Avg, Max };

template <typename T>
Var<T> pool2x2(const OpCtx& ctx, const Var<T>& x, PoolKind kind) {
    const Shape& s = x->value.shape();
    if (s.h % 2 != 0 || s.w % 2 != 0)
        throw ShapeError("pool2x2: odd extents in " + s.str());
    const Shape out_s{s.n, s.c, s.h / 2, s.w / 2};
    TensorT<T> y(out_s);
    std::vector<std::int32_t> argmax;
    if (kind == PoolKind::Max) argmax.resize(static_cast<std::size_t>(out_s.numel()));
    std::int64_t oi = 0;
    for (std::int64_t n = 0; n < s.n; ++n)
        for (std::int64_t c = 0; c < s.c; ++c)
            for (std::int64_t oh = 0; oh < out_s.h; ++oh)
                for (std::int64_t ow = 0; ow < out_s.w; ++ow, ++oi) {
                    if (kind == PoolKind::Avg) {
                        T sum = 0;
                        for (int i = 0; i < 2; ++i)
                            for (int j = 0; j < 2; ++j)
                                sum += x->value.at(n, c, 2 * oh + i, 2 * ow + j);
                        y[oi] = sum / T(4);
                    } else {
                        T best = x->value.at(n, c, 2 * oh, 2 * ow);
                        std::int32_t bi = 0;
                        // first maximal element in scan order wins ties
                        for (int i = 0; i < 2; ++i)
                            for (int j = 0; j < 2; ++j) {
                                const T v = x->value.at(n, c, 2 * oh + i, 2 * ow + j);
                                if (v > best) {
                                    best = v;
                                    bi = i * 2 + j;
                                }
                            }
                        y[oi] = best;
                        argmax[static_cast<std::size_t>(oi)] = bi;
                    }
                }
    return make_node<T>(ctx, std::move(y), {x},
                        [kind, argmax = std::move(argmax), out_s](Node<T>& node) {
                            const auto& x_ = node.inputs[0];
                            if (!x_->requires_grad) return;
                            TensorT<T> dx(x_->value.shape());
                            std::int64_t oi = 0;
                            for (std::int64_t n = 0; n < out_s.n; ++n)
                                for (std::int64_t c = 0; c < out_s.c; ++c)
                                    for (std::int64_t oh = 0; oh < out_s.h; ++oh)
                                        for (std::int64_t ow = 0; ow < out_s.w; ++ow, ++oi) {
                                            const T g = node.grad[oi];
                                            if (kind == PoolKind::Avg) {
                                                for (int i = 0; i < 2; ++i)
                                                    for (int j = 0; j < 2; ++j)
                                                        dx.at(n, c, 2 * oh + i, 2 * ow + j) +=
                                                            g / T(4);
                                            } else {
                                                const std::int32_t bi =
                                                    argmax[static_cast<std::size_t>(oi)];
                                                dx.at(n, c, 2 * oh + bi / 2, 2 * ow + bi % 2) += g;
                                            }
                                        }
                            x_->accumulate(dx);
                        });
}

// Half-pixel-centers mapping with edge clamping:
// source = (dest + 0.5)/factor - 0.5, clamped to [0, extent-1].
struct BilinearTap {
    std::int64_t i0, i1;
    double w1;  // weight of i1; i0 gets 1 - w1
};

inline std::vector<BilinearTap> bilinear_taps(std::int64_t out_extent, std::int64_t in_extent,
                                              std::int64_t factor) {
    std::vector<BilinearTap> taps(static_cast<std::size_t>(out_extent));
    for (std::int64_t d = 0; d < out_extent; ++d) {
        double s = (static_cast<double>(d) + 0.5) / static_cast<double>(factor) - 0.5;
        s = std::min(std::max(s, 0.0), static_cast<double>(in_extent - 1));
        const std::int64_t i0 = static_cast<std::int64_t>(std::floor(s));
        const std::int64_t i1 = std::min(i0 + 1, in_extent - 1);
        taps[static_cast<std::size_t>(d)] = {i0, i1, s - static_cast<double>(i0)};
    }
    return taps;
}

template <typename T>
Var<T> bilinear_upsample(const OpCtx& ctx, const Var<T>& x, std::int64_t factor) {
    if (factor < 1) throw ConfigError("bilinear_upsample: factor must be >= 1");
    const Shape& s = x->value.shape();
    const Shape out_s{s.n, s.c, s.h * factor, s.w * factor};
    const auto th = bilinear_taps(out_s.h, s.h, factor);
    const auto tw = bilinear_taps(out_s.w, s.w, factor);
    TensorT<T> y(out_s);
    for (std::int64_t n = 0; n < s.n; ++n)
        for (std::int64_t c = 0; c < s.c; ++c) {
            const T* src = x->value.data() + (n * s.c + c) * s.h * s.w;
            T* dst = y.data() + (n * s.c + c) * out_s.h * out_s.w;
            for (std::int64_t oh = 0; oh < out_s.h; ++oh) {
                const auto& a = th[static_cast<std::size_t>(oh)];
                for (std::int64_t ow = 0; ow < out_s.w; ++ow) {
                    const auto& b = tw[static_cast<std::size_t>(ow)];
                    const double v00 = src[a.i0 * s.w + b.i0];
                    const double v01 = src[a.i0 * s.w + b.i1];
                    const double v10 = src[a.i1 * s.w + b.i0];
                    const double v11 = src[a.i1 * s.w + b.i1];
                    const double top = v00 * (1.0 - b.w1) + v01 * b.w1;
                    const double bot = v10 * (1.0 - b.w1) + v11 * b.w1;
                    dst[oh * out_s.w + ow] = static_cast<T>(top * (1.0 - a.w1) + bot * a.w1);
                }
            }
        }
    return make_node<T>(ctx, std::move(y), {x}, [th, tw, out_s](Node<T>& node) {
        const auto& x_ = node.inputs[0];
        if (!x_->requires_grad) return;
        const Shape& s = x_->value.shape();
        TensorT<T> dx(s);
        for (std::int64_t n = 0; n < s.n; ++n)
            for (std::int64_t c = 0; c < s.c; ++c) {
                T* dst = dx.data() + (n * s.c + c) * s.h * s.w;
                const T* g = node.grad.data() + (n * s.c + c) * out_s.h * out_s.w;
                for (std::int64_t oh = 0; oh < out_s.h; ++oh) {
                    const auto& a = th[static_cast<std::size_t>(oh)];
                    for (std::int64_t ow = 0; ow < out_s.w; ++ow) {
                        const auto& b = tw[static_cast<std::size_t>(ow)];
                        const double gv = g[oh * out_s.w + ow];
                        dst[a.i0 * s.w + b.i0] += static_cast<T>(gv * (1.0 - a.w1) * (1.0 - b.w1));
                        dst[a.i0 * s.w + b.i1] += static_cast<T>(gv * (1.0 - a.w1) * b.w1);
                        dst[a.i1 * s.w + b.i0] += static_cast<T>(gv * a.w1 * (1.0 - b.w1));
                        dst[a.i1 * s.w + b.i1] += static_cast<T>(gv * a.w1 * b.w1);
                    }
                }
            }
        x_->accumulate(dx);
    });
}

// output[n][c][h*r+i][w*r+j] = input[n][c*r*r + i*r + j][h][w]
template <typename T>
Var<T> pixel_shuffle(const OpCtx& ctx, const Var<T>& x, std::int64_t r) {
    const Shape& s = x->value.shape();
    if (r < 1 || s.c % (r * r) != 0)
        throw ShapeError("pixel_shuffle: channels " + std::to_string(s.c) +
                         " not divisible by r^2=" + std::to_string(r * r));
    const Shape out_s{s.n, s.c / (r * r), s.h * r, s.w * r};
    TensorT<T> y(out_s);
    for (std::int64_t n = 0; n < s.n; ++n)
        for (std::int64_t oc = 0; oc < out_s.c; ++oc)
            for (std::int64_t h = 0; h < s.h; ++h)
                for (std::int64_t w = 0; w < s.w; ++w)
                    for (std::int64_t i = 0; i < r; ++i)
                        for (std::int64_t j = 0; j < r; ++j)
                            y.at(n, oc, h * r + i, w * r + j) =
                                x->value.at(n, oc * r * r + i * r + j, h, w);
    return make_node<T>(ctx, std::move(y), {x}, [r, out_s](Node<T>& node) {
        const auto& x_ = node.inputs[0];
        if (!x_->requires_grad) return;
        const Shape& s = x_->value.shape();
        TensorT<T> dx(s);
        for (std::int64_t n = 0; n < s.n; ++n)
            for (std::int64_t oc = 0; oc < out_s.c; ++oc)
                for (std::int64_t h = 0; h < s.h; ++h)
                    for (std::int64_t w = 0; w < s.w; ++w)
                        for (std::int64_t i = 0; i < r; ++i)
                            for (std::int64_t j = 0; j < r; ++j)
                                dx.at(n, oc * r * r + i * r + j, h, w) =
                                    node.grad.at(n, oc, h * r + i, w * r + j);
        x_->accumulate(dx);
    });
}

template <typename T>
Var<T> channel_softmax(const OpCtx& ctx, const Var<T>& x) {
    const Shape& s = x->value.shape();
    TensorT<T> y(s);
    const std::int64_t plane = s.h * s.w;
    for (std::int64_t n = 0; n < s.n; ++n)
        for (std::int64_t p = 0; p < plane; ++p) {
            T mx = x->value[n * s.c * plane + p];
            for (std::int64_t c = 1; c < s.c; ++c)
                mx = std::max(mx, x->value[(n * s.c + c) * plane + p]);
            T sum = 0;
            for (std::int64_t c = 0; c < s.c; ++c) {
                const T e = std::exp(x->value[(n * s.c + c) * plane + p] - mx);
                y[(n * s.c + c) * plane + p] = e;
                sum += e;
            }
            for (std::int64_t c = 0; c < s.c; ++c) y[(n * s.c + c) * plane + p] /= sum;
        }
    TensorT<T> y_saved = y;
    return make_node<T>(ctx, std::move(y), {x}, [y = std::move(y_saved), plane, s](Node<T>& node) {
        const auto& x_ = node.inputs[0];
        if (!x_->requires_grad) return;
        TensorT<T> dx(s);
        for (std::int64_t n = 0; n < s.n; ++n)
            for (std::int64_t p = 0; p < plane; ++p) {
                T dot = 0;
                for (std::int64_t c = 0; c < s.c; ++c)
                    dot += node.grad[(n * s.c + c) * plane + p] * y[(n * s.c + c) * plane + p];
                for (std::int64_t c = 0; c < s.c; ++c) {
                    const std::int64_t i = (n * s.c + c) * plane + p;
                    dx[i] = y[i] * (node.grad[i] - dot);
                }
            }
        x_->accumulate(dx);
    });
}

// Per-position weighted sum: the same K^2 weights are shared across all
// heatmap channels; zero padding outside bounds.
template <typename T>
Var<T> dynamic_filter_apply(const OpCtx& ctx, const Var<T>& heat, const Var<T>& filt) {
    const Shape& hs = heat->value.shape();
    const Shape& fs = filt->value.shape();
    const std::int64_t K = static_cast<std::int64_t>(std::llround(std::sqrt(double(fs.c))));
    if (K * K != fs.c)
        throw ShapeError("dynamic_filter_apply: filter channels " + std::to_string(fs.c) +
                         " not a perfect square");
    if (fs.n != hs.n || fs.h != hs.h || fs.w != hs.w)
        throw ShapeError("dynamic_filter_apply: filters " + fs.str() + " vs heatmap " + hs.str());
    const std::int64_t off = K / 2;
    TensorT<T> y(hs);
    for (std::int64_t n = 0; n < hs.n; ++n)
        for (std::int64_t c = 0; c < hs.c; ++c)
            for (std::int64_t yy = 0; yy < hs.h; ++yy)
                for (std::int64_t xx = 0; xx < hs.w; ++xx) {
                    T acc = 0;
                    for (std::int64_t i = 0; i < K; ++i) {
                        const std::int64_t sy = yy + i - off;
                        if (sy < 0 || sy >= hs.h) continue;
                        for (std::int64_t j = 0; j < K; ++j) {
                            const std::int64_t sx = xx + j - off;
                            if (sx < 0 || sx >= hs.w) continue;
                            acc += filt->value.at(n, i * K + j, yy, xx) * heat->value.at(n, c, sy, sx);
                        }
                    }
                    y.at(n, c, yy, xx) = acc;
                }
    return make_node<T>(ctx, std::move(y), {heat, filt}, [K, off](Node<T>& node) {
        const auto& heat_ = node.inputs[0];
        const auto& filt_ = node.inputs[1];
        const Shape& hs = heat_->value.shape();
        TensorT<T> dheat(hs);
        TensorT<T> dfilt(filt_->value.shape());
        for (std::int64_t n = 0; n < hs.n; ++n)
            for (std::int64_t c = 0; c < hs.c; ++c)
                for (std::int64_t yy = 0; yy < hs.h; ++yy)
                    for (std::int64_t xx = 0; xx < hs.w; ++xx) {
                        const T g = node.grad.at(n, c, yy, xx);
                        if (g == T(0)) continue;
                        for (std::int64_t i = 0; i < K; ++i) {
                            const std::int64_t sy = yy + i - off;
                            if (sy < 0 || sy >= hs.h) continue;
                            for (std::int64_t j = 0; j < K; ++j) {
                                const std::int64_t sx = xx + j - off;
                                if (sx < 0 || sx >= hs.w) continue;
                                dheat.at(n, c, sy, sx) += filt_->value.at(n, i * K + j, yy, xx) * g;
                                dfilt.at(n, i * K + j, yy, xx) += heat_->value.at(n, c, sy, sx) * g;
                            }
                        }
                    }
        if (heat_->requires_grad) heat_->accumulate(dheat);
        if (filt_->requires_grad) filt_->accumulate(dfilt);
    });
}

template <typename T>
Var<T> concat(const OpCtx& ctx, const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat: empty part list");
    const Shape& s0 = parts[0]->value.shape();
    std::int64_t c_total = 0;
    for (const auto& p : parts) {
        const Shape& s = p->value.shape();
        if (s.n != s0.n || s.h != s0.h || s.w != s0.w)
            throw ShapeError("concat: mismatched extents " + s.str() + " vs " + s0.str());
        c_total += s.c;
    }
    TensorT<T> y(Shape{s0.n, c_total, s0.h, s0.w});
    const std::int64_t plane = s0.h * s0.w;
    for (std::int64_t n = 0; n < s0.n; ++n) {
        std::int64_t c_off = 0;
        for (const auto& p : parts) {
            const std::int64_t cp = p->value.shape().c;
            const T* src = p->value.data() + n * cp * plane;
            std::copy(src, src + cp * plane, y.data() + (n * c_total + c_off) * plane);
            c_off += cp;
        }
    }
    std::vector<std::int64_t> sizes;
    for (const auto& p : parts) sizes.push_back(p->value.shape().c);
    return make_node<T>(ctx, std::move(y), parts, [sizes](Node<T>& node) {
        auto grads = split_channels(node.grad, sizes);
        for (std::size_t i = 0; i < node.inputs.size(); ++i)
            if (node.inputs[i]->requires_grad) node.inputs[i]->accumulate(grads[i]);
    });
}

template <typename T>
Var<T> slice_channels(const OpCtx& ctx, const Var<T>& x, std::int64_t c0, std::int64_t len) {
    const Shape& s = x->value.shape();
    if (c0 < 0 || len < 1 || c0 + len > s.c)
        throw ShapeError("slice_channels: range [" + std::to_string(c0) + "," +
                         std::to_string(c0 + len) + ") out of " + std::to_string(s.c));
    TensorT<T> y(Shape{s.n, len, s.h, s.w});
    const std::int64_t plane = s.h * s.w;
    for (std::int64_t n = 0; n < s.n; ++n) {
        const T* src = x->value.data() + (n * s.c + c0) * plane;
        std::copy(src, src + len * plane, y.data() + n * len * plane);
    }
    return make_node<T>(ctx, std::move(y), {x}, [c0, len, plane](Node<T>& node) {
        const auto& x_ = node.inputs[0];
        if (!x_->requires_grad) return;
        const Shape& s = x_->value.shape();
        TensorT<T> dx(s);
        for (std::int64_t n = 0; n < s.n; ++n) {
            const T* g = node.grad.data() + n * len * plane;
            T* dst = dx.data() + (n * s.c + c0) * plane;
            for (std::int64_t i = 0; i < len * plane; ++i) dst[i] += g[i];
        }
        x_->accumulate(dx);
    });
}

template <typename T>
Var<T> add_op(const OpCtx& ctx, const Var<T>& a, const Var<T>& b) {
    TensorT<T> y = add(a->value, b->value);
    return make_node<T>(ctx, std::move(y), {a, b}, [](Node<T>& node) {
        for (auto& in : node.inputs)
            if (in->requires_grad) in->accumulate(node.grad);
    });
}

// Mean over non-ignored pixels of -log softmax(logits)[label]; ignored pixels
// contribute zero loss and zero gradient. An all-ignored batch has loss 0.
template <typename T>
Var<T> cross_entropy_loss(const OpCtx& ctx, const Var<T>& logits,
                          const std::vector<std::int32_t>& labels, std::int32_t ignore_label) {
    const Shape& s = logits->value.shape();
    if (static_cast<std::int64_t>(labels.size()) != s.n * s.h * s.w)
        throw ShapeError("cross_entropy_loss: label count " + std::to_string(labels.size()) +
                         " != " + std::to_string(s.n * s.h * s.w));
    const std::int64_t plane = s.h * s.w;
    TensorT<T> probs(s);
    double loss = 0.0;
    std::int64_t count = 0;
    for (std::int64_t n = 0; n < s.n; ++n)
        for (std::int64_t p = 0; p < plane; ++p) {
            const std::int32_t lab = labels[static_cast<std::size_t>(n * plane + p)];
            T mx = logits->value[n * s.c * plane + p];
            for (std::int64_t c = 1; c < s.c; ++c)
                mx = std::max(mx, logits->value[(n * s.c + c) * plane + p]);
            T sum = 0;
            for (std::int64_t c = 0; c < s.c; ++c) {
                const T e = std::exp(logits->value[(n * s.c + c) * plane + p] - mx);
                probs[(n * s.c + c) * plane + p] = e;
                sum += e;
            }
            for (std::int64_t c = 0; c < s.c; ++c) probs[(n * s.c + c) * plane + p] /= sum;
            if (lab == ignore_label) continue;
            if (lab < 0 || lab >= s.c)
                throw DataError("cross_entropy_loss: label " + std::to_string(lab) +
                                " out of range for C=" + std::to_string(s.c));
            const T z = logits->value[(n * s.c + lab) * plane + p];
            loss += static_cast<double>(mx - z) + std::log(static_cast<double>(sum));
            ++count;
        }
    if (count > 0) loss /= static_cast<double>(count);
    TensorT<T> out(Shape{1, 1, 1, 1});
    out[0] = static_cast<T>(loss);
    return make_node<T>(
        ctx, std::move(out), {logits},
        [probs = std::move(probs), labels, ignore_label, count, plane](Node<T>& node) {
            const auto& logits_ = node.inputs[0];
            if (!logits_->requires_grad || count == 0) return;
            const Shape& s = logits_->value.shape();
            const T scale = node.grad[0] / static_cast<T>(count);
            TensorT<T> dx(s);
            for (std::int64_t n = 0; n < s.n; ++n)
                for (std::int64_t p = 0; p < plane; ++p) {
                    const std::int32_t lab = labels[static_cast<std::size_t>(n * plane + p)];
                    if (lab == ignore_label) continue;
                    for (std::int64_t c = 0; c < s.c; ++c) {
                        const std::int64_t i = (n * s.c + c) * plane + p;
                        dx[i] = scale * (probs[i] - (c == lab ? T(1) : T(0)));
                    }
                }
            logits_->accumulate(dx);
        });
}

}  // namespace ops
}  // namespace ddp
