#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "pgssl/rng.hpp"
#include "pgssl/tape.hpp"
#include "pgssl/tensor.hpp"

// Differentiable ops. Every op takes the tape first; a null tape disables
// recording and the result does not track gradients. Reductions accumulate
// in double regardless of T.
namespace pgssl::ops {

template <typename T>
inline void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (!same_shape(a.shape(), b.shape()))
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

template <typename T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "add");
    Tensor<T> out(a.shape());
    auto av = a.values(), bv = b.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    if (tracking(tape, a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> ta = a, tb = b, to = out;
        tape->record([ta, tb, to]() mutable {
            auto g = to.grad();
            if (ta.requires_grad()) {
                auto ga = ta.grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (tb.requires_grad()) {
                auto gb = tb.grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> sub(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "sub");
    Tensor<T> out(a.shape());
    auto av = a.values(), bv = b.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
    if (tracking(tape, a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> ta = a, tb = b, to = out;
        tape->record([ta, tb, to]() mutable {
            auto g = to.grad();
            if (ta.requires_grad()) {
                auto ga = ta.grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (tb.requires_grad()) {
                auto gb = tb.grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "mul");
    Tensor<T> out(a.shape());
    auto av = a.values(), bv = b.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
    if (tracking(tape, a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> ta = a, tb = b, to = out;
        tape->record([ta, tb, to]() mutable {
            auto g = to.grad();
            auto av2 = ta.values(), bv2 = tb.values();
            if (ta.requires_grad()) {
                auto ga = ta.grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
            }
            if (tb.requires_grad()) {
                auto gb = tb.grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av2[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> scale(Tape<T>* tape, const Tensor<T>& x, T s) {
    Tensor<T> out(x.shape());
    auto xv = x.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * s;
    if (tracking(tape, x.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> tx = x, to = out;
        tape->record([tx, to, s]() mutable {
            auto g = to.grad();
            auto gx = tx.grad();
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * s;
        });
    }
    return out;
}

// ReLU; the gradient at exactly 0 is defined as 0.
template <typename T>
Tensor<T> relu(Tape<T>* tape, const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    auto xv = x.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] > T{0} ? xv[i] : T{0};
    if (tracking(tape, x.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> tx = x, to = out;
        tape->record([tx, to]() mutable {
            auto g = to.grad();
            auto xv2 = tx.values();
            auto gx = tx.grad();
            for (std::size_t i = 0; i < g.size(); ++i)
                if (xv2[i] > T{0}) gx[i] += g[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> sum(Tape<T>* tape, const Tensor<T>& x) {
    double acc = 0.0;
    auto xv = x.values();
    for (std::size_t i = 0; i < xv.size(); ++i) acc += static_cast<double>(xv[i]);
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc));
    if (tracking(tape, x.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> tx = x, to = out;
        tape->record([tx, to]() mutable {
            const T g = to.grad()[0];
            auto gx = tx.grad();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
        });
    }
    return out;
}

template <typename T>
Tensor<T> mean(Tape<T>* tape, const Tensor<T>& x) {
    const T inv = static_cast<T>(1.0 / static_cast<double>(x.numel()));
    return scale(tape, sum(tape, x), inv);
}

// x:[N,I] w:[O,I] bias:[O] -> [N,O]
template <typename T>
Tensor<T> linear(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias) {
    if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1))
        throw ShapeError("linear: expected x [N,I] and w [O,I], got " +
                         shape_str(x.shape()) + " and " + shape_str(w.shape()));
    const std::size_t n = x.dim(0), in = x.dim(1), outd = w.dim(0);
    if (bias && (bias->rank() != 1 || bias->dim(0) != outd))
        throw ShapeError("linear: bias shape " + shape_str(bias->shape()) +
                         " does not match output width " + std::to_string(outd));
    Tensor<T> out(Shape{n, outd});
    auto xv = x.values();
    auto wv = w.values();
    auto ov = out.values();
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t o = 0; o < outd; ++o) {
            double acc = bias ? static_cast<double>(bias->values()[o]) : 0.0;
            for (std::size_t i = 0; i < in; ++i)
                acc += static_cast<double>(xv[r * in + i]) * static_cast<double>(wv[o * in + i]);
            ov[r * outd + o] = static_cast<T>(acc);
        }
    const bool bias_grad = bias && bias->requires_grad();
    if (tracking(tape, x.requires_grad() || w.requires_grad() || bias_grad)) {
        out.set_requires_grad(true);
        Tensor<T> tx = x, tw = w, to = out;
        Tensor<T> tb = bias ? *bias : Tensor<T>();
        const bool has_bias = bias != nullptr;
        tape->record([tx, tw, tb, to, n, in, outd, has_bias]() mutable {
            auto g = to.grad();
            auto xv2 = tx.values();
            auto wv2 = tw.values();
            if (tx.requires_grad()) {
                auto gx = tx.grad();
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t o = 0; o < outd; ++o) {
                        const T go = g[r * outd + o];
                        for (std::size_t i = 0; i < in; ++i)
                            gx[r * in + i] += go * wv2[o * in + i];
                    }
            }
            if (tw.requires_grad()) {
                auto gw = tw.grad();
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t o = 0; o < outd; ++o) {
                        const T go = g[r * outd + o];
                        for (std::size_t i = 0; i < in; ++i)
                            gw[o * in + i] += go * xv2[r * in + i];
                    }
            }
            if (has_bias && tb.requires_grad()) {
                auto gb = tb.grad();
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t o = 0; o < outd; ++o) gb[o] += g[r * outd + o];
            }
        });
    }
    return out;
}

// Numerically stable softmax along `axis` (max subtraction per slice).
template <typename T>
Tensor<T> softmax(Tape<T>* tape, const Tensor<T>& x, int axis) {
    if (axis < 0 || static_cast<std::size_t>(axis) >= x.rank())
        throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                         shape_str(x.shape()));
    const std::size_t k = x.dim(static_cast<std::size_t>(axis));
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < static_cast<std::size_t>(axis); ++i) outer *= x.dim(i);
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < x.rank(); ++i) inner *= x.dim(i);

    Tensor<T> out(x.shape());
    auto xv = x.values();
    auto ov = out.values();
    for (std::size_t a = 0; a < outer; ++a)
        for (std::size_t b = 0; b < inner; ++b) {
            const std::size_t base = a * k * inner + b;
            T mx = xv[base];
            for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, xv[base + c * inner]);
            double denom = 0.0;
            for (std::size_t c = 0; c < k; ++c) {
                const T e = std::exp(xv[base + c * inner] - mx);
                ov[base + c * inner] = e;
                denom += static_cast<double>(e);
            }
            const T inv = static_cast<T>(1.0 / denom);
            for (std::size_t c = 0; c < k; ++c) ov[base + c * inner] *= inv;
        }
    if (tracking(tape, x.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> tx = x, to = out;
        tape->record([tx, to, outer, inner, k]() mutable {
            auto g = to.grad();
            auto pv = to.values();
            auto gx = tx.grad();
            for (std::size_t a = 0; a < outer; ++a)
                for (std::size_t b = 0; b < inner; ++b) {
                    const std::size_t base = a * k * inner + b;
                    double dot = 0.0;
                    for (std::size_t c = 0; c < k; ++c) {
                        const std::size_t idx = base + c * inner;
                        dot += static_cast<double>(g[idx]) * static_cast<double>(pv[idx]);
                    }
                    for (std::size_t c = 0; c < k; ++c) {
                        const std::size_t idx = base + c * inner;
                        gx[idx] += pv[idx] * (g[idx] - static_cast<T>(dot));
                    }
                }
        });
    }
    return out;
}

// Inverted dropout: survivors scaled by 1/(1-rate) so inactive mode is the
// exact identity (the input handle is returned untouched).
template <typename T>
Tensor<T> dropout(Tape<T>* tape, const Tensor<T>& x, double rate, Rng& rng, bool active) {
    if (rate < 0.0 || rate >= 1.0)
        throw ValueError("dropout: rate must lie in [0,1), got " + std::to_string(rate));
    if (!active) return x;
    Tensor<T> out(x.shape());
    std::vector<std::uint8_t> mask(x.numel());
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    auto xv = x.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) {
        mask[i] = rng.uniform() >= rate ? 1 : 0;
        ov[i] = mask[i] ? xv[i] * keep_scale : T{0};
    }
    if (tracking(tape, x.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> tx = x, to = out;
        tape->record([tx, to, mask = std::move(mask), keep_scale]() mutable {
            auto g = to.grad();
            auto gx = tx.grad();
            for (std::size_t i = 0; i < g.size(); ++i)
                if (mask[i]) gx[i] += g[i] * keep_scale;
        });
    }
    return out;
}

// Deterministic dropout variant for gradient verification: the caller owns
// the 0/1 mask.
template <typename T>
Tensor<T> dropout_with_mask(Tape<T>* tape, const Tensor<T>& x,
                            const std::vector<std::uint8_t>& mask, double rate) {
    if (rate < 0.0 || rate >= 1.0)
        throw ValueError("dropout: rate must lie in [0,1), got " + std::to_string(rate));
    if (mask.size() != x.numel())
        throw ShapeError("dropout: mask length does not match input");
    Tensor<T> out(x.shape());
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    auto xv = x.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = mask[i] ? xv[i] * keep_scale : T{0};
    if (tracking(tape, x.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> tx = x, to = out;
        tape->record([tx, to, mask, keep_scale]() mutable {
            auto g = to.grad();
            auto gx = tx.grad();
            for (std::size_t i = 0; i < g.size(); ++i)
                if (mask[i]) gx[i] += g[i] * keep_scale;
        });
    }
    return out;
}

// [N,C,H,W] -> [N,C] mean over space.
template <typename T>
Tensor<T> global_avg_pool(Tape<T>* tape, const Tensor<T>& x) {
    if (x.rank() != 4) throw ShapeError("global_avg_pool: expected rank-4, got " + shape_str(x.shape()));
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor<T> out(Shape{n, c});
    auto xv = x.values();
    auto ov = out.values();
    const double inv = 1.0 / static_cast<double>(hw);
    for (std::size_t i = 0; i < n * c; ++i) {
        double acc = 0.0;
        for (std::size_t s = 0; s < hw; ++s) acc += static_cast<double>(xv[i * hw + s]);
        ov[i] = static_cast<T>(acc * inv);
    }
    if (tracking(tape, x.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> tx = x, to = out;
        tape->record([tx, to, n, c, hw]() mutable {
            auto g = to.grad();
            auto gx = tx.grad();
            const T inv2 = static_cast<T>(1.0 / static_cast<double>(hw));
            for (std::size_t i = 0; i < n * c; ++i) {
                const T gi = g[i] * inv2;
                for (std::size_t s = 0; s < hw; ++s) gx[i * hw + s] += gi;
            }
        });
    }
    return out;
}

// Nearest-neighbor 2x spatial upsample.
template <typename T>
Tensor<T> upsample_nearest2(Tape<T>* tape, const Tensor<T>& x) {
    if (x.rank() != 4) throw ShapeError("upsample_nearest2: expected rank-4, got " + shape_str(x.shape()));
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor<T> out(Shape{n, c, 2 * h, 2 * w});
    auto xv = x.values();
    auto ov = out.values();
    for (std::size_t nc = 0; nc < n * c; ++nc)
        for (std::size_t r = 0; r < h; ++r)
            for (std::size_t col = 0; col < w; ++col) {
                const T v = xv[(nc * h + r) * w + col];
                const std::size_t base = (nc * 2 * h + 2 * r) * 2 * w + 2 * col;
                ov[base] = v;
                ov[base + 1] = v;
                ov[base + 2 * w] = v;
                ov[base + 2 * w + 1] = v;
            }
    if (tracking(tape, x.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> tx = x, to = out;
        tape->record([tx, to, n, c, h, w]() mutable {
            auto g = to.grad();
            auto gx = tx.grad();
            for (std::size_t nc = 0; nc < n * c; ++nc)
                for (std::size_t r = 0; r < h; ++r)
                    for (std::size_t col = 0; col < w; ++col) {
                        const std::size_t base = (nc * 2 * h + 2 * r) * 2 * w + 2 * col;
                        gx[(nc * h + r) * w + col] +=
                            g[base] + g[base + 1] + g[base + 2 * w] + g[base + 2 * w + 1];
                    }
        });
    }
    return out;
}

// Batch normalization over the channel axis for [N,C] or [N,C,H,W] input.
// Training mode normalizes with biased batch statistics and folds them into
// the running buffers with momentum 0.1; eval mode normalizes with the
// running buffers. Variance is biased throughout so both modes agree on the
// same statistic.
template <typename T>
Tensor<T> batchnorm(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& gamma,
                    const Tensor<T>& beta, Tensor<T>& running_mean, Tensor<T>& running_var,
                    bool training, T eps = static_cast<T>(1e-5), T momentum = static_cast<T>(0.1)) {
    if (x.rank() != 2 && x.rank() != 4)
        throw ShapeError("batchnorm: expected rank-2 or rank-4 input, got " + shape_str(x.shape()));
    const std::size_t n = x.dim(0), c = x.dim(1);
    const std::size_t hw = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
    if (gamma.numel() != c || beta.numel() != c || running_mean.numel() != c || running_var.numel() != c)
        throw ShapeError("batchnorm: parameter length does not match channel count " + std::to_string(c));
    const std::size_t m = n * hw;  // elements per channel
    if (training && m < 2)
        throw ValueError("batchnorm: degenerate batch (need N*H*W >= 2 in training mode, got " +
                         std::to_string(m) + ")");

    Tensor<T> out(x.shape());
    std::vector<T> xhat(x.numel());
    std::vector<T> istd(c);
    auto xv = x.values();
    auto ov = out.values();
    auto gv = gamma.values();
    auto bv = beta.values();

    auto channel_index = [n, c, hw](std::size_t bi, std::size_t ci, std::size_t si) {
        return (bi * c + ci) * hw + si;
    };

    if (training) {
        auto rm = running_mean.values();
        auto rv = running_var.values();
        for (std::size_t ci = 0; ci < c; ++ci) {
            double mu = 0.0;
            for (std::size_t bi = 0; bi < n; ++bi)
                for (std::size_t si = 0; si < hw; ++si)
                    mu += static_cast<double>(xv[channel_index(bi, ci, si)]);
            mu /= static_cast<double>(m);
            double var = 0.0;
            for (std::size_t bi = 0; bi < n; ++bi)
                for (std::size_t si = 0; si < hw; ++si) {
                    const double d = static_cast<double>(xv[channel_index(bi, ci, si)]) - mu;
                    var += d * d;
                }
            var /= static_cast<double>(m);
            const double is = 1.0 / std::sqrt(var + static_cast<double>(eps));
            istd[ci] = static_cast<T>(is);
            for (std::size_t bi = 0; bi < n; ++bi)
                for (std::size_t si = 0; si < hw; ++si) {
                    const std::size_t idx = channel_index(bi, ci, si);
                    const T xh = static_cast<T>((static_cast<double>(xv[idx]) - mu) * is);
                    xhat[idx] = xh;
                    ov[idx] = gv[ci] * xh + bv[ci];
                }
            rm[ci] = (T{1} - momentum) * rm[ci] + momentum * static_cast<T>(mu);
            rv[ci] = (T{1} - momentum) * rv[ci] + momentum * static_cast<T>(var);
        }
    } else {
        auto rm = running_mean.values();
        auto rv = running_var.values();
        for (std::size_t ci = 0; ci < c; ++ci) {
            const double is = 1.0 / std::sqrt(static_cast<double>(rv[ci]) + static_cast<double>(eps));
            istd[ci] = static_cast<T>(is);
            for (std::size_t bi = 0; bi < n; ++bi)
                for (std::size_t si = 0; si < hw; ++si) {
                    const std::size_t idx = channel_index(bi, ci, si);
                    const T xh = static_cast<T>((static_cast<double>(xv[idx]) - static_cast<double>(rm[ci])) * is);
                    xhat[idx] = xh;
                    ov[idx] = gv[ci] * xh + bv[ci];
                }
        }
    }

    if (tracking(tape, x.requires_grad() || gamma.requires_grad() || beta.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> tx = x, tg = gamma, tb = beta, to = out;
        tape->record([tx, tg, tb, to, xhat = std::move(xhat), istd = std::move(istd), n, c, hw,
                      training, channel_index]() mutable {
            auto g = to.grad();
            auto gv2 = tg.values();
            const std::size_t m = n * hw;
            for (std::size_t ci = 0; ci < c; ++ci) {
                double sum_g = 0.0, sum_gx = 0.0;
                for (std::size_t bi = 0; bi < n; ++bi)
                    for (std::size_t si = 0; si < hw; ++si) {
                        const std::size_t idx = channel_index(bi, ci, si);
                        sum_g += static_cast<double>(g[idx]);
                        sum_gx += static_cast<double>(g[idx]) * static_cast<double>(xhat[idx]);
                    }
                if (tg.requires_grad()) tg.grad()[ci] += static_cast<T>(sum_gx);
                if (tb.requires_grad()) tb.grad()[ci] += static_cast<T>(sum_g);
                if (tx.requires_grad()) {
                    auto gx = tx.grad();
                    const double a = gv2[ci] * static_cast<double>(istd[ci]);
                    if (training) {
                        const double mean_g = sum_g / static_cast<double>(m);
                        const double mean_gx = sum_gx / static_cast<double>(m);
                        for (std::size_t bi = 0; bi < n; ++bi)
                            for (std::size_t si = 0; si < hw; ++si) {
                                const std::size_t idx = channel_index(bi, ci, si);
                                gx[idx] += static_cast<T>(
                                    a * (static_cast<double>(g[idx]) - mean_g -
                                         static_cast<double>(xhat[idx]) * mean_gx));
                            }
                    } else {
                        for (std::size_t bi = 0; bi < n; ++bi)
                            for (std::size_t si = 0; si < hw; ++si) {
                                const std::size_t idx = channel_index(bi, ci, si);
                                gx[idx] += static_cast<T>(a * static_cast<double>(g[idx]));
                            }
                    }
                }
            }
        });
    }
    return out;
}

// Mean per-pixel cross-entropy between integer class targets and logits
// [N,K] or [N,K,H,W]; the standard fine-tuning loss. Stable log-sum-exp.
template <typename T>
Tensor<T> softmax_ce_logits(Tape<T>* tape, const Tensor<T>& logits,
                            const std::vector<std::int32_t>& target) {
    if (logits.rank() != 2 && logits.rank() != 4)
        throw ShapeError("softmax_ce_logits: expected rank-2 or rank-4 logits, got " +
                         shape_str(logits.shape()));
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    const std::size_t hw = logits.rank() == 4 ? logits.dim(2) * logits.dim(3) : 1;
    const std::size_t count = n * hw;
    if (target.size() != count)
        throw ShapeError("softmax_ce_logits: target length " + std::to_string(target.size()) +
                         " does not match pixel count " + std::to_string(count));
    for (std::size_t i = 0; i < count; ++i)
        if (target[i] < 0 || static_cast<std::size_t>(target[i]) >= k)
            throw DataError("softmax_ce_logits: class id " + std::to_string(target[i]) +
                            " out of range [0," + std::to_string(k) + ") at pixel " + std::to_string(i));

    auto lv = logits.values();
    auto at = [k, hw](std::size_t bi, std::size_t ci, std::size_t si) {
        return (bi * k + ci) * hw + si;
    };
    double total = 0.0;
    for (std::size_t bi = 0; bi < n; ++bi)
        for (std::size_t si = 0; si < hw; ++si) {
            double mx = lv[at(bi, 0, si)];
            for (std::size_t ci = 1; ci < k; ++ci)
                mx = std::max(mx, static_cast<double>(lv[at(bi, ci, si)]));
            double denom = 0.0;
            for (std::size_t ci = 0; ci < k; ++ci)
                denom += std::exp(static_cast<double>(lv[at(bi, ci, si)]) - mx);
            const std::size_t t = static_cast<std::size_t>(target[bi * hw + si]);
            total += mx + std::log(denom) - static_cast<double>(lv[at(bi, t, si)]);
        }
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(count)));
    if (tracking(tape, logits.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> tl = logits, to = out;
        tape->record([tl, to, target, n, k, hw, at]() mutable {
            const T gout = to.grad()[0];
            auto lv2 = tl.values();
            auto gl = tl.grad();
            const double inv = 1.0 / static_cast<double>(n * hw);
            for (std::size_t bi = 0; bi < n; ++bi)
                for (std::size_t si = 0; si < hw; ++si) {
                    double mx = lv2[at(bi, 0, si)];
                    for (std::size_t ci = 1; ci < k; ++ci)
                        mx = std::max(mx, static_cast<double>(lv2[at(bi, ci, si)]));
                    double denom = 0.0;
                    for (std::size_t ci = 0; ci < k; ++ci)
                        denom += std::exp(static_cast<double>(lv2[at(bi, ci, si)]) - mx);
                    const std::size_t t = static_cast<std::size_t>(target[bi * hw + si]);
                    for (std::size_t ci = 0; ci < k; ++ci) {
                        const double p = std::exp(static_cast<double>(lv2[at(bi, ci, si)]) - mx) / denom;
                        const double onehot = ci == t ? 1.0 : 0.0;
                        gl[at(bi, ci, si)] += gout * static_cast<T>((p - onehot) * inv);
                    }
                }
        });
    }
    return out;
}

}  // namespace pgssl::ops
