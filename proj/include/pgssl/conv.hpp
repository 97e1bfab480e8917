#pragma once

#include <algorithm>
#include <cstddef>
#include <string>

#include "pgssl/tape.hpp"
#include "pgssl/tensor.hpp"

namespace pgssl::ops {

struct Conv2dDims {
    std::size_t n, cin, h, w;
    std::size_t cout, kh, kw;
    std::size_t oh, ow;
    int stride, pad;
};

template <typename T>
inline Conv2dDims conv2d_dims(const Tensor<T>& x, const Tensor<T>& kernel, int stride, int pad) {
    if (x.rank() != 4)
        throw ShapeError("conv2d: input must be [N,Cin,H,W], got " + shape_str(x.shape()));
    if (kernel.rank() != 4)
        throw ShapeError("conv2d: kernel must be [Cout,Cin,kh,kw], got " + shape_str(kernel.shape()));
    if (x.dim(1) != kernel.dim(1))
        throw ShapeError("conv2d: channel axes disagree: input Cin=" + std::to_string(x.dim(1)) +
                         " (axis 1) vs kernel Cin=" + std::to_string(kernel.dim(1)) + " (axis 1)");
    if (stride < 1) throw ValueError("conv2d: stride must be >= 1");
    if (pad < 0) throw ValueError("conv2d: padding must be >= 0");
    Conv2dDims d;
    d.n = x.dim(0);
    d.cin = x.dim(1);
    d.h = x.dim(2);
    d.w = x.dim(3);
    d.cout = kernel.dim(0);
    d.kh = kernel.dim(2);
    d.kw = kernel.dim(3);
    d.stride = stride;
    d.pad = pad;
    if (d.kh > d.h + 2 * static_cast<std::size_t>(pad))
        throw ShapeError("conv2d: kernel height " + std::to_string(d.kh) +
                         " exceeds padded input height " + std::to_string(d.h + 2 * pad) + " (axis 2)");
    if (d.kw > d.w + 2 * static_cast<std::size_t>(pad))
        throw ShapeError("conv2d: kernel width " + std::to_string(d.kw) +
                         " exceeds padded input width " + std::to_string(d.w + 2 * pad) + " (axis 3)");
    d.oh = (d.h + 2 * pad - d.kh) / stride + 1;
    d.ow = (d.w + 2 * pad - d.kw) / stride + 1;
    return d;
}

namespace detail {

// Output rows `o` with 0 <= o*stride - pad + k < extent.
inline void valid_out_range(std::size_t k, std::size_t extent, std::size_t out_extent, int stride,
                            int pad, std::size_t& lo, std::size_t& hi_excl) {
    const long long off = static_cast<long long>(k) - pad;
    long long lo_ll = 0;
    if (off < 0) lo_ll = (-off + stride - 1) / stride;
    long long hi_ll = (static_cast<long long>(extent) - 1 - off) / stride;  // inclusive
    if (hi_ll >= static_cast<long long>(out_extent)) hi_ll = static_cast<long long>(out_extent) - 1;
    if (hi_ll < lo_ll) {
        lo = hi_excl = 0;
        return;
    }
    lo = static_cast<std::size_t>(lo_ll);
    hi_excl = static_cast<std::size_t>(hi_ll) + 1;
}

}  // namespace detail

// Zero-padded 2D cross-correlation. Accumulation into each output element
// runs in (cin, kh, kw) order, the same order a scalar-accumulator reference
// loop uses, so the 64-bit instantiation is bit-identical to the naive form.
template <typename T>
Tensor<T> conv2d(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& kernel,
                 const Tensor<T>* bias, int stride, int pad) {
    const Conv2dDims d = conv2d_dims(x, kernel, stride, pad);
    if (bias && (bias->rank() != 1 || bias->dim(0) != d.cout))
        throw ShapeError("conv2d: bias must be [Cout], got " + shape_str(bias->shape()));

    Tensor<T> out(Shape{d.n, d.cout, d.oh, d.ow});
    auto xv = x.values();
    auto wv = kernel.values();
    auto ov = out.values();

    if (bias) {
        auto bv = bias->values();
        for (std::size_t n = 0; n < d.n; ++n)
            for (std::size_t co = 0; co < d.cout; ++co) {
                T* dst = ov.data() + (n * d.cout + co) * d.oh * d.ow;
                std::fill(dst, dst + d.oh * d.ow, bv[co]);
            }
    }

    for (std::size_t n = 0; n < d.n; ++n)
        for (std::size_t co = 0; co < d.cout; ++co) {
            T* oplane = ov.data() + (n * d.cout + co) * d.oh * d.ow;
            for (std::size_t ci = 0; ci < d.cin; ++ci) {
                const T* xplane = xv.data() + (n * d.cin + ci) * d.h * d.w;
                for (std::size_t kh = 0; kh < d.kh; ++kh) {
                    std::size_t oh_lo, oh_hi;
                    detail::valid_out_range(kh, d.h, d.oh, d.stride, d.pad, oh_lo, oh_hi);
                    for (std::size_t kw = 0; kw < d.kw; ++kw) {
                        std::size_t ow_lo, ow_hi;
                        detail::valid_out_range(kw, d.w, d.ow, d.stride, d.pad, ow_lo, ow_hi);
                        const T wk = wv[((co * d.cin + ci) * d.kh + kh) * d.kw + kw];
                        for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                            const std::size_t ih = oh * d.stride - d.pad + kh;
                            const T* xrow = xplane + ih * d.w;
                            T* orow = oplane + oh * d.ow;
                            for (std::size_t ow = ow_lo; ow < ow_hi; ++ow)
                                orow[ow] += wk * xrow[ow * d.stride - d.pad + kw];
                        }
                    }
                }
            }
        }

    const bool bias_grad = bias && bias->requires_grad();
    if (tracking(tape, x.requires_grad() || kernel.requires_grad() || bias_grad)) {
        out.set_requires_grad(true);
        Tensor<T> tx = x, tw = kernel, to = out;
        Tensor<T> tb = bias ? *bias : Tensor<T>();
        const bool has_bias = bias != nullptr;
        tape->record([tx, tw, tb, to, d, has_bias]() mutable {
            auto g = to.grad();
            auto xv2 = tx.values();
            auto wv2 = tw.values();
            // Scatter loops mirror the naive reference exactly, so the
            // per-element accumulation order (and hence the 64-bit bits)
            // match it. Kernel/bias grads first, then input grads.
            if (tw.requires_grad() || (has_bias && tb.requires_grad())) {
                const bool want_w = tw.requires_grad();
                const bool want_b = has_bias && tb.requires_grad();
                auto gw = want_w ? tw.grad() : std::span<T>{};
                auto gb = want_b ? tb.grad() : std::span<T>{};
                for (std::size_t n = 0; n < d.n; ++n)
                    for (std::size_t co = 0; co < d.cout; ++co)
                        for (std::size_t oh = 0; oh < d.oh; ++oh)
                            for (std::size_t ow = 0; ow < d.ow; ++ow) {
                                const T go = g[((n * d.cout + co) * d.oh + oh) * d.ow + ow];
                                if (want_b) gb[co] += go;
                                if (!want_w) continue;
                                for (std::size_t ci = 0; ci < d.cin; ++ci)
                                    for (std::size_t kh = 0; kh < d.kh; ++kh) {
                                        const long long ih =
                                            static_cast<long long>(oh) * d.stride - d.pad + kh;
                                        if (ih < 0 || ih >= static_cast<long long>(d.h)) continue;
                                        for (std::size_t kw = 0; kw < d.kw; ++kw) {
                                            const long long iw =
                                                static_cast<long long>(ow) * d.stride - d.pad + kw;
                                            if (iw < 0 || iw >= static_cast<long long>(d.w)) continue;
                                            gw[((co * d.cin + ci) * d.kh + kh) * d.kw + kw] +=
                                                go * xv2[(n * d.cin + ci) * d.h * d.w + ih * d.w + iw];
                                        }
                                    }
                            }
            }
            if (tx.requires_grad()) {
                auto gx = tx.grad();
                for (std::size_t n = 0; n < d.n; ++n)
                    for (std::size_t co = 0; co < d.cout; ++co)
                        for (std::size_t oh = 0; oh < d.oh; ++oh)
                            for (std::size_t ow = 0; ow < d.ow; ++ow) {
                                const T go = g[((n * d.cout + co) * d.oh + oh) * d.ow + ow];
                                for (std::size_t ci = 0; ci < d.cin; ++ci)
                                    for (std::size_t kh = 0; kh < d.kh; ++kh) {
                                        const long long ih =
                                            static_cast<long long>(oh) * d.stride - d.pad + kh;
                                        if (ih < 0 || ih >= static_cast<long long>(d.h)) continue;
                                        for (std::size_t kw = 0; kw < d.kw; ++kw) {
                                            const long long iw =
                                                static_cast<long long>(ow) * d.stride - d.pad + kw;
                                            if (iw < 0 || iw >= static_cast<long long>(d.w)) continue;
                                            gx[(n * d.cin + ci) * d.h * d.w + ih * d.w + iw] +=
                                                go * wv2[((co * d.cin + ci) * d.kh + kh) * d.kw + kw];
                                        }
                                    }
                            }
            }
        });
    }
    return out;
}

}  // namespace pgssl::ops
