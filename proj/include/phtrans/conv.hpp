#pragma once

#include "phtrans/tensor.hpp"

namespace phtrans {

enum class ConvBackend { Direct, Im2col };

inline ConvBackend& conv_backend() {
    static ConvBackend b = ConvBackend::Im2col;
    return b;
}

namespace detail {

struct ConvDims {
    int64_t B, Cin, D, H, W;
    int64_t Cout, kd, kh, kw;
    int64_t od, oh, ow;
    int64_t s, p;
    int64_t in_vol() const { return D * H * W; }
    int64_t out_vol() const { return od * oh * ow; }
    int64_t ksize() const { return Cin * kd * kh * kw; }
};

template <class S>
ConvDims conv_dims(const Tensor<S>& x, const Tensor<S>& w, int64_t stride, int64_t padding) {
    PH_CHECK(x.dim() == 5, "conv3d: input must be [B,Cin,D,H,W], got ", shape_str(x.shape()));
    PH_CHECK(w.dim() == 5, "conv3d: weight must be [Cout,Cin,kd,kh,kw], got ", shape_str(w.shape()));
    PH_CHECK(stride >= 1 && padding >= 0, "conv3d: invalid stride/padding");
    ConvDims d;
    d.B = x.size(0);
    d.Cin = x.size(1);
    d.D = x.size(2);
    d.H = x.size(3);
    d.W = x.size(4);
    d.Cout = w.size(0);
    PH_CHECK(w.size(1) == d.Cin, "conv3d: channel mismatch, input has ", d.Cin, ", weight expects ", w.size(1));
    d.kd = w.size(2);
    d.kh = w.size(3);
    d.kw = w.size(4);
    d.s = stride;
    d.p = padding;
    d.od = (d.D + 2 * padding - d.kd) / stride + 1;
    d.oh = (d.H + 2 * padding - d.kh) / stride + 1;
    d.ow = (d.W + 2 * padding - d.kw) / stride + 1;
    PH_CHECK(d.kd <= d.D + 2 * padding && d.kh <= d.H + 2 * padding && d.kw <= d.W + 2 * padding,
             "conv3d: kernel larger than padded input");
    PH_CHECK(d.od >= 1 && d.oh >= 1 && d.ow >= 1, "conv3d: empty output");
    return d;
}

// fill one column block: col[cik, v] for output voxels [v0, v0+len)
template <class S>
void im2col_block(const ConvDims& dm, const S* x, int64_t v0, int64_t len, S* col) {
    const int64_t HW = dm.H * dm.W;
    parallel_for(
        len,
        [&](int64_t v) {
            int64_t ov = v0 + v;
            int64_t odi = ov / (dm.oh * dm.ow);
            int64_t rem = ov % (dm.oh * dm.ow);
            int64_t ohi = rem / dm.ow, owi = rem % dm.ow;
            int64_t id0 = odi * dm.s - dm.p, ih0 = ohi * dm.s - dm.p, iw0 = owi * dm.s - dm.p;
            int64_t cik = 0;
            for (int64_t ci = 0; ci < dm.Cin; ++ci) {
                const S* xc = x + ci * dm.in_vol();
                for (int64_t a = 0; a < dm.kd; ++a) {
                    int64_t id = id0 + a;
                    for (int64_t b = 0; b < dm.kh; ++b) {
                        int64_t ih = ih0 + b;
                        bool row_ok = id >= 0 && id < dm.D && ih >= 0 && ih < dm.H;
                        for (int64_t c = 0; c < dm.kw; ++c, ++cik) {
                            int64_t iw = iw0 + c;
                            col[cik * len + v] = (row_ok && iw >= 0 && iw < dm.W) ? xc[id * HW + ih * dm.W + iw] : S(0);
                        }
                    }
                }
            }
        },
        64);
}

template <class S>
void conv3d_forward_direct(const ConvDims& dm, const S* x, const S* w, const S* bias, S* y) {
    const int64_t HW = dm.H * dm.W;
    parallel_for(
        dm.B * dm.Cout * dm.od,
        [&](int64_t line) {
            int64_t b = line / (dm.Cout * dm.od);
            int64_t co = (line / dm.od) % dm.Cout;
            int64_t odi = line % dm.od;
            const S* xb = x + b * dm.Cin * dm.in_vol();
            const S* wc = w + co * dm.ksize();
            S* yl = y + ((b * dm.Cout + co) * dm.od + odi) * dm.oh * dm.ow;
            for (int64_t ohi = 0; ohi < dm.oh; ++ohi)
                for (int64_t owi = 0; owi < dm.ow; ++owi) {
                    S acc = bias ? bias[co] : S(0);
                    int64_t id0 = odi * dm.s - dm.p, ih0 = ohi * dm.s - dm.p, iw0 = owi * dm.s - dm.p;
                    int64_t widx = 0;
                    for (int64_t ci = 0; ci < dm.Cin; ++ci) {
                        const S* xc = xb + ci * dm.in_vol();
                        for (int64_t a = 0; a < dm.kd; ++a) {
                            int64_t id = id0 + a;
                            if (id < 0 || id >= dm.D) {
                                widx += dm.kh * dm.kw;
                                continue;
                            }
                            for (int64_t bb = 0; bb < dm.kh; ++bb) {
                                int64_t ih = ih0 + bb;
                                if (ih < 0 || ih >= dm.H) {
                                    widx += dm.kw;
                                    continue;
                                }
                                const S* xrow = xc + id * HW + ih * dm.W;
                                for (int64_t c = 0; c < dm.kw; ++c, ++widx) {
                                    int64_t iw = iw0 + c;
                                    if (iw >= 0 && iw < dm.W) acc += xrow[iw] * wc[widx];
                                }
                            }
                        }
                    }
                    yl[ohi * dm.ow + owi] = acc;
                }
        },
        1);
}

template <class S>
void conv3d_forward_im2col(const ConvDims& dm, const S* x, const S* w, const S* bias, S* y) {
    const int64_t K = dm.ksize();
    const int64_t chunk = std::max<int64_t>(int64_t(1), std::min<int64_t>(dm.out_vol(), (1 << 22) / std::max<int64_t>(K, 1)));
    std::vector<S> col(size_t(K * chunk));
    std::vector<S> ybuf(size_t(dm.Cout * chunk));
    for (int64_t b = 0; b < dm.B; ++b) {
        const S* xb = x + b * dm.Cin * dm.in_vol();
        for (int64_t v0 = 0; v0 < dm.out_vol(); v0 += chunk) {
            int64_t len = std::min(chunk, dm.out_vol() - v0);
            im2col_block(dm, xb, v0, len, col.data());
            gemm(w, col.data(), ybuf.data(), dm.Cout, K, len, false);
            for (int64_t co = 0; co < dm.Cout; ++co) {
                S* dst = y + (b * dm.Cout + co) * dm.out_vol() + v0;
                const S* srcrow = ybuf.data() + co * len;
                S add = bias ? bias[co] : S(0);
                for (int64_t v = 0; v < len; ++v) dst[v] = srcrow[v] + add;
            }
        }
    }
}

// dx gather: every input voxel collects from the output positions its value fed
template <class S>
void conv3d_backward_data(const ConvDims& dm, const S* w, const S* gy, S* gx_accum) {
    const int64_t oHW = dm.oh * dm.ow;
    parallel_for(
        dm.B * dm.Cin * dm.D,
        [&](int64_t line) {
            int64_t b = line / (dm.Cin * dm.D);
            int64_t ci = (line / dm.D) % dm.Cin;
            int64_t id = line % dm.D;
            const S* gyb = gy + b * dm.Cout * dm.out_vol();
            S* gxl = gx_accum + ((b * dm.Cin + ci) * dm.D + id) * dm.H * dm.W;
            for (int64_t ih = 0; ih < dm.H; ++ih)
                for (int64_t iw = 0; iw < dm.W; ++iw) {
                    S acc = 0;
                    // output voxel od satisfies od*s - p + a == id with 0<=a<kd
                    for (int64_t a = 0; a < dm.kd; ++a) {
                        int64_t t = id + dm.p - a;
                        if (t < 0 || t % dm.s) continue;
                        int64_t od = t / dm.s;
                        if (od >= dm.od) continue;
                        for (int64_t bb = 0; bb < dm.kh; ++bb) {
                            int64_t u = ih + dm.p - bb;
                            if (u < 0 || u % dm.s) continue;
                            int64_t oh = u / dm.s;
                            if (oh >= dm.oh) continue;
                            for (int64_t c = 0; c < dm.kw; ++c) {
                                int64_t v = iw + dm.p - c;
                                if (v < 0 || v % dm.s) continue;
                                int64_t ow = v / dm.s;
                                if (ow >= dm.ow) continue;
                                int64_t ov = od * oHW + oh * dm.ow + ow;
                                for (int64_t co = 0; co < dm.Cout; ++co)
                                    acc += gyb[co * dm.out_vol() + ov] *
                                           w[(((co * dm.Cin + ci) * dm.kd + a) * dm.kh + bb) * dm.kw + c];
                            }
                        }
                    }
                    gxl[ih * dm.W + iw] += acc;
                }
        },
        1);
}

template <class S>
void conv3d_backward_weight(const ConvDims& dm, const S* x, const S* gy, S* gw_accum, S* gb_accum) {
    const int64_t K = dm.ksize();
    // dW[co, cik] += sum_b gy[b,co,:] . col_b[cik,:]  via chunked col recompute
    const int64_t chunk = std::max<int64_t>(int64_t(1), std::min<int64_t>(dm.out_vol(), (1 << 22) / std::max<int64_t>(K, 1)));
    std::vector<S> col(size_t(K * chunk));
    for (int64_t b = 0; b < dm.B; ++b) {
        const S* xb = x + b * dm.Cin * dm.in_vol();
        const S* gyb = gy + b * dm.Cout * dm.out_vol();
        for (int64_t v0 = 0; v0 < dm.out_vol(); v0 += chunk) {
            int64_t len = std::min(chunk, dm.out_vol() - v0);
            im2col_block(dm, xb, v0, len, col.data());
            // gw[co, kk] += sum_v gy[co, v0+v] * col[kk, v]
            parallel_for(
                dm.Cout,
                [&](int64_t co) {
                    const S* grow = gyb + co * dm.out_vol() + v0;
                    S* wrow = gw_accum + co * K;
                    for (int64_t kk = 0; kk < K; ++kk) {
                        const S* crow = col.data() + kk * len;
                        S acc = 0;
                        for (int64_t v = 0; v < len; ++v) acc += grow[v] * crow[v];
                        wrow[kk] += acc;
                    }
                },
                1);
        }
    }
    if (gb_accum) {
        for (int64_t b = 0; b < dm.B; ++b)
            for (int64_t co = 0; co < dm.Cout; ++co) {
                const S* grow = gy + (b * dm.Cout + co) * dm.out_vol();
                S acc = 0;
                for (int64_t v = 0; v < dm.out_vol(); ++v) acc += grow[v];
                gb_accum[co] += acc;
            }
    }
}

}  // namespace detail

// 3D cross-correlation, cubic stride/padding. Bias optional (undefined tensor
// means none).
template <class S>
Tensor<S> conv3d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias, int64_t stride, int64_t padding) {
    detail::ConvDims dm = detail::conv_dims(x, w, stride, padding);
    const S* bptr = nullptr;
    if (bias.defined()) {
        PH_CHECK(bias.dim() == 1 && bias.numel() == dm.Cout, "conv3d: bias must be [Cout]");
        bptr = bias.values().data();
    }
    Tensor<S> out = Tensor<S>::zeros({dm.B, dm.Cout, dm.od, dm.oh, dm.ow});
    if (conv_backend() == ConvBackend::Im2col)
        detail::conv3d_forward_im2col(dm, x.values().data(), w.values().data(), bptr, out.values().data());
    else
        detail::conv3d_forward_direct(dm, x.values().data(), w.values().data(), bptr, out.values().data());

    bool need = tracing(x, w) || (Tape<S>::active().recording() && bias.defined() && bias.requires_grad());
    if (need) {
        out.set_requires_grad(true);
        auto bimpl = bias.defined() ? bias.impl() : nullptr;
        Tape<S>::active().record([xi = x.impl(), wi = w.impl(), bimpl, oi = out.impl(), dm] {
            if (oi->grad.empty()) return;
            const S* gy = oi->grad.data();
            if (xi->requires_grad) {
                xi->ensure_grad();
                detail::conv3d_backward_data(dm, wi->value.data(), gy, xi->grad.data());
            }
            if (wi->requires_grad || (bimpl && bimpl->requires_grad)) {
                S* gw = nullptr;
                std::vector<S> scratch;
                if (wi->requires_grad) {
                    wi->ensure_grad();
                    gw = wi->grad.data();
                } else {
                    scratch.assign(wi->value.size(), S(0));
                    gw = scratch.data();
                }
                S* gb = nullptr;
                if (bimpl && bimpl->requires_grad) {
                    bimpl->ensure_grad();
                    gb = bimpl->grad.data();
                }
                detail::conv3d_backward_weight(dm, xi->value.data(), gy, gw, gb);
            }
        });
    }
    return out;
}

// Transposed 3D convolution with kernel == stride and no padding: every input
// voxel scatters its kernel patch into a disjoint output block, so output
// extents are exactly stride times the input's. Weight layout [Cin,Cout,k,k,k].
template <class S>
Tensor<S> conv3d_transpose(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias, int64_t stride) {
    PH_CHECK(x.dim() == 5, "conv3d_transpose: input must be [B,Cin,D,H,W]");
    PH_CHECK(w.dim() == 5, "conv3d_transpose: weight must be [Cin,Cout,k,k,k]");
    PH_CHECK(stride >= 1, "conv3d_transpose: stride must be >= 1");
    const int64_t B = x.size(0), Cin = x.size(1), D = x.size(2), H = x.size(3), W = x.size(4);
    const int64_t Cout = w.size(1), s = stride;
    PH_CHECK(w.size(0) == Cin, "conv3d_transpose: channel mismatch");
    PH_CHECK(w.size(2) == s && w.size(3) == s && w.size(4) == s,
             "conv3d_transpose: kernel extents must equal stride (got ", w.size(2), ", stride ", s, ")");
    const int64_t od = D * s, oh = H * s, ow = W * s;
    const S* bptr = nullptr;
    if (bias.defined()) {
        PH_CHECK(bias.dim() == 1 && bias.numel() == Cout, "conv3d_transpose: bias must be [Cout]");
        bptr = bias.values().data();
    }
    Tensor<S> out = Tensor<S>::zeros({B, Cout, od, oh, ow});
    const S* xp = x.values().data();
    const S* wp = w.values().data();
    S* yp = out.values().data();
    const int64_t in_vol = D * H * W, out_vol = od * oh * ow, k3 = s * s * s;
    parallel_for(
        B * Cout * od,
        [&](int64_t line) {
            int64_t b = line / (Cout * od);
            int64_t co = (line / od) % Cout;
            int64_t odi = line % od;
            int64_t id = odi / s, a = odi % s;
            const S* xb = xp + b * Cin * in_vol;
            S* yl = yp + (b * Cout + co) * out_vol + odi * oh * ow;
            for (int64_t ohi = 0; ohi < oh; ++ohi) {
                int64_t ih = ohi / s, bb = ohi % s;
                for (int64_t owi = 0; owi < ow; ++owi) {
                    int64_t iw = owi / s, c = owi % s;
                    S acc = bptr ? bptr[co] : S(0);
                    int64_t koff = (a * s + bb) * s + c;
                    for (int64_t ci = 0; ci < Cin; ++ci)
                        acc += xb[ci * in_vol + (id * H + ih) * W + iw] * wp[(ci * Cout + co) * k3 + koff];
                    yl[ohi * ow + owi] = acc;
                }
            }
        },
        1);

    bool need = tracing(x, w) || (Tape<S>::active().recording() && bias.defined() && bias.requires_grad());
    if (need) {
        out.set_requires_grad(true);
        auto bimpl = bias.defined() ? bias.impl() : nullptr;
        Tape<S>::active().record([xi = x.impl(), wi = w.impl(), bimpl, B, Cin, Cout, D, H, W, s, in_vol, out_vol, k3,
                                  oh, ow, oi = out.impl()] {
            if (oi->grad.empty()) return;
            const S* gy = oi->grad.data();
            if (xi->requires_grad) {
                xi->ensure_grad();
                // dx[b,ci,iv] = sum_co sum_k gy[b,co, iv*s + k] * w[ci,co,k]
                parallel_for(
                    B * Cin * D,
                    [&](int64_t line) {
                        int64_t b = line / (Cin * D);
                        int64_t ci = (line / D) % Cin;
                        int64_t id = line % D;
                        S* gxl = xi->grad.data() + (b * Cin + ci) * in_vol + id * H * W;
                        for (int64_t ih = 0; ih < H; ++ih)
                            for (int64_t iw = 0; iw < W; ++iw) {
                                S acc = 0;
                                for (int64_t co = 0; co < Cout; ++co) {
                                    const S* gyl = gy + (b * Cout + co) * out_vol;
                                    const S* wl = wi->value.data() + (ci * Cout + co) * k3;
                                    for (int64_t a = 0; a < s; ++a)
                                        for (int64_t bb = 0; bb < s; ++bb)
                                            for (int64_t c = 0; c < s; ++c)
                                                acc += gyl[((id * s + a) * oh + ih * s + bb) * ow + iw * s + c] *
                                                       wl[(a * s + bb) * s + c];
                                }
                                gxl[ih * W + iw] += acc;
                            }
                    },
                    1);
            }
            if (wi->requires_grad) {
                wi->ensure_grad();
                // dw[ci,co,k] = sum_b sum_iv x[b,ci,iv] * gy[b,co, iv*s+k]
                parallel_for(
                    Cin * Cout,
                    [&](int64_t pair) {
                        int64_t ci = pair / Cout, co = pair % Cout;
                        S* wl = wi->grad.data() + (ci * Cout + co) * k3;
                        for (int64_t b = 0; b < B; ++b) {
                            const S* xb = xi->value.data() + (b * Cin + ci) * in_vol;
                            const S* gyl = gy + (b * Cout + co) * out_vol;
                            for (int64_t id = 0; id < D; ++id)
                                for (int64_t ih = 0; ih < H; ++ih)
                                    for (int64_t iw = 0; iw < W; ++iw) {
                                        S xv = xb[(id * H + ih) * W + iw];
                                        if (xv == S(0)) continue;
                                        for (int64_t a = 0; a < s; ++a)
                                            for (int64_t bb = 0; bb < s; ++bb)
                                                for (int64_t c = 0; c < s; ++c)
                                                    wl[(a * s + bb) * s + c] +=
                                                        xv * gyl[((id * s + a) * oh + ih * s + bb) * ow + iw * s + c];
                                    }
                        }
                    },
                    1);
            }
            if (bimpl && bimpl->requires_grad) {
                bimpl->ensure_grad();
                for (int64_t b = 0; b < B; ++b)
                    for (int64_t co = 0; co < Cout; ++co) {
                        const S* gyl = gy + (b * Cout + co) * out_vol;
                        S acc = 0;
                        for (int64_t v = 0; v < out_vol; ++v) acc += gyl[v];
                        bimpl->grad[size_t(co)] += acc;
                    }
            }
        });
    }
    return out;
}

}  // namespace phtrans
