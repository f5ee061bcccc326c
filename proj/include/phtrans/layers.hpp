#pragma once

#include <array>

#include "phtrans/conv.hpp"
#include "phtrans/tensor.hpp"

namespace phtrans {

// ---------------------------------------------------------------------------
// parameter registry
// ---------------------------------------------------------------------------

enum class InitKind { HeWeight, Zero, One };

template <class S>
struct ParamRef {
    std::string name;
    Tensor<S> tensor;
    InitKind kind;
    int64_t fan_in;  // meaningful for HeWeight only
};

template <class S>
using ParamList = std::vector<ParamRef<S>>;

// "he" normal initialization: weights ~ N(0, sqrt(2/fan_in)), biases zero,
// norm gains one. Traversal order is fixed by the registry, so identical
// seeds give bitwise-identical parameters.
template <class S>
void he_init(ParamList<S>& params, uint64_t seed) {
    Rng rng(seed, 0xC0FFEEull);
    for (auto& p : params) {
        auto v = p.tensor.values();
        switch (p.kind) {
            case InitKind::HeWeight: {
                double stddev = std::sqrt(2.0 / double(p.fan_in));
                for (auto& x : v) x = S(rng.normal() * stddev);
                break;
            }
            case InitKind::Zero:
                std::fill(v.begin(), v.end(), S(0));
                break;
            case InitKind::One:
                std::fill(v.begin(), v.end(), S(1));
                break;
        }
    }
}

template <class S>
int64_t count_parameters(const ParamList<S>& params) {
    int64_t n = 0;
    for (const auto& p : params) n += p.tensor.numel();
    return n;
}

// ---------------------------------------------------------------------------
// normalization ops
// ---------------------------------------------------------------------------

namespace detail {

// shared normalization backward over contiguous groups laid out as
// (group, n, inner): here inner==1 always (we normalize contiguous runs)
template <class S>
void norm_backward_group(const S* x, const S* gy_eff, S* gx, int64_t n, double mu, double inv_sigma) {
    double mean_dy = 0, mean_dyy = 0;
    for (int64_t i = 0; i < n; ++i) {
        double y = (double(x[i]) - mu) * inv_sigma;
        mean_dy += double(gy_eff[i]);
        mean_dyy += double(gy_eff[i]) * y;
    }
    mean_dy /= double(n);
    mean_dyy /= double(n);
    for (int64_t i = 0; i < n; ++i) {
        double y = (double(x[i]) - mu) * inv_sigma;
        gx[i] += S(inv_sigma * (double(gy_eff[i]) - mean_dy - y * mean_dyy));
    }
}

template <class S>
void moments(const S* x, int64_t n, double& mu, double& var) {
    double acc = 0;
    for (int64_t i = 0; i < n; ++i) acc += double(x[i]);
    mu = acc / double(n);
    double v = 0;
    for (int64_t i = 0; i < n; ++i) {
        double d = double(x[i]) - mu;
        v += d * d;
    }
    var = v / double(n);
}

}  // namespace detail

// Per-token normalization over the last axis: out = gain * (x-mu)/sqrt(var+eps) + bias
template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias, double eps = 1e-5) {
    int64_t C = x.shape().back();
    PH_CHECK(gain.numel() == C && bias.numel() == C, "layer_norm: gain/bias must have length ", C);
    int64_t rows = x.numel() / C;
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    auto xv = x.values();
    auto gv = gain.values();
    auto bv = bias.values();
    auto ov = out.values();
    parallel_for(
        rows,
        [&](int64_t r) {
            double mu, var;
            detail::moments(xv.data() + r * C, C, mu, var);
            double inv = 1.0 / std::sqrt(var + eps);
            for (int64_t j = 0; j < C; ++j)
                ov[size_t(r * C + j)] =
                    S((double(xv[size_t(r * C + j)]) - mu) * inv) * gv[size_t(j)] + bv[size_t(j)];
        },
        64);
    bool need = Tape<S>::active().recording() && (x.requires_grad() || gain.requires_grad() || bias.requires_grad());
    if (need) {
        out.set_requires_grad(true);
        Tape<S>::active().record([xi = x.impl(), gi = gain.impl(), bi = bias.impl(), oi = out.impl(), C, rows, eps] {
            if (oi->grad.empty()) return;
            std::vector<S> gy_eff(static_cast<size_t>(C));
            if (xi->requires_grad) xi->ensure_grad();
            if (gi->requires_grad) gi->ensure_grad();
            if (bi->requires_grad) bi->ensure_grad();
            for (int64_t r = 0; r < rows; ++r) {
                const S* xrow = xi->value.data() + r * C;
                const S* grow = oi->grad.data() + r * C;
                double mu, var;
                detail::moments(xrow, C, mu, var);
                double inv = 1.0 / std::sqrt(var + eps);
                for (int64_t j = 0; j < C; ++j) {
                    double y = (double(xrow[j]) - mu) * inv;
                    if (gi->requires_grad) gi->grad[size_t(j)] += grow[j] * S(y);
                    if (bi->requires_grad) bi->grad[size_t(j)] += grow[j];
                    gy_eff[size_t(j)] = grow[j] * gi->value[size_t(j)];
                }
                if (xi->requires_grad)
                    detail::norm_backward_group(xrow, gy_eff.data(), xi->grad.data() + r * C, C, mu, inv);
            }
        });
    }
    return out;
}

// Per (sample, channel) normalization over spatial voxels of [B,C,D,H,W]
template <class S>
Tensor<S> instance_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias, double eps = 1e-5) {
    PH_CHECK(x.dim() == 5, "instance_norm: expected [B,C,D,H,W], got ", shape_str(x.shape()));
    int64_t B = x.size(0), C = x.size(1), V = x.size(2) * x.size(3) * x.size(4);
    PH_CHECK(V >= 2, "instance_norm: spatial volume must be >= 2 voxels");
    PH_CHECK(gain.numel() == C && bias.numel() == C, "instance_norm: gain/bias must have length ", C);
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    auto xv = x.values();
    auto gv = gain.values();
    auto bv = bias.values();
    auto ov = out.values();
    parallel_for(
        B * C,
        [&](int64_t g) {
            int64_t c = g % C;
            const S* xg = xv.data() + g * V;
            S* og = ov.data() + g * V;
            double mu, var;
            detail::moments(xg, V, mu, var);
            double inv = 1.0 / std::sqrt(var + eps);
            S gn = gv[size_t(c)], bn = bv[size_t(c)];
            for (int64_t i = 0; i < V; ++i) og[i] = S((double(xg[i]) - mu) * inv) * gn + bn;
        },
        1);
    bool need = Tape<S>::active().recording() && (x.requires_grad() || gain.requires_grad() || bias.requires_grad());
    if (need) {
        out.set_requires_grad(true);
        Tape<S>::active().record([xi = x.impl(), gi = gain.impl(), bi = bias.impl(), oi = out.impl(), B, C, V, eps] {
            if (oi->grad.empty()) return;
            if (xi->requires_grad) xi->ensure_grad();
            if (gi->requires_grad) gi->ensure_grad();
            if (bi->requires_grad) bi->ensure_grad();
            std::vector<S> gy_eff(static_cast<size_t>(V));
            for (int64_t g = 0; g < B * C; ++g) {
                int64_t c = g % C;
                const S* xg = xi->value.data() + g * V;
                const S* grow = oi->grad.data() + g * V;
                double mu, var;
                detail::moments(xg, V, mu, var);
                double inv = 1.0 / std::sqrt(var + eps);
                double dg = 0, db = 0;
                for (int64_t i = 0; i < V; ++i) {
                    double y = (double(xg[i]) - mu) * inv;
                    dg += double(grow[i]) * y;
                    db += double(grow[i]);
                    gy_eff[size_t(i)] = grow[i] * gi->value[size_t(c)];
                }
                if (gi->requires_grad) gi->grad[size_t(c)] += S(dg);
                if (bi->requires_grad) bi->grad[size_t(c)] += S(db);
                if (xi->requires_grad)
                    detail::norm_backward_group(xg, gy_eff.data(), xi->grad.data() + g * V, V, mu, inv);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// layer modules
// ---------------------------------------------------------------------------

template <class S>
struct Linear {
    Tensor<S> weight;  // [in, out]
    Tensor<S> bias;    // [out]

    Linear() = default;
    Linear(int64_t in, int64_t out) {
        weight = Tensor<S>::zeros({in, out}, true);
        bias = Tensor<S>::zeros({out}, true);
    }

    Tensor<S> forward(const Tensor<S>& x) const { return add_rowvec(matmul(x, weight), bias); }

    void collect(const std::string& prefix, ParamList<S>& out) {
        out.push_back({prefix + ".weight", weight, InitKind::HeWeight, weight.size(0)});
        out.push_back({prefix + ".bias", bias, InitKind::Zero, 0});
    }
};

template <class S>
struct InstanceNormLayer {
    Tensor<S> gain, bias;
    InstanceNormLayer() = default;
    explicit InstanceNormLayer(int64_t channels) {
        gain = Tensor<S>::zeros({channels}, true);
        bias = Tensor<S>::zeros({channels}, true);
    }
    Tensor<S> forward(const Tensor<S>& x) const { return instance_norm(x, gain, bias); }
    void collect(const std::string& prefix, ParamList<S>& out) {
        out.push_back({prefix + ".gain", gain, InitKind::One, 0});
        out.push_back({prefix + ".bias", bias, InitKind::Zero, 0});
    }
};

template <class S>
struct LayerNormLayer {
    Tensor<S> gain, bias;
    LayerNormLayer() = default;
    explicit LayerNormLayer(int64_t channels) {
        gain = Tensor<S>::zeros({channels}, true);
        bias = Tensor<S>::zeros({channels}, true);
    }
    Tensor<S> forward(const Tensor<S>& x) const { return layer_norm(x, gain, bias); }
    void collect(const std::string& prefix, ParamList<S>& out) {
        out.push_back({prefix + ".gain", gain, InitKind::One, 0});
        out.push_back({prefix + ".bias", bias, InitKind::Zero, 0});
    }
};

// conv(3x3x3) -> GELU -> IN, in that order
template <class S>
struct ConvUnit {
    Tensor<S> weight, bias;
    InstanceNormLayer<S> norm;
    int64_t stride = 1;

    ConvUnit() = default;
    ConvUnit(int64_t cin, int64_t cout, int64_t stride_ = 1) : norm(cout), stride(stride_) {
        weight = Tensor<S>::zeros({cout, cin, 3, 3, 3}, true);
        bias = Tensor<S>::zeros({cout}, true);
    }

    Tensor<S> forward(const Tensor<S>& x) const { return norm.forward(gelu(conv3d(x, weight, bias, stride, 1))); }

    void collect(const std::string& prefix, ParamList<S>& out) {
        out.push_back({prefix + ".weight", weight, InitKind::HeWeight, weight.size(1) * 27});
        out.push_back({prefix + ".bias", bias, InitKind::Zero, 0});
        norm.collect(prefix + ".norm", out);
    }
};

// stride-2 deconv(2x2x2) -> GELU -> IN; the decoder-side counterpart of a
// strided ConvUnit
template <class S>
struct TransConvUnit {
    Tensor<S> weight, bias;  // weight [cin, cout, 2,2,2]
    InstanceNormLayer<S> norm;

    TransConvUnit() = default;
    TransConvUnit(int64_t cin, int64_t cout) : norm(cout) {
        weight = Tensor<S>::zeros({cin, cout, 2, 2, 2}, true);
        bias = Tensor<S>::zeros({cout}, true);
    }

    Tensor<S> forward(const Tensor<S>& x) const { return norm.forward(gelu(conv3d_transpose(x, weight, bias, 2))); }

    void collect(const std::string& prefix, ParamList<S>& out) {
        out.push_back({prefix + ".weight", weight, InitKind::HeWeight, weight.size(0) * 8});
        out.push_back({prefix + ".bias", bias, InitKind::Zero, 0});
        norm.collect(prefix + ".norm", out);
    }
};

// stage transition: stride-2 conv (k=2) doubling channels, then IN
template <class S>
struct Downsample {
    Tensor<S> weight, bias;
    InstanceNormLayer<S> norm;

    Downsample() = default;
    explicit Downsample(int64_t cin) : norm(2 * cin) {
        weight = Tensor<S>::zeros({2 * cin, cin, 2, 2, 2}, true);
        bias = Tensor<S>::zeros({2 * cin}, true);
    }

    Tensor<S> forward(const Tensor<S>& x) const {
        PH_CHECK(x.size(2) % 2 == 0 && x.size(3) % 2 == 0 && x.size(4) % 2 == 0,
                 "downsample: spatial extents must be even, got ", shape_str(x.shape()));
        return norm.forward(conv3d(x, weight, bias, 2, 0));
    }

    void collect(const std::string& prefix, ParamList<S>& out) {
        out.push_back({prefix + ".weight", weight, InitKind::HeWeight, weight.size(1) * 8});
        out.push_back({prefix + ".bias", bias, InitKind::Zero, 0});
        norm.collect(prefix + ".norm", out);
    }
};

// stage transition: stride-2 deconv halving channels, then IN
template <class S>
struct Upsample {
    Tensor<S> weight, bias;  // [cin, cin/2, 2,2,2]
    InstanceNormLayer<S> norm;

    Upsample() = default;
    explicit Upsample(int64_t cin) : norm(cin / 2) {
        weight = Tensor<S>::zeros({cin, cin / 2, 2, 2, 2}, true);
        bias = Tensor<S>::zeros({cin / 2}, true);
    }

    Tensor<S> forward(const Tensor<S>& x) const { return norm.forward(conv3d_transpose(x, weight, bias, 2)); }

    void collect(const std::string& prefix, ParamList<S>& out) {
        out.push_back({prefix + ".weight", weight, InitKind::HeWeight, weight.size(0) * 8});
        out.push_back({prefix + ".bias", bias, InitKind::Zero, 0});
        norm.collect(prefix + ".norm", out);
    }
};

// two linear layers with hidden width = mlp_ratio * channels, GELU between
template <class S>
struct MLPBlock {
    Linear<S> fc1, fc2;
    MLPBlock() = default;
    MLPBlock(int64_t channels, int64_t mlp_ratio) : fc1(channels, channels * mlp_ratio), fc2(channels * mlp_ratio, channels) {}
    Tensor<S> forward(const Tensor<S>& x) const { return fc2.forward(gelu(fc1.forward(x))); }
    void collect(const std::string& prefix, ParamList<S>& out) {
        fc1.collect(prefix + ".fc1", out);
        fc2.collect(prefix + ".fc2", out);
    }
};

// ---------------------------------------------------------------------------
// window machinery
// ---------------------------------------------------------------------------

struct Window3 {
    int64_t d = 1, h = 1, w = 1;
    int64_t tokens() const { return d * h * w; }
    bool operator==(const Window3&) const = default;
};

// Volume-to-Sequence: evenly partition [B,C,D,H,W] into non-overlapping
// windows, flattening each to L tokens of C channels -> [B*N, L, C]
template <class S>
Tensor<S> v2s(const Tensor<S>& x, const Window3& win) {
    PH_CHECK(x.dim() == 5, "v2s: expected [B,C,D,H,W]");
    int64_t B = x.size(0), C = x.size(1), D = x.size(2), H = x.size(3), W = x.size(4);
    const char* names[3] = {"depth", "height", "width"};
    int64_t exts[3] = {D, H, W}, wins[3] = {win.d, win.h, win.w};
    for (int i = 0; i < 3; ++i)
        PH_CHECK(wins[i] >= 1 && exts[i] % wins[i] == 0, "v2s: ", names[i], " extent ", exts[i],
                 " not divisible by window ", wins[i]);
    int64_t nd = D / win.d, nh = H / win.h, nw = W / win.w;
    Tensor<S> t = reshape(x, {B, C, nd, win.d, nh, win.h, nw, win.w});
    t = permute(t, {0, 2, 4, 6, 3, 5, 7, 1});  // [B, nd,nh,nw, wd,wh,ww, C]
    return reshape(t, {B * nd * nh * nw, win.tokens(), C});
}

// Sequence-to-Volume: exact inverse of v2s
template <class S>
Tensor<S> s2v(const Tensor<S>& seq, const Window3& win, const Shape& volume_shape) {
    PH_CHECK(volume_shape.size() == 5, "s2v: volume_shape must be [B,C,D,H,W]");
    int64_t B = volume_shape[0], C = volume_shape[1], D = volume_shape[2], H = volume_shape[3], W = volume_shape[4];
    int64_t nd = D / win.d, nh = H / win.h, nw = W / win.w;
    PH_CHECK(seq.dim() == 3 && seq.size(0) == B * nd * nh * nw && seq.size(1) == win.tokens() && seq.size(2) == C,
             "s2v: sequence shape ", shape_str(seq.shape()), " inconsistent with volume ", shape_str(volume_shape),
             " and window [", win.d, ",", win.h, ",", win.w, "]");
    Tensor<S> t = reshape(seq, {B, nd, nh, nw, win.d, win.h, win.w, C});
    t = permute(t, {0, 7, 1, 4, 2, 5, 3, 6});  // [B, C, nd, wd, nh, wh, nw, ww]
    return reshape(t, {B, C, D, H, W});
}

// Additive attention mask for shifted windows. Windows are taken on the
// volume rolled by -shift; token pairs whose source regions differ get a
// large negative value. Returns [N, L, L].
template <class S>
Tensor<S> shift_mask(const Shape& spatial, const Window3& win, const std::vector<int64_t>& shift) {
    PH_CHECK(spatial.size() == 3 && shift.size() == 3, "shift_mask: need 3 spatial extents and 3 shifts");
    int64_t D = spatial[0], H = spatial[1], W = spatial[2];
    for (int i = 0; i < 3; ++i) {
        int64_t w = i == 0 ? win.d : (i == 1 ? win.h : win.w);
        PH_CHECK(shift[size_t(i)] >= 0 && shift[size_t(i)] < w, "shift_mask: shift must satisfy 0 <= s < window");
    }
    int64_t nd = D / win.d, nh = H / win.h, nw = W / win.w, N = nd * nh * nw, L = win.tokens();
    Tensor<S> mask = Tensor<S>::zeros({N, L, L});
    if (shift[0] == 0 && shift[1] == 0 && shift[2] == 0) return mask;

    // region id per axis on rolled coordinates: [0,E-w) -> 0, [E-w,E-s) -> 1, [E-s,E) -> 2
    auto axis_id = [](int64_t pos, int64_t E, int64_t w, int64_t s) -> int64_t {
        if (pos < E - w) return 0;
        if (pos < E - s) return 1;
        return 2;
    };
    std::vector<int64_t> ids(size_t(N * L));
    for (int64_t d = 0; d < D; ++d)
        for (int64_t h = 0; h < H; ++h)
            for (int64_t w = 0; w < W; ++w) {
                int64_t id = axis_id(d, D, win.d, shift[0]) * 9 + axis_id(h, H, win.h, shift[1]) * 3 +
                             axis_id(w, W, win.w, shift[2]);
                int64_t n = (d / win.d) * nh * nw + (h / win.h) * nw + (w / win.w);
                int64_t t = (d % win.d) * win.h * win.w + (h % win.h) * win.w + (w % win.w);
                ids[size_t(n * L + t)] = id;
            }
    auto mv = mask.values();
    for (int64_t n = 0; n < N; ++n)
        for (int64_t i = 0; i < L; ++i)
            for (int64_t j = 0; j < L; ++j)
                if (ids[size_t(n * L + i)] != ids[size_t(n * L + j)]) mv[size_t((n * L + i) * L + j)] = S(-1e9);
    return mask;
}

namespace detail {

// out[h,i,j] = table[h, idx[i*L+j]]; gradient scatter-adds into the table
template <class S>
Tensor<S> relpos_gather(const Tensor<S>& table, const std::shared_ptr<std::vector<int64_t>>& idx, int64_t L) {
    int64_t hh = table.size(0);
    Tensor<S> out = Tensor<S>::zeros({hh, L, L});
    auto tv = table.values();
    auto ov = out.values();
    int64_t T = table.size(1);
    for (int64_t h = 0; h < hh; ++h)
        for (int64_t p = 0; p < L * L; ++p) ov[size_t(h * L * L + p)] = tv[size_t(h * T + (*idx)[size_t(p)])];
    if (tracing(table)) {
        out.set_requires_grad(true);
        Tape<S>::active().record([ti = table.impl(), oi = out.impl(), idx, L, hh, T] {
            if (oi->grad.empty() || !ti->requires_grad) return;
            ti->ensure_grad();
            for (int64_t h = 0; h < hh; ++h)
                for (int64_t p = 0; p < L * L; ++p)
                    ti->grad[size_t(h * T + (*idx)[size_t(p)])] += oi->grad[size_t(h * L * L + p)];
        });
    }
    return out;
}

// scores [BN,h,L,L] += bias [h,L,L] (broadcast over the batch-window axis)
template <class S>
Tensor<S> add_head_bias(const Tensor<S>& scores, const Tensor<S>& bias) {
    int64_t BN = scores.size(0), block = scores.numel() / BN;
    PH_CHECK(bias.numel() == block, "add_head_bias: bias shape mismatch");
    Tensor<S> out = Tensor<S>::zeros(scores.shape());
    auto sv = scores.values();
    auto bv = bias.values();
    auto ov = out.values();
    for (int64_t r = 0; r < BN; ++r)
        for (int64_t i = 0; i < block; ++i) ov[size_t(r * block + i)] = sv[size_t(r * block + i)] + bv[size_t(i)];
    if (tracing(scores, bias)) {
        out.set_requires_grad(true);
        Tape<S>::active().record([si = scores.impl(), bi = bias.impl(), oi = out.impl(), BN, block] {
            if (oi->grad.empty()) return;
            if (si->requires_grad) {
                si->ensure_grad();
                for (size_t i = 0; i < oi->grad.size(); ++i) si->grad[i] += oi->grad[i];
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (int64_t r = 0; r < BN; ++r)
                    for (int64_t i = 0; i < block; ++i) bi->grad[size_t(i)] += oi->grad[size_t(r * block + i)];
            }
        });
    }
    return out;
}

// scores [B*N,h,L,L] += mask [N,L,L] (mask constant; broadcast over batch and heads)
template <class S>
Tensor<S> add_window_mask(const Tensor<S>& scores, const Tensor<S>& mask) {
    int64_t BN = scores.size(0), h = scores.size(1), L = scores.size(2);
    int64_t N = mask.size(0);
    PH_CHECK(BN % N == 0 && mask.size(1) == L && mask.size(2) == L, "add_window_mask: mask shape mismatch");
    Tensor<S> out = Tensor<S>::zeros(scores.shape());
    auto sv = scores.values();
    auto mv = mask.values();
    auto ov = out.values();
    for (int64_t bn = 0; bn < BN; ++bn) {
        const S* m = mv.data() + (bn % N) * L * L;
        for (int64_t hh = 0; hh < h; ++hh) {
            int64_t base = (bn * h + hh) * L * L;
            for (int64_t p = 0; p < L * L; ++p) ov[size_t(base + p)] = sv[size_t(base + p)] + m[p];
        }
    }
    if (tracing(scores)) {
        out.set_requires_grad(true);
        Tape<S>::active().record([si = scores.impl(), oi = out.impl()] {
            if (oi->grad.empty() || !si->requires_grad) return;
            si->ensure_grad();
            for (size_t i = 0; i < oi->grad.size(); ++i) si->grad[i] += oi->grad[i];
        });
    }
    return out;
}

}  // namespace detail

// Shifted-window multi-head self-attention over per-window token sequences.
template <class S>
struct WindowAttention {
    int64_t channels = 0, heads = 1;
    Window3 window;
    bool position_bias = true;
    Linear<S> qkv, proj;
    Tensor<S> relpos_table;                          // [heads, (2wd-1)(2wh-1)(2ww-1)]
    std::shared_ptr<std::vector<int64_t>> relpos_index;  // [L*L]

    WindowAttention() = default;
    WindowAttention(int64_t channels_, int64_t heads_, Window3 window_, bool position_bias_ = true)
        : channels(channels_), heads(heads_), window(window_), position_bias(position_bias_),
          qkv(channels_, 3 * channels_), proj(channels_, channels_) {
        PH_CHECK(channels % heads == 0, "window attention: channel count ", channels, " not divisible by ", heads,
                 " heads");
        int64_t td = 2 * window.d - 1, th = 2 * window.h - 1, tw = 2 * window.w - 1;
        relpos_table = Tensor<S>::zeros({heads, td * th * tw}, true);
        int64_t L = window.tokens();
        relpos_index = std::make_shared<std::vector<int64_t>>(size_t(L * L));
        auto coord = [&](int64_t t) {
            return std::array<int64_t, 3>{t / (window.h * window.w), (t / window.w) % window.h, t % window.w};
        };
        for (int64_t i = 0; i < L; ++i)
            for (int64_t j = 0; j < L; ++j) {
                auto a = coord(i), b = coord(j);
                int64_t rd = a[0] - b[0] + window.d - 1;
                int64_t rh = a[1] - b[1] + window.h - 1;
                int64_t rw = a[2] - b[2] + window.w - 1;
                (*relpos_index)[size_t(i * L + j)] = (rd * th + rh) * tw + rw;
            }
    }

    // seq: [B*N, L, C]; mask: optional [N, L, L]
    Tensor<S> forward(const Tensor<S>& seq, const Tensor<S>& mask) const {
        int64_t BN = seq.size(0), L = seq.size(1), C = seq.size(2);
        PH_CHECK(C == channels, "window attention: channel mismatch");
        PH_CHECK(L == window.tokens(), "window attention: token count mismatch");
        int64_t d = C / heads;
        Tensor<S> qkv_out = qkv.forward(seq);                       // [BN, L, 3C]
        Tensor<S> t = reshape(qkv_out, {BN, L, 3, heads, d});
        t = permute(t, {2, 0, 3, 1, 4});                            // [3, BN, h, L, d]
        auto take = [&](int64_t which) {
            return reshape(crop(t, {which, 0, 0, 0, 0}, {1, BN, heads, L, d}), {BN, heads, L, d});
        };
        Tensor<S> q = take(0), k = take(1), v = take(2);
        q = scale(q, S(1.0 / std::sqrt(double(d))));
        Tensor<S> scores = matmul(q, permute(k, {0, 1, 3, 2}));     // [BN, h, L, L]
        if (position_bias) scores = detail::add_head_bias(scores, detail::relpos_gather(relpos_table, relpos_index, L));
        if (mask.defined()) scores = detail::add_window_mask(scores, mask);
        Tensor<S> attn = softmax(scores, 3);
        Tensor<S> ctx = matmul(attn, v);                            // [BN, h, L, d]
        ctx = reshape(permute(ctx, {0, 2, 1, 3}), {BN, L, C});
        return proj.forward(ctx);
    }

    void collect(const std::string& prefix, ParamList<S>& out) {
        qkv.collect(prefix + ".qkv", out);
        proj.collect(prefix + ".proj", out);
        if (position_bias) out.push_back({prefix + ".relpos", relpos_table, InitKind::Zero, 0});
    }
};

// free-function form mirroring the operation contract
template <class S>
Tensor<S> window_msa(const Tensor<S>& seq, const WindowAttention<S>& attn, const Tensor<S>& mask) {
    return attn.forward(seq, mask);
}

}  // namespace phtrans
