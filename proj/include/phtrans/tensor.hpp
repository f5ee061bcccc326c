#pragma once

#include <memory>
#include <numeric>
#include <span>

#include "phtrans/common.hpp"

namespace phtrans {

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& s) {
    int64_t n = 1;
    for (int64_t e : s) n *= e;
    return n;
}

inline Shape strides_of(const Shape& s) {
    Shape st(s.size(), 1);
    for (int i = int(s.size()) - 2; i >= 0; --i) st[size_t(i)] = st[size_t(i) + 1] * s[size_t(i) + 1];
    return st;
}

template <class S>
struct TensorImpl {
    Shape shape;
    std::vector<S> value;
    std::vector<S> grad;  // same length as value once touched, else empty
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), S(0));
    }
};

// Dense row-major tensor handle. Copying a Tensor shares the underlying
// node; ops produce fresh nodes. Values are immutable once produced by an
// op except for parameter buffers updated by the optimizer.
template <class S>
class Tensor {
  public:
    using Scalar = S;

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        Tensor t;
        t.impl_ = std::make_shared<TensorImpl<S>>();
        t.impl_->shape = std::move(shape);
        t.impl_->value.assign(size_t(numel_of(t.impl_->shape)), S(0));
        t.impl_->requires_grad = requires_grad;
        return t;
    }

    static Tensor full(Shape shape, S v, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        std::fill(t.impl_->value.begin(), t.impl_->value.end(), v);
        return t;
    }

    static Tensor from_data(Shape shape, std::vector<S> data, bool requires_grad = false) {
        PH_CHECK(numel_of(shape) == int64_t(data.size()), "from_data: shape ", shape_str(shape),
                 " does not match data length ", data.size());
        Tensor t;
        t.impl_ = std::make_shared<TensorImpl<S>>();
        t.impl_->shape = std::move(shape);
        t.impl_->value = std::move(data);
        t.impl_->requires_grad = requires_grad;
        return t;
    }

    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (auto& v : t.impl_->value) v = S(rng.normal() * stddev);
        return t;
    }

    static Tensor scalar(S v, bool requires_grad = false) { return full({1}, v, requires_grad); }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int64_t dim() const { return int64_t(impl_->shape.size()); }
    int64_t size(int64_t axis) const { return impl_->shape[size_t(axis)]; }
    int64_t numel() const { return int64_t(impl_->value.size()); }

    std::span<S> values() { return impl_->value; }
    std::span<const S> values() const { return impl_->value; }
    S item() const {
        PH_CHECK(numel() == 1, "item() on tensor of ", numel(), " elements");
        return impl_->value[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool b) {
        impl_->requires_grad = b;
        return *this;
    }

    std::span<S> grad() {
        impl_->ensure_grad();
        return impl_->grad;
    }
    bool has_grad() const { return !impl_->grad.empty(); }
    void zero_grad() {
        if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), S(0));
    }

    std::shared_ptr<TensorImpl<S>> impl() const { return impl_; }

  private:
    std::shared_ptr<TensorImpl<S>> impl_;
};

// Execution-ordered record of differentiable operations. Ops append a
// backward closure as they run; backward() replays them in reverse, which
// visits every producer after all of its consumers. The tape is cleared by
// backward(), so a second backward without new forward work is an error.
template <class S>
class Tape {
  public:
    using BackFn = std::function<void()>;

    static Tape& active() {
        static thread_local Tape tape;
        return tape;
    }

    bool recording() const { return pause_depth_ == 0; }
    void record(BackFn fn) { ops_.push_back(std::move(fn)); }
    size_t size() const { return ops_.size(); }
    void clear() { ops_.clear(); }

    void backward(Tensor<S> loss) {
        PH_CHECK(loss.numel() == 1, "backward: loss must be scalar, got shape ", shape_str(loss.shape()));
        PH_CHECK(!ops_.empty(), "backward: tape is empty (already consumed or nothing recorded)");
        loss.impl()->ensure_grad();
        loss.impl()->grad[0] += S(1);
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
        ops_.clear();
    }

    struct PauseGuard {
        PauseGuard() { ++Tape::active().pause_depth_; }
        ~PauseGuard() { --Tape::active().pause_depth_; }
        PauseGuard(const PauseGuard&) = delete;
        PauseGuard& operator=(const PauseGuard&) = delete;
    };

  private:
    std::vector<BackFn> ops_;
    int pause_depth_ = 0;
};

template <class S>
using NoGrad = typename Tape<S>::PauseGuard;

template <class S>
inline bool tracing(const Tensor<S>& a) {
    return Tape<S>::active().recording() && a.requires_grad();
}

template <class S>
inline bool tracing(const Tensor<S>& a, const Tensor<S>& b) {
    return Tape<S>::active().recording() && (a.requires_grad() || b.requires_grad());
}

// accumulate src into dst grad if the node wants gradients and the upstream
// grad buffer was actually populated
template <class S>
inline void backward_guard(const std::shared_ptr<TensorImpl<S>>& out, const std::function<void()>& fn) {
    if (!out->grad.empty()) fn();
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

namespace detail {

template <class S, class FwdFn, class BckFn>
Tensor<S> binary_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* name, FwdFn fwd, BckFn bck) {
    PH_CHECK(a.shape() == b.shape(), name, ": shape mismatch ", shape_str(a.shape()), " vs ", shape_str(b.shape()));
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    auto av = a.values();
    auto bv = b.values();
    auto ov = out.values();
    for (int64_t i = 0; i < out.numel(); ++i) ov[size_t(i)] = fwd(av[size_t(i)], bv[size_t(i)]);
    if (tracing(a, b)) {
        out.set_requires_grad(true);
        Tape<S>::active().record([ai = a.impl(), bi = b.impl(), oi = out.impl(), bck] {
            if (oi->grad.empty()) return;
            bck(*ai, *bi, *oi);
        });
    }
    return out;
}

}  // namespace detail

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    return detail::binary_same_shape(
        a, b, "add", [](S x, S y) { return x + y; },
        [](TensorImpl<S>& ai, TensorImpl<S>& bi, TensorImpl<S>& oi) {
            if (ai.requires_grad) {
                ai.ensure_grad();
                for (size_t i = 0; i < oi.grad.size(); ++i) ai.grad[i] += oi.grad[i];
            }
            if (bi.requires_grad) {
                bi.ensure_grad();
                for (size_t i = 0; i < oi.grad.size(); ++i) bi.grad[i] += oi.grad[i];
            }
        });
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    return detail::binary_same_shape(
        a, b, "sub", [](S x, S y) { return x - y; },
        [](TensorImpl<S>& ai, TensorImpl<S>& bi, TensorImpl<S>& oi) {
            if (ai.requires_grad) {
                ai.ensure_grad();
                for (size_t i = 0; i < oi.grad.size(); ++i) ai.grad[i] += oi.grad[i];
            }
            if (bi.requires_grad) {
                bi.ensure_grad();
                for (size_t i = 0; i < oi.grad.size(); ++i) bi.grad[i] -= oi.grad[i];
            }
        });
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    return detail::binary_same_shape(
        a, b, "mul", [](S x, S y) { return x * y; },
        [](TensorImpl<S>& ai, TensorImpl<S>& bi, TensorImpl<S>& oi) {
            if (ai.requires_grad) {
                ai.ensure_grad();
                for (size_t i = 0; i < oi.grad.size(); ++i) ai.grad[i] += oi.grad[i] * bi.value[i];
            }
            if (bi.requires_grad) {
                bi.ensure_grad();
                for (size_t i = 0; i < oi.grad.size(); ++i) bi.grad[i] += oi.grad[i] * ai.value[i];
            }
        });
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, S c) {
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    auto av = a.values();
    auto ov = out.values();
    for (int64_t i = 0; i < out.numel(); ++i) ov[size_t(i)] = av[size_t(i)] * c;
    if (tracing(a)) {
        out.set_requires_grad(true);
        Tape<S>::active().record([ai = a.impl(), oi = out.impl(), c] {
            if (oi->grad.empty() || !ai->requires_grad) return;
            ai->ensure_grad();
            for (size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i] * c;
        });
    }
    return out;
}

template <class S>
Tensor<S> add(const Tensor<S>& a, S c) {
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    auto av = a.values();
    auto ov = out.values();
    for (int64_t i = 0; i < out.numel(); ++i) ov[size_t(i)] = av[size_t(i)] + c;
    if (tracing(a)) {
        out.set_requires_grad(true);
        Tape<S>::active().record([ai = a.impl(), oi = out.impl()] {
            if (oi->grad.empty() || !ai->requires_grad) return;
            ai->ensure_grad();
            for (size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i];
        });
    }
    return out;
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, S c) {
    return add(a, S(-c));
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> sum(const Tensor<S>& a) {
    double acc = 0;  // accumulate reductions in double regardless of S
    for (S v : a.values()) acc += double(v);
    Tensor<S> out = Tensor<S>::scalar(S(acc));
    if (tracing(a)) {
        out.set_requires_grad(true);
        Tape<S>::active().record([ai = a.impl(), oi = out.impl()] {
            if (oi->grad.empty() || !ai->requires_grad) return;
            ai->ensure_grad();
            S g = oi->grad[0];
            for (auto& x : ai->grad) x += g;
        });
    }
    return out;
}

template <class S>
Tensor<S> mean(const Tensor<S>& a) {
    return scale(sum(a), S(1) / S(a.numel()));
}

// dot(u, a) / n with a fixed weight vector; used as a well-scaled scalarizer
template <class S>
Tensor<S> weighted_mean(const Tensor<S>& a, const std::vector<S>& w) {
    PH_CHECK(int64_t(w.size()) == a.numel(), "weighted_mean: weight length mismatch");
    double acc = 0;
    auto av = a.values();
    for (size_t i = 0; i < w.size(); ++i) acc += double(av[i]) * double(w[i]);
    acc /= double(a.numel());
    Tensor<S> out = Tensor<S>::scalar(S(acc));
    if (tracing(a)) {
        out.set_requires_grad(true);
        Tape<S>::active().record([ai = a.impl(), oi = out.impl(), w] {
            if (oi->grad.empty() || !ai->requires_grad) return;
            ai->ensure_grad();
            S g = oi->grad[0] / S(ai->value.size());
            for (size_t i = 0; i < w.size(); ++i) ai->grad[i] += g * w[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// view ops: reshape / permute / pad / crop / concat
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
    PH_CHECK(numel_of(shape) == a.numel(), "reshape: element count mismatch ", shape_str(a.shape()), " -> ",
             shape_str(shape));
    Tensor<S> out = Tensor<S>::from_data(std::move(shape), std::vector<S>(a.values().begin(), a.values().end()));
    if (tracing(a)) {
        out.set_requires_grad(true);
        Tape<S>::active().record([ai = a.impl(), oi = out.impl()] {
            if (oi->grad.empty() || !ai->requires_grad) return;
            ai->ensure_grad();
            for (size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i];
        });
    }
    return out;
}

namespace detail {
template <class S>
void permute_copy(const Shape& in_shape, const std::vector<int>& axes, std::span<const S> src, std::span<S> dst) {
    // dst walked linearly; each dst index gathers from its source position
    size_t nd = in_shape.size();
    Shape out_shape(nd);
    for (size_t i = 0; i < nd; ++i) out_shape[i] = in_shape[size_t(axes[i])];
    Shape in_strides = strides_of(in_shape);
    Shape out_strides = strides_of(out_shape);
    std::vector<int64_t> src_stride_for_out(nd);
    for (size_t i = 0; i < nd; ++i) src_stride_for_out[i] = in_strides[size_t(axes[i])];
    int64_t n = 1;
    for (auto e : out_shape) n *= e;
    parallel_for(
        n,
        [&](int64_t di) {
            int64_t rem = di, si = 0;
            for (size_t ax = 0; ax < nd; ++ax) {
                int64_t idx = rem / out_strides[ax];
                rem -= idx * out_strides[ax];
                si += idx * src_stride_for_out[ax];
            }
            dst[size_t(di)] = src[size_t(si)];
        },
        4096);
}
}  // namespace detail

template <class S>
Tensor<S> permute(const Tensor<S>& a, std::vector<int> axes) {
    size_t nd = a.shape().size();
    PH_CHECK(axes.size() == nd, "permute: axes size mismatch");
    std::vector<bool> seen(nd, false);
    for (int ax : axes) {
        PH_CHECK(ax >= 0 && size_t(ax) < nd && !seen[size_t(ax)], "permute: invalid axis permutation");
        seen[size_t(ax)] = true;
    }
    Shape out_shape(nd);
    for (size_t i = 0; i < nd; ++i) out_shape[i] = a.shape()[size_t(axes[i])];
    Tensor<S> out = Tensor<S>::zeros(out_shape);
    detail::permute_copy<S>(a.shape(), axes, a.values(), out.values());
    if (tracing(a)) {
        out.set_requires_grad(true);
        // inverse permutation routes gradients back
        std::vector<int> inv(nd);
        for (size_t i = 0; i < nd; ++i) inv[size_t(axes[i])] = int(i);
        Tape<S>::active().record([ai = a.impl(), oi = out.impl(), inv] {
            if (oi->grad.empty() || !ai->requires_grad) return;
            ai->ensure_grad();
            std::vector<S> tmp(ai->grad.size());
            detail::permute_copy<S>(oi->shape, inv, std::span<const S>(oi->grad), std::span<S>(tmp));
            for (size_t i = 0; i < tmp.size(); ++i) ai->grad[i] += tmp[i];
        });
    }
    return out;
}

// pad with zeros: lo/hi padding per axis
template <class S>
Tensor<S> pad_zero(const Tensor<S>& a, const std::vector<int64_t>& lo, const std::vector<int64_t>& hi) {
    size_t nd = a.shape().size();
    PH_CHECK(lo.size() == nd && hi.size() == nd, "pad_zero: padding rank mismatch");
    Shape out_shape(nd);
    for (size_t i = 0; i < nd; ++i) {
        PH_CHECK(lo[i] >= 0 && hi[i] >= 0, "pad_zero: negative padding");
        out_shape[i] = a.shape()[i] + lo[i] + hi[i];
    }
    Tensor<S> out = Tensor<S>::zeros(out_shape);
    Shape in_strides = strides_of(a.shape());
    Shape out_strides = strides_of(out_shape);
    auto av = a.values();
    auto ov = out.values();
    for (int64_t si = 0; si < a.numel(); ++si) {
        int64_t rem = si, di = 0;
        for (size_t ax = 0; ax < nd; ++ax) {
            int64_t idx = rem / in_strides[ax];
            rem -= idx * in_strides[ax];
            di += (idx + lo[ax]) * out_strides[ax];
        }
        ov[size_t(di)] = av[size_t(si)];
    }
    if (tracing(a)) {
        out.set_requires_grad(true);
        Tape<S>::active().record([ai = a.impl(), oi = out.impl(), in_strides, out_strides, lo, nd] {
            if (oi->grad.empty() || !ai->requires_grad) return;
            ai->ensure_grad();
            for (int64_t si = 0; si < int64_t(ai->value.size()); ++si) {
                int64_t rem = si, di = 0;
                for (size_t ax = 0; ax < nd; ++ax) {
                    int64_t idx = rem / in_strides[ax];
                    rem -= idx * in_strides[ax];
                    di += (idx + lo[ax]) * out_strides[ax];
                }
                ai->grad[size_t(si)] += oi->grad[size_t(di)];
            }
        });
    }
    return out;
}

// crop [lo, lo+extent) per axis
template <class S>
Tensor<S> crop(const Tensor<S>& a, const std::vector<int64_t>& lo, const Shape& extent) {
    size_t nd = a.shape().size();
    PH_CHECK(lo.size() == nd && extent.size() == nd, "crop: rank mismatch");
    for (size_t i = 0; i < nd; ++i)
        PH_CHECK(lo[i] >= 0 && extent[i] >= 1 && lo[i] + extent[i] <= a.shape()[i], "crop: bounds out of range on axis ",
                 i, " (lo=", lo[i], ", extent=", extent[i], ", size=", a.shape()[i], ")");
    Tensor<S> out = Tensor<S>::zeros(extent);
    Shape in_strides = strides_of(a.shape());
    Shape out_strides = strides_of(extent);
    auto av = a.values();
    auto ov = out.values();
    for (int64_t di = 0; di < out.numel(); ++di) {
        int64_t rem = di, si = 0;
        for (size_t ax = 0; ax < nd; ++ax) {
            int64_t idx = rem / out_strides[ax];
            rem -= idx * out_strides[ax];
            si += (idx + lo[ax]) * in_strides[ax];
        }
        ov[size_t(di)] = av[size_t(si)];
    }
    if (tracing(a)) {
        out.set_requires_grad(true);
        Tape<S>::active().record([ai = a.impl(), oi = out.impl(), in_strides, out_strides, lo, nd] {
            if (oi->grad.empty() || !ai->requires_grad) return;
            ai->ensure_grad();
            for (int64_t di = 0; di < int64_t(oi->value.size()); ++di) {
                int64_t rem = di, si = 0;
                for (size_t ax = 0; ax < nd; ++ax) {
                    int64_t idx = rem / out_strides[ax];
                    rem -= idx * out_strides[ax];
                    si += (idx + lo[ax]) * in_strides[ax];
                }
                ai->grad[size_t(si)] += oi->grad[size_t(di)];
            }
        });
    }
    return out;
}

// concatenate along an axis (gradient = split)
template <class S>
Tensor<S> concat(const Tensor<S>& a, const Tensor<S>& b, int axis) {
    size_t nd = a.shape().size();
    PH_CHECK(b.shape().size() == nd && axis >= 0 && size_t(axis) < nd, "concat: rank/axis mismatch");
    for (size_t i = 0; i < nd; ++i)
        if (int(i) != axis)
            PH_CHECK(a.shape()[i] == b.shape()[i], "concat: shapes differ on non-concat axis ", i, ": ",
                     shape_str(a.shape()), " vs ", shape_str(b.shape()));
    Shape out_shape = a.shape();
    out_shape[size_t(axis)] += b.shape()[size_t(axis)];
    Tensor<S> out = Tensor<S>::zeros(out_shape);

    // copy block-wise: outer = product of dims before axis, inner = product after
    int64_t outer = 1, inner = 1;
    for (size_t i = 0; i < size_t(axis); ++i) outer *= a.shape()[i];
    for (size_t i = size_t(axis) + 1; i < nd; ++i) inner *= a.shape()[i];
    int64_t a_len = a.shape()[size_t(axis)] * inner;
    int64_t b_len = b.shape()[size_t(axis)] * inner;
    auto av = a.values();
    auto bv = b.values();
    auto ov = out.values();
    for (int64_t o = 0; o < outer; ++o) {
        std::copy_n(av.begin() + o * a_len, a_len, ov.begin() + o * (a_len + b_len));
        std::copy_n(bv.begin() + o * b_len, b_len, ov.begin() + o * (a_len + b_len) + a_len);
    }
    if (tracing(a, b)) {
        out.set_requires_grad(true);
        Tape<S>::active().record([ai = a.impl(), bi = b.impl(), oi = out.impl(), outer, a_len, b_len] {
            if (oi->grad.empty()) return;
            if (ai->requires_grad) {
                ai->ensure_grad();
                for (int64_t o = 0; o < outer; ++o)
                    for (int64_t i = 0; i < a_len; ++i) ai->grad[size_t(o * a_len + i)] += oi->grad[size_t(o * (a_len + b_len) + i)];
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (int64_t o = 0; o < outer; ++o)
                    for (int64_t i = 0; i < b_len; ++i)
                        bi->grad[size_t(o * b_len + i)] += oi->grad[size_t(o * (a_len + b_len) + a_len + i)];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// cyclic roll over chosen axes (shifts normalized mod extent)
// ---------------------------------------------------------------------------

namespace detail {
template <class S>
void roll_copy(const Shape& shape, const std::vector<int64_t>& shift, std::span<const S> src, std::span<S> dst) {
    size_t nd = shape.size();
    Shape strides = strides_of(shape);
    int64_t n = 1;
    for (auto e : shape) n *= e;
    parallel_for(
        n,
        [&](int64_t di) {
            int64_t rem = di, si = 0;
            for (size_t ax = 0; ax < nd; ++ax) {
                int64_t idx = rem / strides[ax];
                rem -= idx * strides[ax];
                int64_t sidx = idx - shift[ax];
                sidx %= shape[ax];
                if (sidx < 0) sidx += shape[ax];
                si += sidx * strides[ax];
            }
            dst[size_t(di)] = src[size_t(si)];
        },
        4096);
}
}  // namespace detail

// shifts has one entry per axis; dst[i] = src[i - shift mod extent]
template <class S>
Tensor<S> cyclic_roll(const Tensor<S>& a, const std::vector<int64_t>& shifts) {
    size_t nd = a.shape().size();
    PH_CHECK(shifts.size() == nd, "cyclic_roll: one shift per axis required");
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    detail::roll_copy<S>(a.shape(), shifts, a.values(), out.values());
    if (tracing(a)) {
        out.set_requires_grad(true);
        std::vector<int64_t> neg(nd);
        for (size_t i = 0; i < nd; ++i) neg[i] = -shifts[i];
        Tape<S>::active().record([ai = a.impl(), oi = out.impl(), neg] {
            if (oi->grad.empty() || !ai->requires_grad) return;
            ai->ensure_grad();
            std::vector<S> tmp(ai->grad.size());
            detail::roll_copy<S>(oi->shape, neg, std::span<const S>(oi->grad), std::span<S>(tmp));
            for (size_t i = 0; i < tmp.size(); ++i) ai->grad[i] += tmp[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// softmax over one axis, max-stabilized
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> softmax(const Tensor<S>& a, int axis) {
    size_t nd = a.shape().size();
    PH_CHECK(axis >= 0 && size_t(axis) < nd, "softmax: axis out of range");
    int64_t n = a.shape()[size_t(axis)];
    int64_t inner = 1, outer = 1;
    for (size_t i = size_t(axis) + 1; i < nd; ++i) inner *= a.shape()[i];
    for (size_t i = 0; i < size_t(axis); ++i) outer *= a.shape()[i];

    Tensor<S> out = Tensor<S>::zeros(a.shape());
    auto av = a.values();
    auto ov = out.values();
    parallel_for(
        outer * inner,
        [&](int64_t oi_) {
            int64_t o = oi_ / inner, in = oi_ % inner;
            int64_t base = o * n * inner + in;
            S mx = av[size_t(base)];
            for (int64_t k = 1; k < n; ++k) mx = std::max(mx, av[size_t(base + k * inner)]);
            S denom = 0;
            for (int64_t k = 0; k < n; ++k) {
                S e = std::exp(av[size_t(base + k * inner)] - mx);
                ov[size_t(base + k * inner)] = e;
                denom += e;
            }
            for (int64_t k = 0; k < n; ++k) ov[size_t(base + k * inner)] /= denom;
        },
        256);

    if (tracing(a)) {
        out.set_requires_grad(true);
        Tape<S>::active().record([ai = a.impl(), oi = out.impl(), n, inner, outer] {
            if (oi->grad.empty() || !ai->requires_grad) return;
            ai->ensure_grad();
            // dx_k = y_k * (g_k - sum_j g_j y_j)
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t in = 0; in < inner; ++in) {
                    int64_t base = o * n * inner + in;
                    S dot = 0;
                    for (int64_t k = 0; k < n; ++k) dot += oi->grad[size_t(base + k * inner)] * oi->value[size_t(base + k * inner)];
                    for (int64_t k = 0; k < n; ++k)
                        ai->grad[size_t(base + k * inner)] +=
                            oi->value[size_t(base + k * inner)] * (oi->grad[size_t(base + k * inner)] - dot);
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// GELU (tanh approximation by default; exact erf behind a flag)
// ---------------------------------------------------------------------------

inline bool& gelu_use_erf() {
    static bool v = false;
    return v;
}

template <class S>
Tensor<S> gelu(const Tensor<S>& a) {
    const bool erf_mode = gelu_use_erf();
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    auto av = a.values();
    auto ov = out.values();
    constexpr double kC = 0.7978845608028653558798921198687;  // sqrt(2/pi)
    constexpr double kA = 0.044715;
    parallel_for(
        a.numel(),
        [&](int64_t i) {
            double x = double(av[size_t(i)]);
            if (erf_mode) {
                ov[size_t(i)] = S(0.5 * x * (1.0 + std::erf(x * 0.70710678118654752440)));
            } else {
                double t = std::tanh(kC * (x + kA * x * x * x));
                ov[size_t(i)] = S(0.5 * x * (1.0 + t));
            }
        },
        4096);
    if (tracing(a)) {
        out.set_requires_grad(true);
        Tape<S>::active().record([ai = a.impl(), oi = out.impl(), erf_mode] {
            if (oi->grad.empty() || !ai->requires_grad) return;
            ai->ensure_grad();
            for (size_t i = 0; i < oi->grad.size(); ++i) {
                double x = double(ai->value[i]);
                double d;
                if (erf_mode) {
                    d = 0.5 * (1.0 + std::erf(x * 0.70710678118654752440)) +
                        x * std::exp(-0.5 * x * x) * 0.39894228040143267794;
                } else {
                    double u = kC * (x + kA * x * x * x);
                    double t = std::tanh(u);
                    d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kC * (1.0 + 3.0 * kA * x * x);
                }
                ai->grad[i] += oi->grad[i] * S(d);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// batched matmul with broadcasting over leading axes
// ---------------------------------------------------------------------------

namespace detail {

// contiguous [m,k] x [k,n] -> [m,n], accumulating (dst += a*b) when acc
template <class S>
void gemm(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n, bool acc, bool par = true) {
    auto body = [&](int64_t i) {
        const S* arow = a + i * k;
        S* crow = c + i * n;
        if (!acc) std::fill(crow, crow + n, S(0));
        for (int64_t kk = 0; kk < k; ++kk) {
            S av = arow[kk];
            if (av == S(0)) continue;
            const S* brow = b + kk * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    };
    if (par)
        parallel_for(m, body, std::max<int64_t>(1, 16384 / std::max<int64_t>(1, n)));
    else
        for (int64_t i = 0; i < m; ++i) body(i);
}

// C += A^T * B with A [m,k], B [m,n] -> C [k,n]
template <class S>
void gemm_at_b(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const S* arow = a + i * k;
        const S* brow = b + i * n;
        for (int64_t kk = 0; kk < k; ++kk) {
            S av = arow[kk];
            if (av == S(0)) continue;
            S* crow = c + kk * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C += A * B^T with A [m,n], B [k,n] -> C [m,k]
template <class S>
void gemm_a_bt(const S* a, const S* b, S* c, int64_t m, int64_t n, int64_t k) {
    for (int64_t i = 0; i < m; ++i) {
        const S* arow = a + i * n;
        S* crow = c + i * k;
        for (int64_t kk = 0; kk < k; ++kk) {
            const S* brow = b + kk * n;
            S accv = 0;
            for (int64_t j = 0; j < n; ++j) accv += arow[j] * brow[j];
            crow[kk] += accv;
        }
    }
}

inline Shape broadcast_batch(const Shape& a, const Shape& b) {
    size_t nd = std::max(a.size(), b.size());
    Shape out(nd, 1);
    for (size_t i = 0; i < nd; ++i) {
        int64_t av = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
        int64_t bv = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
        PH_CHECK(av == bv || av == 1 || bv == 1, "matmul: batch extents incompatible (", av, " vs ", bv, ")");
        out[i] = std::max(av, bv);
    }
    return out;
}

inline int64_t batch_offset(const Shape& batch, const Shape& own_batch, int64_t flat, int64_t mat_size) {
    // map flat broadcast-batch index to this operand's batch index
    if (own_batch.empty()) return 0;
    Shape bstr = strides_of(batch);
    int64_t off = 0;
    Shape ostr = strides_of(own_batch);
    size_t shift = batch.size() - own_batch.size();
    for (size_t i = 0; i < batch.size(); ++i) {
        int64_t idx = flat / bstr[i];
        flat -= idx * bstr[i];
        if (i >= shift && own_batch[i - shift] != 1) off += idx * ostr[i - shift];
    }
    return off * mat_size;
}

}  // namespace detail

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    PH_CHECK(a.dim() >= 2 && b.dim() >= 2, "matmul: operands must have >= 2 dims");
    int64_t m = a.shape()[size_t(a.dim() - 2)], k = a.shape()[size_t(a.dim() - 1)];
    int64_t k2 = b.shape()[size_t(b.dim() - 2)], n = b.shape()[size_t(b.dim() - 1)];
    PH_CHECK(k == k2, "matmul: inner dimensions disagree (", k, " vs ", k2, ") for ", shape_str(a.shape()), " x ",
             shape_str(b.shape()));
    Shape a_batch(a.shape().begin(), a.shape().end() - 2);
    Shape b_batch(b.shape().begin(), b.shape().end() - 2);
    Shape batch = detail::broadcast_batch(a_batch, b_batch);
    int64_t nbatch = numel_of(batch);

    Shape out_shape = batch;
    out_shape.push_back(m);
    out_shape.push_back(n);
    Tensor<S> out = Tensor<S>::zeros(out_shape);
    const S* ap = a.values().data();
    const S* bp = b.values().data();
    S* op = out.values().data();
    bool par_inner = nbatch == 1;
    parallel_for(
        nbatch,
        [&](int64_t bi) {
            int64_t ao = detail::batch_offset(batch, a_batch, bi, m * k);
            int64_t bo = detail::batch_offset(batch, b_batch, bi, k * n);
            detail::gemm(ap + ao, bp + bo, op + bi * m * n, m, k, n, false, par_inner);
        },
        1);

    if (tracing(a, b)) {
        out.set_requires_grad(true);
        Tape<S>::active().record([ai = a.impl(), bi_ = b.impl(), oi = out.impl(), a_batch, b_batch, batch, m, k, n,
                                  nbatch] {
            if (oi->grad.empty()) return;
            if (ai->requires_grad) ai->ensure_grad();
            if (bi_->requires_grad) bi_->ensure_grad();
            for (int64_t bidx = 0; bidx < nbatch; ++bidx) {
                int64_t ao = detail::batch_offset(batch, a_batch, bidx, m * k);
                int64_t bo = detail::batch_offset(batch, b_batch, bidx, k * n);
                const S* g = oi->grad.data() + bidx * m * n;
                if (ai->requires_grad)  // dA += G * B^T
                    detail::gemm_a_bt(g, bi_->value.data() + bo, ai->grad.data() + ao, m, n, k);
                if (bi_->requires_grad)  // dB += A^T * G
                    detail::gemm_at_b(ai->value.data() + ao, g, bi_->grad.data() + bo, m, k, n);
            }
        });
    }
    return out;
}

// y[..., j] = x[..., j] + b[j]  (bias broadcast over the last axis)
template <class S>
Tensor<S> add_rowvec(const Tensor<S>& x, const Tensor<S>& b) {
    PH_CHECK(b.dim() == 1 && b.numel() == x.shape().back(), "add_rowvec: bias length must equal last axis");
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    int64_t n = b.numel(), rows = x.numel() / n;
    auto xv = x.values();
    auto bv = b.values();
    auto ov = out.values();
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < n; ++j) ov[size_t(r * n + j)] = xv[size_t(r * n + j)] + bv[size_t(j)];
    if (tracing(x, b)) {
        out.set_requires_grad(true);
        Tape<S>::active().record([xi = x.impl(), bi = b.impl(), oi = out.impl(), rows, n] {
            if (oi->grad.empty()) return;
            if (xi->requires_grad) {
                xi->ensure_grad();
                for (size_t i = 0; i < oi->grad.size(); ++i) xi->grad[i] += oi->grad[i];
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t j = 0; j < n; ++j) bi->grad[size_t(j)] += oi->grad[size_t(r * n + j)];
            }
        });
    }
    return out;
}

// backward entry point mirroring the spec's operation list
template <class S>
void backward(Tensor<S> loss) {
    Tape<S>::active().backward(std::move(loss));
}

}  // namespace phtrans
