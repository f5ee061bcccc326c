#pragma once

#include "phtrans/tensor.hpp"

namespace phtrans {

// integer class map batch, laid out [B,D,H,W]
struct LabelMap {
    Shape shape;
    std::vector<int32_t> v;

    int64_t numel() const { return int64_t(v.size()); }
};

// nearest-neighbor downsample of a label batch to a logit map's resolution,
// voxel-centers convention
inline LabelMap resize_labels_nearest(const LabelMap& labels, const Shape& spatial) {
    PH_CHECK(labels.shape.size() == 4 && spatial.size() == 3, "resize_labels_nearest: want [B,D,H,W] + (D,H,W)");
    int64_t B = labels.shape[0];
    int64_t sd = labels.shape[1], sh = labels.shape[2], sw = labels.shape[3];
    int64_t td = spatial[0], th = spatial[1], tw = spatial[2];
    LabelMap out;
    out.shape = {B, td, th, tw};
    out.v.resize(size_t(B * td * th * tw));
    auto src_of = [](int64_t t, int64_t S, int64_t T) {
        double s = (double(t) + 0.5) * double(S) / double(T) - 0.5;
        int64_t i = int64_t(std::floor(s + 0.5));
        return std::clamp<int64_t>(i, 0, S - 1);
    };
    for (int64_t b = 0; b < B; ++b)
        for (int64_t d = 0; d < td; ++d)
            for (int64_t h = 0; h < th; ++h)
                for (int64_t w = 0; w < tw; ++w) {
                    int64_t si = ((b * sd + src_of(d, sd, td)) * sh + src_of(h, sh, th)) * sw + src_of(w, sw, tw);
                    out.v[size_t(((b * td + d) * th + h) * tw + w)] = labels.v[size_t(si)];
                }
    return out;
}

// mean over voxels of -log softmax probability of the true class
template <class S>
Tensor<S> cross_entropy(const Tensor<S>& logits, const LabelMap& labels) {
    PH_CHECK(logits.dim() == 5, "cross_entropy: logits must be [B,K,D,H,W]");
    int64_t B = logits.size(0), K = logits.size(1), V = logits.size(2) * logits.size(3) * logits.size(4);
    PH_CHECK((labels.shape == Shape{B, logits.size(2), logits.size(3), logits.size(4)}),
             "cross_entropy: label shape mismatch");
    const S* lp = logits.values().data();
    double acc = 0;
    for (int64_t b = 0; b < B; ++b)
        for (int64_t x = 0; x < V; ++x) {
            int32_t cls = labels.v[size_t(b * V + x)];
            PH_CHECK(cls >= 0 && cls < K, "cross_entropy: label ", cls, " out of range [0,", K, ")");
            double mx = -1e300;
            for (int64_t k = 0; k < K; ++k) mx = std::max(mx, double(lp[(b * K + k) * V + x]));
            double lse = 0;
            for (int64_t k = 0; k < K; ++k) lse += std::exp(double(lp[(b * K + k) * V + x]) - mx);
            lse = mx + std::log(lse);
            acc += lse - double(lp[(b * K + cls) * V + x]);
        }
    Tensor<S> out = Tensor<S>::scalar(S(acc / double(B * V)));
    if (tracing(logits)) {
        out.set_requires_grad(true);
        Tape<S>::active().record([li = logits.impl(), oi = out.impl(), labels, B, K, V] {
            if (oi->grad.empty() || !li->requires_grad) return;
            li->ensure_grad();
            S g = oi->grad[0];
            const S* lp = li->value.data();
            double inv = 1.0 / double(B * V);
            for (int64_t b = 0; b < B; ++b)
                for (int64_t x = 0; x < V; ++x) {
                    int32_t cls = labels.v[size_t(b * V + x)];
                    double mx = -1e300;
                    for (int64_t k = 0; k < K; ++k) mx = std::max(mx, double(lp[(b * K + k) * V + x]));
                    double denom = 0;
                    for (int64_t k = 0; k < K; ++k) denom += std::exp(double(lp[(b * K + k) * V + x]) - mx);
                    for (int64_t k = 0; k < K; ++k) {
                        double p = std::exp(double(lp[(b * K + k) * V + x]) - mx) / denom;
                        double onehot = (k == cls) ? 1.0 : 0.0;
                        li->grad[size_t((b * K + k) * V + x)] += g * S((p - onehot) * inv);
                    }
                }
        });
    }
    return out;
}

// 1 - mean over foreground classes of (2*sum(p*g)+smooth)/(sum(p)+sum(g)+smooth),
// with softmax probabilities p and one-hot labels g aggregated over the batch
template <class S>
Tensor<S> dice_loss(const Tensor<S>& logits, const LabelMap& labels, double smooth = 1e-5) {
    PH_CHECK(logits.dim() == 5, "dice_loss: logits must be [B,K,D,H,W]");
    int64_t B = logits.size(0), K = logits.size(1), V = logits.size(2) * logits.size(3) * logits.size(4);
    PH_CHECK((labels.shape == Shape{B, logits.size(2), logits.size(3), logits.size(4)}), "dice_loss: label shape mismatch");
    PH_CHECK(K >= 2, "dice_loss: need at least 2 classes");

    // softmax probabilities kept for the backward pass
    auto probs = std::make_shared<std::vector<S>>(size_t(B * K * V));
    const S* lp = logits.values().data();
    std::vector<double> inter(size_t(K), 0.0), psum(size_t(K), 0.0), gsum(size_t(K), 0.0);
    for (int64_t b = 0; b < B; ++b)
        for (int64_t x = 0; x < V; ++x) {
            int32_t cls = labels.v[size_t(b * V + x)];
            PH_CHECK(cls >= 0 && cls < K, "dice_loss: label ", cls, " out of range [0,", K, ")");
            double mx = -1e300;
            for (int64_t k = 0; k < K; ++k) mx = std::max(mx, double(lp[(b * K + k) * V + x]));
            double denom = 0;
            for (int64_t k = 0; k < K; ++k) denom += std::exp(double(lp[(b * K + k) * V + x]) - mx);
            for (int64_t k = 0; k < K; ++k) {
                double p = std::exp(double(lp[(b * K + k) * V + x]) - mx) / denom;
                (*probs)[size_t((b * K + k) * V + x)] = S(p);
                psum[size_t(k)] += p;
                if (k == cls) inter[size_t(k)] += p;
            }
            gsum[size_t(cls)] += 1.0;
        }
    double dice_acc = 0;
    for (int64_t k = 1; k < K; ++k)
        dice_acc += (2.0 * inter[size_t(k)] + smooth) / (psum[size_t(k)] + gsum[size_t(k)] + smooth);
    Tensor<S> out = Tensor<S>::scalar(S(1.0 - dice_acc / double(K - 1)));

    if (tracing(logits)) {
        out.set_requires_grad(true);
        Tape<S>::active().record([li = logits.impl(), oi = out.impl(), labels, probs, inter, psum, gsum, smooth, B, K,
                                  V] {
            if (oi->grad.empty() || !li->requires_grad) return;
            li->ensure_grad();
            S g = oi->grad[0];
            // dL/dD_c = -1/(K-1); dD_c/dp_cv = (2 g_cv (P+G+s) - (2A+s)) / (P+G+s)^2
            std::vector<double> coef_g(size_t(K), 0.0), coef_p(size_t(K), 0.0);
            for (int64_t k = 1; k < K; ++k) {
                double den = psum[size_t(k)] + gsum[size_t(k)] + smooth;
                coef_g[size_t(k)] = -1.0 / double(K - 1) * 2.0 / den;
                coef_p[size_t(k)] = 1.0 / double(K - 1) * (2.0 * inter[size_t(k)] + smooth) / (den * den);
            }
            for (int64_t b = 0; b < B; ++b)
                for (int64_t x = 0; x < V; ++x) {
                    int32_t cls = labels.v[size_t(b * V + x)];
                    // dL/dp_k, then chain through softmax: dz_k = p_k (dp_k - sum_c dp_c p_c)
                    double dot = 0;
                    double dp[64];
                    PH_CHECK(K <= 64, "dice_loss: class count above supported bound");
                    for (int64_t k = 0; k < K; ++k) {
                        double d = coef_p[size_t(k)];
                        if (k == cls) d += coef_g[size_t(k)];
                        dp[k] = d;
                        dot += d * double((*probs)[size_t((b * K + k) * V + x)]);
                    }
                    for (int64_t k = 0; k < K; ++k) {
                        double pk = double((*probs)[size_t((b * K + k) * V + x)]);
                        li->grad[size_t((b * K + k) * V + x)] += g * S(pk * (dp[k] - dot));
                    }
                }
        });
    }
    return out;
}

// default deep-supervision weights: halving scheme, finest stage heaviest,
// normalized to sum 1 (coarsest first to match forward output order)
inline std::vector<double> deep_supervision_weights(int64_t outputs) {
    std::vector<double> w(static_cast<size_t>(outputs));
    double total = double((int64_t(1) << outputs) - 1);
    for (int64_t s = 0; s < outputs; ++s) w[size_t(s)] = double(int64_t(1) << s) / total;
    return w;
}

// sum over decoder stages of w_s * (CE + Dice) on nearest-downsampled labels
template <class S>
Tensor<S> deep_supervision_loss(const std::vector<Tensor<S>>& outputs, const LabelMap& labels,
                                const std::vector<double>& weights) {
    PH_CHECK(!outputs.empty(), "deep_supervision_loss: no outputs");
    PH_CHECK(outputs.size() == weights.size(), "deep_supervision_loss: ", outputs.size(), " outputs but ",
             weights.size(), " weights");
    Tensor<S> total;
    for (size_t s = 0; s < outputs.size(); ++s) {
        const Tensor<S>& o = outputs[s];
        LabelMap l = resize_labels_nearest(labels, {o.size(2), o.size(3), o.size(4)});
        Tensor<S> term = scale(add(cross_entropy(o, l), dice_loss(o, l)), S(weights[s]));
        total = total.defined() ? add(total, term) : term;
    }
    return total;
}

template <class S>
Tensor<S> deep_supervision_loss(const std::vector<Tensor<S>>& outputs, const LabelMap& labels) {
    return deep_supervision_loss(outputs, labels, deep_supervision_weights(int64_t(outputs.size())));
}

}  // namespace phtrans
