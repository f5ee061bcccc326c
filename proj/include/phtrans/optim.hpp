#pragma once

#include "phtrans/layers.hpp"

namespace phtrans {

// cosine annealing: lr_min + (lr_init - lr_min) * (1 + cos(pi * epoch/total)) / 2
inline double cosine_lr(int64_t epoch, int64_t total, double lr_init, double lr_min = 0.0) {
    PH_CHECK(total >= 1 && epoch >= 0 && epoch <= total, "cosine_lr: need 0 <= epoch <= total");
    double c = std::cos(3.14159265358979323846 * double(epoch) / double(total));
    return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + c);
}

// AdamW with decoupled weight decay:
//   p <- p - lr*wd*p - lr * m_hat / (sqrt(v_hat) + eps)
template <class S>
struct AdamW {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 1e-2;
    int64_t step_count = 0;
    std::vector<std::vector<S>> m, v;

    void init(const ParamList<S>& params) {
        m.clear();
        v.clear();
        step_count = 0;
        for (const auto& p : params) {
            m.emplace_back(size_t(p.tensor.numel()), S(0));
            v.emplace_back(size_t(p.tensor.numel()), S(0));
        }
    }

    void step(ParamList<S>& params, double lr) {
        PH_CHECK(m.size() == params.size(), "adamw: optimizer state not initialized for this parameter list");
        ++step_count;
        double bc1 = 1.0 - std::pow(beta1, double(step_count));
        double bc2 = 1.0 - std::pow(beta2, double(step_count));
        for (size_t pi = 0; pi < params.size(); ++pi) {
            auto& p = params[pi].tensor;
            PH_CHECK(int64_t(m[pi].size()) == p.numel(), "adamw: state shape mismatch for ", params[pi].name);
            auto pv = p.values();
            bool has_grad = p.has_grad();
            auto gv = has_grad ? p.grad() : std::span<S>();
            S* mi = m[pi].data();
            S* vi = v[pi].data();
            for (int64_t i = 0; i < p.numel(); ++i) {
                double g = has_grad ? double(gv[size_t(i)]) : 0.0;
                double pval = double(pv[size_t(i)]);
                pval -= lr * weight_decay * pval;
                double mnew = beta1 * double(mi[i]) + (1.0 - beta1) * g;
                double vnew = beta2 * double(vi[i]) + (1.0 - beta2) * g * g;
                mi[i] = S(mnew);
                vi[i] = S(vnew);
                double mhat = mnew / bc1;
                double vhat = vnew / bc2;
                pval -= lr * mhat / (std::sqrt(vhat) + eps);
                pv[size_t(i)] = S(pval);
            }
        }
    }

    // state as named tensors for checkpointing
    std::vector<std::pair<std::string, Tensor<S>>> state_tensors(const ParamList<S>& params) const {
        std::vector<std::pair<std::string, Tensor<S>>> out;
        for (size_t pi = 0; pi < params.size(); ++pi) {
            out.emplace_back("opt.m." + params[pi].name,
                             Tensor<S>::from_data(params[pi].tensor.shape(), m[pi]));
            out.emplace_back("opt.v." + params[pi].name,
                             Tensor<S>::from_data(params[pi].tensor.shape(), v[pi]));
        }
        return out;
    }

    template <class Lookup>
    void restore(const ParamList<S>& params, const Lookup& find_tensor, int64_t steps) {
        init(params);
        step_count = steps;
        for (size_t pi = 0; pi < params.size(); ++pi) {
            const Tensor<S>* tm = find_tensor("opt.m." + params[pi].name);
            const Tensor<S>* tv = find_tensor("opt.v." + params[pi].name);
            PH_CHECK(tm && tv, "adamw: checkpoint lacks optimizer state for ", params[pi].name);
            std::copy(tm->values().begin(), tm->values().end(), m[pi].begin());
            std::copy(tv->values().begin(), tv->values().end(), v[pi].begin());
        }
    }
};

}  // namespace phtrans
