#pragma once

#include "phtrans/tensor.hpp"

namespace phtrans {

struct GradCheckReport {
    double max_abs_err = 0;    // worst |autodiff - finite difference|
    double grad_scale = 0;     // largest gradient magnitude seen (either side)
    double max_rel_err = 0;    // worst per-element error over max(|ad|,|fd|,1)
    int64_t checked = 0;

    bool pass(double tol) const { return max_rel_err < tol; }
};

// Central-difference check of the autodiff gradient of a scalar-valued,
// deterministic function with respect to one leaf tensor x. The function is
// re-evaluated with x's buffer perturbed in place; restores x afterwards.
// Owns the active tape for the duration of the call.
template <class S, class Fn>
GradCheckReport grad_check(const Fn& f, Tensor<S> x, double eps = 1e-3, const std::vector<int64_t>* indices = nullptr) {
    auto& tape = Tape<S>::active();
    tape.clear();
    x.set_requires_grad(true);
    x.zero_grad();

    Tensor<S> loss = f();
    PH_CHECK(loss.numel() == 1, "grad_check: function must be scalar-valued");
    tape.backward(loss);
    std::vector<double> g_ad;
    g_ad.reserve(size_t(x.numel()));
    for (S g : x.grad()) g_ad.push_back(double(g));

    std::vector<int64_t> all;
    if (!indices) {
        all.resize(size_t(x.numel()));
        for (int64_t i = 0; i < x.numel(); ++i) all[size_t(i)] = i;
        indices = &all;
    }

    GradCheckReport rep;
    {
        NoGrad<S> guard;
        auto xv = x.values();
        for (int64_t i : *indices) {
            S orig = xv[size_t(i)];
            xv[size_t(i)] = S(double(orig) + eps);
            double lp = double(f().item());
            xv[size_t(i)] = S(double(orig) - eps);
            double lm = double(f().item());
            xv[size_t(i)] = orig;
            double g_fd = (lp - lm) / (2.0 * eps);
            double err = std::abs(g_ad[size_t(i)] - g_fd);
            rep.max_abs_err = std::max(rep.max_abs_err, err);
            rep.grad_scale = std::max({rep.grad_scale, std::abs(g_ad[size_t(i)]), std::abs(g_fd)});
            // relative to the element magnitude with a unit floor: losses are
            // scalarized to O(1), so sub-unit gradients are judged absolutely
            double rel = err / std::max({std::abs(g_ad[size_t(i)]), std::abs(g_fd), 1.0});
            rep.max_rel_err = std::max(rep.max_rel_err, rel);
            ++rep.checked;
        }
    }
    tape.clear();
    return rep;
}

}  // namespace phtrans
