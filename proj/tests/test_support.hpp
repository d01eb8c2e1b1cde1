#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "gradleak/ops.hpp"
#include "gradleak/rng.hpp"
#include "gradleak/tensor.hpp"

namespace gltest {

using gradleak::Rng;
using gradleak::Shape;
using gradleak::Tape;
using gradleak::Tensor;

inline Tensor random_tensor(Shape shape, uint64_t seed, double lo = -2.0, double hi = 2.0) {
    Tensor t = Tensor::zeros(std::move(shape));
    Rng rng(seed);
    for (double& v : t.values_mut()) v = rng.uniform(lo, hi);
    return t;
}

// values bounded away from zero (for div denominators, relu kinks, ...)
inline Tensor random_signed_away_from_zero(Shape shape, uint64_t seed, double min_abs = 0.5,
                                           double max_abs = 2.0) {
    Tensor t = Tensor::zeros(std::move(shape));
    Rng rng(seed);
    for (double& v : t.values_mut()) {
        const double mag = rng.uniform(min_abs, max_abs);
        v = rng.uniform() < 0.5 ? -mag : mag;
    }
    return t;
}

// collapse a tensor-valued op to a scalar with fixed pseudo-random weights
inline Tensor weighted_sum(const Tensor& t, uint64_t seed = 7) {
    Tensor w = random_tensor(t.shape(), seed, -1.0, 1.0);
    return gradleak::sum(gradleak::mul(t, w));
}

struct FdResult {
    double worst_rel = 0.0;
    double worst_abs = 0.0;
    size_t checked = 0;
    bool pass = true;
};

// Central finite differences against the reverse pass; spec tolerances.
inline FdResult fd_check(std::vector<Tensor>& inputs,
                         const std::function<Tensor(const std::vector<Tensor>&)>& f,
                         double h = 1e-5, double rel_tol = 1e-4, double abs_tol = 1e-7,
                         double small = 1e-6) {
    for (Tensor& t : inputs) {
        t.set_requires_grad(true);
        t.zero_grad();
    }
    Tape tape;
    {
        Tape::Scope scope(tape);
        Tensor out = f(inputs);
        tape.backward(out);
    }
    std::vector<std::vector<double>> analytic;
    for (Tensor& t : inputs) {
        if (t.has_grad())
            analytic.emplace_back(t.grad().begin(), t.grad().end());
        else
            analytic.emplace_back(static_cast<size_t>(t.numel()), 0.0);
        t.zero_grad();
        t.set_requires_grad(false);
    }
    FdResult r;
    for (size_t ti = 0; ti < inputs.size(); ++ti) {
        auto vals = inputs[ti].values_mut();
        for (size_t j = 0; j < vals.size(); ++j) {
            const double keep = vals[j];
            vals[j] = keep + h;
            const double up = f(inputs).item();
            vals[j] = keep - h;
            const double dn = f(inputs).item();
            vals[j] = keep;
            const double fd = (up - dn) / (2.0 * h);
            const double a = analytic[ti][j];
            ++r.checked;
            if (std::abs(a) > small) {
                const double rel = std::abs(a - fd) / std::max(std::abs(a), std::abs(fd));
                r.worst_rel = std::max(r.worst_rel, rel);
                if (rel >= rel_tol) r.pass = false;
            } else {
                const double abs = std::abs(a - fd);
                r.worst_abs = std::max(r.worst_abs, abs);
                if (abs >= abs_tol) r.pass = false;
            }
        }
    }
    return r;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    double worst = 0.0;
    for (size_t i = 0; i < a.values().size(); ++i)
        worst = std::max(worst, std::abs(a.values()[i] - b.values()[i]));
    return worst;
}

} // namespace gltest
