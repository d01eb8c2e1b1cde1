#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "gradleak/tensor.hpp"

namespace gradleak {

// Adam with bias correction; one instance per parameter tensor.
class AdamState {
public:
    AdamState(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(Tensor& param, std::span<const double> grad, double lr) {
        auto value = param.values_mut();
        require(grad.size() == value.size(), "adam: gradient size mismatch");
        if (m_.empty()) {
            m_.assign(value.size(), 0.0);
            v_.assign(value.size(), 0.0);
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (size_t i = 0; i < value.size(); ++i) {
            const double g = grad[i];
            m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
            v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g * g;
            const double mh = m_[i] / bc1;
            const double vh = v_[i] / bc2;
            value[i] -= lr * mh / (std::sqrt(vh) + eps_);
        }
    }

private:
    double beta1_, beta2_, eps_;
    int64_t t_ = 0;
    std::vector<double> m_, v_;
};

// lr(t) = 0.5 * lr0 * (1 + cos(pi * t / T)), t in 1..T
inline double cosine_lr(double lr0, int64_t t, int64_t total) {
    return 0.5 * lr0 * (1.0 + std::cos(3.14159265358979323846 * static_cast<double>(t) /
                                       static_cast<double>(total)));
}

} // namespace gradleak
