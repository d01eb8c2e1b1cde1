#include "gradleak/tensor.hpp"

#include <cmath>
#include <sstream>

namespace gradleak {

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << "]";
    return os.str();
}

Tensor make_tensor(Shape shape, std::vector<double> data) {
    auto impl = std::make_shared<TensorImpl>();
    require(shape_numel(shape) == static_cast<int64_t>(data.size()),
            "tensor: shape " + shape_str(shape) + " does not match data length " +
                std::to_string(data.size()));
    for (int64_t d : shape)
        require(d > 0, "tensor: dimension sizes must be positive, got " + shape_str(shape));
    impl->shape = std::move(shape);
    impl->value = std::move(data);
    return Tensor(std::move(impl));
}

Tensor Tensor::zeros(Shape shape) {
    auto n = static_cast<size_t>(shape_numel(shape));
    return make_tensor(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::full(Shape shape, double v) {
    auto n = static_cast<size_t>(shape_numel(shape));
    return make_tensor(std::move(shape), std::vector<double>(n, v));
}

Tensor Tensor::scalar(double v) { return make_tensor(Shape{}, std::vector<double>{v}); }

Tensor Tensor::from_data(Shape shape, std::vector<double> data) {
    return make_tensor(std::move(shape), std::move(data));
}

int64_t Tensor::dim(int i) const {
    int r = rank();
    if (i < 0) i += r;
    require(i >= 0 && i < r, "tensor: dim index out of range");
    return p_->shape[static_cast<size_t>(i)];
}

double Tensor::item() const {
    require(numel() == 1, "tensor: item() requires a scalar, got " + shape_str(shape()));
    return p_->value[0];
}

std::span<const double> Tensor::grad() const {
    require(has_grad(), "tensor: gradient not populated");
    return p_->grad;
}

Tensor Tensor::grad_tensor() const {
    require(has_grad(), "tensor: gradient not populated");
    return make_tensor(p_->shape, p_->grad);
}

void Tensor::zero_grad() { p_->grad.clear(); }

void Tensor::accumulate_grad(std::span<const double> g) {
    require(g.size() == p_->value.size(), "tensor: gradient size mismatch");
    if (p_->grad.empty()) p_->grad.assign(p_->value.size(), 0.0);
    for (size_t i = 0; i < g.size(); ++i) p_->grad[i] += g[i];
}

Tensor Tensor::clone() const {
    Tensor t = make_tensor(p_->shape, p_->value);
    t.set_requires_grad(p_->requires_grad);
    return t;
}

Tensor Tensor::detach() const { return make_tensor(p_->shape, p_->value); }

namespace {
thread_local Tape* g_active_tape = nullptr;
} // namespace

Tape::Scope::Scope(Tape& t) : prev_(g_active_tape) { g_active_tape = &t; }
Tape::Scope::~Scope() { g_active_tape = prev_; }
Tape* Tape::active() { return g_active_tape; }

void Tape::backward(const Tensor& root) {
    require(!nodes_.empty(), "tape: backward on empty tape");
    require(!frozen_, "tape: double backward is unsupported");
    require(root.defined() && root.numel() == 1,
            "tape: backward root must be a scalar");
    require(root.requires_grad(), "tape: root is not connected to this tape");
    frozen_ = true;
    const double one = 1.0;
    root.impl()->grad.assign(1, one);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

void ensure_finite(const char* op, std::span<const double> v) {
    double acc = 0.0;
    for (double x : v) acc += x;
    if (!std::isfinite(acc)) {
        // pinpoint for the error message
        for (size_t i = 0; i < v.size(); ++i) {
            if (!std::isfinite(v[i]))
                throw NumericError(std::string(op) + ": non-finite value at flat index " +
                                   std::to_string(i));
        }
        throw NumericError(std::string(op) + ": value overflow");
    }
}

} // namespace gradleak
