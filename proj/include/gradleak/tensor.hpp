#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "gradleak/errors.hpp"

namespace gradleak {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorImpl {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad; // empty until first accumulation
    bool requires_grad = false;
};

// Value-semantic handle to a dense row-major double tensor. Copies share
// storage; ops never mutate an existing tensor's values once it has been
// recorded on a tape (grad accumulation is the one sanctioned mutation).
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double v);
    static Tensor scalar(double v);
    static Tensor from_data(Shape shape, std::vector<double> data);

    bool defined() const { return static_cast<bool>(p_); }
    const Shape& shape() const { return p_->shape; }
    int rank() const { return static_cast<int>(p_->shape.size()); }
    int64_t dim(int i) const;
    int64_t numel() const { return static_cast<int64_t>(p_->value.size()); }

    std::span<const double> values() const { return p_->value; }
    // mutation is reserved for leaf tensors between tapes (init, optimizer steps)
    std::span<double> values_mut() { return p_->value; }

    double item() const;
    double at(int64_t flat) const { return p_->value[static_cast<size_t>(flat)]; }

    bool requires_grad() const { return p_->requires_grad; }
    Tensor& set_requires_grad(bool b) {
        p_->requires_grad = b;
        return *this;
    }

    bool has_grad() const { return !p_->grad.empty(); }
    std::span<const double> grad() const;
    Tensor grad_tensor() const; // detached copy of the accumulated gradient
    void zero_grad();
    void accumulate_grad(std::span<const double> g);

    Tensor clone() const; // deep copy, grad dropped, requires_grad preserved
    Tensor detach() const; // shares nothing with a tape: deep value copy, requires_grad=false

    TensorImpl* impl() const { return p_.get(); }
    const std::shared_ptr<TensorImpl>& ptr() const { return p_; }

private:
    explicit Tensor(std::shared_ptr<TensorImpl> p) : p_(std::move(p)) {}
    std::shared_ptr<TensorImpl> p_;

    friend Tensor make_tensor(Shape, std::vector<double>);
};

Tensor make_tensor(Shape shape, std::vector<double> data);

// Reverse-mode tape. Ops append their backward closures in creation order,
// which is a topological order by construction. One backward pass per tape.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // While a Scope is alive, ops on this thread record onto the tape.
    class Scope {
    public:
        explicit Scope(Tape& t);
        ~Scope();
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Tape* prev_;
    };

    static Tape* active();

    void record(std::function<void()> backward_fn) {
        require(!frozen_, "tape: cannot record after backward");
        nodes_.push_back(std::move(backward_fn));
    }

    size_t size() const { return nodes_.size(); }
    bool frozen() const { return frozen_; }

    // Seeds d(root)/d(root) = 1 and replays nodes in reverse. Every
    // requires_grad leaf then holds d(root)/d(leaf).
    void backward(const Tensor& root);

private:
    std::vector<std::function<void()>> nodes_;
    bool frozen_ = false;
};

// Scans for NaN/Inf; throws NumericError naming the op.
void ensure_finite(const char* op, std::span<const double> v);

} // namespace gradleak
