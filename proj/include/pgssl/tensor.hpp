#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <span>
#include <vector>

#include "pgssl/common.hpp"

namespace pgssl {

// Dense row-major tensor with an optional gradient buffer. Tensor is a
// value-semantic handle to shared storage: ops hand out new tensors and
// never mutate their inputs. Parameter tensors are the exception; the
// optimizer and the EMA update write through values() between steps.
template <typename T>
class Tensor {
    struct Node {
        Shape shape;
        std::vector<T> value;
        std::vector<T> grad;  // same length as value when grad is tracked
        bool requires_grad = false;
    };

public:
    Tensor() : node_(std::make_shared<Node>()) {}

    explicit Tensor(Shape shape, bool requires_grad = false)
        : node_(std::make_shared<Node>()) {
        node_->shape = std::move(shape);
        node_->value.assign(numel(node_->shape), T{0});
        set_requires_grad(requires_grad);
    }

    Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
        : node_(std::make_shared<Node>()) {
        if (numel(shape) != data.size())
            throw ShapeError("tensor: data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        node_->shape = std::move(shape);
        node_->value = std::move(data);
        set_requires_grad(requires_grad);
    }

    static Tensor scalar(T v, bool requires_grad = false) {
        return Tensor(Shape{1}, std::vector<T>{v}, requires_grad);
    }

    const Shape& shape() const { return node_->shape; }
    std::size_t numel() const { return node_->value.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t rank() const { return node_->shape.size(); }

    std::span<const T> values() const { return node_->value; }
    std::span<T> values() { return node_->value; }

    T item() const {
        if (numel() != 1)
            throw ShapeError("tensor: item() on non-scalar of shape " + shape_str(shape()));
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }

    void set_requires_grad(bool on) {
        node_->requires_grad = on;
        if (on && node_->grad.size() != node_->value.size())
            node_->grad.assign(node_->value.size(), T{0});
    }

    bool has_grad() const { return node_->grad.size() == node_->value.size(); }

    std::span<const T> grad() const {
        require_grad_buffer();
        return node_->grad;
    }
    std::span<T> grad() {
        require_grad_buffer();
        return node_->grad;
    }

    void zero_grad() {
        std::fill(node_->grad.begin(), node_->grad.end(), T{0});
    }

    // Deep copy of values (and a fresh zero grad buffer when tracking).
    Tensor clone() const {
        Tensor out(node_->shape, node_->value, node_->requires_grad);
        return out;
    }

    // Identity of storage, not of contents.
    bool same_storage(const Tensor& other) const { return node_ == other.node_; }

    // NaN/Inf is an error surface, not a silent state; callers invoke this
    // at checkpoints of their choosing (loss values, optimizer inputs).
    void check_finite(const std::string& what) const {
        for (std::size_t i = 0; i < node_->value.size(); ++i) {
            if (!std::isfinite(static_cast<double>(node_->value[i])))
                throw ValueError(what + ": non-finite value at flat index " + std::to_string(i));
        }
    }

private:
    void require_grad_buffer() const {
        if (node_->grad.size() != node_->value.size())
            throw ValueError("tensor: gradient buffer absent (requires_grad is false)");
    }

    std::shared_ptr<Node> node_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace pgssl
