#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "fedmgp/errors.hpp"
#include "fedmgp/rng.hpp"

namespace fedmgp {

using Shape = std::vector<std::size_t>;

namespace detail {
struct TensorData {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // allocated iff requires_grad
    bool requires_grad = false;
};
}  // namespace detail

// Dense row-major tensor of 64-bit floats with an optional gradient slot.
// Copying a Tensor copies the handle; clone() copies the storage.
class Tensor {
public:
    Tensor() : d_(std::make_shared<detail::TensorData>()) {}
    explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

    static Tensor scalar(double v, bool requires_grad = false);

    const Shape& shape() const { return d_->shape; }
    std::size_t rank() const { return d_->shape.size(); }
    std::size_t size() const { return d_->values.size(); }
    // Row/column view of rank-1 and rank-2 tensors (rank 1 counts as one row).
    std::size_t rows() const;
    std::size_t cols() const;

    double value() const;  // scalar convenience
    std::span<const double> values() const { return d_->values; }
    std::span<double> values_mut() { return d_->values; }
    double at(std::size_t r, std::size_t c) const { return d_->values[r * cols() + c]; }
    double& at(std::size_t r, std::size_t c) { return d_->values[r * cols() + c]; }

    bool requires_grad() const { return d_->requires_grad; }
    void set_requires_grad(bool on);
    std::span<const double> grad() const { return d_->grad; }
    std::span<double> grad_mut() { return d_->grad; }
    void zero_grad();

    Tensor clone() const;  // deep copy, same requires_grad
    Tensor detached() const;  // deep copy, requires_grad = false
    bool all_finite() const;

    bool same_storage(const Tensor& other) const { return d_ == other.d_; }
    const void* id() const { return d_.get(); }
    std::shared_ptr<detail::TensorData> handle() const { return d_; }

private:
    std::shared_ptr<detail::TensorData> d_;
    friend class Tape;
};

Tensor seeded_uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad = false);
Tensor seeded_normal(Shape shape, Rng& rng, double mean, double stddev, bool requires_grad = false);

std::size_t argmax(std::span<const double> values);

// Records forward operations so backward() can replay their gradient rules in
// reverse. A tape and the tensors flowing through it form a single-threaded
// unit of work; distinct tapes may run concurrently.
class Tape {
public:
    Tensor matmul(const Tensor& a, const Tensor& b);
    Tensor transpose(const Tensor& a);
    Tensor add(const Tensor& a, const Tensor& b);
    Tensor sub(const Tensor& a, const Tensor& b);
    Tensor mul(const Tensor& a, const Tensor& b);
    Tensor scale(const Tensor& a, double k);
    // (t x d) plus a length-d row broadcast over every row.
    Tensor add_row(const Tensor& a, const Tensor& bias);
    Tensor gelu(const Tensor& a);
    Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias,
                      double eps = 1e-5);
    // a / sqrt(mean(a^2) + eps): scale normalization that preserves direction.
    Tensor rms_scale(const Tensor& a, double eps = 1e-5);
    Tensor softmax(const Tensor& a, std::size_t axis);
    Tensor concat_rows(std::span<const Tensor> parts);
    Tensor concat_cols(std::span<const Tensor> parts);
    Tensor slice_rows(const Tensor& a, std::size_t row_begin, std::size_t row_end);
    Tensor slice_cols(const Tensor& a, std::size_t col_begin, std::size_t col_end);
    Tensor sum_all(const Tensor& a);
    Tensor mean_all(const Tensor& a);
    Tensor cross_entropy(const Tensor& logits, std::size_t label);
    Tensor mse(const Tensor& a, const Tensor& b);
    Tensor cosine_distance(const Tensor& u, const Tensor& v);

    void backward(const Tensor& loss);

    std::size_t node_count() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

private:
    struct Node {
        std::function<void()> backprop;
    };

    using DataPtr = std::shared_ptr<detail::TensorData>;

    Tensor make_output(Shape shape, std::vector<double> values, bool requires_grad);
    void record(std::function<void()> backprop) { nodes_.push_back({std::move(backprop)}); }

    std::vector<Node> nodes_;
};

}  // namespace fedmgp
