#pragma once

#include <cstring>
#include <functional>
#include <memory>
#include <span>
#include <utility>

#include "csipred/common.hpp"
#include "csipred/rng.hpp"

namespace csipred {

// Dense n-d array node. Tensors are immutable once created except for
// gradient accumulation during backward.
struct TensorData {
    Shape shape;
    std::vector<real_t> data;
    std::vector<real_t> grad;  // empty means "absent"
    bool requires_grad = false;
};

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape) {
        Tensor t;
        t.d_ = std::make_shared<TensorData>();
        t.d_->shape = std::move(shape);
        t.d_->data.assign(static_cast<size_t>(numel_of(t.d_->shape)), real_t(0));
        return t;
    }

    static Tensor full(Shape shape, real_t value) {
        Tensor t = zeros(std::move(shape));
        for (auto& v : t.d_->data) v = value;
        return t;
    }

    static Tensor from_data(Shape shape, std::vector<real_t> values) {
        if (numel_of(shape) != static_cast<std::int64_t>(values.size()))
            throw ShapeError("from_data: " + shape_str(shape) + " does not hold " +
                             std::to_string(values.size()) + " values");
        Tensor t;
        t.d_ = std::make_shared<TensorData>();
        t.d_->shape = std::move(shape);
        t.d_->data = std::move(values);
        return t;
    }

    static Tensor scalar(real_t v) { return from_data({1}, {v}); }

    static Tensor randn(Shape shape, Rng& rng, double mu = 0.0, double sigma = 1.0) {
        Tensor t = zeros(std::move(shape));
        for (auto& v : t.d_->data) v = static_cast<real_t>(rng.normal(mu, sigma));
        return t;
    }

    static Tensor uniform(Shape shape, Rng& rng, double lo, double hi) {
        Tensor t = zeros(std::move(shape));
        for (auto& v : t.d_->data) v = static_cast<real_t>(rng.uniform(lo, hi));
        return t;
    }

    bool defined() const { return d_ != nullptr; }
    const Shape& shape() const { return d_->shape; }
    int rank() const { return static_cast<int>(d_->shape.size()); }
    int dim(int i) const { return d_->shape[static_cast<size_t>(i)]; }
    std::int64_t numel() const { return static_cast<std::int64_t>(d_->data.size()); }

    std::span<real_t> data() { return {d_->data.data(), d_->data.size()}; }
    std::span<const real_t> data() const { return {d_->data.data(), d_->data.size()}; }
    real_t* ptr() { return d_->data.data(); }
    const real_t* ptr() const { return d_->data.data(); }

    real_t item() const {
        if (numel() != 1) throw ShapeError("item: tensor " + shape_str(shape()) + " is not scalar");
        return d_->data[0];
    }

    bool requires_grad() const { return d_ && d_->requires_grad; }
    Tensor& set_requires_grad(bool v = true) {
        d_->requires_grad = v;
        return *this;
    }

    // Gradient accumulation is the one sanctioned mutation of a live tensor,
    // so these are callable through const handles captured on the tape.
    bool has_grad() const { return d_ && !d_->grad.empty(); }
    std::span<real_t> grad() const { return {d_->grad.data(), d_->grad.size()}; }

    // Lazily allocate the gradient buffer (zero-filled, same shape as data).
    real_t* grad_ptr() const {
        if (d_->grad.empty()) d_->grad.assign(d_->data.size(), real_t(0));
        return d_->grad.data();
    }

    void zero_grad() const {
        if (!d_->grad.empty()) std::memset(d_->grad.data(), 0, d_->grad.size() * sizeof(real_t));
    }

    void accumulate_grad(const real_t* g) const {
        real_t* dst = grad_ptr();
        const size_t n = d_->data.size();
        for (size_t i = 0; i < n; ++i) dst[i] += g[i];
    }

    // Deep copy of the values; never shares the gradient or the tape history.
    Tensor clone_detached() const {
        Tensor t;
        t.d_ = std::make_shared<TensorData>();
        t.d_->shape = d_->shape;
        t.d_->data = d_->data;
        return t;
    }

    void copy_values_from(const Tensor& other) {
        if (other.d_->shape != d_->shape)
            throw ShapeError("copy_values_from: " + shape_str(other.shape()) + " vs " + shape_str(shape()));
        d_->data = other.d_->data;
    }

    TensorData* node() const { return d_.get(); }

    bool same_storage(const Tensor& other) const { return d_ == other.d_; }

private:
    std::shared_ptr<TensorData> d_;
};

// Reverse-mode tape: an ordered record of primitive operations. Creation
// order is a topological order of the graph, so walking the record backward
// visits every node in reverse topological order exactly once. The walk is
// fully deterministic, which makes repeated backward passes bit-identical.
class GradTape {
public:
    struct Entry {
        std::vector<Tensor> inputs;
        Tensor output;
        std::function<void()> vjp;
    };

    void record(std::vector<Tensor> inputs, Tensor output, std::function<void()> vjp) {
        entries_.push_back({std::move(inputs), std::move(output), std::move(vjp)});
    }

    // Seeds d(root)/d(root) = 1 and replays the tape backward. Only entries
    // whose output gradient has been touched propagate, so disconnected
    // subgraphs cost nothing.
    void backward(Tensor root) {
        if (root.numel() != 1)
            throw ShapeError("backward: root must be scalar, got " + shape_str(root.shape()));
        root.grad_ptr()[0] += real_t(1);
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
            if (it->output.has_grad()) it->vjp();
        }
    }

    // Zero every gradient buffer reachable from the recorded operations.
    void zero_grads() {
        for (auto& e : entries_) {
            e.output.zero_grad();
            for (auto& in : e.inputs) in.zero_grad();
        }
    }

    void clear() { entries_.clear(); }
    size_t size() const { return entries_.size(); }

private:
    std::vector<Entry> entries_;
};

// Thread-local active tape: one model + tape is confined to one thread
// during training, so each training loop sees its own recording.
GradTape& tape();

bool grad_enabled();

// RAII switch that disables recording (frozen-model inference).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

namespace detail {
void set_grad_enabled(bool v);
}

}  // namespace csipred
