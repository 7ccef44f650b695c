#pragma once

#include "csipred/tensor.hpp"

namespace csipred {

// Bias-corrected Adam. Moment buffers are allocated on first use and always
// match the parameter shapes; step_count increases by exactly 1 per update.
struct AdamState {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::int64_t step_count = 0;
    std::vector<std::vector<real_t>> m;
    std::vector<std::vector<real_t>> v;
};

// One update over the parameter list using each tensor's accumulated
// gradient (an absent gradient buffer counts as all-zero).
void adam_step(std::vector<Tensor>& params, AdamState& state);

// Ordered name -> tensor registry shared by all models; iteration order is
// insertion order so checkpoints and parameter counts are reproducible.
class ParamRegistry {
public:
    Tensor& add(const std::string& name, Tensor t, bool trainable) {
        t.set_requires_grad(trainable);
        items_.emplace_back(name, std::move(t));
        return items_.back().second;
    }

    const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
    std::vector<std::pair<std::string, Tensor>>& items() { return items_; }

    Tensor find(const std::string& name) const {
        for (const auto& [n, t] : items_)
            if (n == name) return t;
        throw ParamError("unknown parameter: " + name);
    }

    std::vector<Tensor> trainable() const {
        std::vector<Tensor> out;
        for (const auto& [n, t] : items_)
            if (t.requires_grad()) out.push_back(t);
        return out;
    }

    std::int64_t total_count() const {
        std::int64_t n = 0;
        for (const auto& [name, t] : items_) n += t.numel();
        return n;
    }

    std::int64_t trainable_count() const {
        std::int64_t n = 0;
        for (const auto& [name, t] : items_)
            if (t.requires_grad()) n += t.numel();
        return n;
    }

    void zero_grads() {
        for (auto& [n, t] : items_) t.zero_grad();
    }

private:
    std::vector<std::pair<std::string, Tensor>> items_;
};

}  // namespace csipred
