#include "csipred/optim.hpp"

#include <cmath>

namespace csipred {

void adam_step(std::vector<Tensor>& params, AdamState& state) {
    if (state.lr <= 0) throw ParamError("adam_step: lr must be > 0");
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(static_cast<size_t>(params[i].numel()), real_t(0));
            state.v[i].assign(static_cast<size_t>(params[i].numel()), real_t(0));
        }
    }
    if (state.m.size() != params.size())
        throw ParamError("adam_step: state tracks " + std::to_string(state.m.size()) + " params, got " +
                         std::to_string(params.size()));
    state.step_count += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i];
        if (state.m[i].size() != static_cast<size_t>(p.numel()))
            throw ShapeError("adam_step: moment buffer does not match parameter shape");
        if (!p.has_grad()) continue;  // zero gradient: parameter unchanged
        const real_t* g = p.grad().data();
        real_t* w = p.ptr();
        real_t* m = state.m[i].data();
        real_t* v = state.v[i].data();
        const std::int64_t n = p.numel();
        for (std::int64_t j = 0; j < n; ++j) {
            m[j] = static_cast<real_t>(state.beta1 * m[j] + (1.0 - state.beta1) * g[j]);
            v[j] = static_cast<real_t>(state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j]);
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            w[j] -= static_cast<real_t>(state.lr * mhat / (std::sqrt(vhat) + state.eps));
        }
    }
}

}  // namespace csipred
