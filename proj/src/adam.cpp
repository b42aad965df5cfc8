#include <cmath>

#include "pipsim/autodiff.hpp"

namespace pipsim::ad {

AdamState make_adam(std::span<Parameter* const> params, double lr) {
    AdamState st;
    st.lr = lr;
    for (const Parameter* p : params) {
        st.m.emplace_back(p->value.shape);
        st.v.emplace_back(p->value.shape);
    }
    return st;
}

void adam_step(std::span<Parameter* const> params, AdamState& state) {
    if (params.size() != state.m.size() || params.size() != state.v.size()) {
        throw ShapeError("adam_step: optimizer state tracks " + std::to_string(state.m.size()) + " tensors, given " +
                         std::to_string(params.size()));
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
        const Parameter& p = *params[k];
        if (p.grad.shape != p.value.shape || state.m[k].shape != p.value.shape) {
            throw ShapeError("adam_step: shape mismatch for parameter '" + p.name + "'");
        }
        if (!p.grad.all_finite()) {
            throw NumericError("adam_step: non-finite gradient in parameter '" + p.name + "'");
        }
    }
    state.step += 1;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(state.beta1, t);
    const double bc2 = 1.0 - std::pow(state.beta2, t);
    for (std::size_t k = 0; k < params.size(); ++k) {
        Parameter& p = *params[k];
        Tensor& m = state.m[k];
        Tensor& v = state.v[k];
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double g = p.grad[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p.value[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

}  // namespace pipsim::ad
