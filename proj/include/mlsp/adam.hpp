#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "mlsp/graph.hpp"

namespace mlsp::nn {

// Adam with bias correction. beta1/beta2/eps follow the framework defaults the
// training recipe assumes; only the learning rate is scheduled externally.
template <typename T>
struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-7;
    int64_t t = 0;
    std::vector<Tensor<T>> m, v;

    void init_for(const std::vector<NamedParam<T>>& params) {
        t = 0;
        m.clear();
        v.clear();
        for (const auto& np : params) {
            m.push_back(Tensor<T>(np.param->value.shape));
            v.push_back(Tensor<T>(np.param->value.shape));
        }
    }

    bool initialized() const { return !m.empty(); }
};

template <typename T>
void adam_step(const std::vector<NamedParam<T>>& params, AdamState<T>& st, double lr) {
    if (lr <= 0.0) throw DataError("adam: learning rate must be positive");
    if (!st.initialized()) st.init_for(params);
    if (st.m.size() != params.size()) throw DataError("adam: state does not match parameter list");
    st.t += 1;
    const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.t));
    const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.t));
    for (size_t i = 0; i < params.size(); ++i) {
        Param<T>& p = *params[i].param;
        if (p.grad.shape != p.value.shape || st.m[i].shape != p.value.shape)
            throw DataError("adam: shape mismatch for " + params[i].name);
        for (int64_t j = 0; j < p.value.numel(); ++j) {
            const double g = static_cast<double>(p.grad[j]);
            if (!std::isfinite(g))
                throw NumericError("adam: non-finite gradient in " + params[i].name);
            const double mj = st.beta1 * static_cast<double>(st.m[i][j]) + (1.0 - st.beta1) * g;
            const double vj = st.beta2 * static_cast<double>(st.v[i][j]) + (1.0 - st.beta2) * g * g;
            st.m[i][j] = static_cast<T>(mj);
            st.v[i][j] = static_cast<T>(vj);
            const double mhat = mj / bc1;
            const double vhat = vj / bc2;
            p.value[j] = static_cast<T>(static_cast<double>(p.value[j]) -
                                        lr * mhat / (std::sqrt(vhat) + st.eps));
        }
    }
}

}  // namespace mlsp::nn
