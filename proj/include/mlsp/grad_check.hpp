#pragma once

#include <cmath>
#include <cstdint>

#include "mlsp/graph.hpp"

namespace mlsp::nn {

// Central finite-difference verification of the analytic gradients, run in
// 64-bit with dropout disabled and batch statistics frozen (Mode::GradCheck).
// The probe loss is a fixed random linear functional of the model output,
// which exercises every Jacobian without favoring any particular loss.
//
// Returns max over trainable parameters of
//   |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
inline constexpr double kGradCheckFloor = 1e-8;

inline double grad_check(ModelGraph<double>& model, const Tensor<double>& input,
                         double epsilon = 1e-5, uint64_t probe_seed = 7) {
    // Probe coefficients fixed up front; forward once to learn the output shape.
    Tensor<double> out = model.forward(input, Mode::GradCheck);
    Rng rng(keyed_u64(probe_seed, 0xc0ffee, out.numel()));
    Tensor<double> coeff(out.shape);
    for (int64_t i = 0; i < coeff.numel(); ++i) coeff[i] = rng.next_range(-1.0, 1.0);

    auto probe = [&]() {
        Tensor<double> y = model.forward(input, Mode::GradCheck);
        double acc = 0.0;
        for (int64_t i = 0; i < y.numel(); ++i) acc += coeff[i] * y[i];
        return acc;
    };

    model.zero_grads();
    model.forward(input, Mode::GradCheck);
    model.backward(coeff, model.output_node());

    double worst = 0.0;
    for (auto& np : model.trainable_parameters()) {
        Param<double>& p = *np.param;
        for (int64_t j = 0; j < p.value.numel(); ++j) {
            const double saved = p.value[j];
            p.value[j] = saved + epsilon;
            const double up = probe();
            p.value[j] = saved - epsilon;
            const double down = probe();
            p.value[j] = saved;
            const double numeric = (up - down) / (2.0 * epsilon);
            const double analytic = p.grad[j];
            const double rel = std::abs(analytic - numeric) /
                               std::max({std::abs(analytic), std::abs(numeric), kGradCheckFloor});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

}  // namespace mlsp::nn
