#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "mlsp/errors.hpp"
#include "mlsp/tensor.hpp"

namespace mlsp::nn {

template <typename T>
struct LossResult {
    double value = 0.0;
    Tensor<T> grad;  // d loss / d prediction
};

// Mean squared error over all elements; grad = 2 (pred - target) / n.
template <typename T>
LossResult<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
    if (pred.shape != target.shape)
        throw DataError("mse_loss: shape mismatch " + shape_str(pred.shape) + " vs " +
                        shape_str(target.shape));
    if (pred.numel() == 0) throw DataError("mse_loss: empty batch");
    LossResult<T> out;
    out.grad = Tensor<T>(pred.shape);
    const double n = static_cast<double>(pred.numel());
    double acc = 0.0;
    for (int64_t i = 0; i < pred.numel(); ++i) {
        const double d = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
        acc += d * d;
        out.grad[i] = static_cast<T>(2.0 * d / n);
    }
    out.value = acc / n;
    return out;
}

// Softmax cross-entropy on logits, stabilized by max subtraction.
// value = mean over rows of (logsumexp(z) - z_class); grad = (softmax - onehot)/rows.
template <typename T>
LossResult<T> cross_entropy_loss(const Tensor<T>& logits, const std::vector<int>& classes) {
    if (logits.rank() != 2)
        throw DataError("cross_entropy_loss: logits must be [batch x classes], got " +
                        shape_str(logits.shape));
    const int64_t b = logits.dim(0), c = logits.dim(1);
    if (static_cast<int64_t>(classes.size()) != b)
        throw DataError("cross_entropy_loss: class count does not match batch");
    LossResult<T> out;
    out.grad = Tensor<T>(logits.shape);
    double acc = 0.0;
    for (int64_t r = 0; r < b; ++r) {
        const int cls = classes[static_cast<size_t>(r)];
        if (cls < 0 || cls >= c)
            throw DataError("cross_entropy_loss: class index " + std::to_string(cls) +
                            " out of range [0," + std::to_string(c) + ")");
        const T* row = logits.ptr() + r * c;
        double mx = static_cast<double>(row[0]);
        for (int64_t i = 1; i < c; ++i) mx = std::max(mx, static_cast<double>(row[i]));
        double denom = 0.0;
        for (int64_t i = 0; i < c; ++i) denom += std::exp(static_cast<double>(row[i]) - mx);
        acc += std::log(denom) + mx - static_cast<double>(row[cls]);
        for (int64_t i = 0; i < c; ++i) {
            const double p = std::exp(static_cast<double>(row[i]) - mx) / denom;
            out.grad[r * c + i] =
                static_cast<T>((p - (i == cls ? 1.0 : 0.0)) / static_cast<double>(b));
        }
    }
    out.value = acc / static_cast<double>(b);
    return out;
}

// Single-sample convenience overload.
template <typename T>
LossResult<T> cross_entropy_loss(const Tensor<T>& logits, int class_index) {
    if (logits.rank() == 1)
        return cross_entropy_loss(logits.reshaped({1, logits.numel()}),
                                  std::vector<int>{class_index});
    return cross_entropy_loss(logits, std::vector<int>{class_index});
}

}  // namespace mlsp::nn
