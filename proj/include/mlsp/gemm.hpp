#pragma once

#include <Eigen/Core>

#include <cstdint>

namespace mlsp::detail {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// C[m,n] = op(A) * op(B), optionally accumulating into C. Row-major buffers.
// All heavy math in the layer kernels funnels through here; Eigen's packed
// kernels run single-threaded, so results are bit-reproducible run to run.
template <typename T>
void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k,
          const T* a, const T* b, T* c, bool accumulate) {
    Eigen::Map<const MatRM<T>> A(a, trans_a ? k : m, trans_a ? m : k);
    Eigen::Map<const MatRM<T>> B(b, trans_b ? n : k, trans_b ? k : n);
    Eigen::Map<MatRM<T>> C(c, m, n);
    if (accumulate) {
        if (trans_a && trans_b)
            C.noalias() += A.transpose() * B.transpose();
        else if (trans_a)
            C.noalias() += A.transpose() * B;
        else if (trans_b)
            C.noalias() += A * B.transpose();
        else
            C.noalias() += A * B;
    } else {
        if (trans_a && trans_b)
            C.noalias() = A.transpose() * B.transpose();
        else if (trans_a)
            C.noalias() = A.transpose() * B;
        else if (trans_b)
            C.noalias() = A * B.transpose();
        else
            C.noalias() = A * B;
    }
}

}  // namespace mlsp::detail
