#pragma once

#include <Eigen/Core>

namespace duflow::detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;

// C (m x n) = A (m x k) * B (k x n), all row-major and contiguous.
template <typename T>
void gemm_nn(int m, int n, int k, const T *a, const T *b, T *c, bool accumulate = false) {
    ConstMatrixMap<T> A(a, m, k);
    ConstMatrixMap<T> B(b, k, n);
    MatrixMap<T> C(c, m, n);
    if (accumulate)
        C.noalias() += A * B;
    else
        C.noalias() = A * B;
}

// C (m x n) += A (m x k) * B^T where B is (n x k).
template <typename T>
void gemm_nt(int m, int n, int k, const T *a, const T *b, T *c, bool accumulate = false) {
    ConstMatrixMap<T> A(a, m, k);
    ConstMatrixMap<T> B(b, n, k);
    MatrixMap<T> C(c, m, n);
    if (accumulate)
        C.noalias() += A * B.transpose();
    else
        C.noalias() = A * B.transpose();
}

// C (m x n) = A^T * B where A is (k x m), B is (k x n).
template <typename T>
void gemm_tn(int m, int n, int k, const T *a, const T *b, T *c, bool accumulate = false) {
    ConstMatrixMap<T> A(a, k, m);
    ConstMatrixMap<T> B(b, k, n);
    MatrixMap<T> C(c, m, n);
    if (accumulate)
        C.noalias() += A.transpose() * B;
    else
        C.noalias() = A.transpose() * B;
}

}  // namespace duflow::detail
