#pragma once

#include <Eigen/Dense>

namespace emcot {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using MaskMat = Eigen::Matrix<uint8_t, -1, -1>;

namespace kernels {

// Production kernels: OpenMP-parallel over independent output rows, so the
// result is bit-identical regardless of thread count.
void matmul(const Mat& a, const Mat& b, Mat& out);
void matmul_add(const Mat& a, const Mat& b, Mat& out);  // out += a * b

// Masked row-wise softmax. mask(i,j) == 0 means the logit is excluded; a row
// with no allowed entry softmaxes to all zeros.
void masked_softmax_rows(const Mat& logits, const Eigen::Matrix<uint8_t, -1, -1>& mask,
                         Mat& out);

// Serial reference implementations (naive loops). Kept for the kernel tests
// and the benchmark target; not used on the hot path.
void matmul_serial(const Mat& a, const Mat& b, Mat& out);
void masked_softmax_rows_serial(const Mat& logits,
                                const Eigen::Matrix<uint8_t, -1, -1>& mask, Mat& out);

}  // namespace kernels
}  // namespace emcot
