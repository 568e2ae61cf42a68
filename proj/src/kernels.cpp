#include "emcot/kernels.hpp"

#include <cmath>
#include <stdexcept>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace emcot::kernels {

namespace {
constexpr Eigen::Index kRowBlock = 64;
}

void matmul(const Mat& a, const Mat& b, Mat& out) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: shape mismatch");
  out.resize(a.rows(), b.cols());
  const Eigen::Index nblocks = (a.rows() + kRowBlock - 1) / kRowBlock;
#pragma omp parallel for schedule(static)
  for (Eigen::Index blk = 0; blk < nblocks; ++blk) {
    const Eigen::Index r0 = blk * kRowBlock;
    const Eigen::Index rows = std::min(kRowBlock, a.rows() - r0);
    out.middleRows(r0, rows).noalias() = a.middleRows(r0, rows) * b;
  }
}

void matmul_add(const Mat& a, const Mat& b, Mat& out) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul_add: shape mismatch");
  if (out.rows() != a.rows() || out.cols() != b.cols())
    throw std::invalid_argument("matmul_add: output shape mismatch");
  const Eigen::Index nblocks = (a.rows() + kRowBlock - 1) / kRowBlock;
#pragma omp parallel for schedule(static)
  for (Eigen::Index blk = 0; blk < nblocks; ++blk) {
    const Eigen::Index r0 = blk * kRowBlock;
    const Eigen::Index rows = std::min(kRowBlock, a.rows() - r0);
    out.middleRows(r0, rows).noalias() += a.middleRows(r0, rows) * b;
  }
}

void masked_softmax_rows(const Mat& logits, const Eigen::Matrix<uint8_t, -1, -1>& mask,
                         Mat& out) {
  if (logits.rows() != mask.rows() || logits.cols() != mask.cols())
    throw std::invalid_argument("masked_softmax: shape mismatch");
  out.resize(logits.rows(), logits.cols());
#pragma omp parallel for schedule(static)
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < logits.cols(); ++j)
      if (mask(i, j)) mx = std::max(mx, logits(i, j));
    if (!std::isfinite(mx)) {
      out.row(i).setZero();
      continue;
    }
    double sum = 0;
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
      double e = mask(i, j) ? std::exp(logits(i, j) - mx) : 0.0;
      out(i, j) = e;
      sum += e;
    }
    out.row(i) /= sum;
  }
}

void matmul_serial(const Mat& a, const Mat& b, Mat& out) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul_serial: shape mismatch");
  out.setZero(a.rows(), b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      for (Eigen::Index j = 0; j < b.cols(); ++j) out(i, j) += aik * b(k, j);
    }
}

void masked_softmax_rows_serial(const Mat& logits,
                                const Eigen::Matrix<uint8_t, -1, -1>& mask, Mat& out) {
  out.resize(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < logits.cols(); ++j)
      if (mask(i, j)) mx = std::max(mx, logits(i, j));
    if (!std::isfinite(mx)) {
      out.row(i).setZero();
      continue;
    }
    double sum = 0;
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
      double e = mask(i, j) ? std::exp(logits(i, j) - mx) : 0.0;
      out(i, j) = e;
      sum += e;
    }
    for (Eigen::Index j = 0; j < logits.cols(); ++j) out(i, j) /= sum;
  }
}

}  // namespace emcot::kernels
