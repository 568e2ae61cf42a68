#include "emcot/kernels.hpp"
#include "emcot/util.hpp"

#include <chrono>
#include <cstdio>
#include <random>

using namespace emcot;

namespace {

double seconds(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Mat random_mat(int r, int c, Rng& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  Mat m(r, c);
  for (int j = 0; j < c; ++j)
    for (int i = 0; i < r; ++i) m(i, j) = gauss(rng);
  return m;
}

template <class F>
double time_best_of(int reps, F&& f) {
  double best = 1e18;
  for (int k = 0; k < reps; ++k) {
    auto t0 = std::chrono::steady_clock::now();
    f();
    best = std::min(best, seconds(t0));
  }
  return best;
}

}  // namespace

int main() {
  Rng rng = make_rng(1);
  std::printf("kernel            size          serial_s  parallel_s  speedup  max_diff\n");

  for (int n : {64, 256, 512}) {
    Mat a = random_mat(n, n, rng), b = random_mat(n, n, rng);
    Mat out_s(n, n), out_p(n, n);
    double ts = time_best_of(3, [&] { kernels::matmul_serial(a, b, out_s); });
    double tp = time_best_of(3, [&] { kernels::matmul(a, b, out_p); });
    double diff = (out_s - out_p).cwiseAbs().maxCoeff();
    std::printf("matmul            %4dx%-4d     %8.4f  %9.4f  %6.2fx  %.2e\n", n, n, ts,
                tp, ts / tp, diff);
  }

  for (int n : {256, 1024}) {
    Mat logits = random_mat(n, n, rng);
    MaskMat mask(n, n);
    std::uniform_int_distribution<int> coin(0, 1);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) mask(i, j) = static_cast<uint8_t>(coin(rng));
    Mat out_s(n, n), out_p(n, n);
    double ts =
        time_best_of(3, [&] { kernels::masked_softmax_rows_serial(logits, mask, out_s); });
    double tp = time_best_of(3, [&] { kernels::masked_softmax_rows(logits, mask, out_p); });
    double diff = (out_s - out_p).cwiseAbs().maxCoeff();
    std::printf("masked_softmax    %4dx%-4d     %8.4f  %9.4f  %6.2fx  %.2e\n", n, n, ts,
                tp, ts / tp, diff);
  }
  return 0;
}
