#include "gemm.hpp"

#include <cblas.h>

namespace armformer::detail {

namespace {

// Fixed thread count keeps the reduction order, and therefore every result,
// bit-identical from run to run.
struct BlasThreads {
  BlasThreads() { openblas_set_num_threads(1); }
};

}  // namespace

void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k,
          double alpha, const double* a, std::int64_t lda, const double* b, std::int64_t ldb,
          double beta, double* c, std::int64_t ldc) {
  static const BlasThreads threads;
  if (m == 0 || n == 0) return;
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), alpha, a, static_cast<int>(lda), b, static_cast<int>(ldb),
              beta, c, static_cast<int>(ldc));
}

}  // namespace armformer::detail
