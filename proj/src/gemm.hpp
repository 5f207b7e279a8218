#pragma once

#include <cstdint>

namespace armformer::detail {

/// C = alpha * op(A) * op(B) + beta * C, row-major, op = transpose when the
/// flag is set. M x N result, K inner.
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k,
          double alpha, const double* a, std::int64_t lda, const double* b, std::int64_t ldb,
          double beta, double* c, std::int64_t ldc);

}  // namespace armformer::detail
