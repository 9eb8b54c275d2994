#pragma once

#include "ipa/matrix.hpp"

// Serial reference kernels. Tests use them as independent oracles for the
// parallel kernels in ipa_core, and bench_kernels times both sides.
namespace ipa::ref {

// Naive i-j-k triple loop, single thread.
Matrix matmul_serial(const Matrix& a, const Matrix& b);

Vec matvec_serial(const Matrix& m, const Vec& x);

// Mean squared reconstruction error of projecting rows of x onto the row
// space of u, by direct per-sample evaluation.
double reconstruction_error_serial(const Matrix& u, const Matrix& x, const Vec& mean);

}  // namespace ipa::ref
