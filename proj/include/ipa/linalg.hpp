#pragma once

#include "ipa/matrix.hpp"

namespace ipa {

struct EigResult {
    Vec eigenvalues;      // descending
    Matrix eigenvectors;  // column i pairs with eigenvalues[i]
};

// Symmetric eigendecomposition by cyclic Jacobi sweeps with a fixed
// iteration cap. Eigenvalues descend; each eigenvector is flipped so its
// largest-magnitude entry (first on ties) is positive, which keeps
// serialized spectra byte-stable.
EigResult sym_eig_desc(const Matrix& s);

struct SvdResult {
    Matrix u;   // rows(m) x k, orthonormal columns
    Vec s;      // k singular values, nonnegative descending
    Matrix vt;  // k x cols(m), orthonormal rows
};

// Thin SVD (k = min(rows, cols)) via one-sided Jacobi column
// orthogonalization. Same sign convention as sym_eig_desc, applied to the
// rows of vt.
SvdResult thin_svd(const Matrix& m);

// Orthonormal basis of the row space (rank x cols). Rows with norm below
// rank_tol * s_max are dropped.
Matrix orthonormalize_rows(const Matrix& m, double rank_tol = 1e-12);

}  // namespace ipa
