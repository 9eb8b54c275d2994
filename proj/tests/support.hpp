#pragma once

#include <cmath>
#include <cstddef>
#include <utility>

#include "ipa/features.hpp"
#include "ipa/linalg.hpp"
#include "ipa/matrix.hpp"
#include "ipa/rng.hpp"

namespace testsup {

// n x n orthogonal matrix (orthonormal rows) from a Gaussian draw.
inline ipa::Matrix random_orthogonal(std::size_t n, ipa::Rng& rng) {
    ipa::Matrix g = ipa::gaussian_matrix(n, n, 1.0, rng);
    ipa::Matrix q = ipa::orthonormalize_rows(g);
    ipa::require(q.rows() == n, "random_orthogonal: degenerate draw");
    return q;
}

// Zero-mean Gaussian samples whose population covariance has the given
// spectrum: rows of G*diag(sqrt(spectrum)), optionally spun by a random
// rotation so nothing is axis-aligned.
inline ipa::FeatureSet spectrum_features(std::size_t n, const ipa::Vec& spectrum,
                                         ipa::Rng& rng, bool rotate = false) {
    const std::size_t d = spectrum.size();
    ipa::Matrix x = ipa::gaussian_matrix(n, d, 1.0, rng);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) x(i, j) *= std::sqrt(spectrum[j]);
    if (rotate) x = ipa::matmul(x, random_orthogonal(d, rng));
    ipa::FeatureSet fs;
    fs.data = std::move(x);
    fs.layer_id = 0;
    fs.weight_name = "test.features";
    return fs;
}

// Rows [r0, r1) of m as a new matrix.
inline ipa::Matrix slice_rows(const ipa::Matrix& m, std::size_t r0, std::size_t r1) {
    ipa::require(r0 < r1 && r1 <= m.rows(), "slice_rows: bad range");
    ipa::Matrix out(r1 - r0, m.cols());
    for (std::size_t i = r0; i < r1; ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) out(i - r0, j) = m(i, j);
    return out;
}

// Empirical second moment (1/N) X^T X, optionally mean-centered first.
inline ipa::Matrix empirical_sigma(const ipa::Matrix& x, bool centered) {
    const std::size_t n = x.rows(), d = x.cols();
    ipa::Vec mu(d, 0.0);
    if (centered) {
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) mu[j] += x(i, j);
        for (double& v : mu) v /= static_cast<double>(n);
    }
    ipa::Matrix xc(n, d);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) xc(i, j) = x(i, j) - mu[j];
    ipa::Matrix sigma = ipa::matmul(ipa::transpose(xc), xc);
    for (std::size_t i = 0; i < sigma.size(); ++i)
        sigma.data()[i] /= static_cast<double>(n);
    return sigma;
}

}  // namespace testsup
