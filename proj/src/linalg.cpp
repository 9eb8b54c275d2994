#include "ipa/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace ipa {

namespace {

constexpr int kMaxJacobiSweeps = 100;

// Flip sign so the largest-magnitude entry (first index on ties) is positive.
void canonical_sign(double* v, std::size_t n, std::size_t stride) {
    std::size_t best = 0;
    double best_abs = std::abs(v[0]);
    for (std::size_t i = 1; i < n; ++i) {
        const double a = std::abs(v[i * stride]);
        if (a > best_abs) {
            best_abs = a;
            best = i;
        }
    }
    if (v[best * stride] < 0.0)
        for (std::size_t i = 0; i < n; ++i) v[i * stride] = -v[i * stride];
}

double offdiag_norm(const Matrix& a) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j)
            if (i != j) s += a(i, j) * a(i, j);
    return std::sqrt(s);
}

// Indices sorted by descending value, stable on ties.
std::vector<std::size_t> desc_order(const Vec& vals) {
    std::vector<std::size_t> idx(vals.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return vals[a] > vals[b]; });
    return idx;
}

}  // namespace

EigResult sym_eig_desc(const Matrix& s) {
    require(!s.empty(), "sym_eig_desc: empty matrix");
    require(s.rows() == s.cols(), "sym_eig_desc: matrix not square");
    ensure_finite(s, "sym_eig_desc input");

    const std::size_t n = s.rows();
    const double scale = std::max(1.0, max_abs(s));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            require(std::abs(s(i, j) - s(j, i)) <= 1e-12 * scale,
                    "sym_eig_desc: matrix not symmetric");

    // Work on the symmetrized copy so tiny input asymmetry cannot bias the
    // rotation sequence.
    Matrix a(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) a(i, j) = 0.5 * (s(i, j) + s(j, i));
    Matrix v = Matrix::identity(n);

    const double fro = frobenius_norm(a);
    const double tol = 1e-14 * std::max(fro, 1e-300);

    bool converged = n == 1 || offdiag_norm(a) <= tol;
    for (int sweep = 0; sweep < kMaxJacobiSweeps && !converged; ++sweep) {
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (std::abs(apq) <= 1e-300) continue;
                const double app = a(p, p);
                const double aqq = a(q, q);
                const double theta = (aqq - app) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double sn = t * c;

                for (std::size_t i = 0; i < n; ++i) {
                    const double aip = a(i, p), aiq = a(i, q);
                    a(i, p) = c * aip - sn * aiq;
                    a(i, q) = sn * aip + c * aiq;
                }
                for (std::size_t j = 0; j < n; ++j) {
                    const double apj = a(p, j), aqj = a(q, j);
                    a(p, j) = c * apj - sn * aqj;
                    a(q, j) = sn * apj + c * aqj;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double vip = v(i, p), viq = v(i, q);
                    v(i, p) = c * vip - sn * viq;
                    v(i, q) = sn * vip + c * viq;
                }
            }
        }
        converged = offdiag_norm(a) <= tol;
    }
    require(converged, "sym_eig_desc: Jacobi iteration cap exceeded");

    Vec diag(n);
    for (std::size_t i = 0; i < n; ++i) diag[i] = a(i, i);
    const auto order = desc_order(diag);

    EigResult r;
    r.eigenvalues.resize(n);
    r.eigenvectors = Matrix(n, n);
    for (std::size_t k = 0; k < n; ++k) {
        r.eigenvalues[k] = diag[order[k]];
        for (std::size_t i = 0; i < n; ++i) r.eigenvectors(i, k) = v(i, order[k]);
        canonical_sign(&r.eigenvectors(0, k), n, n);
    }
    return r;
}

SvdResult thin_svd(const Matrix& m) {
    require(!m.empty(), "thin_svd: empty matrix");
    ensure_finite(m, "thin_svd input");

    if (m.rows() < m.cols()) {
        // m = (v s u^T)^T of the transposed problem.
        SvdResult t = thin_svd(transpose(m));
        SvdResult r;
        r.u = transpose(t.vt);
        r.s = t.s;
        r.vt = transpose(t.u);
        // Re-apply the sign convention to vt rows (it was applied to t.vt).
        for (std::size_t k = 0; k < r.s.size(); ++k) {
            std::size_t best = 0;
            double best_abs = std::abs(r.vt(k, 0));
            for (std::size_t j = 1; j < r.vt.cols(); ++j) {
                const double a = std::abs(r.vt(k, j));
                if (a > best_abs) {
                    best_abs = a;
                    best = j;
                }
            }
            if (r.vt(k, best) < 0.0) {
                for (std::size_t j = 0; j < r.vt.cols(); ++j) r.vt(k, j) = -r.vt(k, j);
                for (std::size_t i = 0; i < r.u.rows(); ++i) r.u(i, k) = -r.u(i, k);
            }
        }
        return r;
    }

    const std::size_t rows = m.rows(), cols = m.cols();
    Matrix a = m;                       // columns get rotated in place
    Matrix v = Matrix::identity(cols);  // accumulated right rotations

    // One-sided Jacobi (Hestenes): sweep column pairs until all are
    // numerically orthogonal.
    bool converged = cols == 1;
    for (int sweep = 0; sweep < kMaxJacobiSweeps && !converged; ++sweep) {
        // Round-off churn between already-fixed pairs can hold the worst
        // coupling just above a tight threshold forever, so late sweeps
        // settle for one digit less instead of spinning to the cap.
        const double tol = sweep < 60 ? 1e-14 : 1e-13;
        // Rank-deficient inputs leave columns of pure rounding dust; their
        // mutual angles are meaningless and rotating two near-parallel dust
        // columns cancels catastrophically, spawning fresh noise forever.
        // Anything this far below the dominant column is orthogonal enough.
        double max_sq = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            double s = 0.0;
            for (std::size_t i = 0; i < rows; ++i) s += a(i, j) * a(i, j);
            if (s > max_sq) max_sq = s;
        }
        const double dead_sq = 1e-60 * max_sq;
        converged = true;
        for (std::size_t p = 0; p + 1 < cols; ++p) {
            for (std::size_t q = p + 1; q < cols; ++q) {
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (std::size_t i = 0; i < rows; ++i) {
                    const double xp = a(i, p), xq = a(i, q);
                    alpha += xp * xp;
                    beta += xq * xq;
                    gamma += xp * xq;
                }
                if (std::min(alpha, beta) <= dead_sq) continue;  // dust column
                if (std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
                converged = false;

                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(zeta) + std::sqrt(zeta * zeta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double sn = t * c;
                for (std::size_t i = 0; i < rows; ++i) {
                    const double xp = a(i, p), xq = a(i, q);
                    a(i, p) = c * xp - sn * xq;
                    a(i, q) = sn * xp + c * xq;
                }
                for (std::size_t i = 0; i < cols; ++i) {
                    const double vp = v(i, p), vq = v(i, q);
                    v(i, p) = c * vp - sn * vq;
                    v(i, q) = sn * vp + c * vq;
                }
            }
        }
    }
    require(converged, "thin_svd: Jacobi iteration cap exceeded");

    Vec norms(cols);
    for (std::size_t j = 0; j < cols; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < rows; ++i) s += a(i, j) * a(i, j);
        norms[j] = std::sqrt(s);
    }
    const auto order = desc_order(norms);
    const double s_max = norms.empty() ? 0.0 : norms[order[0]];

    SvdResult r;
    r.s.resize(cols);
    r.u = Matrix(rows, cols, 0.0);
    r.vt = Matrix(cols, cols);
    std::size_t fill_from = cols;  // first column needing basis completion
    for (std::size_t k = 0; k < cols; ++k) {
        const std::size_t j = order[k];
        r.s[k] = norms[j];
        for (std::size_t i = 0; i < cols; ++i) r.vt(k, i) = v(i, j);
        if (norms[j] > 1e-13 * s_max && norms[j] > 0.0) {
            const double inv = 1.0 / norms[j];
            for (std::size_t i = 0; i < rows; ++i) r.u(i, k) = a(i, j) * inv;
        } else {
            fill_from = std::min(fill_from, k);
        }
    }

    // Rank-deficient input: the dead u columns carry no direction of their
    // own, so complete them to an orthonormal basis from the standard one.
    if (fill_from < cols) {
        std::size_t e = 0;
        for (std::size_t k = fill_from; k < cols; ++k) {
            for (; e < rows; ++e) {
                Vec cand(rows, 0.0);
                cand[e] = 1.0;
                for (std::size_t c2 = 0; c2 < k; ++c2) {
                    double d = 0.0;
                    for (std::size_t i = 0; i < rows; ++i) d += cand[i] * r.u(i, c2);
                    for (std::size_t i = 0; i < rows; ++i) cand[i] -= d * r.u(i, c2);
                }
                const double nn = norm2(cand);
                if (nn > 1e-6) {
                    for (std::size_t i = 0; i < rows; ++i) r.u(i, k) = cand[i] / nn;
                    ++e;
                    break;
                }
            }
            require(e <= rows, "thin_svd: basis completion failed");
        }
    }

    for (std::size_t k = 0; k < cols; ++k) {
        std::size_t best = 0;
        double best_abs = std::abs(r.vt(k, 0));
        for (std::size_t j = 1; j < cols; ++j) {
            const double aj = std::abs(r.vt(k, j));
            if (aj > best_abs) {
                best_abs = aj;
                best = j;
            }
        }
        if (r.vt(k, best) < 0.0) {
            for (std::size_t j = 0; j < cols; ++j) r.vt(k, j) = -r.vt(k, j);
            for (std::size_t i = 0; i < rows; ++i) r.u(i, k) = -r.u(i, k);
        }
    }
    return r;
}

Matrix orthonormalize_rows(const Matrix& m, double rank_tol) {
    SvdResult svd = thin_svd(m);
    const double s_max = svd.s.empty() ? 0.0 : svd.s[0];
    std::size_t rank = 0;
    for (double s : svd.s)
        if (s > rank_tol * s_max && s > 0.0) ++rank;
    require(rank >= 1, "orthonormalize_rows: zero-rank input");
    Matrix q(rank, m.cols());
    for (std::size_t i = 0; i < rank; ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) q(i, j) = svd.vt(i, j);
    return q;
}

}  // namespace ipa
