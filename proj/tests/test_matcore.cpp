#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ipa/linalg.hpp"
#include "ipa/matrix.hpp"
#include "ipa/rng.hpp"
#include "reference/reference.hpp"

using namespace ipa;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
    Matrix m(r, c);
    for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = rng.gaussian();
    return m;
}

Matrix random_symmetric(std::size_t n, Rng& rng) {
    Matrix a = random_matrix(n, n, rng);
    Matrix s(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) s(i, j) = 0.5 * (a(i, j) + a(j, i));
    return s;
}

}  // namespace

TEST_CASE("matmul: identity and hand values") {
    Rng rng(1);
    Matrix m = random_matrix(3, 3, rng);
    CHECK(bitwise_equal(matmul(Matrix::identity(3), m), m));

    Matrix a{{1, 2}, {3, 4}};
    Matrix b{{1}, {1}};
    Matrix c = matmul(a, b);
    CHECK(c(0, 0) == 3.0);
    CHECK(c(1, 0) == 7.0);
}

TEST_CASE("matmul: bitwise match against serial triple-loop oracle") {
    Rng rng(7);
    Matrix a = random_matrix(7, 5, rng);
    Matrix b = random_matrix(5, 3, rng);
    CHECK(bitwise_equal(matmul(a, b), ref::matmul_serial(a, b)));

    // Sizes above the parallel threshold must stay bitwise identical too.
    Matrix big_a = random_matrix(64, 48, rng);
    Matrix big_b = random_matrix(48, 64, rng);
    CHECK(bitwise_equal(matmul(big_a, big_b), ref::matmul_serial(big_a, big_b)));
}

TEST_CASE("matmul: dimension mismatch and non-finite rejection") {
    Matrix a(2, 3, 1.0);
    Matrix b(2, 3, 1.0);
    CHECK_THROWS_AS(matmul(a, b), Error);

    Matrix bad(3, 2, 1.0);
    bad(1, 1) = std::nan("");
    CHECK_THROWS_AS(matmul(a, bad), Error);
}

TEST_CASE("matmul: associativity on random triples") {
    Rng rng(11);
    for (int trial = 0; trial < 5; ++trial) {
        Matrix a = random_matrix(6, 4, rng);
        Matrix b = random_matrix(4, 5, rng);
        Matrix c = random_matrix(5, 3, rng);
        Matrix left = matmul(matmul(a, b), c);
        Matrix right = matmul(a, matmul(b, c));
        CHECK(max_abs_diff(left, right) <= 1e-10 * std::max(1.0, max_abs(left)));
    }
}

TEST_CASE("sym_eig_desc: diagonal matrix") {
    Matrix d{{3, 0, 0}, {0, 1, 0}, {0, 0, 2}};
    EigResult r = sym_eig_desc(d);
    CHECK(r.eigenvalues[0] == doctest::Approx(3.0));
    CHECK(r.eigenvalues[1] == doctest::Approx(2.0));
    CHECK(r.eigenvalues[2] == doctest::Approx(1.0));
    // eigenvectors are permuted identity columns
    CHECK(r.eigenvectors(0, 0) == doctest::Approx(1.0));
    CHECK(r.eigenvectors(2, 1) == doctest::Approx(1.0));
    CHECK(r.eigenvectors(1, 2) == doctest::Approx(1.0));
}

TEST_CASE("sym_eig_desc: 2x2 hand computation") {
    Matrix s{{2, 1}, {1, 2}};
    EigResult r = sym_eig_desc(s);
    const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    CHECK(r.eigenvalues[0] == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(r.eigenvalues[1] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r.eigenvectors(0, 0) == doctest::Approx(inv_sqrt2).epsilon(1e-12));
    CHECK(r.eigenvectors(1, 0) == doctest::Approx(inv_sqrt2).epsilon(1e-12));
    // sign convention: first of the tied max-magnitude entries is positive
    CHECK(r.eigenvectors(0, 1) == doctest::Approx(inv_sqrt2).epsilon(1e-12));
    CHECK(r.eigenvectors(1, 1) == doctest::Approx(-inv_sqrt2).epsilon(1e-12));
}

TEST_CASE("sym_eig_desc: reconstruction, orthonormality, trace on random input") {
    Rng rng(23);
    for (int trial = 0; trial < 4; ++trial) {
        Matrix s = random_symmetric(10, rng);
        EigResult r = sym_eig_desc(s);
        const double snorm = frobenius_norm(s);

        // residual s*v = lambda*v
        for (std::size_t k = 0; k < 10; ++k) {
            Vec v = r.eigenvectors.col_vec(k);
            Vec sv = matvec(s, v);
            for (std::size_t i = 0; i < 10; ++i)
                CHECK(std::abs(sv[i] - r.eigenvalues[k] * v[i]) <= 1e-9 * snorm);
        }

        // V * diag(lambda) * V^T == s
        Matrix vd = r.eigenvectors;
        for (std::size_t i = 0; i < 10; ++i)
            for (std::size_t k = 0; k < 10; ++k) vd(i, k) *= r.eigenvalues[k];
        Matrix rec = matmul(vd, transpose(r.eigenvectors));
        CHECK(max_abs_diff(rec, s) <= 1e-9 * std::max(1.0, snorm));

        // orthonormality
        Matrix vtv = matmul(transpose(r.eigenvectors), r.eigenvectors);
        CHECK(max_abs_diff(vtv, Matrix::identity(10)) <= 1e-10);

        // descending order and trace identity
        double trace = 0.0, sum = 0.0;
        for (std::size_t i = 0; i < 10; ++i) {
            trace += s(i, i);
            sum += r.eigenvalues[i];
            if (i > 0) CHECK(r.eigenvalues[i] <= r.eigenvalues[i - 1]);
        }
        CHECK(std::abs(sum - trace) <= 1e-9 * std::max(1.0, std::abs(trace)));
    }
}

TEST_CASE("sym_eig_desc: non-symmetric input rejected") {
    Matrix s{{1, 2}, {0, 1}};
    CHECK_THROWS_AS(sym_eig_desc(s), Error);
}

TEST_CASE("thin_svd: diagonal and rank-1") {
    Matrix d{{2, 0}, {0, 1}};
    SvdResult r = thin_svd(d);
    CHECK(r.s[0] == doctest::Approx(2.0));
    CHECK(r.s[1] == doctest::Approx(1.0));

    Vec a{1, 2, 3};
    Vec b{4, 5};
    Matrix m = outer(a, b);
    SvdResult r1 = thin_svd(m);
    int above = 0;
    for (double s : r1.s)
        if (s > 1e-10) ++above;
    CHECK(above == 1);
    // u columns stay orthonormal even for the dead direction
    Matrix utu = matmul(transpose(r1.u), r1.u);
    CHECK(max_abs_diff(utu, Matrix::identity(2)) <= 1e-10);
}

TEST_CASE("thin_svd: factorization and cross-check with eigendecomposition") {
    Rng rng(31);
    Matrix m = random_matrix(6, 4, rng);
    SvdResult r = thin_svd(m);

    // m == u * diag(s) * vt
    Matrix us = r.u;
    for (std::size_t i = 0; i < us.rows(); ++i)
        for (std::size_t k = 0; k < us.cols(); ++k) us(i, k) *= r.s[k];
    Matrix rec = matmul(us, r.vt);
    CHECK(max_abs_diff(rec, m) <= 1e-9 * std::max(1.0, frobenius_norm(m)));

    // orthonormal factors
    CHECK(max_abs_diff(matmul(transpose(r.u), r.u), Matrix::identity(4)) <= 1e-10);
    CHECK(max_abs_diff(matmul(r.vt, transpose(r.vt)), Matrix::identity(4)) <= 1e-10);

    // singular values match sqrt(eig(m^T m))
    Matrix mtm = matmul(transpose(m), m);
    EigResult e = sym_eig_desc(mtm);
    for (std::size_t k = 0; k < 4; ++k)
        CHECK(std::abs(r.s[k] - std::sqrt(std::max(0.0, e.eigenvalues[k]))) <= 1e-8);

    // descending, nonnegative
    for (std::size_t k = 0; k < 4; ++k) {
        CHECK(r.s[k] >= 0.0);
        if (k > 0) CHECK(r.s[k] <= r.s[k - 1]);
    }
}

TEST_CASE("thin_svd: wide matrix and orthonormal-rows input") {
    Rng rng(37);
    Matrix m = random_matrix(3, 8, rng);
    SvdResult r = thin_svd(m);
    CHECK(r.u.rows() == 3);
    CHECK(r.u.cols() == 3);
    CHECK(r.vt.rows() == 3);
    CHECK(r.vt.cols() == 8);
    Matrix us = r.u;
    for (std::size_t i = 0; i < us.rows(); ++i)
        for (std::size_t k = 0; k < us.cols(); ++k) us(i, k) *= r.s[k];
    CHECK(max_abs_diff(matmul(us, r.vt), m) <= 1e-9 * std::max(1.0, frobenius_norm(m)));

    // all singular values of an orthonormal-rows matrix are 1
    Matrix q = orthonormalize_rows(m);
    SvdResult rq = thin_svd(q);
    for (double s : rq.s) CHECK(std::abs(s - 1.0) <= 1e-10);
}

TEST_CASE("cosine: hand values and scale invariance") {
    CHECK(cosine({1, 0}, {1, 0}) == doctest::Approx(1.0));
    CHECK(cosine({1, 0}, {0, 1}) == doctest::Approx(0.0));
    CHECK(cosine({1, 1}, {2, 2}) == doctest::Approx(1.0));
    CHECK_THROWS_AS(cosine({0, 0}, {1, 0}), Error);
}

TEST_CASE("rng: determinism and distribution sanity") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

    Rng c(42), d(42);
    for (int i = 0; i < 100; ++i) CHECK(c.gaussian() == d.gaussian());

    Rng e(5);
    double sum = 0.0, sq = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        const double g = e.gaussian();
        sum += g;
        sq += g * g;
    }
    CHECK(std::abs(sum / n) < 0.02);
    CHECK(std::abs(sq / n - 1.0) < 0.02);
}

TEST_CASE("rng: permutation covers all indices deterministically") {
    Rng a(9), b(9);
    auto p = a.permutation(50);
    auto q = b.permutation(50);
    CHECK(p == q);
    std::vector<bool> seen(50, false);
    for (auto i : p) seen[i] = true;
    for (bool s : seen) CHECK(s);
}

TEST_CASE("matrix: construction guards") {
    CHECK_THROWS_AS(Matrix(0, 3), Error);
    Matrix empty;
    CHECK(empty.empty());
    CHECK_THROWS_AS(matmul(empty, empty), Error);
}
