#include "ipa/matrix.hpp"

#include <cmath>
#include <cstring>

namespace ipa {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {
    require(rows >= 1 && cols >= 1, "Matrix: rows and cols must be >= 1");
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    require(rows.size() > 0, "Matrix: empty initializer");
    rows_ = rows.size();
    cols_ = rows.begin()->size();
    require(cols_ > 0, "Matrix: empty row in initializer");
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
        require(r.size() == cols_, "Matrix: ragged initializer");
        data_.insert(data_.end(), r.begin(), r.end());
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n, 0.0);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Vec Matrix::row_vec(std::size_t i) const {
    return Vec(row(i), row(i) + cols_);
}

Vec Matrix::col_vec(std::size_t j) const {
    Vec v(rows_);
    for (std::size_t i = 0; i < rows_; ++i) v[i] = (*this)(i, j);
    return v;
}

void Matrix::set_row(std::size_t i, const Vec& v) {
    require(v.size() == cols_, "Matrix::set_row: length mismatch");
    std::memcpy(row(i), v.data(), cols_ * sizeof(double));
}

bool all_finite(const Matrix& m) {
    for (double x : m.storage())
        if (!std::isfinite(x)) return false;
    return true;
}

bool all_finite(const Vec& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

void ensure_finite(const Matrix& m, const char* what) {
    if (!all_finite(m)) throw Error(std::string(what) + ": non-finite entries");
}

void ensure_finite(const Vec& v, const char* what) {
    if (!all_finite(v)) throw Error(std::string(what) + ": non-finite entries");
}

Matrix transpose(const Matrix& m) {
    require(!m.empty(), "transpose: empty matrix");
    Matrix t(m.cols(), m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) t(j, i) = m(i, j);
    return t;
}

Matrix add(const Matrix& a, const Matrix& b) {
    require(a.same_shape(b), "add: shape mismatch");
    Matrix c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] += b.data()[i];
    return c;
}

Matrix sub(const Matrix& a, const Matrix& b) {
    require(a.same_shape(b), "sub: shape mismatch");
    Matrix c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] -= b.data()[i];
    return c;
}

Matrix scale(const Matrix& m, double s) {
    Matrix c = m;
    for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] *= s;
    return c;
}

void axpy(Matrix& a, double s, const Matrix& b) {
    require(a.same_shape(b), "axpy: shape mismatch");
    for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] += s * b.data()[i];
}

void axpy(Vec& a, double s, const Vec& b) {
    require(a.size() == b.size(), "axpy: length mismatch");
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += s * b[i];
}

Matrix outer(const Vec& u, const Vec& v) {
    require(!u.empty() && !v.empty(), "outer: empty vector");
    Matrix m(u.size(), v.size());
    for (std::size_t i = 0; i < u.size(); ++i)
        for (std::size_t j = 0; j < v.size(); ++j) m(i, j) = u[i] * v[j];
    return m;
}

double dot(const Vec& a, const Vec& b) {
    require(a.size() == b.size(), "dot: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm2(const Vec& v) {
    return std::sqrt(dot(v, v));
}

double frobenius_norm(const Matrix& m) {
    double s = 0.0;
    for (double x : m.storage()) s += x * x;
    return std::sqrt(s);
}

double max_abs(const Matrix& m) {
    double s = 0.0;
    for (double x : m.storage()) s = std::max(s, std::abs(x));
    return s;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    require(a.same_shape(b), "max_abs_diff: shape mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        s = std::max(s, std::abs(a.data()[i] - b.data()[i]));
    return s;
}

bool bitwise_equal(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) return false;
    return std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

namespace {
// Below this flop count the parallel-for overhead dominates.
constexpr std::size_t kParallelFlopThreshold = 1u << 16;
}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
    require(!a.empty() && !b.empty(), "matmul: empty operand");
    require(a.cols() == b.rows(), "matmul: dimension mismatch");
    ensure_finite(a, "matmul lhs");
    ensure_finite(b, "matmul rhs");

    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    Matrix c(n, m, 0.0);
    const double* ap = a.data();
    const double* bp = b.data();
    double* cp = c.data();

    const bool parallel = n * k * m >= kParallelFlopThreshold;
    // i-k-j order: each c(i,j) accumulates over k in ascending order no
    // matter how rows are distributed across threads.
#pragma omp parallel for schedule(static) if (parallel)
    for (long long ii = 0; ii < static_cast<long long>(n); ++ii) {
        const std::size_t i = static_cast<std::size_t>(ii);
        double* crow = cp + i * m;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double aik = ap[i * k + kk];
            const double* brow = bp + kk * m;
            for (std::size_t j = 0; j < m; ++j) crow[j] += aik * brow[j];
        }
    }
    ensure_finite(c, "matmul result");
    return c;
}

Vec matvec(const Matrix& m, const Vec& x) {
    require(!m.empty(), "matvec: empty matrix");
    require(m.cols() == x.size(), "matvec: dimension mismatch");
    Vec z(m.rows(), 0.0);
    for (std::size_t i = 0; i < m.rows(); ++i) {
        const double* r = m.row(i);
        double s = 0.0;
        for (std::size_t j = 0; j < m.cols(); ++j) s += r[j] * x[j];
        z[i] = s;
    }
    return z;
}

Vec matvec_t(const Matrix& m, const Vec& x) {
    require(!m.empty(), "matvec_t: empty matrix");
    require(m.rows() == x.size(), "matvec_t: dimension mismatch");
    Vec z(m.cols(), 0.0);
    for (std::size_t i = 0; i < m.rows(); ++i) {
        const double* r = m.row(i);
        const double xi = x[i];
        for (std::size_t j = 0; j < m.cols(); ++j) z[j] += xi * r[j];
    }
    return z;
}

double cosine(const Vec& a, const Vec& b) {
    require(a.size() == b.size(), "cosine: length mismatch");
    const double na = norm2(a);
    const double nb = norm2(b);
    require(na > 0.0 && nb > 0.0, "cosine: zero-norm input");
    const double c = dot(a, b) / (na * nb);
    return std::min(1.0, std::max(-1.0, c));
}

Matrix gaussian_matrix(std::size_t rows, std::size_t cols, double sigma, Rng& rng) {
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = sigma * rng.gaussian();
    return m;
}

}  // namespace ipa
