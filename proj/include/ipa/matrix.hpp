#pragma once

#include <cstddef>
#include <initializer_list>
#include <vector>

#include "ipa/common.hpp"
#include "ipa/rng.hpp"

namespace ipa {

using Vec = std::vector<double>;

// Dense row-major 64-bit real matrix, the numeric carrier for the whole
// toolkit. A default-constructed Matrix is the 0x0 empty sentinel; numeric
// operations reject it.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    Matrix(std::initializer_list<std::initializer_list<double>> rows);

    static Matrix identity(std::size_t n);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    const std::vector<double>& storage() const { return data_; }

    const double* row(std::size_t i) const { return data_.data() + i * cols_; }
    double* row(std::size_t i) { return data_.data() + i * cols_; }

    Vec row_vec(std::size_t i) const;
    Vec col_vec(std::size_t j) const;
    void set_row(std::size_t i, const Vec& v);

    bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

// --- element-wise and structural helpers -------------------------------

bool all_finite(const Matrix& m);
bool all_finite(const Vec& v);
void ensure_finite(const Matrix& m, const char* what);
void ensure_finite(const Vec& v, const char* what);

Matrix transpose(const Matrix& m);
Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& m, double s);
// a += s * b
void axpy(Matrix& a, double s, const Matrix& b);
void axpy(Vec& a, double s, const Vec& b);
Matrix outer(const Vec& u, const Vec& v);

double dot(const Vec& a, const Vec& b);
double norm2(const Vec& v);
double frobenius_norm(const Matrix& m);
double max_abs(const Matrix& m);
double max_abs_diff(const Matrix& a, const Matrix& b);
bool bitwise_equal(const Matrix& a, const Matrix& b);

// --- kernels ------------------------------------------------------------

// Dense product. Parallelized over output rows; every output element is
// accumulated by a single thread in fixed k order, so the result is bitwise
// identical to the serial loop for any thread count.
Matrix matmul(const Matrix& a, const Matrix& b);

// z = m * x
Vec matvec(const Matrix& m, const Vec& x);
// z = m^T * x
Vec matvec_t(const Matrix& m, const Vec& x);

// Cosine similarity, clamped to [-1, 1]. Errors on a zero-norm input.
double cosine(const Vec& a, const Vec& b);

// Entries i.i.d. Gaussian(0, sigma^2), filled row-major.
Matrix gaussian_matrix(std::size_t rows, std::size_t cols, double sigma, Rng& rng);

}  // namespace ipa
