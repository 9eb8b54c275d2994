#include "reference.hpp"

namespace ipa::ref {

Matrix matmul_serial(const Matrix& a, const Matrix& b) {
    require(a.cols() == b.rows(), "matmul_serial: dimension mismatch");
    Matrix c(a.rows(), b.cols(), 0.0);
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
            c(i, j) = s;
        }
    return c;
}

Vec matvec_serial(const Matrix& m, const Vec& x) {
    require(m.cols() == x.size(), "matvec_serial: dimension mismatch");
    Vec z(m.rows(), 0.0);
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) z[i] += m(i, j) * x[j];
    return z;
}

double reconstruction_error_serial(const Matrix& u, const Matrix& x, const Vec& mean) {
    require(u.cols() == x.cols(), "reconstruction_error_serial: dim mismatch");
    require(mean.size() == x.cols(), "reconstruction_error_serial: mean dim mismatch");
    double total = 0.0;
    for (std::size_t n = 0; n < x.rows(); ++n) {
        Vec cx(x.cols());
        for (std::size_t j = 0; j < x.cols(); ++j) cx[j] = x(n, j) - mean[j];
        Vec h(u.rows(), 0.0);
        for (std::size_t i = 0; i < u.rows(); ++i)
            for (std::size_t j = 0; j < u.cols(); ++j) h[i] += u(i, j) * cx[j];
        double err = 0.0;
        for (std::size_t j = 0; j < x.cols(); ++j) {
            double rec = mean[j];
            for (std::size_t i = 0; i < u.rows(); ++i) rec += u(i, j) * h[i];
            const double d = x(n, j) - rec;
            err += d * d;
        }
        total += err;
    }
    return total / static_cast<double>(x.rows());
}

}  // namespace ipa::ref
