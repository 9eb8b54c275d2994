// Times the OpenMP kernels against their serial reference twins and verifies
// the two sides agree bitwise (the parallel loops keep serial accumulation
// order per output element, so equality is exact, not approximate).
#include <chrono>
#include <cstdio>
#include <string>

#include "ipa/linalg.hpp"
#include "ipa/projector.hpp"
#include "reference/reference.hpp"

using namespace ipa;

namespace {

double now_s() {
    return std::chrono::duration<double>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

// Best wall time over `reps` runs of f(); the result of the last run is kept
// alive through `sink` so the work is not optimized away.
template <typename F>
double best_of(int reps, F f, double& sink) {
    double best = 1e300;
    for (int r = 0; r < reps; ++r) {
        const double t0 = now_s();
        sink = f();
        best = std::min(best, now_s() - t0);
    }
    return best;
}

double checksum(const Matrix& m) {
    double s = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) s += m.data()[i];
    return s;
}

double checksum(const Vec& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s;
}

bool bitwise_equal_vec(const Vec& a, const Vec& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i] != b[i] || std::signbit(a[i]) != std::signbit(b[i])) return false;
    return true;
}

void report(const std::string& name, double serial_s, double parallel_s, bool identical) {
    std::printf("%-28s serial %8.2f ms   parallel %8.2f ms   x%.2f   %s\n", name.c_str(),
                serial_s * 1e3, parallel_s * 1e3, serial_s / parallel_s,
                identical ? "bitwise-identical" : "MISMATCH");
}

}  // namespace

int main() {
    Rng rng(1);
    int mismatches = 0;

    {
        const std::size_t n = 384;
        const Matrix a = gaussian_matrix(n, n, 1.0, rng);
        const Matrix b = gaussian_matrix(n, n, 1.0, rng);
        const Matrix ref = ref::matmul_serial(a, b);
        const Matrix par = matmul(a, b);
        const bool same = bitwise_equal(ref, par);
        mismatches += !same;
        double sink = 0.0;
        const double ts = best_of(3, [&] { return checksum(ref::matmul_serial(a, b)); }, sink);
        const double tp = best_of(3, [&] { return checksum(matmul(a, b)); }, sink);
        report("matmul 384x384 * 384x384", ts, tp, same);
    }

    {
        const std::size_t rows = 2048, cols = 2048;
        const Matrix m = gaussian_matrix(rows, cols, 1.0, rng);
        Vec x(cols);
        for (double& v : x) v = rng.gaussian();
        const Vec ref = ref::matvec_serial(m, x);
        const Vec par = matvec(m, x);
        const bool same = bitwise_equal_vec(ref, par);
        mismatches += !same;
        double sink = 0.0;
        const double ts = best_of(5, [&] { return checksum(ref::matvec_serial(m, x)); }, sink);
        const double tp = best_of(5, [&] { return checksum(matvec(m, x)); }, sink);
        report("matvec 2048x2048", ts, tp, same);
    }

    {
        const std::size_t n = 4000, d = 64, d_h = 8;
        FeatureSet fs;
        fs.data = gaussian_matrix(n, d, 1.0, rng);
        fs.weight_name = "bench";
        Projector p;
        p.u = orthonormalize_rows(gaussian_matrix(d_h, d, 1.0, rng));
        p.centered = false;
        p.mean = Vec(d, 0.0);
        p.algorithm = ProjectorAlgo::exact;
        const Vec zero_mean(d, 0.0);
        const double ref = ref::reconstruction_error_serial(p.u, fs.data, zero_mean);
        const double par = reconstruction_error(p, fs);
        const bool same = ref == par && std::signbit(ref) == std::signbit(par);
        mismatches += !same;
        double sink = 0.0;
        const double ts = best_of(
            3, [&] { return ref::reconstruction_error_serial(p.u, fs.data, zero_mean); }, sink);
        const double tp = best_of(3, [&] { return reconstruction_error(p, fs); }, sink);
        report("recon 4000x64 -> 8", ts, tp, same);
    }

    if (mismatches) {
        std::printf("%d kernel(s) disagree with the serial reference\n", mismatches);
        return 1;
    }
    return 0;
}
