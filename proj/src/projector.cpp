#include "ipa/projector.hpp"

#include <cmath>

namespace ipa {

const char* to_string(ProjectorAlgo a) {
    switch (a) {
        case ProjectorAlgo::exact: return "exact";
        case ProjectorAlgo::ipca: return "ipca";
        case ProjectorAlgo::gha: return "gha";
        case ProjectorAlgo::random_proj: return "random";
    }
    return "?";
}

ProjectorAlgo projector_algo_from_string(const std::string& s) {
    if (s == "exact") return ProjectorAlgo::exact;
    if (s == "ipca") return ProjectorAlgo::ipca;
    if (s == "gha") return ProjectorAlgo::gha;
    if (s == "random") return ProjectorAlgo::random_proj;
    throw Error("unknown projector algorithm: " + s);
}

Vec Projector::encode(const Vec& x) const {
    require(x.size() == d_in(), "Projector::encode: dimension mismatch");
    if (!centered) return matvec(u, x);
    Vec c(x);
    for (std::size_t j = 0; j < c.size(); ++j) c[j] -= mean[j];
    return matvec(u, c);
}

Vec Projector::decode(const Vec& x_h) const {
    require(x_h.size() == d_h(), "Projector::decode: dimension mismatch");
    Vec x = matvec_t(u, x_h);
    if (centered)
        for (std::size_t j = 0; j < x.size(); ++j) x[j] += mean[j];
    return x;
}

namespace {

Vec column_mean(const Matrix& m) {
    Vec mu(m.cols(), 0.0);
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) mu[j] += m(i, j);
    for (double& v : mu) v /= static_cast<double>(m.rows());
    return mu;
}

}  // namespace

Projector exact_pca(const FeatureSet& features, std::size_t d_h, bool centered) {
    const Matrix& x = features.data;
    require(!x.empty(), "exact_pca: empty feature set");
    ensure_finite(x, "exact_pca features");
    const std::size_t n = x.rows(), d_in = x.cols();
    require(d_h >= 1, "exact_pca: d_h must be >= 1");
    require(d_h <= d_in, "exact_pca: d_h exceeds d_in");
    require(n >= d_h, "exact_pca: need at least d_h samples");

    Vec mu(d_in, 0.0);
    Matrix sigma(d_in, d_in, 0.0);
    if (centered) {
        mu = column_mean(x);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t i = 0; i < d_in; ++i) {
                const double xi = x(r, i) - mu[i];
                for (std::size_t j = 0; j < d_in; ++j)
                    sigma(i, j) += xi * (x(r, j) - mu[j]);
            }
    } else {
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t i = 0; i < d_in; ++i) {
                const double xi = x(r, i);
                for (std::size_t j = 0; j < d_in; ++j) sigma(i, j) += xi * x(r, j);
            }
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < sigma.size(); ++i) sigma.data()[i] *= inv_n;

    EigResult eig = sym_eig_desc(sigma);
    Projector p;
    p.u = Matrix(d_h, d_in);
    for (std::size_t k = 0; k < d_h; ++k)
        for (std::size_t j = 0; j < d_in; ++j) p.u(k, j) = eig.eigenvectors(j, k);
    p.algorithm = ProjectorAlgo::exact;
    p.centered = centered;
    p.mean = centered ? mu : Vec(d_in, 0.0);
    p.seen = n;
    return p;
}

IpcaState ipca_init(std::size_t d_in, std::size_t d_h, bool centered) {
    require(d_h >= 1, "ipca_init: d_h must be >= 1");
    require(d_h <= d_in, "ipca_init: d_h exceeds d_in");
    IpcaState s;
    s.mean = Vec(d_in, 0.0);
    s.rank_cap = d_h;
    s.d_in = d_in;
    s.centered = centered;
    return s;
}

IpcaState ipca_update(IpcaState state, const Matrix& batch) {
    require(!batch.empty(), "ipca_update: empty batch");
    require(batch.cols() == state.d_in, "ipca_update: batch width != d_in");
    ensure_finite(batch, "ipca_update batch");

    const std::size_t m = batch.rows();
    const std::size_t n = state.seen;
    const std::size_t k = state.rank();
    const std::size_t d = state.d_in;

    Vec new_mean(d, 0.0);
    bool has_correction = false;
    Vec correction(d, 0.0);
    Matrix processed = batch;
    if (state.centered) {
        const Vec mu_b = column_mean(batch);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < d; ++j) processed(i, j) -= mu_b[j];
        const double total = static_cast<double>(n + m);
        for (std::size_t j = 0; j < d; ++j)
            new_mean[j] = (static_cast<double>(n) * state.mean[j] +
                           static_cast<double>(m) * mu_b[j]) / total;
        if (n > 0) {
            // Mean shift contributes a rank-1 term to the scatter.
            const double w = std::sqrt(static_cast<double>(n) *
                                       static_cast<double>(m) / total);
            for (std::size_t j = 0; j < d; ++j)
                correction[j] = w * (state.mean[j] - mu_b[j]);
            has_correction = true;
        }
    }

    const std::size_t stack_rows = k + m + (has_correction ? 1 : 0);
    Matrix stack(stack_rows, d, 0.0);
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < d; ++j)
            stack(i, j) = state.singular_values[i] * state.components(i, j);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) stack(k + i, j) = processed(i, j);
    if (has_correction)
        for (std::size_t j = 0; j < d; ++j) stack(k + m, j) = correction[j];

    SvdResult svd = thin_svd(stack);
    const double s_max = svd.s.empty() ? 0.0 : svd.s[0];
    std::size_t num_rank = 0;
    for (double s : svd.s)
        if (s > 1e-12 * s_max && s > 0.0) ++num_rank;
    const std::size_t new_k = std::min(state.rank_cap, num_rank);

    if (new_k == 0) {
        state.components = Matrix();
        state.singular_values.clear();
    } else {
        state.components = Matrix(new_k, d);
        state.singular_values.assign(svd.s.begin(), svd.s.begin() + new_k);
        for (std::size_t i = 0; i < new_k; ++i)
            for (std::size_t j = 0; j < d; ++j) state.components(i, j) = svd.vt(i, j);
    }
    state.seen = n + m;
    state.mean = state.centered ? new_mean : Vec(d, 0.0);
    return state;
}

Projector ipca_finalize(const IpcaState& state) {
    require(state.seen >= state.rank_cap,
            "ipca_finalize: fewer samples than d_h");
    require(state.rank() >= state.rank_cap,
            "ipca_finalize: degenerate rank (feature set has rank < d_h)");
    Projector p;
    p.u = Matrix(state.rank_cap, state.d_in);
    for (std::size_t i = 0; i < state.rank_cap; ++i)
        for (std::size_t j = 0; j < state.d_in; ++j) p.u(i, j) = state.components(i, j);
    p.algorithm = ProjectorAlgo::ipca;
    p.centered = state.centered;
    p.mean = state.centered ? state.mean : Vec(state.d_in, 0.0);
    p.seen = state.seen;
    return p;
}

GhaState gha_init(std::size_t d_in, std::size_t d_h, double learning_rate, Rng& rng) {
    require(d_h >= 1 && d_h <= d_in, "gha_init: need 1 <= d_h <= d_in");
    require(learning_rate > 0.0, "gha_init: learning rate must be positive");
    GhaState s;
    s.u = gaussian_matrix(d_h, d_in, 1.0 / std::sqrt(static_cast<double>(d_in)), rng);
    s.learning_rate = learning_rate;
    return s;
}

GhaState gha_epoch(GhaState state, const FeatureSet& features,
                   const std::vector<std::size_t>& order) {
    const Matrix& x = features.data;
    require(x.cols() == state.u.cols(), "gha_epoch: feature width != d_in");
    require(order.size() == x.rows(), "gha_epoch: order must index every sample");
    require(state.learning_rate > 0.0, "gha_epoch: learning rate must be positive");

    const std::size_t d_h = state.u.rows();
    const std::size_t d = state.u.cols();
    const double eta = state.learning_rate;
    Vec y(d_h), acc(d);

    for (std::size_t idx : order) {
        require(idx < x.rows(), "gha_epoch: order index out of range");
        const double* xv = x.row(idx);
        for (std::size_t i = 0; i < d_h; ++i) {
            const double* ur = state.u.row(i);
            double s = 0.0;
            for (std::size_t j = 0; j < d; ++j) s += ur[j] * xv[j];
            y[i] = s;
        }
        // Sanger: dU_i = eta * y_i * (x - sum_{j<=i} y_j U_j), with the sum
        // over pre-update rows. acc folds in row i before row i is written,
        // so it always holds old-row terms.
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t i = 0; i < d_h; ++i) {
            double* ur = state.u.row(i);
            for (std::size_t j = 0; j < d; ++j) acc[j] += y[i] * ur[j];
            const double step = eta * y[i];
            for (std::size_t j = 0; j < d; ++j) ur[j] += step * (xv[j] - acc[j]);
        }
    }
    if (!all_finite(state.u))
        throw Error("gha_epoch: update diverged (learning rate too large)");
    state.epochs_done += 1;
    state.samples_seen += x.rows();
    return state;
}

Projector gha_finalize(const GhaState& state) {
    require(state.epochs_done >= 1, "gha_finalize: no epochs run");
    Projector p;
    p.u = state.u;
    p.algorithm = ProjectorAlgo::gha;
    p.centered = false;
    p.mean = Vec(state.u.cols(), 0.0);
    p.seen = state.samples_seen;
    return p;
}

Projector random_projector(std::size_t d_in, std::size_t d_h, Rng& rng) {
    require(d_h >= 1, "random_projector: d_h must be >= 1");
    require(d_h <= d_in, "random_projector: d_h exceeds d_in");
    Projector p;
    p.u = gaussian_matrix(d_h, d_in, 1.0 / std::sqrt(static_cast<double>(d_in)), rng);
    p.algorithm = ProjectorAlgo::random_proj;
    p.centered = false;
    p.mean = Vec(d_in, 0.0);
    p.seen = 0;
    return p;
}

double reconstruction_error(const Projector& p, const FeatureSet& features) {
    const Matrix& x = features.data;
    require(x.cols() == p.d_in(), "reconstruction_error: dimension mismatch");
    require(!x.empty(), "reconstruction_error: empty feature set");
    const std::size_t n = x.rows(), d = x.cols(), h = p.d_h();

    // Per-sample errors land in their own slot; the final sum runs in sample
    // order, so the result is thread-count independent.
    Vec errs(n, 0.0);
#pragma omp parallel for schedule(static) if (n * d * h >= (1u << 15))
    for (long long ii = 0; ii < static_cast<long long>(n); ++ii) {
        const std::size_t r = static_cast<std::size_t>(ii);
        Vec cx(d);
        for (std::size_t j = 0; j < d; ++j)
            cx[j] = x(r, j) - (p.centered ? p.mean[j] : 0.0);
        Vec xh(h, 0.0);
        for (std::size_t i = 0; i < h; ++i) {
            const double* ur = p.u.row(i);
            double s = 0.0;
            for (std::size_t j = 0; j < d; ++j) s += ur[j] * cx[j];
            xh[i] = s;
        }
        double e = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            double rec = p.centered ? p.mean[j] : 0.0;
            for (std::size_t i = 0; i < h; ++i) rec += p.u(i, j) * xh[i];
            const double diff = x(r, j) - rec;
            e += diff * diff;
        }
        errs[r] = e;
    }
    double total = 0.0;
    for (double e : errs) total += e;
    return total / static_cast<double>(n);
}

double subspace_distance(const Matrix& u1, const Matrix& u2) {
    require(!u1.empty() && !u2.empty(), "subspace_distance: empty input");
    require(u1.cols() == u2.cols(), "subspace_distance: column mismatch");
    require(u1.rows() == u2.rows(), "subspace_distance: subspace dims differ");

    Matrix q1 = orthonormalize_rows(u1);
    Matrix q2 = orthonormalize_rows(u2);
    require(q1.rows() == u1.rows() && q2.rows() == u2.rows(),
            "subspace_distance: rank-deficient input");

    SvdResult svd = thin_svd(matmul(q1, transpose(q2)));
    double smin = svd.s.empty() ? 0.0 : svd.s.back();
    smin = std::min(1.0, std::max(0.0, smin));
    return std::acos(smin);
}

}  // namespace ipa
