#include "ipa/adapters.hpp"

#include <cmath>

namespace ipa {

const char* to_string(AdapterVariant v) {
    switch (v) {
        case AdapterVariant::lora: return "lora";
        case AdapterVariant::ipa: return "ipa";
        case AdapterVariant::dora: return "dora";
    }
    return "?";
}

AdapterVariant adapter_variant_from_string(const std::string& s) {
    if (s == "lora") return AdapterVariant::lora;
    if (s == "ipa") return AdapterVariant::ipa;
    if (s == "dora") return AdapterVariant::dora;
    throw Error("unknown adapter variant: " + s);
}

namespace {

Vec column_norms(const Matrix& m) {
    Vec n(m.cols(), 0.0);
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) n[j] += m(i, j) * m(i, j);
    for (double& v : n) v = std::sqrt(v);
    return n;
}

// W + lambda * B * A, the dora pre-normalization matrix.
Matrix combined_matrix(const Adapter& ad, const FrozenLinear& w) {
    Matrix v = matmul(ad.b, ad.a);
    const Matrix& base = w.w();
    for (std::size_t i = 0; i < v.size(); ++i)
        v.data()[i] = base.data()[i] + ad.lambda * v.data()[i];
    return v;
}

// The input map shared by lora (A) and ipa (U); keeping one code path makes
// an ipa adapter over a random projector bitwise identical to the matching
// lora adapter.
const Matrix& input_map(const Adapter& ad) {
    return ad.variant == AdapterVariant::ipa ? ad.proj.u : ad.a;
}

void check_adapter(const Adapter& ad, const FrozenLinear& w) {
    require(ad.lambda > 0.0, "adapter: lambda must be positive");
    require(ad.b.rows() == w.d_out(), "adapter: b rows != d_out");
    const Matrix& in_map = input_map(ad);
    require(in_map.cols() == w.d_in(), "adapter: input map cols != d_in");
    require(ad.b.cols() == in_map.rows(), "adapter: b cols != rank");
    if (ad.variant == AdapterVariant::dora)
        require(ad.m.size() == w.d_in(), "adapter: m size != d_in");
}

}  // namespace

Adapter init_lora(const FrozenLinear& w, std::size_t r, double alpha, Rng& rng) {
    require(r >= 1, "init_lora: rank must be >= 1");
    require(r <= std::min(w.d_in(), w.d_out()), "init_lora: rank too large");
    require(alpha > 0.0, "init_lora: alpha must be positive");
    Adapter ad;
    ad.variant = AdapterVariant::lora;
    ad.alpha = alpha;
    ad.lambda = alpha / static_cast<double>(r);
    ad.a = gaussian_matrix(r, w.d_in(), 1.0 / std::sqrt(static_cast<double>(w.d_in())), rng);
    ad.b = Matrix(w.d_out(), r, 0.0);
    return ad;
}

Adapter init_ipa(const FrozenLinear& w, Projector proj, double alpha, bool proj_trainable) {
    require(proj.d_in() == w.d_in(), "init_ipa: projector d_in != layer d_in");
    require(proj.d_h() >= 1 && proj.d_h() <= proj.d_in(), "init_ipa: bad projector rank");
    require(alpha > 0.0, "init_ipa: alpha must be positive");
    Adapter ad;
    ad.variant = AdapterVariant::ipa;
    ad.alpha = alpha;
    ad.lambda = alpha / static_cast<double>(proj.d_h());
    ad.b = Matrix(w.d_out(), proj.d_h(), 0.0);
    ad.proj = std::move(proj);
    ad.proj_trainable = proj_trainable;
    return ad;
}

Adapter init_dora(const FrozenLinear& w, std::size_t r, double alpha, Rng& rng) {
    Adapter ad = init_lora(w, r, alpha, rng);
    ad.variant = AdapterVariant::dora;
    ad.m = column_norms(w.w());
    for (double v : ad.m)
        require(v > 0.0, "init_dora: weight has a zero column");
    return ad;
}

ForwardResult forward(const Adapter& ad, const FrozenLinear& w, const Vec& x) {
    check_adapter(ad, w);
    require(x.size() == w.d_in(), "forward: input length != d_in");
    for (double v : x) require(std::isfinite(v), "forward: non-finite input");

    ForwardResult out;
    out.cache.x = x;

    if (ad.variant == AdapterVariant::dora) {
        Matrix v = combined_matrix(ad, w);
        Vec norms = column_norms(v);
        for (double n : norms)
            require(n > 0.0, "forward: zero column norm in dora combined matrix");
        Vec z(w.d_out(), 0.0);
        for (std::size_t i = 0; i < w.d_out(); ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < w.d_in(); ++j)
                s += ad.m[j] / norms[j] * v(i, j) * x[j];
            z[i] = s;
        }
        out.z = std::move(z);
        out.cache.v = std::move(v);
        out.cache.col_norms = std::move(norms);
        return out;
    }

    // lora / ipa: z = W x + lambda * B (M x) with M = A or U.
    Vec x_h = matvec(input_map(ad), x);
    Vec bx = matvec(ad.b, x_h);
    Vec z = matvec(w.w(), x);
    for (std::size_t i = 0; i < z.size(); ++i) z[i] += ad.lambda * bx[i];
    out.z = std::move(z);
    out.cache.x_h = std::move(x_h);
    return out;
}

AdapterGrads grads_zero_like(const Adapter& ad) {
    AdapterGrads g;
    g.variant = ad.variant;
    g.d_b = Matrix(ad.b.rows(), ad.b.cols(), 0.0);
    switch (ad.variant) {
        case AdapterVariant::lora:
            g.d_a = Matrix(ad.a.rows(), ad.a.cols(), 0.0);
            break;
        case AdapterVariant::ipa:
            if (ad.proj_trainable)
                g.d_proj = Matrix(ad.proj.u.rows(), ad.proj.u.cols(), 0.0);
            break;
        case AdapterVariant::dora:
            g.d_a = Matrix(ad.a.rows(), ad.a.cols(), 0.0);
            g.d_m = Vec(ad.m.size(), 0.0);
            break;
    }
    return g;
}

void grads_accumulate(AdapterGrads& dst, const AdapterGrads& src) {
    require(dst.variant == src.variant, "grads_accumulate: variant mismatch");
    auto add = [](Matrix& d, const Matrix& s) {
        if (s.empty()) return;
        require(!d.empty() && d.rows() == s.rows() && d.cols() == s.cols(),
                "grads_accumulate: shape mismatch");
        for (std::size_t i = 0; i < d.size(); ++i) d.data()[i] += s.data()[i];
    };
    add(dst.d_b, src.d_b);
    add(dst.d_a, src.d_a);
    add(dst.d_proj, src.d_proj);
    if (!src.d_m.empty()) {
        require(dst.d_m.size() == src.d_m.size(), "grads_accumulate: d_m mismatch");
        for (std::size_t i = 0; i < dst.d_m.size(); ++i) dst.d_m[i] += src.d_m[i];
    }
}

void grads_scale(AdapterGrads& g, double s) {
    for (Matrix* m : {&g.d_b, &g.d_a, &g.d_proj})
        for (std::size_t i = 0; i < m->size(); ++i) m->data()[i] *= s;
    for (double& v : g.d_m) v *= s;
}

AdapterGrads backward(const Adapter& ad, const ForwardCache& cache, const Vec& dz) {
    require(!cache.x.empty(), "backward: missing forward cache");
    require(dz.size() == ad.b.rows(), "backward: dz length != d_out");
    for (double v : dz) require(std::isfinite(v), "backward: non-finite dz");

    AdapterGrads g = grads_zero_like(ad);
    const Vec& x = cache.x;
    const double lam = ad.lambda;

    if (ad.variant == AdapterVariant::dora) {
        require(!cache.v.empty() && cache.col_norms.size() == x.size(),
                "backward: cache lacks dora intermediates");
        const Matrix& v = cache.v;
        const std::size_t d_out = v.rows(), d_in = v.cols();
        // dL/dV, column by column, through the normalization:
        //   z += x_j * m_j * v_j / n_j
        //   dL/dv_j = m_j x_j (dz/n_j - v_j (v_j.dz)/n_j^3)
        Matrix dv(d_out, d_in);
        for (std::size_t j = 0; j < d_in; ++j) {
            const double n = cache.col_norms[j];
            double vdz = 0.0;
            for (std::size_t i = 0; i < d_out; ++i) vdz += v(i, j) * dz[i];
            g.d_m[j] = x[j] * vdz / n;
            const double c1 = ad.m[j] * x[j] / n;
            const double c2 = ad.m[j] * x[j] * vdz / (n * n * n);
            for (std::size_t i = 0; i < d_out; ++i)
                dv(i, j) = c1 * dz[i] - c2 * v(i, j);
        }
        // V = W + lambda B A
        Matrix db = matmul(dv, transpose(ad.a));
        Matrix da = matmul(transpose(ad.b), dv);
        for (std::size_t i = 0; i < db.size(); ++i) g.d_b.data()[i] = lam * db.data()[i];
        for (std::size_t i = 0; i < da.size(); ++i) g.d_a.data()[i] = lam * da.data()[i];
        return g;
    }

    require(cache.x_h.size() == ad.b.cols(), "backward: cache lacks x_h");
    // d_b = lambda dz x_h^T
    for (std::size_t i = 0; i < g.d_b.rows(); ++i)
        for (std::size_t k = 0; k < g.d_b.cols(); ++k)
            g.d_b(i, k) = lam * dz[i] * cache.x_h[k];
    // dL/d(input map) = lambda (B^T dz) x^T, produced only when trainable.
    const bool map_trainable =
        ad.variant == AdapterVariant::lora || ad.proj_trainable;
    if (map_trainable) {
        Vec bt_dz = matvec_t(ad.b, dz);
        Matrix& dmap = ad.variant == AdapterVariant::lora ? g.d_a : g.d_proj;
        for (std::size_t k = 0; k < dmap.rows(); ++k)
            for (std::size_t j = 0; j < dmap.cols(); ++j)
                dmap(k, j) = lam * bt_dz[k] * x[j];
    }
    return g;
}

Vec backward_input(const Adapter& ad, const FrozenLinear& w, const ForwardCache& cache,
                   const Vec& dz) {
    require(!cache.x.empty(), "backward_input: missing forward cache");
    require(dz.size() == w.d_out(), "backward_input: dz length != d_out");

    if (ad.variant == AdapterVariant::dora) {
        require(!cache.v.empty(), "backward_input: cache lacks dora intermediates");
        Vec dx(w.d_in(), 0.0);
        for (std::size_t j = 0; j < w.d_in(); ++j) {
            double vdz = 0.0;
            for (std::size_t i = 0; i < w.d_out(); ++i) vdz += cache.v(i, j) * dz[i];
            dx[j] = ad.m[j] / cache.col_norms[j] * vdz;
        }
        return dx;
    }

    // dx = W^T dz + lambda M^T (B^T dz)
    Vec dx = matvec_t(w.w(), dz);
    Vec bt_dz = matvec_t(ad.b, dz);
    const Matrix& in_map = input_map(ad);
    for (std::size_t k = 0; k < in_map.rows(); ++k) {
        const double s = ad.lambda * bt_dz[k];
        const double* row = in_map.row(k);
        for (std::size_t j = 0; j < in_map.cols(); ++j) dx[j] += s * row[j];
    }
    return dx;
}

Matrix merge(const Adapter& ad, const FrozenLinear& w) {
    check_adapter(ad, w);
    if (ad.variant == AdapterVariant::dora) {
        Matrix v = combined_matrix(ad, w);
        Vec norms = column_norms(v);
        for (double n : norms)
            require(n > 0.0, "merge: zero column norm in dora combined matrix");
        for (std::size_t i = 0; i < v.rows(); ++i)
            for (std::size_t j = 0; j < v.cols(); ++j)
                v(i, j) = ad.m[j] / norms[j] * v(i, j);
        return v;
    }
    Matrix delta = matmul(ad.b, input_map(ad));
    Matrix out = w.w();
    for (std::size_t i = 0; i < out.size(); ++i)
        out.data()[i] += ad.lambda * delta.data()[i];
    return out;
}

}  // namespace ipa
