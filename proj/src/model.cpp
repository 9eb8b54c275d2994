#include "ipa/model.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <utility>

#include "ipa/hash.hpp"

namespace ipa {
namespace {

constexpr double kLnEps = 1e-5;

// Pretext-training internals. The budget is tuned so the host ends up with
// clearly anisotropic hidden features and a decreasing loss curve while
// staying around a second of wall time.
constexpr std::size_t kPretrainSteps = 1000;
constexpr std::size_t kPretrainBatch = 16;
constexpr double kPretrainLr = 3e-3;
constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

double gelu(double x) {
    return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
}

double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + x * pdf;
}

// Row-wise layer norm; mu/rstd are per-row stats kept for the backward pass.
Matrix layer_norm_rows(const Matrix& x, const Vec& g, const Vec& b, Vec& mu, Vec& rstd) {
    const std::size_t n = x.rows(), d = x.cols();
    Matrix out(n, d);
    mu.assign(n, 0.0);
    rstd.assign(n, 0.0);
    for (std::size_t p = 0; p < n; ++p) {
        const double* xr = x.row(p);
        double m = 0.0;
        for (std::size_t j = 0; j < d; ++j) m += xr[j];
        m /= static_cast<double>(d);
        double v = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = xr[j] - m;
            v += c * c;
        }
        v /= static_cast<double>(d);
        const double rs = 1.0 / std::sqrt(v + kLnEps);
        mu[p] = m;
        rstd[p] = rs;
        for (std::size_t j = 0; j < d; ++j) out(p, j) = (xr[j] - m) * rs * g[j] + b[j];
    }
    return out;
}

// dx for y = LN(x)*g + b given dy; accumulates dg/db when provided.
Matrix layer_norm_back(const Matrix& x, const Vec& g, const Vec& mu, const Vec& rstd,
                       const Matrix& dy, Vec* dg, Vec* db) {
    const std::size_t n = x.rows(), d = x.cols();
    Matrix dx(n, d);
    for (std::size_t p = 0; p < n; ++p) {
        const double* xr = x.row(p);
        const double* dyr = dy.row(p);
        const double rs = rstd[p];
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double xh = (xr[j] - mu[p]) * rs;
            const double h = dyr[j] * g[j];
            m1 += h;
            m2 += h * xh;
            if (dg) (*dg)[j] += dyr[j] * xh;
            if (db) (*db)[j] += dyr[j];
        }
        m1 /= static_cast<double>(d);
        m2 /= static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) {
            const double xh = (xr[j] - mu[p]) * rs;
            dx(p, j) = rs * (dyr[j] * g[j] - m1 - xh * m2);
        }
    }
    return dx;
}

// y_p = W x_p for every row p.
Matrix apply_linear(const Matrix& w, const Matrix& x) {
    const std::size_t n = x.rows(), d_out = w.rows(), d_in = w.cols();
    Matrix y(n, d_out);
    for (std::size_t p = 0; p < n; ++p) {
        const double* xr = x.row(p);
        for (std::size_t i = 0; i < d_out; ++i) {
            const double* wr = w.row(i);
            double acc = 0.0;
            for (std::size_t j = 0; j < d_in; ++j) acc += wr[j] * xr[j];
            y(p, i) = acc;
        }
    }
    return y;
}

// dx rows for y_p = W x_p; accumulates dW when provided.
Matrix apply_linear_back(const Matrix& w, const Matrix& x, const Matrix& dy, Matrix* dw) {
    const std::size_t n = x.rows(), d_out = w.rows(), d_in = w.cols();
    Matrix dx(n, d_in);
    for (std::size_t p = 0; p < n; ++p) {
        const double* xr = x.row(p);
        const double* dyr = dy.row(p);
        for (std::size_t i = 0; i < d_out; ++i) {
            const double* wr = w.row(i);
            const double di = dyr[i];
            if (dw) {
                double* dwr = dw->row(i);
                for (std::size_t j = 0; j < d_in; ++j) dwr[j] += di * xr[j];
            }
            for (std::size_t j = 0; j < d_in; ++j) dx(p, j) += di * wr[j];
        }
    }
    return dx;
}

// Bidirectional softmax attention over pre-split heads; probs[h] is the
// seq x seq row-softmax kept for the backward pass.
Matrix attention_forward(const Matrix& q, const Matrix& k, const Matrix& v,
                         std::size_t n_heads, std::vector<Matrix>& probs) {
    const std::size_t n = q.rows(), d = q.cols(), dh = d / n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Matrix out(n, d);
    probs.assign(n_heads, Matrix(n, n));
    for (std::size_t h = 0; h < n_heads; ++h) {
        const std::size_t off = h * dh;
        Matrix& p = probs[h];
        for (std::size_t i = 0; i < n; ++i) {
            double mx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) s += q(i, off + c) * k(j, off + c);
                s *= scale;
                p(i, j) = s;
                if (j == 0 || s > mx) mx = s;
            }
            double z = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                const double e = std::exp(p(i, j) - mx);
                p(i, j) = e;
                z += e;
            }
            for (std::size_t j = 0; j < n; ++j) p(i, j) /= z;
            for (std::size_t c = 0; c < dh; ++c) {
                double acc = 0.0;
                for (std::size_t j = 0; j < n; ++j) acc += p(i, j) * v(j, off + c);
                out(i, off + c) = acc;
            }
        }
    }
    return out;
}

void attention_backward(const Matrix& q, const Matrix& k, const Matrix& v,
                        const std::vector<Matrix>& probs, const Matrix& dout,
                        Matrix& dq, Matrix& dk, Matrix& dv) {
    const std::size_t n = q.rows(), d = q.cols(), n_heads = probs.size(), dh = d / n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    dq = Matrix(n, d);
    dk = Matrix(n, d);
    dv = Matrix(n, d);
    Vec dp(n), ds(n);
    for (std::size_t h = 0; h < n_heads; ++h) {
        const std::size_t off = h * dh;
        const Matrix& p = probs[h];
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                double acc = 0.0;
                for (std::size_t c = 0; c < dh; ++c) acc += dout(i, off + c) * v(j, off + c);
                dp[j] = acc;
            }
            for (std::size_t j = 0; j < n; ++j)
                for (std::size_t c = 0; c < dh; ++c)
                    dv(j, off + c) += p(i, j) * dout(i, off + c);
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += p(i, j) * dp[j];
            for (std::size_t j = 0; j < n; ++j) ds[j] = p(i, j) * (dp[j] - dot);
            for (std::size_t j = 0; j < n; ++j) {
                const double sj = ds[j] * scale;
                for (std::size_t c = 0; c < dh; ++c) {
                    dq(i, off + c) += sj * k(j, off + c);
                    dk(j, off + c) += sj * q(i, off + c);
                }
            }
        }
    }
}

std::size_t kind_index(TargetKind k) { return static_cast<std::size_t>(k); }

// adapter index per (layer, kind); -1 when the slot is not adapted.
std::vector<std::array<int, 5>> adapter_lookup(const AdaptedModel& am) {
    std::vector<std::array<int, 5>> lut(am.model.config.n_layers,
                                        {-1, -1, -1, -1, -1});
    for (std::size_t t = 0; t < am.targets.size(); ++t)
        lut[am.targets[t].layer][kind_index(am.targets[t].kind)] = static_cast<int>(t);
    return lut;
}

// Apply one target linear map, through its adapter when attached.
Matrix target_apply(const Matrix& w, const AdaptedModel* am,
                    const std::vector<std::array<int, 5>>* lut, std::size_t layer,
                    TargetKind kind, const Matrix& x, std::vector<ForwardCache>& caches) {
    const int idx = am ? (*lut)[layer][kind_index(kind)] : -1;
    if (idx < 0) return apply_linear(w, x);
    const Adapter& ad = am->adapters[static_cast<std::size_t>(idx)];
    const FrozenLinear& fw = am->frozen[static_cast<std::size_t>(idx)];
    Matrix y(x.rows(), fw.d_out());
    caches.clear();
    caches.reserve(x.rows());
    for (std::size_t p = 0; p < x.rows(); ++p) {
        ForwardResult fr = forward(ad, fw, x.row_vec(p));
        for (std::size_t i = 0; i < y.cols(); ++i) y(p, i) = fr.z[i];
        caches.push_back(std::move(fr.cache));
    }
    return y;
}

// Backward through one target linear map. Adapter gradients accumulate into
// ag (when adapted); full-weight gradients into dw (when training the host).
Matrix target_back(const Matrix& w, const AdaptedModel* am,
                   const std::vector<std::array<int, 5>>* lut, std::size_t layer,
                   TargetKind kind, const Matrix& x, const Matrix& dy,
                   const std::vector<ForwardCache>& caches,
                   std::vector<AdapterGrads>* ag, Matrix* dw) {
    const int idx = am ? (*lut)[layer][kind_index(kind)] : -1;
    if (idx < 0) return apply_linear_back(w, x, dy, dw);
    const Adapter& ad = am->adapters[static_cast<std::size_t>(idx)];
    const FrozenLinear& fw = am->frozen[static_cast<std::size_t>(idx)];
    Matrix dx(x.rows(), x.cols());
    for (std::size_t p = 0; p < x.rows(); ++p) {
        const Vec dz = dy.row_vec(p);
        if (ag) grads_accumulate((*ag)[static_cast<std::size_t>(idx)],
                                 backward(ad, caches[p], dz));
        const Vec dxp = backward_input(ad, fw, caches[p], dz);
        for (std::size_t j = 0; j < x.cols(); ++j) dx(p, j) = dxp[j];
    }
    return dx;
}

ExampleTrace run_forward(const TinyTransformer& m, const Example& ex,
                         const AdaptedModel* am,
                         const std::vector<std::array<int, 5>>* lut) {
    const ModelConfig& c = m.config;
    require(ex.tokens.size() == c.seq_len, "forward: token count != seq_len");
    ExampleTrace tr;
    tr.emb = Matrix(c.seq_len, c.d_model);
    for (std::size_t p = 0; p < c.seq_len; ++p) {
        const int tok = ex.tokens[p];
        require(tok >= 0 && static_cast<std::size_t>(tok) < c.vocab,
                "forward: token out of range");
        for (std::size_t j = 0; j < c.d_model; ++j)
            tr.emb(p, j) = m.embedding(static_cast<std::size_t>(tok), j);
    }
    Matrix x = tr.emb;
    tr.layers.resize(c.n_layers);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        const LayerWeights& lw = m.layers[l];
        LayerTrace& t = tr.layers[l];
        t.x_in = x;
        t.n1 = layer_norm_rows(t.x_in, lw.ln1_g, lw.ln1_b, t.mu1, t.rstd1);
        t.q = target_apply(lw.w_q, am, lut, l, TargetKind::w_q, t.n1, t.cq);
        t.k = target_apply(lw.w_k, am, lut, l, TargetKind::w_k, t.n1, t.ck);
        t.v = target_apply(lw.w_v, am, lut, l, TargetKind::w_v, t.n1, t.cv);
        t.attn_out = attention_forward(t.q, t.k, t.v, c.n_heads, t.probs);
        const Matrix proj = apply_linear(lw.w_o, t.attn_out);
        t.x2 = add(t.x_in, proj);
        t.n2 = layer_norm_rows(t.x2, lw.ln2_g, lw.ln2_b, t.mu2, t.rstd2);
        t.u = target_apply(lw.w_up, am, lut, l, TargetKind::w_up, t.n2, t.cup);
        t.gelu_u = Matrix(t.u.rows(), t.u.cols());
        for (std::size_t p = 0; p < t.u.rows(); ++p)
            for (std::size_t j = 0; j < t.u.cols(); ++j) t.gelu_u(p, j) = gelu(t.u(p, j));
        const Matrix down =
            target_apply(lw.w_down, am, lut, l, TargetKind::w_down, t.gelu_u, t.cdown);
        x = add(t.x2, down);
    }
    tr.x_out = x;
    tr.pooled.assign(c.d_model, 0.0);
    for (std::size_t p = 0; p < c.seq_len; ++p)
        for (std::size_t j = 0; j < c.d_model; ++j) tr.pooled[j] += tr.x_out(p, j);
    for (double& v : tr.pooled) v /= static_cast<double>(c.seq_len);
    tr.logits = matvec(m.head, tr.pooled);
    return tr;
}

// Cross-entropy on one example; dlogits (optional) gets softmax - onehot.
double ce_loss(const Vec& logits, int label, Vec* dlogits) {
    require(label >= 0 && static_cast<std::size_t>(label) < logits.size(),
            "ce_loss: label out of range");
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : logits) z += std::exp(v - mx);
    const double lse = mx + std::log(z);
    if (dlogits) {
        dlogits->assign(logits.size(), 0.0);
        for (std::size_t j = 0; j < logits.size(); ++j)
            (*dlogits)[j] = std::exp(logits[j] - lse);
        (*dlogits)[static_cast<std::size_t>(label)] -= 1.0;
    }
    return lse - logits[static_cast<std::size_t>(label)];
}

// Shared manual backprop for one example. Exactly one of (ag) / (fg) is
// active: adapter-only gradients or all-weights gradients.
void backward_example(const TinyTransformer& m, const ExampleTrace& tr, const Example& ex,
                      const Vec& dlogits, const AdaptedModel* am,
                      const std::vector<std::array<int, 5>>* lut,
                      std::vector<AdapterGrads>* ag, TinyTransformer* fg) {
    const ModelConfig& c = m.config;
    if (fg) {
        for (std::size_t i = 0; i < c.n_classes; ++i)
            for (std::size_t j = 0; j < c.d_model; ++j)
                fg->head(i, j) += dlogits[i] * tr.pooled[j];
    }
    const Vec dpooled = matvec_t(m.head, dlogits);
    Matrix dx(c.seq_len, c.d_model);
    for (std::size_t p = 0; p < c.seq_len; ++p)
        for (std::size_t j = 0; j < c.d_model; ++j)
            dx(p, j) = dpooled[j] / static_cast<double>(c.seq_len);

    for (std::size_t li = c.n_layers; li-- > 0;) {
        const LayerWeights& lw = m.layers[li];
        const LayerTrace& t = tr.layers[li];
        LayerWeights* gw = fg ? &fg->layers[li] : nullptr;

        // x_next = x2 + W_down(gelu(u)); dx covers both residual branches.
        const Matrix dgelu =
            target_back(lw.w_down, am, lut, li, TargetKind::w_down, t.gelu_u, dx,
                        t.cdown, ag, gw ? &gw->w_down : nullptr);
        Matrix du(c.seq_len, c.d_ff);
        for (std::size_t p = 0; p < c.seq_len; ++p)
            for (std::size_t j = 0; j < c.d_ff; ++j)
                du(p, j) = dgelu(p, j) * gelu_grad(t.u(p, j));
        const Matrix dn2 = target_back(lw.w_up, am, lut, li, TargetKind::w_up, t.n2, du,
                                       t.cup, ag, gw ? &gw->w_up : nullptr);
        Matrix dx2 = layer_norm_back(t.x2, lw.ln2_g, t.mu2, t.rstd2, dn2,
                                     gw ? &gw->ln2_g : nullptr, gw ? &gw->ln2_b : nullptr);
        axpy(dx2, 1.0, dx);

        // x2 = x_in + W_o(attention(q, k, v)); W_o itself is never adapted.
        const Matrix dattn =
            apply_linear_back(lw.w_o, t.attn_out, dx2, gw ? &gw->w_o : nullptr);
        Matrix dq, dk, dv;
        attention_backward(t.q, t.k, t.v, t.probs, dattn, dq, dk, dv);
        Matrix dn1 = target_back(lw.w_q, am, lut, li, TargetKind::w_q, t.n1, dq, t.cq,
                                 ag, gw ? &gw->w_q : nullptr);
        axpy(dn1, 1.0, target_back(lw.w_k, am, lut, li, TargetKind::w_k, t.n1, dk, t.ck,
                                   ag, gw ? &gw->w_k : nullptr));
        axpy(dn1, 1.0, target_back(lw.w_v, am, lut, li, TargetKind::w_v, t.n1, dv, t.cv,
                                   ag, gw ? &gw->w_v : nullptr));
        Matrix dxin = layer_norm_back(t.x_in, lw.ln1_g, t.mu1, t.rstd1, dn1,
                                      gw ? &gw->ln1_g : nullptr, gw ? &gw->ln1_b : nullptr);
        axpy(dxin, 1.0, dx2);
        dx = std::move(dxin);
    }
    if (fg) {
        for (std::size_t p = 0; p < c.seq_len; ++p) {
            const std::size_t tok = static_cast<std::size_t>(ex.tokens[p]);
            for (std::size_t j = 0; j < c.d_model; ++j) fg->embedding(tok, j) += dx(p, j);
        }
    }
}

LayerWeights zero_layer(const ModelConfig& c) {
    LayerWeights lw;
    lw.ln1_g.assign(c.d_model, 0.0);
    lw.ln1_b.assign(c.d_model, 0.0);
    lw.ln2_g.assign(c.d_model, 0.0);
    lw.ln2_b.assign(c.d_model, 0.0);
    lw.w_q = Matrix(c.d_model, c.d_model);
    lw.w_k = Matrix(c.d_model, c.d_model);
    lw.w_v = Matrix(c.d_model, c.d_model);
    lw.w_o = Matrix(c.d_model, c.d_model);
    lw.w_up = Matrix(c.d_ff, c.d_model);
    lw.w_down = Matrix(c.d_model, c.d_ff);
    return lw;
}

void adam_update(TinyTransformer& m, const TinyTransformer& g, TinyTransformer& m1,
                 TinyTransformer& m2, std::size_t t, double lr) {
    auto tp = tensor_refs(m);
    auto tg = tensor_refs(const_cast<TinyTransformer&>(g));
    auto t1 = tensor_refs(m1);
    auto t2 = tensor_refs(m2);
    const double c1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(t));
    for (std::size_t k = 0; k < tp.size(); ++k) {
        double* p = tp[k].data;
        const double* gr = tg[k].data;
        double* mm = t1[k].data;
        double* vv = t2[k].data;
        for (std::size_t i = 0; i < tp[k].size(); ++i) {
            mm[i] = kAdamBeta1 * mm[i] + (1.0 - kAdamBeta1) * gr[i];
            vv[i] = kAdamBeta2 * vv[i] + (1.0 - kAdamBeta2) * gr[i] * gr[i];
            const double mh = mm[i] / c1;
            const double vh = vv[i] / c2;
            p[i] -= lr * mh / (std::sqrt(vh) + kAdamEps);
        }
    }
}

}  // namespace

const char* to_string(TargetKind k) {
    switch (k) {
        case TargetKind::w_q: return "w_q";
        case TargetKind::w_k: return "w_k";
        case TargetKind::w_v: return "w_v";
        case TargetKind::w_up: return "w_up";
        case TargetKind::w_down: return "w_down";
    }
    throw Error("unknown target kind");
}

std::vector<TensorRef> tensor_refs(TinyTransformer& m) {
    std::vector<TensorRef> refs;
    auto push_mat = [&](const std::string& name, Matrix& mat) {
        refs.push_back({name, mat.data(), mat.rows(), mat.cols()});
    };
    auto push_vec = [&](const std::string& name, Vec& v) {
        refs.push_back({name, v.data(), 1, v.size()});
    };
    push_mat("embedding", m.embedding);
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        const std::string pre = "layer" + std::to_string(l) + ".";
        LayerWeights& lw = m.layers[l];
        push_vec(pre + "ln1_g", lw.ln1_g);
        push_vec(pre + "ln1_b", lw.ln1_b);
        push_vec(pre + "ln2_g", lw.ln2_g);
        push_vec(pre + "ln2_b", lw.ln2_b);
        push_mat(pre + "w_q", lw.w_q);
        push_mat(pre + "w_k", lw.w_k);
        push_mat(pre + "w_v", lw.w_v);
        push_mat(pre + "w_o", lw.w_o);
        push_mat(pre + "w_up", lw.w_up);
        push_mat(pre + "w_down", lw.w_down);
    }
    push_mat("head", m.head);
    return refs;
}

TinyTransformer zero_model(const ModelConfig& config) {
    validate(config);
    TinyTransformer z;
    z.config = config;
    z.embedding = Matrix(config.vocab, config.d_model);
    z.layers.reserve(config.n_layers);
    for (std::size_t l = 0; l < config.n_layers; ++l) z.layers.push_back(zero_layer(config));
    z.head = Matrix(config.n_classes, config.d_model);
    return z;
}

TinyTransformer zero_like(const TinyTransformer& m) { return zero_model(m.config); }

ByteBuf model_payload(const TinyTransformer& m) {
    ByteBuf buf;
    auto refs = tensor_refs(const_cast<TinyTransformer&>(m));
    for (const TensorRef& r : refs)
        for (std::size_t i = 0; i < r.size(); ++i) append_f64_le(buf, r.data[i]);
    return buf;
}

std::string model_hash(const TinyTransformer& m) {
    const ByteBuf buf = model_payload(m);
    return sha256_hex(buf);
}

std::vector<TargetSlot> target_slots(const ModelConfig& c) {
    validate(c);
    std::vector<TargetKind> kinds;
    if (c.target_set == "qkv_mlp")
        kinds = {TargetKind::w_q, TargetKind::w_k, TargetKind::w_v, TargetKind::w_up,
                 TargetKind::w_down};
    else
        kinds = {TargetKind::w_q, TargetKind::w_v};
    std::vector<TargetSlot> out;
    for (std::size_t l = 0; l < c.n_layers; ++l)
        for (TargetKind k : kinds)
            out.push_back({l, k, "layer" + std::to_string(l) + "." + to_string(k)});
    return out;
}

const Matrix& target_weight(const TinyTransformer& m, const TargetSlot& t) {
    require(t.layer < m.layers.size(), "target layer out of range");
    const LayerWeights& lw = m.layers[t.layer];
    switch (t.kind) {
        case TargetKind::w_q: return lw.w_q;
        case TargetKind::w_k: return lw.w_k;
        case TargetKind::w_v: return lw.w_v;
        case TargetKind::w_up: return lw.w_up;
        case TargetKind::w_down: return lw.w_down;
    }
    throw Error("unknown target kind");
}

ExampleTrace trace_forward(const TinyTransformer& m, const Example& ex) {
    return run_forward(m, ex, nullptr, nullptr);
}

TinyTransformer pretrain_host(const ModelConfig& config, const TaskSpec& pretask,
                              Vec* loss_history) {
    validate(config);
    const Dataset ds = generate_task(pretask, config);
    TinyTransformer m;
    m.config = config;
    Rng rw(config.seed);
    m.embedding = gaussian_matrix(config.vocab, config.d_model, 1.0, rw);
    const double s_model = 1.0 / std::sqrt(static_cast<double>(config.d_model));
    const double s_ff = 1.0 / std::sqrt(static_cast<double>(config.d_ff));
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        LayerWeights lw;
        lw.ln1_g.assign(config.d_model, 1.0);
        lw.ln1_b.assign(config.d_model, 0.0);
        lw.ln2_g.assign(config.d_model, 1.0);
        lw.ln2_b.assign(config.d_model, 0.0);
        lw.w_q = gaussian_matrix(config.d_model, config.d_model, s_model, rw);
        lw.w_k = gaussian_matrix(config.d_model, config.d_model, s_model, rw);
        lw.w_v = gaussian_matrix(config.d_model, config.d_model, s_model, rw);
        lw.w_o = gaussian_matrix(config.d_model, config.d_model, s_model, rw);
        lw.w_up = gaussian_matrix(config.d_ff, config.d_model, s_model, rw);
        lw.w_down = gaussian_matrix(config.d_model, config.d_ff, s_ff, rw);
        m.layers.push_back(std::move(lw));
    }
    m.head = gaussian_matrix(config.n_classes, config.d_model, s_model, rw);

    TinyTransformer m1 = zero_like(m), m2 = zero_like(m);
    Rng rb(config.seed ^ 0x9e3779b97f4a7c15ULL);  // batch-sampling stream
    if (loss_history) loss_history->clear();
    for (std::size_t step = 0; step < kPretrainSteps; ++step) {
        std::vector<Example> batch;
        batch.reserve(kPretrainBatch);
        for (std::size_t b = 0; b < kPretrainBatch; ++b)
            batch.push_back(ds.train[rb.below(ds.train.size())]);
        auto [loss, grads] = full_forward_backward(m, batch);
        require(std::isfinite(loss),
                "pretrain_host: loss diverged at step " + std::to_string(step));
        if (loss_history) loss_history->push_back(loss);
        adam_update(m, grads, m1, m2, step + 1, kPretrainLr);
    }
    return m;
}

std::map<std::string, FeatureSet> collect_features(const TinyTransformer& m,
                                                   const TaskSpec& task, double fraction,
                                                   Rng& rng) {
    require(fraction > 0.0 && fraction <= 1.0, "collect_features: fraction must be in (0,1]");
    const Dataset ds = generate_task(task, m.config);
    const std::size_t n = ds.train.size();
    const auto count = static_cast<std::size_t>(fraction * static_cast<double>(n));
    require(count >= 1, "collect_features: fraction selects no training examples");
    std::vector<std::size_t> perm = rng.permutation(n);
    std::vector<std::size_t> selected(perm.begin(), perm.begin() + static_cast<long>(count));
    std::sort(selected.begin(), selected.end());

    const auto targets = target_slots(m.config);
    const std::string hash = model_hash(m);
    const std::size_t seq = m.config.seq_len;
    std::map<std::string, FeatureSet> out;
    for (const TargetSlot& t : targets) {
        FeatureSet fs;
        fs.layer_id = static_cast<int>(t.layer);
        fs.weight_name = t.name;
        fs.model_hash = hash;
        fs.data = Matrix(count * seq, target_weight(m, t).cols());
        out.emplace(t.name, std::move(fs));
    }
    for (std::size_t si = 0; si < selected.size(); ++si) {
        const ExampleTrace tr = trace_forward(m, ds.train[selected[si]]);
        for (const TargetSlot& t : targets) {
            const LayerTrace& lt = tr.layers[t.layer];
            const Matrix* src = nullptr;
            switch (t.kind) {
                case TargetKind::w_q:
                case TargetKind::w_k:
                case TargetKind::w_v: src = &lt.n1; break;
                case TargetKind::w_up: src = &lt.n2; break;
                case TargetKind::w_down: src = &lt.gelu_u; break;
            }
            Matrix& dst = out.at(t.name).data;
            for (std::size_t p = 0; p < seq; ++p)
                for (std::size_t j = 0; j < src->cols(); ++j)
                    dst(si * seq + p, j) = (*src)(p, j);
        }
    }
    return out;
}

AdaptedModel attach_adapters(const TinyTransformer& model, AdapterVariant variant,
                             std::size_t rank, double alpha,
                             const std::map<std::string, Projector>* projectors,
                             bool proj_trainable, std::uint64_t adapter_seed) {
    AdaptedModel am;
    am.model = model;
    am.variant = variant;
    am.targets = target_slots(model.config);
    am.host_hash = model_hash(model);
    Rng ra(adapter_seed);
    for (const TargetSlot& t : am.targets) {
        am.frozen.emplace_back(target_weight(model, t));
        const FrozenLinear& fw = am.frozen.back();
        switch (variant) {
            case AdapterVariant::lora:
                am.adapters.push_back(init_lora(fw, rank, alpha, ra));
                break;
            case AdapterVariant::dora:
                am.adapters.push_back(init_dora(fw, rank, alpha, ra));
                break;
            case AdapterVariant::ipa: {
                require(projectors != nullptr,
                        "attach_adapters: ipa requires a projector per target weight");
                const auto it = projectors->find(t.name);
                require(it != projectors->end(),
                        "attach_adapters: missing projector for " + t.name);
                am.adapters.push_back(init_ipa(fw, it->second, alpha, proj_trainable));
                break;
            }
        }
    }
    return am;
}

std::size_t trainable_param_count(const AdaptedModel& am) {
    std::size_t n = 0;
    for (const Adapter& ad : am.adapters) {
        n += ad.b.size();
        if (ad.variant == AdapterVariant::ipa) {
            if (ad.proj_trainable) n += ad.proj.u.size();
        } else {
            n += ad.a.size();
        }
        if (ad.variant == AdapterVariant::dora) n += ad.m.size();
    }
    return n;
}

std::pair<double, std::vector<AdapterGrads>> model_forward_backward(
    const AdaptedModel& am, const std::vector<Example>& batch) {
    require(!batch.empty(), "model_forward_backward: empty batch");
    const auto lut = adapter_lookup(am);
    const std::size_t nb = batch.size();
    const double inv_b = 1.0 / static_cast<double>(nb);
    std::vector<double> losses(nb, 0.0);
    std::vector<std::vector<AdapterGrads>> slots(nb);
    std::vector<std::string> errors(nb);

// Exceptions cannot cross the parallel region; stash them per slot.
#pragma omp parallel for schedule(static)
    for (std::size_t b = 0; b < nb; ++b) {
        try {
            const ExampleTrace tr = run_forward(am.model, batch[b], &am, &lut);
            Vec dlogits;
            losses[b] = ce_loss(tr.logits, batch[b].label, &dlogits);
            require(std::isfinite(losses[b]), "model_forward_backward: loss is not finite");
            for (double& v : dlogits) v *= inv_b;
            auto& g = slots[b];
            g.reserve(am.adapters.size());
            for (const Adapter& ad : am.adapters) g.push_back(grads_zero_like(ad));
            backward_example(am.model, tr, batch[b], dlogits, &am, &lut, &g, nullptr);
        } catch (const std::exception& e) {
            errors[b] = e.what();
        }
    }
    for (const std::string& e : errors)
        if (!e.empty()) throw Error(e);

    double loss = 0.0;
    for (std::size_t b = 0; b < nb; ++b) loss += losses[b];
    loss *= inv_b;
    require(std::isfinite(loss), "model_forward_backward: loss is not finite");
    std::vector<AdapterGrads> grads = std::move(slots[0]);
    for (std::size_t b = 1; b < nb; ++b)
        for (std::size_t t = 0; t < grads.size(); ++t)
            grads_accumulate(grads[t], slots[b][t]);
    return {loss, std::move(grads)};
}

std::pair<double, TinyTransformer> full_forward_backward(const TinyTransformer& m,
                                                         const std::vector<Example>& batch) {
    require(!batch.empty(), "full_forward_backward: empty batch");
    const std::size_t nb = batch.size();
    const double inv_b = 1.0 / static_cast<double>(nb);
    std::vector<double> losses(nb, 0.0);
    std::vector<TinyTransformer> slots(nb);
    std::vector<std::string> errors(nb);

#pragma omp parallel for schedule(static)
    for (std::size_t b = 0; b < nb; ++b) {
        try {
            const ExampleTrace tr = run_forward(m, batch[b], nullptr, nullptr);
            Vec dlogits;
            losses[b] = ce_loss(tr.logits, batch[b].label, &dlogits);
            require(std::isfinite(losses[b]), "full_forward_backward: loss is not finite");
            for (double& v : dlogits) v *= inv_b;
            slots[b] = zero_like(m);
            backward_example(m, tr, batch[b], dlogits, nullptr, nullptr, nullptr,
                             &slots[b]);
        } catch (const std::exception& e) {
            errors[b] = e.what();
        }
    }
    for (const std::string& e : errors)
        if (!e.empty()) throw Error(e);

    double loss = 0.0;
    for (std::size_t b = 0; b < nb; ++b) loss += losses[b];
    loss *= inv_b;
    require(std::isfinite(loss), "full_forward_backward: loss is not finite");
    TinyTransformer grads = std::move(slots[0]);
    auto dst = tensor_refs(grads);
    for (std::size_t b = 1; b < nb; ++b) {
        auto src = tensor_refs(slots[b]);
        for (std::size_t k = 0; k < dst.size(); ++k)
            for (std::size_t i = 0; i < dst[k].size(); ++i) dst[k].data[i] += src[k].data[i];
    }
    return {loss, std::move(grads)};
}

Vec model_logits(const TinyTransformer& m, const Example& ex) {
    return run_forward(m, ex, nullptr, nullptr).logits;
}

Vec adapted_logits(const AdaptedModel& am, const Example& ex) {
    const auto lut = adapter_lookup(am);
    return run_forward(am.model, ex, &am, &lut).logits;
}

namespace {

int argmax_label(const Vec& logits) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < logits.size(); ++j)
        if (logits[j] > logits[best]) best = j;
    return static_cast<int>(best);
}

}  // namespace

double evaluate_accuracy(const TinyTransformer& m, const std::vector<Example>& exs) {
    require(!exs.empty(), "evaluate_accuracy: empty example set");
    std::size_t hits = 0;
    for (const Example& ex : exs)
        if (argmax_label(model_logits(m, ex)) == ex.label) ++hits;
    return static_cast<double>(hits) / static_cast<double>(exs.size());
}

double evaluate_accuracy(const AdaptedModel& am, const std::vector<Example>& exs) {
    require(!exs.empty(), "evaluate_accuracy: empty example set");
    const auto lut = adapter_lookup(am);
    std::size_t hits = 0;
    for (const Example& ex : exs)
        if (argmax_label(run_forward(am.model, ex, &am, &lut).logits) == ex.label) ++hits;
    return static_cast<double>(hits) / static_cast<double>(exs.size());
}

}  // namespace ipa
