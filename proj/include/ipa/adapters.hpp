#pragma once

#include <cstddef>
#include <string>

#include "ipa/matrix.hpp"
#include "ipa/projector.hpp"
#include "ipa/rng.hpp"

namespace ipa {

// A linear layer whose weight never changes after construction; adapters add
// their residual around it.
class FrozenLinear {
public:
    explicit FrozenLinear(Matrix w) : w_(std::move(w)) {
        require(!w_.empty(), "FrozenLinear: empty weight");
        ensure_finite(w_, "FrozenLinear weight");
    }

    const Matrix& w() const { return w_; }
    std::size_t d_out() const { return w_.rows(); }
    std::size_t d_in() const { return w_.cols(); }

private:
    Matrix w_;
};

enum class AdapterVariant { lora, ipa, dora };

const char* to_string(AdapterVariant v);
AdapterVariant adapter_variant_from_string(const std::string& s);

// One adapter attached to one frozen layer. Field use by variant:
//   lora: a (r x d_in), b (d_out x r)
//   ipa:  proj (d_h x d_in input map), b (d_out x d_h); a unused
//   dora: m (d_in column magnitudes), a, b as in lora
struct Adapter {
    AdapterVariant variant = AdapterVariant::lora;
    double alpha = 0.0;
    double lambda = 0.0;  // alpha / rank at construction

    Matrix a;
    Matrix b;
    Projector proj;
    bool proj_trainable = false;
    Vec m;

    // r for lora/dora, d_h for ipa.
    std::size_t rank() const {
        return variant == AdapterVariant::ipa ? proj.d_h() : a.rows();
    }
    std::size_t d_out() const { return b.rows(); }
    std::size_t d_in() const {
        return variant == AdapterVariant::ipa ? proj.d_in() : a.cols();
    }
};

// Gradients of the trainable fields; non-trainable slots stay empty.
struct AdapterGrads {
    AdapterVariant variant = AdapterVariant::lora;
    Matrix d_b;
    Matrix d_a;     // lora, dora
    Matrix d_proj;  // ipa with proj_trainable
    Vec d_m;        // dora
};

AdapterGrads grads_zero_like(const Adapter& ad);
// dst += src, used to sum per-token grads in fixed sample order.
void grads_accumulate(AdapterGrads& dst, const AdapterGrads& src);
void grads_scale(AdapterGrads& g, double s);

// Per-call intermediates from forward, consumed by backward.
struct ForwardCache {
    Vec x;
    Vec x_h;        // a*x or U*x (lora/ipa)
    Matrix v;       // W + lambda*B*A before normalization (dora)
    Vec col_norms;  // column 2-norms of v (dora)
};

struct ForwardResult {
    Vec z;
    ForwardCache cache;
};

Adapter init_lora(const FrozenLinear& w, std::size_t r, double alpha, Rng& rng);
Adapter init_ipa(const FrozenLinear& w, Projector proj, double alpha, bool proj_trainable);
Adapter init_dora(const FrozenLinear& w, std::size_t r, double alpha, Rng& rng);

ForwardResult forward(const Adapter& ad, const FrozenLinear& w, const Vec& x);

AdapterGrads backward(const Adapter& ad, const ForwardCache& cache, const Vec& dz);

// Gradient with respect to the layer input, for backprop through the host.
Vec backward_input(const Adapter& ad, const FrozenLinear& w, const ForwardCache& cache,
                   const Vec& dz);

// Dense d_out x d_in matrix equivalent to the adapted layer.
Matrix merge(const Adapter& ad, const FrozenLinear& w);

}  // namespace ipa
