#include "ipa/trainer.hpp"

#include <cmath>
#include <cstdio>

namespace ipa {
namespace {

// p -= lr * mhat / (sqrt(vhat) + eps), updating moments in place.
void adam_span(double* p, const double* g, double* m, double* v, std::size_t n,
               std::size_t t, const TrainConfig& c, double lr) {
    const double c1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < n; ++i) {
        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
        const double step = lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + c.eps);
        p[i] -= step;
        require(std::isfinite(p[i]), "adam_step: non-finite update");
    }
}

void check_same_shape(const Matrix& a, const Matrix& b, const char* what) {
    require(a.rows() == b.rows() && a.cols() == b.cols(),
            std::string("adam_step: shape mismatch in ") + what);
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

void validate(const TrainConfig& c) {
    // steps == 0 is legal: an untrained run (adapters stay at init).
    require(c.batch_size >= 1, "TrainConfig: batch_size must be >= 1");
    require(c.base_lr > 0.0, "TrainConfig: base_lr must be positive");
    require(c.warmup_steps <= c.steps, "TrainConfig: warmup_steps must be <= steps");
    require(c.beta1 > 0.0 && c.beta1 < 1.0, "TrainConfig: beta1 must be in (0,1)");
    require(c.beta2 > 0.0 && c.beta2 < 1.0, "TrainConfig: beta2 must be in (0,1)");
    require(c.eps > 0.0, "TrainConfig: eps must be positive");
}

double lr_at(const TrainConfig& c, std::size_t t) {
    require(t <= c.steps, "lr_at: step past the end of the schedule");
    if (t == c.steps) return 0.0;
    if (t < c.warmup_steps)
        return c.base_lr * static_cast<double>(t + 1) / static_cast<double>(c.warmup_steps);
    return c.base_lr * static_cast<double>(c.steps - t) /
           static_cast<double>(c.steps - c.warmup_steps);
}

AdamState adam_init(const AdaptedModel& am) {
    AdamState st;
    st.m.reserve(am.adapters.size());
    st.v.reserve(am.adapters.size());
    for (const Adapter& ad : am.adapters) {
        st.m.push_back(grads_zero_like(ad));
        st.v.push_back(grads_zero_like(ad));
    }
    return st;
}

void adam_step(AdaptedModel& am, const std::vector<AdapterGrads>& grads,
               AdamState& state, const TrainConfig& c, double lr) {
    require(grads.size() == am.adapters.size(), "adam_step: gradient count mismatch");
    require(state.m.size() == am.adapters.size(), "adam_step: state count mismatch");
    state.t += 1;
    for (std::size_t i = 0; i < am.adapters.size(); ++i) {
        Adapter& ad = am.adapters[i];
        const AdapterGrads& g = grads[i];
        AdapterGrads& m = state.m[i];
        AdapterGrads& v = state.v[i];

        check_same_shape(ad.b, g.d_b, "b");
        adam_span(ad.b.data(), g.d_b.data(), m.d_b.data(), v.d_b.data(), ad.b.size(),
                  state.t, c, lr);
        if (ad.variant != AdapterVariant::ipa) {
            check_same_shape(ad.a, g.d_a, "a");
            adam_span(ad.a.data(), g.d_a.data(), m.d_a.data(), v.d_a.data(), ad.a.size(),
                      state.t, c, lr);
        } else if (ad.proj_trainable) {
            check_same_shape(ad.proj.u, g.d_proj, "u");
            adam_span(ad.proj.u.data(), g.d_proj.data(), m.d_proj.data(),
                      v.d_proj.data(), ad.proj.u.size(), state.t, c, lr);
            ad.proj.fine_tuned = true;
        }
        if (ad.variant == AdapterVariant::dora) {
            require(ad.m.size() == g.d_m.size(), "adam_step: shape mismatch in m");
            adam_span(ad.m.data(), g.d_m.data(), m.d_m.data(), v.d_m.data(),
                      ad.m.size(), state.t, c, lr);
        }
    }
}

void adam_step(Vec& params, const Vec& grads, AdamVecState& state, const TrainConfig& c,
               double lr) {
    require(params.size() == grads.size(), "adam_step: shape mismatch");
    if (state.m.empty()) {
        state.m.assign(params.size(), 0.0);
        state.v.assign(params.size(), 0.0);
    }
    require(state.m.size() == params.size(), "adam_step: state shape mismatch");
    state.t += 1;
    adam_span(params.data(), grads.data(), state.m.data(), state.v.data(), params.size(),
              state.t, c, lr);
}

std::string metrics_csv(const MetricsLog& log) {
    std::string out = "step,lr,loss\n";
    for (const StepMetric& m : log) {
        out += std::to_string(m.step);
        out += ',';
        out += format_double(m.lr);
        out += ',';
        out += format_double(m.loss);
        out += '\n';
    }
    return out;
}

MetricsLog train_on(AdaptedModel& am, const std::vector<Example>& train_split,
                    const TrainConfig& c) {
    validate(c);
    require(!train_split.empty(), "train: empty training split");
    Rng rb(c.seed);
    AdamState state = adam_init(am);
    MetricsLog log;
    log.reserve(c.steps);
    for (std::size_t step = 0; step < c.steps; ++step) {
        std::vector<Example> batch;
        batch.reserve(c.batch_size);
        for (std::size_t b = 0; b < c.batch_size; ++b)
            batch.push_back(train_split[rb.below(train_split.size())]);
        const double lr = lr_at(c, step);
        try {
            const auto [loss, grads] = model_forward_backward(am, batch);
            log.push_back({step, lr, loss});
            adam_step(am, grads, state, c, lr);
        } catch (const Error& e) {
            throw Error("train: aborted at step " + std::to_string(step) + ": " +
                        e.what());
        }
    }
    return log;
}

MetricsLog train(AdaptedModel& am, const TaskSpec& task, const TrainConfig& c) {
    const Dataset ds = generate_task(task, am.model.config);
    return train_on(am, ds.train, c);
}

}  // namespace ipa
