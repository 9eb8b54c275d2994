#include "ipa/task.hpp"

#include <cmath>

#include "ipa/common.hpp"

namespace ipa {

void validate(const ModelConfig& c) {
    require(c.vocab >= 2, "config: vocab must be >= 2");
    require(c.d_model >= 1 && c.n_layers >= 1 && c.n_heads >= 1 && c.d_ff >= 1 &&
                c.seq_len >= 1 && c.n_classes >= 2,
            "config: all counts must be >= 1 (n_classes >= 2)");
    require(c.d_model % c.n_heads == 0, "config: d_model not divisible by n_heads");
    require(c.target_set == "qkv_mlp" || c.target_set == "qv",
            "config: target_set must be qkv_mlp or qv");
}

namespace {

constexpr std::size_t kTeacherHidden = 16;
// Pre-activation scale of the teacher's first layer. Keeps the tanh units in
// their mildly nonlinear range so the label boundary stays smooth enough to
// generalize from a few hundred examples.
constexpr double kTeacherScale = 0.5;

// Standard normal CDF.
double phi(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

}  // namespace

Dataset generate_task(const TaskSpec& task, const ModelConfig& config) {
    validate(config);
    require(task.intrinsic_dim >= 1, "task: intrinsic_dim must be >= 1");
    require(task.spectrum > 0.0 && task.spectrum <= 1.0,
            "task: spectrum must be in (0, 1]");
    require(task.n_train >= 1, "task: n_train must be >= 1");

    const std::size_t k = task.intrinsic_dim;
    Vec lambda(k);
    for (std::size_t i = 0; i < k; ++i) lambda[i] = std::pow(task.spectrum, static_cast<double>(i));

    // Input side: per-position projection vectors, then one latent per example.
    Rng rin(task.seed);
    Matrix g = gaussian_matrix(config.seq_len, k, 1.0, rin);
    Vec pos_norm(config.seq_len);
    for (std::size_t p = 0; p < config.seq_len; ++p) {
        double s = 0.0;
        for (std::size_t i = 0; i < k; ++i) s += g(p, i) * g(p, i) * lambda[i];
        pos_norm[p] = std::sqrt(s);
        require(pos_norm[p] > 0.0, "task: degenerate position projection");
    }

    // Label side: a fixed random two-layer tanh teacher over the latent.
    Rng rlab(task.label_rule);
    Matrix w1 = gaussian_matrix(kTeacherHidden, k,
                                kTeacherScale / std::sqrt(static_cast<double>(k)), rlab);
    Matrix w2 = gaussian_matrix(config.n_classes, kTeacherHidden,
                                1.0 / std::sqrt(static_cast<double>(kTeacherHidden)), rlab);

    auto make_example = [&](Rng& rng) {
        Vec z(k);
        for (std::size_t i = 0; i < k; ++i) z[i] = rng.gaussian() * std::sqrt(lambda[i]);
        Example ex;
        ex.tokens.resize(config.seq_len);
        for (std::size_t p = 0; p < config.seq_len; ++p) {
            double s = 0.0;
            for (std::size_t i = 0; i < k; ++i) s += g(p, i) * z[i];
            const double u = phi(s / pos_norm[p]);
            auto tok = static_cast<long long>(u * static_cast<double>(config.vocab));
            if (tok < 0) tok = 0;
            if (tok >= static_cast<long long>(config.vocab))
                tok = static_cast<long long>(config.vocab) - 1;
            ex.tokens[p] = static_cast<int>(tok);
        }
        Vec h = matvec(w1, z);
        for (double& v : h) v = std::tanh(v);
        Vec logits = matvec(w2, h);
        std::size_t best = 0;
        for (std::size_t c = 1; c < logits.size(); ++c)
            if (logits[c] > logits[best]) best = c;
        ex.label = static_cast<int>(best);
        return ex;
    };

    Dataset ds;
    ds.train.reserve(task.n_train);
    for (std::size_t i = 0; i < task.n_train; ++i) ds.train.push_back(make_example(rin));
    ds.eval.reserve(task.n_eval);
    for (std::size_t i = 0; i < task.n_eval; ++i) ds.eval.push_back(make_example(rin));
    return ds;
}

}  // namespace ipa
