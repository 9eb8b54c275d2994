#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "ipa/projector.hpp"
#include "ipa/trainer.hpp"

using namespace ipa;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.vocab = 12;
    c.d_model = 8;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_ff = 12;
    c.seq_len = 4;
    c.n_classes = 3;
    c.seed = 5;
    return c;
}

TaskSpec tiny_task() {
    TaskSpec t;
    t.task_id = "tiny";
    t.seed = 11;
    t.intrinsic_dim = 6;
    t.spectrum = 0.7;
    t.label_rule = 3;
    t.n_train = 48;
    t.n_eval = 16;
    return t;
}

const TinyTransformer& tiny_host() {
    static const TinyTransformer m = pretrain_host(tiny_config(), tiny_task());
    return m;
}

// Downstream task: same input family, different seed and labels, so the
// pretrained host starts with real loss to remove.
TaskSpec downstream_task() {
    TaskSpec t = tiny_task();
    t.task_id = "downstream";
    t.seed = 19;
    t.label_rule = 55;
    return t;
}

TrainConfig schedule_config() {
    TrainConfig c;
    c.steps = 110;
    c.warmup_steps = 10;
    c.base_lr = 1e-3;
    return c;
}

std::map<std::string, Projector> pca_projectors(const TinyTransformer& m,
                                                const TaskSpec& task, std::size_t d_h) {
    Rng rng(2);
    const auto feats = collect_features(m, task, 1.0, rng);
    std::map<std::string, Projector> out;
    for (const auto& [name, fs] : feats) out.emplace(name, exact_pca(fs, d_h, false));
    return out;
}

double window_mean(const MetricsLog& log, std::size_t start, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = start; i < start + n; ++i) s += log[i].loss;
    return s / static_cast<double>(n);
}

}  // namespace

TEST_CASE("lr schedule hits its pinned values") {
    const TrainConfig c = schedule_config();
    CHECK(lr_at(c, 9) == 1e-3);    // peak at the end of warmup
    CHECK(lr_at(c, 60) == 5e-4);   // halfway down the decay
    CHECK(lr_at(c, 110) == 0.0);   // exactly zero at the end
    CHECK(lr_at(c, 0) == doctest::Approx(1e-4).epsilon(1e-12));
    CHECK_THROWS_AS(lr_at(c, 111), Error);
}

TEST_CASE("lr schedule is continuous, positive, and piecewise monotone") {
    const TrainConfig c = schedule_config();
    for (std::size_t t = 0; t + 1 <= c.steps; ++t) {
        const double now = lr_at(c, t);
        CHECK(now >= 0.0);
        CHECK(now <= c.base_lr);
        if (t + 1 < c.warmup_steps) CHECK(lr_at(c, t + 1) > now);
        if (t >= c.warmup_steps) CHECK(lr_at(c, t + 1) < now);
    }
    // Continuity across the boundary: first decay value == peak value.
    CHECK(lr_at(c, c.warmup_steps) == c.base_lr);

    TrainConfig z = c;
    z.warmup_steps = 0;
    CHECK(lr_at(z, 0) == z.base_lr);

    TrainConfig full = c;
    full.warmup_steps = full.steps;
    CHECK(lr_at(full, full.steps - 1) == full.base_lr);
    CHECK(lr_at(full, full.steps) == 0.0);
}

TEST_CASE("train config validation") {
    TrainConfig c = schedule_config();
    c.warmup_steps = c.steps + 1;
    CHECK_THROWS_AS(validate(c), Error);
    c = schedule_config();
    c.beta1 = 1.0;
    CHECK_THROWS_AS(validate(c), Error);
    c = schedule_config();
    c.base_lr = 0.0;
    CHECK_THROWS_AS(validate(c), Error);
    // Zero steps is a legal untrained run; warmup must shrink with it.
    c = schedule_config();
    c.steps = 0;
    c.warmup_steps = 0;
    validate(c);
    CHECK(lr_at(c, 0) == 0.0);
}

TEST_CASE("adam single-step and zero-gradient behavior") {
    TrainConfig c;
    Vec p{0.0};
    AdamVecState st;
    adam_step(p, Vec{1.0}, st, c, 0.1);
    CHECK(std::abs(p[0] + 0.1) < 1e-8);  // first step moves by ~lr * sign(g)
    CHECK(st.t == 1);

    Vec q{2.5, -1.0};
    AdamVecState st2;
    adam_step(q, Vec{0.0, 0.0}, st2, c, 0.1);
    CHECK(q[0] == 2.5);
    CHECK(q[1] == -1.0);
}

TEST_CASE("adam converges on a 1-D quadratic") {
    TrainConfig c;
    Vec theta{0.0};
    AdamVecState st;
    for (int i = 0; i < 500; ++i) {
        const Vec g{2.0 * (theta[0] - 3.0)};
        adam_step(theta, g, st, c, 0.05);
    }
    CHECK(std::abs(theta[0] - 3.0) < 0.01);
}

TEST_CASE("adam rejects bad shapes and non-finite updates") {
    TrainConfig c;
    Vec p{0.0, 0.0};
    AdamVecState st;
    CHECK_THROWS_AS(adam_step(p, Vec{1.0}, st, c, 0.1), Error);
    AdamVecState st2;
    Vec q{0.0};
    CHECK_THROWS_AS(
        adam_step(q, Vec{std::numeric_limits<double>::infinity()}, st2, c, 0.1), Error);
}

TEST_CASE("training reduces the loss for every variant") {
    const TinyTransformer& m = tiny_host();
    const auto projs = pca_projectors(m, downstream_task(), 2);
    TrainConfig tc;
    tc.steps = 200;
    tc.batch_size = 8;
    tc.base_lr = 5e-3;
    tc.warmup_steps = 20;
    tc.seed = 77;

    struct Run {
        AdapterVariant variant;
        double alpha;
        bool proj_ft;
    };
    for (const Run r : {Run{AdapterVariant::lora, 4.0, false},
                        Run{AdapterVariant::dora, 4.0, false},
                        Run{AdapterVariant::ipa, 0.5, true}}) {
        AdaptedModel am =
            r.variant == AdapterVariant::ipa
                ? attach_adapters(m, r.variant, 2, r.alpha, &projs, r.proj_ft, 7)
                : attach_adapters(m, r.variant, 2, r.alpha, nullptr, false, 7);
        const MetricsLog log = train(am, downstream_task(), tc);
        REQUIRE(log.size() == tc.steps);
        CHECK(log.front().lr == lr_at(tc, 0));
        CHECK(log[60].lr == lr_at(tc, 60));
        INFO("variant ", std::string(to_string(r.variant)), " first ", window_mean(log, 0, 10),
             " last ", window_mean(log, tc.steps - 10, 10));
        CHECK(window_mean(log, tc.steps - 10, 10) < window_mean(log, 0, 10));
        CHECK(log.back().loss < log.front().loss);
    }
}

TEST_CASE("training is bitwise reproducible and freezes what it must") {
    const TinyTransformer& m = tiny_host();
    const std::string host_before = model_hash(m);
    const auto projs = pca_projectors(m, downstream_task(), 2);
    TrainConfig tc;
    tc.steps = 60;
    tc.batch_size = 4;
    tc.base_lr = 5e-3;
    tc.warmup_steps = 6;
    tc.seed = 5;

    auto run = [&](bool proj_ft) {
        AdaptedModel am = attach_adapters(m, AdapterVariant::ipa, 2, 0.5, &projs,
                                          proj_ft, 13);
        const MetricsLog log = train(am, downstream_task(), tc);
        return std::make_pair(std::move(am), log);
    };

    auto [am1, log1] = run(false);
    auto [am2, log2] = run(false);
    REQUIRE(log1.size() == log2.size());
    for (std::size_t i = 0; i < log1.size(); ++i) {
        CHECK(log1[i].loss == log2[i].loss);
        CHECK(log1[i].lr == log2[i].lr);
    }
    for (std::size_t t = 0; t < am1.adapters.size(); ++t)
        CHECK(bitwise_equal(am1.adapters[t].b, am2.adapters[t].b));
    CHECK(metrics_csv(log1) == metrics_csv(log2));

    // Host untouched; frozen projector bitwise unchanged and unmarked.
    CHECK(model_hash(am1.model) == host_before);
    for (std::size_t t = 0; t < am1.adapters.size(); ++t) {
        CHECK(bitwise_equal(am1.adapters[t].proj.u, projs.at(am1.targets[t].name).u));
        CHECK_FALSE(am1.adapters[t].proj.fine_tuned);
    }

    // Trainable projector: U moves and is marked fine_tuned.
    auto [am3, log3] = run(true);
    bool any_moved = false;
    for (std::size_t t = 0; t < am3.adapters.size(); ++t) {
        CHECK(am3.adapters[t].proj.fine_tuned);
        if (!bitwise_equal(am3.adapters[t].proj.u, projs.at(am3.targets[t].name).u))
            any_moved = true;
    }
    CHECK(any_moved);
    CHECK(model_hash(am3.model) == host_before);
}

TEST_CASE("different adapter seeds give different trained adapters") {
    const TinyTransformer& m = tiny_host();
    TrainConfig tc;
    tc.steps = 30;
    tc.batch_size = 4;
    tc.base_lr = 5e-3;
    tc.warmup_steps = 3;
    tc.seed = 5;
    AdaptedModel a = attach_adapters(m, AdapterVariant::lora, 2, 4.0, nullptr, false, 1);
    AdaptedModel b = attach_adapters(m, AdapterVariant::lora, 2, 4.0, nullptr, false, 2);
    (void)train(a, downstream_task(), tc);
    (void)train(b, downstream_task(), tc);
    CHECK_FALSE(bitwise_equal(a.adapters[0].a, b.adapters[0].a));
    CHECK_FALSE(bitwise_equal(a.adapters[0].b, b.adapters[0].b));
}

TEST_CASE("metrics csv has the pinned shape") {
    MetricsLog log{{0, 1e-4, 1.25}, {1, 2e-4, 1.0 / 3.0}};
    const std::string csv = metrics_csv(log);
    CHECK(csv.rfind("step,lr,loss\n", 0) == 0);
    CHECK(csv.find('\r') == std::string::npos);
    CHECK(csv.back() == '\n');
    // Round-trip the second loss through strtod: printed with full precision.
    const std::size_t last_comma = csv.rfind(',');
    const double parsed = std::strtod(csv.c_str() + last_comma + 1, nullptr);
    CHECK(parsed == 1.0 / 3.0);
    std::size_t lines = 0;
    for (char ch : csv)
        if (ch == '\n') ++lines;
    CHECK(lines == 3);
}

TEST_CASE("train rejects an empty split") {
    const TinyTransformer& m = tiny_host();
    AdaptedModel am = attach_adapters(m, AdapterVariant::lora, 2, 4.0, nullptr, false, 1);
    TrainConfig tc;
    CHECK_THROWS_AS(train_on(am, {}, tc), Error);
}
