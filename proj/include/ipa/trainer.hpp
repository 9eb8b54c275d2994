#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ipa/model.hpp"

namespace ipa {

struct TrainConfig {
    std::size_t steps = 200;
    std::size_t batch_size = 16;
    double base_lr = 1e-3;
    std::size_t warmup_steps = 20;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t seed = 0;
};

void validate(const TrainConfig& c);

// Linear warmup to base_lr at step warmup_steps-1, then linear decay to 0 at
// step steps. Defined on 0 <= t <= steps; errors past the end.
double lr_at(const TrainConfig& c, std::size_t t);

// Adam moments shaped like the gradients they smooth. t counts completed
// steps (bias correction uses t after increment).
struct AdamState {
    std::vector<AdapterGrads> m, v;
    std::size_t t = 0;
};

AdamState adam_init(const AdaptedModel& am);

// One Adam update of every trainable adapter parameter. U moves only for
// trainable-projector ipa adapters (and is marked fine_tuned when it does).
void adam_step(AdaptedModel& am, const std::vector<AdapterGrads>& grads,
               AdamState& state, const TrainConfig& c, double lr);

// Flat-vector variant for plain parameter blocks (tests, small fits).
struct AdamVecState {
    Vec m, v;
    std::size_t t = 0;
};

void adam_step(Vec& params, const Vec& grads, AdamVecState& state,
               const TrainConfig& c, double lr);

struct StepMetric {
    std::size_t step = 0;
    double lr = 0.0;
    double loss = 0.0;
};

using MetricsLog = std::vector<StepMetric>;

// CSV with header "step,lr,loss", '.' decimals, LF endings; floats printed
// with enough digits to round-trip bit-exactly.
std::string metrics_csv(const MetricsLog& log);

// Adapter-only training on the task's train split: deterministic batch
// sampling from c.seed, Adam with the warmup/decay schedule, loss and lr
// recorded every step. Host weights never move.
MetricsLog train(AdaptedModel& am, const TaskSpec& task, const TrainConfig& c);

// Same loop against a caller-supplied dataset (reused by the analysis suite
// to avoid regenerating tasks).
MetricsLog train_on(AdaptedModel& am, const std::vector<Example>& train_split,
                    const TrainConfig& c);

}  // namespace ipa
