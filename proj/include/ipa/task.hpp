#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ipa/matrix.hpp"
#include "ipa/rng.hpp"

namespace ipa {

struct ModelConfig {
    std::size_t vocab = 64;
    std::size_t d_model = 32;
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t d_ff = 64;
    std::size_t seq_len = 16;
    std::size_t n_classes = 4;
    // qkv_mlp: q/k/v plus both MLP projections per layer (language convention);
    // qv: query/value only (vision convention).
    std::string target_set = "qkv_mlp";
    std::uint64_t seed = 0;
};

void validate(const ModelConfig& c);

// A seeded synthetic classification task. Inputs live in an
// intrinsic_dim-dimensional latent subspace with geometrically decaying
// variances; tokens are per-position quantizations of latent projections;
// labels come from a random two-layer teacher over the latent. Tasks sharing
// `seed` share inputs exactly; `label_rule` alone changes the labels.
struct TaskSpec {
    std::string task_id;
    std::uint64_t seed = 0;
    std::size_t intrinsic_dim = 8;
    double spectrum = 0.7;  // variance ratio between consecutive latent dims
    std::uint64_t label_rule = 0;
    std::size_t n_train = 0;
    std::size_t n_eval = 0;
};

struct Example {
    std::vector<int> tokens;  // seq_len entries in [0, vocab)
    int label = 0;            // in [0, n_classes)
};

struct Dataset {
    std::vector<Example> train;
    std::vector<Example> eval;
};

Dataset generate_task(const TaskSpec& task, const ModelConfig& config);

}  // namespace ipa
