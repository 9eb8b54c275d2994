#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ipa/adapters.hpp"
#include "ipa/bytes.hpp"
#include "ipa/features.hpp"
#include "ipa/matrix.hpp"
#include "ipa/rng.hpp"
#include "ipa/task.hpp"

namespace ipa {

// Pre-LN transformer block weights. Linear maps carry no bias; the two layer
// norms own the only vector parameters.
struct LayerWeights {
    Vec ln1_g, ln1_b;  // d_model
    Vec ln2_g, ln2_b;  // d_model
    Matrix w_q, w_k, w_v, w_o;  // d_model x d_model
    Matrix w_up;                // d_ff x d_model
    Matrix w_down;              // d_model x d_ff
};

// Deterministic host: token embedding -> n_layers pre-LN blocks
// (bidirectional softmax attention, erf GELU MLP) -> mean pooling -> linear
// classifier. No positional embeddings, no dropout, no generation.
struct TinyTransformer {
    ModelConfig config;
    Matrix embedding;  // vocab x d_model
    std::vector<LayerWeights> layers;
    Matrix head;       // n_classes x d_model
};

// Mutable view of one named tensor (LN vectors appear as 1 x d).
struct TensorRef {
    std::string name;
    double* data;
    std::size_t rows, cols;
    std::size_t size() const { return rows * cols; }
};

// Every tensor in canonical order: embedding, per-layer
// (ln1_g, ln1_b, ln2_g, ln2_b, w_q, w_k, w_v, w_o, w_up, w_down), head.
// This order defines the model payload for hashing and serialization.
std::vector<TensorRef> tensor_refs(TinyTransformer& m);

// Same shapes, every tensor zeroed; doubles as a gradient/moment container.
TinyTransformer zero_model(const ModelConfig& config);
TinyTransformer zero_like(const TinyTransformer& m);

// SHA-256 over the concatenated tensor payload (f64 little-endian, canonical
// order). Identifies the frozen host; feature sets and projectors carry it.
std::string model_hash(const TinyTransformer& m);

ByteBuf model_payload(const TinyTransformer& m);

enum class TargetKind { w_q, w_k, w_v, w_up, w_down };

const char* to_string(TargetKind k);

struct TargetSlot {
    std::size_t layer = 0;
    TargetKind kind = TargetKind::w_q;
    std::string name;  // e.g. "layer0.w_q"
};

// Adapter slots implied by config.target_set, in layer-major canonical order.
std::vector<TargetSlot> target_slots(const ModelConfig& c);

const Matrix& target_weight(const TinyTransformer& m, const TargetSlot& t);

struct AdaptedModel {
    TinyTransformer model;  // frozen host (never mutated by training)
    AdapterVariant variant = AdapterVariant::lora;
    std::vector<TargetSlot> targets;
    std::vector<FrozenLinear> frozen;  // parallel to targets
    std::vector<Adapter> adapters;     // parallel to targets
    std::string host_hash;
};

// Per-example forward intermediates; enough state for either backward mode.
struct LayerTrace {
    Matrix x_in;
    Vec mu1, rstd1;
    Matrix n1;  // LN1 output = input rows seen by w_q/w_k/w_v
    Matrix q, k, v;
    std::vector<Matrix> probs;  // per head, seq x seq
    Matrix attn_out;            // concatenated heads, before w_o
    Matrix x2;                  // residual after attention
    Vec mu2, rstd2;
    Matrix n2;       // LN2 output = input rows seen by w_up
    Matrix u;        // pre-activation, seq x d_ff
    Matrix gelu_u;   // activation = input rows seen by w_down
    // Adapter caches for adapted targets (empty rows when running frozen).
    std::vector<ForwardCache> cq, ck, cv, cup, cdown;
};

struct ExampleTrace {
    Matrix emb;  // seq x d_model token embeddings
    std::vector<LayerTrace> layers;
    Matrix x_out;  // final hidden states
    Vec pooled;
    Vec logits;
};

// Frozen-host forward keeping all intermediates (adapters ignored).
ExampleTrace trace_forward(const TinyTransformer& m, const Example& ex);

// --- operations ---

// Full fine-tuning on a seeded pretext task; returns the frozen host.
// loss_history (optional) records the training loss per step.
TinyTransformer pretrain_host(const ModelConfig& config, const TaskSpec& pretask,
                              Vec* loss_history = nullptr);

// Forward with per-target capture of the exact input rows to each target
// linear map, over a seeded fraction of the task's training examples.
std::map<std::string, FeatureSet> collect_features(const TinyTransformer& m,
                                                   const TaskSpec& task,
                                                   double fraction, Rng& rng);

AdaptedModel attach_adapters(const TinyTransformer& model, AdapterVariant variant,
                             std::size_t rank, double alpha,
                             const std::map<std::string, Projector>* projectors,
                             bool proj_trainable, std::uint64_t adapter_seed);

std::size_t trainable_param_count(const AdaptedModel& am);

// Mean cross-entropy over the batch and summed per-adapter gradients
// (deterministic example/token order).
std::pair<double, std::vector<AdapterGrads>> model_forward_backward(
    const AdaptedModel& am, const std::vector<Example>& batch);

// All-weights gradient of the mean cross-entropy (pretraining and
// diagnostics); grads come back in a zero_like-shaped container.
std::pair<double, TinyTransformer> full_forward_backward(
    const TinyTransformer& m, const std::vector<Example>& batch);

Vec model_logits(const TinyTransformer& m, const Example& ex);
Vec adapted_logits(const AdaptedModel& am, const Example& ex);

double evaluate_accuracy(const TinyTransformer& m, const std::vector<Example>& exs);
double evaluate_accuracy(const AdaptedModel& am, const std::vector<Example>& exs);

}  // namespace ipa
