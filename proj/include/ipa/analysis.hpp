#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ipa/model.hpp"
#include "ipa/projector.hpp"
#include "ipa/trainer.hpp"

namespace ipa {

// Everything one end-to-end run needs: collect features, fit projectors
// (ipa), attach adapters, train, evaluate. The CLI parses its JSON run
// configuration into this struct.
struct PipelineConfig {
    ModelConfig model;
    TaskSpec pretext;
    TaskSpec task;
    AdapterVariant variant = AdapterVariant::ipa;
    std::size_t d_h = 4;
    double alpha = 1.0;
    ProjectorAlgo algo = ProjectorAlgo::exact;
    bool centered = false;
    double fraction = 0.1;
    bool proj_trainable = false;
    std::size_t ipca_batch = 64;
    std::size_t gha_epochs = 50;
    double gha_lr = 1e-3;
    TrainConfig train;
    std::uint64_t adapter_seed = 1;
    std::uint64_t collect_seed = 1;
};

// Fit one projector on a feature set per the configured algorithm; `seed`
// drives GHA init/order and the random baseline.
Projector train_projector(const FeatureSet& fs, const PipelineConfig& cfg,
                          std::uint64_t seed);

// Projectors for every target weight of the host.
std::map<std::string, Projector> train_projectors(
    const std::map<std::string, FeatureSet>& feats, const PipelineConfig& cfg,
    std::uint64_t seed);

struct RunOutcome {
    double eval_accuracy = 0.0;
    double final_loss = 0.0;
    // Mean over targets of reconstruction error against the full-fraction
    // feature collection; -1 for variants without projectors.
    double mean_recon = -1.0;
    MetricsLog log;
};

// collect -> fit projectors (ipa) -> attach -> train -> evaluate, with every
// stochastic stream keyed off run_seed.
RunOutcome run_pipeline(const TinyTransformer& host, const PipelineConfig& cfg,
                        std::uint64_t run_seed);

// --- adapter-asymmetry diagnostics ---------------------------------------

struct TaskVectors {
    std::string task_id;
    Vec theta_a;       // trained input-side parameters, concatenated
    Vec theta_b;       // trained output-side parameters, concatenated
    Vec theta_a_init;  // the shared initialization of theta_a
};

// Flatten the trained input/output adapter matrices of `trained` together
// with the matching initialization from `at_init` (a freshly attached twin).
TaskVectors make_task_vectors(const std::string& task_id, const AdaptedModel& trained,
                              const AdaptedModel& at_init);

// cos(theta_a_j, theta_a_init) per task. Bitwise-identical vectors
// short-circuit to exactly 1, so untrained adapters score 1.0 exactly.
Vec task_init_similarity(const std::vector<TaskVectors>& tv);

struct SimilarityReport {
    Vec task_init_a;     // J entries
    Matrix task_task_a;  // J x J, symmetric, unit diagonal
    Matrix task_task_b;
};

SimilarityReport similarity_matrices(const std::vector<TaskVectors>& tv);

// J tasks sharing inputs (same task seed) and the same A0 (shared
// adapter_seed), differing only in label_rule; each is trained for
// cfg.train.steps and flattened. Uses plain low-rank adapters regardless of
// cfg.variant.
std::vector<TaskVectors> asymmetry_suite(const TinyTransformer& host,
                                         const PipelineConfig& cfg, std::size_t j_tasks);

// Flattened all-weights delta of a brief full fine-tune (slow diagnostic).
Vec full_ft_delta(const TinyTransformer& host, const TaskSpec& task,
                  const TrainConfig& tc);

// Pairwise-cosine matrix of arbitrary equal-length vectors.
Matrix cosine_matrix(const std::vector<Vec>& vs);

// --- ablation sweeps ------------------------------------------------------

struct SweepPoint {
    std::string setting;
    Vec accuracy;    // one entry per seed, in seed order
    Vec final_loss;
    Vec recon;       // -1 entries for projector-free variants
    double accuracy_mean = 0.0;
    double loss_mean = 0.0;
    double recon_mean = 0.0;
    double accuracy_lo = 0.0, accuracy_hi = 0.0;
};

struct SweepReport {
    std::string axis;  // hidden_dim | pretrain_fraction | algorithm
    std::vector<std::uint64_t> seeds;
    std::vector<SweepPoint> points;
};

// axis = "hidden_dim": settings are d_h values; alpha rescales to keep
// alpha/d_h fixed. axis = "pretrain_fraction": settings are fractions
// (requires an ipa base). axis = "algorithm": settings are projector
// algorithm names (requires an ipa base).
SweepReport run_sweep(const TinyTransformer& host, const PipelineConfig& base,
                      const std::string& axis, const std::vector<std::string>& settings,
                      const std::vector<std::uint64_t>& seeds);

// --- fixed-vs-trainable projector comparison ------------------------------

struct FixedProjCell {
    std::string name;  // e.g. "ipa-frozen"
    Vec accuracy;      // per seed
    Vec final_loss;
    double accuracy_mean = 0.0;
    double loss_mean = 0.0;
};

struct FixedProjReport {
    std::vector<std::uint64_t> seeds;
    std::vector<FixedProjCell> cells;  // lora-frozen, lora-trainable,
                                       // ipa-frozen, ipa-trainable
};

// Isolates the input-projector choice: both arms run the same rank-d_h
// bottleneck machinery, "lora" with a data-agnostic random projector
// (equivalent to a plain low-rank adapter) and "ipa" with the pretrained
// principal-subspace projector; each frozen and trainable.
// Requires task.intrinsic_dim >= cfg.d_h (equality is the control where the
// bottleneck stops binding).
FixedProjReport compare_fixed_projector(const TinyTransformer& host,
                                        const PipelineConfig& cfg,
                                        const std::vector<std::uint64_t>& seeds);

// --- CSV emission ----------------------------------------------------------

std::string matrix_csv(const Matrix& m);
std::string sweep_csv(const SweepReport& r);
std::string fixed_proj_csv(const FixedProjReport& r);
std::string similarity_summary(const SimilarityReport& r);

}  // namespace ipa
