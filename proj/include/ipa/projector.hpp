#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "ipa/features.hpp"
#include "ipa/linalg.hpp"
#include "ipa/matrix.hpp"
#include "ipa/rng.hpp"

namespace ipa {

enum class ProjectorAlgo { exact, ipca, gha, random_proj };

const char* to_string(ProjectorAlgo a);
ProjectorAlgo projector_algo_from_string(const std::string& s);

// Linear input projector U (d_h x d_in); the decoder is implicitly U^T.
// exact/ipca projectors keep orthonormal rows until task gradients touch U,
// at which point fine_tuned is set and the orthonormality guarantee ends.
struct Projector {
    Matrix u;  // d_h x d_in
    ProjectorAlgo algorithm = ProjectorAlgo::random_proj;
    bool centered = false;
    Vec mean;  // d_in entries; all zero when centered == false
    std::size_t seen = 0;
    bool fine_tuned = false;

    std::size_t d_h() const { return u.rows(); }
    std::size_t d_in() const { return u.cols(); }

    // x_h = U (x - mean)
    Vec encode(const Vec& x) const;
    // x~ = U^T x_h + mean
    Vec decode(const Vec& x_h) const;
};

// Streaming low-rank second-moment tracker: a sequential Karhunen-Loeve
// update per mini-batch, no forgetting factor. In centered mode the running
// mean is folded in through the usual mean-correction row.
struct IpcaState {
    Matrix components;    // k x d_in, orthonormal rows (k == 0 until data arrives)
    Vec singular_values;  // k, nonnegative descending
    Vec mean;             // d_in
    std::size_t seen = 0;
    std::size_t rank_cap = 0;  // == d_h
    std::size_t d_in = 0;
    bool centered = false;

    std::size_t rank() const { return components.empty() ? 0 : components.rows(); }
};

struct GhaState {
    Matrix u;  // d_h x d_in
    double learning_rate = 0.0;
    std::size_t epochs_done = 0;
    std::size_t samples_seen = 0;
};

// Top-d_h eigenvectors of the dense second-moment (or covariance) matrix.
Projector exact_pca(const FeatureSet& features, std::size_t d_h, bool centered);

IpcaState ipca_init(std::size_t d_in, std::size_t d_h, bool centered);
IpcaState ipca_update(IpcaState state, const Matrix& batch);
Projector ipca_finalize(const IpcaState& state);

GhaState gha_init(std::size_t d_in, std::size_t d_h, double learning_rate, Rng& rng);
// One pass over the features in the given sample order (Sanger's rule).
GhaState gha_epoch(GhaState state, const FeatureSet& features,
                   const std::vector<std::size_t>& order);
Projector gha_finalize(const GhaState& state);

// Entries i.i.d. Gaussian(0, 1/d_in); the data-agnostic baseline projector.
Projector random_projector(std::size_t d_in, std::size_t d_h, Rng& rng);

// Mean over samples of ||x - U^T U (x - mean) - mean||^2.
double reconstruction_error(const Projector& p, const FeatureSet& features);

// Largest principal angle between the row spaces, in [0, pi/2].
double subspace_distance(const Matrix& u1, const Matrix& u2);

}  // namespace ipa
