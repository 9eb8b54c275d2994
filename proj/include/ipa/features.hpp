#pragma once

#include <string>

#include "ipa/matrix.hpp"

namespace ipa {

// Hidden states captured at the input of one target linear layer, one row
// per token. model_hash binds the capture to the frozen model that produced
// it; downstream consumers refuse mismatched hashes.
struct FeatureSet {
    Matrix data;  // N x d_in
    int layer_id = -1;
    std::string weight_name;  // e.g. "layer0.w_q"
    std::string model_hash;

    std::size_t count() const { return data.rows(); }
    std::size_t d_in() const { return data.cols(); }
};

}  // namespace ipa
