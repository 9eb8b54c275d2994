#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "ipa/adapters.hpp"
#include "ipa/bytes.hpp"
#include "ipa/features.hpp"
#include "ipa/model.hpp"
#include "ipa/projector.hpp"
#include "ipa/trainer.hpp"

namespace ipa {

// On-disk artifact format. Layout:
//   bytes 0..3   magic "IPA1"
//   bytes 4..7   header length, 32-bit unsigned little-endian
//   header       UTF-8 JSON, exactly header-length bytes
//   payload      the declared tensors, 64-bit little-endian reals, row-major,
//                concatenated in header order
// The header always carries "kind" (feature_set | projector | adapter |
// model | adam_state), "format_version" (1), and a "tensors" array of
// {name, rows, cols} declaring the payload layout. feature_set and adapter
// headers additionally bind to the producing model via "model_hash".
struct RawContainer {
    nlohmann::json header;
    std::vector<Matrix> tensors;  // aligned with header["tensors"]
};

// Exact serialized bytes (compact JSON header, sorted keys).
ByteBuf container_bytes(const RawContainer& c);
RawContainer container_from_bytes(const ByteBuf& bytes);

// Atomic write: the file appears under `path` only complete (tmp + rename).
void write_container_file(const std::string& path, const RawContainer& c);
RawContainer read_container_file(const std::string& path);

// --- typed wrappers --------------------------------------------------------

void save_model(const std::string& path, const TinyTransformer& m);
TinyTransformer load_model(const std::string& path);

void save_features(const std::string& path, const FeatureSet& fs);
FeatureSet load_features(const std::string& path);

// Projector containers also record which target weight they were fit for and
// the hash of the model whose features they saw.
struct ProjectorFile {
    Projector projector;
    std::string weight_name;
    std::string model_hash;
    std::uint64_t seed = 0;
};
void save_projector(const std::string& path, const ProjectorFile& pf);
ProjectorFile load_projector(const std::string& path);

// One container holds every target's adapter, in the host's target order.
struct AdapterSet {
    AdapterVariant variant = AdapterVariant::lora;
    std::size_t rank = 0;
    double alpha = 0.0;
    std::uint64_t adapter_seed = 0;
    std::string model_hash;
    std::vector<std::string> target_names;
    std::vector<Adapter> adapters;
};
AdapterSet adapter_set_of(const AdaptedModel& am, std::size_t rank, double alpha,
                          std::uint64_t adapter_seed);
void save_adapters(const std::string& path, const AdapterSet& as);
AdapterSet load_adapters(const std::string& path);

// Optimizer moments, indexed like the adapter set they were trained with.
void save_adam_state(const std::string& path, const AdamState& st,
                     const std::vector<std::string>& target_names);
AdamState load_adam_state(const std::string& path, std::vector<std::string>* target_names);

// --- output-directory hygiene ----------------------------------------------

// Exclusive advisory lock: creating `dir`/ipa.lock fails if it already
// exists, so two commands cannot write one directory concurrently.
class DirLock {
public:
    explicit DirLock(const std::string& dir);
    ~DirLock();
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

private:
    std::string path_;
};

// Deterministic run manifest (resolved config + seeds + output hashes), no
// timestamps; written as <command>.manifest.json beside the outputs.
void write_manifest(const std::string& dir, const std::string& command,
                    const nlohmann::json& body);

// SHA-256 hex of a whole file, for manifests and reproducibility checks.
std::string file_sha256(const std::string& path);

}  // namespace ipa
