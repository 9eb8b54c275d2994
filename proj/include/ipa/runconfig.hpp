#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "ipa/analysis.hpp"

namespace ipa {

// Parameters of the `analyze` subcommands that have no PipelineConfig slot.
struct AnalyzeSpec {
    std::size_t j_tasks = 0;
    std::string axis;
    std::vector<std::string> settings;
    std::vector<std::uint64_t> seeds;
};

// A parsed run configuration document. Blocks are optional in the document;
// each command checks the has_* flags for the blocks it needs, so one
// complete config can drive the whole pipeline. Parsing is strict: unknown
// keys anywhere are errors, and a present block must be complete.
struct RunConfig {
    PipelineConfig pipeline;
    AnalyzeSpec analyze;
    std::string output_dir;

    bool has_model = false;
    bool has_pretext = false;
    bool has_task = false;
    bool has_adapter = false;
    bool has_projector = false;
    bool has_train = false;
    bool has_analyze = false;

    nlohmann::json raw;  // the parsed document, echoed into manifests
};

RunConfig parse_run_config(const nlohmann::json& doc);
RunConfig load_run_config(const std::string& path);

// The schema-complete JSON echo of a pipeline config (inverse of parsing),
// used to write resolved configs into run manifests.
nlohmann::json run_config_json(const RunConfig& rc);

}  // namespace ipa
