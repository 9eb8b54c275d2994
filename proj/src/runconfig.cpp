#include "ipa/runconfig.hpp"

#include <fstream>
#include <set>

namespace ipa {
namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string& ctx, const std::string& msg) {
    throw Error("config: " + ctx + ": " + msg);
}

const json& field(const json& j, const std::string& ctx, const char* key) {
    if (!j.contains(key)) fail(ctx, std::string("missing key '") + key + "'");
    return j.at(key);
}

void check_keys(const json& j, const std::string& ctx,
                const std::set<std::string>& allowed) {
    if (!j.is_object()) fail(ctx, "must be a JSON object");
    for (const auto& item : j.items())
        if (allowed.count(item.key()) == 0) fail(ctx, "unknown key '" + item.key() + "'");
}

std::uint64_t req_uint(const json& j, const std::string& ctx, const char* key) {
    const json& v = field(j, ctx, key);
    if (!v.is_number_unsigned()) fail(ctx, std::string("'") + key + "' must be a non-negative integer");
    return v.get<std::uint64_t>();
}

double req_double(const json& j, const std::string& ctx, const char* key) {
    const json& v = field(j, ctx, key);
    if (!v.is_number()) fail(ctx, std::string("'") + key + "' must be a number");
    return v.get<double>();
}

std::string req_string(const json& j, const std::string& ctx, const char* key) {
    const json& v = field(j, ctx, key);
    if (!v.is_string()) fail(ctx, std::string("'") + key + "' must be a string");
    return v.get<std::string>();
}

bool req_bool(const json& j, const std::string& ctx, const char* key) {
    const json& v = field(j, ctx, key);
    if (!v.is_boolean()) fail(ctx, std::string("'") + key + "' must be a boolean");
    return v.get<bool>();
}

ModelConfig parse_model(const json& j) {
    const std::string ctx = "model";
    check_keys(j, ctx, {"vocab", "d_model", "n_layers", "n_heads", "d_ff", "seq_len",
                        "n_classes", "target_set", "seed"});
    ModelConfig c;
    c.vocab = req_uint(j, ctx, "vocab");
    c.d_model = req_uint(j, ctx, "d_model");
    c.n_layers = req_uint(j, ctx, "n_layers");
    c.n_heads = req_uint(j, ctx, "n_heads");
    c.d_ff = req_uint(j, ctx, "d_ff");
    c.seq_len = req_uint(j, ctx, "seq_len");
    c.n_classes = req_uint(j, ctx, "n_classes");
    c.target_set = req_string(j, ctx, "target_set");
    c.seed = req_uint(j, ctx, "seed");
    validate(c);
    return c;
}

TaskSpec parse_task(const json& j, const std::string& ctx) {
    check_keys(j, ctx, {"task_id", "seed", "intrinsic_dim", "spectrum", "label_rule",
                        "n_train", "n_eval"});
    TaskSpec t;
    t.task_id = req_string(j, ctx, "task_id");
    t.seed = req_uint(j, ctx, "seed");
    t.intrinsic_dim = req_uint(j, ctx, "intrinsic_dim");
    t.spectrum = req_double(j, ctx, "spectrum");
    t.label_rule = req_uint(j, ctx, "label_rule");
    t.n_train = req_uint(j, ctx, "n_train");
    t.n_eval = req_uint(j, ctx, "n_eval");
    if (t.task_id.empty()) fail(ctx, "'task_id' must be non-empty");
    return t;
}

void parse_adapter(const json& j, PipelineConfig& p) {
    const std::string ctx = "adapter";
    check_keys(j, ctx, {"variant", "d_h", "alpha", "adapter_seed"});
    p.variant = adapter_variant_from_string(req_string(j, ctx, "variant"));
    p.d_h = req_uint(j, ctx, "d_h");
    p.alpha = req_double(j, ctx, "alpha");
    p.adapter_seed = req_uint(j, ctx, "adapter_seed");
    if (p.d_h < 1) fail(ctx, "'d_h' must be >= 1");
    if (!(p.alpha > 0.0)) fail(ctx, "'alpha' must be > 0");
}

void parse_projector(const json& j, PipelineConfig& p) {
    const std::string ctx = "projector";
    check_keys(j, ctx, {"algo", "centered", "fraction", "ipca_batch", "gha_epochs",
                        "gha_lr", "proj_trainable", "collect_seed"});
    p.algo = projector_algo_from_string(req_string(j, ctx, "algo"));
    p.centered = req_bool(j, ctx, "centered");
    p.fraction = req_double(j, ctx, "fraction");
    p.ipca_batch = req_uint(j, ctx, "ipca_batch");
    p.gha_epochs = req_uint(j, ctx, "gha_epochs");
    p.gha_lr = req_double(j, ctx, "gha_lr");
    p.proj_trainable = req_bool(j, ctx, "proj_trainable");
    p.collect_seed = req_uint(j, ctx, "collect_seed");
    if (!(p.fraction > 0.0 && p.fraction <= 1.0)) fail(ctx, "'fraction' must be in (0, 1]");
    if (p.ipca_batch < 1) fail(ctx, "'ipca_batch' must be >= 1");
}

TrainConfig parse_train(const json& j) {
    const std::string ctx = "train";
    check_keys(j, ctx, {"steps", "batch_size", "base_lr", "warmup_steps", "beta1", "beta2",
                        "eps", "seed"});
    TrainConfig c;
    c.steps = req_uint(j, ctx, "steps");
    c.batch_size = req_uint(j, ctx, "batch_size");
    c.base_lr = req_double(j, ctx, "base_lr");
    c.warmup_steps = req_uint(j, ctx, "warmup_steps");
    c.beta1 = req_double(j, ctx, "beta1");
    c.beta2 = req_double(j, ctx, "beta2");
    c.eps = req_double(j, ctx, "eps");
    c.seed = req_uint(j, ctx, "seed");
    validate(c);
    return c;
}

AnalyzeSpec parse_analyze(const json& j) {
    const std::string ctx = "analyze";
    check_keys(j, ctx, {"j_tasks", "axis", "settings", "seeds"});
    AnalyzeSpec a;
    a.j_tasks = req_uint(j, ctx, "j_tasks");
    a.axis = req_string(j, ctx, "axis");
    const json& settings = field(j, ctx, "settings");
    if (!settings.is_array()) fail(ctx, "'settings' must be an array of strings");
    for (const json& s : settings) {
        if (!s.is_string()) fail(ctx, "'settings' entries must be strings");
        a.settings.push_back(s.get<std::string>());
    }
    const json& seeds = field(j, ctx, "seeds");
    if (!seeds.is_array()) fail(ctx, "'seeds' must be an array of non-negative integers");
    for (const json& s : seeds) {
        if (!s.is_number_unsigned()) fail(ctx, "'seeds' entries must be non-negative integers");
        a.seeds.push_back(s.get<std::uint64_t>());
    }
    return a;
}

}  // namespace

RunConfig parse_run_config(const json& doc) {
    check_keys(doc, "top level",
               {"model", "pretext", "task", "adapter", "projector", "train", "analyze",
                "output_dir"});
    RunConfig rc;
    rc.raw = doc;
    rc.output_dir = req_string(doc, "top level", "output_dir");
    if (rc.output_dir.empty()) fail("top level", "'output_dir' must be non-empty");

    if (doc.contains("model")) {
        rc.pipeline.model = parse_model(doc["model"]);
        rc.has_model = true;
    }
    if (doc.contains("pretext")) {
        rc.pipeline.pretext = parse_task(doc["pretext"], "pretext");
        rc.has_pretext = true;
    }
    if (doc.contains("task")) {
        rc.pipeline.task = parse_task(doc["task"], "task");
        rc.has_task = true;
    }
    if (doc.contains("adapter")) {
        parse_adapter(doc["adapter"], rc.pipeline);
        rc.has_adapter = true;
    }
    if (doc.contains("projector")) {
        parse_projector(doc["projector"], rc.pipeline);
        rc.has_projector = true;
    }
    if (doc.contains("train")) {
        rc.pipeline.train = parse_train(doc["train"]);
        rc.has_train = true;
    }
    if (doc.contains("analyze")) {
        rc.analyze = parse_analyze(doc["analyze"]);
        rc.has_analyze = true;
    }
    return rc;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), "cannot open config file: " + path);
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw Error("config: " + path + " is not valid JSON: " + e.what());
    }
    return parse_run_config(doc);
}

nlohmann::json run_config_json(const RunConfig& rc) {
    const PipelineConfig& p = rc.pipeline;
    json doc;
    doc["output_dir"] = rc.output_dir;
    auto task_json = [](const TaskSpec& t) {
        return json{{"task_id", t.task_id},   {"seed", t.seed},
                    {"intrinsic_dim", t.intrinsic_dim}, {"spectrum", t.spectrum},
                    {"label_rule", t.label_rule},       {"n_train", t.n_train},
                    {"n_eval", t.n_eval}};
    };
    if (rc.has_model)
        doc["model"] = json{{"vocab", p.model.vocab},
                            {"d_model", p.model.d_model},
                            {"n_layers", p.model.n_layers},
                            {"n_heads", p.model.n_heads},
                            {"d_ff", p.model.d_ff},
                            {"seq_len", p.model.seq_len},
                            {"n_classes", p.model.n_classes},
                            {"target_set", p.model.target_set},
                            {"seed", p.model.seed}};
    if (rc.has_pretext) doc["pretext"] = task_json(p.pretext);
    if (rc.has_task) doc["task"] = task_json(p.task);
    if (rc.has_adapter)
        doc["adapter"] = json{{"variant", to_string(p.variant)},
                              {"d_h", p.d_h},
                              {"alpha", p.alpha},
                              {"adapter_seed", p.adapter_seed}};
    if (rc.has_projector)
        doc["projector"] = json{{"algo", to_string(p.algo)},
                                {"centered", p.centered},
                                {"fraction", p.fraction},
                                {"ipca_batch", p.ipca_batch},
                                {"gha_epochs", p.gha_epochs},
                                {"gha_lr", p.gha_lr},
                                {"proj_trainable", p.proj_trainable},
                                {"collect_seed", p.collect_seed}};
    if (rc.has_train)
        doc["train"] = json{{"steps", p.train.steps},
                            {"batch_size", p.train.batch_size},
                            {"base_lr", p.train.base_lr},
                            {"warmup_steps", p.train.warmup_steps},
                            {"beta1", p.train.beta1},
                            {"beta2", p.train.beta2},
                            {"eps", p.train.eps},
                            {"seed", p.train.seed}};
    if (rc.has_analyze)
        doc["analyze"] = json{{"j_tasks", rc.analyze.j_tasks},
                              {"axis", rc.analyze.axis},
                              {"settings", rc.analyze.settings},
                              {"seeds", rc.analyze.seeds}};
    return doc;
}

}  // namespace ipa
