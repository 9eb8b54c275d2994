#include "commands.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ipa/analysis.hpp"
#include "ipa/container.hpp"
#include "ipa/runconfig.hpp"

namespace fs = std::filesystem;

namespace ipa {
namespace {

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// CSVs and summaries get the same tmp+rename treatment as containers: a file
// under its final name is always complete.
void write_text(const std::string& path, const std::string& text) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        require(out.good(), "cannot open for write: " + tmp);
        out << text;
        require(out.good(), "write failed: " + tmp);
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    require(!ec, "rename failed: " + tmp + " -> " + path + ": " + ec.message());
}

struct Outputs {
    std::string dir;
    nlohmann::json inputs = nlohmann::json::object();
    nlohmann::json files = nlohmann::json::object();

    std::string path(const std::string& name) const {
        return (fs::path(dir) / name).string();
    }
    void note_input(const std::string& p) { inputs[p] = file_sha256(p); }
    void note(const std::string& name) { files[name] = file_sha256(path(name)); }
};

void finish(const Outputs& out, const std::string& command, nlohmann::json body) {
    body["command"] = command;
    if (!out.inputs.empty()) body["inputs"] = out.inputs;
    body["outputs"] = out.files;
    write_manifest(out.dir, command, body);
}

void need_block(bool has, const std::string& block, const std::string& cmd) {
    require(has, "config: command '" + cmd + "' needs the '" + block + "' block");
}

std::string resolve_out(const std::string& flag_out, const RunConfig& rc) {
    if (!flag_out.empty()) return flag_out;
    require(!rc.output_dir.empty(), "no output directory (config output_dir or --out)");
    return rc.output_dir;
}

Matrix& mutable_target(TinyTransformer& m, const TargetSlot& t) {
    require(t.layer < m.layers.size(), "target layer out of range");
    LayerWeights& lw = m.layers[t.layer];
    switch (t.kind) {
        case TargetKind::w_q: return lw.w_q;
        case TargetKind::w_k: return lw.w_k;
        case TargetKind::w_v: return lw.w_v;
        case TargetKind::w_up: return lw.w_up;
        case TargetKind::w_down: return lw.w_down;
    }
    throw Error("unknown target kind");
}

// --- subcommand bodies -------------------------------------------------------

int cmd_pretrain_host(const RunConfig& rc, const std::string& out_dir) {
    need_block(rc.has_model, "model", "pretrain-host");
    need_block(rc.has_pretext, "pretext", "pretrain-host");
    Outputs out{resolve_out(out_dir, rc)};
    DirLock lock(out.dir);
    TinyTransformer m = pretrain_host(rc.pipeline.model, rc.pipeline.pretext);
    save_model(out.path("model.ipa"), m);
    out.note("model.ipa");
    finish(out, "pretrain-host", {{"config", run_config_json(rc)}});
    std::cout << "model_hash " << model_hash(m) << "\n";
    std::cout << "wrote " << out.path("model.ipa") << "\n";
    return 0;
}

int cmd_collect(const RunConfig& rc, const std::string& model_path, double fraction,
                std::uint64_t seed, const std::string& out_dir) {
    need_block(rc.has_task, "task", "collect");
    Outputs out{resolve_out(out_dir, rc)};
    DirLock lock(out.dir);
    out.note_input(model_path);
    TinyTransformer m = load_model(model_path);
    Rng rng(seed);
    const auto feats = collect_features(m, rc.pipeline.task, fraction, rng);
    for (const auto& [name, fset] : feats) {
        const std::string file = name + ".features.ipa";
        save_features(out.path(file), fset);
        out.note(file);
        std::cout << "collected " << name << " rows=" << fset.count() << "\n";
    }
    nlohmann::json body{{"config", run_config_json(rc)},
                        {"flags", {{"model", model_path}, {"fraction", fraction}, {"seed", seed}}}};
    finish(out, "collect", body);
    return 0;
}

int cmd_pretrain_projector(const RunConfig& rc, const std::vector<std::string>& feature_files,
                           const PipelineConfig& resolved, std::uint64_t seed,
                           const std::string& out_dir) {
    require(!feature_files.empty(), "pretrain-projector: no feature files given");
    Outputs out{resolve_out(out_dir, rc)};
    DirLock lock(out.dir);
    nlohmann::json recon = nlohmann::json::object();
    for (const std::string& f : feature_files) {
        out.note_input(f);
        const FeatureSet fset = load_features(f);
        ProjectorFile pf;
        pf.projector = train_projector(fset, resolved, seed);
        pf.weight_name = fset.weight_name;
        pf.model_hash = fset.model_hash;
        pf.seed = seed;
        const std::string file = fset.weight_name + ".projector.ipa";
        save_projector(out.path(file), pf);
        out.note(file);
        const double err = reconstruction_error(pf.projector, fset);
        recon[fset.weight_name] = err;
        std::cout << fset.weight_name << " reconstruction_error=" << fmt(err) << "\n";
    }
    nlohmann::json body{{"config", run_config_json(rc)},
                        {"flags",
                         {{"algo", to_string(resolved.algo)},
                          {"dh", resolved.d_h},
                          {"batch", resolved.ipca_batch},
                          {"centered", resolved.centered},
                          {"epochs", resolved.gha_epochs},
                          {"lr", resolved.gha_lr},
                          {"seed", seed}}},
                        {"reconstruction_error", recon}};
    finish(out, "pretrain-projector", body);
    return 0;
}

int cmd_adapt(const RunConfig& rc, const std::string& model_path,
              const std::string& projectors_dir, const PipelineConfig& resolved,
              const std::string& out_dir) {
    need_block(rc.has_task, "task", "adapt");
    Outputs out{resolve_out(out_dir, rc)};
    DirLock lock(out.dir);
    out.note_input(model_path);
    TinyTransformer m = load_model(model_path);
    const std::string host_hash = model_hash(m);

    std::map<std::string, Projector> projs;
    std::map<std::string, std::uint64_t> proj_seeds;
    const bool is_ipa = resolved.variant == AdapterVariant::ipa;
    if (is_ipa) {
        require(!projectors_dir.empty(), "adapt: --variant ipa requires --projectors");
        for (const TargetSlot& t : target_slots(m.config)) {
            const std::string p =
                (fs::path(projectors_dir) / (t.name + ".projector.ipa")).string();
            out.note_input(p);
            ProjectorFile pf = load_projector(p);
            require(pf.model_hash == host_hash,
                    "adapt: projector " + p + " was fit for a different model");
            require(pf.projector.d_h() == resolved.d_h,
                    "adapt: projector " + p + " has rank " +
                        std::to_string(pf.projector.d_h()) + ", expected " +
                        std::to_string(resolved.d_h));
            proj_seeds[t.name] = pf.seed;
            projs.emplace(t.name, std::move(pf.projector));
        }
    }

    AdaptedModel am =
        attach_adapters(m, resolved.variant, resolved.d_h, resolved.alpha,
                        is_ipa ? &projs : nullptr, resolved.proj_trainable,
                        resolved.adapter_seed);
    const MetricsLog log = train(am, resolved.task, resolved.train);
    const Dataset ds = generate_task(resolved.task, m.config);
    const double acc = evaluate_accuracy(am, ds.eval);

    save_adapters(out.path("adapter.ipa"),
                  adapter_set_of(am, resolved.d_h, resolved.alpha, resolved.adapter_seed));
    out.note("adapter.ipa");
    write_text(out.path("metrics.csv"), metrics_csv(log));
    out.note("metrics.csv");
    if (is_ipa) {
        // Post-training projector state; bitwise equal to the input files
        // unless projector finetuning was on.
        for (std::size_t i = 0; i < am.targets.size(); ++i) {
            const std::string& name = am.targets[i].name;
            ProjectorFile pf{am.adapters[i].proj, name, host_hash, proj_seeds.at(name)};
            const std::string file = name + ".projector.ipa";
            save_projector(out.path(file), pf);
            out.note(file);
        }
    }

    nlohmann::json body{{"config", run_config_json(rc)},
                        {"flags",
                         {{"model", model_path},
                          {"projectors", projectors_dir},
                          {"variant", to_string(resolved.variant)},
                          {"proj_ft", resolved.proj_trainable},
                          {"dh", resolved.d_h},
                          {"alpha", resolved.alpha},
                          {"adapter_seed", resolved.adapter_seed},
                          {"steps", resolved.train.steps},
                          {"batch_size", resolved.train.batch_size},
                          {"base_lr", resolved.train.base_lr},
                          {"warmup_steps", resolved.train.warmup_steps},
                          {"train_seed", resolved.train.seed}}},
                        {"final_loss", log.empty() ? 0.0 : log.back().loss},
                        {"eval_accuracy", acc}};
    finish(out, "adapt", body);
    if (!log.empty()) std::cout << "final_loss " << fmt(log.back().loss) << "\n";
    std::cout << "eval_accuracy " << fmt(acc) << "\n";
    return 0;
}

int cmd_merge(const RunConfig& rc, const std::string& model_path,
              const std::string& adapter_path, const std::string& out_dir) {
    Outputs out{resolve_out(out_dir, rc)};
    DirLock lock(out.dir);
    out.note_input(model_path);
    out.note_input(adapter_path);
    TinyTransformer m = load_model(model_path);
    const AdapterSet as = load_adapters(adapter_path);
    require(as.model_hash == model_hash(m),
            "merge: adapter was trained for a different model (hash mismatch)");
    const std::vector<TargetSlot> slots = target_slots(m.config);
    require(slots.size() == as.adapters.size(), "merge: adapter count mismatch");
    for (std::size_t i = 0; i < slots.size(); ++i) {
        require(slots[i].name == as.target_names[i],
                "merge: target order mismatch at " + slots[i].name);
        const FrozenLinear frozen(target_weight(m, slots[i]));
        mutable_target(m, slots[i]) = merge(as.adapters[i], frozen);
    }
    save_model(out.path("merged.ipa"), m);
    out.note("merged.ipa");
    nlohmann::json body{{"config", run_config_json(rc)},
                        {"flags", {{"model", model_path}, {"adapter", adapter_path}}}};
    finish(out, "merge", body);
    std::cout << "model_hash " << model_hash(m) << "\n";
    return 0;
}

int cmd_analyze(const RunConfig& rc, const std::string& mode, const std::string& out_dir) {
    const std::string cmd = "analyze-" + mode;
    need_block(rc.has_model, "model", cmd);
    need_block(rc.has_pretext, "pretext", cmd);
    need_block(rc.has_task, "task", cmd);
    need_block(rc.has_adapter, "adapter", cmd);
    need_block(rc.has_train, "train", cmd);
    need_block(rc.has_analyze, "analyze", cmd);
    if (mode != "similarity") need_block(rc.has_projector, "projector", cmd);

    Outputs out{resolve_out(out_dir, rc)};
    DirLock lock(out.dir);
    const TinyTransformer host = pretrain_host(rc.pipeline.model, rc.pipeline.pretext);
    nlohmann::json body{{"config", run_config_json(rc)},
                        {"host_hash", model_hash(host)}};

    if (mode == "similarity") {
        require(rc.analyze.j_tasks >= 2, "analyze: j_tasks must be >= 2");
        const auto tv = asymmetry_suite(host, rc.pipeline, rc.analyze.j_tasks);
        const SimilarityReport rep = similarity_matrices(tv);
        Matrix init(1, rep.task_init_a.size());
        for (std::size_t j = 0; j < rep.task_init_a.size(); ++j)
            init(0, j) = rep.task_init_a[j];
        write_text(out.path("similarity_a.csv"), matrix_csv(rep.task_task_a));
        write_text(out.path("similarity_b.csv"), matrix_csv(rep.task_task_b));
        write_text(out.path("task_init_a.csv"), matrix_csv(init));
        write_text(out.path("summary.txt"), similarity_summary(rep));
        out.note("similarity_a.csv");
        out.note("similarity_b.csv");
        out.note("task_init_a.csv");
        out.note("summary.txt");
    } else if (mode == "sweep") {
        const SweepReport rep =
            run_sweep(host, rc.pipeline, rc.analyze.axis, rc.analyze.settings, rc.analyze.seeds);
        write_text(out.path("sweep.csv"), sweep_csv(rep));
        std::string summary = "axis: " + rep.axis + "\n";
        for (const SweepPoint& pt : rep.points)
            summary += pt.setting + ": accuracy " + fmt(pt.accuracy_mean) + " [" +
                       fmt(pt.accuracy_lo) + ", " + fmt(pt.accuracy_hi) + "], recon " +
                       fmt(pt.recon_mean) + "\n";
        write_text(out.path("summary.txt"), summary);
        out.note("sweep.csv");
        out.note("summary.txt");
    } else {  // fixed-proj
        const FixedProjReport rep = compare_fixed_projector(host, rc.pipeline, rc.analyze.seeds);
        write_text(out.path("fixed_proj.csv"), fixed_proj_csv(rep));
        std::string summary;
        for (const FixedProjCell& c : rep.cells)
            summary += c.name + ": accuracy " + fmt(c.accuracy_mean) + ", final loss " +
                       fmt(c.loss_mean) + "\n";
        write_text(out.path("summary.txt"), summary);
        out.note("fixed_proj.csv");
        out.note("summary.txt");
    }
    finish(out, cmd, body);
    std::cout << "wrote " << out.dir << "\n";
    return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"low-rank adapter toolkit with pretrained input projectors"};
    app.require_subcommand(1);

    std::string config_path, out_dir, model_path, adapter_path, projectors_dir;
    std::vector<std::string> feature_files;
    double fraction = -1.0;
    std::uint64_t seed = 1;
    std::string algo, variant, proj_ft;
    std::uint64_t dh = 0, batch = 0, epochs = 0, steps = 0, batch_size = 0, warmup = 0;
    std::uint64_t adapter_seed = 0, train_seed = 0;
    double lr = 0.0, alpha = 0.0, base_lr = 0.0;
    bool centered = false;

    CLI::App* ph = app.add_subcommand("pretrain-host", "fully train the frozen host model");
    ph->add_option("--config", config_path, "run configuration JSON")->required();
    ph->add_option("--out", out_dir, "output directory (overrides config)");

    CLI::App* co = app.add_subcommand("collect", "capture hidden features per target weight");
    co->add_option("--config", config_path, "run configuration JSON")->required();
    co->add_option("--model", model_path, "model container")->required();
    co->add_option("--fraction", fraction, "fraction of training examples to sample");
    co->add_option("--seed", seed, "sampling seed");
    co->add_option("--out", out_dir, "output directory (overrides config)");

    CLI::App* pp = app.add_subcommand("pretrain-projector", "fit projectors on feature files");
    pp->add_option("features", feature_files, "feature container files")->required();
    pp->add_option("--config", config_path, "run configuration JSON");
    pp->add_option("--algo", algo, "exact | ipca | gha | random");
    pp->add_option("--dh", dh, "projector rank");
    pp->add_option("--batch", batch, "ipca mini-batch size");
    pp->add_flag("--centered", centered, "subtract the running mean");
    pp->add_option("--epochs", epochs, "gha epochs");
    pp->add_option("--lr", lr, "gha learning rate");
    pp->add_option("--seed", seed, "gha/random init seed");
    pp->add_option("--out", out_dir, "output directory (overrides config)");

    CLI::App* ad = app.add_subcommand("adapt", "train adapters on the downstream task");
    ad->add_option("--config", config_path, "run configuration JSON")->required();
    ad->add_option("--model", model_path, "model container")->required();
    ad->add_option("--variant", variant, "lora | dora | ipa");
    ad->add_option("--projectors", projectors_dir, "directory of projector containers");
    ad->add_option("--proj-ft", proj_ft, "finetune the projector: on | off")
        ->check(CLI::IsMember({"on", "off"}));
    ad->add_option("--dh", dh, "adapter rank");
    ad->add_option("--alpha", alpha, "adapter scaling numerator");
    ad->add_option("--adapter-seed", adapter_seed, "adapter init seed");
    ad->add_option("--steps", steps, "training steps");
    ad->add_option("--batch-size", batch_size, "training batch size");
    ad->add_option("--lr", base_lr, "base learning rate");
    ad->add_option("--warmup", warmup, "warmup steps");
    ad->add_option("--train-seed", train_seed, "batch sampling seed");
    ad->add_option("--out", out_dir, "output directory (overrides config)");

    CLI::App* me = app.add_subcommand("merge", "fold adapters into the host weights");
    me->add_option("--model", model_path, "model container")->required();
    me->add_option("--adapter", adapter_path, "adapter container")->required();
    me->add_option("--config", config_path, "run configuration JSON");
    me->add_option("--out", out_dir, "output directory")->required();

    CLI::App* an = app.add_subcommand("analyze", "asymmetry and ablation reports");
    an->require_subcommand(1);
    CLI::App* an_sim = an->add_subcommand("similarity", "adapter similarity matrices");
    CLI::App* an_sweep = an->add_subcommand("sweep", "hidden-dim / fraction / algorithm sweep");
    CLI::App* an_fp = an->add_subcommand("fixed-proj", "frozen vs trainable projector grid");
    for (CLI::App* sub : {an_sim, an_sweep, an_fp}) {
        sub->add_option("--config", config_path, "run configuration JSON")->required();
        sub->add_option("--out", out_dir, "output directory (overrides config)");
    }

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        RunConfig rc;
        rc.raw = nlohmann::json::object();
        if (!config_path.empty()) rc = load_run_config(config_path);

        // Flags override the matching config fields.
        PipelineConfig resolved = rc.pipeline;
        if (pp->count("--algo")) resolved.algo = projector_algo_from_string(algo);
        if (ad->count("--variant")) resolved.variant = adapter_variant_from_string(variant);
        if (pp->count("--dh") || ad->count("--dh")) resolved.d_h = dh;
        if (pp->count("--batch")) resolved.ipca_batch = batch;
        if (pp->count("--centered")) resolved.centered = centered;
        if (pp->count("--epochs")) resolved.gha_epochs = epochs;
        if (pp->count("--lr")) resolved.gha_lr = lr;
        if (ad->count("--alpha")) resolved.alpha = alpha;
        if (ad->count("--adapter-seed")) resolved.adapter_seed = adapter_seed;
        if (ad->count("--proj-ft")) resolved.proj_trainable = proj_ft == "on";
        if (ad->count("--steps")) resolved.train.steps = steps;
        if (ad->count("--batch-size")) resolved.train.batch_size = batch_size;
        if (ad->count("--lr")) resolved.train.base_lr = base_lr;
        if (ad->count("--warmup")) resolved.train.warmup_steps = warmup;
        if (ad->count("--train-seed")) resolved.train.seed = train_seed;
        if (co->parsed() && co->count("--fraction") == 0) fraction = rc.pipeline.fraction;
        if (co->parsed() && co->count("--seed") == 0) seed = rc.pipeline.collect_seed;

        if (ph->parsed()) return cmd_pretrain_host(rc, out_dir);
        if (co->parsed()) return cmd_collect(rc, model_path, fraction, seed, out_dir);
        if (pp->parsed())
            return cmd_pretrain_projector(rc, feature_files, resolved, seed, out_dir);
        if (ad->parsed())
            return cmd_adapt(rc, model_path, projectors_dir, resolved, out_dir);
        if (me->parsed()) return cmd_merge(rc, model_path, adapter_path, out_dir);
        if (an->parsed()) {
            const std::string mode = an_sim->parsed()    ? "similarity"
                                     : an_sweep->parsed() ? "sweep"
                                                          : "fixed-proj";
            return cmd_analyze(rc, mode, out_dir);
        }
        throw Error("no subcommand selected");
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace ipa
