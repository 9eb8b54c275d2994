#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "ipa/container.hpp"
#include "ipa/projector.hpp"
#include "ipa/runconfig.hpp"
#include "ipa/trainer.hpp"

using namespace ipa;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& tag) {
    fs::path p = fs::temp_directory_path() / ("ipa_test_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

ByteBuf slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return ByteBuf(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const ByteBuf& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    REQUIRE(out.good());
}

ModelConfig tiny_config() {
    ModelConfig c;
    c.vocab = 11;
    c.d_model = 16;
    c.n_layers = 1;
    c.n_heads = 2;
    c.d_ff = 24;
    c.seq_len = 6;
    c.n_classes = 3;
    c.seed = 5;
    return c;
}

TaskSpec tiny_task() {
    TaskSpec t;
    t.task_id = "tiny";
    t.seed = 9;
    t.intrinsic_dim = 4;
    t.spectrum = 0.6;
    t.label_rule = 2;
    t.n_train = 64;
    t.n_eval = 32;
    return t;
}

const TinyTransformer& host() {
    static TinyTransformer m = pretrain_host(tiny_config(), tiny_task());
    return m;
}

bool same_matrix(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j)
            if (a(i, j) != b(i, j)) return false;
    return true;
}

RawContainer sample_container() {
    RawContainer c;
    c.header["kind"] = "projector";
    c.header["format_version"] = 1;
    c.header["tensors"] = nlohmann::json::array(
        {{{"name", "u"}, {"rows", 2}, {"cols", 3}}, {{"name", "mean"}, {"rows", 1}, {"cols", 3}}});
    Matrix u(2, 3);
    double v = 0.25;
    for (std::size_t i = 0; i < u.rows(); ++i)
        for (std::size_t j = 0; j < u.cols(); ++j) u(i, j) = (v *= -1.75);
    Matrix mean(1, 3);
    mean(0, 0) = 0.0;
    mean(0, 1) = -7.5;
    mean(0, 2) = 1e-300;
    c.tensors = {u, mean};
    return c;
}

std::string thrown_message(const std::function<void()>& f) {
    try {
        f();
    } catch (const std::exception& e) {
        return e.what();
    }
    return "";
}

}  // namespace

TEST_CASE("raw container bytes round-trip bitwise") {
    RawContainer c = sample_container();
    ByteBuf b1 = container_bytes(c);
    RawContainer back = container_from_bytes(b1);
    ByteBuf b2 = container_bytes(back);
    CHECK(b1 == b2);
    CHECK(back.header == c.header);
    REQUIRE(back.tensors.size() == 2);
    CHECK(same_matrix(back.tensors[0], c.tensors[0]));
    CHECK(same_matrix(back.tensors[1], c.tensors[1]));

    // Preamble layout: magic, then little-endian header length.
    REQUIRE(b1.size() >= 8);
    CHECK(b1[0] == 'I');
    CHECK(b1[1] == 'P');
    CHECK(b1[2] == 'A');
    CHECK(b1[3] == '1');
    std::size_t off = 4;
    const std::uint32_t hlen = read_u32_le(b1.data() + off);
    const std::string htext(b1.begin() + 8, b1.begin() + 8 + hlen);
    CHECK(nlohmann::json::parse(htext) == c.header);
    // Compact dump: no spaces or newlines in the serialized header.
    CHECK(htext.find(' ') == std::string::npos);
    CHECK(htext.find('\n') == std::string::npos);
    // Payload is exactly the declared reals.
    CHECK(b1.size() == 8 + hlen + (2 * 3 + 1 * 3) * 8);
}

TEST_CASE("container parser rejects damaged files") {
    const ByteBuf good = container_bytes(sample_container());

    ByteBuf short_buf(good.begin(), good.begin() + 5);
    CHECK(thrown_message([&] { container_from_bytes(short_buf); }).find("preamble") !=
          std::string::npos);

    ByteBuf bad_magic = good;
    bad_magic[0] = 'X';
    CHECK(thrown_message([&] { container_from_bytes(bad_magic); }).find("magic") !=
          std::string::npos);

    ByteBuf bad_len = good;
    bad_len[4] = 0xff;
    bad_len[5] = 0xff;
    bad_len[6] = 0xff;
    bad_len[7] = 0x7f;
    CHECK(thrown_message([&] { container_from_bytes(bad_len); }).find("header extends") !=
          std::string::npos);

    ByteBuf bad_json = good;
    bad_json[8] = '!';
    CHECK(thrown_message([&] { container_from_bytes(bad_json); }).find("JSON") !=
          std::string::npos);

    ByteBuf truncated = good;
    truncated.resize(good.size() - 8);
    CHECK(thrown_message([&] { container_from_bytes(truncated); }).find("payload shorter") !=
          std::string::npos);

    ByteBuf padded = good;
    padded.resize(good.size() + 8, 0);
    CHECK(thrown_message([&] { container_from_bytes(padded); }).find("payload longer") !=
          std::string::npos);
}

TEST_CASE("container validation rejects bad headers") {
    RawContainer c = sample_container();
    c.header["kind"] = "weights";
    CHECK_THROWS(container_bytes(c));

    c = sample_container();
    c.header["format_version"] = 2;
    CHECK_THROWS(container_bytes(c));

    c = sample_container();
    c.header["tensors"][0]["rows"] = 7;  // disagrees with the payload matrix
    CHECK_THROWS(container_bytes(c));

    // feature_set and adapter kinds must be bound to a model.
    c = sample_container();
    c.header["kind"] = "feature_set";
    CHECK(thrown_message([&] { container_bytes(c); }).find("model_hash") != std::string::npos);
}

TEST_CASE("write_container_file is atomic and re-readable") {
    fs::path dir = fresh_dir("raw");
    const std::string path = (dir / "p.ipa").string();
    RawContainer c = sample_container();
    write_container_file(path, c);
    CHECK(fs::exists(path));
    CHECK_FALSE(fs::exists(path + ".tmp"));
    CHECK(container_bytes(read_container_file(path)) == container_bytes(c));

    // Overwrite with different content; reader sees the new bytes.
    c.tensors[0](0, 0) = 42.0;
    write_container_file(path, c);
    CHECK(read_container_file(path).tensors[0](0, 0) == 42.0);
    fs::remove_all(dir);
}

TEST_CASE("model container round-trips and checks its hash") {
    fs::path dir = fresh_dir("model");
    const std::string path = (dir / "model.ipa").string();
    const TinyTransformer& m = host();
    save_model(path, m);
    TinyTransformer back = load_model(path);
    CHECK(model_hash(back) == model_hash(m));
    CHECK(back.config.vocab == m.config.vocab);
    CHECK(back.config.target_set == m.config.target_set);

    // Forward equivalence on real inputs.
    Dataset ds = generate_task(tiny_task(), m.config);
    for (std::size_t i = 0; i < 5; ++i) {
        Vec za = trace_forward(m, ds.eval[i]).logits;
        Vec zb = trace_forward(back, ds.eval[i]).logits;
        REQUIRE(za.size() == zb.size());
        for (std::size_t k = 0; k < za.size(); ++k) CHECK(za[k] == zb[k]);
    }

    // Re-save is byte-identical.
    const std::string path2 = (dir / "model2.ipa").string();
    save_model(path2, back);
    CHECK(slurp(path) == slurp(path2));

    // One flipped payload byte must not load silently.
    ByteBuf bytes = slurp(path);
    bytes[bytes.size() - 3] ^= 0x40;
    spit(path, bytes);
    CHECK(thrown_message([&] { load_model(path); }).find("model_hash") != std::string::npos);
    fs::remove_all(dir);
}

TEST_CASE("feature containers round-trip bitwise") {
    fs::path dir = fresh_dir("features");
    const TinyTransformer& m = host();
    Rng rng(3);
    auto feats = collect_features(m, tiny_task(), 0.5, rng);
    REQUIRE(feats.size() == 5);  // one per target of the single layer
    for (const auto& [name, fset] : feats) {
        const std::string path = (dir / (name + ".ipa")).string();
        save_features(path, fset);
        FeatureSet back = load_features(path);
        CHECK(back.weight_name == fset.weight_name);
        CHECK(back.layer_id == fset.layer_id);
        CHECK(back.model_hash == fset.model_hash);
        CHECK(same_matrix(back.data, fset.data));

        const std::string path2 = path + ".again";
        save_features(path2, back);
        CHECK(slurp(path) == slurp(path2));
    }
    fs::remove_all(dir);
}

TEST_CASE("projector containers preserve every field") {
    fs::path dir = fresh_dir("proj");
    const TinyTransformer& m = host();
    Rng rng(3);
    auto feats = collect_features(m, tiny_task(), 0.5, rng);
    const FeatureSet& fset = feats.at("layer0.w_q");

    ProjectorFile pf;
    pf.weight_name = fset.weight_name;
    pf.model_hash = fset.model_hash;
    pf.seed = 77;
    for (bool centered : {false, true}) {
        pf.projector = exact_pca(fset, 4, centered);
        const std::string path = (dir / (centered ? "c.ipa" : "u.ipa")).string();
        save_projector(path, pf);
        ProjectorFile back = load_projector(path);
        CHECK(back.weight_name == pf.weight_name);
        CHECK(back.model_hash == pf.model_hash);
        CHECK(back.seed == 77);
        CHECK(back.projector.algorithm == pf.projector.algorithm);
        CHECK(back.projector.centered == centered);
        CHECK(back.projector.seen == pf.projector.seen);
        CHECK(back.projector.fine_tuned == pf.projector.fine_tuned);
        CHECK(same_matrix(back.projector.u, pf.projector.u));
        REQUIRE(back.projector.mean.size() == pf.projector.mean.size());
        for (std::size_t i = 0; i < pf.projector.mean.size(); ++i)
            CHECK(back.projector.mean[i] == pf.projector.mean[i]);
    }

    Rng rr(12);
    pf.projector = random_projector(fset.d_in(), 4, rr);
    save_projector((dir / "r.ipa").string(), pf);
    CHECK(load_projector((dir / "r.ipa").string()).projector.algorithm ==
          ProjectorAlgo::random_proj);
    fs::remove_all(dir);
}

namespace {

// Attach, briefly train, and serialize one adapter set per variant.
AdapterSet trained_set(AdapterVariant variant, bool proj_trainable) {
    const TinyTransformer& m = host();
    const std::size_t rank = 4;
    const double alpha = 4.0;
    std::map<std::string, Projector> projs;
    if (variant == AdapterVariant::ipa) {
        Rng rng(3);
        for (auto& [name, fset] : collect_features(m, tiny_task(), 0.5, rng))
            projs[name] = exact_pca(fset, rank, false);
    }
    AdaptedModel am =
        attach_adapters(m, variant, rank, alpha,
                        variant == AdapterVariant::ipa ? &projs : nullptr, proj_trainable, 21);
    TrainConfig tc;
    tc.steps = 8;
    tc.batch_size = 8;
    tc.base_lr = 1e-2;
    tc.warmup_steps = 2;
    tc.seed = 4;
    train(am, tiny_task(), tc);
    return adapter_set_of(am, rank, alpha, 21);
}

}  // namespace

TEST_CASE("adapter containers round-trip for every variant") {
    fs::path dir = fresh_dir("adapters");
    struct Case {
        AdapterVariant variant;
        bool proj_trainable;
        const char* file;
    };
    const Case cases[] = {{AdapterVariant::lora, false, "lora.ipa"},
                          {AdapterVariant::dora, false, "dora.ipa"},
                          {AdapterVariant::ipa, false, "ipa.ipa"},
                          {AdapterVariant::ipa, true, "ipaft.ipa"}};
    for (const Case& c : cases) {
        CAPTURE(c.file);
        AdapterSet as = trained_set(c.variant, c.proj_trainable);
        const std::string path = (dir / c.file).string();
        save_adapters(path, as);
        AdapterSet back = load_adapters(path);
        CHECK(back.variant == as.variant);
        CHECK(back.rank == as.rank);
        CHECK(back.alpha == as.alpha);
        CHECK(back.adapter_seed == as.adapter_seed);
        CHECK(back.model_hash == as.model_hash);
        CHECK(back.target_names == as.target_names);
        REQUIRE(back.adapters.size() == as.adapters.size());
        for (std::size_t i = 0; i < as.adapters.size(); ++i) {
            const Adapter& x = as.adapters[i];
            const Adapter& y = back.adapters[i];
            CHECK(y.variant == x.variant);
            CHECK(y.alpha == x.alpha);
            CHECK(y.lambda == x.lambda);
            CHECK(same_matrix(y.b, x.b));
            if (x.variant == AdapterVariant::ipa) {
                CHECK(same_matrix(y.proj.u, x.proj.u));
                CHECK(y.proj.fine_tuned == x.proj.fine_tuned);
                CHECK(y.proj_trainable == x.proj_trainable);
            } else {
                CHECK(same_matrix(y.a, x.a));
            }
            if (x.variant == AdapterVariant::dora) {
                REQUIRE(y.m.size() == x.m.size());
                for (std::size_t k = 0; k < x.m.size(); ++k) CHECK(y.m[k] == x.m[k]);
            }
        }
        // Trained sets must carry signal, not zeros.
        double bsum = 0.0;
        for (const Adapter& ad : back.adapters)
            for (std::size_t i = 0; i < ad.b.rows(); ++i)
                for (std::size_t j = 0; j < ad.b.cols(); ++j) bsum += std::fabs(ad.b(i, j));
        CHECK(bsum > 0.0);

        const std::string path2 = path + ".again";
        save_adapters(path2, back);
        CHECK(slurp(path) == slurp(path2));
    }
    fs::remove_all(dir);
}

TEST_CASE("adam state containers round-trip moments and step count") {
    fs::path dir = fresh_dir("adam");
    const TinyTransformer& m = host();
    AdaptedModel am = attach_adapters(m, AdapterVariant::lora, 4, 4.0, nullptr, false, 21);
    AdamState st = adam_init(am);
    TrainConfig tc;
    tc.steps = 4;
    tc.warmup_steps = 1;
    tc.base_lr = 1e-2;
    Dataset ds = generate_task(tiny_task(), m.config);
    std::vector<Example> batch(ds.train.begin(), ds.train.begin() + 8);
    for (std::size_t s = 0; s < 3; ++s) {
        auto [loss, grads] = model_forward_backward(am, batch);
        adam_step(am, grads, st, tc, lr_at(tc, s));
    }

    std::vector<std::string> names;
    for (const TargetSlot& t : am.targets) names.push_back(t.name);
    const std::string path = (dir / "adam.ipa").string();
    save_adam_state(path, st, names);

    std::vector<std::string> back_names;
    AdamState back = load_adam_state(path, &back_names);
    CHECK(back_names == names);
    CHECK(back.t == st.t);
    REQUIRE(back.m.size() == st.m.size());
    REQUIRE(back.v.size() == st.v.size());
    for (std::size_t i = 0; i < st.m.size(); ++i) {
        CHECK(same_matrix(back.m[i].d_a, st.m[i].d_a));
        CHECK(same_matrix(back.m[i].d_b, st.m[i].d_b));
        CHECK(same_matrix(back.v[i].d_a, st.v[i].d_a));
        CHECK(same_matrix(back.v[i].d_b, st.v[i].d_b));
    }
    const std::string path2 = path + ".again";
    save_adam_state(path2, back, back_names);
    CHECK(slurp(path) == slurp(path2));
    fs::remove_all(dir);
}

TEST_CASE("directory lock excludes concurrent writers") {
    fs::path dir = fresh_dir("lock");
    {
        DirLock lock(dir.string());
        CHECK(fs::exists(dir / "ipa.lock"));
        const std::string msg = thrown_message([&] { DirLock second(dir.string()); });
        CHECK(msg.find("locked") != std::string::npos);
        CHECK(msg.find(dir.string()) != std::string::npos);
    }
    CHECK_FALSE(fs::exists(dir / "ipa.lock"));
    DirLock again(dir.string());  // released lock can be retaken
    fs::remove_all(dir);
}

TEST_CASE("manifests are deterministic and timestamp-free") {
    fs::path dir = fresh_dir("manifest");
    nlohmann::json body;
    body["command"] = "collect";
    body["config"] = {{"fraction", 0.25}, {"seed", 7}};
    body["outputs"] = {{"layer0.w_q.ipa", "0123abcd"}};
    write_manifest(dir.string(), "collect", body);
    const std::string path = (dir / "collect.manifest.json").string();
    REQUIRE(fs::exists(path));
    ByteBuf first = slurp(path);
    write_manifest(dir.string(), "collect", body);
    CHECK(slurp(path) == first);

    nlohmann::json parsed = nlohmann::json::parse(std::string(first.begin(), first.end()));
    CHECK(parsed == body);
    fs::remove_all(dir);
}

TEST_CASE("file_sha256 matches the classic vector") {
    fs::path dir = fresh_dir("sha");
    const std::string path = (dir / "abc.txt").string();
    spit(path, ByteBuf{'a', 'b', 'c'});
    CHECK(file_sha256(path) ==
          "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    fs::remove_all(dir);
}

// --- run configuration parsing ----------------------------------------------

namespace {

nlohmann::json full_doc() {
    return nlohmann::json::parse(R"({
      "model": {"vocab": 11, "d_model": 16, "n_layers": 1, "n_heads": 2,
                "d_ff": 24, "seq_len": 6, "n_classes": 3,
                "target_set": "qkv_mlp", "seed": 5},
      "pretext": {"task_id": "pre", "seed": 9, "intrinsic_dim": 4,
                  "spectrum": 0.6, "label_rule": 0, "n_train": 64, "n_eval": 32},
      "task": {"task_id": "down", "seed": 9, "intrinsic_dim": 4,
               "spectrum": 0.6, "label_rule": 2, "n_train": 64, "n_eval": 32},
      "adapter": {"variant": "ipa", "d_h": 4, "alpha": 4.0, "adapter_seed": 21},
      "projector": {"algo": "exact", "centered": false, "fraction": 0.5,
                    "ipca_batch": 32, "gha_epochs": 10, "gha_lr": 0.001,
                    "proj_trainable": false, "collect_seed": 3},
      "train": {"steps": 8, "batch_size": 8, "base_lr": 0.01,
                "warmup_steps": 2, "beta1": 0.9, "beta2": 0.999,
                "eps": 1e-8, "seed": 4},
      "analyze": {"j_tasks": 6, "axis": "hidden_dim",
                  "settings": ["2", "4"], "seeds": [1, 2, 3]},
      "output_dir": "out"
    })");
}

}  // namespace

TEST_CASE("run config parses a complete document") {
    RunConfig rc = parse_run_config(full_doc());
    CHECK(rc.has_model);
    CHECK(rc.has_pretext);
    CHECK(rc.has_task);
    CHECK(rc.has_adapter);
    CHECK(rc.has_projector);
    CHECK(rc.has_train);
    CHECK(rc.has_analyze);
    CHECK(rc.output_dir == "out");
    CHECK(rc.pipeline.model.d_model == 16);
    CHECK(rc.pipeline.pretext.task_id == "pre");
    CHECK(rc.pipeline.task.label_rule == 2);
    CHECK(rc.pipeline.variant == AdapterVariant::ipa);
    CHECK(rc.pipeline.d_h == 4);
    CHECK(rc.pipeline.alpha == 4.0);
    CHECK(rc.pipeline.algo == ProjectorAlgo::exact);
    CHECK(rc.pipeline.fraction == 0.5);
    CHECK(rc.pipeline.train.steps == 8);
    CHECK(rc.pipeline.train.eps == 1e-8);
    CHECK(rc.analyze.j_tasks == 6);
    CHECK(rc.analyze.settings == std::vector<std::string>{"2", "4"});
    CHECK(rc.analyze.seeds == std::vector<std::uint64_t>{1, 2, 3});
}

TEST_CASE("run config blocks are optional but flagged") {
    nlohmann::json doc;
    doc["output_dir"] = "out";
    doc["model"] = full_doc()["model"];
    RunConfig rc = parse_run_config(doc);
    CHECK(rc.has_model);
    CHECK_FALSE(rc.has_task);
    CHECK_FALSE(rc.has_train);
    CHECK_FALSE(rc.has_analyze);
}

TEST_CASE("run config rejects malformed documents") {
    // Unknown keys, anywhere.
    nlohmann::json doc = full_doc();
    doc["extra"] = 1;
    CHECK(thrown_message([&] { parse_run_config(doc); }).find("extra") != std::string::npos);

    doc = full_doc();
    doc["train"]["momentum"] = 0.9;
    CHECK(thrown_message([&] { parse_run_config(doc); }).find("momentum") != std::string::npos);

    // A present block must be complete.
    doc = full_doc();
    doc["model"].erase("d_model");
    CHECK(thrown_message([&] { parse_run_config(doc); }).find("d_model") != std::string::npos);

    // Type errors are schema errors, not silent coercions.
    doc = full_doc();
    doc["train"]["steps"] = "8";
    CHECK_THROWS(parse_run_config(doc));
    doc = full_doc();
    doc["adapter"]["alpha"] = true;
    CHECK_THROWS(parse_run_config(doc));
    doc = full_doc();
    doc["model"]["seed"] = -3;
    CHECK_THROWS(parse_run_config(doc));

    // output_dir is always required.
    doc = full_doc();
    doc.erase("output_dir");
    CHECK(thrown_message([&] { parse_run_config(doc); }).find("output_dir") !=
          std::string::npos);

    // Value constraints.
    doc = full_doc();
    doc["adapter"]["d_h"] = 0;
    CHECK_THROWS(parse_run_config(doc));
    doc = full_doc();
    doc["projector"]["fraction"] = 0.0;
    CHECK_THROWS(parse_run_config(doc));
    doc = full_doc();
    doc["projector"]["fraction"] = 1.5;
    CHECK_THROWS(parse_run_config(doc));
    doc = full_doc();
    doc["adapter"]["variant"] = "qlora";
    CHECK_THROWS(parse_run_config(doc));

    // Non-object document.
    CHECK_THROWS(parse_run_config(nlohmann::json::array()));
}

TEST_CASE("run config echo is a parse fixpoint") {
    RunConfig rc = parse_run_config(full_doc());
    nlohmann::json echo = run_config_json(rc);
    RunConfig rc2 = parse_run_config(echo);
    CHECK(run_config_json(rc2) == echo);
    CHECK(rc2.pipeline.train.base_lr == rc.pipeline.train.base_lr);
    CHECK(rc2.analyze.axis == rc.analyze.axis);
}

TEST_CASE("run config loads from disk and reports bad files") {
    fs::path dir = fresh_dir("rc");
    const std::string path = (dir / "run.json").string();
    {
        std::ofstream out(path);
        out << full_doc().dump(2) << "\n";
    }
    RunConfig rc = load_run_config(path);
    CHECK(rc.pipeline.model.vocab == 11);

    const std::string missing = (dir / "nope.json").string();
    CHECK_THROWS(load_run_config(missing));

    const std::string garbled = (dir / "bad.json").string();
    {
        std::ofstream out(garbled);
        out << "{not json";
    }
    CHECK_THROWS(load_run_config(garbled));
    fs::remove_all(dir);
}
