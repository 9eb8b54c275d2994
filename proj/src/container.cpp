#include "ipa/container.hpp"

#include <cerrno>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include <fcntl.h>
#include <unistd.h>

#include "ipa/hash.hpp"

namespace ipa {
namespace {

using nlohmann::json;

const std::set<std::string> kKinds = {"feature_set", "projector", "adapter", "model",
                                      "adam_state"};

// Shapes in the header and matrices in memory must agree exactly; every
// reader and writer funnels through here.
void validate_container(const RawContainer& c) {
    require(c.header.is_object(), "container: header must be a JSON object");
    require(c.header.contains("kind") && c.header["kind"].is_string(),
            "container: header missing string 'kind'");
    const std::string kind = c.header["kind"].get<std::string>();
    require(kKinds.count(kind) != 0, "container: unknown kind '" + kind + "'");
    // Signedness of the in-memory JSON integer is irrelevant: the serialized
    // text cannot carry it, so accept any integer representation of 1.
    require(c.header.contains("format_version") &&
                c.header["format_version"].is_number_integer() &&
                c.header["format_version"] == 1,
            "container: format_version must be 1");
    require(c.header.contains("tensors") && c.header["tensors"].is_array(),
            "container: header missing 'tensors' array");
    const json& ts = c.header["tensors"];
    require(ts.size() == c.tensors.size(), "container: tensor count mismatch");
    for (std::size_t i = 0; i < c.tensors.size(); ++i) {
        const json& t = ts[i];
        require(t.is_object() && t.contains("name") && t.contains("rows") &&
                    t.contains("cols") && t["name"].is_string() &&
                    t["rows"].is_number_integer() && t["rows"] >= 0 &&
                    t["cols"].is_number_integer() && t["cols"] >= 0,
                "container: tensor entry needs name/rows/cols");
        require(t["rows"].get<std::size_t>() == c.tensors[i].rows() &&
                    t["cols"].get<std::size_t>() == c.tensors[i].cols(),
                "container: declared shape mismatch for tensor '" +
                    t["name"].get<std::string>() + "'");
        require(!c.tensors[i].empty(), "container: empty tensor '" +
                                           t["name"].get<std::string>() + "'");
    }
    if (kind == "feature_set" || kind == "adapter") {
        require(c.header.contains("model_hash") && c.header["model_hash"].is_string() &&
                    !c.header["model_hash"].get<std::string>().empty(),
                "container: '" + kind + "' requires model_hash");
    }
}

ByteBuf file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), "cannot open file: " + path);
    ByteBuf bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    require(!in.bad(), "read failed: " + path);
    return bytes;
}

void atomic_write(const std::string& path, const ByteBuf& bytes) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        require(out.good(), "cannot open for write: " + tmp);
        out.write(reinterpret_cast<const char*>(bytes.data()),
                  static_cast<std::streamsize>(bytes.size()));
        require(out.good(), "write failed: " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    require(!ec, "rename failed: " + tmp + " -> " + path + ": " + ec.message());
}

Matrix vec_as_row(const Vec& v) {
    Matrix m(1, v.size());
    for (std::size_t i = 0; i < v.size(); ++i) m(0, i) = v[i];
    return m;
}

Vec row_as_vec(const Matrix& m) {
    require(m.rows() == 1, "container: expected a 1-row tensor");
    return Vec(m.row(0), m.row(0) + m.cols());
}

json tensor_decl(const std::string& name, const Matrix& m) {
    return json{{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}};
}

// Header fields shared by every projector serialization (standalone files
// and the per-target blocks inside adapter containers).
json projector_meta(const Projector& p) {
    return json{{"algorithm", to_string(p.algorithm)},
                {"centered", p.centered},
                {"seen", p.seen},
                {"fine_tuned", p.fine_tuned}};
}

Projector projector_from_meta(const json& meta, Matrix u, Vec mean) {
    Projector p;
    p.u = std::move(u);
    p.mean = std::move(mean);
    p.algorithm = projector_algo_from_string(meta.at("algorithm").get<std::string>());
    p.centered = meta.at("centered").get<bool>();
    p.seen = meta.at("seen").get<std::size_t>();
    p.fine_tuned = meta.at("fine_tuned").get<bool>();
    require(p.mean.size() == p.d_in(), "projector: mean length mismatch");
    return p;
}

const json& header_at(const json& h, const char* key) {
    require(h.contains(key), std::string("container: header missing '") + key + "'");
    return h.at(key);
}

}  // namespace

ByteBuf container_bytes(const RawContainer& c) {
    validate_container(c);
    const std::string header = c.header.dump();  // compact, keys sorted
    require(header.size() <= 0xffffffffu, "container: header too large");
    ByteBuf out;
    out.push_back('I');
    out.push_back('P');
    out.push_back('A');
    out.push_back('1');
    append_u32_le(out, static_cast<std::uint32_t>(header.size()));
    out.insert(out.end(), header.begin(), header.end());
    for (const Matrix& m : c.tensors)
        for (std::size_t i = 0; i < m.rows() * m.cols(); ++i)
            append_f64_le(out, m.data()[i]);
    return out;
}

RawContainer container_from_bytes(const ByteBuf& bytes) {
    require(bytes.size() >= 8, "container: file shorter than its preamble");
    require(std::memcmp(bytes.data(), "IPA1", 4) == 0, "container: bad magic");
    const std::uint32_t header_len = read_u32_le(bytes.data() + 4);
    require(bytes.size() >= 8 + static_cast<std::size_t>(header_len),
            "container: header extends past end of file");
    RawContainer c;
    try {
        c.header = json::parse(bytes.begin() + 8, bytes.begin() + 8 + header_len);
    } catch (const json::parse_error& e) {
        throw Error(std::string("container: header is not valid JSON: ") + e.what());
    }
    require(c.header.is_object(), "container: header must be a JSON object");
    require(c.header.contains("tensors") && c.header["tensors"].is_array(),
            "container: header missing 'tensors' array");

    std::size_t offset = 8 + header_len;
    for (const json& t : c.header["tensors"]) {
        require(t.is_object() && t.contains("rows") && t.contains("cols") &&
                    t["rows"].is_number_unsigned() && t["cols"].is_number_unsigned(),
                "container: tensor entry needs rows/cols");
        const std::size_t rows = t["rows"].get<std::size_t>();
        const std::size_t cols = t["cols"].get<std::size_t>();
        require(rows > 0 && cols > 0, "container: zero-sized tensor declared");
        const std::size_t need = rows * cols * 8;
        require(bytes.size() - offset >= need, "container: payload shorter than declared");
        Matrix m(rows, cols);
        for (std::size_t i = 0; i < rows * cols; ++i)
            m.data()[i] = read_f64_le(bytes.data() + offset + i * 8);
        offset += need;
        c.tensors.push_back(std::move(m));
    }
    require(offset == bytes.size(), "container: payload longer than declared");
    validate_container(c);
    return c;
}

void write_container_file(const std::string& path, const RawContainer& c) {
    atomic_write(path, container_bytes(c));
}

RawContainer read_container_file(const std::string& path) {
    return container_from_bytes(file_bytes(path));
}

// --- model -------------------------------------------------------------------

void save_model(const std::string& path, const TinyTransformer& m) {
    RawContainer c;
    json decls = json::array();
    // tensor_refs is non-const only because callers may mutate through it.
    auto refs = tensor_refs(const_cast<TinyTransformer&>(m));
    for (const TensorRef& r : refs) {
        Matrix t(r.rows, r.cols);
        std::copy(r.data, r.data + r.size(), t.data());
        decls.push_back(tensor_decl(r.name, t));
        c.tensors.push_back(std::move(t));
    }
    c.header = json{{"kind", "model"},
                    {"format_version", 1u},
                    {"model_hash", model_hash(m)},
                    {"config",
                     {{"vocab", m.config.vocab},
                      {"d_model", m.config.d_model},
                      {"n_layers", m.config.n_layers},
                      {"n_heads", m.config.n_heads},
                      {"d_ff", m.config.d_ff},
                      {"seq_len", m.config.seq_len},
                      {"n_classes", m.config.n_classes},
                      {"target_set", m.config.target_set},
                      {"seed", m.config.seed}}},
                    {"tensors", decls}};
    write_container_file(path, c);
}

TinyTransformer load_model(const std::string& path) {
    RawContainer c = read_container_file(path);
    require(c.header.at("kind") == "model", "load_model: not a model container");
    const json& mc = header_at(c.header, "config");
    ModelConfig cfg;
    cfg.vocab = mc.at("vocab").get<std::size_t>();
    cfg.d_model = mc.at("d_model").get<std::size_t>();
    cfg.n_layers = mc.at("n_layers").get<std::size_t>();
    cfg.n_heads = mc.at("n_heads").get<std::size_t>();
    cfg.d_ff = mc.at("d_ff").get<std::size_t>();
    cfg.seq_len = mc.at("seq_len").get<std::size_t>();
    cfg.n_classes = mc.at("n_classes").get<std::size_t>();
    cfg.target_set = mc.at("target_set").get<std::string>();
    cfg.seed = mc.at("seed").get<std::uint64_t>();
    validate(cfg);

    TinyTransformer m = zero_model(cfg);
    auto refs = tensor_refs(m);
    require(refs.size() == c.tensors.size(), "load_model: tensor count mismatch");
    for (std::size_t i = 0; i < refs.size(); ++i) {
        require(c.header["tensors"][i]["name"] == refs[i].name,
                "load_model: unexpected tensor order");
        require(c.tensors[i].rows() == refs[i].rows && c.tensors[i].cols() == refs[i].cols,
                "load_model: tensor shape mismatch");
        std::copy(c.tensors[i].data(), c.tensors[i].data() + refs[i].size(), refs[i].data);
    }
    require(model_hash(m) == header_at(c.header, "model_hash").get<std::string>(),
            "load_model: payload does not match model_hash (corrupt file?)");
    return m;
}

// --- feature set --------------------------------------------------------------

void save_features(const std::string& path, const FeatureSet& fs) {
    RawContainer c;
    c.header = json{{"kind", "feature_set"},
                    {"format_version", 1u},
                    {"weight_name", fs.weight_name},
                    {"layer_id", fs.layer_id},
                    {"model_hash", fs.model_hash},
                    {"tensors", json::array({tensor_decl("data", fs.data)})}};
    c.tensors.push_back(fs.data);
    write_container_file(path, c);
}

FeatureSet load_features(const std::string& path) {
    RawContainer c = read_container_file(path);
    require(c.header.at("kind") == "feature_set", "load_features: not a feature_set container");
    FeatureSet fs;
    fs.data = std::move(c.tensors.at(0));
    fs.weight_name = header_at(c.header, "weight_name").get<std::string>();
    fs.layer_id = header_at(c.header, "layer_id").get<int>();
    fs.model_hash = header_at(c.header, "model_hash").get<std::string>();
    return fs;
}

// --- projector -----------------------------------------------------------------

void save_projector(const std::string& path, const ProjectorFile& pf) {
    RawContainer c;
    json h = projector_meta(pf.projector);
    h["kind"] = "projector";
    h["format_version"] = 1u;
    h["weight_name"] = pf.weight_name;
    h["model_hash"] = pf.model_hash;
    h["seed"] = pf.seed;
    Matrix mean = vec_as_row(pf.projector.mean);
    h["tensors"] = json::array(
        {tensor_decl("u", pf.projector.u), tensor_decl("mean", mean)});
    c.header = std::move(h);
    c.tensors.push_back(pf.projector.u);
    c.tensors.push_back(std::move(mean));
    write_container_file(path, c);
}

ProjectorFile load_projector(const std::string& path) {
    RawContainer c = read_container_file(path);
    require(c.header.at("kind") == "projector", "load_projector: not a projector container");
    ProjectorFile pf;
    pf.projector = projector_from_meta(c.header, std::move(c.tensors.at(0)),
                                       row_as_vec(c.tensors.at(1)));
    pf.weight_name = header_at(c.header, "weight_name").get<std::string>();
    pf.model_hash = header_at(c.header, "model_hash").get<std::string>();
    pf.seed = header_at(c.header, "seed").get<std::uint64_t>();
    return pf;
}

// --- adapter set ----------------------------------------------------------------

AdapterSet adapter_set_of(const AdaptedModel& am, std::size_t rank, double alpha,
                          std::uint64_t adapter_seed) {
    AdapterSet as;
    as.variant = am.variant;
    as.rank = rank;
    as.alpha = alpha;
    as.adapter_seed = adapter_seed;
    as.model_hash = am.host_hash;
    for (const TargetSlot& t : am.targets) as.target_names.push_back(t.name);
    as.adapters = am.adapters;
    return as;
}

void save_adapters(const std::string& path, const AdapterSet& as) {
    require(as.target_names.size() == as.adapters.size(),
            "save_adapters: name/adapter count mismatch");
    require(!as.adapters.empty(), "save_adapters: empty adapter set");
    RawContainer c;
    json decls = json::array();
    json targets = json::array();
    for (std::size_t i = 0; i < as.adapters.size(); ++i) {
        const Adapter& ad = as.adapters[i];
        const std::string& name = as.target_names[i];
        require(ad.variant == as.variant, "save_adapters: mixed variants");
        json t{{"name", name}};
        switch (ad.variant) {
            case AdapterVariant::lora:
                decls.push_back(tensor_decl(name + ".a", ad.a));
                c.tensors.push_back(ad.a);
                break;
            case AdapterVariant::dora: {
                decls.push_back(tensor_decl(name + ".a", ad.a));
                c.tensors.push_back(ad.a);
                Matrix m = vec_as_row(ad.m);
                decls.push_back(tensor_decl(name + ".m", m));
                c.tensors.push_back(std::move(m));
                break;
            }
            case AdapterVariant::ipa: {
                t["projector"] = projector_meta(ad.proj);
                t["proj_trainable"] = ad.proj_trainable;
                decls.push_back(tensor_decl(name + ".u", ad.proj.u));
                c.tensors.push_back(ad.proj.u);
                Matrix mean = vec_as_row(ad.proj.mean);
                decls.push_back(tensor_decl(name + ".mean", mean));
                c.tensors.push_back(std::move(mean));
                break;
            }
        }
        decls.push_back(tensor_decl(name + ".b", ad.b));
        c.tensors.push_back(ad.b);
        targets.push_back(std::move(t));
    }
    c.header = json{{"kind", "adapter"},
                    {"format_version", 1u},
                    {"variant", to_string(as.variant)},
                    {"rank", as.rank},
                    {"alpha", as.alpha},
                    {"adapter_seed", as.adapter_seed},
                    {"model_hash", as.model_hash},
                    {"targets", targets},
                    {"tensors", decls}};
    write_container_file(path, c);
}

AdapterSet load_adapters(const std::string& path) {
    RawContainer c = read_container_file(path);
    require(c.header.at("kind") == "adapter", "load_adapters: not an adapter container");
    AdapterSet as;
    as.variant = adapter_variant_from_string(
        header_at(c.header, "variant").get<std::string>());
    as.rank = header_at(c.header, "rank").get<std::size_t>();
    as.alpha = header_at(c.header, "alpha").get<double>();
    as.adapter_seed = header_at(c.header, "adapter_seed").get<std::uint64_t>();
    as.model_hash = header_at(c.header, "model_hash").get<std::string>();
    require(as.rank >= 1, "load_adapters: rank must be >= 1");

    std::size_t ti = 0;  // cursor into c.tensors
    for (const json& t : header_at(c.header, "targets")) {
        as.target_names.push_back(t.at("name").get<std::string>());
        Adapter ad;
        ad.variant = as.variant;
        ad.alpha = as.alpha;
        ad.lambda = as.alpha / static_cast<double>(as.rank);
        switch (as.variant) {
            case AdapterVariant::lora:
                ad.a = std::move(c.tensors.at(ti++));
                break;
            case AdapterVariant::dora:
                ad.a = std::move(c.tensors.at(ti++));
                ad.m = row_as_vec(c.tensors.at(ti++));
                break;
            case AdapterVariant::ipa: {
                Matrix u = std::move(c.tensors.at(ti++));
                Vec mean = row_as_vec(c.tensors.at(ti++));
                ad.proj = projector_from_meta(t.at("projector"), std::move(u),
                                              std::move(mean));
                ad.proj_trainable = t.at("proj_trainable").get<bool>();
                break;
            }
        }
        ad.b = std::move(c.tensors.at(ti++));
        require(ad.rank() == as.rank, "load_adapters: rank mismatch at " +
                                          as.target_names.back());
        as.adapters.push_back(std::move(ad));
    }
    require(ti == c.tensors.size(), "load_adapters: unused payload tensors");
    require(!as.adapters.empty(), "load_adapters: empty adapter set");
    return as;
}

// --- optimizer state --------------------------------------------------------------

namespace {

void push_grads(json& decls, std::vector<Matrix>& tensors, const std::string& prefix,
                const AdapterGrads& g) {
    auto add = [&](const char* field, const Matrix& m) {
        if (m.empty()) return;
        decls.push_back(tensor_decl(prefix + "." + field, m));
        tensors.push_back(m);
    };
    add("d_b", g.d_b);
    add("d_a", g.d_a);
    add("d_proj", g.d_proj);
    if (!g.d_m.empty()) {
        Matrix m = vec_as_row(g.d_m);
        decls.push_back(tensor_decl(prefix + ".d_m", m));
        tensors.push_back(std::move(m));
    }
}

json grads_fields(const AdapterGrads& g) {
    json f = json::array();
    if (!g.d_b.empty()) f.push_back("d_b");
    if (!g.d_a.empty()) f.push_back("d_a");
    if (!g.d_proj.empty()) f.push_back("d_proj");
    if (!g.d_m.empty()) f.push_back("d_m");
    return f;
}

}  // namespace

void save_adam_state(const std::string& path, const AdamState& st,
                     const std::vector<std::string>& target_names) {
    require(st.m.size() == st.v.size(), "save_adam_state: m/v count mismatch");
    require(st.m.size() == target_names.size(), "save_adam_state: name count mismatch");
    RawContainer c;
    json decls = json::array();
    json targets = json::array();
    for (std::size_t i = 0; i < st.m.size(); ++i) {
        targets.push_back(json{{"name", target_names[i]},
                               {"variant", to_string(st.m[i].variant)},
                               {"fields", grads_fields(st.m[i])}});
        push_grads(decls, c.tensors, target_names[i] + ".m", st.m[i]);
        push_grads(decls, c.tensors, target_names[i] + ".v", st.v[i]);
    }
    c.header = json{{"kind", "adam_state"},
                    {"format_version", 1u},
                    {"t", st.t},
                    {"targets", targets},
                    {"tensors", decls}};
    write_container_file(path, c);
}

AdamState load_adam_state(const std::string& path, std::vector<std::string>* target_names) {
    RawContainer c = read_container_file(path);
    require(c.header.at("kind") == "adam_state", "load_adam_state: not an adam_state container");
    AdamState st;
    st.t = header_at(c.header, "t").get<std::size_t>();
    std::size_t ti = 0;
    auto take = [&](AdapterGrads& g, const json& fields) {
        for (const json& f : fields) {
            const std::string name = f.get<std::string>();
            Matrix m = std::move(c.tensors.at(ti++));
            if (name == "d_b") g.d_b = std::move(m);
            else if (name == "d_a") g.d_a = std::move(m);
            else if (name == "d_proj") g.d_proj = std::move(m);
            else if (name == "d_m") g.d_m = row_as_vec(m);
            else throw Error("load_adam_state: unknown field '" + name + "'");
        }
    };
    for (const json& t : header_at(c.header, "targets")) {
        AdapterGrads gm, gv;
        gm.variant = gv.variant =
            adapter_variant_from_string(t.at("variant").get<std::string>());
        take(gm, t.at("fields"));
        take(gv, t.at("fields"));
        if (target_names) target_names->push_back(t.at("name").get<std::string>());
        st.m.push_back(std::move(gm));
        st.v.push_back(std::move(gv));
    }
    require(ti == c.tensors.size(), "load_adam_state: unused payload tensors");
    return st;
}

// --- directory lock and manifest -----------------------------------------------------

DirLock::DirLock(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    require(!ec, "cannot create output directory: " + dir + ": " + ec.message());
    path_ = (std::filesystem::path(dir) / "ipa.lock").string();
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
        if (errno == EEXIST)
            throw Error("output directory is locked (another command is writing to " + dir +
                        "); remove " + path_ + " if that command is gone");
        throw Error("cannot create lock file " + path_ + ": " + std::strerror(errno));
    }
    ::close(fd);
}

DirLock::~DirLock() { ::unlink(path_.c_str()); }

void write_manifest(const std::string& dir, const std::string& command,
                    const nlohmann::json& body) {
    const std::string text = body.dump(2) + "\n";
    const std::string path =
        (std::filesystem::path(dir) / (command + ".manifest.json")).string();
    atomic_write(path, ByteBuf(text.begin(), text.end()));
}

std::string file_sha256(const std::string& path) {
    const ByteBuf bytes = file_bytes(path);
    return sha256_hex(bytes);
}

}  // namespace ipa
