#include "ipa/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <string>

namespace ipa {
namespace {

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

bool identical(const Vec& a, const Vec& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

// Identical vectors short-circuit to exactly 1 so that the "untrained /
// duplicate run" diagnostics read 1.0 rather than 1 - ulp.
double cos_or_one(const Vec& a, const Vec& b) {
    if (identical(a, b)) return 1.0;
    return cosine(a, b);
}

void append_matrix(Vec& dst, const Matrix& m) {
    dst.insert(dst.end(), m.data(), m.data() + m.size());
}

const Matrix& input_side(const Adapter& ad) {
    return ad.variant == AdapterVariant::ipa ? ad.proj.u : ad.a;
}

double mean_of(const Vec& v) {
    double s = 0.0;
    for (double e : v) s += e;
    return s / static_cast<double>(v.size());
}

void adam_model_step(TinyTransformer& m, TinyTransformer& grads, TinyTransformer& m1,
                     TinyTransformer& m2, std::size_t t, const TrainConfig& c,
                     double lr) {
    auto tp = tensor_refs(m);
    auto tg = tensor_refs(grads);
    auto s1 = tensor_refs(m1);
    auto s2 = tensor_refs(m2);
    const double c1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
    for (std::size_t k = 0; k < tp.size(); ++k) {
        for (std::size_t i = 0; i < tp[k].size(); ++i) {
            double& mm = s1[k].data[i];
            double& vv = s2[k].data[i];
            const double g = tg[k].data[i];
            mm = c.beta1 * mm + (1.0 - c.beta1) * g;
            vv = c.beta2 * vv + (1.0 - c.beta2) * g * g;
            tp[k].data[i] -= lr * (mm / c1) / (std::sqrt(vv / c2) + c.eps);
        }
    }
}

}  // namespace

Projector train_projector(const FeatureSet& fs, const PipelineConfig& cfg,
                          std::uint64_t seed) {
    switch (cfg.algo) {
        case ProjectorAlgo::exact:
            return exact_pca(fs, cfg.d_h, cfg.centered);
        case ProjectorAlgo::ipca: {
            require(cfg.ipca_batch >= 1, "train_projector: ipca_batch must be >= 1");
            IpcaState st = ipca_init(fs.d_in(), cfg.d_h, cfg.centered);
            for (std::size_t start = 0; start < fs.count(); start += cfg.ipca_batch) {
                const std::size_t end = std::min(start + cfg.ipca_batch, fs.count());
                Matrix block(end - start, fs.d_in());
                for (std::size_t r = start; r < end; ++r)
                    for (std::size_t j = 0; j < fs.d_in(); ++j)
                        block(r - start, j) = fs.data(r, j);
                st = ipca_update(std::move(st), block);
            }
            return ipca_finalize(st);
        }
        case ProjectorAlgo::gha: {
            require(cfg.gha_epochs >= 1, "train_projector: gha_epochs must be >= 1");
            Rng rg(seed ^ 0x5851f42d4c957f2dULL);
            GhaState st = gha_init(fs.d_in(), cfg.d_h, cfg.gha_lr, rg);
            for (std::size_t e = 0; e < cfg.gha_epochs; ++e)
                st = gha_epoch(std::move(st), fs, rg.permutation(fs.count()));
            return gha_finalize(st);
        }
        case ProjectorAlgo::random_proj: {
            Rng rr(seed ^ 0x9e3779b97f4a7c15ULL);
            return random_projector(fs.d_in(), cfg.d_h, rr);
        }
    }
    throw Error("train_projector: unknown algorithm");
}

std::map<std::string, Projector> train_projectors(
    const std::map<std::string, FeatureSet>& feats, const PipelineConfig& cfg,
    std::uint64_t seed) {
    std::map<std::string, Projector> out;
    std::uint64_t idx = 0;
    for (const auto& [name, fs] : feats) {
        const std::uint64_t child = seed ^ (0x9e3779b97f4a7c15ULL * (idx + 1));
        out.emplace(name, train_projector(fs, cfg, child));
        ++idx;
    }
    return out;
}

RunOutcome run_pipeline(const TinyTransformer& host, const PipelineConfig& cfg,
                        std::uint64_t run_seed) {
    RunOutcome out;
    std::map<std::string, Projector> projs;
    const bool needs_proj = cfg.variant == AdapterVariant::ipa;
    if (needs_proj) {
        Rng rc(run_seed);
        const auto feats = collect_features(host, cfg.task, cfg.fraction, rc);
        projs = train_projectors(feats, cfg, run_seed);
        // Projector quality judged against the full feature collection (the
        // fraction-1 selection is seed-independent).
        Rng rfull(0);
        const auto full = collect_features(host, cfg.task, 1.0, rfull);
        double acc = 0.0;
        for (const auto& [name, p] : projs) acc += reconstruction_error(p, full.at(name));
        out.mean_recon = acc / static_cast<double>(projs.size());
    }
    AdaptedModel am = attach_adapters(host, cfg.variant, cfg.d_h, cfg.alpha,
                                      needs_proj ? &projs : nullptr, cfg.proj_trainable,
                                      run_seed);
    const Dataset ds = generate_task(cfg.task, host.config);
    TrainConfig tc = cfg.train;
    tc.seed = run_seed;
    out.log = train_on(am, ds.train, tc);
    out.final_loss = out.log.empty() ? std::numeric_limits<double>::quiet_NaN()
                                     : out.log.back().loss;
    out.eval_accuracy = evaluate_accuracy(am, ds.eval);
    return out;
}

TaskVectors make_task_vectors(const std::string& task_id, const AdaptedModel& trained,
                              const AdaptedModel& at_init) {
    require(trained.adapters.size() == at_init.adapters.size(),
            "make_task_vectors: adapter count mismatch");
    TaskVectors tv;
    tv.task_id = task_id;
    for (std::size_t i = 0; i < trained.adapters.size(); ++i) {
        const Matrix& a = input_side(trained.adapters[i]);
        const Matrix& a0 = input_side(at_init.adapters[i]);
        require(a.same_shape(a0) && trained.adapters[i].b.same_shape(at_init.adapters[i].b),
                "make_task_vectors: shape mismatch against the init twin");
        append_matrix(tv.theta_a, a);
        append_matrix(tv.theta_b, trained.adapters[i].b);
        append_matrix(tv.theta_a_init, a0);
    }
    return tv;
}

Vec task_init_similarity(const std::vector<TaskVectors>& tv) {
    require(!tv.empty(), "task_init_similarity: no tasks");
    Vec out;
    out.reserve(tv.size());
    for (const TaskVectors& t : tv) out.push_back(cos_or_one(t.theta_a, t.theta_a_init));
    return out;
}

Matrix cosine_matrix(const std::vector<Vec>& vs) {
    require(vs.size() >= 2, "cosine_matrix: need at least 2 vectors");
    const std::size_t j = vs.size();
    Matrix m(j, j);
    for (std::size_t i = 0; i < j; ++i) {
        m(i, i) = 1.0;
        for (std::size_t k = i + 1; k < j; ++k) {
            require(vs[i].size() == vs[k].size(), "cosine_matrix: length mismatch");
            const double c = cos_or_one(vs[i], vs[k]);
            m(i, k) = c;
            m(k, i) = c;
        }
    }
    return m;
}

SimilarityReport similarity_matrices(const std::vector<TaskVectors>& tv) {
    require(tv.size() >= 2, "similarity_matrices: need at least 2 tasks");
    for (std::size_t j = 1; j < tv.size(); ++j) {
        require(tv[j].theta_a.size() == tv[0].theta_a.size() &&
                    tv[j].theta_b.size() == tv[0].theta_b.size(),
                "similarity_matrices: inconsistent vector lengths");
        require(identical(tv[j].theta_a_init, tv[0].theta_a_init),
                "similarity_matrices: tasks do not share the A init");
    }
    SimilarityReport rep;
    rep.task_init_a = task_init_similarity(tv);
    std::vector<Vec> as, bs;
    for (const TaskVectors& t : tv) {
        as.push_back(t.theta_a);
        bs.push_back(t.theta_b);
    }
    rep.task_task_a = cosine_matrix(as);
    rep.task_task_b = cosine_matrix(bs);
    return rep;
}

std::vector<TaskVectors> asymmetry_suite(const TinyTransformer& host,
                                         const PipelineConfig& cfg,
                                         std::size_t j_tasks) {
    require(j_tasks >= 2, "asymmetry_suite: need at least 2 tasks");
    std::vector<TaskVectors> out;
    out.reserve(j_tasks);
    for (std::size_t j = 0; j < j_tasks; ++j) {
        TaskSpec task = cfg.task;
        task.task_id = cfg.task.task_id + "-j" + std::to_string(j);
        task.label_rule = cfg.task.label_rule + 1 + j;
        AdaptedModel am = attach_adapters(host, AdapterVariant::lora, cfg.d_h, cfg.alpha,
                                          nullptr, false, cfg.adapter_seed);
        const AdaptedModel init = attach_adapters(host, AdapterVariant::lora, cfg.d_h,
                                                  cfg.alpha, nullptr, false,
                                                  cfg.adapter_seed);
        if (cfg.train.steps > 0) (void)train(am, task, cfg.train);
        out.push_back(make_task_vectors(task.task_id, am, init));
    }
    return out;
}

Vec full_ft_delta(const TinyTransformer& host, const TaskSpec& task,
                  const TrainConfig& tc) {
    validate(tc);
    TinyTransformer m = host;
    const Dataset ds = generate_task(task, m.config);
    TinyTransformer m1 = zero_like(m), m2 = zero_like(m);
    Rng rb(tc.seed);
    for (std::size_t step = 0; step < tc.steps; ++step) {
        std::vector<Example> batch;
        batch.reserve(tc.batch_size);
        for (std::size_t b = 0; b < tc.batch_size; ++b)
            batch.push_back(ds.train[rb.below(ds.train.size())]);
        auto [loss, grads] = full_forward_backward(m, batch);
        require(std::isfinite(loss),
                "full_ft_delta: loss diverged at step " + std::to_string(step));
        adam_model_step(m, grads, m1, m2, step + 1, tc, lr_at(tc, step));
    }
    Vec delta;
    auto now = tensor_refs(m);
    auto before = tensor_refs(const_cast<TinyTransformer&>(host));
    for (std::size_t k = 0; k < now.size(); ++k)
        for (std::size_t i = 0; i < now[k].size(); ++i)
            delta.push_back(now[k].data[i] - before[k].data[i]);
    return delta;
}

SweepReport run_sweep(const TinyTransformer& host, const PipelineConfig& base,
                      const std::string& axis, const std::vector<std::string>& settings,
                      const std::vector<std::uint64_t>& seeds) {
    require(settings.size() >= 2, "run_sweep: need at least 2 settings");
    require(seeds.size() >= 3, "run_sweep: need at least 3 seeds");
    SweepReport rep;
    rep.axis = axis;
    rep.seeds = seeds;
    for (const std::string& setting : settings) {
        PipelineConfig cfg = base;
        std::string label;
        if (axis == "hidden_dim") {
            const std::size_t dh = static_cast<std::size_t>(std::stoul(setting));
            require(dh >= 1, "run_sweep: hidden dim must be >= 1");
            // Keep the scaling ratio alpha/d_h fixed across the sweep.
            cfg.alpha = base.alpha * static_cast<double>(dh) /
                        static_cast<double>(base.d_h);
            cfg.d_h = dh;
            label = "d_h=" + std::to_string(dh);
        } else if (axis == "pretrain_fraction") {
            require(base.variant == AdapterVariant::ipa,
                    "run_sweep: fraction axis needs an ipa base");
            cfg.fraction = std::stod(setting);
            label = "fraction=" + setting;
        } else if (axis == "algorithm") {
            require(base.variant == AdapterVariant::ipa,
                    "run_sweep: algorithm axis needs an ipa base");
            cfg.algo = projector_algo_from_string(setting);
            label = setting;
        } else {
            throw Error("run_sweep: unknown axis " + axis);
        }
        SweepPoint pt;
        pt.setting = label;
        for (const std::uint64_t seed : seeds) {
            try {
                const RunOutcome o = run_pipeline(host, cfg, seed);
                pt.accuracy.push_back(o.eval_accuracy);
                pt.final_loss.push_back(o.final_loss);
                pt.recon.push_back(o.mean_recon);
            } catch (const Error& e) {
                throw Error("run_sweep: (" + axis + ", " + label + ", seed " +
                            std::to_string(seed) + "): " + e.what());
            }
        }
        pt.accuracy_mean = mean_of(pt.accuracy);
        pt.loss_mean = mean_of(pt.final_loss);
        pt.recon_mean = mean_of(pt.recon);
        pt.accuracy_lo = *std::min_element(pt.accuracy.begin(), pt.accuracy.end());
        pt.accuracy_hi = *std::max_element(pt.accuracy.begin(), pt.accuracy.end());
        rep.points.push_back(std::move(pt));
    }
    return rep;
}

FixedProjReport compare_fixed_projector(const TinyTransformer& host,
                                        const PipelineConfig& cfg,
                                        const std::vector<std::uint64_t>& seeds) {
    require(!seeds.empty(), "compare_fixed_projector: need seeds");
    require(cfg.task.intrinsic_dim >= cfg.d_h,
            "compare_fixed_projector: hidden dim must not exceed the task's "
            "intrinsic dimension");
    struct Arm {
        const char* name;
        ProjectorAlgo algo;
        bool trainable;
    };
    const Arm arms[] = {
        {"lora-frozen", ProjectorAlgo::random_proj, false},
        {"lora-trainable", ProjectorAlgo::random_proj, true},
        {"ipa-frozen", ProjectorAlgo::exact, false},
        {"ipa-trainable", ProjectorAlgo::exact, true},
    };
    FixedProjReport rep;
    rep.seeds = seeds;
    for (const Arm& arm : arms) {
        PipelineConfig c = cfg;
        c.variant = AdapterVariant::ipa;  // both arms share the bottleneck path
        c.algo = arm.algo;
        c.proj_trainable = arm.trainable;
        FixedProjCell cell;
        cell.name = arm.name;
        for (const std::uint64_t seed : seeds) {
            try {
                const RunOutcome o = run_pipeline(host, c, seed);
                cell.accuracy.push_back(o.eval_accuracy);
                cell.final_loss.push_back(o.final_loss);
            } catch (const Error& e) {
                throw Error("compare_fixed_projector: (" + std::string(arm.name) +
                            ", seed " + std::to_string(seed) + "): " + e.what());
            }
        }
        cell.accuracy_mean = mean_of(cell.accuracy);
        cell.loss_mean = mean_of(cell.final_loss);
        rep.cells.push_back(std::move(cell));
    }
    return rep;
}

std::string matrix_csv(const Matrix& m) {
    std::string out;
    for (std::size_t i = 0; i < m.rows(); ++i) {
        for (std::size_t j = 0; j < m.cols(); ++j) {
            if (j) out += ',';
            out += fmt(m(i, j));
        }
        out += '\n';
    }
    return out;
}

std::string sweep_csv(const SweepReport& r) {
    std::string out = "axis,setting,seed,accuracy,final_loss,recon\n";
    for (const SweepPoint& pt : r.points) {
        for (std::size_t s = 0; s < r.seeds.size(); ++s) {
            out += r.axis + ',' + pt.setting + ',' + std::to_string(r.seeds[s]) + ',' +
                   fmt(pt.accuracy[s]) + ',' + fmt(pt.final_loss[s]) + ',' +
                   fmt(pt.recon[s]) + '\n';
        }
        out += r.axis + ',' + pt.setting + ",mean," + fmt(pt.accuracy_mean) + ',' +
               fmt(pt.loss_mean) + ',' + fmt(pt.recon_mean) + '\n';
    }
    return out;
}

std::string fixed_proj_csv(const FixedProjReport& r) {
    std::string out = "cell,seed,accuracy,final_loss\n";
    for (const FixedProjCell& c : r.cells) {
        for (std::size_t s = 0; s < r.seeds.size(); ++s)
            out += c.name + ',' + std::to_string(r.seeds[s]) + ',' + fmt(c.accuracy[s]) +
                   ',' + fmt(c.final_loss[s]) + '\n';
        out += c.name + ",mean," + fmt(c.accuracy_mean) + ',' + fmt(c.loss_mean) + '\n';
    }
    return out;
}

std::string similarity_summary(const SimilarityReport& r) {
    const std::size_t j = r.task_init_a.size();
    double init_mean = mean_of(r.task_init_a);
    double off_a = 0.0, off_b = 0.0;
    std::size_t n_off = 0;
    for (std::size_t i = 0; i < j; ++i)
        for (std::size_t k = 0; k < j; ++k)
            if (i != k) {
                off_a += std::abs(r.task_task_a(i, k));
                off_b += std::abs(r.task_task_b(i, k));
                ++n_off;
            }
    if (n_off) {
        off_a /= static_cast<double>(n_off);
        off_b /= static_cast<double>(n_off);
    }
    std::string out;
    out += "tasks: " + std::to_string(j) + '\n';
    out += "mean cos(theta_A, theta_A_init): " + fmt(init_mean) + '\n';
    out += "mean |offdiag| cos(theta_A_i, theta_A_j): " + fmt(off_a) + '\n';
    out += "mean |offdiag| cos(theta_B_i, theta_B_j): " + fmt(off_b) + '\n';
    return out;
}

}  // namespace ipa
