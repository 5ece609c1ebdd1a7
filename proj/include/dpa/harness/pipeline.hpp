#pragma once

// Seeded end-to-end runs: clean victim, poison, retrained victim, evaluation,
// defenses, fraction sweep and Q-mode parity, written as CSV plus manifest.

#include <chrono>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dpa/dataset.hpp"
#include "dpa/errors.hpp"
#include "dpa/evasion.hpp"
#include "dpa/harness/config.hpp"
#include "dpa/harness/io.hpp"
#include "dpa/harness/report.hpp"
#include "dpa/harness/synthetic.hpp"
#include "dpa/models.hpp"
#include "dpa/noise_defense.hpp"
#include "dpa/poisoner.hpp"
#include "dpa/singularization.hpp"

namespace dpa::harness {

/// A pipeline stage failed. The original exception is kept for callers that
/// map error kinds to exit codes.
class StageError : public Error {
public:
    StageError(std::string stage, const std::string& what, std::exception_ptr cause)
        : Error("stage '" + stage + "' failed: " + what), stage_(std::move(stage)), cause_(std::move(cause)) {}

    const std::string& stage() const noexcept { return stage_; }
    std::exception_ptr cause() const noexcept { return cause_; }

private:
    std::string stage_;
    std::exception_ptr cause_;
};

struct DataSplits {
    Dataset train;
    Dataset val;
};

inline DataSplits build_data(const RunConfig& cfg) {
    DataSplits s;
    if (cfg.source == DataSource::idx) {
        s.train = load_idx(cfg.idx_train_images, cfg.idx_train_labels);
        s.val = load_idx(cfg.idx_val_images, cfg.idx_val_labels);
        if (s.train.dim() != s.val.dim()) throw ConfigError("data: idx train and validation dimensions differ");
        const std::size_t k = std::max(s.train.num_classes, s.val.num_classes);
        s.train.num_classes = s.val.num_classes = k;
    } else {
        SyntheticOptions o = cfg.synth;
        const std::uint64_t geometry = cfg.stage_seed(10);
        o.split = Split::train;
        s.train = make_synthetic(cfg.data_kind, cfg.n_train, cfg.classes, cfg.train_data_seed(), o, geometry);
        o.split = Split::validation;
        s.val = make_synthetic(cfg.data_kind, cfg.n_val, cfg.classes, cfg.val_data_seed(), o, geometry);
    }
    s.train.split = Split::train;
    s.val.split = Split::validation;
    s.train.validate();
    s.val.validate();
    return s;
}

/// First min(n, N) samples.
inline Dataset head(const Dataset& data, std::size_t n) {
    std::vector<std::size_t> idx(std::min(n, data.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return subset(data, idx);
}

struct ModelEval {
    std::string label;
    double accuracy = 0.0;
    RobustnessReport robustness;
    double tr_hth_mean = 0.0;
    double sigma_max_lb_mean = 0.0;
    bool curvature_exact = false;
    std::string checkpoint_digest;
};

struct NoiseEval {
    std::string label;
    NoiseSpec spec;
    double acc_clean = 0.0;
    double acc_noisy = 0.0;
    double delta_mean = 0.0;  // mean Δloss over samples × trials
    double delta_std = 0.0;
    double delta_max = 0.0;
    std::vector<NoiseSensitivity> per_sample;
};

/// Accuracy on the full validation split, ρ̂ on its head, and curvature
/// statistics on its first noise_samples entries.
inline ModelEval evaluate_model(const std::string& label, const ModelState& m, const Dataset& val, const RunConfig& cfg) {
    ModelEval e;
    e.label = label;
    e.accuracy = accuracy(m, val);
    e.robustness = evaluate_robustness(m, head(val, cfg.attack_samples), cfg.attack_config());
    const Dataset probe = head(val, cfg.noise_samples);
    const std::size_t d = val.dim();
    e.curvature_exact = d <= cfg.poison.hessian_cap;
    const QMode mode = e.curvature_exact ? QMode::exact : QMode::hvp;
    for (std::size_t i = 0; i < probe.size(); ++i) {
        const HessianStats s = hessian_stats(InputLoss(m, probe.labels[i]), probe.sample(i), mix_seed(cfg.stage_seed(11), i),
                                             mode, cfg.poison.hessian_cap);
        e.tr_hth_mean += s.tr_hth;
        e.sigma_max_lb_mean += s.sigma_max_lb;
    }
    e.tr_hth_mean /= double(probe.size());
    e.sigma_max_lb_mean /= double(probe.size());
    e.checkpoint_digest = hex64(fnv1a64(encode_checkpoint(m)));
    return e;
}

inline NoiseEval evaluate_noise(const std::string& label, const ModelState& m, const Dataset& val, const NoiseSpec& spec,
                                const RunConfig& cfg) {
    NoiseEval n;
    n.label = label;
    n.spec = spec;
    n.acc_clean = accuracy(m, val);
    n.acc_noisy = noisy_accuracy(m, val, spec);
    const Dataset probe = head(val, cfg.noise_samples);
    std::vector<double> all;
    for (std::size_t i = 0; i < probe.size(); ++i) {
        NoiseSpec s = spec;
        s.seed = mix_seed(spec.seed, 0x5e45 + i);
        n.per_sample.push_back(loss_sensitivity(m, probe.sample(i), probe.labels[i], s, cfg.noise_trials));
        all.insert(all.end(), n.per_sample.back().deltas.begin(), n.per_sample.back().deltas.end());
    }
    const NoiseSensitivity s = summarize(std::move(all));
    n.delta_mean = s.mean;
    n.delta_std = s.std;
    n.delta_max = s.max;
    for (auto& p : n.per_sample) p.deltas.clear();
    return n;
}

struct PipelineReport {
    std::string config_digest;
    ModelEval clean;
    ModelEval poisoned;
    std::string surrogate_digest;
    std::vector<NoiseEval> noise;
    std::vector<ModelEval> defenses;
    std::vector<std::pair<double, ModelEval>> sweep;
    std::vector<std::pair<QMode, ModelEval>> parity;
    std::map<std::string, double> stage_seconds;
    std::vector<std::filesystem::path> artifacts;
};

/// Row layout shared by every robustness-style CSV.
inline std::vector<std::string> robustness_cells(const ModelEval& e) {
    std::vector<std::string> c{e.label, fmt(e.accuracy)};
    for (const RhoResult* r : {&e.robustness.fgsm, &e.robustness.pgd, &e.robustness.deepfool}) {
        c.push_back(fmt(r->rho));
        c.push_back(fmt(100.0 * r->rho));
        c.push_back(fmt(std::uint64_t(r->evaluated)));
        c.push_back(fmt(std::uint64_t(r->excluded_zero_norm + r->excluded_failed)));
    }
    c.push_back(fmt(e.tr_hth_mean));
    c.push_back(fmt(e.sigma_max_lb_mean));
    c.push_back(e.curvature_exact ? "exact" : "hvp");
    return c;
}

inline std::vector<std::string> robustness_columns(const std::string& first) {
    std::vector<std::string> c{first, "accuracy"};
    for (const char* a : {"fgsm", "pgd", "deepfool"}) {
        c.push_back(std::string("rho_") + a);
        c.push_back(std::string("rho_") + a + "_x100");
        c.push_back(std::string("evaluated_") + a);
        c.push_back(std::string("excluded_") + a);
    }
    c.push_back("tr_hth_mean");
    c.push_back("sigma_max_lb_mean");
    c.push_back("curvature_mode");
    return c;
}

/// Runs every configured stage and writes reports under cfg.output_dir.
/// Evaluation only ever sees victims retrained from scratch; the poisoner's
/// surrogate is dropped as soon as Δ is produced.
inline PipelineReport run_pipeline(const RunConfig& cfg, const std::function<void(const std::string&)>& log = {}) {
    cfg.validate();
    namespace fs = std::filesystem;
    fs::create_directories(cfg.output_dir);
    const fs::path dir = cfg.output_dir;
    const std::string digest = cfg.digest();
    PipelineReport rep;
    rep.config_digest = digest;

    KeyValues manifest = cfg.to_kv();
    manifest["manifest.config_digest"] = digest;
    manifest["manifest.seed.train_data"] = fmt(cfg.train_data_seed());
    manifest["manifest.seed.val_data"] = fmt(cfg.val_data_seed());
    manifest["manifest.seed.victim"] = fmt(cfg.victim_seed());
    manifest["manifest.seed.surrogate"] = fmt(cfg.surrogate_seed());
    auto write_manifest = [&](const std::string& status) {
        manifest["manifest.status"] = status;
        write_file(dir / "manifest.txt", serialize(manifest));
    };
    auto artifact = [&](const fs::path& p) {
        rep.artifacts.push_back(p);
        manifest["manifest.artifact." + p.filename().string()] = file_digest(p);
    };
    auto stage = [&](const std::string& name, const auto& body) {
        if (log) log(name);
        const auto t0 = std::chrono::steady_clock::now();
        try {
            body();
        } catch (const std::exception& e) {
            manifest["manifest.failed_stage"] = name;
            manifest["manifest.error"] = e.what();
            write_manifest("incomplete");
            throw StageError(name, e.what(), std::current_exception());
        }
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        rep.stage_seconds[name] = s;
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.3f", s);
        manifest["manifest.seconds." + name] = buf;
        write_manifest("incomplete");
    };
    write_manifest("incomplete");

    DataSplits data;
    ModelSpec spec;
    ModelState clean, poisoned;
    PerturbationSet delta;
    const TrainConfig tc = cfg.victim_train();

    stage("data", [&] {
        data = build_data(cfg);
        spec = cfg.model_spec(data.train.dim(), data.train.num_classes);
        spec.validate();
        manifest["manifest.data.train"] = data.train.provenance;
        manifest["manifest.data.val"] = data.val.provenance;
    });
    stage("clean", [&] {
        clean = train_model(spec, data.train, tc, cfg.victim_seed());
        save_checkpoint(clean, dir / "clean.cvx1");
        artifact(dir / "clean.cvx1");
        rep.clean = evaluate_model("clean", clean, data.val, cfg);
    });
    stage("poison", [&] {
        PoisonResult r = generate(data.train, spec, cfg.poison_config(), cfg.surrogate_seed());
        rep.surrogate_digest = hex64(fnv1a64(encode_checkpoint(r.surrogate)));
        delta = std::move(r.perturbations);
        save_perturbations(delta, dir / "perturbations.cvxp");
        artifact(dir / "perturbations.cvxp");
    });
    stage("victim", [&] {
        poisoned = train_model(spec, apply(data.train, delta), tc, cfg.victim_seed());
        save_checkpoint(poisoned, dir / "poisoned.cvx1");
        artifact(dir / "poisoned.cvx1");
        rep.poisoned = evaluate_model("poisoned", poisoned, data.val, cfg);
        CsvTable t("robustness", robustness_columns("model"), cfg.seed, digest);
        t.add(robustness_cells(rep.clean));
        t.add(robustness_cells(rep.poisoned));
        artifact(t.write(dir));
    });
    stage("noise", [&] {
        CsvTable t("noise", {"model", "noise", "param", "acc_clean", "acc_noisy", "acc_drop", "delta_mean", "delta_std", "delta_max"},
                   cfg.seed, digest);
        CsvTable per("loss_sensitivity", {"model", "noise", "sample", "delta_mean", "delta_std", "delta_max"}, cfg.seed, digest);
        for (std::size_t k = 0; k < cfg.noises.size(); ++k) {
            for (const auto& [label, m] : {std::pair{"clean", &clean}, std::pair{"poisoned", &poisoned}}) {
                NoiseEval n = evaluate_noise(label, *m, data.val, cfg.noise_spec(k), cfg);
                t.add({label, noise_name(n.spec.kind), fmt(n.spec.param), fmt(n.acc_clean), fmt(n.acc_noisy),
                       fmt(n.acc_clean - n.acc_noisy), fmt(n.delta_mean), fmt(n.delta_std), fmt(n.delta_max)});
                for (std::size_t i = 0; i < n.per_sample.size(); ++i) {
                    const auto& s = n.per_sample[i];
                    per.add({label, noise_name(n.spec.kind), fmt(std::uint64_t(i)), fmt(s.mean), fmt(s.std), fmt(s.max)});
                }
                rep.noise.push_back(std::move(n));
            }
        }
        artifact(t.write(dir));
        artifact(per.write(dir));
    });
    if (!cfg.defenses.empty()) {
        stage("defense", [&] {
            const Dataset pdata = apply(data.train, delta);
            CsvTable t("defense", robustness_columns("defense"), cfg.seed, digest);
            for (DefenseKind k : cfg.defenses) {
                const ModelState m = train_defended(pdata, spec, cfg.defense_config(k), cfg.victim_seed());
                rep.defenses.push_back(evaluate_model(defense_name(k), m, data.val, cfg));
                t.add(robustness_cells(rep.defenses.back()));
            }
            artifact(t.write(dir));
            if (cfg.emit_gnuplot) artifact(t.write_gnuplot(dir, "defense", "rho_deepfool"));
        });
    }
    if (!cfg.sweep_fractions.empty()) {
        stage("sweep", [&] {
            CsvTable t("fraction_sweep", robustness_columns("fraction"), cfg.seed, digest);
            for (double f : cfg.sweep_fractions) {
                ModelEval e;
                if (f == cfg.poison.poison_fraction) {
                    e = rep.poisoned;
                } else {
                    PoisonConfig pc = cfg.poison_config();
                    pc.poison_fraction = f;
                    const PerturbationSet d = generate(data.train, spec, pc, cfg.surrogate_seed()).perturbations;
                    e = evaluate_model("", train_model(spec, apply(data.train, d), tc, cfg.victim_seed()), data.val, cfg);
                }
                e.label = fmt(f);
                t.add(robustness_cells(e));
                rep.sweep.emplace_back(f, std::move(e));
            }
            artifact(t.write(dir));
            if (cfg.emit_gnuplot) artifact(t.write_gnuplot(dir, "fraction", "rho_deepfool"));
        });
    }
    if (cfg.parity && data.train.dim() <= cfg.poison.hessian_cap) {
        stage("parity", [&] {
            CsvTable t("qmode_parity", robustness_columns("q_mode"), cfg.seed, digest);
            for (QMode mode : {QMode::hvp, QMode::exact}) {
                ModelEval e;
                if (mode == cfg.poison.q_mode) {
                    e = rep.poisoned;
                } else {
                    PoisonConfig pc = cfg.poison_config();
                    pc.q_mode = mode;
                    const PerturbationSet d = generate(data.train, spec, pc, cfg.surrogate_seed()).perturbations;
                    e = evaluate_model("", train_model(spec, apply(data.train, d), tc, cfg.victim_seed()), data.val, cfg);
                }
                e.label = qmode_name(mode);
                t.add(robustness_cells(e));
                rep.parity.emplace_back(mode, std::move(e));
            }
            artifact(t.write(dir));
        });
    }
    if (cfg.emit_gnuplot) {
        stage("plots", [&] {
            CsvTable r("robustness", {}, cfg.seed, digest);
            artifact(r.write_gnuplot(dir, "model", "rho_deepfool"));
            CsvTable n("noise", {}, cfg.seed, digest);
            artifact(n.write_gnuplot(dir, "noise", "acc_drop"));
        });
    }
    manifest.erase("manifest.failed_stage");
    manifest.erase("manifest.error");
    write_manifest("complete");
    return rep;
}

}  // namespace dpa::harness
