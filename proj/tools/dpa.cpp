// Command-line front end: one subcommand per pipeline stage plus `pipeline`.
// Exit codes: 0 success, 2 configuration error, 3 numerical failure, 1 other.

#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "dpa/harness/config.hpp"
#include "dpa/harness/io.hpp"
#include "dpa/harness/pipeline.hpp"
#include "dpa/harness/report.hpp"

using namespace dpa;
using namespace dpa::harness;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out = "dpa-out";
};

void add_common(CLI::App* app, Common& c) {
    app->add_option("--config", c.config, "flat key = value config file");
    app->add_option("--seed", c.seed, "global seed, overrides the config");
    app->add_option("--out", c.out, "output directory")->capture_default_str();
}

RunConfig resolve(const Common& c) {
    RunConfig cfg = c.config.empty() ? RunConfig{} : load_run_config(c.config);
    if (c.seed) cfg.seed = *c.seed;
    cfg.output_dir = c.out;
    cfg.validate();
    std::filesystem::create_directories(cfg.output_dir);
    return cfg;
}

ModelState load_matching(const std::string& path, const DataSplits& data) {
    ModelState m = load_checkpoint(path);
    if (m.spec.input_dim != data.val.dim() || m.spec.num_classes < data.val.num_classes) {
        throw ConfigError("checkpoint '" + path + "' does not match the configured data");
    }
    return m;
}

void say(const std::filesystem::path& p) { std::cout << "wrote " << p.string() << "\n"; }

int cmd_gen_data(const Common& c) {
    const RunConfig cfg = resolve(c);
    const DataSplits data = build_data(cfg);
    for (const Dataset* d : {&data.train, &data.val}) {
        std::vector<std::string> cols{"index", "label"};
        for (std::size_t j = 0; j < d->dim(); ++j) cols.push_back("x" + std::to_string(j));
        CsvTable t(std::string("data_") + split_name(d->split), cols, cfg.seed, cfg.digest());
        for (std::size_t i = 0; i < d->size(); ++i) {
            std::vector<std::string> row{fmt(std::uint64_t(i)), fmt(std::uint64_t(d->labels[i]))};
            for (double v : d->row(i)) row.push_back(fmt(v));
            t.add(row);
        }
        say(t.write(cfg.output_dir));
    }
    return 0;
}

int cmd_train(const Common& c) {
    const RunConfig cfg = resolve(c);
    const DataSplits data = build_data(cfg);
    const ModelSpec spec = cfg.model_spec(data.train.dim(), data.train.num_classes);
    const ModelState m = train_model(spec, data.train, cfg.victim_train(), cfg.victim_seed());
    save_checkpoint(m, cfg.output_dir / "clean.cvx1");
    say(cfg.output_dir / "clean.cvx1");
    CsvTable t("train", {"model", "train_accuracy", "val_accuracy"}, cfg.seed, cfg.digest());
    t.add({"clean", fmt(accuracy(m, data.train)), fmt(accuracy(m, data.val))});
    say(t.write(cfg.output_dir));
    return 0;
}

int cmd_poison(const Common& c) {
    const RunConfig cfg = resolve(c);
    const DataSplits data = build_data(cfg);
    const ModelSpec spec = cfg.model_spec(data.train.dim(), data.train.num_classes);
    const PoisonResult r = generate(data.train, spec, cfg.poison_config(), cfg.surrogate_seed());
    save_perturbations(r.perturbations, cfg.output_dir / "perturbations.cvxp");
    say(cfg.output_dir / "perturbations.cvxp");
    CsvTable t("poison", {"outer_epoch", "train_loss", "mean_q"}, cfg.seed, cfg.digest());
    for (std::size_t e = 0; e < r.train_loss.size(); ++e) {
        t.add({fmt(std::uint64_t(e)), fmt(r.train_loss[e]), fmt(r.mean_q[e])});
    }
    say(t.write(cfg.output_dir));
    return 0;
}

int cmd_attack_eval(const Common& c, const std::string& model) {
    const RunConfig cfg = resolve(c);
    const DataSplits data = build_data(cfg);
    const ModelState m = load_matching(model, data);
    const ModelEval e = evaluate_model(std::filesystem::path(model).stem().string(), m, data.val, cfg);
    CsvTable t("attack_eval", robustness_columns("model"), cfg.seed, cfg.digest());
    t.add(robustness_cells(e));
    say(t.write(cfg.output_dir));
    return 0;
}

int cmd_noise_eval(const Common& c, const std::string& model) {
    const RunConfig cfg = resolve(c);
    const DataSplits data = build_data(cfg);
    const ModelState m = load_matching(model, data);
    const std::string label = std::filesystem::path(model).stem().string();
    CsvTable t("noise_eval", {"model", "noise", "param", "acc_clean", "acc_noisy", "acc_drop", "delta_mean", "delta_std", "delta_max"},
               cfg.seed, cfg.digest());
    for (std::size_t k = 0; k < cfg.noises.size(); ++k) {
        const NoiseEval n = evaluate_noise(label, m, data.val, cfg.noise_spec(k), cfg);
        t.add({label, noise_name(n.spec.kind), fmt(n.spec.param), fmt(n.acc_clean), fmt(n.acc_noisy),
               fmt(n.acc_clean - n.acc_noisy), fmt(n.delta_mean), fmt(n.delta_std), fmt(n.delta_max)});
    }
    say(t.write(cfg.output_dir));
    return 0;
}

int cmd_defend(const Common& c, const std::string& perturbations) {
    const RunConfig cfg = resolve(c);
    const DataSplits data = build_data(cfg);
    const ModelSpec spec = cfg.model_spec(data.train.dim(), data.train.num_classes);
    const PerturbationSet delta = load_perturbations(perturbations);
    const Dataset pdata = apply(data.train, delta);
    auto kinds = cfg.defenses;
    if (kinds.empty()) {
        kinds = {DefenseKind::none, DefenseKind::adversarial_training, DefenseKind::sam, DefenseKind::curvature_penalty};
    }
    CsvTable t("defense", robustness_columns("defense"), cfg.seed, cfg.digest());
    for (DefenseKind k : kinds) {
        const ModelState m = train_defended(pdata, spec, cfg.defense_config(k), cfg.victim_seed());
        const auto path = cfg.output_dir / (std::string("defense_") + defense_name(k) + ".cvx1");
        save_checkpoint(m, path);
        say(path);
        t.add(robustness_cells(evaluate_model(defense_name(k), m, data.val, cfg)));
    }
    say(t.write(cfg.output_dir));
    return 0;
}

int cmd_pipeline(const Common& c, bool gnuplot) {
    RunConfig cfg = resolve(c);
    if (gnuplot) cfg.emit_gnuplot = true;
    const PipelineReport rep = run_pipeline(cfg, [](const std::string& s) { std::cerr << "[stage] " << s << "\n"; });
    for (const auto& p : rep.artifacts) say(p);
    say(cfg.output_dir / "manifest.txt");
    return 0;
}

/// Maps an exception to its exit code, unwrapping stage failures.
int exit_code(std::exception_ptr e) {
    try {
        std::rethrow_exception(e);
    } catch (const StageError& s) {
        std::cerr << "error: " << s.what() << "\n";
        try {
            std::rethrow_exception(s.cause());
        } catch (const ConfigError&) {
            return 2;
        } catch (const NumericalError&) {
            return 3;
        } catch (...) {
            return 1;
        }
    } catch (const ConfigError& ce) {
        std::cerr << "config error: " << ce.what() << "\n";
        return 2;
    } catch (const NumericalError& ne) {
        std::cerr << "numerical failure: " << ne.what() << "\n";
        return 3;
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return 1;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"poisoning and robustness experiments"};
    app.require_subcommand(1);
    Common common;
    std::string model, perturbations;
    bool gnuplot = false;

    auto* gen = app.add_subcommand("gen-data", "materialize the configured train/validation splits as CSV");
    auto* train = app.add_subcommand("train", "train the clean victim and save clean.cvx1");
    auto* poison = app.add_subcommand("poison", "generate the perturbation set and save perturbations.cvxp");
    auto* attack = app.add_subcommand("attack-eval", "robustness ratios of a checkpoint on the validation split");
    auto* noise = app.add_subcommand("noise-eval", "noise sensitivity and noisy accuracy of a checkpoint");
    auto* defend = app.add_subcommand("defend", "retrain on poisoned data under each configured defense");
    auto* pipe = app.add_subcommand("pipeline", "run every stage and write CSV reports plus a manifest");
    for (auto* s : {gen, train, poison, attack, noise, defend, pipe}) add_common(s, common);
    attack->add_option("--model", model, "checkpoint to evaluate")->required();
    noise->add_option("--model", model, "checkpoint to evaluate")->required();
    defend->add_option("--perturbations", perturbations, "perturbation set to train on")->required();
    pipe->add_flag("--emit-gnuplot", gnuplot, "write gnuplot script stubs next to the CSVs");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (*gen) return cmd_gen_data(common);
        if (*train) return cmd_train(common);
        if (*poison) return cmd_poison(common);
        if (*attack) return cmd_attack_eval(common, model);
        if (*noise) return cmd_noise_eval(common, model);
        if (*defend) return cmd_defend(common, perturbations);
        if (*pipe) return cmd_pipeline(common, gnuplot);
    } catch (...) {
        return exit_code(std::current_exception());
    }
    return 0;
}
