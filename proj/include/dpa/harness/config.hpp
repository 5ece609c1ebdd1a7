#pragma once

// Flat key-value configuration: `key = value` lines, `#` comments.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "dpa/errors.hpp"
#include "dpa/evasion.hpp"
#include "dpa/harness/io.hpp"
#include "dpa/harness/synthetic.hpp"
#include "dpa/models.hpp"
#include "dpa/noise_defense.hpp"
#include "dpa/poisoner.hpp"
#include "dpa/rng.hpp"

namespace dpa::harness {

/// Keys in sorted order, so serialization is canonical.
using KeyValues = std::map<std::string, std::string>;

inline std::string_view trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline KeyValues parse_key_values(std::string_view text, const std::string& source = "config") {
    KeyValues kv;
    std::size_t line_no = 0;
    while (!text.empty()) {
        ++line_no;
        const auto nl = text.find('\n');
        std::string_view line = text.substr(0, nl);
        text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
        if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        const std::string where = source + ":" + std::to_string(line_no);
        if (eq == std::string_view::npos) throw ConfigError(where + ": expected 'key = value'");
        const std::string key(trim(line.substr(0, eq)));
        if (key.empty()) throw ConfigError(where + ": empty key");
        if (!kv.emplace(key, std::string(trim(line.substr(eq + 1)))).second) {
            throw ConfigError(where + ": duplicate key '" + key + "'");
        }
    }
    return kv;
}

inline KeyValues load_key_values(const std::filesystem::path& path) {
    std::string text;
    try {
        text = read_file(path);
    } catch (const FormatError&) {
        throw ConfigError("cannot read config '" + path.string() + "'");
    }
    return parse_key_values(text, path.string());
}

inline std::string serialize(const KeyValues& kv) {
    std::string out;
    for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
    return out;
}

// Value codecs. Doubles print in shortest round-trip form.

inline std::string fmt(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return {buf, r.ptr};
}
inline std::string fmt(std::uint64_t v) { return std::to_string(v); }
inline std::string fmt(bool v) { return v ? "true" : "false"; }

template <class T>
std::string fmt_list(const std::vector<T>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + fmt(v[i]);
    return out;
}
inline std::string fmt_list(const std::vector<std::string>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + v[i];
    return out;
}

inline double parse_double(const std::string& key, std::string_view s) {
    double v = 0.0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc{} || r.ptr != s.data() + s.size()) throw ConfigError(key + ": expected a number, got '" + std::string(s) + "'");
    return v;
}

inline std::uint64_t parse_u64(const std::string& key, std::string_view s) {
    std::uint64_t v = 0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc{} || r.ptr != s.data() + s.size()) {
        throw ConfigError(key + ": expected a non-negative integer, got '" + std::string(s) + "'");
    }
    return v;
}

inline bool parse_bool(const std::string& key, std::string_view s) {
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw ConfigError(key + ": expected true or false, got '" + std::string(s) + "'");
}

inline std::vector<std::string> split_list(std::string_view s) {
    std::vector<std::string> out;
    if (trim(s).empty()) return out;
    while (true) {
        const auto c = s.find(',');
        out.emplace_back(trim(s.substr(0, c)));
        if (c == std::string_view::npos) break;
        s = s.substr(c + 1);
    }
    return out;
}

/// Accepts an explicit list or `geom:lo:hi:ratio`.
inline std::vector<double> parse_grid(const std::string& key, std::string_view s) {
    std::vector<double> out;
    if (s.starts_with("geom:")) {
        std::string t(s.substr(5));
        std::replace(t.begin(), t.end(), ':', ',');
        const auto parts = split_list(t);
        if (parts.size() != 3) throw ConfigError(key + ": expected geom:lo:hi:ratio");
        const double lo = parse_double(key, parts[0]), hi = parse_double(key, parts[1]), ratio = parse_double(key, parts[2]);
        if (!(lo > 0.0 && hi > lo && ratio > 1.0)) throw ConfigError(key + ": geom grid needs 0 < lo < hi and ratio > 1");
        return geometric_grid(lo, hi, ratio);
    }
    for (const auto& p : split_list(s)) out.push_back(parse_double(key, p));
    return out;
}

enum class DataSource { synthetic, idx };

/// Everything a run needs. Seeds for every stage derive from `seed`.
struct RunConfig {
    std::uint64_t seed = 0;

    DataSource source = DataSource::synthetic;
    SyntheticKind data_kind = SyntheticKind::patches8x8;
    std::size_t n_train = 800;
    std::size_t n_val = 200;
    std::size_t classes = 4;
    SyntheticOptions synth;
    std::string idx_train_images, idx_train_labels, idx_val_images, idx_val_labels;

    Architecture architecture = Architecture::mlp;
    Activation activation = Activation::tanh;
    std::vector<std::uint64_t> hidden = {64};
    std::size_t conv_channels = 4;
    std::size_t conv_kernel = 3;

    TrainConfig train;
    PoisonConfig poison;
    AttackConfig attack;

    std::size_t attack_samples = 100;  // ρ̂ over the first n validation samples
    std::size_t noise_samples = 20;    // loss sensitivity and curvature samples
    std::size_t noise_trials = 1000;
    std::vector<NoiseSpec> noises = {NoiseSpec::defaults(NoiseKind::gaussian), NoiseSpec::defaults(NoiseKind::poisson),
                                     NoiseSpec::defaults(NoiseKind::speckle), NoiseSpec::defaults(NoiseKind::rayleigh)};

    std::vector<DefenseKind> defenses;
    DefenseConfig defense;

    std::vector<double> sweep_fractions;
    bool parity = true;
    bool emit_gnuplot = false;

    std::filesystem::path output_dir = "dpa-out";  // not part of the digest

    std::uint64_t stage_seed(std::uint64_t salt) const { return mix_seed(seed, salt); }
    std::uint64_t train_data_seed() const { return stage_seed(1); }
    std::uint64_t val_data_seed() const { return stage_seed(2); }
    std::uint64_t victim_seed() const { return stage_seed(3); }
    std::uint64_t surrogate_seed() const { return stage_seed(4); }

    /// Training config with the victim's shuffle stream.
    TrainConfig victim_train() const {
        TrainConfig t = train;
        t.shuffle_seed = stage_seed(5);
        return t;
    }

    /// Poison config with the surrogate's own shuffle and probe streams.
    PoisonConfig poison_config() const {
        PoisonConfig p = poison;
        p.train = train;
        p.train.shuffle_seed = stage_seed(6);
        p.probe_seed = stage_seed(7);
        return p;
    }

    AttackConfig attack_config() const {
        AttackConfig a = attack;
        a.seed = stage_seed(8);
        return a;
    }

    NoiseSpec noise_spec(std::size_t k) const {
        NoiseSpec s = noises.at(k);
        s.seed = stage_seed(16 + std::uint64_t(s.kind));
        return s;
    }

    DefenseConfig defense_config(DefenseKind kind) const {
        DefenseConfig d = defense;
        d.kind = kind;
        d.train = victim_train();
        d.probe_seed = stage_seed(9);
        return d;
    }

    ModelSpec model_spec(std::size_t input_dim, std::size_t num_classes) const {
        ModelSpec s;
        s.architecture = architecture;
        s.activation = activation;
        s.input_dim = input_dim;
        s.num_classes = num_classes;
        s.conv_channels = conv_channels;
        s.conv_kernel = conv_kernel;
        s.layer_widths.push_back(architecture == Architecture::mlp ? input_dim : 0);
        for (auto h : hidden) s.layer_widths.push_back(h);
        s.layer_widths.push_back(num_classes);
        if (architecture == Architecture::conv_mlp) {
            const std::size_t side = s.image_side();
            const std::size_t o = side >= conv_kernel ? side - conv_kernel + 1 : 0;
            s.layer_widths.front() = conv_channels * o * o;
        }
        return s;
    }

    void validate() const {
        if (source == DataSource::synthetic) {
            if (n_train < classes || n_val < classes) throw ConfigError("data: n_train and n_val must be at least classes");
        } else if (idx_train_images.empty() || idx_train_labels.empty() || idx_val_images.empty() || idx_val_labels.empty()) {
            throw ConfigError("data: idx source needs train and validation image/label paths");
        }
        if (attack_samples == 0) throw ConfigError("eval: attack_samples must be positive");
        if (noise_samples == 0 || noise_trials == 0) throw ConfigError("eval: noise_samples and noise_trials must be positive");
        train.validate();
        poison_config().validate();
        attack.validate();
        for (const auto& n : noises) n.validate();
        for (DefenseKind k : defenses) defense_config(k).validate();
        for (double f : sweep_fractions) {
            if (!(f >= 0.0 && f <= 1.0)) throw ConfigError("sweep: fractions must lie in [0,1]");
        }
    }

    KeyValues to_kv() const;
    static RunConfig from_kv(const KeyValues& kv);
    std::string digest() const { return hex64(fnv1a64(serialize(to_kv()))); }
};

inline const char* data_kind_name(const RunConfig& c) {
    return c.source == DataSource::idx ? "idx" : synthetic_name(c.data_kind);
}

inline KeyValues RunConfig::to_kv() const {
    KeyValues kv;
    kv["seed"] = fmt(seed);
    kv["data.kind"] = data_kind_name(*this);
    kv["data.n_train"] = fmt(std::uint64_t(n_train));
    kv["data.n_val"] = fmt(std::uint64_t(n_val));
    kv["data.classes"] = fmt(std::uint64_t(classes));
    kv["data.dim"] = fmt(std::uint64_t(synth.dim));
    kv["data.separation"] = fmt(synth.separation);
    kv["data.spread"] = fmt(synth.spread);
    kv["data.jitter"] = fmt(synth.jitter);
    kv["data.contrast"] = fmt(synth.contrast);
    kv["data.noise"] = fmt(synth.noise);
    kv["data.idx_train_images"] = idx_train_images;
    kv["data.idx_train_labels"] = idx_train_labels;
    kv["data.idx_val_images"] = idx_val_images;
    kv["data.idx_val_labels"] = idx_val_labels;
    kv["model.architecture"] = architecture_name(architecture);
    kv["model.activation"] = activation_name(activation);
    kv["model.hidden"] = fmt_list(hidden);
    kv["model.conv_channels"] = fmt(std::uint64_t(conv_channels));
    kv["model.conv_kernel"] = fmt(std::uint64_t(conv_kernel));
    kv["train.learning_rate"] = fmt(train.learning_rate);
    kv["train.momentum"] = fmt(train.momentum);
    kv["train.epochs"] = fmt(std::uint64_t(train.epochs));
    kv["train.batch_size"] = fmt(std::uint64_t(train.batch_size));
    kv["poison.epsilon"] = fmt(poison.epsilon);
    kv["poison.eta_delta"] = fmt(poison.eta_delta);
    kv["poison.inner_iters"] = fmt(std::uint64_t(poison.inner_iters));
    kv["poison.outer_epochs"] = fmt(std::uint64_t(poison.outer_epochs));
    kv["poison.q_mode"] = qmode_name(poison.q_mode);
    kv["poison.q_weight"] = fmt(poison.q_weight);
    kv["poison.fraction"] = fmt(poison.poison_fraction);
    kv["poison.hessian_cap"] = fmt(std::uint64_t(poison.hessian_cap));
    kv["attack.eps_grid"] = fmt_list(attack.eps_grid);
    kv["attack.pgd_steps"] = fmt(std::uint64_t(attack.pgd_steps));
    kv["attack.pgd_alpha"] = fmt(attack.pgd_alpha);
    kv["attack.pgd_random_start"] = fmt(attack.pgd_random_start);
    kv["attack.deepfool_max_iter"] = fmt(std::uint64_t(attack.deepfool_max_iter));
    kv["attack.deepfool_overshoot"] = fmt(attack.deepfool_overshoot);
    kv["attack.bisection_rounds"] = fmt(std::uint64_t(attack.bisection_rounds));
    kv["eval.attack_samples"] = fmt(std::uint64_t(attack_samples));
    kv["eval.noise_samples"] = fmt(std::uint64_t(noise_samples));
    kv["eval.noise_trials"] = fmt(std::uint64_t(noise_trials));
    std::vector<std::string> nk;
    for (const auto& n : noises) nk.push_back(std::string(noise_name(n.kind)) + ":" + fmt(n.param));
    kv["eval.noises"] = fmt_list(nk);
    std::vector<std::string> dk;
    for (DefenseKind k : defenses) dk.push_back(defense_name(k));
    kv["defense.kinds"] = fmt_list(dk);
    kv["defense.at_eps"] = fmt(defense.at_eps);
    kv["defense.at_steps"] = fmt(std::uint64_t(defense.at_steps));
    kv["defense.sam_rho"] = fmt(defense.sam_rho);
    kv["defense.curv_lambda"] = fmt(defense.curv_lambda);
    kv["sweep.fractions"] = fmt_list(sweep_fractions);
    kv["parity.enabled"] = fmt(parity);
    kv["output.gnuplot"] = fmt(emit_gnuplot);
    return kv;
}

/// Keys under `manifest.` are ignored, so a manifest is itself a config.
inline RunConfig RunConfig::from_kv(const KeyValues& kv) {
    RunConfig c;
    for (const auto& [key, value] : kv) {
        const std::string& k = key;
        const std::string_view v = value;
        auto sz = [&] { return std::size_t(parse_u64(k, v)); };
        auto num = [&] { return parse_double(k, v); };
        if (k.starts_with("manifest.")) continue;
        if (k == "seed") c.seed = parse_u64(k, v);
        else if (k == "data.kind") {
            if (v == "idx") c.source = DataSource::idx;
            else {
                c.source = DataSource::synthetic;
                c.data_kind = parse_synthetic(value);
            }
        }
        else if (k == "data.n_train") c.n_train = sz();
        else if (k == "data.n_val") c.n_val = sz();
        else if (k == "data.classes") c.classes = sz();
        else if (k == "data.dim") c.synth.dim = sz();
        else if (k == "data.separation") c.synth.separation = num();
        else if (k == "data.spread") c.synth.spread = num();
        else if (k == "data.jitter") c.synth.jitter = num();
        else if (k == "data.contrast") c.synth.contrast = num();
        else if (k == "data.noise") c.synth.noise = num();
        else if (k == "data.idx_train_images") c.idx_train_images = value;
        else if (k == "data.idx_train_labels") c.idx_train_labels = value;
        else if (k == "data.idx_val_images") c.idx_val_images = value;
        else if (k == "data.idx_val_labels") c.idx_val_labels = value;
        else if (k == "model.architecture") {
            if (v == "mlp") c.architecture = Architecture::mlp;
            else if (v == "conv-mlp") c.architecture = Architecture::conv_mlp;
            else throw ConfigError(k + ": expected mlp or conv-mlp");
        }
        else if (k == "model.activation") {
            if (v == "tanh") c.activation = Activation::tanh;
            else if (v == "relu") c.activation = Activation::relu;
            else throw ConfigError(k + ": expected tanh or relu");
        }
        else if (k == "model.hidden") {
            c.hidden.clear();
            for (const auto& p : split_list(v)) c.hidden.push_back(parse_u64(k, p));
        }
        else if (k == "model.conv_channels") c.conv_channels = sz();
        else if (k == "model.conv_kernel") c.conv_kernel = sz();
        else if (k == "train.learning_rate") c.train.learning_rate = num();
        else if (k == "train.momentum") c.train.momentum = num();
        else if (k == "train.epochs") c.train.epochs = sz();
        else if (k == "train.batch_size") c.train.batch_size = sz();
        else if (k == "poison.epsilon") c.poison.epsilon = num();
        else if (k == "poison.eta_delta") c.poison.eta_delta = num();
        else if (k == "poison.inner_iters") c.poison.inner_iters = sz();
        else if (k == "poison.outer_epochs") c.poison.outer_epochs = sz();
        else if (k == "poison.q_mode") {
            if (v == "exact") c.poison.q_mode = QMode::exact;
            else if (v == "hvp") c.poison.q_mode = QMode::hvp;
            else throw ConfigError(k + ": expected exact or hvp");
        }
        else if (k == "poison.q_weight") c.poison.q_weight = num();
        else if (k == "poison.fraction") c.poison.poison_fraction = num();
        else if (k == "poison.hessian_cap") c.poison.hessian_cap = sz();
        else if (k == "attack.eps_grid") c.attack.eps_grid = parse_grid(k, v);
        else if (k == "attack.pgd_steps") c.attack.pgd_steps = sz();
        else if (k == "attack.pgd_alpha") c.attack.pgd_alpha = num();
        else if (k == "attack.pgd_random_start") c.attack.pgd_random_start = parse_bool(k, v);
        else if (k == "attack.deepfool_max_iter") c.attack.deepfool_max_iter = sz();
        else if (k == "attack.deepfool_overshoot") c.attack.deepfool_overshoot = num();
        else if (k == "attack.bisection_rounds") c.attack.bisection_rounds = sz();
        else if (k == "eval.attack_samples") c.attack_samples = sz();
        else if (k == "eval.noise_samples") c.noise_samples = sz();
        else if (k == "eval.noise_trials") c.noise_trials = sz();
        else if (k == "eval.noises") {
            c.noises.clear();
            for (const auto& item : split_list(v)) {
                const auto colon = item.find(':');
                NoiseSpec s = NoiseSpec::defaults(parse_noise(item.substr(0, colon)));
                if (colon != std::string::npos) s.param = parse_double(k, item.substr(colon + 1));
                c.noises.push_back(s);
            }
        }
        else if (k == "defense.kinds") {
            c.defenses.clear();
            for (const auto& item : split_list(v)) c.defenses.push_back(parse_defense(item));
        }
        else if (k == "defense.at_eps") c.defense.at_eps = num();
        else if (k == "defense.at_steps") c.defense.at_steps = sz();
        else if (k == "defense.sam_rho") c.defense.sam_rho = num();
        else if (k == "defense.curv_lambda") c.defense.curv_lambda = num();
        else if (k == "sweep.fractions") {
            c.sweep_fractions.clear();
            for (const auto& p : split_list(v)) c.sweep_fractions.push_back(parse_double(k, p));
        }
        else if (k == "parity.enabled") c.parity = parse_bool(k, v);
        else if (k == "output.gnuplot") c.emit_gnuplot = parse_bool(k, v);
        else throw ConfigError("unknown config key '" + k + "'");
    }
    return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) { return RunConfig::from_kv(load_key_values(path)); }

}  // namespace dpa::harness
