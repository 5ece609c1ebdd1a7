#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "dpa/ad/derivatives.hpp"
#include "dpa/dataset.hpp"
#include "dpa/errors.hpp"
#include "dpa/evasion.hpp"
#include "dpa/models.hpp"
#include "dpa/rng.hpp"
#include "dpa/tensor.hpp"

namespace dpa {

enum class NoiseKind { gaussian, poisson, speckle, rayleigh };

inline const char* noise_name(NoiseKind k) {
    switch (k) {
        case NoiseKind::gaussian: return "gaussian";
        case NoiseKind::poisson: return "poisson";
        case NoiseKind::speckle: return "speckle";
        case NoiseKind::rayleigh: return "rayleigh";
    }
    return "?";
}

inline NoiseKind parse_noise(const std::string& s) {
    if (s == "gaussian") return NoiseKind::gaussian;
    if (s == "poisson") return NoiseKind::poisson;
    if (s == "speckle") return NoiseKind::speckle;
    if (s == "rayleigh") return NoiseKind::rayleigh;
    throw ConfigError("unknown noise kind '" + s + "'");
}

/// param: σ (gaussian, speckle), photon scale s (poisson), Rayleigh scale.
struct NoiseSpec {
    NoiseKind kind = NoiseKind::gaussian;
    double param = 0.1;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(param >= 0.0) || !std::isfinite(param)) throw ConfigError("noise: param must be non-negative");
        if (kind == NoiseKind::poisson && !(param > 0.0)) throw ConfigError("noise: poisson photon scale must be positive");
    }

    static NoiseSpec defaults(NoiseKind k) {
        return {k, k == NoiseKind::poisson ? 64.0 : 0.1, 0};
    }
};

/// Pre-clamp noisy value of one entry.
inline double noisy_value(double x, NoiseKind kind, double param, Rng& rng) {
    switch (kind) {
        case NoiseKind::gaussian: {
            if (param == 0.0) return x;
            return x + std::normal_distribution<double>(0.0, param)(rng);
        }
        case NoiseKind::poisson: {
            const double lambda = std::max(0.0, x * param);
            if (lambda == 0.0) return 0.0;
            return double(std::poisson_distribution<long long>(lambda)(rng)) / param;
        }
        case NoiseKind::speckle: {
            if (param == 0.0) return x;
            return x * (1.0 + std::normal_distribution<double>(0.0, param)(rng));
        }
        case NoiseKind::rayleigh: {
            if (param == 0.0) return x;
            const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
            const double r = param * std::sqrt(-2.0 * std::log1p(-u));
            return x + r - param * std::sqrt(std::numbers::pi / 2.0);
        }
    }
    return x;
}

/// Noisy copy of x clamped to [0,1], deterministic under spec.seed.
inline Tensor add_noise(const Tensor& x, const NoiseSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    Tensor out = x;
    for (double& v : out.values()) v = std::clamp(noisy_value(v, spec.kind, spec.param, rng), 0.0, 1.0);
    return out;
}

struct NoiseSensitivity {
    std::vector<double> deltas;  // ℓ(x_noisy) − ℓ(x), one per trial
    double mean = 0.0;
    double std = 0.0;
    double max = 0.0;
};

inline NoiseSensitivity summarize(std::vector<double> deltas) {
    NoiseSensitivity s;
    s.deltas = std::move(deltas);
    if (s.deltas.empty()) return s;
    double sum = 0.0;
    s.max = s.deltas.front();
    for (double d : s.deltas) {
        sum += d;
        s.max = std::max(s.max, d);
    }
    s.mean = sum / double(s.deltas.size());
    double var = 0.0;
    for (double d : s.deltas) var += (d - s.mean) * (d - s.mean);
    s.std = std::sqrt(var / double(s.deltas.size()));
    return s;
}

/// Δℓ over `trials` noisy draws; draw t uses seed mix_seed(spec.seed, t).
template <ad::ScalarFunction F>
NoiseSensitivity loss_sensitivity(const F& f, const Tensor& x, const NoiseSpec& spec, std::size_t trials) {
    if (trials == 0) throw ConfigError("loss_sensitivity: trials must be positive");
    const double base = ad::evaluate(f, x);
    std::vector<double> deltas(trials);
    NoiseSpec s = spec;
    for (std::size_t t = 0; t < trials; ++t) {
        s.seed = mix_seed(spec.seed, t);
        deltas[t] = ad::evaluate(f, add_noise(x, s)) - base;
    }
    return summarize(std::move(deltas));
}

inline NoiseSensitivity loss_sensitivity(const ModelState& m, const Tensor& x, std::size_t y, const NoiseSpec& spec,
                                         std::size_t trials) {
    return loss_sensitivity(InputLoss(m, y), x, spec, trials);
}

/// Accuracy over one noisy copy per sample (sample i drawn with
/// mix_seed(spec.seed, i)).
inline double noisy_accuracy(const ModelState& m, const Dataset& data, const NoiseSpec& spec) {
    if (data.size() == 0) throw EvaluationError("noisy_accuracy: empty dataset");
    std::size_t correct = 0;
    NoiseSpec s = spec;
    for (std::size_t i = 0; i < data.size(); ++i) {
        s.seed = mix_seed(spec.seed, i);
        if (predict(m, add_noise(data.sample(i), s)) == data.labels[i]) ++correct;
    }
    return double(correct) / double(data.size());
}

enum class DefenseKind { none, adversarial_training, sam, curvature_penalty };

inline const char* defense_name(DefenseKind k) {
    switch (k) {
        case DefenseKind::none: return "none";
        case DefenseKind::adversarial_training: return "adversarial_training";
        case DefenseKind::sam: return "sam";
        case DefenseKind::curvature_penalty: return "curvature_penalty";
    }
    return "?";
}

inline DefenseKind parse_defense(const std::string& s) {
    if (s == "none") return DefenseKind::none;
    if (s == "adversarial_training" || s == "at") return DefenseKind::adversarial_training;
    if (s == "sam") return DefenseKind::sam;
    if (s == "curvature_penalty" || s == "curvature") return DefenseKind::curvature_penalty;
    throw ConfigError("unknown defense kind '" + s + "'");
}

struct DefenseConfig {
    DefenseKind kind = DefenseKind::none;
    double at_eps = 0.05;
    std::size_t at_steps = 5;
    double sam_rho = 0.05;
    double curv_lambda = 1.0;
    std::uint64_t probe_seed = 0;
    TrainConfig train;

    void validate() const {
        train.validate();
        if (kind == DefenseKind::adversarial_training) {
            if (!(at_eps > 0.0)) throw ConfigError("defense: at_eps must be positive");
            if (at_steps == 0) throw ConfigError("defense: at_steps must be positive");
        }
        if (kind == DefenseKind::sam && !(sam_rho > 0.0)) throw ConfigError("defense: sam_rho must be positive");
        if (kind == DefenseKind::curvature_penalty && !(curv_lambda >= 0.0)) {
            throw ConfigError("defense: curv_lambda must be non-negative");
        }
    }
};

struct CurvatureTerm {
    double loss = 0.0;
    double q = 0.0;
};

/// Adds ∇θ[ℓ + λ·‖H_x v‖²] at one sample into `grad`, H_x the input-Hessian
/// of ℓ. One dual pass gives u = H_x v; a hyperdual pass with the input
/// seeded x + ε₁u + ε₂v and θ as leaves yields ∇θ(uᵀH_x v) in the ε₁ε₂ part
/// of the parameter adjoints, and ∇θ‖H_x v‖² = 2∇θ(uᵀH_x v).
inline CurvatureTerm accumulate_curvature_gradient(const ModelState& m, std::span<const double> x, std::size_t y,
                                                   const Tensor& v, double lambda, std::span<double> grad) {
    const Tensor xt = Tensor::vector(std::vector<double>(x.begin(), x.end()));
    const InputLoss f(m, y);
    const Tensor u = ad::hvp(f, xt, v);
    using D = ad::Dual<double>;
    ad::Tape<ad::HyperDual> tape;
    const ParamVars p = bind_params(tape, m, true);
    std::vector<ad::HyperDual> seeded(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) seeded[i] = ad::HyperDual(D(x[i], u[i]), D(v[i], 0.0));
    ad::Var xv = tape.input(std::move(seeded), Shape{x.size()});
    ad::Var loss = tape.xent(record_logits(tape, m.spec, p, xv), y);
    tape.backward(loss);
    for (std::size_t b = 0; b < p.blocks.size(); ++b) {
        const auto adj = tape.adjoint(p.blocks[b]);
        for (std::size_t i = 0; i < adj.size(); ++i) {
            grad[p.offsets[b] + i] += adj[i].re.re + lambda * 2.0 * adj[i].eps.eps;
        }
    }
    const double n = norm2(u.span());
    return {tape.value(loss)[0].re.re, n * n};
}

/// Training under one of the defenses; kind=none is plain
/// train_model with the same seed path.
inline ModelState train_defended(const Dataset& data, const ModelSpec& spec, const DefenseConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    data.validate();
    const TrainConfig& tc = cfg.train;
    if (cfg.kind == DefenseKind::none) return train_model(spec, data, tc, seed);
    if (tc.batch_size > data.size()) throw ConfigError("train: batch_size exceeds dataset size");

    ModelState m = init_model(spec, seed);
    const std::size_t n = data.size();
    const std::size_t np = spec.param_count();
    AttackConfig at;
    at.pgd_steps = cfg.at_steps;

    for (std::size_t e = 0; e < tc.epochs; ++e) {
        const auto order = shuffled_indices(n, mix_seed(tc.shuffle_seed, e));
        for (std::size_t start = 0, batch = 0; start < n; start += tc.batch_size, ++batch) {
            const std::size_t end = std::min(n, start + tc.batch_size);
            const double inv = 1.0 / double(end - start);
            Tensor grad({np});
            switch (cfg.kind) {
                case DefenseKind::adversarial_training: {
                    for (std::size_t k = start; k < end; ++k) {
                        const std::size_t i = order[k];
                        const Tensor xa = pgd(m, data.sample(i), data.labels[i], cfg.at_eps, at,
                                              mix_seed(seed, (e << 32) + i));
                        accumulate_param_gradient(m, xa.span(), data.labels[i], grad.span());
                    }
                    break;
                }
                case DefenseKind::sam: {
                    Tensor g0({np});
                    for (std::size_t k = start; k < end; ++k) {
                        accumulate_param_gradient(m, data.row(order[k]), data.labels[order[k]], g0.span());
                    }
                    for (double& g : g0.values()) g *= inv;
                    const double gn = norm2(g0.span());
                    ModelState probe = m;
                    if (gn > 0.0) {
                        for (std::size_t i = 0; i < np; ++i) probe.params[i] += cfg.sam_rho * g0[i] / gn;
                    }
                    for (std::size_t k = start; k < end; ++k) {
                        accumulate_param_gradient(probe, data.row(order[k]), data.labels[order[k]], grad.span());
                    }
                    break;
                }
                case DefenseKind::curvature_penalty: {
                    const Tensor v =
                        random_unit_vector(spec.input_dim, mix_seed(cfg.probe_seed, (e << 32) + batch));
                    for (std::size_t k = start; k < end; ++k) {
                        const std::size_t i = order[k];
                        if (cfg.curv_lambda == 0.0) {
                            accumulate_param_gradient(m, data.row(i), data.labels[i], grad.span());
                        } else {
                            accumulate_curvature_gradient(m, data.row(i), data.labels[i], v, cfg.curv_lambda,
                                                          grad.span());
                        }
                    }
                    break;
                }
                case DefenseKind::none: break;
            }
            for (double& g : grad.values()) g *= inv;
            m = sgd_step(m, grad, tc);
        }
    }
    return m;
}

}  // namespace dpa
