#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "dpa/dataset.hpp"
#include "dpa/errors.hpp"
#include "dpa/models.hpp"
#include "dpa/rng.hpp"
#include "dpa/singularization.hpp"
#include "dpa/tensor.hpp"

namespace dpa {

struct PoisonConfig {
    double epsilon = 0.05;
    double eta_delta = 0.01;
    std::size_t inner_iters = 1;
    std::size_t outer_epochs = 10;
    QMode q_mode = QMode::hvp;
    double q_weight = 1.0;
    double poison_fraction = 1.0;
    std::uint64_t probe_seed = 0;
    std::size_t hessian_cap = ad::kDefaultHessianCap;
    TrainConfig train;

    void validate() const {
        if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw ConfigError("poison: epsilon must be non-negative");
        if (!(eta_delta > 0.0)) throw ConfigError("poison: eta_delta must be positive");
        if (inner_iters == 0) throw ConfigError("poison: inner_iters must be positive");
        if (outer_epochs == 0) throw ConfigError("poison: outer_epochs must be positive");
        if (!(q_weight > 0.0)) throw ConfigError("poison: q_weight must be positive");
        if (!(poison_fraction >= 0.0 && poison_fraction <= 1.0)) {
            throw ConfigError("poison: poison_fraction must lie in [0,1]");
        }
        train.validate();
    }
};

/// One δ per training index, zero outside `poisoned_indices`.
struct PerturbationSet {
    Tensor deltas;  // [N, d]
    double epsilon = 0.0;
    std::vector<std::size_t> poisoned_indices;  // sorted

    std::size_t size() const { return deltas.rank() == 2 ? deltas.shape()[0] : 0; }

    static PerturbationSet zeros(std::size_t n, std::size_t d, double epsilon) {
        PerturbationSet p;
        p.deltas = Tensor({n, d});
        p.epsilon = epsilon;
        return p;
    }

    bool is_poisoned(std::size_t i) const {
        return std::binary_search(poisoned_indices.begin(), poisoned_indices.end(), i);
    }

    double max_abs() const { return norm_inf(deltas.span()); }
};

inline void check_aligned(const Dataset& data, const PerturbationSet& delta) {
    if (delta.deltas.rank() != 2 || delta.deltas.shape()[0] != data.size() || delta.deltas.shape()[1] != data.dim()) {
        throw IndexError("perturbation set " + shape_string(delta.deltas.shape()) + " is not aligned with dataset of " +
                         std::to_string(data.size()) + "x" + std::to_string(data.dim()));
    }
    for (std::size_t i : delta.poisoned_indices) {
        if (i >= data.size()) throw IndexError("poisoned index " + std::to_string(i) + " out of range");
    }
}

/// Indices selected for poisoning: the first ⌊fraction·N⌋ of a seeded
/// permutation, returned sorted.
inline std::vector<std::size_t> choose_poisoned(std::size_t n, double fraction, std::uint64_t seed) {
    const auto count = static_cast<std::size_t>(std::floor(fraction * double(n)));
    auto order = shuffled_indices(n, mix_seed(seed, 0x5045));
    order.resize(std::min(count, n));
    std::sort(order.begin(), order.end());
    return order;
}

/// Projection onto {‖δ‖∞ ≤ ε} followed by the pixel box x+δ ∈ [0,1].
inline void project_delta(std::span<double> delta, std::span<const double> x, double epsilon) {
    for (std::size_t k = 0; k < delta.size(); ++k) {
        double d = std::clamp(delta[k], -epsilon, epsilon);
        const double v = x[k] + d;
        if (v > 1.0 || v < 0.0) d = std::clamp(v, 0.0, 1.0) - x[k];
        delta[k] = d;
    }
}

/// x̂ᵢ = clamp(xᵢ + δᵢ, 0, 1); labels unchanged.
inline Dataset apply(const Dataset& data, const PerturbationSet& delta) {
    check_aligned(data, delta);
    Dataset out = data;
    auto& v = out.inputs.values();
    for (std::size_t k = 0; k < v.size(); ++k) v[k] = std::clamp(v[k] + delta.deltas[k], 0.0, 1.0);
    out.provenance = data.provenance + "+poisoned";
    return out;
}

inline Tensor poisoned_sample(const Dataset& data, const PerturbationSet& delta, std::size_t i) {
    Tensor x = data.sample(i);
    const auto d = delta.deltas.row(i);
    for (std::size_t k = 0; k < x.numel(); ++k) x[k] = std::clamp(x[k] + d[k], 0.0, 1.0);
    return x;
}

/// One epoch of θ ← θ − η·E[∇θ(L(x) + L(x+δ))].
inline EpochResult train_phase_epoch(const ModelState& m, const Dataset& data, const PerturbationSet& delta,
                                     const PoisonConfig& cfg, std::size_t epoch) {
    check_aligned(data, delta);
    return train_epoch(m, data.size(), cfg.train, epoch, [&](const ModelState& s, std::size_t i, std::span<double> g) {
        const double clean = accumulate_param_gradient(s, data.row(i), data.labels[i], g);
        const Tensor xh = poisoned_sample(data, delta, i);
        return clean + accumulate_param_gradient(s, xh.span(), data.labels[i], g);
    });
}

inline ModelState train_phase(const ModelState& m, const Dataset& data, const PerturbationSet& delta,
                              const PoisonConfig& cfg, std::size_t epoch = 0) {
    return train_phase_epoch(m, data, delta, cfg, epoch).model;
}

struct PerturbStats {
    double mean_loss = 0.0;
    double mean_q = 0.0;
};

/// One sweep of δ ← Π(δ − η_δ·∇ₓ̂(L − λ_q·Q)) over the poisoned indices with
/// θ frozen. Each δᵢ steps on the gradient of its own term; the probe for the
/// hvp relaxation is redrawn for every minibatch. `sweep` salts the batch
/// order and probe seeds.
inline PerturbationSet perturb_phase(const ModelState& m, const Dataset& data, const PerturbationSet& delta,
                                     const PoisonConfig& cfg, std::size_t sweep = 0, PerturbStats* stats = nullptr) {
    check_aligned(data, delta);
    PerturbationSet next = delta;
    next.epsilon = cfg.epsilon;
    const std::size_t n = data.size();
    const std::size_t bs = std::min(cfg.train.batch_size, n);
    const auto order = shuffled_indices(n, mix_seed(cfg.train.shuffle_seed, 0x10000 + sweep));
    double loss_sum = 0.0, q_sum = 0.0;
    std::size_t count = 0;
    for (std::size_t start = 0, batch = 0; start < n; start += bs, ++batch) {
        const std::size_t end = std::min(n, start + bs);
        const Tensor probe = random_unit_vector(data.dim(), mix_seed(cfg.probe_seed, (sweep << 24) + batch));
        for (std::size_t k = start; k < end; ++k) {
            const std::size_t i = order[k];
            if (!next.is_poisoned(i)) continue;
            const Tensor xh = poisoned_sample(data, next, i);
            const InputLoss loss(m, data.labels[i]);
            QGradient qg;
            try {
                qg = q_with_gradient(loss, xh, cfg.q_mode, probe, cfg.hessian_cap);
            } catch (const NumericalError& e) {
                throw NumericalError("perturb_phase: sample " + std::to_string(i) + ": " + e.what(), i);
            }
            auto d = next.deltas.row(i);
            for (std::size_t j = 0; j < d.size(); ++j) {
                const double g = qg.grad_loss[j] - cfg.q_weight * qg.grad_q[j];
                if (!std::isfinite(g)) {
                    throw NumericalError("perturb_phase: sample " + std::to_string(i) + ": non-finite gradient", i);
                }
                d[j] -= cfg.eta_delta * g;
            }
            project_delta(d, data.row(i), cfg.epsilon);
            loss_sum += qg.loss;
            q_sum += qg.q;
            ++count;
        }
    }
    if (stats && count) {
        stats->mean_loss = loss_sum / double(count);
        stats->mean_q = q_sum / double(count);
    }
    return next;
}

struct PoisonResult {
    PerturbationSet perturbations;
    ModelState surrogate;
    std::vector<double> train_loss;  // per outer epoch
    std::vector<double> mean_q;      // after each outer epoch's last sweep
};

/// Alternates one training epoch on L(x)+L(x̂) with `inner_iters` perturbation
/// sweeps, for `outer_epochs` rounds, starting from δ = 0.
inline PoisonResult generate(const Dataset& data, const ModelSpec& spec, const PoisonConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    data.validate();
    PoisonResult r{PerturbationSet::zeros(data.size(), data.dim(), cfg.epsilon), init_model(spec, seed), {}, {}};
    r.perturbations.poisoned_indices = choose_poisoned(data.size(), cfg.poison_fraction, seed);
    std::size_t sweep = 0;
    for (std::size_t outer = 0; outer < cfg.outer_epochs; ++outer) {
        EpochResult e = train_phase_epoch(r.surrogate, data, r.perturbations, cfg, outer);
        r.surrogate = std::move(e.model);
        r.train_loss.push_back(e.mean_loss);
        if (r.perturbations.poisoned_indices.empty()) continue;
        PerturbStats stats;
        for (std::size_t j = 0; j < cfg.inner_iters; ++j) {
            r.perturbations = perturb_phase(r.surrogate, data, r.perturbations, cfg, sweep++, &stats);
        }
        r.mean_q.push_back(stats.mean_q);
    }
    return r;
}

}  // namespace dpa
