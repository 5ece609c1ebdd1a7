#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "dpa/ad/derivatives.hpp"
#include "dpa/dataset.hpp"
#include "dpa/errors.hpp"
#include "dpa/models.hpp"
#include "dpa/rng.hpp"
#include "dpa/tensor.hpp"

namespace dpa {

enum class Attack { fgsm, pgd, deepfool };

inline const char* attack_name(Attack a) {
    switch (a) {
        case Attack::fgsm: return "fgsm";
        case Attack::pgd: return "pgd";
        case Attack::deepfool: return "deepfool";
    }
    return "?";
}

/// Geometric grid lo·ratio^k up to and including hi.
inline std::vector<double> geometric_grid(double lo, double hi, double ratio) {
    std::vector<double> g;
    for (double e = lo; e < hi; e *= ratio) g.push_back(e);
    g.push_back(hi);
    return g;
}

struct AttackConfig {
    std::vector<double> eps_grid = geometric_grid(1e-3, 1.0, 1.25);
    std::size_t pgd_steps = 20;
    double pgd_alpha = 0.0;  // 0 selects eps/4 per budget
    bool pgd_random_start = true;
    std::size_t deepfool_max_iter = 50;
    double deepfool_overshoot = 0.02;
    std::size_t bisection_rounds = 12;
    std::uint64_t seed = 0;

    void validate() const {
        if (eps_grid.empty()) throw ConfigError("attack: eps_grid must not be empty");
        for (std::size_t i = 0; i < eps_grid.size(); ++i) {
            if (!(eps_grid[i] >= 0.0)) throw ConfigError("attack: eps_grid entries must be non-negative");
            if (i > 0 && !(eps_grid[i] > eps_grid[i - 1])) throw ConfigError("attack: eps_grid must be strictly increasing");
        }
        if (pgd_steps == 0) throw ConfigError("attack: pgd_steps must be positive");
        if (pgd_alpha < 0.0) throw ConfigError("attack: pgd_alpha must be non-negative");
        if (deepfool_max_iter == 0) throw ConfigError("attack: deepfool_max_iter must be positive");
        if (!(deepfool_overshoot > 0.0)) throw ConfigError("attack: deepfool_overshoot must be positive");
    }
};

namespace detail {

inline double sign0(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

inline void project_linf(Tensor& xa, const Tensor& x, double eps) {
    for (std::size_t i = 0; i < xa.numel(); ++i) xa[i] = std::clamp(std::clamp(xa[i], x[i] - eps, x[i] + eps), 0.0, 1.0);
}

}  // namespace detail

/// x' = clamp(x + ε·sign(∇ₓL), 0, 1) with sign(0) = 0.
inline Tensor fgsm(const ModelState& m, const Tensor& x, std::size_t y, double eps) {
    if (eps < 0.0) throw DomainError("fgsm: eps must be non-negative");
    Tensor xa = x;
    if (eps == 0.0) return xa;
    const Tensor g = ad::grad_input(InputLoss(m, y), x);
    for (std::size_t i = 0; i < xa.numel(); ++i) xa[i] += eps * detail::sign0(g[i]);
    detail::project_linf(xa, x, eps);
    return xa;
}

/// Projected sign-gradient ascent in the ε-ball, optionally from a uniform
/// random start. Returns the iterate with the largest loss; with
/// `stop_on_flip` it returns the first iterate whose prediction differs
/// from y instead.
inline Tensor pgd(const ModelState& m, const Tensor& x, std::size_t y, double eps, const AttackConfig& cfg,
                  std::uint64_t seed = 0, bool stop_on_flip = false) {
    if (eps < 0.0) throw DomainError("pgd: eps must be non-negative");
    if (eps == 0.0) return x;
    const double alpha = cfg.pgd_alpha > 0.0 ? cfg.pgd_alpha : eps / 4.0;
    const InputLoss loss(m, y);
    Tensor xa = x;
    if (cfg.pgd_random_start) {
        Rng rng(seed);
        std::uniform_real_distribution<double> u(-eps, eps);
        for (double& v : xa.values()) v += u(rng);
        detail::project_linf(xa, x, eps);
    }
    Tensor best = xa;
    double best_loss = ad::evaluate(loss, xa);
    for (std::size_t s = 0; s < cfg.pgd_steps; ++s) {
        if (stop_on_flip && predict(m, xa) != y) return xa;
        const Tensor g = ad::grad_input(loss, xa);
        for (std::size_t i = 0; i < xa.numel(); ++i) xa[i] += alpha * detail::sign0(g[i]);
        detail::project_linf(xa, x, eps);
        const double l = ad::evaluate(loss, xa);
        if (l > best_loss) {
            best_loss = l;
            best = xa;
        }
    }
    return stop_on_flip ? xa : best;
}

struct DeepFoolResult {
    Tensor adversarial;  // clamp(x + (1+overshoot)·r)
    Tensor perturbation;  // r̂, before overshoot
    std::size_t iterations = 0;
    bool converged = false;
};

/// Multi-class DeepFool: at each iterate, linearize every competing logit
/// margin and step onto the nearest linearized boundary.
inline DeepFoolResult deepfool(const ModelState& m, const Tensor& x, const AttackConfig& cfg) {
    const std::size_t d = x.numel();
    const std::size_t k = m.spec.num_classes;
    const std::size_t k0 = predict(m, x);
    DeepFoolResult r;
    r.perturbation = Tensor(x.shape());
    r.adversarial = x;
    for (std::size_t it = 0; it < cfg.deepfool_max_iter; ++it) {
        const auto [z, jac] = logits_jacobian(m, r.adversarial);
        if (argmax(z.span()) != k0) {
            r.converged = true;
            break;
        }
        double best = std::numeric_limits<double>::infinity();
        std::size_t best_k = k;
        double best_f = 0.0, best_wn = 0.0;
        for (std::size_t c = 0; c < k; ++c) {
            if (c == k0) continue;
            double wn = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                const double w = jac.at(c, j) - jac.at(k0, j);
                wn += w * w;
            }
            const double f = z[c] - z[k0];
            const double dist = std::abs(f) / std::sqrt(wn);
            if (wn > 0.0 && dist < best) {
                best = dist;
                best_k = c;
                best_f = f;
                best_wn = wn;
            }
        }
        if (best_k == k) break;  // every competing margin is flat
        const double scale = std::abs(best_f) / best_wn;
        for (std::size_t j = 0; j < d; ++j) r.perturbation[j] += scale * (jac.at(best_k, j) - jac.at(k0, j));
        for (std::size_t j = 0; j < d; ++j)
            r.adversarial[j] = std::clamp(x[j] + (1.0 + cfg.deepfool_overshoot) * r.perturbation[j], 0.0, 1.0);
        r.iterations = it + 1;
    }
    if (!r.converged) r.converged = predict(m, r.adversarial) != k0;
    return r;
}

/// Whether attacking x at budget eps changes the prediction away from y.
inline bool attack_succeeds(Attack attack, const ModelState& m, const Tensor& x, std::size_t y, double eps,
                            const AttackConfig& cfg, std::uint64_t seed) {
    if (eps == 0.0) return predict(m, x) != y;
    const Tensor xa = attack == Attack::fgsm ? fgsm(m, x, y, eps) : pgd(m, x, y, eps, cfg, seed, true);
    return predict(m, xa) != y;
}

struct MinimalEps {
    double eps = 0.0;
    bool found = true;  // false: no grid budget succeeded, eps = +inf
};

/// Smallest successful L∞ budget: first successful grid entry, then
/// `bisection_rounds` halvings of the bracket below it. Misclassified inputs
/// give 0.
inline MinimalEps minimal_eps(Attack attack, const ModelState& m, const Tensor& x, std::size_t y,
                              const AttackConfig& cfg, std::uint64_t seed = 0) {
    if (attack == Attack::deepfool) throw ConfigError("minimal_eps: defined for fgsm and pgd only");
    cfg.validate();
    if (predict(m, x) != y) return {0.0, true};
    double lo = 0.0;
    for (double e : cfg.eps_grid) {
        if (!attack_succeeds(attack, m, x, y, e, cfg, seed)) {
            lo = e;
            continue;
        }
        double hi = e;
        for (std::size_t r = 0; r < cfg.bisection_rounds; ++r) {
            const double mid = 0.5 * (lo + hi);
            if (attack_succeeds(attack, m, x, y, mid, cfg, seed)) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        return {hi, true};
    }
    return {std::numeric_limits<double>::infinity(), false};
}

/// Norm order of ρ̂ per attack: ∞ for fgsm/pgd, 2 for deepfool.
inline double attack_norm(Attack a) { return a == Attack::deepfool ? 2.0 : std::numeric_limits<double>::infinity(); }

struct SampleRecord {
    std::size_t index = 0;
    double r_norm = 0.0;
    double x_norm = 0.0;
    bool excluded = false;
};

struct RhoResult {
    Attack attack = Attack::fgsm;
    double p = 0.0;
    double rho = 0.0;
    std::size_t evaluated = 0;
    std::size_t excluded_zero_norm = 0;
    std::size_t excluded_failed = 0;  // no grid budget succeeded, or DeepFool unconverged
    std::vector<SampleRecord> samples;
};

/// ρ̂ = mean over evaluable samples of ‖r̂(x)‖_p / ‖x‖_p.
inline RhoResult rho_hat(const ModelState& m, const Dataset& data, Attack attack, const AttackConfig& cfg) {
    cfg.validate();
    if (data.size() == 0) throw EvaluationError("rho_hat: empty dataset");
    RhoResult out;
    out.attack = attack;
    out.p = attack_norm(attack);
    double sum = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const Tensor x = data.sample(i);
        SampleRecord rec;
        rec.index = i;
        rec.x_norm = attack == Attack::deepfool ? norm2(x.span()) : norm_inf(x.span());
        if (rec.x_norm == 0.0) {
            rec.excluded = true;
            ++out.excluded_zero_norm;
            out.samples.push_back(rec);
            continue;
        }
        if (predict(m, x) != data.labels[i]) {
            rec.r_norm = 0.0;
        } else if (attack == Attack::deepfool) {
            const DeepFoolResult df = deepfool(m, x, cfg);
            rec.r_norm = norm2(df.perturbation.span());
            if (!df.converged) rec.excluded = true;
        } else {
            const MinimalEps me = minimal_eps(attack, m, x, data.labels[i], cfg, mix_seed(cfg.seed, i));
            rec.r_norm = me.eps;
            if (!me.found) rec.excluded = true;
        }
        if (rec.excluded) {
            ++out.excluded_failed;
        } else {
            sum += rec.r_norm / rec.x_norm;
            ++out.evaluated;
        }
        out.samples.push_back(rec);
    }
    if (out.evaluated == 0) throw EvaluationError("rho_hat: every sample was excluded");
    out.rho = sum / double(out.evaluated);
    return out;
}

struct RobustnessReport {
    double acc_clean = 0.0;
    RhoResult fgsm;
    RhoResult pgd;
    RhoResult deepfool;
};

inline RobustnessReport evaluate_robustness(const ModelState& m, const Dataset& data, const AttackConfig& cfg) {
    RobustnessReport r;
    r.acc_clean = accuracy(m, data);
    r.fgsm = rho_hat(m, data, Attack::fgsm, cfg);
    r.pgd = rho_hat(m, data, Attack::pgd, cfg);
    r.deepfool = rho_hat(m, data, Attack::deepfool, cfg);
    return r;
}

}  // namespace dpa
