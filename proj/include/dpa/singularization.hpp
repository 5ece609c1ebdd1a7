#pragma once

#include <cmath>
#include <cstdint>
#include <optional>

#include <Eigen/Eigenvalues>

#include "dpa/ad/derivatives.hpp"
#include "dpa/errors.hpp"
#include "dpa/rng.hpp"
#include "dpa/tensor.hpp"

namespace dpa {

enum class QMode { exact, hvp };

inline const char* qmode_name(QMode m) { return m == QMode::exact ? "exact" : "hvp"; }

/// Curvature summary of ℓ at one input.
///
/// In exact mode tr_hth is ‖H‖_F². In hvp mode only ‖Hv‖² is available and
/// tr_hth holds the unbiased estimate n·‖Hv‖² (E over uniform unit v of
/// n·‖Hv‖² is ‖H‖_F²); `tr_is_estimate` records which.
struct HessianStats {
    double tr_hth = 0.0;
    double hvp_sq_norm = 0.0;
    Tensor probe;
    double sigma_max_lb = 0.0;
    std::size_t n = 0;
    std::optional<double> sigma_max_exact;
    bool tr_is_estimate = false;
};

struct EigenRange {
    double min = 0.0;
    double max = 0.0;
};

/// Extreme eigenvalues of a symmetric [d, d] tensor.
inline EigenRange symmetric_eigen_range(const Tensor& h) {
    const auto d = static_cast<Eigen::Index>(h.shape().at(0));
    Eigen::MatrixXd m(d, d);
    for (Eigen::Index i = 0; i < d; ++i)
        for (Eigen::Index j = 0; j < d; ++j) m(i, j) = h.at(std::size_t(i), std::size_t(j));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(m, Eigen::EigenvaluesOnly);
    const auto& ev = solver.eigenvalues();
    return {ev(0), ev(d - 1)};
}

inline double frobenius_sq(const Tensor& h) {
    double s = 0.0;
    for (double v : h.values()) s += v * v;
    return s;
}

/// Q = tr(HᵀH) with the dense input-Hessian.
template <ad::ScalarFunction F>
double q_exact(const F& f, const Tensor& x, std::size_t cap = ad::kDefaultHessianCap) {
    return frobenius_sq(ad::full_hessian(f, x, {.cap = cap}));
}

inline Tensor normalized_probe(const Tensor& v) {
    const double n = norm2(v.span());
    if (!(n > 0.0) || !std::isfinite(n)) throw DomainError("q_hvp: probe vector must be non-zero");
    Tensor u = v;
    for (double& e : u.values()) e /= n;
    return u;
}

/// ‖H v‖² for a unit probe v. The probe is normalized before use; pass
/// `used_probe` to receive the normalized vector.
template <ad::ScalarFunction F>
double q_hvp(const F& f, const Tensor& x, const Tensor& v, Tensor* used_probe = nullptr) {
    const Tensor u = normalized_probe(v);
    const Tensor hv = ad::hvp(f, x, u);
    if (used_probe) *used_probe = u;
    const double n = norm2(hv.span());
    return n * n;
}

/// sqrt(tr(HᵀH)/n), a lower bound on σ_max(H).
inline double sigma_lower_bound(double tr_hth, std::size_t n) {
    if (tr_hth < 0.0 || !std::isfinite(tr_hth)) throw DomainError("sigma_lower_bound: tr(HᵀH) must be non-negative");
    if (n == 0) throw DomainError("sigma_lower_bound: order must be positive");
    return std::sqrt(tr_hth / double(n));
}

struct CurvatureRange {
    double lhs = 0.0;
    double mid = 0.0;
    double rhs = 0.0;
    double eig_min = 0.0;
    double eig_max = 0.0;
    bool convex = false;  // smallest eigenvalue positive
    bool holds = false;
};

/// Evaluates ∇ℓᵀh + λ_min/2‖h‖² ≤ ℓ(x+h) − ℓ(x) ≤ ∇ℓᵀh + λ_max/2‖h‖² with the
/// extreme eigenvalues of the symmetrized Hessian at x. For non-convex ℓ the
/// result is reported, not enforced.
template <ad::ScalarFunction F>
CurvatureRange curvature_range_check(const F& f, const Tensor& x, const Tensor& h, double radius = 1.0,
                                     std::size_t cap = ad::kDefaultHessianCap) {
    if (h.numel() != x.numel()) throw ShapeError("curvature_range_check: step size mismatch");
    const double hn = norm2(h.span());
    if (hn > radius) throw DomainError("curvature_range_check: ‖h‖ exceeds the configured radius");
    const Tensor hess = ad::full_hessian(f, x, {.cap = cap});
    const EigenRange er = symmetric_eigen_range(hess);
    const Tensor g = ad::grad_input(f, x);
    Tensor xh = x;
    for (std::size_t i = 0; i < x.numel(); ++i) xh[i] += h[i];
    CurvatureRange r;
    const double lin = dot(g.span(), h.span());
    r.eig_min = er.min;
    r.eig_max = er.max;
    r.lhs = lin + 0.5 * er.min * hn * hn;
    r.rhs = lin + 0.5 * er.max * hn * hn;
    r.mid = ad::evaluate(f, xh) - ad::evaluate(f, x);
    r.convex = er.min > 0.0;
    const double tol = 1e-6 * (1.0 + std::abs(r.mid));
    r.holds = r.lhs <= r.mid + tol && r.mid <= r.rhs + tol;
    return r;
}

/// Aggregates the curvature quantities at x. The probe is drawn uniformly
/// on the unit sphere from `probe_seed` in both modes.
template <ad::ScalarFunction F>
HessianStats hessian_stats(const F& f, const Tensor& x, std::uint64_t probe_seed, QMode mode,
                           std::size_t cap = ad::kDefaultHessianCap) {
    HessianStats s;
    s.n = x.numel();
    s.probe = random_unit_vector(s.n, probe_seed);
    if (mode == QMode::exact) {
        const Tensor hess = ad::full_hessian(f, x, {.cap = cap});
        s.tr_hth = frobenius_sq(hess);
        const EigenRange er = symmetric_eigen_range(hess);
        s.sigma_max_exact = std::max(std::abs(er.min), std::abs(er.max));
        double hv_sq = 0.0;
        for (std::size_t i = 0; i < s.n; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < s.n; ++j) acc += hess.at(i, j) * s.probe[j];
            hv_sq += acc * acc;
        }
        s.hvp_sq_norm = hv_sq;
    } else {
        s.hvp_sq_norm = q_hvp(f, x, s.probe);
        s.tr_hth = double(s.n) * s.hvp_sq_norm;
        s.tr_is_estimate = true;
    }
    s.sigma_max_lb = sigma_lower_bound(s.tr_hth, s.n);
    return s;
}

/// Value of Q and its input gradient, the ascent direction of the poisoner
/// and the penalty direction of the curvature defense.
///
/// hvp mode: Q = ‖Hv‖², ∇Q = 2·∇ₓ(uᵀHv) with u = Hv held fixed.
/// exact mode: Q = Σⱼ‖Heⱼ‖², ∇Q = 2·Σⱼ ∇ₓ(uⱼᵀHeⱼ) with uⱼ = Heⱼ.
struct QGradient {
    double q = 0.0;
    Tensor grad_q;
    Tensor grad_loss;
    double loss = 0.0;
};

template <ad::ScalarFunction F>
QGradient q_with_gradient(const F& f, const Tensor& x, QMode mode, const Tensor& probe,
                          std::size_t cap = ad::kDefaultHessianCap) {
    const std::size_t d = x.numel();
    QGradient out;
    out.grad_q = Tensor(x.shape());
    if (mode == QMode::hvp) {
        const Tensor v = normalized_probe(probe);
        const Tensor u = ad::hvp(f, x, v);
        const auto sweep = ad::third_order_sweep(f, x, u, v);
        const double n = norm2(sweep.hess_v.span());
        out.q = n * n;
        for (std::size_t i = 0; i < d; ++i) out.grad_q[i] = 2.0 * sweep.grad_mixed[i];
        out.grad_loss = sweep.grad;
        out.loss = sweep.value;
        return out;
    }
    if (d > cap) {
        throw CapacityError("q_with_gradient: input dimension " + std::to_string(d) + " exceeds cap " +
                            std::to_string(cap) + "; use hvp mode");
    }
    Tensor e(x.shape());
    for (std::size_t j = 0; j < d; ++j) {
        e[j] = 1.0;
        const Tensor u = ad::hvp(f, x, e);
        const auto sweep = ad::third_order_sweep(f, x, u, e);
        e[j] = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            out.q += sweep.hess_v[i] * sweep.hess_v[i];
            out.grad_q[i] += 2.0 * sweep.grad_mixed[i];
        }
        if (j == 0) {
            out.grad_loss = sweep.grad;
            out.loss = sweep.value;
        }
    }
    return out;
}

}  // namespace dpa
