#pragma once

#include <concepts>
#include <cstddef>
#include <vector>

#include "dpa/ad/dual.hpp"
#include "dpa/ad/tape.hpp"
#include "dpa/errors.hpp"
#include "dpa/tensor.hpp"

namespace dpa::ad {

/// Largest input dimension for which a dense Hessian is formed.
inline constexpr std::size_t kDefaultHessianCap = 256;

/// A loss ℓ(x) that can be recorded on a tape of any supported scalar type.
/// `f(tape, x)` receives the input leaf and returns a scalar node; the same
/// recording must be produced for the same input (no hidden state).
template <class F>
concept ScalarFunction = requires(const F& f, Tape<double>& t0, Tape<Dual<double>>& t1, Tape<HyperDual>& t2, Var x) {
    { f.input_shape() } -> std::convertible_to<Shape>;
    { f(t0, x) } -> std::same_as<Var>;
    { f(t1, x) } -> std::same_as<Var>;
    { f(t2, x) } -> std::same_as<Var>;
};

namespace detail {

template <ScalarFunction F>
void check_input(const F& f, const Tensor& x, const char* what) {
    const Shape expected = f.input_shape();
    if (shape_numel(expected) != x.numel() || (x.rank() != expected.size() && x.rank() != 1)) {
        throw ShapeError(std::string(what) + ": expected input shape " + shape_string(expected) + ", got " +
                         shape_string(x.shape()));
    }
}

template <ScalarFunction F>
Var record_scalar(const F& f, auto& tape, Var x) {
    Var out = f(tape, x);
    if (tape.value(out).size() != 1) throw ShapeError("scalar function returned a non-scalar node");
    return out;
}

inline Tensor reshape_like(const Tensor& like, std::vector<double> data) { return Tensor(like.shape(), std::move(data)); }

}  // namespace detail

template <ScalarFunction F>
double evaluate(const F& f, const Tensor& x) {
    detail::check_input(f, x, "evaluate");
    Tape<double> tape;
    Var xv = tape.constant(x.span(), x.shape());
    return tape.value(detail::record_scalar(f, tape, xv))[0];
}

/// ∇ₓ f(x).
template <ScalarFunction F>
Tensor grad_input(const F& f, const Tensor& x) {
    detail::check_input(f, x, "grad_input");
    Tape<double> tape;
    Var xv = tape.input(x.span(), x.shape());
    tape.backward(detail::record_scalar(f, tape, xv));
    return detail::reshape_like(x, tape.adjoint(xv));
}

/// Hessian-vector product H·v, H = ∇²ₓ f(x), by a reverse sweep in dual
/// arithmetic with the input seeded along v. Memory is linear in the size of
/// the recording; H is never formed.
template <ScalarFunction F>
Tensor hvp(const F& f, const Tensor& x, const Tensor& v) {
    detail::check_input(f, x, "hvp");
    if (v.numel() != x.numel()) {
        throw ShapeError("hvp: probe shape " + shape_string(v.shape()) + " does not match input " +
                         shape_string(x.shape()));
    }
    using D = Dual<double>;
    Tape<D> tape;
    std::vector<D> seeded(x.numel());
    for (std::size_t i = 0; i < x.numel(); ++i) seeded[i] = D(x[i], v[i]);
    Var xv = tape.input(std::move(seeded), x.shape());
    tape.backward(detail::record_scalar(f, tape, xv));
    const auto adj = tape.adjoint(xv);
    std::vector<double> out(adj.size());
    for (std::size_t i = 0; i < adj.size(); ++i) out[i] = adj[i].eps;
    return detail::reshape_like(v, std::move(out));
}

/// Gradient and H·v from one dual sweep.
template <ScalarFunction F>
std::pair<Tensor, Tensor> grad_and_hvp(const F& f, const Tensor& x, const Tensor& v) {
    detail::check_input(f, x, "grad_and_hvp");
    using D = Dual<double>;
    Tape<D> tape;
    std::vector<D> seeded(x.numel());
    for (std::size_t i = 0; i < x.numel(); ++i) seeded[i] = D(x[i], v[i]);
    Var xv = tape.input(std::move(seeded), x.shape());
    tape.backward(detail::record_scalar(f, tape, xv));
    const auto adj = tape.adjoint(xv);
    std::vector<double> g(adj.size()), hv(adj.size());
    for (std::size_t i = 0; i < adj.size(); ++i) {
        g[i] = adj[i].re;
        hv[i] = adj[i].eps;
    }
    return {detail::reshape_like(x, std::move(g)), detail::reshape_like(x, std::move(hv))};
}

/// Result of one hyper-dual sweep at x seeded with directions u and v.
struct ThirdOrderSweep {
    double value = 0.0;
    Tensor grad;          // ∇f(x)
    Tensor hess_u;        // H u
    Tensor hess_v;        // H v
    Tensor grad_mixed;    // ∇ₓ (uᵀ H v), i.e. the third derivative contracted with u and v
};

/// One reverse sweep in hyper-dual arithmetic with x seeded as x + ε₁u + ε₂v.
template <ScalarFunction F>
ThirdOrderSweep third_order_sweep(const F& f, const Tensor& x, const Tensor& u, const Tensor& v) {
    detail::check_input(f, x, "third_order_sweep");
    if (u.numel() != x.numel() || v.numel() != x.numel()) throw ShapeError("third_order_sweep: direction size mismatch");
    using D = Dual<double>;
    Tape<HyperDual> tape;
    std::vector<HyperDual> seeded(x.numel());
    for (std::size_t i = 0; i < x.numel(); ++i) seeded[i] = HyperDual(D(x[i], u[i]), D(v[i], 0.0));
    Var xv = tape.input(std::move(seeded), x.shape());
    Var out = detail::record_scalar(f, tape, xv);
    tape.backward(out);
    const auto adj = tape.adjoint(xv);
    const std::size_t n = adj.size();
    std::vector<double> g(n), hu(n), hv(n), t(n);
    for (std::size_t i = 0; i < n; ++i) {
        g[i] = adj[i].re.re;
        hu[i] = adj[i].re.eps;
        hv[i] = adj[i].eps.re;
        t[i] = adj[i].eps.eps;
    }
    return ThirdOrderSweep{tape.value(out)[0].re.re, detail::reshape_like(x, std::move(g)),
                           detail::reshape_like(x, std::move(hu)), detail::reshape_like(x, std::move(hv)),
                           detail::reshape_like(x, std::move(t))};
}

struct HessianOptions {
    std::size_t cap = kDefaultHessianCap;
    bool symmetrize = true;
};

/// Dense Hessian [d, d], column i = H·eᵢ. Symmetrized as (H + Hᵀ)/2 unless
/// disabled.
template <ScalarFunction F>
Tensor full_hessian(const F& f, const Tensor& x, HessianOptions opts = {}) {
    detail::check_input(f, x, "full_hessian");
    const std::size_t d = x.numel();
    if (d > opts.cap) {
        throw CapacityError("full_hessian: input dimension " + std::to_string(d) + " exceeds cap " +
                            std::to_string(opts.cap) + "; use hvp instead");
    }
    Tensor h({d, d});
    Tensor e(x.shape());
    for (std::size_t j = 0; j < d; ++j) {
        e[j] = 1.0;
        const Tensor col = hvp(f, x, e);
        e[j] = 0.0;
        for (std::size_t i = 0; i < d; ++i) h.at(i, j) = col[i];
    }
    if (opts.symmetrize) {
        for (std::size_t i = 0; i < d; ++i) {
            for (std::size_t j = i + 1; j < d; ++j) {
                const double s = 0.5 * (h.at(i, j) + h.at(j, i));
                h.at(i, j) = s;
                h.at(j, i) = s;
            }
        }
    }
    return h;
}

/// Central difference of the gradient along v: (∇f(x+sv) − ∇f(x−sv)) / 2s.
template <ScalarFunction F>
Tensor finite_diff_hvp(const F& f, const Tensor& x, const Tensor& v, double step) {
    if (!(step > 0.0)) throw DomainError("finite_diff_hvp: step must be positive");
    if (v.numel() != x.numel()) throw ShapeError("finite_diff_hvp: probe size mismatch");
    Tensor xp = x;
    Tensor xm = x;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        xp[i] += step * v[i];
        xm[i] -= step * v[i];
    }
    const Tensor gp = grad_input(f, xp);
    const Tensor gm = grad_input(f, xm);
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) out[i] = (gp[i] - gm[i]) / (2.0 * step);
    return out;
}

}  // namespace dpa::ad
