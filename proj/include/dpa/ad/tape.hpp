#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dpa/ad/dual.hpp"
#include "dpa/errors.hpp"
#include "dpa/tensor.hpp"

namespace dpa::ad {

/// Handle to a node recorded on a Tape.
struct Var {
    std::size_t id = static_cast<std::size_t>(-1);
};

enum class Op : std::uint8_t {
    leaf,
    add,
    sub,
    mul,
    scale,
    tanh,
    relu,
    sum,
    dot,
    matvec,
    xent,
    pick,
    conv2d,
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::leaf: return "leaf";
        case Op::add: return "add";
        case Op::sub: return "sub";
        case Op::mul: return "mul";
        case Op::scale: return "scale";
        case Op::tanh: return "tanh";
        case Op::relu: return "relu";
        case Op::sum: return "sum";
        case Op::dot: return "dot";
        case Op::matvec: return "matvec";
        case Op::xent: return "xent";
        case Op::pick: return "pick";
        case Op::conv2d: return "conv2d";
    }
    return "?";
}

/// Reverse-mode tape over vector-valued nodes, generic in the scalar type.
///
/// With T = double the backward sweep yields gradients. With T = Dual<double>
/// and inputs seeded as x + εv, the ε-part of the input adjoint is H·v
/// (forward-over-reverse). With T = HyperDual and inputs x + ε₁u + ε₂v, the
/// ε₁ε₂-part of any leaf adjoint is the gradient of the mixed second
/// directional derivative D²ℓ[u, v] with respect to that leaf.
///
/// Every node value is checked for finiteness when recorded; a failure raises
/// NumericalError carrying the node index.
template <class T>
class Tape {
public:
    using Scalar = T;

    Tape() = default;

    void clear() {
        nodes_.clear();
        adjoints_.clear();
    }

    std::size_t size() const noexcept { return nodes_.size(); }

    /// Differentiable leaf.
    Var input(std::vector<T> values, Shape shape) { return push_leaf(std::move(values), std::move(shape), true); }

    /// Leaf that never receives an adjoint.
    Var constant(std::span<const double> values, Shape shape) {
        std::vector<T> v(values.size());
        for (std::size_t i = 0; i < values.size(); ++i) v[i] = lift<T>(values[i]);
        return push_leaf(std::move(v), std::move(shape), false);
    }

    /// Differentiable leaf promoted from plain doubles.
    Var input(std::span<const double> values, Shape shape) {
        std::vector<T> v(values.size());
        for (std::size_t i = 0; i < values.size(); ++i) v[i] = lift<T>(values[i]);
        return push_leaf(std::move(v), std::move(shape), true);
    }

    Var add(Var a, Var b) { return elementwise(Op::add, a, b); }
    Var sub(Var a, Var b) { return elementwise(Op::sub, a, b); }
    Var mul(Var a, Var b) { return elementwise(Op::mul, a, b); }

    Var scale(Var a, double c) {
        const auto& va = node(a).value;
        std::vector<T> out(va.size());
        for (std::size_t i = 0; i < va.size(); ++i) out[i] = va[i] * c;
        Node n = make(Op::scale, a, {}, node(a).shape, std::move(out));
        n.scalar = c;
        return push(std::move(n));
    }

    Var tanh(Var a) {
        using std::tanh;
        const auto& va = node(a).value;
        std::vector<T> out(va.size());
        for (std::size_t i = 0; i < va.size(); ++i) out[i] = tanh(va[i]);
        return push(make(Op::tanh, a, {}, node(a).shape, std::move(out)));
    }

    Var relu(Var a) {
        const auto& va = node(a).value;
        std::vector<T> out(va.size());
        for (std::size_t i = 0; i < va.size(); ++i) out[i] = primal(va[i]) > 0.0 ? va[i] : lift<T>(0.0);
        return push(make(Op::relu, a, {}, node(a).shape, std::move(out)));
    }

    Var sum(Var a) {
        T s = lift<T>(0.0);
        for (const T& v : node(a).value) s += v;
        return push(make(Op::sum, a, {}, Shape{1}, {s}));
    }

    Var dot(Var a, Var b) {
        const auto& va = node(a).value;
        const auto& vb = node(b).value;
        require_same_size(Op::dot, a, b);
        T s = lift<T>(0.0);
        for (std::size_t i = 0; i < va.size(); ++i) s += va[i] * vb[i];
        return push(make(Op::dot, a, b, Shape{1}, {s}));
    }

    /// y = W x with W of shape [m, n] and x of n entries.
    Var matvec(Var w, Var x) {
        const Node& nw = node(w);
        const Node& nx = node(x);
        if (nw.shape.size() != 2 || nw.shape[1] != nx.value.size()) {
            throw ShapeError("matvec: expected x of " + std::to_string(nw.shape.size() == 2 ? nw.shape[1] : 0) +
                             " entries for matrix " + shape_string(nw.shape) + ", got " + shape_string(nx.shape));
        }
        const std::size_t m = nw.shape[0];
        const std::size_t n = nw.shape[1];
        std::vector<T> out(m, lift<T>(0.0));
        for (std::size_t i = 0; i < m; ++i) {
            T acc = lift<T>(0.0);
            for (std::size_t j = 0; j < n; ++j) acc += nw.value[i * n + j] * nx.value[j];
            out[i] = acc;
        }
        return push(make(Op::matvec, w, x, Shape{m}, std::move(out)));
    }

    /// Softmax cross-entropy −log softmax(z)[label], stabilized by subtracting
    /// the largest logit.
    Var xent(Var logits, std::size_t label) {
        using std::exp;
        using std::log;
        const auto& z = node(logits).value;
        if (label >= z.size()) {
            throw DomainError("xent: label " + std::to_string(label) + " out of range for " +
                              std::to_string(z.size()) + " classes");
        }
        double zmax = primal(z[0]);
        for (const T& v : z) zmax = std::max(zmax, primal(v));
        T s = lift<T>(0.0);
        for (const T& v : z) s += exp(v - zmax);
        T lse = log(s) + zmax;
        Node n = make(Op::xent, logits, {}, Shape{1}, {lse - z[label]});
        n.aux[0] = label;
        n.saved = {lse};
        return push(std::move(n));
    }

    /// Scalar view of entry k.
    Var pick(Var a, std::size_t k) {
        const auto& va = node(a).value;
        if (k >= va.size()) throw ShapeError("pick: index " + std::to_string(k) + " out of range");
        Node n = make(Op::pick, a, {}, Shape{1}, {va[k]});
        n.aux[0] = k;
        return push(std::move(n));
    }

    /// Valid (no padding), stride-1 convolution of a square single-channel
    /// image [s, s] with C filters [C, k, k] plus per-channel bias [C].
    /// Output is [C, s-k+1, s-k+1].
    Var conv2d(Var image, Var filters, Var bias, std::size_t side, std::size_t kernel) {
        const Node& ni = node(image);
        const Node& nf = node(filters);
        const Node& nb = node(bias);
        if (ni.value.size() != side * side || kernel == 0 || kernel > side) {
            throw ShapeError("conv2d: image " + shape_string(ni.shape) + " incompatible with side " +
                             std::to_string(side) + " kernel " + std::to_string(kernel));
        }
        const std::size_t channels = nb.value.size();
        if (nf.value.size() != channels * kernel * kernel) {
            throw ShapeError("conv2d: filter bank " + shape_string(nf.shape) + " does not match " +
                             std::to_string(channels) + " channels of " + std::to_string(kernel) + "x" +
                             std::to_string(kernel));
        }
        const std::size_t o = side - kernel + 1;
        std::vector<T> out(channels * o * o, lift<T>(0.0));
        for (std::size_t c = 0; c < channels; ++c) {
            for (std::size_t i = 0; i < o; ++i) {
                for (std::size_t j = 0; j < o; ++j) {
                    T acc = nb.value[c];
                    for (std::size_t u = 0; u < kernel; ++u)
                        for (std::size_t v = 0; v < kernel; ++v)
                            acc += nf.value[(c * kernel + u) * kernel + v] * ni.value[(i + u) * side + (j + v)];
                    out[(c * o + i) * o + j] = acc;
                }
            }
        }
        Node n = make(Op::conv2d, image, filters, Shape{channels, o, o}, std::move(out));
        n.c = bias.id;
        n.needs_grad = n.needs_grad || node(bias).needs_grad;
        n.aux = {side, kernel, channels, o};
        return push(std::move(n));
    }

    std::span<const T> value(Var v) const { return node(v).value; }
    const Shape& shape(Var v) const { return node(v).shape; }

    /// Reverse sweep from a scalar output (seed 1).
    void backward(Var out) {
        if (node(out).value.size() != 1) throw ShapeError("backward: output is not a scalar");
        std::vector<T> seed{lift<T>(1.0)};
        backward(out, seed);
    }

    /// Reverse sweep from `out` with an explicit adjoint seed (a row of the
    /// Jacobian when the seed is a basis vector).
    void backward(Var out, std::span<const T> seed) {
        const Node& no = node(out);
        if (seed.size() != no.value.size()) throw ShapeError("backward: seed size mismatch");
        adjoints_.assign(nodes_.size(), {});
        touch(out).assign(seed.begin(), seed.end());
        for (std::size_t id = out.id + 1; id-- > 0;) {
            if (adjoints_[id].empty() || nodes_[id].op == Op::leaf) continue;
            propagate(id);
        }
    }

    /// Adjoint of `v` after the last backward(); zeros if no path reached it.
    std::vector<T> adjoint(Var v) const {
        const Node& n = node(v);
        if (v.id < adjoints_.size() && !adjoints_[v.id].empty()) return adjoints_[v.id];
        return std::vector<T>(n.value.size(), lift<T>(0.0));
    }

private:
    struct Node {
        Op op = Op::leaf;
        std::size_t a = static_cast<std::size_t>(-1);
        std::size_t b = static_cast<std::size_t>(-1);
        std::size_t c = static_cast<std::size_t>(-1);
        std::array<std::size_t, 4> aux{};
        double scalar = 0.0;
        bool needs_grad = false;
        Shape shape;
        std::vector<T> value;
        std::vector<T> saved;
    };

    const Node& node(Var v) const {
        if (v.id >= nodes_.size()) throw IndexError("tape: invalid variable handle");
        return nodes_[v.id];
    }

    Node make(Op op, Var a, Var b, Shape shape, std::vector<T> value) const {
        Node n;
        n.op = op;
        n.a = a.id;
        n.b = b.id;
        n.shape = std::move(shape);
        n.value = std::move(value);
        n.needs_grad = (a.id < nodes_.size() && nodes_[a.id].needs_grad) ||
                       (b.id < nodes_.size() && nodes_[b.id].needs_grad);
        return n;
    }

    Var push_leaf(std::vector<T> values, Shape shape, bool grad) {
        if (shape_numel(shape) != values.size()) {
            throw ShapeError("tape leaf: shape " + shape_string(shape) + " does not match " +
                             std::to_string(values.size()) + " values");
        }
        Node n;
        n.shape = std::move(shape);
        n.value = std::move(values);
        n.needs_grad = grad;
        return push(std::move(n));
    }

    Var push(Node n) {
        const std::size_t id = nodes_.size();
        for (const T& v : n.value) {
            if (!std::isfinite(primal(v))) {
                throw NumericalError(std::string("non-finite value produced by operation #") + std::to_string(id) +
                                         " (" + op_name(n.op) + ")",
                                     id);
            }
        }
        nodes_.push_back(std::move(n));
        return Var{id};
    }

    Var elementwise(Op op, Var a, Var b) {
        require_same_size(op, a, b);
        const auto& va = node(a).value;
        const auto& vb = node(b).value;
        std::vector<T> out(va.size());
        for (std::size_t i = 0; i < va.size(); ++i) {
            switch (op) {
                case Op::add: out[i] = va[i] + vb[i]; break;
                case Op::sub: out[i] = va[i] - vb[i]; break;
                default: out[i] = va[i] * vb[i]; break;
            }
        }
        return push(make(op, a, b, node(a).shape, std::move(out)));
    }

    void require_same_size(Op op, Var a, Var b) const {
        if (node(a).value.size() != node(b).value.size()) {
            throw ShapeError(std::string(op_name(op)) + ": operand shapes " + shape_string(node(a).shape) + " and " +
                             shape_string(node(b).shape) + " differ");
        }
    }

    std::vector<T>& touch(Var v) { return touch(v.id); }
    std::vector<T>& touch(std::size_t id) {
        auto& adj = adjoints_[id];
        if (adj.empty()) adj.assign(nodes_[id].value.size(), lift<T>(0.0));
        return adj;
    }

    bool wants(std::size_t id) const { return id < nodes_.size() && nodes_[id].needs_grad; }

    void propagate(std::size_t id) {
        const Node& n = nodes_[id];
        const std::vector<T> g = adjoints_[id];
        switch (n.op) {
            case Op::leaf: break;
            case Op::add:
            case Op::sub: {
                if (wants(n.a)) {
                    auto& da = touch(n.a);
                    for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
                }
                if (wants(n.b)) {
                    auto& db = touch(n.b);
                    if (n.op == Op::add)
                        for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i];
                    else
                        for (std::size_t i = 0; i < g.size(); ++i) db[i] -= g[i];
                }
                break;
            }
            case Op::mul: {
                const auto& va = nodes_[n.a].value;
                const auto& vb = nodes_[n.b].value;
                if (wants(n.a)) {
                    auto& da = touch(n.a);
                    for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * vb[i];
                }
                if (wants(n.b)) {
                    auto& db = touch(n.b);
                    for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * va[i];
                }
                break;
            }
            case Op::scale: {
                if (wants(n.a)) {
                    auto& da = touch(n.a);
                    for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * n.scalar;
                }
                break;
            }
            case Op::tanh: {
                if (wants(n.a)) {
                    auto& da = touch(n.a);
                    for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * (1.0 - n.value[i] * n.value[i]);
                }
                break;
            }
            case Op::relu: {
                if (wants(n.a)) {
                    const auto& va = nodes_[n.a].value;
                    auto& da = touch(n.a);
                    for (std::size_t i = 0; i < g.size(); ++i)
                        if (primal(va[i]) > 0.0) da[i] += g[i];
                }
                break;
            }
            case Op::sum: {
                if (wants(n.a)) {
                    auto& da = touch(n.a);
                    for (auto& d : da) d += g[0];
                }
                break;
            }
            case Op::dot: {
                const auto& va = nodes_[n.a].value;
                const auto& vb = nodes_[n.b].value;
                if (wants(n.a)) {
                    auto& da = touch(n.a);
                    for (std::size_t i = 0; i < va.size(); ++i) da[i] += g[0] * vb[i];
                }
                if (wants(n.b)) {
                    auto& db = touch(n.b);
                    for (std::size_t i = 0; i < va.size(); ++i) db[i] += g[0] * va[i];
                }
                break;
            }
            case Op::matvec: {
                const Node& nw = nodes_[n.a];
                const Node& nx = nodes_[n.b];
                const std::size_t m = nw.shape[0];
                const std::size_t cols = nw.shape[1];
                if (wants(n.a)) {
                    auto& dw = touch(n.a);
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < cols; ++j) dw[i * cols + j] += g[i] * nx.value[j];
                }
                if (wants(n.b)) {
                    auto& dx = touch(n.b);
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < cols; ++j) dx[j] += nw.value[i * cols + j] * g[i];
                }
                break;
            }
            case Op::xent: {
                using std::exp;
                if (wants(n.a)) {
                    const auto& z = nodes_[n.a].value;
                    auto& dz = touch(n.a);
                    const T& lse = n.saved[0];
                    for (std::size_t i = 0; i < z.size(); ++i) {
                        T p = exp(z[i] - lse);
                        if (i == n.aux[0]) p -= lift<T>(1.0);
                        dz[i] += g[0] * p;
                    }
                }
                break;
            }
            case Op::pick: {
                if (wants(n.a)) touch(n.a)[n.aux[0]] += g[0];
                break;
            }
            case Op::conv2d: {
                const auto [side, kernel, channels, o] = n.aux;
                const auto& img = nodes_[n.a].value;
                const auto& filt = nodes_[n.b].value;
                const bool gi = wants(n.a);
                const bool gf = wants(n.b);
                const bool gb = wants(n.c);
                for (std::size_t c = 0; c < channels; ++c) {
                    for (std::size_t i = 0; i < o; ++i) {
                        for (std::size_t j = 0; j < o; ++j) {
                            const T& go = g[(c * o + i) * o + j];
                            if (gb) touch(n.c)[c] += go;
                            for (std::size_t u = 0; u < kernel; ++u) {
                                for (std::size_t v = 0; v < kernel; ++v) {
                                    const std::size_t fi = (c * kernel + u) * kernel + v;
                                    const std::size_t ii = (i + u) * side + (j + v);
                                    if (gf) touch(n.b)[fi] += go * img[ii];
                                    if (gi) touch(n.a)[ii] += go * filt[fi];
                                }
                            }
                        }
                    }
                }
                break;
            }
        }
    }

    std::vector<Node> nodes_;
    std::vector<std::vector<T>> adjoints_;
};

}  // namespace dpa::ad
