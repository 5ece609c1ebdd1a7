#pragma once

#include <cmath>
#include <type_traits>

namespace dpa::ad {

/// Forward-mode dual number a + b·ε with ε² = 0. Nesting (Dual<Dual<double>>)
/// yields hyper-dual numbers carrying two independent directions and their
/// mixed second-order term.
template <class T>
struct Dual {
    T re{};
    T eps{};

    constexpr Dual() = default;
    constexpr Dual(double v) : re(v), eps(0.0) {}  // NOLINT: implicit lift of constants
    constexpr Dual(T r, T e) : re(r), eps(e) {}

    Dual& operator+=(const Dual& o) {
        re += o.re;
        eps += o.eps;
        return *this;
    }
    Dual& operator-=(const Dual& o) {
        re -= o.re;
        eps -= o.eps;
        return *this;
    }
    Dual& operator*=(const Dual& o) {
        eps = eps * o.re + re * o.eps;
        re = re * o.re;
        return *this;
    }
    Dual& operator*=(double c) {
        re *= c;
        eps *= c;
        return *this;
    }
};

using HyperDual = Dual<Dual<double>>;

template <class T>
inline constexpr bool is_dual_v = false;
template <class T>
inline constexpr bool is_dual_v<Dual<T>> = true;

inline double primal(double v) { return v; }
template <class T>
double primal(const Dual<T>& v) {
    return primal(v.re);
}

inline double inverse(double v) { return 1.0 / v; }
template <class T>
Dual<T> inverse(const Dual<T>& a) {
    Dual<T> r;
    r.re = inverse(a.re);
    r.eps = -(r.re * r.re) * a.eps;
    return r;
}

template <class T>
Dual<T> operator+(Dual<T> a, const Dual<T>& b) {
    return a += b;
}
template <class T>
Dual<T> operator-(Dual<T> a, const Dual<T>& b) {
    return a -= b;
}
template <class T>
Dual<T> operator*(Dual<T> a, const Dual<T>& b) {
    return a *= b;
}
template <class T>
Dual<T> operator*(Dual<T> a, double c) {
    return a *= c;
}
template <class T>
Dual<T> operator*(double c, Dual<T> a) {
    return a *= c;
}
template <class T>
Dual<T> operator+(Dual<T> a, double c) {
    a.re += c;
    return a;
}
template <class T>
Dual<T> operator+(double c, Dual<T> a) {
    a.re += c;
    return a;
}
template <class T>
Dual<T> operator-(Dual<T> a, double c) {
    a.re -= c;
    return a;
}
template <class T>
Dual<T> operator-(double c, const Dual<T>& a) {
    Dual<T> r;
    r.re = c - a.re;
    r.eps = -a.eps;
    return r;
}
template <class T>
Dual<T> operator-(const Dual<T>& a) {
    Dual<T> r;
    r.re = -a.re;
    r.eps = -a.eps;
    return r;
}

template <class T>
Dual<T> tanh(const Dual<T>& a) {
    using std::tanh;
    Dual<T> r;
    r.re = tanh(a.re);
    r.eps = (1.0 - r.re * r.re) * a.eps;
    return r;
}

template <class T>
Dual<T> exp(const Dual<T>& a) {
    using std::exp;
    Dual<T> r;
    r.re = exp(a.re);
    r.eps = r.re * a.eps;
    return r;
}

template <class T>
Dual<T> log(const Dual<T>& a) {
    using std::log;
    Dual<T> r;
    r.re = log(a.re);
    r.eps = a.eps * inverse(a.re);
    return r;
}


/// Scalar of type T seeded with a value and (for duals) tangent parts.
template <class T>
T lift(double v) {
    return T(v);
}

}  // namespace dpa::ad
