#pragma once

// Independent numerical oracles. Nothing here touches the tape engine except
// through plain function evaluation.

#include <algorithm>
#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "dpa/tensor.hpp"

namespace dpa::testing {

/// Central finite-difference gradient of a scalar function of a vector.
inline std::vector<double> fd_gradient(const std::function<double(const std::vector<double>&)>& f,
                                       std::vector<double> x, double step = 1e-5) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double xi = x[i];
        x[i] = xi + step;
        const double fp = f(x);
        x[i] = xi - step;
        const double fm = f(x);
        x[i] = xi;
        g[i] = (fp - fm) / (2.0 * step);
    }
    return g;
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
inline std::vector<double> jacobi_eigenvalues(const Tensor& a_in, std::vector<std::vector<double>>* vectors = nullptr) {
    const std::size_t n = a_in.shape()[0];
    std::vector<std::vector<double>> a(n, std::vector<double>(n));
    std::vector<std::vector<double>> v(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
        v[i][i] = 1.0;
        for (std::size_t j = 0; j < n; ++j) a[i][j] = a_in.at(i, j);
    }
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) off += a[i][j] * a[i][j];
        if (off < 1e-30) break;
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                if (std::abs(a[p][q]) < 1e-300) continue;
                const double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a[k][p], akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a[p][k], aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = v[k][p], vkq = v[k][q];
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return a[x][x] < a[y][y]; });
    std::vector<double> eig(n);
    if (vectors) vectors->assign(n, std::vector<double>(n));
    for (std::size_t k = 0; k < n; ++k) {
        eig[k] = a[order[k]][order[k]];
        if (vectors)
            for (std::size_t i = 0; i < n; ++i) (*vectors)[k][i] = v[i][order[k]];
    }
    return eig;
}

/// Largest singular value of a symmetric matrix: max |λ|.
inline double symmetric_sigma_max(const Tensor& a) {
    const auto e = jacobi_eigenvalues(a);
    return std::max(std::abs(e.front()), std::abs(e.back()));
}

inline double oracle_frobenius_sq(const Tensor& a) {
    double s = 0.0;
    for (double v : a.values()) s += v * v;
    return s;
}

}  // namespace dpa::testing
