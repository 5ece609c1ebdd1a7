#pragma once

// Affine classifiers (no hidden layer) with closed-form attack distances.

#include <cmath>
#include <vector>

#include "dpa/models.hpp"

namespace dpa::testing {

/// logits = W x + b with W given row-major [k, d].
inline ModelState affine_model(std::size_t d, std::size_t k, const std::vector<double>& w, const std::vector<double>& b) {
    ModelSpec s;
    s.input_dim = d;
    s.num_classes = k;
    s.layer_widths = {d, k};
    ModelState m = init_model(s, 0);
    std::vector<double> p = w;
    p.insert(p.end(), b.begin(), b.end());
    m.params = Tensor::vector(p);
    return m;
}

/// Binary affine model with margin g(x) = z₁ − z₀ = wᵀx + c.
inline ModelState binary_affine(const std::vector<double>& w, double c) {
    const std::size_t d = w.size();
    std::vector<double> rows(2 * d, 0.0);
    for (std::size_t j = 0; j < d; ++j) rows[d + j] = w[j];
    return affine_model(d, 2, rows, {0.0, c});
}

inline double margin(const std::vector<double>& w, double c, const std::vector<double>& x) {
    double g = c;
    for (std::size_t j = 0; j < w.size(); ++j) g += w[j] * x[j];
    return g;
}

inline double l1(const std::vector<double>& w) {
    double s = 0.0;
    for (double v : w) s += std::abs(v);
    return s;
}

inline double l2(const std::vector<double>& w) {
    double s = 0.0;
    for (double v : w) s += v * v;
    return std::sqrt(s);
}

}  // namespace dpa::testing
