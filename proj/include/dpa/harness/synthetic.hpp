#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "dpa/dataset.hpp"
#include "dpa/errors.hpp"
#include "dpa/rng.hpp"

namespace dpa::harness {

enum class SyntheticKind { blobs, moons, rings, patches8x8 };

inline const char* synthetic_name(SyntheticKind k) {
    switch (k) {
        case SyntheticKind::blobs: return "blobs";
        case SyntheticKind::moons: return "moons";
        case SyntheticKind::rings: return "rings";
        case SyntheticKind::patches8x8: return "patches8x8";
    }
    return "?";
}

inline SyntheticKind parse_synthetic(const std::string& s) {
    if (s == "blobs") return SyntheticKind::blobs;
    if (s == "moons") return SyntheticKind::moons;
    if (s == "rings") return SyntheticKind::rings;
    if (s == "patches8x8") return SyntheticKind::patches8x8;
    throw ConfigError("unknown synthetic dataset kind '" + s + "'");
}

struct SyntheticOptions {
    std::size_t dim = 16;        // blobs only; moons/rings are 2-D, patches 64-D
    double separation = 6.0;     // blobs: nearest center distance in units of σ
    double spread = 0.25;        // blobs: centers uniform in [0.5 − spread, 0.5 + spread]^d
    double jitter = 0.02;        // patches: per-pixel Gaussian noise σ
    double contrast = 0.1;       // patches: template amplitude around mid-grey
    double noise = 0.08;         // moons/rings: coordinate noise before rescaling
    Split split = Split::train;
};

/// Class templates of the patches8x8 family: a smooth random field per class
/// drawn from `template_seed`, so train and validation sets generated with
/// different sample seeds share templates.
inline std::vector<std::vector<double>> patch_templates(std::size_t k, std::uint64_t template_seed,
                                                        double contrast = 0.3) {
    Rng rng(template_seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<std::vector<double>> out(k, std::vector<double>(64));
    for (auto& t : out) {
        // sum of three Gaussian bumps with random centers, widths and signs
        std::vector<double> f(64, 0.0);
        for (int b = 0; b < 3; ++b) {
            const double cx = 1.0 + 5.0 * u(rng), cy = 1.0 + 5.0 * u(rng);
            const double w = 1.2 + 1.5 * u(rng);
            const double amp = u(rng) < 0.5 ? -1.0 : 1.0;
            for (int r = 0; r < 8; ++r)
                for (int c = 0; c < 8; ++c)
                    f[r * 8 + c] += amp * std::exp(-((r - cy) * (r - cy) + (c - cx) * (c - cx)) / (2 * w * w));
        }
        for (int i = 0; i < 64; ++i) t[i] = std::clamp(0.5 + contrast * f[i], 0.05, 0.95);
    }
    return out;
}

/// Deterministic synthetic dataset with stratified labels (class i·k/n order
/// then shuffled), inputs in [0,1]^d.
///
/// `seed` drives the per-sample draws; class geometry (blob centers, patch
/// templates) comes from `geometry_seed` so that train/validation splits of
/// one task can be drawn with different sample seeds.
inline Dataset make_synthetic(SyntheticKind kind, std::size_t n, std::size_t k, std::uint64_t seed,
                              const SyntheticOptions& opts = {}, std::uint64_t geometry_seed = 0) {
    if (k < 2) throw ConfigError("make_synthetic: need at least two classes");
    if (n < k) throw ConfigError("make_synthetic: need at least one sample per class (n >= k)");
    if ((kind == SyntheticKind::moons) && k != 2) throw ConfigError("make_synthetic: moons has exactly two classes");
    Rng rng(mix_seed(seed, 0xda7a));
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> uni(0.0, 1.0);

    std::vector<std::size_t> labels(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = i % k;
    std::shuffle(labels.begin(), labels.end(), rng);

    std::size_t d = 0;
    switch (kind) {
        case SyntheticKind::blobs: d = opts.dim; break;
        case SyntheticKind::moons:
        case SyntheticKind::rings: d = 2; break;
        case SyntheticKind::patches8x8: d = 64; break;
    }
    if (d == 0) throw ConfigError("make_synthetic: dimension must be positive");
    Tensor inputs({n, d});

    if (kind == SyntheticKind::blobs) {
        Rng geo(mix_seed(geometry_seed, 0xb10b));
        std::uniform_real_distribution<double> cu(0.5 - opts.spread, 0.5 + opts.spread);
        std::vector<std::vector<double>> centers(k, std::vector<double>(d));
        for (auto& c : centers)
            for (double& v : c) v = cu(geo);
        double min_dist = 1e300;
        for (std::size_t a = 0; a < k; ++a)
            for (std::size_t b = a + 1; b < k; ++b) {
                double s = 0.0;
                for (std::size_t j = 0; j < d; ++j) s += (centers[a][j] - centers[b][j]) * (centers[a][j] - centers[b][j]);
                min_dist = std::min(min_dist, std::sqrt(s));
            }
        const double sigma = min_dist / opts.separation;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j)
                inputs.at(i, j) = std::clamp(centers[labels[i]][j] + sigma * normal(rng), 0.0, 1.0);
    } else if (kind == SyntheticKind::moons) {
        for (std::size_t i = 0; i < n; ++i) {
            const double t = std::numbers::pi * uni(rng);
            double px, py;
            if (labels[i] == 0) {
                px = std::cos(t);
                py = std::sin(t);
            } else {
                px = 1.0 - std::cos(t);
                py = 0.5 - std::sin(t);
            }
            px += opts.noise * normal(rng);
            py += opts.noise * normal(rng);
            // [-1.5, 2.5] x [-1, 1.5] → [0,1]²
            inputs.at(i, 0) = std::clamp((px + 1.5) / 4.0, 0.0, 1.0);
            inputs.at(i, 1) = std::clamp((py + 1.0) / 2.5, 0.0, 1.0);
        }
    } else if (kind == SyntheticKind::rings) {
        for (std::size_t i = 0; i < n; ++i) {
            const double t = 2.0 * std::numbers::pi * uni(rng);
            const double radius = (double(labels[i]) + 1.0) / double(k) + opts.noise * 0.5 * normal(rng) / double(k);
            inputs.at(i, 0) = std::clamp(0.5 + 0.45 * radius * std::cos(t), 0.0, 1.0);
            inputs.at(i, 1) = std::clamp(0.5 + 0.45 * radius * std::sin(t), 0.0, 1.0);
        }
    } else {
        const auto templates = patch_templates(k, mix_seed(geometry_seed, 0x9a7c), opts.contrast);
        for (std::size_t i = 0; i < n; ++i) {
            const double brightness = 0.05 * normal(rng);
            for (std::size_t j = 0; j < 64; ++j) {
                inputs.at(i, j) =
                    std::clamp(templates[labels[i]][j] + brightness + opts.jitter * normal(rng), 0.0, 1.0);
            }
        }
    }

    Dataset ds;
    ds.inputs = std::move(inputs);
    ds.labels = std::move(labels);
    ds.num_classes = k;
    ds.split = opts.split;
    ds.provenance = std::string(synthetic_name(kind)) + ":seed=" + std::to_string(seed);
    return ds;
}

}  // namespace dpa::harness
