#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dpa/ad/derivatives.hpp"
#include "dpa/ad/tape.hpp"
#include "dpa/dataset.hpp"
#include "dpa/errors.hpp"
#include "dpa/rng.hpp"
#include "dpa/tensor.hpp"

namespace dpa {

enum class Architecture { mlp, conv_mlp };
enum class Activation { relu, tanh };

inline const char* architecture_name(Architecture a) { return a == Architecture::mlp ? "mlp" : "conv-mlp"; }
inline const char* activation_name(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }

/// Classifier architecture.
///
/// mlp: layer_widths = [input_dim, hidden..., num_classes].
/// conv-mlp: the input is a square image of side sqrt(input_dim); one valid
/// convolution with `conv_channels` filters of `conv_kernel`² feeds the dense
/// stack, so layer_widths.front() must equal conv_channels·(side−kernel+1)².
struct ModelSpec {
    Architecture architecture = Architecture::mlp;
    std::vector<std::size_t> layer_widths;
    Activation activation = Activation::relu;
    std::size_t num_classes = 2;
    std::size_t input_dim = 1;
    std::size_t conv_channels = 4;
    std::size_t conv_kernel = 3;

    std::size_t image_side() const { return static_cast<std::size_t>(std::lround(std::sqrt(double(input_dim)))); }
    std::size_t conv_out_side() const { return image_side() - conv_kernel + 1; }

    void validate() const {
        if (input_dim == 0) throw ConfigError("model: input_dim must be positive");
        if (num_classes < 2) throw ConfigError("model: need at least two classes");
        if (layer_widths.size() < 2) throw ConfigError("model: need at least an input and an output width");
        for (std::size_t w : layer_widths) {
            if (w == 0) throw ConfigError("model: layer widths must be positive");
        }
        if (layer_widths.back() != num_classes) {
            throw ConfigError("model: last width " + std::to_string(layer_widths.back()) + " must equal num_classes " +
                              std::to_string(num_classes));
        }
        if (architecture == Architecture::mlp) {
            if (layer_widths.front() != input_dim) {
                throw ConfigError("model: first width " + std::to_string(layer_widths.front()) +
                                  " must equal input_dim " + std::to_string(input_dim));
            }
        } else {
            const std::size_t s = image_side();
            if (s * s != input_dim) throw ConfigError("model: conv-mlp needs a square input");
            if (conv_channels == 0 || conv_kernel == 0 || conv_kernel > s) {
                throw ConfigError("model: invalid convolution geometry");
            }
            const std::size_t o = conv_out_side();
            if (layer_widths.front() != conv_channels * o * o) {
                throw ConfigError("model: first width must equal conv output size " +
                                  std::to_string(conv_channels * o * o));
            }
        }
    }

    std::size_t conv_param_count() const {
        return architecture == Architecture::conv_mlp ? conv_channels * conv_kernel * conv_kernel + conv_channels : 0;
    }

    std::size_t param_count() const {
        std::size_t n = conv_param_count();
        for (std::size_t l = 0; l + 1 < layer_widths.size(); ++l) n += layer_widths[l] * layer_widths[l + 1] + layer_widths[l + 1];
        return n;
    }

    friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

/// Parameters θ in flat order (conv filters, conv bias, then per dense layer
/// W row-major [out, in] followed by b) plus the SGD momentum buffer.
struct ModelState {
    ModelSpec spec;
    Tensor params;
    Tensor velocity;
    std::uint64_t rng_seed = 0;
};

struct TrainConfig {
    double learning_rate = 0.05;
    double momentum = 0.9;
    std::size_t epochs = 30;
    std::size_t batch_size = 32;
    std::uint64_t shuffle_seed = 0;

    void validate() const {
        if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be positive");
        if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train: momentum must lie in [0,1)");
        if (epochs == 0) throw ConfigError("train: epochs must be positive");
        if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
    }
};

/// Scaled-uniform weights in ±sqrt(6/(fan_in+fan_out)), zero biases.
inline ModelState init_model(const ModelSpec& spec, std::uint64_t seed) {
    spec.validate();
    ModelState m;
    m.spec = spec;
    m.rng_seed = seed;
    m.params = Tensor({spec.param_count()});
    m.velocity = Tensor({spec.param_count()});
    Rng rng(seed);
    std::size_t off = 0;
    auto fill = [&](std::size_t count, std::size_t fan_in, std::size_t fan_out) {
        const double bound = std::sqrt(6.0 / double(fan_in + fan_out));
        std::uniform_real_distribution<double> u(-bound, bound);
        for (std::size_t i = 0; i < count; ++i) m.params[off++] = u(rng);
    };
    if (spec.architecture == Architecture::conv_mlp) {
        const std::size_t kk = spec.conv_kernel * spec.conv_kernel;
        fill(spec.conv_channels * kk, kk, spec.conv_channels * kk);
        off += spec.conv_channels;
    }
    for (std::size_t l = 0; l + 1 < spec.layer_widths.size(); ++l) {
        const std::size_t in = spec.layer_widths[l];
        const std::size_t out = spec.layer_widths[l + 1];
        fill(in * out, in, out);
        off += out;
    }
    return m;
}

/// Tape handles for the parameter blocks of a model.
struct ParamVars {
    ad::Var conv_filters;
    ad::Var conv_bias;
    std::vector<ad::Var> weights;
    std::vector<ad::Var> biases;
    std::vector<std::size_t> offsets;  // flat offset of each recorded block, in recording order
    std::vector<ad::Var> blocks;
};

template <class T>
ParamVars bind_params(ad::Tape<T>& tape, const ModelState& m, bool requires_grad) {
    const ModelSpec& spec = m.spec;
    ParamVars p;
    const std::span<const double> all = m.params.span();
    std::size_t off = 0;
    auto block = [&](std::size_t count, Shape shape) {
        const auto view = all.subspan(off, count);
        ad::Var v = requires_grad ? tape.input(view, std::move(shape)) : tape.constant(view, std::move(shape));
        p.offsets.push_back(off);
        p.blocks.push_back(v);
        off += count;
        return v;
    };
    if (spec.architecture == Architecture::conv_mlp) {
        const std::size_t k = spec.conv_kernel;
        p.conv_filters = block(spec.conv_channels * k * k, Shape{spec.conv_channels, k, k});
        p.conv_bias = block(spec.conv_channels, Shape{spec.conv_channels});
    }
    for (std::size_t l = 0; l + 1 < spec.layer_widths.size(); ++l) {
        const std::size_t in = spec.layer_widths[l];
        const std::size_t out = spec.layer_widths[l + 1];
        p.weights.push_back(block(in * out, Shape{out, in}));
        p.biases.push_back(block(out, Shape{out}));
    }
    return p;
}

template <class T>
ad::Var activate(ad::Tape<T>& tape, Activation a, ad::Var v) {
    return a == Activation::relu ? tape.relu(v) : tape.tanh(v);
}

/// Records the logits of one input on the tape.
template <class T>
ad::Var record_logits(ad::Tape<T>& tape, const ModelSpec& spec, const ParamVars& p, ad::Var x) {
    if (tape.value(x).size() != spec.input_dim) {
        throw ShapeError("forward: expected input of " + std::to_string(spec.input_dim) + " entries, got " +
                         shape_string(tape.shape(x)));
    }
    ad::Var h = x;
    if (spec.architecture == Architecture::conv_mlp) {
        h = tape.conv2d(h, p.conv_filters, p.conv_bias, spec.image_side(), spec.conv_kernel);
        h = activate(tape, spec.activation, h);
    }
    for (std::size_t l = 0; l < p.weights.size(); ++l) {
        h = tape.add(tape.matvec(p.weights[l], h), p.biases[l]);
        if (l + 1 < p.weights.size()) h = activate(tape, spec.activation, h);
    }
    return h;
}

/// ℓ(x) = xent(f_θ(x), y) with θ held constant, as a ScalarFunction of the input.
class InputLoss {
public:
    InputLoss(const ModelState& model, std::size_t label) : model_(&model), label_(label) {
        if (label >= model.spec.num_classes) throw DomainError("loss: label out of range");
    }

    Shape input_shape() const { return Shape{model_->spec.input_dim}; }

    template <class T>
    ad::Var operator()(ad::Tape<T>& tape, ad::Var x) const {
        const ParamVars p = bind_params(tape, *model_, false);
        return tape.xent(record_logits(tape, model_->spec, p, x), label_);
    }

private:
    const ModelState* model_;
    std::size_t label_;
};

/// Logits for one input [d] or a batch [n, d] (returns [K] or [n, K]).
inline Tensor forward(const ModelState& m, const Tensor& x) {
    const std::size_t d = m.spec.input_dim;
    const std::size_t k = m.spec.num_classes;
    auto one = [&](std::span<const double> row, std::span<double> out) {
        ad::Tape<double> tape;
        const ParamVars p = bind_params(tape, m, false);
        ad::Var xv = tape.constant(row, Shape{d});
        const auto z = tape.value(record_logits(tape, m.spec, p, xv));
        std::copy(z.begin(), z.end(), out.begin());
    };
    if (x.rank() == 2) {
        if (x.shape()[1] != d) {
            throw ShapeError("forward: expected batch of shape [n," + std::to_string(d) + "], got " +
                             shape_string(x.shape()));
        }
        Tensor out({x.shape()[0], k});
        for (std::size_t i = 0; i < x.shape()[0]; ++i) one(x.row(i), out.row(i));
        return out;
    }
    if (x.numel() != d) {
        throw ShapeError("forward: expected input of shape [" + std::to_string(d) + "], got " + shape_string(x.shape()));
    }
    Tensor out({k});
    one(x.span(), out.span());
    return out;
}

/// −log softmax(logits)[y].
inline double xent_loss(std::span<const double> logits, std::size_t y) {
    if (y >= logits.size()) {
        throw DomainError("xent_loss: label " + std::to_string(y) + " out of range for " +
                          std::to_string(logits.size()) + " classes");
    }
    double zmax = logits[0];
    for (double z : logits) zmax = std::max(zmax, z);
    double s = 0.0;
    for (double z : logits) s += std::exp(z - zmax);
    return std::log(s) + zmax - logits[y];
}

/// Index of the largest entry; ties go to the lowest index.
inline std::size_t argmax(std::span<const double> v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

inline std::size_t predict(const ModelState& m, const Tensor& x) { return argmax(forward(m, x).span()); }

inline double loss_at(const ModelState& m, const Tensor& x, std::size_t y) { return xent_loss(forward(m, x).span(), y); }

/// Adds ∇θ xent(f_θ(x), y) into `grad` and returns the loss.
inline double accumulate_param_gradient(const ModelState& m, std::span<const double> x, std::size_t y,
                                        std::span<double> grad, double weight = 1.0) {
    ad::Tape<double> tape;
    const ParamVars p = bind_params(tape, m, true);
    ad::Var xv = tape.constant(x, Shape{x.size()});
    ad::Var loss = tape.xent(record_logits(tape, m.spec, p, xv), y);
    tape.backward(loss);
    for (std::size_t b = 0; b < p.blocks.size(); ++b) {
        const auto adj = tape.adjoint(p.blocks[b]);
        for (std::size_t i = 0; i < adj.size(); ++i) grad[p.offsets[b] + i] += weight * adj[i];
    }
    return tape.value(loss)[0];
}

inline Tensor param_gradient(const ModelState& m, const Tensor& x, std::size_t y) {
    Tensor g({m.spec.param_count()});
    accumulate_param_gradient(m, x.span(), y, g.span());
    return g;
}

/// Logits and their Jacobian [K, d] with respect to the input.
inline std::pair<Tensor, Tensor> logits_jacobian(const ModelState& m, const Tensor& x) {
    const std::size_t d = m.spec.input_dim;
    const std::size_t k = m.spec.num_classes;
    ad::Tape<double> tape;
    const ParamVars p = bind_params(tape, m, false);
    ad::Var xv = tape.input(x.span(), Shape{d});
    ad::Var z = record_logits(tape, m.spec, p, xv);
    const auto zv = tape.value(z);
    Tensor logits = Tensor::vector(std::vector<double>(zv.begin(), zv.end()));
    Tensor jac({k, d});
    std::vector<double> seed(k, 0.0);
    for (std::size_t c = 0; c < k; ++c) {
        seed.assign(k, 0.0);
        seed[c] = 1.0;
        tape.backward(z, seed);
        const auto row = tape.adjoint(xv);
        std::copy(row.begin(), row.end(), jac.row(c).begin());
    }
    return {std::move(logits), std::move(jac)};
}

/// One SGD step with momentum: b ← μb + g; θ ← θ − ηb.
inline ModelState sgd_step(const ModelState& m, const Tensor& grad, const TrainConfig& cfg) {
    if (grad.numel() != m.params.numel()) {
        throw ShapeError("sgd_step: gradient has " + std::to_string(grad.numel()) + " entries, expected " +
                         std::to_string(m.params.numel()));
    }
    for (std::size_t i = 0; i < grad.numel(); ++i) {
        if (!std::isfinite(grad[i])) throw NumericalError("sgd_step: non-finite gradient entry", i);
    }
    ModelState next = m;
    for (std::size_t i = 0; i < grad.numel(); ++i) {
        next.velocity[i] = cfg.momentum * m.velocity[i] + grad[i];
        next.params[i] = m.params[i] - cfg.learning_rate * next.velocity[i];
    }
    return next;
}

/// Fraction of samples whose argmax logit equals the label.
inline double accuracy(const ModelState& m, const Dataset& data) {
    if (data.size() == 0) throw EvaluationError("accuracy: empty dataset");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const Tensor logits = forward(m, data.sample(i));
        if (argmax(logits.span()) == data.labels[i]) ++correct;
    }
    return double(correct) / double(data.size());
}

struct EpochResult {
    ModelState model;
    double mean_loss = 0.0;
};

/// One epoch of minibatch SGD. The batch order is a shuffle seeded by
/// mix_seed(shuffle_seed, epoch). `sample_grad(model, index, grad)` adds the
/// per-sample gradient into `grad` and returns that sample's loss; the batch
/// gradient is the mean over the batch.
template <class SampleGrad>
EpochResult train_epoch(ModelState m, std::size_t n, const TrainConfig& cfg, std::size_t epoch, SampleGrad&& sample_grad) {
    cfg.validate();
    if (cfg.batch_size > n) throw ConfigError("train: batch_size exceeds dataset size");
    const auto order = shuffled_indices(n, mix_seed(cfg.shuffle_seed, epoch));
    double total = 0.0;
    Tensor grad({m.spec.param_count()});
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
        const std::size_t end = std::min(n, start + cfg.batch_size);
        std::fill(grad.values().begin(), grad.values().end(), 0.0);
        for (std::size_t k = start; k < end; ++k) total += sample_grad(std::as_const(m), order[k], grad.span());
        const double inv = 1.0 / double(end - start);
        for (double& g : grad.values()) g *= inv;
        m = sgd_step(m, grad, cfg);
    }
    return {std::move(m), total / double(n)};
}

/// Plain clean training from a fresh initialization.
inline ModelState train_model(const ModelSpec& spec, const Dataset& data, const TrainConfig& cfg, std::uint64_t seed) {
    ModelState m = init_model(spec, seed);
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        m = train_epoch(std::move(m), data.size(), cfg, e, [&](const ModelState& s, std::size_t i, std::span<double> g) {
                return accumulate_param_gradient(s, data.row(i), data.labels[i], g);
            }).model;
    }
    return m;
}

}  // namespace dpa
