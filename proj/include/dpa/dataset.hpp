#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "dpa/errors.hpp"
#include "dpa/tensor.hpp"

namespace dpa {

enum class Split { train, validation };

inline const char* split_name(Split s) { return s == Split::train ? "train" : "validation"; }

/// N inputs in [0,1]^d (rows of `inputs`) with class labels < num_classes.
struct Dataset {
    Tensor inputs;  // [N, d]
    std::vector<std::size_t> labels;
    std::size_t num_classes = 2;
    Split split = Split::train;
    std::string provenance;

    std::size_t size() const noexcept { return labels.size(); }
    std::size_t dim() const { return inputs.shape().at(1); }

    std::span<const double> row(std::size_t i) const { return inputs.row(i); }
    Tensor sample(std::size_t i) const {
        const auto r = inputs.row(i);
        return Tensor::vector(std::vector<double>(r.begin(), r.end()));
    }

    void validate() const {
        if (labels.empty()) throw ConfigError("dataset: must contain at least one sample");
        if (inputs.rank() != 2 || inputs.shape()[0] != labels.size()) {
            throw ShapeError("dataset: inputs " + shape_string(inputs.shape()) + " do not match " +
                             std::to_string(labels.size()) + " labels");
        }
        if (num_classes < 2) throw ConfigError("dataset: need at least two classes");
        for (double v : inputs.values()) {
            if (!(v >= 0.0 && v <= 1.0)) throw DomainError("dataset: input value outside [0,1]");
        }
        for (std::size_t y : labels) {
            if (y >= num_classes) throw DomainError("dataset: label " + std::to_string(y) + " out of range");
        }
    }
};

/// Copy of the rows selected by `indices`, in that order.
inline Dataset subset(const Dataset& data, std::span<const std::size_t> indices) {
    Dataset out;
    const std::size_t d = data.dim();
    std::vector<double> values;
    values.reserve(indices.size() * d);
    for (std::size_t i : indices) {
        if (i >= data.size()) throw IndexError("subset: index out of range");
        const auto r = data.row(i);
        values.insert(values.end(), r.begin(), r.end());
        out.labels.push_back(data.labels[i]);
    }
    out.inputs = Tensor({indices.size(), d}, std::move(values));
    out.num_classes = data.num_classes;
    out.split = data.split;
    out.provenance = data.provenance + "/subset";
    return out;
}

}  // namespace dpa
