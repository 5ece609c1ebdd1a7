#pragma once

// IDX encoder for tests; the library only reads IDX.

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>

#include "dpa/dataset.hpp"

namespace dpa::testing {

inline void put_be32(std::string& s, std::uint32_t v) {
    for (int i = 3; i >= 0; --i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

/// Images as rows × cols bytes (round(255·x)) and one label byte per sample.
inline std::pair<std::string, std::string> encode_idx(const Dataset& d, std::uint32_t rows, std::uint32_t cols) {
    std::string img, lab;
    put_be32(img, 0x00000803);
    put_be32(img, std::uint32_t(d.size()));
    put_be32(img, rows);
    put_be32(img, cols);
    for (double v : d.inputs.values()) img.push_back(static_cast<char>(std::lround(v * 255.0)));
    put_be32(lab, 0x00000801);
    put_be32(lab, std::uint32_t(d.size()));
    for (std::size_t y : d.labels) lab.push_back(static_cast<char>(y));
    return {img, lab};
}

}  // namespace dpa::testing
