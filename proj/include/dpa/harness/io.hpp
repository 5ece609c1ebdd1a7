#pragma once

// Binary persistence: CVX1 checkpoints, CVXP perturbation sets, IDX ingestion.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "dpa/dataset.hpp"
#include "dpa/errors.hpp"
#include "dpa/models.hpp"
#include "dpa/poisoner.hpp"

namespace dpa::harness {

inline constexpr std::uint32_t kFormatVersion = 1;

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open '" + path.string() + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write '" + path.string() + "'");
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) throw FormatError("short write to '" + path.string() + "'");
}

inline std::string file_digest(const std::filesystem::path& path) { return hex64(fnv1a64(read_file(path))); }

/// Little-endian encoder.
class ByteWriter {
public:
    void raw(std::string_view s) { buf_.append(s); }
    void u32(std::uint32_t v) { le(v, 4); }
    void u64(std::uint64_t v) { le(v, 8); }
    void f64(double v) { le(std::bit_cast<std::uint64_t>(v), 8); }
    const std::string& bytes() const { return buf_; }

    /// Appends the checksum of everything written so far.
    void seal() { u64(fnv1a64(buf_)); }

private:
    void le(std::uint64_t v, int n) {
        for (int i = 0; i < n; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    std::string buf_;
};

/// Bounds-checked decoder; running past the end is a TruncatedError.
class ByteReader {
public:
    ByteReader(std::string_view bytes, std::string what) : b_(bytes), what_(std::move(what)) {}

    std::size_t offset() const { return pos_; }
    std::size_t remaining() const { return b_.size() - pos_; }

    std::string_view raw(std::size_t n) {
        need(n);
        const auto s = b_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::uint32_t u32() { return std::uint32_t(le(4)); }
    std::uint64_t u64() { return le(8); }
    double f64() { return std::bit_cast<double>(le(8)); }
    std::uint32_t u32_be() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(b_[pos_ + i]);
        pos_ += 4;
        return v;
    }

    /// Guards a declared element count against the bytes actually present.
    void need_elements(std::uint64_t count, std::size_t width) {
        if (count > remaining() / width) {
            throw TruncatedError(what_ + ": declares " + std::to_string(count) + " elements at offset " +
                                 std::to_string(pos_) + " but only " + std::to_string(remaining()) + " bytes remain");
        }
    }

    /// Checks the trailing checksum against all preceding bytes.
    void verify_seal() {
        const std::uint64_t expect = fnv1a64(b_.substr(0, pos_));
        const std::uint64_t got = u64();
        if (got != expect) throw ChecksumError(what_ + ": checksum mismatch (stored " + hex64(got) + ", computed " + hex64(expect) + ")");
        if (remaining() != 0) throw FormatError(what_ + ": " + std::to_string(remaining()) + " trailing bytes");
    }

private:
    void need(std::size_t n) {
        if (n > remaining()) {
            throw TruncatedError(what_ + ": truncated at offset " + std::to_string(pos_) + " (need " + std::to_string(n) +
                                 " bytes, " + std::to_string(remaining()) + " remain)");
        }
    }
    std::uint64_t le(int n) {
        need(std::size_t(n));
        std::uint64_t v = 0;
        for (int i = 0; i < n; ++i) v |= std::uint64_t(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
        pos_ += std::size_t(n);
        return v;
    }

    std::string_view b_;
    std::string what_;
    std::size_t pos_ = 0;
};

namespace detail {

inline void expect_magic(ByteReader& r, std::string_view magic, const std::string& what) {
    if (r.remaining() < magic.size()) throw TruncatedError(what + ": shorter than its magic");
    if (r.raw(magic.size()) != magic) throw BadMagicError(what + ": bad magic at offset 0, expected " + std::string(magic), 0);
    const std::uint32_t version = r.u32();
    if (version != kFormatVersion) throw FormatError(what + ": unsupported format version " + std::to_string(version));
}

}  // namespace detail

// CVX1: "CVX1" | u32 version | u32 architecture | u32 activation |
// u64 num_classes | u64 input_dim | u64 conv_channels | u64 conv_kernel |
// u64 n_widths | u64 widths[n_widths] | u64 seed | u64 n_params |
// f64 params[n_params] | u64 FNV-1a of all preceding bytes.
// The momentum buffer is not stored; a loaded state has zero velocity.

inline std::string encode_checkpoint(const ModelState& m) {
    ByteWriter w;
    w.raw("CVX1");
    w.u32(kFormatVersion);
    w.u32(static_cast<std::uint32_t>(m.spec.architecture));
    w.u32(static_cast<std::uint32_t>(m.spec.activation));
    w.u64(m.spec.num_classes);
    w.u64(m.spec.input_dim);
    w.u64(m.spec.conv_channels);
    w.u64(m.spec.conv_kernel);
    w.u64(m.spec.layer_widths.size());
    for (std::size_t v : m.spec.layer_widths) w.u64(v);
    w.u64(m.rng_seed);
    w.u64(m.params.numel());
    for (double p : m.params.values()) w.f64(p);
    w.seal();
    return w.bytes();
}

inline ModelState decode_checkpoint(std::string_view bytes, const std::string& what = "checkpoint") {
    ByteReader r(bytes, what);
    detail::expect_magic(r, "CVX1", what);
    ModelState m;
    const std::uint32_t arch = r.u32();
    const std::uint32_t act = r.u32();
    if (arch > 1 || act > 1) throw FormatError(what + ": unknown architecture or activation code");
    m.spec.architecture = static_cast<Architecture>(arch);
    m.spec.activation = static_cast<Activation>(act);
    m.spec.num_classes = r.u64();
    m.spec.input_dim = r.u64();
    m.spec.conv_channels = r.u64();
    m.spec.conv_kernel = r.u64();
    const std::uint64_t nw = r.u64();
    r.need_elements(nw, 8);
    m.spec.layer_widths.resize(nw);
    for (auto& v : m.spec.layer_widths) v = r.u64();
    m.rng_seed = r.u64();
    const std::uint64_t np = r.u64();
    r.need_elements(np, 8);
    std::vector<double> p(np);
    for (double& v : p) v = r.f64();
    r.verify_seal();
    try {
        m.spec.validate();
    } catch (const ConfigError& e) {
        throw InvariantError(what + ": stored model spec is invalid: " + e.what());
    }
    if (np != m.spec.param_count()) {
        throw CountMismatchError(what + ": " + std::to_string(np) + " parameters stored, spec needs " +
                                 std::to_string(m.spec.param_count()));
    }
    m.params = Tensor::vector(std::move(p));
    m.velocity = Tensor({np});
    return m;
}

inline void save_checkpoint(const ModelState& m, const std::filesystem::path& path) { write_file(path, encode_checkpoint(m)); }

inline ModelState load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(read_file(path), path.string());
}

// CVXP: "CVXP" | u32 version | f64 epsilon | u64 N | u64 d | u64 n_poisoned |
// u64 indices[n_poisoned] | f64 deltas[N·d] | u64 FNV-1a of all preceding bytes.

inline std::string encode_perturbations(const PerturbationSet& p) {
    ByteWriter w;
    w.raw("CVXP");
    w.u32(kFormatVersion);
    w.f64(p.epsilon);
    w.u64(p.size());
    w.u64(p.size() == 0 ? 0 : p.deltas.shape()[1]);
    w.u64(p.poisoned_indices.size());
    for (std::size_t i : p.poisoned_indices) w.u64(i);
    for (double v : p.deltas.values()) w.f64(v);
    w.seal();
    return w.bytes();
}

/// Re-checks the budget: indices sorted and in range, ‖δᵢ‖∞ ≤ ε on
/// poisoned rows and δᵢ = 0 elsewhere.
inline void check_perturbation_invariants(const PerturbationSet& p, const std::string& what) {
    if (!(p.epsilon >= 0.0) || !std::isfinite(p.epsilon)) throw InvariantError(what + ": epsilon is not a finite non-negative value");
    const std::size_t n = p.size();
    for (std::size_t k = 0; k < p.poisoned_indices.size(); ++k) {
        if (p.poisoned_indices[k] >= n) throw InvariantError(what + ": poisoned index out of range");
        if (k > 0 && p.poisoned_indices[k] <= p.poisoned_indices[k - 1]) {
            throw InvariantError(what + ": poisoned indices not strictly increasing");
        }
    }
    std::size_t next = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const bool poisoned = next < p.poisoned_indices.size() && p.poisoned_indices[next] == i;
        if (poisoned) ++next;
        for (double v : p.deltas.row(i)) {
            if (!std::isfinite(v) || std::abs(v) > p.epsilon || (!poisoned && v != 0.0)) {
                throw InvariantError(what + ": row " + std::to_string(i) + " violates the budget " + std::to_string(p.epsilon));
            }
        }
    }
}

inline PerturbationSet decode_perturbations(std::string_view bytes, const std::string& what = "perturbations") {
    ByteReader r(bytes, what);
    detail::expect_magic(r, "CVXP", what);
    PerturbationSet p;
    p.epsilon = r.f64();
    const std::uint64_t n = r.u64();
    const std::uint64_t d = r.u64();
    const std::uint64_t k = r.u64();
    r.need_elements(k, 8);
    p.poisoned_indices.resize(k);
    for (auto& i : p.poisoned_indices) i = r.u64();
    if (d != 0 && n > r.remaining() / 8 / d) throw TruncatedError(what + ": payload shorter than declared N·d");
    r.need_elements(n * d, 8);
    std::vector<double> v(n * d);
    for (double& x : v) x = r.f64();
    r.verify_seal();
    p.deltas = Tensor({std::size_t(n), std::size_t(d)}, std::move(v));
    check_perturbation_invariants(p, what);
    return p;
}

inline void save_perturbations(const PerturbationSet& p, const std::filesystem::path& path) {
    check_perturbation_invariants(p, path.string());
    write_file(path, encode_perturbations(p));
}

inline PerturbationSet load_perturbations(const std::filesystem::path& path) {
    return decode_perturbations(read_file(path), path.string());
}

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

/// Decodes an IDX image/label pair; pixels scale by 1/255. Labels must be
/// < 256; num_classes is max label + 1 (at least 2).
inline Dataset decode_idx(std::string_view images, std::string_view labels, const std::string& what = "idx") {
    ByteReader ri(images, what + " images");
    ByteReader rl(labels, what + " labels");
    if (ri.remaining() < 4) throw TruncatedError(what + " images: shorter than its magic");
    if (const std::uint32_t m = ri.u32_be(); m != kIdxImagesMagic) {
        throw BadMagicError(what + " images: bad magic " + hex64(m) + " at offset 0", 0);
    }
    if (rl.remaining() < 4) throw TruncatedError(what + " labels: shorter than its magic");
    if (const std::uint32_t m = rl.u32_be(); m != kIdxLabelsMagic) {
        throw BadMagicError(what + " labels: bad magic " + hex64(m) + " at offset 0", 0);
    }
    const std::uint64_t n = ri.u32_be();
    const std::uint64_t rows = ri.u32_be();
    const std::uint64_t cols = ri.u32_be();
    const std::uint64_t nl = rl.u32_be();
    if (n != nl) {
        throw CountMismatchError(what + ": " + std::to_string(n) + " images but " + std::to_string(nl) + " labels");
    }
    const std::uint64_t d = rows * cols;
    if (n == 0 || d == 0) throw FormatError(what + ": empty image set");
    ri.need_elements(n, d);
    rl.need_elements(n, 1);
    Dataset out;
    std::vector<double> v(n * d);
    for (double& x : v) x = double(static_cast<unsigned char>(ri.raw(1)[0])) / 255.0;
    out.labels.resize(n);
    std::size_t kmax = 1;
    for (auto& y : out.labels) {
        y = static_cast<unsigned char>(rl.raw(1)[0]);
        kmax = std::max(kmax, y + 1);
    }
    if (ri.remaining() != 0 || rl.remaining() != 0) throw FormatError(what + ": trailing bytes after payload");
    out.inputs = Tensor({std::size_t(n), std::size_t(d)}, std::move(v));
    out.num_classes = kmax;
    out.provenance = "idx:" + hex64(fnv1a64(labels, fnv1a64(images)));
    return out;
}

inline Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
    return decode_idx(read_file(images), read_file(labels), images.filename().string());
}

}  // namespace dpa::harness
