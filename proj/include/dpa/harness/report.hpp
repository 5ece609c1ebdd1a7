#pragma once

// CSV tables whose rows all lead with the run seed and config digest.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dpa/errors.hpp"
#include "dpa/harness/config.hpp"
#include "dpa/harness/io.hpp"

namespace dpa::harness {

class CsvTable {
public:
    CsvTable(std::string name, std::vector<std::string> columns, std::uint64_t seed, std::string digest)
        : name_(std::move(name)), columns_(std::move(columns)), seed_(seed), digest_(std::move(digest)) {}

    const std::string& name() const { return name_; }
    std::size_t rows() const { return rows_.size(); }

    /// Cells after the seed/digest prefix, one per column.
    void add(const std::vector<std::string>& cells) {
        if (cells.size() != columns_.size()) {
            throw ShapeError("csv " + name_ + ": row has " + std::to_string(cells.size()) + " cells, expected " +
                             std::to_string(columns_.size()));
        }
        rows_.push_back(cells);
    }

    std::string str() const {
        std::string out = "seed,config_digest";
        for (const auto& c : columns_) out += "," + c;
        out += "\n";
        for (const auto& r : rows_) {
            out += fmt(seed_) + "," + digest_;
            for (const auto& c : r) out += "," + c;
            out += "\n";
        }
        return out;
    }

    std::filesystem::path write(const std::filesystem::path& dir) const {
        const auto path = dir / (name_ + ".csv");
        write_file(path, str());
        return path;
    }

    /// Plot-script stub plotting column `y` against column `x` (names).
    std::filesystem::path write_gnuplot(const std::filesystem::path& dir, const std::string& x, const std::string& y) const {
        const auto path = dir / (name_ + ".gp");
        std::string s;
        s += "set datafile separator ','\n";
        s += "set key autotitle columnhead\n";
        s += "set xlabel '" + x + "'\n";
        s += "set ylabel '" + y + "'\n";
        s += "set terminal pngcairo size 800,500\n";
        s += "set output '" + name_ + ".png'\n";
        s += "plot '" + name_ + ".csv' using '" + x + "':'" + y + "' with linespoints\n";
        write_file(path, s);
        return path;
    }

private:
    std::string name_;
    std::vector<std::string> columns_;
    std::vector<std::vector<std::string>> rows_;
    std::uint64_t seed_;
    std::string digest_;
};

}  // namespace dpa::harness
