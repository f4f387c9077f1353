#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "kclflow/grid.hpp"

namespace kclflow {

struct CaseBusRow {
    int number = 0;
    int type = 1;  // 1 PQ, 2 PV, 3 slack
    double pd = 0.0, qd = 0.0;  // MW / MVAr
    double gs = 0.0, bs = 0.0;
    double vm = 1.0;
    double va_deg = 0.0;
};

struct CaseGenRow {
    int bus = 0;
    double pg = 0.0, qg = 0.0;
    double vg = 1.0;
    int status = 1;
};

struct CaseBranchRow {
    int from = 0, to = 0;
    double r = 0.0, x = 0.0, b = 0.0;
    double ratio = 0.0, angle = 0.0;
    int status = 1;
};

/// Tables of a MATPOWER-style case, in the file's own units.
struct RawCase {
    double base_mva = 100.0;
    std::vector<CaseBusRow> bus;
    std::vector<CaseGenRow> gen;
    std::vector<CaseBranchRow> branch;
    std::size_t warnings = 0;
};

/// Features present in the case file that the series-only line model drops at lowering.
struct IgnoredFeatures {
    std::size_t bus_shunts = 0;
    std::size_t line_charging = 0;
    std::size_t tap_or_shift = 0;
    std::size_t out_of_service_branches = 0;
    std::size_t out_of_service_gens = 0;

    std::size_t total() const {
        return bus_shunts + line_charging + tap_or_shift + out_of_service_branches + out_of_service_gens;
    }
};

/// Parses `mpc.baseMVA`, `mpc.bus`, `mpc.gen` and `mpc.branch` from case text.
/// Throws SyntaxError (with line number) or MissingTable.
RawCase parse_case_text(std::string_view source);

Grid lower_case(const RawCase& raw, IgnoredFeatures* ignored = nullptr);

nlohmann::json grid_to_json(const Grid& grid);
Grid grid_from_json(const nlohmann::json& doc);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view contents);

/// Loads a grid from either a `.m` case file or canonical grid JSON (by content sniffing).
Grid load_grid(const std::filesystem::path& path);

}  // namespace kclflow
