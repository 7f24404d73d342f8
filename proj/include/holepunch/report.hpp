//
// Licensed under the Apache License, Version 2.0 (the "License").
// See the LICENSE file in the project root for details.
//

#pragma once

#include <algorithm>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "holepunch/natcheck.hpp"
#include "holepunch/scenario.hpp"

namespace holepunch::report {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Fleet specification
// ---------------------------------------------------------------------------

struct FleetEntry {
    std::string label;
    NatConfig config;
    int count = 1;
};

struct FleetSpec {
    std::vector<FleetEntry> entries;
};

inline FleetSpec fleet_from_json(const json& doc) {
    FleetSpec fleet;
    std::set<std::string> seen;
    for (const auto& e : doc.at("entries")) {
        FleetEntry entry;
        entry.label = e.at("label");
        entry.count = e.value("count", 1);
        if (e.contains("config")) entry.config = scenario::nat_config_from_json(e.at("config"));
        if (entry.count <= 0) throw std::invalid_argument("fleet count must be positive");
        if (!seen.insert(entry.label).second)
            throw std::invalid_argument("duplicate fleet label: " + entry.label);
        fleet.entries.push_back(std::move(entry));
    }
    return fleet;
}

inline json to_json(const FleetSpec& fleet) {
    json entries = json::array();
    for (const auto& e : fleet.entries)
        entries.push_back({{"label", e.label},
                           {"count", e.count},
                           {"config", scenario::to_json(e.config)}});
    return json{{"entries", entries}};
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

struct SweepResult {
    std::string label;
    std::optional<NatProfile> profile;
    std::string error;
};

namespace detail {

// stable across platforms, unlike std::hash
inline uint64_t fnv1a(const std::string& s) {
    uint64_t h = 14695981039346656037ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

} // namespace detail

/// Runs the full probe battery once per fleet unit. Each unit gets its own
/// isolated world; the seed depends only on (base seed, label, index), so a
/// sweep is reproducible and insensitive to entry order.
inline std::vector<SweepResult> sweep(const FleetSpec& fleet, uint64_t seed) {
    std::vector<SweepResult> results;
    for (const auto& entry : fleet.entries) {
        for (int i = 0; i < entry.count; ++i) {
            SweepResult r;
            r.label = entry.label;
            try {
                uint64_t unit_seed = detail::fnv1a(entry.label) ^ (seed + uint64_t(i) * 0x9e3779b97f4a7c15ull);
                auto w = scenario::make_probe(unit_seed, entry.config);
                r.profile = NatCheck(*w).run();
            } catch (const std::exception& e) {
                r.error = e.what();
            }
            results.push_back(std::move(r));
        }
    }
    return results;
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

struct Cell {
    int num = 0;
    int den = 0;

    friend bool operator==(const Cell&, const Cell&) = default;
};

struct AggregateRow {
    std::string label;
    Cell udp_punch;
    Cell udp_hairpin;
    Cell tcp_punch;
    Cell tcp_hairpin;

    friend bool operator==(const AggregateRow&, const AggregateRow&) = default;
};

/// Round-half-up integer percent.
inline int percent(int num, int den) { return (200 * num + den) / (2 * den); }

namespace detail {

inline void tally(Cell& cell, const std::optional<bool>& verdict) {
    if (!verdict) return;  // inconclusive results shrink the denominator
    ++cell.den;
    if (*verdict) ++cell.num;
}

inline void tally_row(AggregateRow& row, const NatProfile& p) {
    Verdict v = classify(p);
    tally(row.udp_punch, v.udp_punch);
    tally(row.udp_hairpin, v.udp_hairpin);
    // the headline TCP column is the strict verdict: RST counts against
    tally(row.tcp_punch, v.tcp_punch_strict);
    tally(row.tcp_hairpin, v.tcp_hairpin);
}

} // namespace detail

/// Per-label rows in first-appearance order, then a totals row computed from
/// raw counts (not averaged percentages).
inline std::vector<AggregateRow> aggregate(const std::vector<SweepResult>& results) {
    std::vector<AggregateRow> rows;
    auto row_for = [&rows](const std::string& label) -> AggregateRow& {
        for (auto& r : rows)
            if (r.label == label) return r;
        rows.push_back(AggregateRow{label, {}, {}, {}, {}});
        return rows.back();
    };
    AggregateRow total{"All Vendors", {}, {}, {}, {}};
    for (const auto& r : results) {
        if (!r.profile) continue;
        detail::tally_row(row_for(r.label), *r.profile);
        detail::tally_row(total, *r.profile);
    }
    rows.push_back(std::move(total));
    return rows;
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

inline std::string format_cell(const Cell& c) {
    if (c.den == 0) return "–";
    return std::to_string(c.num) + "/" + std::to_string(c.den) + " (" +
           std::to_string(percent(c.num, c.den)) + "%)";
}

inline std::string render_table(const std::vector<AggregateRow>& rows) {
    const std::vector<std::string> headers = {"NAT", "UDP punch", "UDP hairpin", "TCP punch",
                                              "TCP hairpin"};
    std::vector<std::vector<std::string>> grid;
    grid.push_back(headers);
    for (const auto& r : rows)
        grid.push_back({r.label, format_cell(r.udp_punch), format_cell(r.udp_hairpin),
                        format_cell(r.tcp_punch), format_cell(r.tcp_hairpin)});

    std::vector<size_t> widths(headers.size(), 0);
    for (const auto& row : grid)
        for (size_t i = 0; i < row.size(); ++i) widths[i] = std::max(widths[i], row[i].size());

    std::ostringstream out;
    for (const auto& row : grid) {
        for (size_t i = 0; i < row.size(); ++i) {
            out << row[i];
            if (i + 1 < row.size()) out << std::string(widths[i] - row[i].size() + 2, ' ');
        }
        out << "\n";
    }
    return out.str();
}

inline json cell_to_json(const Cell& c) {
    json j{{"num", c.num}, {"den", c.den}};
    if (c.den > 0) j["percent"] = percent(c.num, c.den);
    else j["percent"] = nullptr;
    return j;
}

inline Cell cell_from_json(const json& j) { return Cell{j.at("num"), j.at("den")}; }

inline json rows_to_json(const std::vector<AggregateRow>& rows) {
    json out = json::array();
    for (const auto& r : rows)
        out.push_back({{"label", r.label},
                       {"udp_punch", cell_to_json(r.udp_punch)},
                       {"udp_hairpin", cell_to_json(r.udp_hairpin)},
                       {"tcp_punch", cell_to_json(r.tcp_punch)},
                       {"tcp_hairpin", cell_to_json(r.tcp_hairpin)}});
    return out;
}

inline std::vector<AggregateRow> rows_from_json(const json& doc) {
    std::vector<AggregateRow> rows;
    for (const auto& j : doc)
        rows.push_back(AggregateRow{j.at("label"), cell_from_json(j.at("udp_punch")),
                                    cell_from_json(j.at("udp_hairpin")),
                                    cell_from_json(j.at("tcp_punch")),
                                    cell_from_json(j.at("tcp_hairpin"))});
    return rows;
}

} // namespace holepunch::report
