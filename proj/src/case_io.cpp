#include "kclflow/case_io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>

#include "kclflow/error.hpp"

namespace kclflow {

namespace {

std::string_view trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r\n");
    return s.substr(first, last - first + 1);
}

std::string_view strip_comment(std::string_view line) {
    const auto pos = line.find('%');
    return pos == std::string_view::npos ? line : line.substr(0, pos);
}

double parse_number(std::string_view token, std::size_t line_no) {
    if (!token.empty() && token.front() == '+') token.remove_prefix(1);
    double value = 0.0;
    const auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), value);
    if (ec != std::errc() || ptr != token.data() + token.size())
        throw Error(ErrorKind::SyntaxError,
                    "line " + std::to_string(line_no) + ": cannot parse number '" + std::string(token) + "'");
    return value;
}

std::vector<double> parse_row(std::string_view text, std::size_t line_no) {
    std::vector<double> row;
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && (text[i] == ' ' || text[i] == '\t' || text[i] == ',')) ++i;
        std::size_t j = i;
        while (j < text.size() && text[j] != ' ' && text[j] != '\t' && text[j] != ',') ++j;
        if (j > i) row.push_back(parse_number(text.substr(i, j - i), line_no));
        i = j;
    }
    return row;
}

struct Table {
    std::vector<std::vector<double>> rows;
    std::vector<std::size_t> lines;
};

void require_columns(const Table& t, std::size_t min_cols, const char* name) {
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        if (t.rows[r].size() < min_cols)
            throw Error(ErrorKind::SyntaxError, "line " + std::to_string(t.lines[r]) + ": " + name +
                                                    " row needs at least " + std::to_string(min_cols) +
                                                    " columns");
    }
}

int as_int(double v, std::size_t line_no) {
    if (std::floor(v) != v)
        throw Error(ErrorKind::SyntaxError, "line " + std::to_string(line_no) + ": expected an integer");
    return static_cast<int>(v);
}

}  // namespace

RawCase parse_case_text(std::string_view source) {
    std::map<std::string, Table> tables;
    std::optional<double> base_mva;

    std::string current;      // table being read; empty when outside
    char closing = 0;
    bool capture = false;

    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= source.size()) {
        const auto nl = source.find('\n', pos);
        const std::string_view raw_line =
            source.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
        pos = (nl == std::string_view::npos) ? source.size() + 1 : nl + 1;
        ++line_no;

        std::string_view line = trim(strip_comment(raw_line));
        if (line.empty()) continue;

        if (current.empty()) {
            if (!line.starts_with("mpc.")) continue;
            const auto eq = line.find('=');
            if (eq == std::string_view::npos) continue;
            const std::string name(trim(line.substr(4, eq - 4)));
            std::string_view rhs = trim(line.substr(eq + 1));
            if (name == "baseMVA") {
                if (rhs.ends_with(';')) rhs.remove_suffix(1);
                base_mva = parse_number(trim(rhs), line_no);
                continue;
            }
            if (rhs.empty() || (rhs.front() != '[' && rhs.front() != '{')) continue;
            closing = rhs.front() == '[' ? ']' : '}';
            capture = closing == ']' && (name == "bus" || name == "gen" || name == "branch");
            current = name;
            if (capture) tables[current];
            line = trim(rhs.substr(1));
            if (line.empty()) continue;
        }

        bool ends = false;
        const auto close_pos = line.find(closing);
        if (close_pos != std::string_view::npos) {
            ends = true;
            line = line.substr(0, close_pos);
        }
        if (capture) {
            std::size_t start = 0;
            while (start <= line.size()) {
                const auto semi = line.find(';', start);
                const auto chunk = trim(line.substr(start, semi == std::string_view::npos ? std::string_view::npos
                                                                                        : semi - start));
                if (!chunk.empty()) {
                    tables[current].rows.push_back(parse_row(chunk, line_no));
                    tables[current].lines.push_back(line_no);
                }
                if (semi == std::string_view::npos) break;
                start = semi + 1;
            }
        }
        if (ends) {
            current.clear();
            capture = false;
        }
    }
    if (!current.empty())
        throw Error(ErrorKind::SyntaxError, "line " + std::to_string(line_no) + ": unterminated table '" + current + "'");

    if (!base_mva) throw Error(ErrorKind::MissingTable, "baseMVA");
    for (const char* name : {"bus", "gen", "branch"}) {
        auto it = tables.find(name);
        if (it == tables.end() || it->second.rows.empty()) throw Error(ErrorKind::MissingTable, name);
    }

    RawCase raw;
    raw.base_mva = *base_mva;
    const Table& bus = tables["bus"];
    const Table& gen = tables["gen"];
    const Table& branch = tables["branch"];
    require_columns(bus, 9, "bus");
    require_columns(gen, 6, "gen");
    require_columns(branch, 4, "branch");

    for (std::size_t r = 0; r < bus.rows.size(); ++r) {
        const auto& v = bus.rows[r];
        raw.bus.push_back({as_int(v[0], bus.lines[r]), as_int(v[1], bus.lines[r]), v[2], v[3], v[4], v[5], v[7],
                           v[8]});
    }
    for (std::size_t r = 0; r < gen.rows.size(); ++r) {
        const auto& v = gen.rows[r];
        if (v.size() <= 7) ++raw.warnings;  // status column absent, assumed in service
        raw.gen.push_back({as_int(v[0], gen.lines[r]), v[1], v[2], v[5],
                           v.size() > 7 ? as_int(v[7], gen.lines[r]) : 1});
    }
    for (std::size_t r = 0; r < branch.rows.size(); ++r) {
        const auto& v = branch.rows[r];
        CaseBranchRow row;
        row.from = as_int(v[0], branch.lines[r]);
        row.to = as_int(v[1], branch.lines[r]);
        row.r = v[2];
        row.x = v[3];
        if (v.size() > 4) row.b = v[4];
        if (v.size() > 8) row.ratio = v[8];
        if (v.size() > 9) row.angle = v[9];
        if (v.size() > 10)
            row.status = as_int(v[10], branch.lines[r]);
        else
            ++raw.warnings;
        raw.branch.push_back(row);
    }
    return raw;
}

Grid lower_case(const RawCase& raw, IgnoredFeatures* ignored) {
    IgnoredFeatures tally;
    std::map<int, std::size_t> index_of;
    for (const CaseBusRow& row : raw.bus) {
        if (!index_of.emplace(row.number, index_of.size()).second)
            throw Error(ErrorKind::InvalidGrid, "duplicate bus number " + std::to_string(row.number));
    }
    auto lookup = [&](int number, const char* what) {
        auto it = index_of.find(number);
        if (it == index_of.end())
            throw Error(ErrorKind::DanglingReference,
                        std::string(what) + " references missing bus " + std::to_string(number));
        return it->second;
    };

    const std::size_t slack_count =
        static_cast<std::size_t>(std::count_if(raw.bus.begin(), raw.bus.end(), [](const auto& b) { return b.type == 3; }));
    if (slack_count == 0) throw Error(ErrorKind::NoSlack, "case has no bus of type 3");
    if (slack_count > 1) throw Error(ErrorKind::MultipleSlack, "case has more than one bus of type 3");

    const double base = raw.base_mva;
    std::vector<Bus> buses;
    buses.reserve(raw.bus.size());
    for (const CaseBusRow& row : raw.bus) {
        Bus bus;
        bus.id = buses.size();
        bus.source_number = row.number;
        switch (row.type) {
            case 1: bus.kind = BusKind::Load; break;
            case 2: bus.kind = BusKind::Generator; break;
            case 3: bus.kind = BusKind::Slack; break;
            default:
                throw Error(ErrorKind::InvalidGrid, "unsupported bus type " + std::to_string(row.type) + " at bus " +
                                                        std::to_string(row.number));
        }
        bus.p_nom = -row.pd / base;
        bus.q_nom = -row.qd / base;
        bus.vm_nom = row.vm;
        bus.va_nom = row.va_deg * std::numbers::pi / 180.0;
        if (row.gs != 0.0 || row.bs != 0.0) ++tally.bus_shunts;
        buses.push_back(bus);
    }

    std::vector<bool> has_setpoint(buses.size(), false);
    for (const CaseGenRow& gen : raw.gen) {
        const std::size_t i = lookup(gen.bus, "gen");
        if (gen.status <= 0) {
            ++tally.out_of_service_gens;
            continue;
        }
        buses[i].p_nom += gen.pg / base;
        buses[i].q_nom += gen.qg / base;
        if (buses[i].kind != BusKind::Load && !has_setpoint[i]) {
            buses[i].vm_nom = gen.vg;
            has_setpoint[i] = true;
        }
    }

    std::vector<Branch> branches;
    for (const CaseBranchRow& row : raw.branch) {
        const std::size_t f = lookup(row.from, "branch");
        const std::size_t t = lookup(row.to, "branch");
        if (row.status <= 0) {
            ++tally.out_of_service_branches;
            continue;
        }
        if (row.b != 0.0) ++tally.line_charging;
        if ((row.ratio != 0.0 && row.ratio != 1.0) || row.angle != 0.0) ++tally.tap_or_shift;
        branches.push_back({branches.size(), f, t, row.r, row.x});
    }

    if (ignored) *ignored = tally;
    return Grid(std::move(buses), std::move(branches), base);
}

nlohmann::json grid_to_json(const Grid& grid) {
    nlohmann::json doc;
    doc["base_mva"] = grid.base_mva();
    auto& buses = doc["buses"] = nlohmann::json::array();
    for (const Bus& b : grid.buses()) {
        buses.push_back({{"id", b.id},
                         {"kind", to_string(b.kind)},
                         {"p", b.p_nom},
                         {"q", b.q_nom},
                         {"vm", b.vm_nom},
                         {"va", b.va_nom},
                         {"number", b.source_number}});
    }
    auto& branches = doc["branches"] = nlohmann::json::array();
    for (const Branch& br : grid.branches()) {
        branches.push_back({{"id", br.id}, {"from", br.from_bus}, {"to", br.to_bus}, {"r", br.r}, {"x", br.x}});
    }
    return doc;
}

Grid grid_from_json(const nlohmann::json& doc) {
    try {
        std::vector<Bus> buses;
        for (const auto& b : doc.at("buses")) {
            Bus bus;
            bus.id = b.at("id").get<std::size_t>();
            bus.kind = bus_kind_from_string(b.at("kind").get<std::string>());
            bus.p_nom = b.at("p").get<double>();
            bus.q_nom = b.at("q").get<double>();
            bus.vm_nom = b.at("vm").get<double>();
            bus.va_nom = b.at("va").get<double>();
            bus.source_number = b.value("number", static_cast<int>(bus.id) + 1);
            buses.push_back(bus);
        }
        std::vector<Branch> branches;
        for (const auto& e : doc.at("branches")) {
            branches.push_back({e.at("id").get<std::size_t>(), e.at("from").get<std::size_t>(),
                                e.at("to").get<std::size_t>(), e.at("r").get<double>(), e.at("x").get<double>()});
        }
        return Grid(std::move(buses), std::move(branches), doc.at("base_mva").get<double>());
    } catch (const nlohmann::json::exception& ex) {
        throw Error(ErrorKind::InvalidGrid, std::string("malformed grid JSON: ") + ex.what());
    }
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text_file(const std::filesystem::path& path, std::string_view contents) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
    out << contents;
    if (!out) throw Error(ErrorKind::Io, "write failed for " + path.string());
}

Grid load_grid(const std::filesystem::path& path) {
    const std::string text = read_text_file(path);
    const auto first = text.find_first_not_of(" \t\r\n");
    if (first != std::string::npos && text[first] == '{') {
        nlohmann::json doc;
        try {
            doc = nlohmann::json::parse(text);
        } catch (const nlohmann::json::parse_error& ex) {
            throw Error(ErrorKind::InvalidGrid, path.string() + ": " + ex.what());
        }
        return grid_from_json(doc);
    }
    return lower_case(parse_case_text(text));
}

}  // namespace kclflow
