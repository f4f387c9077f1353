#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "kclflow/case_io.hpp"
#include "kclflow/error.hpp"
#include "support.hpp"

using namespace kclflow;
using namespace testing;

namespace {

const char* kMinimal = R"(function mpc = tiny
% two buses
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
	1	3	0	0	0	0	1	1.0	0	135	1	1.05	0.95;
	2	1	100	20	0	0	1	1.0	0	135	1	1.05	0.95;
];
mpc.gen = [
	1	150	0	300	-300	1.02	100	1	250	10;
];
mpc.branch = [
	1	2	0.01	0.1	0	0	0	0	0	0	1	-360	360;
];
mpc.gencost = [
	2	0	0	3	0.01	40	0;
];
)";

ErrorKind kind_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.kind();
    }
    FAIL("expected an Error");
    return ErrorKind::Io;
}

// Counts data rows of `mpc.<name> = [ ... ];` by scanning lines.
std::size_t count_rows(const std::string& text, const std::string& name) {
    std::istringstream in(text);
    std::string line;
    bool inside = false;
    std::size_t rows = 0;
    while (std::getline(in, line)) {
        if (!inside) {
            if (line.rfind("mpc." + name + " = [", 0) == 0) inside = true;
            continue;
        }
        if (line.find("];") != std::string::npos) break;
        const auto first = line.find_first_not_of(" \t");
        if (first == std::string::npos || line[first] == '%') continue;
        ++rows;
    }
    return rows;
}

}  // namespace

TEST_CASE("minimal case parses to (2,1,1)") {
    const RawCase raw = parse_case_text(kMinimal);
    CHECK(raw.bus.size() == 2);
    CHECK(raw.gen.size() == 1);
    CHECK(raw.branch.size() == 1);
    CHECK(raw.warnings == 0);
    CHECK(raw.base_mva == 100.0);
    CHECK(raw.bus[1].pd == 100.0);
    CHECK(raw.branch[0].x == doctest::Approx(0.1));
}

TEST_CASE("lowering converts to per-unit") {
    const Grid g = lower_case(parse_case_text(kMinimal));
    CHECK(g.num_buses() == 2);
    CHECK(g.buses()[1].p_nom == doctest::Approx(-1.0));
    CHECK(g.buses()[1].q_nom == doctest::Approx(-0.2));
    CHECK(g.buses()[0].p_nom == doctest::Approx(1.5));
    CHECK(g.buses()[0].vm_nom == doctest::Approx(1.02));
    CHECK(g.buses()[0].kind == BusKind::Slack);
    CHECK(g.buses()[1].kind == BusKind::Load);
}

TEST_CASE("generation nets against load at the same bus") {
    std::string text = kMinimal;
    text.replace(text.find("2\t1\t100\t20"), 10, "2\t2\t50\t20");
    text.replace(text.find("mpc.gen = [\n"), 12, "mpc.gen = [\n\t2\t150\t0\t300\t-300\t1.01\t100\t1\t250\t10;\n");
    const Grid g = lower_case(parse_case_text(text));
    CHECK(g.buses()[1].p_nom == doctest::Approx(1.0));
    CHECK(g.buses()[1].kind == BusKind::Generator);
    CHECK(g.buses()[1].vm_nom == doctest::Approx(1.01));
}

TEST_CASE("multiple generators on one bus are summed") {
    std::string text = kMinimal;
    text.replace(text.find("mpc.gen = [\n"), 12, "mpc.gen = [\n\t1\t50\t5\t300\t-300\t1.02\t100\t1\t250\t10;\n");
    const Grid g = lower_case(parse_case_text(text));
    CHECK(g.buses()[0].p_nom == doctest::Approx(2.0));
    CHECK(g.buses()[0].q_nom == doctest::Approx(0.05));
}

TEST_CASE("parse errors") {
    std::string no_branch = kMinimal;
    no_branch.erase(no_branch.find("mpc.branch"), no_branch.find("mpc.gencost") - no_branch.find("mpc.branch"));
    try {
        parse_case_text(no_branch);
        FAIL("expected MissingTable");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::MissingTable);
        CHECK(std::string(e.what()).find("branch") != std::string::npos);
    }

    std::string bad = kMinimal;
    bad.replace(bad.find("0.01\t0.1"), 4, "0.x1");
    try {
        parse_case_text(bad);
        FAIL("expected SyntaxError");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::SyntaxError);
        CHECK(std::string(e.what()).find("line 13") != std::string::npos);
    }

    std::string open = kMinimal;
    open.erase(open.find("mpc.gencost"));
    open.erase(open.rfind("];"));
    CHECK(kind_of([&] { parse_case_text(open); }) == ErrorKind::SyntaxError);

    std::string no_base = kMinimal;
    no_base.erase(no_base.find("mpc.baseMVA"), 16);
    CHECK(kind_of([&] { parse_case_text(no_base); }) == ErrorKind::MissingTable);
}

TEST_CASE("lowering errors") {
    RawCase raw = parse_case_text(kMinimal);
    RawCase two_slack = raw;
    two_slack.bus[1].type = 3;
    CHECK(kind_of([&] { lower_case(two_slack); }) == ErrorKind::MultipleSlack);
    RawCase no_slack = raw;
    no_slack.bus[0].type = 2;
    CHECK(kind_of([&] { lower_case(no_slack); }) == ErrorKind::NoSlack);
    RawCase dangling = raw;
    dangling.branch[0].to = 7;
    CHECK(kind_of([&] { lower_case(dangling); }) == ErrorKind::DanglingReference);
    RawCase bad_gen = raw;
    bad_gen.gen[0].bus = 9;
    CHECK(kind_of([&] { lower_case(bad_gen); }) == ErrorKind::DanglingReference);
}

TEST_CASE("out-of-service rows are dropped and counted") {
    RawCase raw = parse_case_text(kMinimal);
    raw.branch.push_back(raw.branch[0]);
    raw.branch.back().status = 0;
    raw.gen.push_back(raw.gen[0]);
    raw.gen.back().status = 0;
    raw.gen.back().pg = 999;
    IgnoredFeatures ignored;
    const Grid g = lower_case(raw, &ignored);
    CHECK(g.num_branches() == 1);
    CHECK(ignored.out_of_service_branches == 1);
    CHECK(ignored.out_of_service_gens == 1);
    CHECK(g.buses()[0].p_nom == doctest::Approx(1.5));
}

TEST_CASE("fixtures parse totally without warnings") {
    for (const char* name : {"case14.m", "case118.m"}) {
        const std::string text = read_text_file(fixture(name));
        const RawCase raw = parse_case_text(text);
        CHECK(raw.warnings == 0);
        CHECK(raw.bus.size() == count_rows(text, "bus"));
        CHECK(raw.branch.size() == count_rows(text, "branch"));
        CHECK(raw.gen.size() == count_rows(text, "gen"));
        const Grid g = lower_case(raw);
        CHECK(check_connected(g));
        CHECK(bfs_connected(g));
    }
    const RawCase raw14 = parse_case_text(read_text_file(fixture("case14.m")));
    CHECK(raw14.bus.size() == 14);
    CHECK(raw14.branch.size() == 20);
    CHECK(ieee118().num_buses() == 118);
    CHECK(ieee118().num_branches() == 186);
}

TEST_CASE("grid JSON round-trip is exact") {
    for (const Grid* g : {&ieee14(), &ieee118()}) {
        const std::string text = grid_to_json(*g).dump();
        const Grid back = grid_from_json(nlohmann::json::parse(text));
        CHECK(back == *g);
        CHECK(back.topology_hash() == g->topology_hash());
        CHECK(grid_to_json(back).dump() == text);
    }
}

TEST_CASE("load_grid sniffs JSON and case text") {
    const auto path = std::filesystem::temp_directory_path() / "kclflow_roundtrip_grid.json";
    write_text_file(path, grid_to_json(five_bus()).dump(2));
    CHECK(load_grid(path) == five_bus());
    std::filesystem::remove(path);
    CHECK(kind_of([] { load_grid("/nonexistent/grid.json"); }) == ErrorKind::Io);
    CHECK(kind_of([] { grid_from_json(nlohmann::json::parse(R"({"buses": 3})")); }) == ErrorKind::InvalidGrid);
}
