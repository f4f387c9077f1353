#include "kclflow/grid.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <numeric>

#include "kclflow/error.hpp"

namespace kclflow {

namespace {

constexpr std::uint64_t kFnvOffset = 1469598103934665603ull;
constexpr std::uint64_t kFnvPrime = 1099511628211ull;

template <typename T>
void fnv_mix(std::uint64_t& h, const T& value) {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    for (unsigned char b : bytes) {
        h ^= b;
        h *= kFnvPrime;
    }
}

class DisjointSets {
public:
    explicit DisjointSets(std::size_t n) : parent_(n) { std::iota(parent_.begin(), parent_.end(), 0); }

    std::size_t find(std::size_t v) {
        while (parent_[v] != v) {
            parent_[v] = parent_[parent_[v]];
            v = parent_[v];
        }
        return v;
    }

    bool unite(std::size_t a, std::size_t b) {
        a = find(a);
        b = find(b);
        if (a == b) return false;
        parent_[b] = a;
        return true;
    }

private:
    std::vector<std::size_t> parent_;
};

}  // namespace

Grid::Grid(std::vector<Bus> buses, std::vector<Branch> branches, double base_mva)
    : buses_(std::move(buses)), branches_(std::move(branches)), base_mva_(base_mva) {
    if (buses_.empty()) throw Error(ErrorKind::InvalidGrid, "grid has no buses");
    if (!(base_mva_ > 0.0) || !std::isfinite(base_mva_))
        throw Error(ErrorKind::InvalidGrid, "base_mva must be positive and finite");

    std::size_t slack_count = 0;
    for (std::size_t i = 0; i < buses_.size(); ++i) {
        const Bus& bus = buses_[i];
        if (bus.id != i) throw Error(ErrorKind::InvalidGrid, "bus ids must be dense and ordered");
        if (!std::isfinite(bus.p_nom) || !std::isfinite(bus.q_nom) || !std::isfinite(bus.vm_nom) ||
            !std::isfinite(bus.va_nom))
            throw Error(ErrorKind::InvalidGrid, "bus " + std::to_string(i) + " has a non-finite field");
        if (!(bus.vm_nom > 0.0))
            throw Error(ErrorKind::InvalidGrid, "bus " + std::to_string(i) + " has vm_nom <= 0");
        if (bus.kind == BusKind::Slack) {
            ++slack_count;
            slack_ = i;
        }
    }
    if (slack_count == 0) throw Error(ErrorKind::NoSlack, "grid has no slack bus");
    if (slack_count > 1) throw Error(ErrorKind::MultipleSlack, "grid has more than one slack bus");

    adjacency_.assign(buses_.size(), {});
    for (std::size_t e = 0; e < branches_.size(); ++e) {
        const Branch& br = branches_[e];
        if (br.id != e) throw Error(ErrorKind::InvalidGrid, "branch ids must be dense and ordered");
        if (br.from_bus >= buses_.size() || br.to_bus >= buses_.size())
            throw Error(ErrorKind::DanglingReference, "branch " + std::to_string(e) + " references a missing bus");
        if (br.from_bus == br.to_bus)
            throw Error(ErrorKind::InvalidGrid, "branch " + std::to_string(e) + " is a self-loop");
        if (!std::isfinite(br.r) || !std::isfinite(br.x) || br.r < 0.0)
            throw Error(ErrorKind::InvalidGrid, "branch " + std::to_string(e) + " has invalid r/x");
        if (br.r * br.r + br.x * br.x <= 0.0)
            throw Error(ErrorKind::ZeroImpedance, "branch " + std::to_string(e) + " has zero impedance");
        adjacency_[br.from_bus].push_back({e, EndpointRole::From});
        adjacency_[br.to_bus].push_back({e, EndpointRole::To});
    }
    if (!check_connected(*this)) throw Error(ErrorKind::InvalidGrid, "grid is not connected");

    std::uint64_t h = kFnvOffset;
    fnv_mix(h, static_cast<std::uint64_t>(buses_.size()));
    for (const Branch& br : branches_) {
        fnv_mix(h, static_cast<std::uint64_t>(br.from_bus));
        fnv_mix(h, static_cast<std::uint64_t>(br.to_bus));
        fnv_mix(h, br.r);
        fnv_mix(h, br.x);
    }
    topology_hash_ = h;
}

Adjacency adjacency(const Grid& grid) { return grid.adjacency(); }

bool check_connected(const Grid& grid, std::optional<BranchId> removed_branch) {
    DisjointSets sets(grid.num_buses());
    std::size_t components = grid.num_buses();
    for (const Branch& br : grid.branches()) {
        if (removed_branch && br.id == *removed_branch) continue;
        if (sets.unite(br.from_bus, br.to_bus)) --components;
    }
    return components == 1;
}

bool is_slack_adjacent(const Grid& grid, BranchId branch) {
    const Branch& br = grid.branches().at(branch);
    return br.from_bus == grid.slack() || br.to_bus == grid.slack();
}

std::vector<BranchId> eligible_contingencies(const Grid& grid) {
    std::vector<BranchId> out;
    for (const Branch& br : grid.branches()) {
        if (is_slack_adjacent(grid, br.id)) continue;
        if (!check_connected(grid, br.id)) continue;
        out.push_back(br.id);
    }
    return out;
}

Grid remove_branch(const Grid& grid, BranchId branch) {
    if (branch >= grid.num_branches())
        throw Error(ErrorKind::InvalidArgument, "branch " + std::to_string(branch) + " does not exist");
    if (is_slack_adjacent(grid, branch))
        throw Error(ErrorKind::SlackAdjacent, "branch " + std::to_string(branch) + " touches the slack bus");
    if (!check_connected(grid, branch))
        throw Error(ErrorKind::WouldIsland, "removing branch " + std::to_string(branch) + " islands the grid");

    std::vector<Branch> kept;
    kept.reserve(grid.num_branches() - 1);
    for (const Branch& br : grid.branches()) {
        if (br.id == branch) continue;
        Branch copy = br;
        copy.id = kept.size();
        kept.push_back(copy);
    }
    return Grid(grid.buses(), std::move(kept), grid.base_mva());
}

std::string hash_hex(std::uint64_t hash) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(hash));
    return buf;
}

std::string_view to_string(BusKind kind) {
    switch (kind) {
        case BusKind::Slack: return "slack";
        case BusKind::Generator: return "pv";
        case BusKind::Load: return "pq";
    }
    return "pq";
}

BusKind bus_kind_from_string(std::string_view text) {
    if (text == "slack") return BusKind::Slack;
    if (text == "pv") return BusKind::Generator;
    if (text == "pq") return BusKind::Load;
    throw Error(ErrorKind::InvalidGrid, "unknown bus kind '" + std::string(text) + "'");
}

}  // namespace kclflow
