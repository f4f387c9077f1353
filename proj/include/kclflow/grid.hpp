#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace kclflow {

using BusId = std::size_t;
using BranchId = std::size_t;

enum class BusKind { Slack, Generator, Load };

struct Bus {
    BusId id = 0;
    BusKind kind = BusKind::Load;
    double p_nom = 0.0;   // net active injection, p.u., generation positive
    double q_nom = 0.0;   // net reactive injection, p.u.
    double vm_nom = 1.0;  // p.u.
    double va_nom = 0.0;  // rad
    int source_number = 0;  // bus number in the originating case file (metadata only)

    bool operator==(const Bus&) const = default;
};

struct Branch {
    BranchId id = 0;
    BusId from_bus = 0;
    BusId to_bus = 0;
    double r = 0.0;
    double x = 0.0;

    bool operator==(const Branch&) const = default;
};

enum class EndpointRole { From, To };

struct Incidence {
    BranchId branch;
    EndpointRole role;

    bool operator==(const Incidence&) const = default;
};

using Adjacency = std::vector<std::vector<Incidence>>;

/// Immutable power grid in per-unit. Construction validates every invariant
/// (dense ids, one slack, finite fields, connectivity) and throws InvalidGrid otherwise.
class Grid {
public:
    Grid(std::vector<Bus> buses, std::vector<Branch> branches, double base_mva = 100.0);

    const std::vector<Bus>& buses() const noexcept { return buses_; }
    const std::vector<Branch>& branches() const noexcept { return branches_; }
    double base_mva() const noexcept { return base_mva_; }

    std::size_t num_buses() const noexcept { return buses_.size(); }
    std::size_t num_branches() const noexcept { return branches_.size(); }
    BusId slack() const noexcept { return slack_; }

    const Adjacency& adjacency() const noexcept { return adjacency_; }
    std::size_t degree(BusId bus) const { return adjacency_.at(bus).size(); }

    /// 64-bit FNV-1a digest over bus count and the ordered branch records.
    std::uint64_t topology_hash() const noexcept { return topology_hash_; }

    bool operator==(const Grid& other) const {
        return base_mva_ == other.base_mva_ && buses_ == other.buses_ && branches_ == other.branches_;
    }

private:
    std::vector<Bus> buses_;
    std::vector<Branch> branches_;
    double base_mva_;
    BusId slack_ = 0;
    Adjacency adjacency_;
    std::uint64_t topology_hash_ = 0;
};

Adjacency adjacency(const Grid& grid);

bool check_connected(const Grid& grid, std::optional<BranchId> removed_branch = std::nullopt);

bool is_slack_adjacent(const Grid& grid, BranchId branch);

/// Branches whose removal is an admissible N-1 contingency (not slack-adjacent, not islanding).
std::vector<BranchId> eligible_contingencies(const Grid& grid);

/// Returns a copy without the given branch. Remaining branches are renumbered densely
/// in their original order.
Grid remove_branch(const Grid& grid, BranchId branch);

std::string hash_hex(std::uint64_t hash);

std::string_view to_string(BusKind kind);
BusKind bus_kind_from_string(std::string_view text);

}  // namespace kclflow
