#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "kclflow/acpf.hpp"
#include "kclflow/grid.hpp"

namespace kclflow {

/// How the second argument of Normal(nominal, spread) is read.
enum class SpreadReading { Variance, StdDev };

struct SamplingConfig {
    double spread = 0.01;
    SpreadReading reading = SpreadReading::Variance;
    double vm_min = 0.8;
    double vm_max = 1.2;

    double stddev() const;
};

struct NodeSample {
    Eigen::VectorXd p;
    Eigen::VectorXd q;
    Eigen::VectorXd vm;
    Eigen::VectorXd va;
};

/// P, Q, Vm drawn around the nominal values of every bus; slack Vm/Va stay nominal.
NodeSample sample_scenario(const Grid& grid, std::uint64_t seed, const SamplingConfig& config = {});

enum class Regime { N, N1 };
enum class Split { Unassigned, Train, Val, Test };

std::string_view to_string(Regime regime);
std::string_view to_string(Split split);
Regime regime_from_string(std::string_view text);
Split split_from_string(std::string_view text);

struct Scenario {
    std::uint64_t topology_hash = 0;  // post-contingency topology
    std::optional<BranchId> removed_branch;
    Eigen::MatrixXd node_inputs;  // N × 3: P, Q, Vm in p.u.
    FlowSet target_flows;         // 4|E'| for the post-contingency branch set
    Eigen::VectorXd net_p;        // −p_inj
    Eigen::VectorXd net_q;        // −q_inj
    std::uint64_t seed = 0;
    Split split = Split::Unassigned;
};

/// Z-score statistics for network inputs, fitted on the training split.
struct FeatureStats {
    std::array<double, 3> node_mean{0.0, 0.0, 0.0};
    std::array<double, 3> node_std{1.0, 1.0, 1.0};
    std::array<double, 2> edge_mean{0.0, 0.0};
    std::array<double, 2> edge_std{1.0, 1.0};

    bool operator==(const FeatureStats&) const = default;
};

nlohmann::json stats_to_json(const FeatureStats& stats);
FeatureStats stats_from_json(const nlohmann::json& doc);

struct Dataset {
    std::uint64_t topology_hash = 0;  // base grid
    Regime regime = Regime::N;
    SamplingConfig sampling;
    std::uint64_t seed = 0;
    std::optional<FeatureStats> normalization;
    std::vector<Scenario> scenarios;

    std::vector<const Scenario*> with_split(Split split) const;
};

struct GenerationOptions {
    SamplingConfig sampling;
    SolverOptions solver;
    unsigned workers = 1;
    std::size_t max_attempt_factor = 10;
};

struct GenerationStats {
    std::size_t attempts = 0;
    std::size_t divergences = 0;
};

/// Samples, applies an N-1 outage when requested, solves with Newton-Raphson and records labels.
/// Each index draws from its own stream derived from (seed, index, attempt).
Dataset make_dataset(const Grid& grid, std::size_t count, Regime regime, std::uint64_t seed,
                     const GenerationOptions& options = {}, GenerationStats* stats = nullptr);

/// Deterministic shuffle then partition into train/val/test, and fits normalization on train.
/// N-1 datasets go entirely to test; their fractions must put nothing in train.
Dataset split_dataset(const Grid& grid, Dataset ds, std::array<double, 3> fractions, std::uint64_t seed);

FeatureStats fit_stats(const Grid& grid, const std::vector<const Scenario*>& train);

/// Grid seen by a scenario: the base grid with its removed branch (if any) taken out.
Grid scenario_grid(const Grid& base, const Scenario& scenario);

std::string dataset_to_jsonl(const Dataset& ds);
Dataset dataset_from_jsonl(std::string_view text);

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

}  // namespace kclflow
