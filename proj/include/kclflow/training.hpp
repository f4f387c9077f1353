#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "kclflow/grid.hpp"
#include "kclflow/projection.hpp"
#include "kclflow/scenario.hpp"
#include "kclflow/surrogate.hpp"

namespace kclflow {

struct TrainConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
    std::size_t batch_size = 32;
    std::size_t epochs = 200;
    std::uint64_t seed = 0;
    bool with_projection = true;
    std::optional<double> grad_clip;
    SurrogateConfig model;
    unsigned workers = 1;

    bool operator==(const TrainConfig&) const = default;
};

nlohmann::json train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& doc);

struct LossResult {
    double value = 0.0;
    Eigen::VectorXd grad;
};

/// Mean of squared differences; `count` is the number of components in the whole batch
/// (so per-scenario contributions can be summed). Gradient is 2(pred − target)/count.
LossResult mse_loss(const FlowSet& pred, const FlowSet& target, double count);
LossResult mse_loss(const FlowSet& pred, const FlowSet& target);

struct KclMetric {
    double l_p = 0.0;
    double l_q = 0.0;
    double l_kcl = 0.0;
};

/// L_P = (1/N) Σ (P_net(i) + P_calc(i))², L_Q analogous, L_KCL = (L_P + L_Q)/2.
KclMetric kcl_metric(const Grid& grid, const Eigen::VectorXd& net_p, const Eigen::VectorXd& net_q,
                     const FlowSet& pred);

struct AdamState {
    SurrogateParams m;
    SurrogateParams v;
    std::uint64_t step = 0;

    static AdamState zeros_like(const SurrogateParams& params);
};

/// Decoupled weight decay then a bias-corrected Adam update on every tensor.
void adamw_step(SurrogateParams& params, const SurrogateParams& grads, AdamState& state, const TrainConfig& cfg);

/// A scenario bound to its topology: graph input, constraint system and target.
struct PreparedSample {
    std::shared_ptr<const Grid> grid;
    GraphInput input;
    ConstraintSystem system;
    FlowSet target;
};

/// Builds PreparedSamples, caching the per-topology pieces (grid, graph index, KCL operator)
/// keyed by removed branch.
class SampleFactory {
public:
    SampleFactory(Grid base, FeatureStats stats);

    PreparedSample prepare(const Scenario& scenario);
    std::vector<PreparedSample> prepare_all(const std::vector<const Scenario*>& scenarios);

    const Grid& base() const { return base_; }
    const FeatureStats& stats() const { return stats_; }
    TopologyCache& cache() { return cache_; }

private:
    struct TopologyEntry {
        std::shared_ptr<const Grid> grid;
        std::shared_ptr<const GraphTopology> graph;
        std::shared_ptr<const KclOperator> op;
    };
    const TopologyEntry& entry(std::optional<BranchId> removed);

    Grid base_;
    FeatureStats stats_;
    TopologyCache cache_;
    std::map<std::optional<BranchId>, TopologyEntry> topologies_;
};

struct EpochLog {
    std::size_t epoch = 0;
    double train_mse = 0.0;
    double train_kcl = 0.0;
    std::optional<double> val_mse;  // absent without a val split
    std::optional<double> val_kcl;
};

nlohmann::json epoch_log_to_json(const EpochLog& log);

struct Checkpoint {
    SurrogateParams params;
    FeatureStats stats;
    TrainConfig config;
    std::uint64_t base_topology_hash = 0;
};

nlohmann::json checkpoint_to_json(const Checkpoint& ckpt);
Checkpoint checkpoint_from_json(const nlohmann::json& doc);

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<EpochLog> log;
    double initial_val_mse = 0.0;
};

using EpochCallback = std::function<void(const EpochLog&)>;

/// Mini-batch AdamW on the MSE of forward(with_projection per cfg) over the train split.
/// Throws InvalidArgument for an N-1 dataset and NonFiniteLoss if the loss blows up.
TrainResult train(const Dataset& dataset, const Grid& grid, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = nullptr);

struct RunMetrics {
    std::uint64_t seed = 0;
    double mse = 0.0;
    double l_p = 0.0;
    double l_q = 0.0;
    double kcl_violation = 0.0;

    bool operator==(const RunMetrics&) const = default;
};

/// Metrics of one model over a set of prepared samples.
RunMetrics evaluate_samples(const SurrogateParams& params, const std::vector<PreparedSample>& samples,
                            bool with_projection, unsigned workers = 1);

struct EvalReport {
    std::string regime;
    TrainConfig config;
    bool with_projection = true;
    std::size_t test_count = 0;
    std::size_t runs = 0;
    std::vector<RunMetrics> per_run;
    RunMetrics mean;
    std::optional<RunMetrics> stddev;  // present when runs > 1

    bool operator==(const EvalReport&) const = default;
};

nlohmann::json report_to_json(const EvalReport& report);
EvalReport report_from_json(const nlohmann::json& doc);

/// Selects the scenarios to score: the test split, or every scenario when none is tagged test.
std::vector<const Scenario*> test_scenarios(const Dataset& dataset);

/// Scores one checkpoint on the dataset's test scenarios.
/// Throws TopologyMismatch if the dataset header's normalization disagrees with the checkpoint.
EvalReport evaluate(const Checkpoint& ckpt, const Dataset& dataset, const Grid& grid);

/// Retrains from seeds 0..runs-1 with `cfg` on `train_data`, scoring each run on `test_data`.
EvalReport evaluate_runs(const TrainConfig& cfg, const Dataset& train_data, const Dataset& test_data,
                         const Grid& grid, std::size_t runs);

/// As above, scoring each trained model on several test sets (one report per set).
std::vector<EvalReport> evaluate_runs(const TrainConfig& cfg, const Dataset& train_data,
                                      const std::vector<const Dataset*>& test_sets, const Grid& grid, std::size_t runs);

}  // namespace kclflow
