#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "kclflow/acpf.hpp"
#include "kclflow/grid.hpp"

namespace kclflow {

enum class PowerKind { P, Q };

/// The topology-dependent half of the KCL system A y + b = 0: the 2N × 4|E| matrix A
/// (rows P(0..N-1) then Q(0..N-1)) and its Moore-Penrose inverse, built once per topology.
class KclOperator {
public:
    /// Relative cutoff below which singular values are treated as zero in Σ†.
    static constexpr double kSvdCutoff = 1e-10;

    explicit KclOperator(const Grid& grid);

    std::size_t num_buses() const noexcept { return num_buses_; }
    std::size_t num_branches() const noexcept { return num_branches_; }
    std::size_t num_constraints() const noexcept { return 2 * num_buses_; }
    std::size_t flow_dim() const noexcept { return 4 * num_branches_; }
    std::uint64_t topology_hash() const noexcept { return topology_hash_; }

    const Eigen::MatrixXd& a() const noexcept { return a_; }
    const Eigen::MatrixXd& a_pinv() const noexcept { return a_pinv_; }
    const Eigen::VectorXd& singular_values() const noexcept { return singular_values_; }
    std::size_t rank() const noexcept { return rank_; }

    static std::size_t constraint_index(std::size_t num_buses, BusId bus, PowerKind kind) {
        return kind == PowerKind::P ? bus : num_buses + bus;
    }

    /// Flow-vector slots with coefficient 1 in the given constraint row.
    const std::vector<Eigen::Index>& support(std::size_t constraint) const { return support_.at(constraint); }

    Eigen::VectorXd normal_vector(BusId bus, PowerKind kind) const;

private:
    std::size_t num_buses_;
    std::size_t num_branches_;
    std::uint64_t topology_hash_;
    Eigen::MatrixXd a_;
    Eigen::MatrixXd a_pinv_;
    Eigen::VectorXd singular_values_;
    std::size_t rank_ = 0;
    std::vector<std::vector<Eigen::Index>> support_;
};

/// A per topology plus b per scenario. b = (P_net(0..N-1), Q_net(0..N-1)) with P_net = −injection.
struct ConstraintSystem {
    std::shared_ptr<const KclOperator> op;
    Eigen::VectorXd b;

    const Eigen::MatrixXd& a() const { return op->a(); }
    const Eigen::MatrixXd& a_pinv() const { return op->a_pinv(); }
    std::uint64_t topology_hash() const { return op->topology_hash(); }
};

/// Throws IsolatedBus when some bus has no incident branch.
ConstraintSystem build_system(const Grid& grid, const Eigen::VectorXd& net_p, const Eigen::VectorXd& net_q);

ConstraintSystem bind_injections(std::shared_ptr<const KclOperator> op, const Eigen::VectorXd& net_p,
                                 const Eigen::VectorXd& net_q);

/// r = A y + b.
Eigen::VectorXd kcl_residual(const ConstraintSystem& sys, const FlowSet& y);

/// ỹ = y − A†(A y + b): the Euclidean-closest point satisfying every KCL equation.
FlowSet project_global(const ConstraintSystem& sys, const FlowSet& y);

struct ProjectionGradients {
    Eigen::VectorXd grad_y;  // (I − A†A) · upstream
    Eigen::VectorXd grad_b;  // −A†ᵀ · upstream
};

ProjectionGradients project_global_backward(const ConstraintSystem& sys, const Eigen::VectorXd& upstream);

/// Single hyperplane projection Π_i^P or Π_i^Q.
FlowSet project_bus(const ConstraintSystem& sys, const FlowSet& y, BusId bus, PowerKind kind);

/// In-place variant used by the Kaczmarz sweeps.
void project_constraint_inplace(const ConstraintSystem& sys, Eigen::VectorXd& y, std::size_t constraint);

/// Default deterministic ordering: bus ascending, P before Q at each bus.
std::vector<std::size_t> default_constraint_order(std::size_t num_buses);

struct KaczmarzOptions {
    std::size_t max_sweeps = 500;
    double tol = 1e-6;
    std::vector<std::size_t> order;  // permutation of constraint indices; empty means default
    bool randomized = false;         // redraw the permutation each sweep
    std::uint64_t seed = 0;
    /// Called after every single hyperplane step with the current iterate.
    std::function<void(const Eigen::VectorXd&)> on_step;
};

struct KaczmarzResult {
    FlowSet y;
    std::size_t sweeps_used = 0;
    double residual = 0.0;                 // ‖A y + b‖∞ at exit
    std::vector<double> residual_history;  // after each sweep
};

KaczmarzResult project_kaczmarz(const ConstraintSystem& sys, const FlowSet& y, const KaczmarzOptions& options = {});

/// Thread-safe get-or-build cache of KclOperator keyed by topology hash.
class TopologyCache {
public:
    std::shared_ptr<const KclOperator> get(const Grid& grid);
    std::size_t size() const;

private:
    mutable std::mutex mutex_;
    std::unordered_map<std::uint64_t, std::shared_ptr<const KclOperator>> entries_;
};

}  // namespace kclflow
