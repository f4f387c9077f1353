#include "kclflow/projection.hpp"

#include <algorithm>
#include <numeric>
#include <random>

#include <Eigen/SVD>

#include "kclflow/error.hpp"

namespace kclflow {

KclOperator::KclOperator(const Grid& grid)
    : num_buses_(grid.num_buses()), num_branches_(grid.num_branches()), topology_hash_(grid.topology_hash()) {
    for (const Bus& bus : grid.buses()) {
        if (grid.degree(bus.id) == 0)
            throw Error(ErrorKind::IsolatedBus, "bus " + std::to_string(bus.id) + " has no incident branch");
    }
    const auto n = static_cast<Eigen::Index>(num_buses_);
    const auto m = static_cast<Eigen::Index>(num_branches_);
    support_.assign(2 * num_buses_, {});
    for (const Branch& br : grid.branches()) {
        const auto e = static_cast<Eigen::Index>(br.id);
        support_[br.from_bus].push_back(e);               // p_from
        support_[br.to_bus].push_back(m + e);             // p_to
        support_[num_buses_ + br.from_bus].push_back(2 * m + e);  // q_from
        support_[num_buses_ + br.to_bus].push_back(3 * m + e);    // q_to
    }
    a_ = Eigen::MatrixXd::Zero(2 * n, 4 * m);
    for (std::size_t c = 0; c < support_.size(); ++c) {
        for (Eigen::Index slot : support_[c]) a_(static_cast<Eigen::Index>(c), slot) = 1.0;
    }

    // A† = V Σ† Uᵀ
    Eigen::BDCSVD<Eigen::MatrixXd> svd(a_, Eigen::ComputeThinU | Eigen::ComputeThinV);
    singular_values_ = svd.singularValues();
    const double sigma_max = singular_values_.size() ? singular_values_(0) : 0.0;
    Eigen::VectorXd inv = Eigen::VectorXd::Zero(singular_values_.size());
    for (Eigen::Index k = 0; k < singular_values_.size(); ++k) {
        if (singular_values_(k) > kSvdCutoff * sigma_max) {
            inv(k) = 1.0 / singular_values_(k);
            ++rank_;
        }
    }
    a_pinv_ = svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
}

Eigen::VectorXd KclOperator::normal_vector(BusId bus, PowerKind kind) const {
    if (bus >= num_buses_) throw Error(ErrorKind::InvalidArgument, "bus out of range");
    return a_.row(static_cast<Eigen::Index>(constraint_index(num_buses_, bus, kind))).transpose();
}

ConstraintSystem bind_injections(std::shared_ptr<const KclOperator> op, const Eigen::VectorXd& net_p,
                                 const Eigen::VectorXd& net_q) {
    const auto n = static_cast<Eigen::Index>(op->num_buses());
    if (net_p.size() != n || net_q.size() != n)
        throw Error(ErrorKind::DimMismatch, "net injections must have one entry per bus");
    ConstraintSystem sys{std::move(op), Eigen::VectorXd(2 * n)};
    sys.b << net_p, net_q;
    return sys;
}

ConstraintSystem build_system(const Grid& grid, const Eigen::VectorXd& net_p, const Eigen::VectorXd& net_q) {
    return bind_injections(std::make_shared<const KclOperator>(grid), net_p, net_q);
}

namespace {

void check_flow_dim(const ConstraintSystem& sys, const Eigen::VectorXd& y) {
    if (static_cast<std::size_t>(y.size()) != sys.op->flow_dim())
        throw Error(ErrorKind::DimMismatch, "flow vector has length " + std::to_string(y.size()) + ", expected " +
                                                std::to_string(sys.op->flow_dim()));
    if (static_cast<std::size_t>(sys.b.size()) != sys.op->num_constraints())
        throw Error(ErrorKind::DimMismatch, "constraint vector b has the wrong length");
}

}  // namespace

Eigen::VectorXd kcl_residual(const ConstraintSystem& sys, const FlowSet& y) {
    check_flow_dim(sys, y);
    return sys.a() * y + sys.b;
}

FlowSet project_global(const ConstraintSystem& sys, const FlowSet& y) {
    const Eigen::VectorXd r = kcl_residual(sys, y);
    return y - sys.a_pinv() * r;
}

ProjectionGradients project_global_backward(const ConstraintSystem& sys, const Eigen::VectorXd& upstream) {
    check_flow_dim(sys, upstream);
    ProjectionGradients g;
    g.grad_y = upstream - sys.a_pinv() * (sys.a() * upstream);
    g.grad_b = -(sys.a_pinv().transpose() * upstream);
    return g;
}

void project_constraint_inplace(const ConstraintSystem& sys, Eigen::VectorXd& y, std::size_t constraint) {
    const auto& slots = sys.op->support(constraint);
    if (slots.empty()) throw Error(ErrorKind::IsolatedBus, "constraint has an empty normal vector");
    double dot = 0.0;
    for (Eigen::Index s : slots) dot += y(s);
    const double step = (dot + sys.b(static_cast<Eigen::Index>(constraint))) / static_cast<double>(slots.size());
    for (Eigen::Index s : slots) y(s) -= step;
}

FlowSet project_bus(const ConstraintSystem& sys, const FlowSet& y, BusId bus, PowerKind kind) {
    check_flow_dim(sys, y);
    if (bus >= sys.op->num_buses()) throw Error(ErrorKind::InvalidArgument, "bus out of range");
    FlowSet out = y;
    project_constraint_inplace(sys, out, KclOperator::constraint_index(sys.op->num_buses(), bus, kind));
    return out;
}

std::vector<std::size_t> default_constraint_order(std::size_t num_buses) {
    std::vector<std::size_t> order;
    order.reserve(2 * num_buses);
    for (std::size_t i = 0; i < num_buses; ++i) {
        order.push_back(i);
        order.push_back(num_buses + i);
    }
    return order;
}

KaczmarzResult project_kaczmarz(const ConstraintSystem& sys, const FlowSet& y, const KaczmarzOptions& options) {
    check_flow_dim(sys, y);
    if (options.max_sweeps < 1) throw Error(ErrorKind::InvalidArgument, "Kaczmarz needs at least one sweep");
    std::vector<std::size_t> order =
        options.order.empty() ? default_constraint_order(sys.op->num_buses()) : options.order;
    if (order.size() != sys.op->num_constraints())
        throw Error(ErrorKind::InvalidArgument, "ordering must be a permutation of all 2N constraints");
    {
        std::vector<std::size_t> sorted = order;
        std::sort(sorted.begin(), sorted.end());
        for (std::size_t k = 0; k < sorted.size(); ++k) {
            if (sorted[k] != k) throw Error(ErrorKind::InvalidArgument, "ordering is not a permutation");
        }
    }

    std::mt19937_64 rng(options.seed);
    KaczmarzResult result;
    result.y = y;
    result.residual = kcl_residual(sys, result.y).lpNorm<Eigen::Infinity>();
    while (result.sweeps_used < options.max_sweeps && result.residual > options.tol) {
        if (options.randomized) std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t c : order) {
            project_constraint_inplace(sys, result.y, c);
            if (options.on_step) options.on_step(result.y);
        }
        ++result.sweeps_used;
        result.residual = kcl_residual(sys, result.y).lpNorm<Eigen::Infinity>();
        result.residual_history.push_back(result.residual);
    }
    return result;
}

std::shared_ptr<const KclOperator> TopologyCache::get(const Grid& grid) {
    std::lock_guard lock(mutex_);
    if (auto it = entries_.find(grid.topology_hash()); it != entries_.end()) return it->second;
    auto op = std::make_shared<const KclOperator>(grid);
    entries_.emplace(grid.topology_hash(), op);
    return op;
}

std::size_t TopologyCache::size() const {
    std::lock_guard lock(mutex_);
    return entries_.size();
}

}  // namespace kclflow
