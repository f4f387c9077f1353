#include "kclflow/acpf.hpp"

#include <cmath>
#include <string>

#include "kclflow/error.hpp"

namespace kclflow {

SeriesAdmittance series_admittance(double r, double x) {
    const double z2 = r * r + x * x;
    if (!(z2 > 0.0)) throw Error(ErrorKind::ZeroImpedance, "branch with r = x = 0");
    return {r / z2, -x / z2};
}

Admittance build_ybus(const Grid& grid) {
    const auto n = static_cast<Eigen::Index>(grid.num_buses());
    Admittance y{Eigen::MatrixXd::Zero(n, n), Eigen::MatrixXd::Zero(n, n)};
    for (const Branch& br : grid.branches()) {
        const auto [g, b] = series_admittance(br.r, br.x);
        const auto i = static_cast<Eigen::Index>(br.from_bus);
        const auto j = static_cast<Eigen::Index>(br.to_bus);
        y.g(i, i) += g;
        y.b(i, i) += b;
        y.g(j, j) += g;
        y.b(j, j) += b;
        y.g(i, j) -= g;
        y.b(i, j) -= b;
        y.g(j, i) -= g;
        y.b(j, i) -= b;
    }
    return y;
}

PowerFlowInputs nominal_inputs(const Grid& grid) {
    const auto n = static_cast<Eigen::Index>(grid.num_buses());
    PowerFlowInputs in{Eigen::VectorXd(n), Eigen::VectorXd(n), Eigen::VectorXd(n), Eigen::VectorXd(n)};
    for (const Bus& bus : grid.buses()) {
        const auto i = static_cast<Eigen::Index>(bus.id);
        in.p(i) = bus.p_nom;
        in.q(i) = bus.q_nom;
        in.vm(i) = bus.vm_nom;
        in.va(i) = bus.va_nom;
    }
    return in;
}

StateLayout state_layout(const Grid& grid) {
    StateLayout layout;
    for (const Bus& bus : grid.buses()) {
        if (bus.kind != BusKind::Slack) layout.angle_buses.push_back(bus.id);
        if (bus.kind == BusKind::Load) layout.magnitude_buses.push_back(bus.id);
    }
    return layout;
}

void calc_injections(const Admittance& y, const Eigen::VectorXd& vm, const Eigen::VectorXd& va,
                     Eigen::VectorXd& p, Eigen::VectorXd& q) {
    const Eigen::Index n = vm.size();
    p.setZero(n);
    q.setZero(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        double sp = 0.0, sq = 0.0;
        for (Eigen::Index j = 0; j < n; ++j) {
            const double gij = y.g(i, j), bij = y.b(i, j);
            if (gij == 0.0 && bij == 0.0) continue;
            const double th = va(i) - va(j);
            const double c = std::cos(th), s = std::sin(th);
            sp += vm(j) * (gij * c + bij * s);
            sq += vm(j) * (gij * s - bij * c);
        }
        p(i) = vm(i) * sp;
        q(i) = vm(i) * sq;
    }
}

Eigen::VectorXd power_flow_mismatch(const Admittance& y, const StateLayout& layout, const PowerFlowInputs& spec,
                                    const Eigen::VectorXd& vm, const Eigen::VectorXd& va) {
    Eigen::VectorXd p, q;
    calc_injections(y, vm, va, p, q);
    Eigen::VectorXd f(static_cast<Eigen::Index>(layout.size()));
    Eigen::Index k = 0;
    for (BusId i : layout.angle_buses) {
        const auto ii = static_cast<Eigen::Index>(i);
        f(k++) = spec.p(ii) - p(ii);
    }
    for (BusId i : layout.magnitude_buses) {
        const auto ii = static_cast<Eigen::Index>(i);
        f(k++) = spec.q(ii) - q(ii);
    }
    return f;
}

Eigen::MatrixXd power_flow_jacobian(const Admittance& y, const StateLayout& layout, const Eigen::VectorXd& vm,
                                    const Eigen::VectorXd& va) {
    const Eigen::Index n = vm.size();
    // Full N×N blocks of ∂P/∂θ, ∂P/∂V, ∂Q/∂θ, ∂Q/∂V, then restricted to the state layout.
    Eigen::MatrixXd dp_dth = Eigen::MatrixXd::Zero(n, n), dp_dv = Eigen::MatrixXd::Zero(n, n);
    Eigen::MatrixXd dq_dth = Eigen::MatrixXd::Zero(n, n), dq_dv = Eigen::MatrixXd::Zero(n, n);
    Eigen::VectorXd p, q;
    calc_injections(y, vm, va, p, q);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < n; ++j) {
            if (i == j) continue;
            const double gij = y.g(i, j), bij = y.b(i, j);
            if (gij == 0.0 && bij == 0.0) continue;
            const double th = va(i) - va(j);
            const double c = std::cos(th), s = std::sin(th);
            dp_dth(i, j) = vm(i) * vm(j) * (gij * s - bij * c);
            dq_dth(i, j) = -vm(i) * vm(j) * (gij * c + bij * s);
            dp_dv(i, j) = vm(i) * (gij * c + bij * s);
            dq_dv(i, j) = vm(i) * (gij * s - bij * c);
        }
        const double gii = y.g(i, i), bii = y.b(i, i);
        dp_dth(i, i) = -q(i) - bii * vm(i) * vm(i);
        dq_dth(i, i) = p(i) - gii * vm(i) * vm(i);
        dp_dv(i, i) = p(i) / vm(i) + gii * vm(i);
        dq_dv(i, i) = q(i) / vm(i) - bii * vm(i);
    }

    const auto na = static_cast<Eigen::Index>(layout.angle_buses.size());
    const auto nm = static_cast<Eigen::Index>(layout.magnitude_buses.size());
    Eigen::MatrixXd jac(na + nm, na + nm);
    auto at = [](const std::vector<BusId>& v, Eigen::Index k) { return static_cast<Eigen::Index>(v[static_cast<std::size_t>(k)]); };
    for (Eigen::Index r = 0; r < na; ++r) {
        const auto i = at(layout.angle_buses, r);
        for (Eigen::Index c = 0; c < na; ++c) jac(r, c) = dp_dth(i, at(layout.angle_buses, c));
        for (Eigen::Index c = 0; c < nm; ++c) jac(r, na + c) = dp_dv(i, at(layout.magnitude_buses, c));
    }
    for (Eigen::Index r = 0; r < nm; ++r) {
        const auto i = at(layout.magnitude_buses, r);
        for (Eigen::Index c = 0; c < na; ++c) jac(na + r, c) = dq_dth(i, at(layout.angle_buses, c));
        for (Eigen::Index c = 0; c < nm; ++c) jac(na + r, na + c) = dq_dv(i, at(layout.magnitude_buses, c));
    }
    return jac;
}

PFSolution nr_solve(const Grid& grid, const PowerFlowInputs& inputs, const SolverOptions& options) {
    if (!(options.tol > 0.0)) throw Error(ErrorKind::InvalidArgument, "solver tolerance must be positive");
    const auto n = static_cast<Eigen::Index>(grid.num_buses());
    if (inputs.p.size() != n || inputs.q.size() != n || inputs.vm.size() != n || inputs.va.size() != n)
        throw Error(ErrorKind::DimMismatch, "power-flow inputs must have one entry per bus");

    const Admittance y = build_ybus(grid);
    const StateLayout layout = state_layout(grid);

    PFSolution sol;
    sol.vm = Eigen::VectorXd::Ones(n);
    sol.va = Eigen::VectorXd::Zero(n);
    for (const Bus& bus : grid.buses()) {
        const auto i = static_cast<Eigen::Index>(bus.id);
        if (bus.kind != BusKind::Load) sol.vm(i) = inputs.vm(i);
        if (bus.kind == BusKind::Slack) sol.va(i) = inputs.va(i);
    }

    const auto na = static_cast<Eigen::Index>(layout.angle_buses.size());
    Eigen::VectorXd f = power_flow_mismatch(y, layout, inputs, sol.vm, sol.va);
    double norm = f.size() ? f.lpNorm<Eigen::Infinity>() : 0.0;
    int iter = 0;
    while (norm > options.tol) {
        if (iter >= options.max_iter || !std::isfinite(norm))
            throw Error(ErrorKind::Diverged, "Newton-Raphson stopped after " + std::to_string(iter) +
                                                 " iterations with mismatch " + std::to_string(norm));
        const Eigen::MatrixXd jac = power_flow_jacobian(y, layout, sol.vm, sol.va);
        Eigen::PartialPivLU<Eigen::MatrixXd> lu(jac);
        if (!(lu.rcond() > 1e-14)) throw Error(ErrorKind::SingularJacobian, "power-flow Jacobian is singular");
        const Eigen::VectorXd dx = lu.solve(f);
        for (Eigen::Index k = 0; k < na; ++k)
            sol.va(static_cast<Eigen::Index>(layout.angle_buses[static_cast<std::size_t>(k)])) += dx(k);
        for (std::size_t k = 0; k < layout.magnitude_buses.size(); ++k)
            sol.vm(static_cast<Eigen::Index>(layout.magnitude_buses[k])) += dx(na + static_cast<Eigen::Index>(k));
        ++iter;
        f = power_flow_mismatch(y, layout, inputs, sol.vm, sol.va);
        norm = f.lpNorm<Eigen::Infinity>();
    }
    calc_injections(y, sol.vm, sol.va, sol.p_inj, sol.q_inj);
    sol.iterations = iter;
    sol.max_mismatch = norm;
    return sol;
}

FlowSet branch_flows(const Grid& grid, const Eigen::VectorXd& vm, const Eigen::VectorXd& va) {
    const auto m = static_cast<Eigen::Index>(grid.num_branches());
    FlowSet flows(4 * m);
    for (const Branch& br : grid.branches()) {
        const auto [g, b] = series_admittance(br.r, br.x);
        const auto e = static_cast<Eigen::Index>(br.id);
        const auto i = static_cast<Eigen::Index>(br.from_bus);
        const auto j = static_cast<Eigen::Index>(br.to_bus);
        const double vi = vm(i), vj = vm(j);
        const double th = va(i) - va(j);
        const double c = std::cos(th), s = std::sin(th);
        // θ_ji = −θ_ij: cos unchanged, sin flips.
        flows(e) = g * vi * vi - vi * vj * (g * c + b * s);
        flows(m + e) = g * vj * vj - vi * vj * (g * c - b * s);
        flows(2 * m + e) = -b * vi * vi - vi * vj * (g * s - b * c);
        flows(3 * m + e) = -b * vj * vj - vi * vj * (-g * s - b * c);
    }
    return flows;
}

BusInjections net_injections_from_flows(const Grid& grid, const FlowSet& flows) {
    const auto m = static_cast<Eigen::Index>(grid.num_branches());
    if (flows.size() != 4 * m) throw Error(ErrorKind::DimMismatch, "flow vector must have length 4|E|");
    const auto n = static_cast<Eigen::Index>(grid.num_buses());
    BusInjections out{Eigen::VectorXd::Zero(n), Eigen::VectorXd::Zero(n)};
    for (const Branch& br : grid.branches()) {
        const auto e = static_cast<Eigen::Index>(br.id);
        const auto i = static_cast<Eigen::Index>(br.from_bus);
        const auto j = static_cast<Eigen::Index>(br.to_bus);
        out.p(i) += flows(e);
        out.p(j) += flows(m + e);
        out.q(i) += flows(2 * m + e);
        out.q(j) += flows(3 * m + e);
    }
    return out;
}

}  // namespace kclflow
