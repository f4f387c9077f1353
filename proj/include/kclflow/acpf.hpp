#pragma once

#include <vector>

#include <Eigen/Dense>

#include "kclflow/grid.hpp"

namespace kclflow {

/// Bus admittance matrix Y = G + jB of the series-only line model, stored densely.
struct Admittance {
    Eigen::MatrixXd g;
    Eigen::MatrixXd b;
};

struct SeriesAdmittance {
    double g;
    double b;
};

/// y = 1 / (r + jx). Throws ZeroImpedance when r² + x² = 0.
SeriesAdmittance series_admittance(double r, double x);

Admittance build_ybus(const Grid& grid);

/// Per-bus specified values. Which entries are used depends on the bus kind:
/// P,Q at PQ buses; P,Vm at PV buses; Vm,Va at the slack.
struct PowerFlowInputs {
    Eigen::VectorXd p;
    Eigen::VectorXd q;
    Eigen::VectorXd vm;
    Eigen::VectorXd va;
};

PowerFlowInputs nominal_inputs(const Grid& grid);

struct SolverOptions {
    double tol = 1e-8;
    int max_iter = 20;
};

struct PFSolution {
    Eigen::VectorXd vm;
    Eigen::VectorXd va;
    Eigen::VectorXd p_inj;  // calculated net injection at every bus, generation positive
    Eigen::VectorXd q_inj;
    int iterations = 0;
    double max_mismatch = 0.0;
};

/// Unknowns of the Newton iteration: angles at all non-slack buses, then magnitudes at PQ buses.
struct StateLayout {
    std::vector<BusId> angle_buses;
    std::vector<BusId> magnitude_buses;

    std::size_t size() const { return angle_buses.size() + magnitude_buses.size(); }
};

StateLayout state_layout(const Grid& grid);

/// Injections computed from voltages: P_i = V_i Σ_j V_j (G_ij cos θ_ij + B_ij sin θ_ij), Q analogous.
void calc_injections(const Admittance& y, const Eigen::VectorXd& vm, const Eigen::VectorXd& va,
                     Eigen::VectorXd& p, Eigen::VectorXd& q);

/// f(x) = specified − calculated, over P at angle_buses then Q at magnitude_buses.
Eigen::VectorXd power_flow_mismatch(const Admittance& y, const StateLayout& layout, const PowerFlowInputs& spec,
                                    const Eigen::VectorXd& vm, const Eigen::VectorXd& va);

/// Jacobian of the calculated injections with respect to the state (angles, then magnitudes).
Eigen::MatrixXd power_flow_jacobian(const Admittance& y, const StateLayout& layout, const Eigen::VectorXd& vm,
                                    const Eigen::VectorXd& va);

/// Newton-Raphson from flat start (Vm = 1, Va = 0 at unknowns; slack and PV magnitudes at setpoint).
/// Throws Diverged or SingularJacobian.
PFSolution nr_solve(const Grid& grid, const PowerFlowInputs& inputs, const SolverOptions& options = {});

/// Flat vector of length 4|E|: all p_from, all p_to, all q_from, all q_to. Positive means out of the bus.
using FlowSet = Eigen::VectorXd;

FlowSet branch_flows(const Grid& grid, const Eigen::VectorXd& vm, const Eigen::VectorXd& va);
inline FlowSet branch_flows(const Grid& grid, const PFSolution& sol) { return branch_flows(grid, sol.vm, sol.va); }

struct BusInjections {
    Eigen::VectorXd p;
    Eigen::VectorXd q;
};

/// P_calc(i) = Σ_{e from i} p_from(e) + Σ_{e to i} p_to(e); Q analogous.
BusInjections net_injections_from_flows(const Grid& grid, const FlowSet& flows);

}  // namespace kclflow
