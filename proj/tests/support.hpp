#pragma once

#include <complex>
#include <cstdint>
#include <optional>
#include <queue>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "kclflow/acpf.hpp"
#include "kclflow/case_io.hpp"
#include "kclflow/grid.hpp"

namespace testing {

using kclflow::Branch;
using kclflow::Bus;
using kclflow::BusKind;
using kclflow::Grid;

inline std::string fixture(const std::string& name) { return std::string(KCLFLOW_DATA_DIR) + "/" + name; }

inline const Grid& ieee14() {
    static const Grid g = kclflow::load_grid(fixture("case14.m"));
    return g;
}

inline const Grid& ieee118() {
    static const Grid g = kclflow::load_grid(fixture("case118.m"));
    return g;
}

inline Bus bus(std::size_t id, BusKind kind, double p = 0.0, double q = 0.0, double vm = 1.0) {
    Bus b;
    b.id = id;
    b.kind = kind;
    b.p_nom = p;
    b.q_nom = q;
    b.vm_nom = vm;
    b.source_number = static_cast<int>(id) + 1;
    return b;
}

inline Branch line(std::size_t id, std::size_t from, std::size_t to, double r = 0.01, double x = 0.1) {
    return Branch{id, from, to, r, x};
}

inline Grid two_bus(double r = 0.01, double x = 0.1, double load = -0.5) {
    return Grid({bus(0, BusKind::Slack), bus(1, BusKind::Load, load, 0.3 * load)}, {line(0, 0, 1, r, x)});
}

// 3-bus star: edges 0→1 and 0→2, slack at 1 so the hub can be projected freely
inline Grid star3() {
    return Grid({bus(0, BusKind::Load, -0.2, -0.05), bus(1, BusKind::Slack), bus(2, BusKind::Load, -0.3, -0.1)},
                {line(0, 0, 1), line(1, 0, 2, 0.02, 0.15)});
}

// 5 buses, 7 lines
inline Grid five_bus() {
    return Grid({bus(0, BusKind::Slack, 0, 0, 1.02), bus(1, BusKind::Generator, 0.4, 0, 1.01),
                 bus(2, BusKind::Load, -0.45, -0.15), bus(3, BusKind::Load, -0.4, -0.05),
                 bus(4, BusKind::Load, -0.6, -0.1)},
                {line(0, 0, 1, 0.02, 0.06), line(1, 0, 2, 0.08, 0.24), line(2, 1, 2, 0.06, 0.18),
                 line(3, 1, 3, 0.06, 0.18), line(4, 1, 4, 0.04, 0.12), line(5, 2, 3, 0.01, 0.03),
                 line(6, 3, 4, 0.08, 0.24)});
}

// Random connected grid: spanning tree plus `extra` chords, slack at bus 0.
inline Grid random_grid(std::size_t n, std::size_t extra, std::uint64_t seed, bool lossless = false) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<Bus> buses;
    for (std::size_t i = 0; i < n; ++i) {
        BusKind kind = i == 0 ? BusKind::Slack : (u(rng) < 0.25 ? BusKind::Generator : BusKind::Load);
        const double p = kind == BusKind::Generator ? 0.1 + 0.3 * u(rng) : -0.05 - 0.25 * u(rng);
        const double q = kind == BusKind::Load ? -0.1 * u(rng) : 0.0;
        buses.push_back(bus(i, kind, p, q, kind == BusKind::Load ? 1.0 : 1.0 + 0.04 * u(rng)));
    }
    std::vector<Branch> branches;
    auto add = [&](std::size_t a, std::size_t b) {
        const double x = 0.05 + 0.2 * u(rng);
        const double r = lossless ? 0.0 : x * (0.05 + 0.3 * u(rng));
        if (u(rng) < 0.5) std::swap(a, b);
        branches.push_back(line(branches.size(), a, b, r, x));
    };
    for (std::size_t i = 1; i < n; ++i) add(i, static_cast<std::size_t>(u(rng) * static_cast<double>(i)));
    for (std::size_t k = 0; k < extra; ++k) {
        const auto a = static_cast<std::size_t>(u(rng) * static_cast<double>(n));
        auto b = static_cast<std::size_t>(u(rng) * static_cast<double>(n));
        if (a == b) b = (a + 1) % n;
        add(a, b);
    }
    return Grid(buses, branches);
}

// Breadth-first search from the slack, skipping `removed`.
inline bool bfs_connected(const Grid& g, std::optional<std::size_t> removed = std::nullopt) {
    std::vector<std::vector<std::size_t>> nbr(g.num_buses());
    for (const auto& br : g.branches()) {
        if (removed && br.id == *removed) continue;
        nbr[br.from_bus].push_back(br.to_bus);
        nbr[br.to_bus].push_back(br.from_bus);
    }
    std::vector<bool> seen(g.num_buses(), false);
    std::queue<std::size_t> q;
    q.push(g.slack());
    seen[g.slack()] = true;
    std::size_t count = 1;
    while (!q.empty()) {
        const auto v = q.front();
        q.pop();
        for (auto w : nbr[v])
            if (!seen[w]) {
                seen[w] = true;
                ++count;
                q.push(w);
            }
    }
    return count == g.num_buses();
}

// min ‖z − y‖² s.t. A z = −b via the KKT system [I Aᵀ; A 0].
inline Eigen::VectorXd kkt_project(const Eigen::MatrixXd& a, const Eigen::VectorXd& b, const Eigen::VectorXd& y) {
    const auto n = a.cols(), m = a.rows();
    Eigen::MatrixXd k = Eigen::MatrixXd::Zero(n + m, n + m);
    k.topLeftCorner(n, n).setIdentity();
    k.topRightCorner(n, m) = a.transpose();
    k.bottomLeftCorner(m, n) = a;
    Eigen::VectorXd rhs(n + m);
    rhs << y, -b;
    return k.fullPivLu().solve(rhs).head(n);
}

// Branch flows from complex phasors: S_from = V_i conj(y (V_i − V_j)).
inline Eigen::VectorXd phasor_flows(const Grid& g, const Eigen::VectorXd& vm, const Eigen::VectorXd& va) {
    using C = std::complex<double>;
    const auto m = static_cast<Eigen::Index>(g.num_branches());
    Eigen::VectorXd out(4 * m);
    for (const auto& br : g.branches()) {
        const C y = 1.0 / C(br.r, br.x);
        const C vi = std::polar(vm(static_cast<Eigen::Index>(br.from_bus)), va(static_cast<Eigen::Index>(br.from_bus)));
        const C vj = std::polar(vm(static_cast<Eigen::Index>(br.to_bus)), va(static_cast<Eigen::Index>(br.to_bus)));
        const C sf = vi * std::conj(y * (vi - vj));
        const C st = vj * std::conj(y * (vj - vi));
        const auto e = static_cast<Eigen::Index>(br.id);
        out(e) = sf.real();
        out(m + e) = st.real();
        out(2 * m + e) = sf.imag();
        out(3 * m + e) = st.imag();
    }
    return out;
}

// S = V ∘ conj(Y V) with Y assembled from complex branch admittances.
inline std::pair<Eigen::VectorXd, Eigen::VectorXd> phasor_injections(const Grid& g, const Eigen::VectorXd& vm,
                                                                     const Eigen::VectorXd& va) {
    using C = std::complex<double>;
    const auto n = static_cast<Eigen::Index>(g.num_buses());
    Eigen::MatrixXcd y = Eigen::MatrixXcd::Zero(n, n);
    for (const auto& br : g.branches()) {
        const C ys = 1.0 / C(br.r, br.x);
        const auto i = static_cast<Eigen::Index>(br.from_bus), j = static_cast<Eigen::Index>(br.to_bus);
        y(i, i) += ys;
        y(j, j) += ys;
        y(i, j) -= ys;
        y(j, i) -= ys;
    }
    Eigen::VectorXcd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = std::polar(vm(i), va(i));
    const Eigen::VectorXcd s = v.cwiseProduct((y * v).conjugate());
    return {s.real(), s.imag()};
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-12}); }

// Gaussian elimination with partial pivoting; returns the number of pivots above tol.
inline std::size_t echelon_rank(Eigen::MatrixXd m, double tol = 1e-9) {
    std::size_t rank = 0;
    Eigen::Index row = 0;
    for (Eigen::Index col = 0; col < m.cols() && row < m.rows(); ++col) {
        Eigen::Index piv = row;
        for (Eigen::Index r = row; r < m.rows(); ++r)
            if (std::abs(m(r, col)) > std::abs(m(piv, col))) piv = r;
        if (std::abs(m(piv, col)) <= tol) continue;
        m.row(row).swap(m.row(piv));
        for (Eigen::Index r = row + 1; r < m.rows(); ++r) m.row(r) -= (m(r, col) / m(row, col)) * m.row(row);
        ++row;
        ++rank;
    }
    return rank;
}

}  // namespace testing
