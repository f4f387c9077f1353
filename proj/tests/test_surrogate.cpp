#include <cmath>
#include <random>

#include "doctest.h"
#include "kclflow/error.hpp"
#include "kclflow/projection.hpp"
#include "kclflow/scenario.hpp"
#include "kclflow/surrogate.hpp"
#include "support.hpp"

using namespace kclflow;
using namespace testing;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

SurrogateConfig small_config() {
    SurrogateConfig c;
    c.hidden = 8;
    c.heads = 2;
    c.head_dim = 6;
    return c;
}

MatrixXd random_nodes(Eigen::Index n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> d(0.0, 0.5);
    MatrixXd m(n, 3);
    for (Eigen::Index i = 0; i < n; ++i)
        for (int f = 0; f < 3; ++f) m(i, f) = d(rng);
    return m;
}

VectorXd random_vec(Eigen::Index n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> d(0.0, 1.0);
    VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = d(rng);
    return v;
}

double leaky(double v, double s) { return v > 0 ? v : s * v; }

}  // namespace

TEST_CASE("initialization") {
    SurrogateConfig cfg;
    const SurrogateParams a = init_params(cfg, 5), b = init_params(cfg, 5), c = init_params(cfg, 6);
    CHECK(a == b);
    CHECK_FALSE(a == c);
    CHECK(a.w1.rows() == 8);
    CHECK(a.w1.cols() == 64);
    const double expected = 2.0 / (8.0 + 64.0);
    const double mean = a.w1.mean();
    const double var = (a.w1.array() - mean).square().mean();
    CHECK(var == doctest::Approx(expected).epsilon(0.15));
    CHECK(a.b1.cwiseAbs().maxCoeff() == 0.0);
    CHECK(a.b2.cwiseAbs().maxCoeff() == 0.0);
    CHECK(a.be1.cwiseAbs().maxCoeff() == 0.0);
    CHECK(a.be2.cwiseAbs().maxCoeff() == 0.0);
    CHECK(a.att_w.size() == 4);
    CHECK(a.att_w[0].rows() == 2 * 64 + 2);
    CHECK(a.all_finite());
    CHECK(a.tensors().size() == a.tensor_names().size());
}

TEST_CASE("zero weights give zero messages") {
    const Grid& g = ieee14();
    const SurrogateParams p = SurrogateParams::zeros(small_config());
    const GraphInput in = make_graph_input(g, random_nodes(14, 1), FeatureStats{});
    CHECK(message_pass(p, in).cwiseAbs().maxCoeff() == 0.0);
    CHECK(forward(p, in, nullptr).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("two-bus message matches a hand evaluation") {
    const Grid g = two_bus();
    SurrogateConfig cfg;
    cfg.hidden = 2;
    cfg.heads = 1;
    cfg.head_dim = 2;
    cfg.leaky_slope = 0.1;
    SurrogateParams p = init_params(cfg, 3);
    p.b1 << 0.1, -0.2;
    p.b2 << 0.05, 0.3;
    MatrixXd nodes(2, 3);
    nodes << 0.5, -0.2, 1.0, -0.5, 0.1, 0.98;
    const GraphInput in = make_graph_input(g, nodes, FeatureStats{});
    const MatrixXd x1 = message_pass(p, in);

    // receiver i, neighbor j, one shared edge
    auto expect = [&](int i, int j) {
        double z[8] = {nodes(i, 0), nodes(i, 1), nodes(i, 2), nodes(j, 0), nodes(j, 1), nodes(j, 2), 0.01, 0.1};
        double out[2];
        double act[2];
        for (int h = 0; h < 2; ++h) {
            double s = p.b1(0, h);
            for (int k = 0; k < 8; ++k) s += z[k] * p.w1(k, h);
            act[h] = leaky(s, 0.1);
        }
        for (int h = 0; h < 2; ++h) out[h] = p.b2(0, h) + act[0] * p.w2(0, h) + act[1] * p.w2(1, h);
        return std::array<double, 2>{out[0], out[1]};
    };
    for (int i = 0; i < 2; ++i) {
        const auto e = expect(i, 1 - i);
        CHECK(x1(i, 0) == doctest::Approx(e[0]).epsilon(1e-12));
        CHECK(x1(i, 1) == doctest::Approx(e[1]).epsilon(1e-12));
    }
}

TEST_CASE("attention coefficients") {
    const SurrogateParams p = init_params(small_config(), 2);
    SUBCASE("normalized per receiver") {
        const Grid& g = ieee14();
        const GraphInput in = make_graph_input(g, random_nodes(14, 4), FeatureStats{});
        ForwardTape tape;
        forward(p, in, nullptr, &tape);
        const GraphTopology& t = *in.topology;
        for (BusId i = 0; i < 14; ++i) {
            for (int k = 0; k < 2; ++k) {
                double sum = 0;
                for (std::size_t q = t.in_offsets[i]; q < t.in_offsets[i + 1]; ++q) {
                    const double a = tape.att_coef[static_cast<std::size_t>(k)](static_cast<Eigen::Index>(t.in_edges[q]));
                    CHECK(a > 0.0);
                    sum += a;
                }
                CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
            }
            if (g.degree(i) == 1) {
                CHECK(tape.coef(static_cast<Eigen::Index>(t.in_edges[t.in_offsets[i]])) == doctest::Approx(1.0));
            }
        }
    }
    SUBCASE("identical neighbors share the weight") {
        Grid g({bus(0, BusKind::Load), bus(1, BusKind::Slack), bus(2, BusKind::Load)}, {line(0, 0, 1), line(1, 0, 2)});
        MatrixXd nodes(3, 3);
        nodes << 0.3, 0.2, 1.0, -0.4, 0.1, 1.01, -0.4, 0.1, 1.01;
        const GraphInput in = make_graph_input(g, nodes, FeatureStats{});
        ForwardTape tape;
        forward(p, in, nullptr, &tape);
        // directed edges 0 and 2 deliver to the hub
        CHECK(tape.coef(0) == doctest::Approx(0.5).epsilon(1e-12));
        CHECK(tape.coef(2) == doctest::Approx(0.5).epsilon(1e-12));
        CHECK(tape.coef(1) == doctest::Approx(1.0));
    }
}

TEST_CASE("projection layer output is KCL-feasible") {
    const Grid& g = ieee14();
    const Dataset ds = make_dataset(g, 5, Regime::N, 12);
    const SurrogateParams p = init_params(small_config(), 9);
    for (const Scenario& s : ds.scenarios) {
        const ConstraintSystem sys = build_system(g, s.net_p, s.net_q);
        const GraphInput in = make_graph_input(g, s.node_inputs, FeatureStats{});
        const FlowSet out = forward(p, in, &sys);
        CHECK(kcl_residual(sys, out).lpNorm<Eigen::Infinity>() <= 1e-8);
        CHECK(kcl_residual(sys, forward(p, in, nullptr)).lpNorm<Eigen::Infinity>() > 1e-3);
    }
    const ConstraintSystem sys = build_system(g, ds.scenarios[0].net_p, ds.scenarios[0].net_q);
    const GraphInput in = make_graph_input(g, ds.scenarios[0].node_inputs, FeatureStats{});
    const FlowSet zero_out = forward(SurrogateParams::zeros(small_config()), in, &sys);
    CHECK((zero_out + sys.a_pinv() * sys.b).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("backward with zero upstream is zero") {
    const Grid g = five_bus();
    const SurrogateParams p = init_params(small_config(), 1);
    const GraphInput in = make_graph_input(g, random_nodes(5, 2), FeatureStats{});
    ForwardTape tape;
    forward(p, in, nullptr, &tape);
    const SurrogateParams grads = backward(p, tape, VectorXd::Zero(28));
    for (const MatrixXd* t : grads.tensors()) CHECK(t->cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("backward matches central differences") {
    const Grid g = five_bus();
    const PFSolution sol = nr_solve(g, nominal_inputs(g));
    const ConstraintSystem sys = build_system(g, -sol.p_inj, -sol.q_inj);
    const GraphInput in = make_graph_input(g, random_nodes(5, 7), FeatureStats{});
    const VectorXd u = random_vec(28, 8);

    for (bool projected : {false, true}) {
        CAPTURE(projected);
        SurrogateParams p = init_params(small_config(), 13);
        // nonzero biases
        std::mt19937_64 rng(14);
        std::normal_distribution<double> d(0.0, 0.1);
        auto ts = p.tensors();
        for (std::size_t k = 0; k < ts.size(); ++k)
            if (!p.is_weight(k))
                for (Eigen::Index i = 0; i < ts[k]->size(); ++i) ts[k]->data()[i] = d(rng);

        const ConstraintSystem* s = projected ? &sys : nullptr;
        ForwardTape tape;
        forward(p, in, s, &tape);
        const SurrogateParams grads = backward(p, tape, u);
        auto gts = grads.tensors();

        std::size_t checked = 0, bad = 0;
        const double h = 1e-6;
        std::mt19937_64 pick(15);
        for (std::size_t k = 0; k < ts.size(); ++k) {
            const Eigen::Index size = ts[k]->size();
            const Eigen::Index count = std::min<Eigen::Index>(size, 24);
            for (Eigen::Index c = 0; c < count; ++c) {
                const Eigen::Index i = count == size ? c : static_cast<Eigen::Index>(pick() % static_cast<std::uint64_t>(size));
                SurrogateParams q = p;
                auto qts = q.tensors();
                qts[k]->data()[i] += h;
                const double up = u.dot(forward(q, in, s));
                qts[k]->data()[i] -= 2 * h;
                const double down = u.dot(forward(q, in, s));
                const double fd = (up - down) / (2 * h);
                const double an = gts[k]->data()[i];
                if (std::abs(fd - an) > 1e-4 * std::max({std::abs(fd), std::abs(an), 1e-3})) {
                    ++bad;
                    MESSAGE(p.tensor_names()[k] << "[" << i << "] fd=" << fd << " analytic=" << an);
                }
                ++checked;
            }
        }
        CHECK(checked >= 200);
        CHECK(bad == 0);
    }
}

TEST_CASE("stale tapes are rejected") {
    const Grid g = five_bus();
    SurrogateParams p = init_params(small_config(), 1);
    const GraphInput in = make_graph_input(g, random_nodes(5, 2), FeatureStats{});
    ForwardTape tape;
    forward(p, in, nullptr, &tape);
    ++p.version;
    try {
        backward(p, tape, VectorXd::Ones(28));
        FAIL("expected StaleTape");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::StaleTape);
    }
}

TEST_CASE("forward is deterministic") {
    const Grid& g = ieee14();
    const SurrogateParams p = init_params(small_config(), 3);
    const GraphInput in = make_graph_input(g, random_nodes(14, 3), FeatureStats{});
    const ConstraintSystem sys = build_system(g, random_vec(14, 1), random_vec(14, 2));
    ForwardTape a, b;
    forward(p, in, &sys, &a);
    forward(p, in, &sys, &b);
    CHECK(a == b);
}

TEST_CASE("relabeling buses leaves branch outputs unchanged") {
    const Grid base = five_bus();
    const std::vector<std::size_t> perm{0, 3, 4, 1, 2};  // old id → new id; slack stays first
    std::vector<Bus> buses(5);
    for (const Bus& b : base.buses()) {
        Bus c = b;
        c.id = perm[b.id];
        buses[c.id] = c;
    }
    std::vector<Branch> branches;
    for (const Branch& br : base.branches()) branches.push_back(line(br.id, perm[br.from_bus], perm[br.to_bus], br.r, br.x));
    const Grid relabeled(buses, branches);

    const MatrixXd nodes = random_nodes(5, 21);
    MatrixXd moved(5, 3);
    for (Eigen::Index i = 0; i < 5; ++i) moved.row(static_cast<Eigen::Index>(perm[static_cast<std::size_t>(i)])) = nodes.row(i);
    const VectorXd np = random_vec(5, 22), nq = random_vec(5, 23);
    VectorXd np2(5), nq2(5);
    for (Eigen::Index i = 0; i < 5; ++i) {
        np2(static_cast<Eigen::Index>(perm[static_cast<std::size_t>(i)])) = np(i);
        nq2(static_cast<Eigen::Index>(perm[static_cast<std::size_t>(i)])) = nq(i);
    }

    const SurrogateParams p = init_params(small_config(), 4);
    const ConstraintSystem s1 = build_system(base, np, nq), s2 = build_system(relabeled, np2, nq2);
    const FlowSet a = forward(p, make_graph_input(base, nodes, FeatureStats{}), &s1);
    const FlowSet b = forward(p, make_graph_input(relabeled, moved, FeatureStats{}), &s2);
    CHECK((a - b).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("parameter JSON round-trip") {
    const SurrogateParams p = init_params(small_config(), 77);
    const SurrogateParams back = params_from_json(params_to_json(p));
    CHECK(back == p);
    CHECK(back.config == p.config);
    nlohmann::json broken = params_to_json(p);
    broken["hidden"] = 9;
    CHECK_THROWS(params_from_json(broken));
}

TEST_CASE("input shape checks") {
    const Grid& g = ieee14();
    CHECK_THROWS_AS(make_graph_input(g, MatrixXd::Zero(13, 3), FeatureStats{}), Error);
    const SurrogateParams p = init_params(small_config(), 1);
    const GraphInput in = make_graph_input(g, random_nodes(14, 1), FeatureStats{});
    const ConstraintSystem other = build_system(five_bus(), VectorXd::Zero(5), VectorXd::Zero(5));
    CHECK_THROWS_AS(forward(p, in, &other), Error);
}
