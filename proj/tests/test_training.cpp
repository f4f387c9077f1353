#include <cmath>
#include <random>

#include "doctest.h"
#include "kclflow/error.hpp"
#include "kclflow/training.hpp"
#include "support.hpp"

using namespace kclflow;
using namespace testing;
using Eigen::VectorXd;

namespace {

TrainConfig tiny_config() {
    TrainConfig c;
    c.model.hidden = 12;
    c.model.heads = 2;
    c.model.head_dim = 8;
    c.batch_size = 8;
    c.epochs = 3;
    c.lr = 3e-3;
    return c;
}

const Dataset& tiny_data() {
    static const Dataset ds = split_dataset(ieee14(), make_dataset(ieee14(), 40, Regime::N, 31), {0.6, 0.2, 0.2}, 31);
    return ds;
}

const Dataset& tiny_n1() {
    static const Dataset ds = split_dataset(ieee14(), make_dataset(ieee14(), 10, Regime::N1, 32), {0.0, 0.0, 1.0}, 32);
    return ds;
}

VectorXd random_vec(Eigen::Index n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> d(0.0, 1.0);
    VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = d(rng);
    return v;
}

}  // namespace

TEST_CASE("mse loss") {
    const VectorXd t = random_vec(40, 1);
    CHECK(mse_loss(t, t).value == 0.0);
    CHECK(mse_loss(t, t).grad.cwiseAbs().maxCoeff() == 0.0);
    CHECK(mse_loss(t + VectorXd::Ones(40), t).value == doctest::Approx(1.0).epsilon(1e-15));

    const VectorXd p = random_vec(40, 2);
    double sum = 0;
    for (Eigen::Index i = 0; i < 40; ++i) sum += (p(i) - t(i)) * (p(i) - t(i));
    const LossResult l = mse_loss(p, t);
    CHECK(std::abs(l.value - sum / 40) <= 1e-12);
    for (Eigen::Index i = 0; i < 40; ++i) CHECK(l.grad(i) == doctest::Approx(2 * (p(i) - t(i)) / 40));
    // batch form: per-item contributions add up
    const LossResult half = mse_loss(p, t, 80);
    CHECK(std::abs(2 * half.value - l.value) <= 1e-15);
    CHECK_THROWS_AS(mse_loss(p, random_vec(39, 3)), Error);
}

TEST_CASE("KCL metric") {
    const Grid& g = ieee14();
    const PFSolution sol = nr_solve(g, nominal_inputs(g));
    const VectorXd np = -sol.p_inj, nq = -sol.q_inj;
    FlowSet y = branch_flows(g, sol);
    const KclMetric exact = kcl_metric(g, np, nq, y);
    CHECK(exact.l_kcl <= 1e-12);

    const double delta = 0.03;
    const auto& br = g.branches()[4];
    y(4) += delta;  // p_from of branch 4 lands on its from bus only
    const KclMetric k = kcl_metric(g, np, nq, y);
    CHECK(k.l_p == doctest::Approx(exact.l_p + delta * delta / 14).epsilon(1e-6));
    CHECK(k.l_q == doctest::Approx(exact.l_q));
    CHECK(k.l_kcl == doctest::Approx((k.l_p + k.l_q) / 2));
    CHECK(br.from_bus < 14);

    const ConstraintSystem sys = build_system(g, np, nq);
    const KclMetric projected = kcl_metric(g, np, nq, project_global(sys, random_vec(80, 4)));
    CHECK(projected.l_kcl <= 1e-16);
    CHECK_THROWS_AS(kcl_metric(g, np, nq, random_vec(79, 5)), Error);
    CHECK_THROWS_AS(kcl_metric(g, VectorXd::Zero(13), nq, y), Error);
}

TEST_CASE("AdamW single step") {
    TrainConfig cfg;
    cfg.lr = 0.01;
    cfg.weight_decay = 0.1;
    SurrogateParams p = SurrogateParams::zeros(tiny_config().model);
    p.w1(0, 0) = 0.5;
    p.w2(1, 1) = -0.25;
    SurrogateParams g = SurrogateParams::zeros(p.config);
    g.w1(0, 0) = 0.2;
    AdamState st = AdamState::zeros_like(p);
    const auto version = p.version;
    adamw_step(p, g, st, cfg);

    const double decayed = 0.5 * (1 - 0.01 * 0.1);
    const double m_hat = (0.1 * 0.2) / (1 - 0.9);
    const double v_hat = (0.001 * 0.04) / (1 - 0.999);
    CHECK(p.w1(0, 0) == doctest::Approx(decayed - 0.01 * m_hat / (std::sqrt(v_hat) + 1e-8)).epsilon(1e-14));
    CHECK(p.w2(1, 1) == doctest::Approx(-0.25 * (1 - 0.01 * 0.1)).epsilon(1e-14));
    CHECK(p.w1(1, 0) == 0.0);
    CHECK(st.step == 1);
    CHECK(p.version != version);

    SUBCASE("zero grads without decay leave params alone") {
        TrainConfig plain;
        plain.weight_decay = 0.0;
        SurrogateParams q = init_params(tiny_config().model, 2);
        const SurrogateParams before = q;
        AdamState s = AdamState::zeros_like(q);
        for (int k = 0; k < 3; ++k) adamw_step(q, SurrogateParams::zeros(q.config), s, plain);
        CHECK(q == before);
    }
    SUBCASE("zero grads with decay shrink by the decay factor") {
        SurrogateParams q = init_params(tiny_config().model, 2);
        const SurrogateParams before = q;
        AdamState s = AdamState::zeros_like(q);
        adamw_step(q, SurrogateParams::zeros(q.config), s, cfg);
        const auto a = q.tensors();
        const auto b = before.tensors();
        for (std::size_t k = 0; k < a.size(); ++k)
            CHECK((*a[k] - *b[k] * (1 - cfg.lr * cfg.weight_decay)).cwiseAbs().maxCoeff() <= 1e-15);
    }
}

TEST_CASE("zero learning rate keeps the initialization") {
    TrainConfig cfg = tiny_config();
    cfg.lr = 0.0;
    cfg.weight_decay = 0.0;
    cfg.epochs = 1;
    const TrainResult r = train(tiny_data(), ieee14(), cfg);
    CHECK(r.checkpoint.params == init_params(cfg.model, cfg.seed));
}

TEST_CASE("projected training keeps KCL at machine level and learns") {
    TrainConfig cfg = tiny_config();
    cfg.epochs = 6;
    std::size_t calls = 0;
    const TrainResult r = train(tiny_data(), ieee14(), cfg, [&](const EpochLog&) { ++calls; });
    REQUIRE(r.log.size() == 6);
    CHECK(calls == 6);
    for (const EpochLog& e : r.log) {
        CHECK(e.train_kcl <= 1e-10);
        REQUIRE(e.val_kcl.has_value());
        CHECK(*e.val_kcl <= 1e-10);
    }
    CHECK(r.log.back().train_mse < r.log.front().train_mse);
    CHECK(*r.log.back().val_mse < r.initial_val_mse);
    CHECK(r.checkpoint.base_topology_hash == ieee14().topology_hash());
    CHECK(r.checkpoint.stats == *tiny_data().normalization);
}

TEST_CASE("training is reproducible and worker-count independent") {
    TrainConfig cfg = tiny_config();
    cfg.epochs = 2;
    const TrainResult a = train(tiny_data(), ieee14(), cfg);
    const TrainResult b = train(tiny_data(), ieee14(), cfg);
    cfg.workers = 3;
    const TrainResult c = train(tiny_data(), ieee14(), cfg);
    CHECK(a.checkpoint.params == b.checkpoint.params);
    CHECK(a.checkpoint.params == c.checkpoint.params);
    CHECK(a.log.back().train_mse == c.log.back().train_mse);

    cfg.seed = 1;
    CHECK_FALSE(train(tiny_data(), ieee14(), cfg).checkpoint.params == a.checkpoint.params);
}

TEST_CASE("training rejects bad input") {
    CHECK_THROWS_AS(train(tiny_n1(), ieee14(), tiny_config()), Error);
    TrainConfig bad = tiny_config();
    bad.batch_size = 0;
    CHECK_THROWS_AS(train(tiny_data(), ieee14(), bad), Error);
    try {
        train(tiny_data(), five_bus(), tiny_config());
        FAIL("expected TopologyMismatch");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::TopologyMismatch);
    }
    TrainConfig wild = tiny_config();
    wild.lr = 1e300;
    wild.epochs = 4;
    try {
        train(tiny_data(), ieee14(), wild);
        FAIL("expected NonFiniteLoss");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::NonFiniteLoss);
        CHECK(exit_code(e.kind()) == 3);
    }
}

TEST_CASE("evaluation, ablation ordering and reports") {
    const Grid& g = ieee14();
    TrainConfig cfg = tiny_config();
    cfg.epochs = 2;
    const TrainResult proj = train(tiny_data(), g, cfg);
    cfg.with_projection = false;
    const TrainResult plain = train(tiny_data(), g, cfg);

    for (const Dataset* ds : {&tiny_data(), &tiny_n1()}) {
        const EvalReport a = evaluate(proj.checkpoint, *ds, g);
        const EvalReport b = evaluate(plain.checkpoint, *ds, g);
        CHECK(a.test_count == test_scenarios(*ds).size());
        CHECK(a.mean.kcl_violation <= 1e-12);
        CHECK(b.mean.kcl_violation > 0.0);
        CHECK(b.mean.kcl_violation > a.mean.kcl_violation);
        CHECK(a.mean.kcl_violation == doctest::Approx((a.mean.l_p + a.mean.l_q) / 2));
        CHECK(b.mean.kcl_violation == doctest::Approx((b.mean.l_p + b.mean.l_q) / 2));
        CHECK_FALSE(a.stddev.has_value());
        CHECK(report_from_json(report_to_json(a)) == a);
        CHECK(evaluate(proj.checkpoint, *ds, g) == a);
    }
    CHECK(evaluate(proj.checkpoint, tiny_n1(), g).regime == "n1");
}

TEST_CASE("multi-run evaluation reports mean and std") {
    TrainConfig cfg = tiny_config();
    cfg.epochs = 1;
    const EvalReport r = evaluate_runs(cfg, tiny_data(), tiny_n1(), ieee14(), 2);
    REQUIRE(r.per_run.size() == 2);
    CHECK(r.runs == 2);
    CHECK(r.per_run[0].seed == 0);
    CHECK(r.per_run[1].seed == 1);
    REQUIRE(r.stddev.has_value());
    const double m = (r.per_run[0].mse + r.per_run[1].mse) / 2;
    CHECK(r.mean.mse == doctest::Approx(m));
    CHECK(r.stddev->mse == doctest::Approx(std::abs(r.per_run[0].mse - m)));
    CHECK(report_from_json(report_to_json(r)) == r);
    CHECK(evaluate_runs(cfg, tiny_data(), tiny_n1(), ieee14(), 2) == r);
    CHECK(report_to_json(r).contains("std"));
}

TEST_CASE("checkpoints round-trip and guard their normalization") {
    TrainConfig cfg = tiny_config();
    cfg.epochs = 1;
    cfg.grad_clip = 5.0;
    const Checkpoint ck = train(tiny_data(), ieee14(), cfg).checkpoint;
    const Checkpoint back = checkpoint_from_json(checkpoint_to_json(ck));
    CHECK(back.params == ck.params);
    CHECK(back.stats == ck.stats);
    CHECK(back.config == ck.config);
    CHECK(back.base_topology_hash == ck.base_topology_hash);
    CHECK(checkpoint_to_json(back).dump() == checkpoint_to_json(ck).dump());
    CHECK(train_config_from_json(train_config_to_json(cfg)) == cfg);

    Dataset other = tiny_data();
    other.normalization->node_mean[0] += 1.0;
    try {
        evaluate(ck, other, ieee14());
        FAIL("expected TopologyMismatch");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::TopologyMismatch);
    }
    CHECK_THROWS_AS(checkpoint_from_json(nlohmann::json{{"kind", "other"}}), Error);
}

TEST_CASE("prepared samples are shared per topology") {
    SampleFactory f(ieee14(), *tiny_data().normalization);
    const auto prepared = f.prepare_all(test_scenarios(tiny_n1()));
    CHECK(prepared.size() == 10);
    for (std::size_t i = 0; i < prepared.size(); ++i) {
        CHECK(prepared[i].system.op->num_branches() == 19);
        CHECK(kcl_residual(prepared[i].system, prepared[i].target).lpNorm<Eigen::Infinity>() <= 1e-6);
    }
    CHECK(f.cache().size() <= 10);
}
