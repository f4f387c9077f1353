#include "kclflow/training.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <mutex>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include "kclflow/error.hpp"

namespace kclflow {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using nlohmann::json;

namespace {

template <typename Fn>
void parallel_for(std::size_t n, unsigned workers, Fn&& fn) {
    workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
    if (workers == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto work = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= n) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(failure_mutex);
                if (!failure) failure = std::current_exception();
                next.store(n);
                return;
            }
        }
    };
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
}

void add_into(SurrogateParams& dst, const SurrogateParams& src) {
    auto d = dst.tensors();
    auto s = src.tensors();
    for (std::size_t k = 0; k < d.size(); ++k) *d[k] += *s[k];
}

void set_zero(SurrogateParams& p) {
    for (MatrixXd* m : p.tensors()) m->setZero();
}

double grad_norm(const SurrogateParams& g) {
    double sq = 0.0;
    for (const MatrixXd* m : g.tensors()) sq += m->squaredNorm();
    return std::sqrt(sq);
}

struct SampleScore {
    double sq_err = 0.0;
    double count = 0.0;
    KclMetric kcl;
};

SampleScore score_sample(const SurrogateParams& params, const PreparedSample& s, bool with_projection) {
    const FlowSet pred = forward(params, s.input, with_projection ? &s.system : nullptr);
    SampleScore out;
    out.sq_err = (pred - s.target).squaredNorm();
    out.count = static_cast<double>(pred.size());
    out.kcl = kcl_metric(*s.grid, s.system.b.head(s.grid->num_buses()), s.system.b.tail(s.grid->num_buses()), pred);
    return out;
}

json metrics_to_json(const RunMetrics& m, bool with_seed) {
    json j = {{"mse", m.mse}, {"l_p", m.l_p}, {"l_q", m.l_q}, {"kcl_violation", m.kcl_violation}};
    if (with_seed) j["seed"] = m.seed;
    return j;
}

RunMetrics metrics_from_json(const json& j) {
    RunMetrics m;
    m.seed = j.value("seed", std::uint64_t{0});
    m.mse = j.at("mse").get<double>();
    m.l_p = j.at("l_p").get<double>();
    m.l_q = j.at("l_q").get<double>();
    m.kcl_violation = j.at("kcl_violation").get<double>();
    return m;
}

void fill_summary(EvalReport& report) {
    const double n = static_cast<double>(report.per_run.size());
    RunMetrics mean;
    for (const auto& r : report.per_run) {
        mean.mse += r.mse;
        mean.l_p += r.l_p;
        mean.l_q += r.l_q;
        mean.kcl_violation += r.kcl_violation;
    }
    mean.mse /= n;
    mean.l_p /= n;
    mean.l_q /= n;
    mean.kcl_violation /= n;
    report.mean = mean;
    report.runs = report.per_run.size();
    if (report.runs > 1) {
        RunMetrics sd;
        for (const auto& r : report.per_run) {
            sd.mse += (r.mse - mean.mse) * (r.mse - mean.mse);
            sd.l_p += (r.l_p - mean.l_p) * (r.l_p - mean.l_p);
            sd.l_q += (r.l_q - mean.l_q) * (r.l_q - mean.l_q);
            sd.kcl_violation += (r.kcl_violation - mean.kcl_violation) * (r.kcl_violation - mean.kcl_violation);
        }
        sd.mse = std::sqrt(sd.mse / n);
        sd.l_p = std::sqrt(sd.l_p / n);
        sd.l_q = std::sqrt(sd.l_q / n);
        sd.kcl_violation = std::sqrt(sd.kcl_violation / n);
        report.stddev = sd;
    } else {
        report.stddev.reset();
    }
}

}  // namespace

json train_config_to_json(const TrainConfig& cfg) {
    return {
        {"lr", cfg.lr},
        {"beta1", cfg.beta1},
        {"beta2", cfg.beta2},
        {"eps", cfg.eps},
        {"weight_decay", cfg.weight_decay},
        {"batch_size", cfg.batch_size},
        {"epochs", cfg.epochs},
        {"seed", cfg.seed},
        {"with_projection", cfg.with_projection},
        {"grad_clip", cfg.grad_clip ? json(*cfg.grad_clip) : json(nullptr)},
        {"hidden", cfg.model.hidden},
        {"heads", cfg.model.heads},
        {"head_dim", cfg.model.head_dim},
        {"leaky_slope", cfg.model.leaky_slope},
    };
}

TrainConfig train_config_from_json(const json& doc) {
    TrainConfig cfg;
    try {
        cfg.lr = doc.at("lr").get<double>();
        cfg.beta1 = doc.at("beta1").get<double>();
        cfg.beta2 = doc.at("beta2").get<double>();
        cfg.eps = doc.at("eps").get<double>();
        cfg.weight_decay = doc.at("weight_decay").get<double>();
        cfg.batch_size = doc.at("batch_size").get<std::size_t>();
        cfg.epochs = doc.at("epochs").get<std::size_t>();
        cfg.seed = doc.at("seed").get<std::uint64_t>();
        cfg.with_projection = doc.at("with_projection").get<bool>();
        if (doc.contains("grad_clip") && !doc.at("grad_clip").is_null()) cfg.grad_clip = doc.at("grad_clip").get<double>();
        cfg.model.hidden = doc.at("hidden").get<int>();
        cfg.model.heads = doc.at("heads").get<int>();
        cfg.model.head_dim = doc.at("head_dim").get<int>();
        cfg.model.leaky_slope = doc.at("leaky_slope").get<double>();
    } catch (const json::exception& e) {
        throw Error(ErrorKind::InvalidArgument, std::string("train config: ") + e.what());
    }
    return cfg;
}

LossResult mse_loss(const FlowSet& pred, const FlowSet& target, double count) {
    if (pred.size() != target.size())
        throw Error(ErrorKind::ShapeMismatch, "mse_loss: pred has " + std::to_string(pred.size()) +
                                                  " components, target " + std::to_string(target.size()));
    if (!(count > 0.0)) throw Error(ErrorKind::InvalidArgument, "mse_loss: count must be positive");
    const VectorXd diff = pred - target;
    return {diff.squaredNorm() / count, 2.0 * diff / count};
}

LossResult mse_loss(const FlowSet& pred, const FlowSet& target) {
    return mse_loss(pred, target, static_cast<double>(std::max<Eigen::Index>(pred.size(), 1)));
}

KclMetric kcl_metric(const Grid& grid, const VectorXd& net_p, const VectorXd& net_q, const FlowSet& pred) {
    const auto n = static_cast<Eigen::Index>(grid.num_buses());
    if (net_p.size() != n || net_q.size() != n)
        throw Error(ErrorKind::DimMismatch, "kcl_metric: injections must have one entry per bus");
    if (pred.size() != static_cast<Eigen::Index>(4 * grid.num_branches()))
        throw Error(ErrorKind::DimMismatch, "kcl_metric: flow vector must have 4|E| entries");
    const BusInjections calc = net_injections_from_flows(grid, pred);
    KclMetric m;
    m.l_p = (net_p + calc.p).squaredNorm() / static_cast<double>(n);
    m.l_q = (net_q + calc.q).squaredNorm() / static_cast<double>(n);
    m.l_kcl = 0.5 * (m.l_p + m.l_q);
    return m;
}

AdamState AdamState::zeros_like(const SurrogateParams& params) {
    return {SurrogateParams::zeros(params.config), SurrogateParams::zeros(params.config), 0};
}

void adamw_step(SurrogateParams& params, const SurrogateParams& grads, AdamState& state, const TrainConfig& cfg) {
    state.step += 1;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    auto p = params.tensors();
    auto g = grads.tensors();
    auto m = state.m.tensors();
    auto v = state.v.tensors();
    for (std::size_t k = 0; k < p.size(); ++k) {
        MatrixXd& w = *p[k];
        w *= (1.0 - cfg.lr * cfg.weight_decay);
        *m[k] = cfg.beta1 * *m[k] + (1.0 - cfg.beta1) * *g[k];
        *v[k] = cfg.beta2 * *v[k] + (1.0 - cfg.beta2) * g[k]->cwiseProduct(*g[k]);
        const MatrixXd m_hat = *m[k] / bc1;
        const MatrixXd v_hat = *v[k] / bc2;
        w.array() -= cfg.lr * m_hat.array() / (v_hat.array().sqrt() + cfg.eps);
    }
    params.version += 1;
}

SampleFactory::SampleFactory(Grid base, FeatureStats stats) : base_(std::move(base)), stats_(stats) {}

const SampleFactory::TopologyEntry& SampleFactory::entry(std::optional<BranchId> removed) {
    auto it = topologies_.find(removed);
    if (it != topologies_.end()) return it->second;
    TopologyEntry e;
    e.grid = std::make_shared<const Grid>(removed ? remove_branch(base_, *removed) : base_);
    e.graph = GraphTopology::from_grid(*e.grid);
    e.op = cache_.get(*e.grid);
    return topologies_.emplace(removed, std::move(e)).first->second;
}

PreparedSample SampleFactory::prepare(const Scenario& scenario) {
    const TopologyEntry& e = entry(scenario.removed_branch);
    if (scenario.topology_hash != e.grid->topology_hash())
        throw Error(ErrorKind::TopologyMismatch, "scenario topology " + hash_hex(scenario.topology_hash) +
                                                     " does not match grid " + hash_hex(e.grid->topology_hash()));
    if (scenario.target_flows.size() != static_cast<Eigen::Index>(4 * e.grid->num_branches()))
        throw Error(ErrorKind::DimMismatch, "scenario target has the wrong number of flows");
    PreparedSample s;
    s.grid = e.grid;
    s.input = make_graph_input(*e.grid, scenario.node_inputs, stats_, e.graph);
    s.system = bind_injections(e.op, scenario.net_p, scenario.net_q);
    s.target = scenario.target_flows;
    return s;
}

std::vector<PreparedSample> SampleFactory::prepare_all(const std::vector<const Scenario*>& scenarios) {
    std::vector<PreparedSample> out;
    out.reserve(scenarios.size());
    for (const Scenario* s : scenarios) out.push_back(prepare(*s));
    return out;
}

json epoch_log_to_json(const EpochLog& log) {
    json j = {{"epoch", log.epoch}, {"train_mse", log.train_mse}, {"train_kcl", log.train_kcl}};
    j["val_mse"] = log.val_mse ? json(*log.val_mse) : json(nullptr);
    j["val_kcl"] = log.val_kcl ? json(*log.val_kcl) : json(nullptr);
    return j;
}

json checkpoint_to_json(const Checkpoint& ckpt) {
    return {
        {"kind", "kclflow-checkpoint"},
        {"version", 1},
        {"base_topology_hash", hash_hex(ckpt.base_topology_hash)},
        {"train_config", train_config_to_json(ckpt.config)},
        {"normalization", stats_to_json(ckpt.stats)},
        {"params", params_to_json(ckpt.params)},
    };
}

Checkpoint checkpoint_from_json(const json& doc) {
    if (doc.value("kind", std::string()) != "kclflow-checkpoint")
        throw Error(ErrorKind::InvalidArgument, "not a checkpoint document");
    Checkpoint c;
    try {
        c.base_topology_hash = std::stoull(doc.at("base_topology_hash").get<std::string>(), nullptr, 16);
        c.config = train_config_from_json(doc.at("train_config"));
        c.stats = stats_from_json(doc.at("normalization"));
        c.params = params_from_json(doc.at("params"));
    } catch (const json::exception& e) {
        throw Error(ErrorKind::InvalidArgument, std::string("checkpoint: ") + e.what());
    }
    return c;
}

RunMetrics evaluate_samples(const SurrogateParams& params, const std::vector<PreparedSample>& samples,
                            bool with_projection, unsigned workers) {
    RunMetrics m;
    if (samples.empty()) return m;
    std::vector<SampleScore> scores(samples.size());
    parallel_for(samples.size(), workers,
                 [&](std::size_t i) { scores[i] = score_sample(params, samples[i], with_projection); });
    double sq = 0.0, count = 0.0;
    for (const auto& s : scores) {
        sq += s.sq_err;
        count += s.count;
        m.l_p += s.kcl.l_p;
        m.l_q += s.kcl.l_q;
    }
    const double n = static_cast<double>(scores.size());
    m.mse = sq / count;
    m.l_p /= n;
    m.l_q /= n;
    m.kcl_violation = 0.5 * (m.l_p + m.l_q);
    return m;
}

TrainResult train(const Dataset& dataset, const Grid& grid, const TrainConfig& cfg, const EpochCallback& on_epoch) {
    if (dataset.regime != Regime::N)
        throw Error(ErrorKind::InvalidArgument, "training requires an N-regime dataset");
    if (!(cfg.lr >= 0.0) || !std::isfinite(cfg.lr)) throw Error(ErrorKind::InvalidArgument, "lr must be finite and non-negative");
    if (cfg.batch_size < 1) throw Error(ErrorKind::InvalidArgument, "batch_size must be at least 1");
    if (dataset.topology_hash != grid.topology_hash())
        throw Error(ErrorKind::TopologyMismatch, "dataset was generated for topology " + hash_hex(dataset.topology_hash) +
                                                     ", grid is " + hash_hex(grid.topology_hash()));

    auto train_set = dataset.with_split(Split::Train);
    if (train_set.empty()) throw Error(ErrorKind::EmptySplit, "dataset has no train scenarios");
    const FeatureStats stats = dataset.normalization ? *dataset.normalization : fit_stats(grid, train_set);

    SampleFactory factory(grid, stats);
    const std::vector<PreparedSample> train_samples = factory.prepare_all(train_set);
    const std::vector<PreparedSample> val_samples = factory.prepare_all(dataset.with_split(Split::Val));

    TrainResult result;
    result.checkpoint.stats = stats;
    result.checkpoint.config = cfg;
    result.checkpoint.base_topology_hash = grid.topology_hash();
    SurrogateParams& params = result.checkpoint.params;
    params = init_params(cfg.model, cfg.seed);
    AdamState state = AdamState::zeros_like(params);

    result.initial_val_mse =
        evaluate_samples(params, val_samples.empty() ? train_samples : val_samples, cfg.with_projection, cfg.workers).mse;

    std::vector<std::size_t> order(train_samples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    const std::size_t bs = std::min(cfg.batch_size, train_samples.size());
    std::vector<SurrogateParams> item_grads(bs, SurrogateParams::zeros(cfg.model));
    std::vector<SampleScore> item_scores(bs);
    SurrogateParams batch_grad = SurrogateParams::zeros(cfg.model);

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::mt19937_64 rng(derive_seed(cfg.seed, epoch, 0x7368756666ULL));
        std::shuffle(order.begin(), order.end(), rng);

        double sq_total = 0.0, count_total = 0.0, kcl_total = 0.0;
        for (std::size_t start = 0; start < order.size(); start += bs) {
            const std::size_t n = std::min(bs, order.size() - start);
            double batch_count = 0.0;
            for (std::size_t k = 0; k < n; ++k) batch_count += static_cast<double>(train_samples[order[start + k]].target.size());

            parallel_for(n, cfg.workers, [&](std::size_t k) {
                const PreparedSample& s = train_samples[order[start + k]];
                ForwardTape tape;
                const FlowSet pred = forward(params, s.input, cfg.with_projection ? &s.system : nullptr, &tape);
                const LossResult loss = mse_loss(pred, s.target, batch_count);
                set_zero(item_grads[k]);
                backward_accumulate(params, tape, loss.grad, item_grads[k]);
                SampleScore& sc = item_scores[k];
                sc.sq_err = (pred - s.target).squaredNorm();
                sc.count = static_cast<double>(pred.size());
                const auto nb = static_cast<Eigen::Index>(s.grid->num_buses());
                sc.kcl = kcl_metric(*s.grid, s.system.b.head(nb), s.system.b.tail(nb), pred);
            });

            set_zero(batch_grad);
            double batch_sq = 0.0;
            for (std::size_t k = 0; k < n; ++k) {
                add_into(batch_grad, item_grads[k]);
                batch_sq += item_scores[k].sq_err;
                count_total += item_scores[k].count;
                kcl_total += item_scores[k].kcl.l_kcl;
            }
            sq_total += batch_sq;

            if (!std::isfinite(batch_sq) || !batch_grad.all_finite()) {
                std::ostringstream msg;
                msg << "loss became non-finite at epoch " << epoch << ", batch starting at " << start
                    << " (batch loss " << batch_sq / batch_count << ", grad norm " << grad_norm(batch_grad) << ")";
                throw Error(ErrorKind::NonFiniteLoss, msg.str());
            }
            if (cfg.grad_clip) {
                const double norm = grad_norm(batch_grad);
                if (norm > *cfg.grad_clip && norm > 0.0)
                    for (MatrixXd* m : batch_grad.tensors()) *m *= *cfg.grad_clip / norm;
            }
            adamw_step(params, batch_grad, state, cfg);
        }

        EpochLog log;
        log.epoch = epoch;
        log.train_mse = sq_total / count_total;
        log.train_kcl = kcl_total / static_cast<double>(train_samples.size());
        if (!val_samples.empty()) {
            const RunMetrics v = evaluate_samples(params, val_samples, cfg.with_projection, cfg.workers);
            log.val_mse = v.mse;
            log.val_kcl = v.kcl_violation;
        }
        result.log.push_back(log);
        if (on_epoch) on_epoch(log);
    }
    return result;
}

json report_to_json(const EvalReport& report) {
    json j;
    j["regime"] = report.regime;
    j["with_projection"] = report.with_projection;
    j["test_count"] = report.test_count;
    j["runs"] = report.runs;
    j["train_config"] = train_config_to_json(report.config);
    j["per_run"] = json::array();
    for (const auto& r : report.per_run) j["per_run"].push_back(metrics_to_json(r, true));
    j["mean"] = metrics_to_json(report.mean, false);
    if (report.stddev) j["std"] = metrics_to_json(*report.stddev, false);
    return j;
}

EvalReport report_from_json(const json& doc) {
    EvalReport r;
    try {
        r.regime = doc.at("regime").get<std::string>();
        r.with_projection = doc.at("with_projection").get<bool>();
        r.test_count = doc.at("test_count").get<std::size_t>();
        r.runs = doc.at("runs").get<std::size_t>();
        r.config = train_config_from_json(doc.at("train_config"));
        for (const auto& item : doc.at("per_run")) r.per_run.push_back(metrics_from_json(item));
        r.mean = metrics_from_json(doc.at("mean"));
        if (doc.contains("std")) r.stddev = metrics_from_json(doc.at("std"));
    } catch (const json::exception& e) {
        throw Error(ErrorKind::InvalidArgument, std::string("report: ") + e.what());
    }
    return r;
}

std::vector<const Scenario*> test_scenarios(const Dataset& dataset) {
    auto tagged = dataset.with_split(Split::Test);
    if (!tagged.empty()) return tagged;
    bool any_tagged = false;
    for (const auto& s : dataset.scenarios) any_tagged = any_tagged || s.split != Split::Unassigned;
    if (any_tagged) return {};
    std::vector<const Scenario*> all;
    for (const auto& s : dataset.scenarios) all.push_back(&s);
    return all;
}

namespace {

std::vector<PreparedSample> prepare_test(const FeatureStats& stats, const Dataset& dataset, const Grid& grid) {
    if (dataset.topology_hash != grid.topology_hash())
        throw Error(ErrorKind::TopologyMismatch, "dataset was generated for topology " + hash_hex(dataset.topology_hash) +
                                                     ", grid is " + hash_hex(grid.topology_hash()));
    if (dataset.normalization && !(*dataset.normalization == stats))
        throw Error(ErrorKind::TopologyMismatch, "dataset normalization header disagrees with the checkpoint's stats");
    const auto selected = test_scenarios(dataset);
    if (selected.empty()) throw Error(ErrorKind::EmptySplit, "dataset has no test scenarios");
    SampleFactory factory(grid, stats);
    return factory.prepare_all(selected);
}

}  // namespace

EvalReport evaluate(const Checkpoint& ckpt, const Dataset& dataset, const Grid& grid) {
    if (ckpt.base_topology_hash != grid.topology_hash())
        throw Error(ErrorKind::TopologyMismatch, "checkpoint was trained on topology " + hash_hex(ckpt.base_topology_hash));
    const auto samples = prepare_test(ckpt.stats, dataset, grid);
    EvalReport report;
    report.regime = std::string(to_string(dataset.regime));
    report.config = ckpt.config;
    report.with_projection = ckpt.config.with_projection;
    report.test_count = samples.size();
    RunMetrics m = evaluate_samples(ckpt.params, samples, ckpt.config.with_projection, ckpt.config.workers);
    m.seed = ckpt.config.seed;
    report.per_run.push_back(m);
    fill_summary(report);
    return report;
}

std::vector<EvalReport> evaluate_runs(const TrainConfig& cfg, const Dataset& train_data,
                                      const std::vector<const Dataset*>& test_sets, const Grid& grid, std::size_t runs) {
    if (runs < 1) throw Error(ErrorKind::InvalidArgument, "runs must be at least 1");
    std::vector<EvalReport> reports(test_sets.size());
    for (std::size_t t = 0; t < test_sets.size(); ++t) {
        reports[t].regime = std::string(to_string(test_sets[t]->regime));
        reports[t].config = cfg;
        reports[t].with_projection = cfg.with_projection;
    }
    for (std::size_t r = 0; r < runs; ++r) {
        TrainConfig run_cfg = cfg;
        run_cfg.seed = r;
        const TrainResult trained = train(train_data, grid, run_cfg);
        for (std::size_t t = 0; t < test_sets.size(); ++t) {
            const auto samples = prepare_test(trained.checkpoint.stats, *test_sets[t], grid);
            reports[t].test_count = samples.size();
            RunMetrics m = evaluate_samples(trained.checkpoint.params, samples, cfg.with_projection, cfg.workers);
            m.seed = r;
            reports[t].per_run.push_back(m);
        }
    }
    for (auto& report : reports) fill_summary(report);
    return reports;
}

EvalReport evaluate_runs(const TrainConfig& cfg, const Dataset& train_data, const Dataset& test_data, const Grid& grid,
                         std::size_t runs) {
    return evaluate_runs(cfg, train_data, std::vector<const Dataset*>{&test_data}, grid, runs).front();
}

}  // namespace kclflow
