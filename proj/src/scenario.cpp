#include "kclflow/scenario.hpp"

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

double SamplingConfig::stddev() const {
    return reading == SpreadReading::Variance ? std::sqrt(spread) : spread;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
    // splitmix64 finalizer over the combined words
    auto mix = [](std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ull;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    };
    return mix(mix(mix(seed) ^ a) ^ (b * 0x9e3779b97f4a7c15ull + 1));
}

NodeSample sample_scenario(const Grid& grid, std::uint64_t seed, const SamplingConfig& config) {
    const auto n = static_cast<Eigen::Index>(grid.num_buses());
    NodeSample s{Eigen::VectorXd(n), Eigen::VectorXd(n), Eigen::VectorXd(n), Eigen::VectorXd(n)};
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, config.stddev());
    for (const Bus& bus : grid.buses()) {
        const auto i = static_cast<Eigen::Index>(bus.id);
        // Draw all three for every bus so the stream layout is independent of bus kinds.
        const double dp = noise(rng), dq = noise(rng), dv = noise(rng);
        s.va(i) = bus.va_nom;
        if (bus.kind == BusKind::Slack) {
            s.p(i) = bus.p_nom;
            s.q(i) = bus.q_nom;
            s.vm(i) = bus.vm_nom;
            continue;
        }
        s.p(i) = bus.p_nom + dp;
        s.q(i) = bus.q_nom + dq;
        s.vm(i) = std::clamp(bus.vm_nom + dv, config.vm_min, config.vm_max);
    }
    return s;
}

std::string_view to_string(Regime regime) { return regime == Regime::N ? "n" : "n1"; }

std::string_view to_string(Split split) {
    switch (split) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
        case Split::Unassigned: return "none";
    }
    return "none";
}

Regime regime_from_string(std::string_view text) {
    if (text == "n" || text == "N") return Regime::N;
    if (text == "n1" || text == "N-1" || text == "n-1") return Regime::N1;
    throw Error(ErrorKind::InvalidArgument, "unknown regime '" + std::string(text) + "'");
}

Split split_from_string(std::string_view text) {
    if (text == "train") return Split::Train;
    if (text == "val") return Split::Val;
    if (text == "test") return Split::Test;
    if (text == "none") return Split::Unassigned;
    throw Error(ErrorKind::InvalidArgument, "unknown split '" + std::string(text) + "'");
}

std::vector<const Scenario*> Dataset::with_split(Split split) const {
    std::vector<const Scenario*> out;
    for (const Scenario& s : scenarios) {
        if (s.split == split) out.push_back(&s);
    }
    return out;
}

Grid scenario_grid(const Grid& base, const Scenario& scenario) {
    return scenario.removed_branch ? remove_branch(base, *scenario.removed_branch) : base;
}

namespace {

struct SlotResult {
    std::optional<Scenario> scenario;
    std::size_t attempts = 0;
    std::size_t divergences = 0;
};

SlotResult generate_slot(const Grid& grid, const std::vector<BranchId>& eligible, std::size_t index, Regime regime,
                         std::uint64_t seed, const GenerationOptions& options, std::size_t attempt_budget) {
    SlotResult out;
    for (std::size_t attempt = 0; attempt < attempt_budget; ++attempt) {
        ++out.attempts;
        const std::uint64_t sub_seed = derive_seed(seed, index, attempt);
        const NodeSample sample = sample_scenario(grid, sub_seed, options.sampling);

        std::optional<BranchId> removed;
        if (regime == Regime::N1) {
            std::mt19937_64 pick(derive_seed(sub_seed, 0x4e31));
            std::uniform_int_distribution<std::size_t> which(0, eligible.size() - 1);
            removed = eligible[which(pick)];
        }
        const Grid topo = removed ? remove_branch(grid, *removed) : grid;

        PowerFlowInputs inputs{sample.p, sample.q, sample.vm, sample.va};
        PFSolution sol;
        try {
            sol = nr_solve(topo, inputs, options.solver);
        } catch (const Error& ex) {
            if (ex.kind() != ErrorKind::Diverged && ex.kind() != ErrorKind::SingularJacobian) throw;
            ++out.divergences;
            continue;
        }

        const auto n = static_cast<Eigen::Index>(topo.num_buses());
        Scenario sc;
        sc.topology_hash = topo.topology_hash();
        sc.removed_branch = removed;
        sc.node_inputs.resize(n, 3);
        sc.node_inputs.col(0) = sol.p_inj;
        sc.node_inputs.col(1) = sol.q_inj;
        sc.node_inputs.col(2) = sol.vm;
        sc.target_flows = branch_flows(topo, sol);
        sc.net_p = -sol.p_inj;
        sc.net_q = -sol.q_inj;
        sc.seed = sub_seed;
        out.scenario = std::move(sc);
        return out;
    }
    return out;
}

}  // namespace

Dataset make_dataset(const Grid& grid, std::size_t count, Regime regime, std::uint64_t seed,
                     const GenerationOptions& options, GenerationStats* stats) {
    if (count < 1) throw Error(ErrorKind::InvalidArgument, "dataset count must be at least 1");
    std::vector<BranchId> eligible;
    if (regime == Regime::N1) {
        eligible = eligible_contingencies(grid);
        if (eligible.empty()) throw Error(ErrorKind::InvalidArgument, "grid has no admissible N-1 contingency");
    }
    const std::size_t budget = options.max_attempt_factor * count;

    std::vector<SlotResult> slots(count);
    const unsigned workers = std::max(1u, std::min<unsigned>(options.workers, static_cast<unsigned>(count)));
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto work = [&] {
        for (std::size_t i = next++; i < count; i = next++) {
            try {
                slots[i] = generate_slot(grid, eligible, i, regime, seed, options, budget);
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
            }
        }
    };
    if (workers == 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (unsigned w = 0; w < workers; ++w) pool.emplace_back(work);
        for (auto& t : pool) t.join();
    }
    if (failure) std::rethrow_exception(failure);

    GenerationStats tally;
    Dataset ds;
    ds.topology_hash = grid.topology_hash();
    ds.regime = regime;
    ds.sampling = options.sampling;
    ds.seed = seed;
    ds.scenarios.reserve(count);
    bool exhausted = false;
    for (SlotResult& slot : slots) {
        tally.attempts += slot.attempts;
        tally.divergences += slot.divergences;
        if (!slot.scenario) {
            exhausted = true;
            continue;
        }
        ds.scenarios.push_back(std::move(*slot.scenario));
    }
    if (stats) *stats = tally;
    if (exhausted || tally.attempts > budget)
        throw Error(ErrorKind::TooManyDivergences, std::to_string(tally.divergences) + " divergences in " +
                                                       std::to_string(tally.attempts) + " attempts for " +
                                                       std::to_string(count) + " scenarios");
    return ds;
}

FeatureStats fit_stats(const Grid& grid, const std::vector<const Scenario*>& train) {
    FeatureStats st;
    if (train.empty()) return st;
    std::array<double, 3> sum{}, sq{};
    double rows = 0.0;
    for (const Scenario* s : train) {
        for (Eigen::Index i = 0; i < s->node_inputs.rows(); ++i) {
            for (int f = 0; f < 3; ++f) sum[f] += s->node_inputs(i, f);
        }
        rows += static_cast<double>(s->node_inputs.rows());
    }
    for (int f = 0; f < 3; ++f) st.node_mean[f] = sum[f] / rows;
    for (const Scenario* s : train) {
        for (Eigen::Index i = 0; i < s->node_inputs.rows(); ++i) {
            for (int f = 0; f < 3; ++f) {
                const double d = s->node_inputs(i, f) - st.node_mean[f];
                sq[f] += d * d;
            }
        }
    }
    for (int f = 0; f < 3; ++f) {
        const double sd = std::sqrt(sq[f] / rows);
        st.node_std[f] = sd > 0.0 ? sd : 1.0;
    }

    // Edge attributes only vary with topology, so fit them on the branch records of the base grid.
    std::array<double, 2> esum{}, esq{};
    const double m = static_cast<double>(grid.num_branches());
    for (const Branch& br : grid.branches()) {
        esum[0] += br.r;
        esum[1] += br.x;
    }
    for (int f = 0; f < 2; ++f) st.edge_mean[f] = esum[f] / m;
    for (const Branch& br : grid.branches()) {
        esq[0] += (br.r - st.edge_mean[0]) * (br.r - st.edge_mean[0]);
        esq[1] += (br.x - st.edge_mean[1]) * (br.x - st.edge_mean[1]);
    }
    for (int f = 0; f < 2; ++f) {
        const double sd = std::sqrt(esq[f] / m);
        st.edge_std[f] = sd > 0.0 ? sd : 1.0;
    }
    return st;
}

Dataset split_dataset(const Grid& grid, Dataset ds, std::array<double, 3> fractions, std::uint64_t seed) {
    const double total = fractions[0] + fractions[1] + fractions[2];
    for (double f : fractions) {
        if (f < 0.0) throw Error(ErrorKind::InvalidArgument, "split fractions must be non-negative");
    }
    if (std::abs(total - 1.0) > 1e-9) throw Error(ErrorKind::InvalidArgument, "split fractions must sum to 1");
    if (ds.regime == Regime::N1 && fractions[0] > 0.0)
        throw Error(ErrorKind::InvalidArgument, "N-1 scenarios may not enter the training split");

    const std::size_t n = ds.scenarios.size();
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(perm.begin(), perm.end(), rng);

    const auto n_train = static_cast<std::size_t>(std::llround(fractions[0] * static_cast<double>(n)));
    const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::llround(fractions[1] * static_cast<double>(n))));
    const std::size_t n_test = n - n_train - n_val;
    const std::array<std::size_t, 3> sizes{n_train, n_val, n_test};
    static constexpr std::array<const char*, 3> names{"train", "val", "test"};
    for (int k = 0; k < 3; ++k) {
        if (fractions[k] > 0.0 && sizes[k] == 0)
            throw Error(ErrorKind::EmptySplit, std::string(names[k]) + " split would be empty");
    }

    for (std::size_t r = 0; r < n; ++r) {
        Scenario& s = ds.scenarios[perm[r]];
        s.split = r < n_train ? Split::Train : (r < n_train + n_val ? Split::Val : Split::Test);
    }
    if (n_train > 0) ds.normalization = fit_stats(grid, ds.with_split(Split::Train));
    return ds;
}

nlohmann::json stats_to_json(const FeatureStats& st) {
    return {{"node_mean", st.node_mean}, {"node_std", st.node_std}, {"edge_mean", st.edge_mean}, {"edge_std", st.edge_std}};
}

FeatureStats stats_from_json(const nlohmann::json& doc) {
    FeatureStats st;
    st.node_mean = doc.at("node_mean").get<std::array<double, 3>>();
    st.node_std = doc.at("node_std").get<std::array<double, 3>>();
    st.edge_mean = doc.at("edge_mean").get<std::array<double, 2>>();
    st.edge_std = doc.at("edge_std").get<std::array<double, 2>>();
    return st;
}

namespace {

std::vector<double> to_vec(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

Eigen::VectorXd from_vec(const nlohmann::json& j) {
    const auto v = j.get<std::vector<double>>();
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

std::uint64_t parse_hash(const nlohmann::json& j) { return std::stoull(j.get<std::string>(), nullptr, 16); }

}  // namespace

std::string dataset_to_jsonl(const Dataset& ds) {
    nlohmann::json header;
    header["kind"] = "kclflow-dataset";
    header["version"] = 1;
    header["topology_hash"] = hash_hex(ds.topology_hash);
    header["regime"] = to_string(ds.regime);
    header["seed"] = ds.seed;
    header["count"] = ds.scenarios.size();
    header["sampling_config"] = {{"spread", ds.sampling.spread},
                                 {"reading", ds.sampling.reading == SpreadReading::Variance ? "variance" : "std"},
                                 {"vm_min", ds.sampling.vm_min},
                                 {"vm_max", ds.sampling.vm_max}};
    header["normalization"] = ds.normalization ? stats_to_json(*ds.normalization) : nlohmann::json(nullptr);

    std::ostringstream out;
    out << header.dump() << '\n';
    for (const Scenario& s : ds.scenarios) {
        nlohmann::json line;
        line["split"] = to_string(s.split);
        line["seed"] = s.seed;
        line["topology_hash"] = hash_hex(s.topology_hash);
        line["removed_branch"] = s.removed_branch ? nlohmann::json(*s.removed_branch) : nlohmann::json(nullptr);
        auto& nodes = line["node_inputs"] = nlohmann::json::array();
        for (Eigen::Index i = 0; i < s.node_inputs.rows(); ++i)
            nodes.push_back({s.node_inputs(i, 0), s.node_inputs(i, 1), s.node_inputs(i, 2)});
        line["target_flows"] = to_vec(s.target_flows);
        line["net_p"] = to_vec(s.net_p);
        line["net_q"] = to_vec(s.net_q);
        out << line.dump() << '\n';
    }
    return out.str();
}

Dataset dataset_from_jsonl(std::string_view text) {
    Dataset ds;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    bool have_header = false;
    try {
        while (pos < text.size()) {
            auto nl = text.find('\n', pos);
            if (nl == std::string_view::npos) nl = text.size();
            const std::string_view line = text.substr(pos, nl - pos);
            pos = nl + 1;
            ++line_no;
            if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
            const auto j = nlohmann::json::parse(line);
            if (!have_header) {
                if (j.value("kind", "") != "kclflow-dataset")
                    throw Error(ErrorKind::InvalidArgument, "dataset file lacks a header line");
                ds.topology_hash = parse_hash(j.at("topology_hash"));
                ds.regime = regime_from_string(j.at("regime").get<std::string>());
                ds.seed = j.at("seed").get<std::uint64_t>();
                const auto& sc = j.at("sampling_config");
                ds.sampling.spread = sc.at("spread").get<double>();
                ds.sampling.reading =
                    sc.at("reading").get<std::string>() == "variance" ? SpreadReading::Variance : SpreadReading::StdDev;
                ds.sampling.vm_min = sc.at("vm_min").get<double>();
                ds.sampling.vm_max = sc.at("vm_max").get<double>();
                if (!j.at("normalization").is_null()) ds.normalization = stats_from_json(j.at("normalization"));
                have_header = true;
                continue;
            }
            Scenario s;
            s.split = split_from_string(j.at("split").get<std::string>());
            s.seed = j.at("seed").get<std::uint64_t>();
            s.topology_hash = parse_hash(j.at("topology_hash"));
            if (!j.at("removed_branch").is_null()) s.removed_branch = j.at("removed_branch").get<BranchId>();
            const auto& nodes = j.at("node_inputs");
            s.node_inputs.resize(static_cast<Eigen::Index>(nodes.size()), 3);
            for (std::size_t i = 0; i < nodes.size(); ++i) {
                for (int f = 0; f < 3; ++f) s.node_inputs(static_cast<Eigen::Index>(i), f) = nodes[i].at(f).get<double>();
            }
            s.target_flows = from_vec(j.at("target_flows"));
            s.net_p = from_vec(j.at("net_p"));
            s.net_q = from_vec(j.at("net_q"));
            ds.scenarios.push_back(std::move(s));
        }
    } catch (const nlohmann::json::exception& ex) {
        throw Error(ErrorKind::InvalidArgument, "dataset line " + std::to_string(line_no) + ": " + ex.what());
    }
    if (!have_header) throw Error(ErrorKind::InvalidArgument, "empty dataset file");
    return ds;
}

}  // namespace kclflow
