// kclflow command-line entry point
#include <chrono>
#include <filesystem>
#include <iostream>
#include <optional>
#include <random>
#include <string>

#include "CLI11.hpp"
#include "kclflow/acpf.hpp"
#include "kclflow/case_io.hpp"
#include "kclflow/error.hpp"
#include "kclflow/grid.hpp"
#include "kclflow/pipeline.hpp"
#include "kclflow/projection.hpp"
#include "kclflow/scenario.hpp"
#include "kclflow/training.hpp"

namespace fs = std::filesystem;
using namespace kclflow;
using nlohmann::json;

namespace {

// Registers --flag as a string option whose value lands in `flags[key]` only when given.
CLI::Option* kv_opt(CLI::App* app, KvConfig& flags, const std::string& flag, const std::string& key,
                    const std::string& help, const std::string& def) {
    return app
        ->add_option_function<std::string>(
            flag, [&flags, key](const std::string& v) { flags[key] = v; }, help)
        ->default_str(def)
        ->type_name("VALUE");
}

struct Common {
    std::string config_path;
    KvConfig flags;

    KvConfig resolved() const {
        KvConfig kv;
        if (!config_path.empty()) kv = load_kv_config(config_path);
        overlay(kv, flags);
        return kv;
    }
};

void add_train_opts(CLI::App* app, KvConfig& flags) {
    const TrainConfig d;
    kv_opt(app, flags, "--lr", "lr", "AdamW learning rate", "0.001");
    kv_opt(app, flags, "--beta1", "beta1", "AdamW first-moment decay", "0.9");
    kv_opt(app, flags, "--beta2", "beta2", "AdamW second-moment decay", "0.999");
    kv_opt(app, flags, "--eps", "eps", "AdamW epsilon", "1e-08");
    kv_opt(app, flags, "--weight-decay", "weight_decay", "decoupled weight decay", "0.0001");
    kv_opt(app, flags, "--batch-size", "batch_size", "scenarios per mini-batch", std::to_string(d.batch_size));
    kv_opt(app, flags, "--epochs", "epochs", "training epochs", std::to_string(d.epochs));
    kv_opt(app, flags, "--seed", "seed", "initialization and shuffling seed", "0");
    kv_opt(app, flags, "--grad-clip", "grad_clip", "global gradient-norm clip, or 'none'", "none");
    kv_opt(app, flags, "--hidden", "hidden", "hidden width H", std::to_string(d.model.hidden));
    kv_opt(app, flags, "--heads", "heads", "attention heads K", std::to_string(d.model.heads));
    kv_opt(app, flags, "--head-dim", "head_dim", "width of each attention head", std::to_string(d.model.head_dim));
    kv_opt(app, flags, "--leaky-slope", "leaky_slope", "LeakyReLU negative slope", "0.01");
    kv_opt(app, flags, "--with-projection", "with_projection", "terminal KCL projection layer (true/false)", "true");
    app->add_flag_callback("--no-projection", [&flags] { flags["with_projection"] = "false"; },
                           "shorthand for --with-projection false (ablation)");
}

void add_sampling_opts(CLI::App* app, KvConfig& flags) {
    kv_opt(app, flags, "--spread", "spread", "second parameter of Normal(nominal, spread)", "0.01");
    kv_opt(app, flags, "--spread-reading", "spread_reading", "read spread as 'variance' or 'std'", "variance");
    kv_opt(app, flags, "--vm-min", "vm_min", "lower clamp for sampled voltage magnitudes", "0.8");
    kv_opt(app, flags, "--vm-max", "vm_max", "upper clamp for sampled voltage magnitudes", "1.2");
}

void add_workers_opt(CLI::App* app, KvConfig& flags) {
    kv_opt(app, flags, "--workers", "workers", "worker threads", "1");
}

json vec_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Eigen::VectorXd json_vec(const json& j) {
    const auto values = j.get<std::vector<double>>();
    return Eigen::Map<const Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size()));
}

void finish(RunManifest& manifest, const fs::path& out, std::chrono::steady_clock::time_point t0) {
    manifest.durations.emplace_back("total", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    write_manifest(manifest, manifest_path_for(out));
}

json kv_json(const KvConfig& kv) {
    json j = json::object();
    for (const auto& [k, v] : kv) j[k] = v;
    return j;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"kclflow: power-flow surrogates with a hard KCL projection layer"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(kToolVersion));

    // import
    auto* imp = app.add_subcommand("import", "Convert a MATPOWER case file to grid JSON");
    std::string imp_case, imp_out;
    imp->add_option("--case", imp_case, "MATPOWER .m case file")->required();
    imp->add_option("--out", imp_out, "output grid JSON")->required();

    // generate
    auto* gen = app.add_subcommand("generate", "Sample scenarios, solve them and write a JSONL dataset");
    Common gen_c;
    std::string gen_grid, gen_out;
    gen->add_option("--grid", gen_grid, "grid JSON or .m case")->required();
    gen->add_option("--out", gen_out, "output dataset (.jsonl)")->required();
    gen->add_option("--config", gen_c.config_path, "key = value config file");
    kv_opt(gen, gen_c.flags, "--count", "count", "number of scenarios", "1000");
    kv_opt(gen, gen_c.flags, "--regime", "regime", "'n' (intact) or 'n1' (single-branch outage)", "n");
    kv_opt(gen, gen_c.flags, "--data-seed", "data_seed", "sampling seed", "0");
    kv_opt(gen, gen_c.flags, "--split", "split", "train,val,test fractions, or 'none'", "0.8,0.1,0.1 (n); 0,0,1 (n1)");
    kv_opt(gen, gen_c.flags, "--split-seed", "split_seed", "shuffle seed for the split", "data seed");
    kv_opt(gen, gen_c.flags, "--tol", "tol", "Newton-Raphson mismatch tolerance (p.u.)", "1e-08");
    kv_opt(gen, gen_c.flags, "--max-iter", "max_iter", "Newton-Raphson iteration cap", "20");
    add_sampling_opts(gen, gen_c.flags);
    add_workers_opt(gen, gen_c.flags);

    // solve
    auto* sol = app.add_subcommand("solve", "Run Newton-Raphson power flow on the nominal or a sampled case");
    Common sol_c;
    std::string sol_grid, sol_out;
    std::optional<std::uint64_t> sol_seed;
    std::optional<std::size_t> sol_removed;
    sol->add_option("--grid", sol_grid, "grid JSON or .m case")->required();
    sol->add_option("--out", sol_out, "output solution JSON")->required();
    sol->add_option("--config", sol_c.config_path, "key = value config file");
    sol->add_option("--sample-seed", sol_seed, "draw a perturbed scenario with this seed instead of the nominal case");
    sol->add_option("--remove-branch", sol_removed, "take this branch out of service first");
    kv_opt(sol, sol_c.flags, "--tol", "tol", "mismatch tolerance (p.u.)", "1e-08");
    kv_opt(sol, sol_c.flags, "--max-iter", "max_iter", "iteration cap", "20");
    add_sampling_opts(sol, sol_c.flags);

    // project
    auto* prj = app.add_subcommand("project", "Project a perturbed flow vector onto the KCL-feasible set");
    Common prj_c;
    std::string prj_grid, prj_data, prj_out, prj_flows, prj_inj;
    std::size_t prj_index = 0;
    prj->add_option("--grid", prj_grid, "grid JSON or .m case")->required();
    auto* prj_data_opt = prj->add_option("--data", prj_data, "dataset supplying injections and reference flows");
    prj->add_option("--injections", prj_inj, "JSON {net_p, net_q} to use instead of --data (needs --flows)")
        ->excludes(prj_data_opt);
    prj->add_option("--index", prj_index, "scenario index in the dataset")->capture_default_str();
    prj->add_option("--flows", prj_flows, "JSON array to project instead of the perturbed target");
    prj->add_option("--out", prj_out, "output JSON")->required();
    prj->add_option("--config", prj_c.config_path, "key = value config file");
    kv_opt(prj, prj_c.flags, "--method", "method", "'pinv' (global pseudoinverse) or 'kaczmarz'", "pinv");
    kv_opt(prj, prj_c.flags, "--noise", "noise", "std of Gaussian noise added to the target flows", "0.1");
    kv_opt(prj, prj_c.flags, "--noise-seed", "noise_seed", "noise seed", "0");
    kv_opt(prj, prj_c.flags, "--max-sweeps,--sweeps", "max_sweeps", "Kaczmarz sweep cap", "500");
    kv_opt(prj, prj_c.flags, "--kaczmarz-tol", "kaczmarz_tol", "Kaczmarz residual tolerance", "1e-06");
    kv_opt(prj, prj_c.flags, "--randomized", "randomized", "reshuffle Kaczmarz order every sweep (true/false)", "false");

    // train
    auto* trn = app.add_subcommand("train", "Train the surrogate on the train split of an N-regime dataset");
    Common trn_c;
    std::string trn_data, trn_grid, trn_out, trn_log;
    bool trn_verbose = false;
    trn->add_option("--data", trn_data, "training dataset (.jsonl)")->required();
    trn->add_option("--grid", trn_grid, "grid JSON or .m case")->required();
    trn->add_option("--out", trn_out, "output checkpoint JSON")->required();
    trn->add_option("--log", trn_log, "per-epoch log (.jsonl); default <out>.log.jsonl");
    trn->add_option("--config", trn_c.config_path, "key = value config file");
    trn->add_flag("-v,--verbose", trn_verbose, "print one line per epoch");
    add_train_opts(trn, trn_c.flags);
    add_workers_opt(trn, trn_c.flags);

    // eval
    auto* evl = app.add_subcommand("eval", "Score a checkpoint (or retrain over seeds) on a test set");
    Common evl_c;
    std::string evl_ckpt, evl_data, evl_grid, evl_report, evl_train_data;
    evl->add_option("--ckpt", evl_ckpt, "checkpoint JSON")->required();
    evl->add_option("--data", evl_data, "test dataset (.jsonl)")->required();
    evl->add_option("--grid", evl_grid, "grid JSON or .m case")->required();
    evl->add_option("--report", evl_report, "output report JSON")->required();
    evl->add_option("--train-data", evl_train_data, "training dataset, needed when --runs > 1");
    evl->add_option("--config", evl_c.config_path, "key = value config file");
    kv_opt(evl, evl_c.flags, "--runs", "runs", "independent train+eval repetitions (seeds 0..runs-1)", "1");
    add_workers_opt(evl, evl_c.flags);

    // repro
    auto* rep = app.add_subcommand("repro", "Run the full experiment and write a summary table");
    Common rep_c;
    std::string rep_workdir;
    rep->add_option("--workdir", rep_workdir, "output directory")->required();
    rep->add_option("--config", rep_c.config_path, "key = value config file");
    kv_opt(rep, rep_c.flags, "--scale", "scale", "'desk' (2000 N + 500 N-1, 3 runs) or 'full' (20000 N + 5000 N-1, 10 runs)",
           "desk");
    kv_opt(rep, rep_c.flags, "--fixtures", "fixtures", "directory holding <grid>.m fixtures", KCLFLOW_DATA_DIR);
    kv_opt(rep, rep_c.flags, "--grids", "grids", "comma-separated fixture names", "case14,case118");
    kv_opt(rep, rep_c.flags, "--runs", "runs", "runs per cell (overrides the scale default)", "3 (desk), 10 (full)");
    kv_opt(rep, rep_c.flags, "--n-count", "n_count", "N scenarios per grid", "2000 (desk), 20000 (full)");
    kv_opt(rep, rep_c.flags, "--n1-count", "n1_count", "N-1 scenarios per grid", "500 (desk), 5000 (full)");
    kv_opt(rep, rep_c.flags, "--split", "split", "train,val,test fractions of the N data", "0.8,0.1,0.1");
    kv_opt(rep, rep_c.flags, "--data-seed", "data_seed", "scenario sampling seed", "0");
    kv_opt(rep, rep_c.flags, "--epochs-case14", "epochs_case14", "epochs override for case14", "--epochs");
    kv_opt(rep, rep_c.flags, "--epochs-case118", "epochs_case118", "epochs override for case118", "--epochs");
    add_sampling_opts(rep, rep_c.flags);
    add_train_opts(rep, rep_c.flags);
    add_workers_opt(rep, rep_c.flags);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    const auto t0 = std::chrono::steady_clock::now();
    try {
        if (*imp) {
            RunManifest m;
            m.command = "import";
            m.add_input(imp_case);
            IgnoredFeatures ignored;
            const RawCase raw = parse_case_text(read_text_file(imp_case));
            const Grid grid = lower_case(raw, &ignored);
            write_artifact(m, imp_out, dump_json(grid_to_json(grid)));
            m.config = {{"case", imp_case},
                        {"ignored",
                         {{"bus_shunts", ignored.bus_shunts},
                          {"line_charging", ignored.line_charging},
                          {"tap_or_shift", ignored.tap_or_shift},
                          {"out_of_service_branches", ignored.out_of_service_branches},
                          {"out_of_service_gens", ignored.out_of_service_gens}}},
                        {"parse_warnings", raw.warnings}};
            finish(m, imp_out, t0);
            std::cout << "imported " << grid.num_buses() << " buses, " << grid.num_branches() << " branches; "
                      << ignored.total() << " unsupported fields ignored, " << raw.warnings << " parse warnings\n";
        } else if (*gen) {
            const KvConfig kv = gen_c.resolved();
            const Grid grid = load_grid(gen_grid);
            const Regime regime = regime_from_string(kv_string(kv, "regime", "n"));
            const std::uint64_t seed = kv_uint(kv, "data_seed", 0);
            GenerationOptions opts;
            opts.sampling = sampling_from_kv(kv);
            opts.solver.tol = kv_double(kv, "tol", opts.solver.tol);
            opts.solver.max_iter = static_cast<int>(kv_uint(kv, "max_iter", static_cast<std::uint64_t>(opts.solver.max_iter)));
            opts.workers = static_cast<unsigned>(kv_uint(kv, "workers", 1));
            const std::size_t count = kv_uint(kv, "count", 1000);
            GenerationStats stats;
            Dataset ds = make_dataset(grid, count, regime, seed, opts, &stats);
            const std::string split = kv_string(kv, "split", regime == Regime::N ? "0.8,0.1,0.1" : "0,0,1");
            if (split != "none") ds = split_dataset(grid, std::move(ds), parse_fractions(split), kv_uint(kv, "split_seed", seed));

            RunManifest m;
            m.command = "generate";
            m.add_input(gen_grid);
            m.config = kv_json(kv);
            m.seeds = {{"data_seed", seed}, {"split_seed", kv_uint(kv, "split_seed", seed)}};
            write_artifact(m, gen_out, dataset_to_jsonl(ds));
            m.config["attempts"] = stats.attempts;
            m.config["divergences"] = stats.divergences;
            finish(m, gen_out, t0);
            std::cout << "generated " << ds.scenarios.size() << " scenarios (" << stats.divergences
                      << " divergent draws redrawn)\n";
        } else if (*sol) {
            const KvConfig kv = sol_c.resolved();
            Grid grid = load_grid(sol_grid);
            if (sol_removed) grid = remove_branch(grid, *sol_removed);
            PowerFlowInputs in = nominal_inputs(grid);
            if (sol_seed) {
                const NodeSample s = sample_scenario(grid, *sol_seed, sampling_from_kv(kv));
                in = {s.p, s.q, s.vm, s.va};
            }
            SolverOptions opts;
            opts.tol = kv_double(kv, "tol", opts.tol);
            opts.max_iter = static_cast<int>(kv_uint(kv, "max_iter", static_cast<std::uint64_t>(opts.max_iter)));
            const PFSolution pf = nr_solve(grid, in, opts);
            json out = {{"iterations", pf.iterations},
                        {"max_mismatch", pf.max_mismatch},
                        {"topology_hash", hash_hex(grid.topology_hash())},
                        {"vm", vec_json(pf.vm)},
                        {"va", vec_json(pf.va)},
                        {"p_inj", vec_json(pf.p_inj)},
                        {"q_inj", vec_json(pf.q_inj)},
                        {"flows", vec_json(branch_flows(grid, pf))}};
            RunManifest m;
            m.command = "solve";
            m.add_input(sol_grid);
            m.config = kv_json(kv);
            if (sol_seed) m.seeds["sample_seed"] = *sol_seed;
            write_artifact(m, sol_out, dump_json(out));
            finish(m, sol_out, t0);
            std::cout << "converged in " << pf.iterations << " iterations, max mismatch " << pf.max_mismatch << "\n";
        } else if (*prj) {
            const KvConfig kv = prj_c.resolved();
            const Grid base = load_grid(prj_grid);
            if (prj_data.empty() && prj_inj.empty())
                throw Error(ErrorKind::InvalidArgument, "project needs --data or --injections");
            if (!prj_inj.empty() && prj_flows.empty())
                throw Error(ErrorKind::InvalidArgument, "--injections needs --flows");
            Scenario sc;
            if (!prj_data.empty()) {
                const Dataset ds = dataset_from_jsonl(read_text_file(prj_data));
                if (prj_index >= ds.scenarios.size())
                    throw Error(ErrorKind::InvalidArgument,
                                "--index out of range (" + std::to_string(ds.scenarios.size()) + " scenarios)");
                sc = ds.scenarios[prj_index];
            } else {
                const json inj = json::parse(read_text_file(prj_inj));
                sc.net_p = json_vec(inj.at("net_p"));
                sc.net_q = json_vec(inj.at("net_q"));
                if (inj.contains("removed_branch") && !inj["removed_branch"].is_null())
                    sc.removed_branch = inj["removed_branch"].get<BranchId>();
            }
            const Grid grid = scenario_grid(base, sc);
            const ConstraintSystem sys = build_system(grid, sc.net_p, sc.net_q);
            FlowSet y;
            if (!prj_flows.empty()) {
                y = json_vec(json::parse(read_text_file(prj_flows)));
            } else {
                std::mt19937_64 rng(kv_uint(kv, "noise_seed", 0));
                std::normal_distribution<double> noise(0.0, kv_double(kv, "noise", 0.1));
                y = sc.target_flows;
                for (Eigen::Index i = 0; i < y.size(); ++i) y(i) += noise(rng);
            }
            if (y.size() != static_cast<Eigen::Index>(sys.op->flow_dim()))
                throw Error(ErrorKind::DimMismatch, "flow vector has " + std::to_string(y.size()) + " entries, expected " +
                                                        std::to_string(sys.op->flow_dim()));
            const std::string method = kv_string(kv, "method", "pinv");
            json out;
            out["method"] = method;
            out["residual_before"] = kcl_residual(sys, y).lpNorm<Eigen::Infinity>();
            FlowSet projected;
            if (method == "pinv") {
                projected = project_global(sys, y);
            } else if (method == "kaczmarz") {
                KaczmarzOptions ko;
                ko.max_sweeps = kv_uint(kv, "max_sweeps", ko.max_sweeps);
                ko.tol = kv_double(kv, "kaczmarz_tol", ko.tol);
                ko.randomized = kv_bool(kv, "randomized", false);
                ko.seed = kv_uint(kv, "noise_seed", 0);
                const KaczmarzResult kr = project_kaczmarz(sys, y, ko);
                projected = kr.y;
                out["sweeps"] = kr.sweeps_used;
            } else {
                throw Error(ErrorKind::InvalidArgument, "--method must be 'pinv' or 'kaczmarz'");
            }
            out["residual_after"] = kcl_residual(sys, projected).lpNorm<Eigen::Infinity>();
            out["distance"] = (projected - y).norm();
            out["flows"] = vec_json(projected);
            RunManifest m;
            m.command = "project";
            m.add_input(prj_grid);
            for (const auto& in : {prj_data, prj_inj, prj_flows})
                if (!in.empty()) m.add_input(in);
            m.config = kv_json(kv);
            if (!prj_data.empty()) m.config["index"] = prj_index;
            write_artifact(m, prj_out, dump_json(out));
            finish(m, prj_out, t0);
            std::cout << method << ": residual " << out["residual_before"].get<double>() << " -> "
                      << out["residual_after"].get<double>() << "\n";
        } else if (*trn) {
            const KvConfig kv = trn_c.resolved();
            const TrainConfig cfg = train_config_from_kv(kv);
            const Grid grid = load_grid(trn_grid);
            const Dataset ds = dataset_from_jsonl(read_text_file(trn_data));
            std::string log_text;
            const TrainResult result = train(ds, grid, cfg, [&](const EpochLog& log) {
                log_text += epoch_log_to_json(log).dump() + "\n";
                if (trn_verbose)
                    std::cerr << "epoch " << log.epoch << " train_mse " << log.train_mse << " train_kcl " << log.train_kcl
                              << (log.val_mse ? " val_mse " + std::to_string(*log.val_mse) : std::string()) << "\n";
            });
            RunManifest m;
            m.command = "train";
            m.add_input(trn_grid);
            m.add_input(trn_data);
            m.config = train_config_to_json(cfg);
            m.seeds = {{"seed", cfg.seed}};
            write_artifact(m, trn_out, dump_json(checkpoint_to_json(result.checkpoint)));
            write_artifact(m, trn_log.empty() ? trn_out + ".log.jsonl" : trn_log, log_text);
            finish(m, trn_out, t0);
            const EpochLog last = result.log.empty() ? EpochLog{} : result.log.back();
            std::cout << "trained " << cfg.epochs << " epochs; final train MSE " << last.train_mse << ", L_KCL "
                      << last.train_kcl << "\n";
        } else if (*evl) {
            const KvConfig kv = evl_c.resolved();
            const std::size_t runs = kv_uint(kv, "runs", 1);
            Checkpoint ckpt = checkpoint_from_json(json::parse(read_text_file(evl_ckpt)));
            ckpt.config.workers = static_cast<unsigned>(kv_uint(kv, "workers", 1));
            const Grid grid = load_grid(evl_grid);
            const Dataset test = dataset_from_jsonl(read_text_file(evl_data));
            EvalReport report;
            RunManifest m;
            m.command = "eval";
            m.add_input(evl_ckpt);
            m.add_input(evl_data);
            m.add_input(evl_grid);
            if (runs <= 1) {
                report = evaluate(ckpt, test, grid);
            } else {
                if (evl_train_data.empty())
                    throw Error(ErrorKind::InvalidArgument, "--runs > 1 retrains from seeds 0..runs-1 and needs --train-data");
                m.add_input(evl_train_data);
                const Dataset train_ds = dataset_from_jsonl(read_text_file(evl_train_data));
                report = evaluate_runs(ckpt.config, train_ds, test, grid, runs);
            }
            m.config = kv_json(kv);
            m.config["train_config"] = train_config_to_json(ckpt.config);
            write_artifact(m, evl_report, dump_json(report_to_json(report)));
            finish(m, evl_report, t0);
            const auto sd = report.stddev;
            std::cout << report.regime << " regime, " << report.test_count << " test scenarios: MSE "
                      << format_mean_std(report.mean.mse, sd ? std::optional<double>(sd->mse) : std::nullopt)
                      << ", KCL violation "
                      << format_mean_std(report.mean.kcl_violation,
                                         sd ? std::optional<double>(sd->kcl_violation) : std::nullopt)
                      << "\n";
        } else if (*rep) {
            const KvConfig kv = rep_c.resolved();
            const ReproScale scale = repro_scale_from_string(kv_string(kv, "scale", "desk"));
            const ReproOptions opts = repro_options_from_kv(kv, ReproOptions::for_scale(scale));
            const ReproResult result =
                run_repro(rep_workdir, opts, [](const std::string& msg) { std::cerr << msg << "\n"; });
            std::cout << format_summary_table(result.summary);
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code(e.kind());
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const json::exception& e) {
        std::cerr << "error: malformed JSON: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
