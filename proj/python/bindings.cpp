#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "kclflow/acpf.hpp"
#include "kclflow/case_io.hpp"
#include "kclflow/error.hpp"
#include "kclflow/grid.hpp"
#include "kclflow/pipeline.hpp"
#include "kclflow/projection.hpp"
#include "kclflow/scenario.hpp"
#include "kclflow/training.hpp"

namespace py = pybind11;
using namespace kclflow;

namespace {

py::dict solution_dict(const Grid& grid, const PFSolution& pf) {
    py::dict d;
    d["vm"] = pf.vm;
    d["va"] = pf.va;
    d["p_inj"] = pf.p_inj;
    d["q_inj"] = pf.q_inj;
    d["iterations"] = pf.iterations;
    d["max_mismatch"] = pf.max_mismatch;
    d["flows"] = Eigen::VectorXd(branch_flows(grid, pf));
    return d;
}

KvConfig to_kv(const py::dict& cfg) {
    KvConfig kv;
    for (auto item : cfg) kv[py::str(item.first)] = py::str(item.second);
    return kv;
}

}  // namespace

PYBIND11_MODULE(_kclflow, m) {
    m.doc() = "Power-flow surrogate with a hard KCL projection layer";
    m.attr("__version__") = std::string(kToolVersion);

    static py::exception<Error> error_type(m, "KclflowError");
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const Error& e) {
            py::object exc = py::handle(error_type.ptr())(e.what());
            exc.attr("kind") = std::string(to_string(e.kind()));
            PyErr_SetObject(error_type.ptr(), exc.ptr());
        }
    });

    py::class_<Grid>(m, "Grid")
        .def_property_readonly("num_buses", &Grid::num_buses)
        .def_property_readonly("num_branches", &Grid::num_branches)
        .def_property_readonly("slack", &Grid::slack)
        .def_property_readonly("base_mva", &Grid::base_mva)
        .def_property_readonly("topology_hash", [](const Grid& g) { return hash_hex(g.topology_hash()); })
        .def("to_json", [](const Grid& g) { return grid_to_json(g).dump(); })
        .def("eligible_contingencies", [](const Grid& g) { return eligible_contingencies(g); })
        .def("remove_branch", [](const Grid& g, BranchId b) { return remove_branch(g, b); }, py::arg("branch"))
        .def("__repr__", [](const Grid& g) {
            return "<Grid buses=" + std::to_string(g.num_buses()) + " branches=" + std::to_string(g.num_branches()) + ">";
        });

    m.def("load_grid", [](const std::string& path) { return load_grid(path); }, py::arg("path"),
          "Read a MATPOWER .m case or grid JSON");
    m.def("parse_case", [](const std::string& text) { return lower_case(parse_case_text(text)); }, py::arg("text"));

    m.def(
        "solve",
        [](const Grid& grid, double tol, int max_iter) {
            SolverOptions opts;
            opts.tol = tol;
            opts.max_iter = max_iter;
            return solution_dict(grid, nr_solve(grid, nominal_inputs(grid), opts));
        },
        py::arg("grid"), py::arg("tol") = 1e-8, py::arg("max_iter") = 20, "Newton-Raphson from flat start on nominal inputs");

    m.def("branch_flows", [](const Grid& g, const Eigen::VectorXd& vm, const Eigen::VectorXd& va) {
        return Eigen::VectorXd(branch_flows(g, vm, va));
    });

    m.def(
        "project",
        [](const Grid& grid, const Eigen::VectorXd& net_p, const Eigen::VectorXd& net_q, const Eigen::VectorXd& y) {
            return Eigen::VectorXd(project_global(build_system(grid, net_p, net_q), y));
        },
        py::arg("grid"), py::arg("net_p"), py::arg("net_q"), py::arg("flows"),
        "Least-change projection of a flow vector onto A y + b = 0");

    m.def(
        "project_kaczmarz",
        [](const Grid& grid, const Eigen::VectorXd& net_p, const Eigen::VectorXd& net_q, const Eigen::VectorXd& y,
           std::size_t max_sweeps, double tol, bool randomized, std::uint64_t seed) {
            KaczmarzOptions o;
            o.max_sweeps = max_sweeps;
            o.tol = tol;
            o.randomized = randomized;
            o.seed = seed;
            const KaczmarzResult r = project_kaczmarz(build_system(grid, net_p, net_q), y, o);
            return py::make_tuple(Eigen::VectorXd(r.y), r.sweeps_used, r.residual);
        },
        py::arg("grid"), py::arg("net_p"), py::arg("net_q"), py::arg("flows"), py::arg("max_sweeps") = 500,
        py::arg("tol") = 1e-6, py::arg("randomized") = false, py::arg("seed") = 0);

    m.def(
        "kcl_residual",
        [](const Grid& grid, const Eigen::VectorXd& net_p, const Eigen::VectorXd& net_q, const Eigen::VectorXd& y) {
            return Eigen::VectorXd(kcl_residual(build_system(grid, net_p, net_q), y));
        },
        py::arg("grid"), py::arg("net_p"), py::arg("net_q"), py::arg("flows"));

    m.def(
        "kcl_metric",
        [](const Grid& grid, const Eigen::VectorXd& net_p, const Eigen::VectorXd& net_q, const Eigen::VectorXd& y) {
            const KclMetric k = kcl_metric(grid, net_p, net_q, y);
            return py::make_tuple(k.l_p, k.l_q, k.l_kcl);
        },
        py::arg("grid"), py::arg("net_p"), py::arg("net_q"), py::arg("flows"), "Returns (L_P, L_Q, L_KCL)");

    m.def(
        "generate",
        [](const Grid& grid, std::size_t count, const std::string& regime, std::uint64_t seed, py::object split,
           unsigned workers) {
            GenerationOptions opts;
            opts.workers = workers;
            const Regime r = regime_from_string(regime);
            Dataset ds;
            {
                py::gil_scoped_release release;
                ds = make_dataset(grid, count, r, seed, opts);
            }
            if (!split.is_none()) ds = split_dataset(grid, std::move(ds), split.cast<std::array<double, 3>>(), seed);
            return dataset_to_jsonl(ds);
        },
        py::arg("grid"), py::arg("count"), py::arg("regime") = "n", py::arg("seed") = 0,
        py::arg("split") = py::none(), py::arg("workers") = 1, "Generate a dataset and return it as JSON lines");

    m.def(
        "train",
        [](const std::string& dataset_jsonl, const Grid& grid, const py::dict& config) {
            const TrainConfig cfg = train_config_from_kv(to_kv(config));
            const Dataset ds = dataset_from_jsonl(dataset_jsonl);
            TrainResult r;
            {
                py::gil_scoped_release release;
                r = train(ds, grid, cfg);
            }
            py::list log;
            for (const auto& e : r.log) log.append(py::make_tuple(e.epoch, e.train_mse, e.train_kcl));
            return py::make_tuple(checkpoint_to_json(r.checkpoint).dump(), log);
        },
        py::arg("dataset"), py::arg("grid"), py::arg("config") = py::dict(),
        "Train on a JSONL dataset; returns (checkpoint_json, [(epoch, train_mse, train_kcl), ...])");

    m.def(
        "evaluate",
        [](const std::string& checkpoint_json, const std::string& dataset_jsonl, const Grid& grid) {
            const Checkpoint ckpt = checkpoint_from_json(nlohmann::json::parse(checkpoint_json));
            const Dataset ds = dataset_from_jsonl(dataset_jsonl);
            return report_to_json(evaluate(ckpt, ds, grid)).dump();
        },
        py::arg("checkpoint"), py::arg("dataset"), py::arg("grid"), "Score a checkpoint; returns the report as JSON");
}
