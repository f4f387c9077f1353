#include "kclflow/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "kclflow/case_io.hpp"
#include "kclflow/error.hpp"

namespace kclflow {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::uint64_t fnv1a(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<std::string> split_list(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : text) {
        if (c == ',') {
            if (!trim(cur).empty()) out.push_back(trim(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!trim(cur).empty()) out.push_back(trim(cur));
    return out;
}

}  // namespace

KvConfig parse_kv_config(std::string_view text) {
    KvConfig kv;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const auto nl = text.find('\n', pos);
        std::string_view line = text.substr(pos, nl == std::string_view::npos ? text.size() - pos : nl - pos);
        pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        const std::string body = trim(line);
        if (body.empty()) continue;
        if (body.front() == '[' && body.back() == ']') continue;  // TOML-style section headers are ignored
        const auto eq = body.find('=');
        if (eq == std::string::npos)
            throw Error(ErrorKind::InvalidArgument, "config line " + std::to_string(line_no) + ": expected key = value");
        std::string key = trim(std::string_view(body).substr(0, eq));
        std::string value = trim(std::string_view(body).substr(eq + 1));
        if (key.empty()) throw Error(ErrorKind::InvalidArgument, "config line " + std::to_string(line_no) + ": empty key");
        if (value.size() >= 2 && (value.front() == '"' || value.front() == '\'') && value.back() == value.front())
            value = value.substr(1, value.size() - 2);
        kv[key] = value;
    }
    return kv;
}

KvConfig load_kv_config(const fs::path& path) { return parse_kv_config(read_text_file(path)); }

void overlay(KvConfig& base, const KvConfig& top) {
    for (const auto& [k, v] : top) base[k] = v;
}

double kv_double(const KvConfig& kv, const std::string& key, double fallback) {
    auto it = kv.find(key);
    if (it == kv.end()) return fallback;
    try {
        std::size_t used = 0;
        const double v = std::stod(it->second, &used);
        if (used != it->second.size()) throw std::invalid_argument(key);
        return v;
    } catch (const std::exception&) {
        throw Error(ErrorKind::InvalidArgument, "'" + key + "' expects a number, got '" + it->second + "'");
    }
}

std::uint64_t kv_uint(const KvConfig& kv, const std::string& key, std::uint64_t fallback) {
    auto it = kv.find(key);
    if (it == kv.end()) return fallback;
    try {
        std::size_t used = 0;
        if (!it->second.empty() && it->second.front() == '-') throw std::invalid_argument(key);
        const auto v = std::stoull(it->second, &used);
        if (used != it->second.size()) throw std::invalid_argument(key);
        return v;
    } catch (const std::exception&) {
        throw Error(ErrorKind::InvalidArgument, "'" + key + "' expects a non-negative integer, got '" + it->second + "'");
    }
}

bool kv_bool(const KvConfig& kv, const std::string& key, bool fallback) {
    auto it = kv.find(key);
    if (it == kv.end()) return fallback;
    const std::string& v = it->second;
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw Error(ErrorKind::InvalidArgument, "'" + key + "' expects true/false, got '" + v + "'");
}

std::string kv_string(const KvConfig& kv, const std::string& key, const std::string& fallback) {
    auto it = kv.find(key);
    return it == kv.end() ? fallback : it->second;
}

TrainConfig train_config_from_kv(const KvConfig& kv, TrainConfig cfg) {
    cfg.lr = kv_double(kv, "lr", cfg.lr);
    cfg.beta1 = kv_double(kv, "beta1", cfg.beta1);
    cfg.beta2 = kv_double(kv, "beta2", cfg.beta2);
    cfg.eps = kv_double(kv, "eps", cfg.eps);
    cfg.weight_decay = kv_double(kv, "weight_decay", cfg.weight_decay);
    cfg.batch_size = kv_uint(kv, "batch_size", cfg.batch_size);
    cfg.epochs = kv_uint(kv, "epochs", cfg.epochs);
    cfg.seed = kv_uint(kv, "seed", cfg.seed);
    cfg.with_projection = kv_bool(kv, "with_projection", cfg.with_projection);
    if (auto it = kv.find("grad_clip"); it != kv.end()) {
        if (it->second == "none" || it->second.empty())
            cfg.grad_clip.reset();
        else
            cfg.grad_clip = kv_double(kv, "grad_clip", 0.0);
    }
    cfg.model.hidden = static_cast<int>(kv_uint(kv, "hidden", static_cast<std::uint64_t>(cfg.model.hidden)));
    cfg.model.heads = static_cast<int>(kv_uint(kv, "heads", static_cast<std::uint64_t>(cfg.model.heads)));
    cfg.model.head_dim = static_cast<int>(kv_uint(kv, "head_dim", static_cast<std::uint64_t>(cfg.model.head_dim)));
    cfg.model.leaky_slope = kv_double(kv, "leaky_slope", cfg.model.leaky_slope);
    cfg.workers = static_cast<unsigned>(kv_uint(kv, "workers", cfg.workers));

    if (!(cfg.lr > 0.0)) throw Error(ErrorKind::InvalidArgument, "lr must be positive");
    if (cfg.batch_size < 1) throw Error(ErrorKind::InvalidArgument, "batch_size must be at least 1");
    if (cfg.model.hidden < 1 || cfg.model.heads < 1 || cfg.model.head_dim < 1)
        throw Error(ErrorKind::InvalidArgument, "model widths must be positive");
    if (cfg.grad_clip && !(*cfg.grad_clip > 0.0)) throw Error(ErrorKind::InvalidArgument, "grad_clip must be positive");
    return cfg;
}

SamplingConfig sampling_from_kv(const KvConfig& kv, SamplingConfig cfg) {
    cfg.spread = kv_double(kv, "spread", cfg.spread);
    const std::string reading = kv_string(kv, "spread_reading", cfg.reading == SpreadReading::Variance ? "variance" : "std");
    if (reading == "variance")
        cfg.reading = SpreadReading::Variance;
    else if (reading == "std")
        cfg.reading = SpreadReading::StdDev;
    else
        throw Error(ErrorKind::InvalidArgument, "spread_reading must be 'variance' or 'std'");
    cfg.vm_min = kv_double(kv, "vm_min", cfg.vm_min);
    cfg.vm_max = kv_double(kv, "vm_max", cfg.vm_max);
    if (!(cfg.spread >= 0.0) || !(cfg.vm_min < cfg.vm_max))
        throw Error(ErrorKind::InvalidArgument, "sampling config: need spread >= 0 and vm_min < vm_max");
    return cfg;
}

std::array<double, 3> parse_fractions(std::string_view text) {
    const auto parts = split_list(text);
    if (parts.size() != 3) throw Error(ErrorKind::InvalidArgument, "split expects three comma-separated fractions");
    std::array<double, 3> out{};
    for (std::size_t i = 0; i < 3; ++i) {
        KvConfig kv{{"split", parts[i]}};
        out[i] = kv_double(kv, "split", 0.0);
    }
    return out;
}

std::string content_hash(std::string_view bytes) { return "fnv1a64:" + hash_hex(fnv1a(bytes)); }

std::string file_hash(const fs::path& path) { return content_hash(read_text_file(path)); }

void RunManifest::add_input(const fs::path& path) { inputs.push_back({path.string(), file_hash(path)}); }

void RunManifest::add_artifact(const fs::path& path) { artifacts.push_back({path.string(), file_hash(path)}); }

json RunManifest::to_json() const {
    json j;
    j["command"] = command;
    j["tool_version"] = std::string(kToolVersion);
    j["status"] = status;
    if (!error.empty()) j["error"] = error;
    j["config"] = config;
    j["seeds"] = seeds;
    j["inputs"] = json::array();
    for (const auto& r : inputs) j["inputs"].push_back({{"path", r.path}, {"hash", r.hash}});
    j["artifacts"] = json::array();
    for (const auto& r : artifacts) j["artifacts"].push_back({{"path", r.path}, {"hash", r.hash}});
    j["durations_s"] = json::array();
    for (const auto& [stage, secs] : durations) j["durations_s"].push_back({{"stage", stage}, {"seconds", secs}});
    return j;
}

fs::path manifest_path_for(const fs::path& artifact) {
    fs::path p = artifact;
    p += ".manifest.json";
    return p;
}

void write_manifest(const RunManifest& manifest, const fs::path& path) {
    write_text_file(path, dump_json(manifest.to_json()));
}

void write_artifact(RunManifest& manifest, const fs::path& path, std::string_view contents) {
    write_text_file(path, contents);
    manifest.artifacts.push_back({path.string(), content_hash(contents)});
}

std::string dump_json(const json& doc) { return doc.dump(2) + "\n"; }

ReproScale repro_scale_from_string(std::string_view text) {
    if (text == "desk") return ReproScale::Desk;
    if (text == "full") return ReproScale::Full;
    throw Error(ErrorKind::InvalidArgument, "scale must be 'desk' or 'full'");
}

std::string_view to_string(ReproScale scale) { return scale == ReproScale::Desk ? "desk" : "full"; }

ReproOptions ReproOptions::for_scale(ReproScale scale) {
    ReproOptions o;
    o.scale = scale;
    o.fixtures_dir = KCLFLOW_DATA_DIR;
    if (scale == ReproScale::Full) {
        o.n_count = 20000;
        o.n1_count = 5000;
        o.runs = 10;
    }
    return o;
}

ReproOptions repro_options_from_kv(const KvConfig& kv, ReproOptions o) {
    o.runs = kv_uint(kv, "runs", o.runs);
    o.n_count = kv_uint(kv, "n_count", o.n_count);
    o.n1_count = kv_uint(kv, "n1_count", o.n1_count);
    o.seed = kv_uint(kv, "data_seed", o.seed);
    o.workers = static_cast<unsigned>(kv_uint(kv, "workers", o.workers));
    if (auto it = kv.find("grids"); it != kv.end()) o.grids = split_list(it->second);
    if (auto it = kv.find("split"); it != kv.end()) o.fractions = parse_fractions(it->second);
    if (auto it = kv.find("fixtures"); it != kv.end()) o.fixtures_dir = it->second;
    o.sampling = sampling_from_kv(kv, o.sampling);
    o.train = train_config_from_kv(kv, o.train);
    o.train.workers = o.workers;
    for (const auto& [key, value] : kv) {
        if (key.rfind("epochs_", 0) == 0) o.epochs_per_grid[key.substr(7)] = kv_uint(kv, key, 0);
    }
    if (o.runs < 1) throw Error(ErrorKind::InvalidArgument, "runs must be at least 1");
    if (o.grids.empty()) throw Error(ErrorKind::InvalidArgument, "no grids selected");
    return o;
}

std::string format_mean_std(double mean, std::optional<double> sd, int decimals) {
    auto fmt = [decimals](double v) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
        std::string s = buf;
        if (s.front() == '-' && s.find_first_not_of("-0.") == std::string::npos) s.erase(0, 1);  // no "-0.000"
        return s;
    };
    return sd ? fmt(mean) + " (" + fmt(*sd) + ")" : fmt(mean);
}

namespace {

json summary_row(const std::string& grid, const std::string& model, const EvalReport& report) {
    const std::optional<double> sd_mse = report.stddev ? std::optional<double>(report.stddev->mse) : std::nullopt;
    const std::optional<double> sd_kcl =
        report.stddev ? std::optional<double>(report.stddev->kcl_violation) : std::nullopt;
    json row;
    row["grid"] = grid;
    row["model"] = model;
    row["regime"] = report.regime == "n" ? "N" : "N-1";
    row["runs"] = report.runs;
    row["test_count"] = report.test_count;
    row["mse"] = {{"mean", report.mean.mse}, {"std", sd_mse ? json(*sd_mse) : json(nullptr)}};
    row["kcl_violation"] = {{"mean", report.mean.kcl_violation},
                            {"std", sd_kcl ? json(*sd_kcl) : json(nullptr)}};
    row["cells"] = {{"mse", format_mean_std(report.mean.mse, sd_mse)},
                    {"kcl_violation", format_mean_std(report.mean.kcl_violation, sd_kcl)}};
    return row;
}

std::uintmax_t estimated_bytes(const ReproOptions& o, const std::vector<Grid>& grids) {
    std::uintmax_t total = 0;
    for (const auto& g : grids) {
        const std::uintmax_t per = (5 * g.num_buses() + 4 * g.num_branches()) * 26 + 256;
        total += per * (o.n_count + o.n1_count);
    }
    return total + (std::uintmax_t{1} << 20);
}

}  // namespace

ReproResult run_repro(const fs::path& workdir, const ReproOptions& o, const ProgressFn& progress) {
    auto say = [&](const std::string& msg) {
        if (progress) progress(msg);
    };
    ReproResult result;
    RunManifest& manifest = result.manifest;
    manifest.command = "repro";
    manifest.config = {
        {"scale", std::string(to_string(o.scale))},
        {"grids", o.grids},
        {"n_count", o.n_count},
        {"n1_count", o.n1_count},
        {"runs", o.runs},
        {"split", o.fractions},
        {"sampling", {{"spread", o.sampling.spread},
                      {"reading", o.sampling.reading == SpreadReading::Variance ? "variance" : "std"},
                      {"vm_min", o.sampling.vm_min},
                      {"vm_max", o.sampling.vm_max}}},
        {"train", train_config_to_json(o.train)},
        {"epochs_per_grid", o.epochs_per_grid},
        {"workers", o.workers},
    };
    manifest.seeds = {{"data_seed", o.seed}, {"train_seeds", "0.." + std::to_string(o.runs - 1)}};

    const fs::path manifest_file = workdir / "manifest.json";
    try {
        fs::create_directories(workdir);
        std::vector<Grid> grids;
        std::vector<fs::path> fixture_paths;
        for (const auto& name : o.grids) {
            const fs::path fixture = o.fixtures_dir / (name + ".m");
            if (!fs::exists(fixture)) throw Error(ErrorKind::FixtureMissing, "fixture not found: " + fixture.string());
            manifest.add_input(fixture);
            fixture_paths.push_back(fixture);
            grids.push_back(load_grid(fixture));
        }
        const auto need = estimated_bytes(o, grids);
        const auto space = fs::space(workdir);
        if (space.available < need)
            throw Error(ErrorKind::InsufficientDisk, "repro needs about " + std::to_string(need >> 20) + " MiB in " +
                                                         workdir.string() + ", " +
                                                         std::to_string(space.available >> 20) + " MiB available");

        json summary;
        summary["scale"] = std::string(to_string(o.scale));
        summary["tool_version"] = std::string(kToolVersion);
        summary["config"] = manifest.config;
        summary["rows"] = json::array();

        for (std::size_t gi = 0; gi < grids.size(); ++gi) {
            const std::string& name = o.grids[gi];
            const Grid& grid = grids[gi];
            const fs::path dir = workdir / name;
            auto t0 = std::chrono::steady_clock::now();

            write_artifact(manifest, dir / "grid.json", dump_json(grid_to_json(grid)));

            GenerationOptions gen;
            gen.sampling = o.sampling;
            gen.workers = o.workers;
            say(name + ": generating " + std::to_string(o.n_count) + " N scenarios");
            Dataset n_data = make_dataset(grid, o.n_count, Regime::N, derive_seed(o.seed, gi, 1), gen);
            n_data = split_dataset(grid, std::move(n_data), o.fractions, derive_seed(o.seed, gi, 2));
            write_artifact(manifest, dir / "n.jsonl", dataset_to_jsonl(n_data));

            say(name + ": generating " + std::to_string(o.n1_count) + " N-1 scenarios");
            Dataset n1_data = make_dataset(grid, o.n1_count, Regime::N1, derive_seed(o.seed, gi, 3), gen);
            n1_data = split_dataset(grid, std::move(n1_data), {0.0, 0.0, 1.0}, derive_seed(o.seed, gi, 4));
            write_artifact(manifest, dir / "n1.jsonl", dataset_to_jsonl(n1_data));
            manifest.durations.emplace_back(name + ":generate", seconds_since(t0));

            for (const bool projected : {true, false}) {
                const std::string model = projected ? "KCLNet" : "ablation";
                TrainConfig cfg = o.train;
                cfg.with_projection = projected;
                cfg.workers = o.workers;
                if (auto it = o.epochs_per_grid.find(name); it != o.epochs_per_grid.end()) cfg.epochs = it->second;
                say(name + ": training " + model + " for " + std::to_string(o.runs) + " run(s), " +
                    std::to_string(cfg.epochs) + " epochs each");
                t0 = std::chrono::steady_clock::now();
                const auto reports =
                    evaluate_runs(cfg, n_data, std::vector<const Dataset*>{&n_data, &n1_data}, grid, o.runs);
                manifest.durations.emplace_back(name + ":" + model, seconds_since(t0));
                for (const auto& report : reports) {
                    write_artifact(manifest, dir / ("report_" + model + "_" + report.regime + ".json"),
                                   dump_json(report_to_json(report)));
                    summary["rows"].push_back(summary_row(name, model, report));
                }
            }
        }
        write_artifact(manifest, workdir / "summary.json", dump_json(summary));
        write_text_file(workdir / "summary.txt", format_summary_table(summary));
        manifest.add_artifact(workdir / "summary.txt");
        result.summary = std::move(summary);
        write_manifest(manifest, manifest_file);
    } catch (const std::exception& e) {
        manifest.status = "failed";
        manifest.error = e.what();
        try {
            write_manifest(manifest, manifest_file);
        } catch (...) {
        }
        throw;
    }
    return result;
}

std::string format_summary_table(const json& summary) {
    std::ostringstream out;
    char line[256];
    std::snprintf(line, sizeof line, "%-10s %-9s %-7s %-24s %-24s\n", "grid", "model", "regime", "MSE", "KCL violation");
    out << line;
    for (const auto& row : summary.at("rows")) {
        std::snprintf(line, sizeof line, "%-10s %-9s %-7s %-24s %-24s\n", row.at("grid").get<std::string>().c_str(),
                      row.at("model").get<std::string>().c_str(), row.at("regime").get<std::string>().c_str(),
                      row.at("cells").at("mse").get<std::string>().c_str(),
                      row.at("cells").at("kcl_violation").get<std::string>().c_str());
        out << line;
    }
    return out.str();
}

}  // namespace kclflow
