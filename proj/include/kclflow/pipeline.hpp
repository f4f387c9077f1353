#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "kclflow/scenario.hpp"
#include "kclflow/training.hpp"

namespace kclflow {

inline constexpr std::string_view kToolVersion = "0.3.1";

// key = value lines, '#' comments; values may be quoted
using KvConfig = std::map<std::string, std::string>;

KvConfig parse_kv_config(std::string_view text);
KvConfig load_kv_config(const std::filesystem::path& path);
void overlay(KvConfig& base, const KvConfig& top);

double kv_double(const KvConfig& kv, const std::string& key, double fallback);
std::uint64_t kv_uint(const KvConfig& kv, const std::string& key, std::uint64_t fallback);
bool kv_bool(const KvConfig& kv, const std::string& key, bool fallback);
std::string kv_string(const KvConfig& kv, const std::string& key, const std::string& fallback);

TrainConfig train_config_from_kv(const KvConfig& kv, TrainConfig base = {});
SamplingConfig sampling_from_kv(const KvConfig& kv, SamplingConfig base = {});
std::array<double, 3> parse_fractions(std::string_view text);

std::string content_hash(std::string_view bytes);
std::string file_hash(const std::filesystem::path& path);

struct ArtifactRecord {
    std::string path;
    std::string hash;
};

struct RunManifest {
    std::string command;
    nlohmann::json config = nlohmann::json::object();
    nlohmann::json seeds = nlohmann::json::object();
    std::vector<ArtifactRecord> inputs;
    std::vector<ArtifactRecord> artifacts;
    std::vector<std::pair<std::string, double>> durations;  // seconds, in stage order
    std::string status = "ok";
    std::string error;

    void add_input(const std::filesystem::path& path);
    void add_artifact(const std::filesystem::path& path);
    nlohmann::json to_json() const;
};

std::filesystem::path manifest_path_for(const std::filesystem::path& artifact);
void write_manifest(const RunManifest& manifest, const std::filesystem::path& path);

/// Writes `contents` then records it in the manifest.
void write_artifact(RunManifest& manifest, const std::filesystem::path& path, std::string_view contents);

std::string dump_json(const nlohmann::json& doc);

enum class ReproScale { Desk, Full };
ReproScale repro_scale_from_string(std::string_view text);
std::string_view to_string(ReproScale scale);

struct ReproOptions {
    ReproScale scale = ReproScale::Desk;
    std::filesystem::path fixtures_dir;
    std::vector<std::string> grids{"case14", "case118"};
    std::size_t n_count = 2000;
    std::size_t n1_count = 500;
    std::size_t runs = 3;
    std::array<double, 3> fractions{0.8, 0.1, 0.1};
    std::uint64_t seed = 0;
    SamplingConfig sampling;
    TrainConfig train;
    std::map<std::string, std::size_t> epochs_per_grid;
    unsigned workers = 1;

    static ReproOptions for_scale(ReproScale scale);
};

/// Overlays repro keys (runs, n_count, n1_count, grids, seed, epochs_<grid>, ...) plus train keys.
ReproOptions repro_options_from_kv(const KvConfig& kv, ReproOptions base);

struct ReproResult {
    nlohmann::json summary;
    RunManifest manifest;
};

using ProgressFn = std::function<void(const std::string&)>;

/// Imports each fixture, generates N and N-1 datasets, trains the projected model and the ablation
/// for `runs` seeds, and writes per-cell reports plus summary.json and manifest.json into `workdir`.
ReproResult run_repro(const std::filesystem::path& workdir, const ReproOptions& options,
                      const ProgressFn& progress = nullptr);

std::string format_mean_std(double mean, std::optional<double> sd, int decimals = 3);
std::string format_summary_table(const nlohmann::json& summary);

}  // namespace kclflow
