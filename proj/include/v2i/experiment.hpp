#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "v2i/config.hpp"
#include "v2i/data_synth.hpp"

namespace v2i::experiment {

struct Splits {
    data::Dataset train;
    data::Dataset test;
};

// Train and test splits drawn from independent seed streams of cfg.
Splits make_splits(const ExperimentConfig& cfg);
// Writes <dir>/train and <dir>/test.
void write_splits(const Splits& splits, const std::filesystem::path& dir);
Splits load_splits(const std::filesystem::path& dir);

// <base>-<UTC timestamp>, made unique if a sibling already exists.
std::filesystem::path unique_dir(const std::filesystem::path& base);

// One training run described as data, so it can execute in-process or in a
// worker process. kind is "teacher" or "student".
struct Job {
    std::string kind;
    nlohmann::json config;  // full ExperimentConfig document
    std::filesystem::path out_dir;
    std::filesystem::path teacher_ckpt;  // students only; empty when unused
    std::filesystem::path data_dir;      // empty: generate from config
};

nlohmann::json to_json(const Job& job);
Job job_from_json(const nlohmann::json& j);

// Runs a job to completion and writes <out_dir>/result.json. Returns the
// result document ({"status": "ok", ...metrics} or {"status": "failed",
// "error": ...}); failures never throw.
nlohmann::json run_job(const Job& job, bool verbose = false);

// Executes jobs with up to `workers` concurrent worker processes (the
// current executable re-invoked with the hidden run-job subcommand), or
// in-process when workers <= 1 or no executable is known. Jobs whose
// result.json already reports success are skipped.
std::vector<nlohmann::json> run_jobs(const std::vector<Job>& jobs, int workers,
                                     const std::filesystem::path& executable, bool verbose = false);

struct Cell {
    std::string name;
    std::vector<std::string> overrides;
    nlohmann::json axes = nlohmann::json::object();  // axis -> value, for the table
    bool baseline = false;
};

struct Grid {
    std::string name;
    std::vector<Cell> cells;  // baseline first
    std::vector<std::uint64_t> seeds;  // empty: the config's root seed
};

// Built-in grids: components, fd_variants, cq_count, frames, lambda.
Grid preset_grid(const std::string& name);
// Preset name or a JSON file {"axes": {key: [values...]}, "baseline": [overrides], "seeds": [...]}.
Grid load_grid(const std::string& spec);
// Cartesian product over axes plus a baseline row.
Grid product_grid(const nlohmann::json& axes, const std::vector<std::string>& baseline_overrides);

struct AblationRow {
    Cell cell;
    std::string status;
    std::string error;
    double precision = 0, recall = 0, f1 = 0, ap50 = 0;
    double d_precision = 0, d_recall = 0, d_f1 = 0;
    std::vector<double> seed_f1;
    std::vector<double> teacher_f1;  // per seed, empty without a teacher
};

struct AblationResult {
    std::vector<AblationRow> rows;
    std::filesystem::path table;
};

// Trains every distinct teacher the grid needs, then one student per cell
// and seed, and writes <out_dir>/table.csv. Metrics are test-split values
// averaged over seeds; deltas are relative to the baseline row.
AblationResult run_ablation(const ExperimentConfig& base, const std::vector<std::string>& base_overrides,
                            const Grid& grid, const std::filesystem::path& out_dir, int workers,
                            const std::filesystem::path& executable, bool verbose = false);

void write_table(const std::vector<AblationRow>& rows, const std::filesystem::path& path);

}  // namespace v2i::experiment
