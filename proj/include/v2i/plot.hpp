#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace v2i::plot {

struct Series {
    std::string name;
    std::vector<double> x;
    std::vector<double> y;
};

// Static SVG documents.
std::string line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                       const std::vector<Series>& series);
std::string heatmap(const std::string& title, const std::string& row_label, const std::string& col_label,
                    const std::vector<std::string>& rows, const std::vector<std::string>& cols,
                    const std::vector<std::vector<double>>& values);

// Minimal CSV reader (double-quoted fields allowed). First row is the header.
std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path);

// For each run directory: train_log.jsonl becomes a loss-curve chart and an
// ablation table.csv becomes a lambda heatmap and/or a frames-vs-F1 chart.
// A directory with neither is reported; all absent files are listed in one
// IoError. Returns the written files.
std::vector<std::filesystem::path> plot_runs(const std::vector<std::filesystem::path>& run_dirs,
                                             const std::filesystem::path& out_dir);

}  // namespace v2i::plot
