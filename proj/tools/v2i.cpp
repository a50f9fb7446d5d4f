#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "v2i/checkpoint.hpp"
#include "v2i/config.hpp"
#include "v2i/errors.hpp"
#include "v2i/experiment.hpp"
#include "v2i/plot.hpp"
#include "v2i/png_io.hpp"
#include "v2i/tfd.hpp"
#include "v2i/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace v2i;

namespace {

struct Common {
    std::string config;
    std::vector<std::string> sets;
    std::optional<std::uint64_t> seed;
    std::string out;
    int workers = 1;
    bool resume = false;
    bool verbose = false;
};

void add_common(CLI::App& cmd, Common& c, const std::string& default_out) {
    c.out = default_out;
    cmd.add_option("--config", c.config, "JSON config file")->check(CLI::ExistingFile);
    cmd.add_option("--set", c.sets, "override key=value (repeatable, wins over --config)");
    cmd.add_option("--seed", c.seed, "root seed");
    cmd.add_option("--out", c.out, "output directory (a timestamp suffix is added unless --resume)");
    cmd.add_option("--workers", c.workers, "parallel worker processes")->check(CLI::PositiveNumber);
    cmd.add_flag("--resume", c.resume, "reuse --out as is and skip finished work");
    cmd.add_flag("-v,--verbose", c.verbose, "progress on stderr");
}

ExperimentConfig load(const Common& c) {
    std::vector<std::string> overrides = c.sets;
    if (c.seed) overrides.push_back("seed=" + std::to_string(*c.seed));
    return load_config(c.config, overrides);
}

// Base config overrides as a list, so ablation cells can layer on top.
std::vector<std::string> overrides_of(const Common& c) {
    std::vector<std::string> overrides = c.sets;
    if (c.seed) overrides.push_back("seed=" + std::to_string(*c.seed));
    return overrides;
}

fs::path output_dir(const Common& c) {
    const fs::path dir = c.resume ? fs::path(c.out) : experiment::unique_dir(c.out);
    fs::create_directories(dir);
    return dir;
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream f(path);
    if (!f) throw IoError(path.string(), "cannot write");
    f << j.dump(2) << '\n';
}

experiment::Splits splits_for(const ExperimentConfig& cfg, const std::string& data_dir) {
    return data_dir.empty() ? experiment::make_splits(cfg) : experiment::load_splits(data_dir);
}

bool finished_run(const fs::path& dir, const std::string& ckpt) {
    return fs::exists(dir / ckpt) && fs::exists(dir / "metrics.json");
}

void report_run(const fs::path& dir, const train::RunResult& r) {
    std::cout << "checkpoint: " << r.checkpoint.string() << '\n';
    if (r.metrics.contains("val"))
        std::cout << "val f1: " << r.metrics["val"].value("f1", 0.0) << '\n';
    std::cout << "output: " << dir.string() << '\n';
}

int cmd_gen_data(const Common& c) {
    const ExperimentConfig cfg = load(c);
    const fs::path dir = output_dir(c);
    if (c.resume && fs::exists(dir / "train" / "annotations.json") && fs::exists(dir / "test" / "annotations.json")) {
        std::cout << "output: " << dir.string() << " (exists)\n";
        return 0;
    }
    const auto splits = experiment::make_splits(cfg);
    experiment::write_splits(splits, dir);
    write_json(dir / "config.json", json(cfg));
    std::cout << "train clips: " << splits.train.clips().size() << ", test clips: " << splits.test.clips().size()
              << '\n'
              << "output: " << dir.string() << '\n';
    return 0;
}

int cmd_train_teacher(const Common& c, const std::string& data_dir) {
    const ExperimentConfig cfg = load(c);
    const fs::path dir = output_dir(c);
    if (c.resume && finished_run(dir, "teacher.ckpt")) {
        std::cout << "output: " << dir.string() << " (finished)\n";
        return 0;
    }
    write_json(dir / "config.json", json(cfg));
    const auto splits = splits_for(cfg, data_dir);
    train::RunOptions opt;
    opt.out_dir = dir;
    opt.validation = &splits.test;
    opt.verbose = c.verbose;
    report_run(dir, train::train_teacher(splits.train, cfg, opt));
    return 0;
}

// Writes the distillation masks of the first `count` training frames as
// grayscale PNGs: the frame on the left, the mask (peak = white) on the right.
void dump_masks(const data::Dataset& train, const ExperimentConfig& cfg, const fs::path& dir, int count) {
    fs::create_directories(dir);
    const int stride = detr::kStrides[3];
    int written = 0;
    for (const auto& clip : train.clips()) {
        const int h = clip.height / stride, w = clip.width / stride;
        for (int f = 0; f < clip.length() && written < count; ++f, ++written) {
            std::vector<Box> boxes;
            for (const auto& a : clip.annotations[f]) boxes.push_back(Box::from_pixels(a.box, clip.width, clip.height));
            const tfd::SoftMask m = cfg.distill.fd_variant == FdVariant::gt_hard_mask
                                        ? tfd::build_hard_mask(boxes, h, w)
                                        : tfd::build_gaussian_mask(boxes, h, w, cfg.distill.sigma_mode);
            const double peak = std::max(1e-12, *std::max_element(m.mask.begin(), m.mask.end()));
            Image8 img{2 * clip.width, clip.height, 1, {}};
            img.data.resize(static_cast<std::size_t>(img.width) * img.height);
            const auto frame = clip.frame(f);
            for (int y = 0; y < clip.height; ++y)
                for (int x = 0; x < clip.width; ++x) {
                    const double px = std::clamp(static_cast<double>(frame[y * clip.width + x]), 0.0, 1.0);
                    const double mv = m.at(std::min(h - 1, y / stride), std::min(w - 1, x / stride)) / peak;
                    img.data[y * img.width + x] = static_cast<std::uint8_t>(std::lround(255 * px));
                    img.data[y * img.width + clip.width + x] = static_cast<std::uint8_t>(std::lround(255 * mv));
                }
            write_png(dir / (clip.clip_id + "_" + std::to_string(f) + ".png"), img);
        }
        if (written >= count) break;
    }
}

int cmd_distill(const Common& c, const std::string& teacher, const std::string& data_dir, int mask_dumps) {
    const ExperimentConfig cfg = load(c);
    if (teacher.empty() && (cfg.distill.tfd || cfg.distill.cqd))
        throw ConfigError("--teacher is required while distill.tfd or distill.cqd is enabled");
    const fs::path dir = output_dir(c);
    if (c.resume && finished_run(dir, "student.ckpt")) {
        std::cout << "output: " << dir.string() << " (finished)\n";
        return 0;
    }
    write_json(dir / "config.json", json(cfg));
    const auto splits = splits_for(cfg, data_dir);
    if (mask_dumps > 0) dump_masks(splits.train, cfg, dir / "masks", mask_dumps);
    train::RunOptions opt;
    opt.out_dir = dir;
    opt.validation = &splits.test;
    opt.verbose = c.verbose;
    report_run(dir, train::distill_student(splits.train, teacher, cfg, opt));
    return 0;
}

void write_per_clip(const fs::path& path, const eval::EvalResult& r) {
    std::ofstream f(path);
    if (!f) throw IoError(path.string(), "cannot write");
    f << "clip_id,tp,fp,fn,precision,recall,f1\n" << std::setprecision(6) << std::fixed;
    for (const auto& row : r.per_clip)
        f << row.clip_id << ',' << row.counts.tp << ',' << row.counts.fp << ',' << row.counts.fn << ','
          << row.precision << ',' << row.recall << ',' << row.f1 << '\n';
}

int cmd_eval(const Common& c, const std::string& ckpt, const std::string& data_dir, const std::string& protocol) {
    const ExperimentConfig cfg = load(c);
    CheckpointHeader header;
    detr::Detector model = load_detector(ckpt, &header);
    // A split directory, or a gen-data output holding train/ and test/.
    data::Dataset dataset;
    if (data_dir.empty())
        dataset = experiment::make_splits(cfg).test;
    else if (fs::exists(fs::path(data_dir) / "test" / "annotations.json"))
        dataset = data::Dataset::load(fs::path(data_dir) / "test");
    else
        dataset = data::Dataset::load(data_dir);
    const fs::path dir = output_dir(c);
    const eval::EvalResult r = train::evaluate_model(*model, dataset, cfg.eval);
    json full = train::to_json(r, true);
    json report = {{"checkpoint", ckpt},
                   {"role", header.role},
                   {"input_frames", header.model.frames},
                   {"seed", cfg.seed},
                   {"protocol", protocol},
                   {"clips", dataset.clips().size()}};
    for (const char* key : {"precision", "recall", "f1", "best_f1", "best_threshold", "tp", "fp", "fn"})
        if (protocol != "ap") report[key] = full[key];
    for (const char* key : {"ap", "ap50", "ap75"})
        if (protocol != "f1") report[key] = full[key];
    write_json(dir / "report.json", report);
    write_per_clip(dir / "per_clip.csv", r);
    if (protocol != "ap")
        std::cout << "precision " << r.precision << " recall " << r.recall << " f1 " << r.f1 << '\n';
    if (protocol != "f1") std::cout << "ap " << r.ap << " ap50 " << r.ap50 << " ap75 " << r.ap75 << '\n';
    std::cout << "output: " << dir.string() << '\n';
    return 0;
}

int cmd_ablate(const Common& c, const std::string& grid_spec) {
    const ExperimentConfig base = load_config(c.config, {});
    const auto overrides = overrides_of(c);
    load_config(c.config, overrides);  // reject bad overrides before any work starts
    const experiment::Grid grid = experiment::load_grid(grid_spec);
    const fs::path dir = output_dir(c);
    std::error_code ec;
    const fs::path exe = fs::read_symlink("/proc/self/exe", ec);
    const auto result = experiment::run_ablation(base, overrides, grid, dir, c.workers, ec ? fs::path() : exe,
                                                 c.verbose);
    int failed = 0;
    std::cout << std::fixed << std::setprecision(4);
    for (const auto& row : result.rows) {
        std::cout << row.cell.name << ": f1 " << row.f1 << " (" << std::showpos << row.d_f1 << std::noshowpos << ") "
                  << row.status << '\n';
        if (row.status != "ok") ++failed;
    }
    std::cout << "table: " << result.table.string() << '\n';
    if (failed) std::cerr << failed << " cell(s) failed; see table.csv\n";
    return 0;
}

int cmd_plot(const std::vector<std::string>& runs, const std::string& out) {
    std::vector<fs::path> dirs(runs.begin(), runs.end());
    const fs::path dir = out.empty() ? dirs.front() : fs::path(out);
    for (const auto& f : plot::plot_runs(dirs, dir)) std::cout << f.string() << '\n';
    return 0;
}

int cmd_run_job(const std::string& job_file, bool verbose) {
    std::ifstream f(job_file);
    if (!f) throw IoError(job_file, "cannot read job description");
    json j;
    try {
        j = json::parse(f);
    } catch (const json::exception& e) {
        throw ConfigError(job_file + ": " + e.what());
    }
    const json result = experiment::run_job(experiment::job_from_json(j), verbose);
    if (result.value("status", "") != "ok") {
        std::cerr << result.value("error", "job failed") << '\n';
        return 1;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Video-to-image detection distillation on synthetic lesion videos"};
    app.require_subcommand(1);

    Common gen, teach, dist, ev, abl;
    int dist_masks = 0;
    std::string teach_data, dist_data, dist_teacher, ev_ckpt, ev_data, ev_protocol = "both", grid = "components";
    std::vector<std::string> plot_runs;
    std::string plot_out, job_file;
    bool job_verbose = false;

    auto* g = app.add_subcommand("gen-data", "generate and write the train/test splits");
    add_common(*g, gen, "runs/data");

    auto* t = app.add_subcommand("train-teacher", "train the multi-frame teacher");
    add_common(*t, teach, "runs/teacher");
    t->add_option("--data", teach_data, "gen-data output (default: generate from config)")->check(CLI::ExistingDirectory);

    auto* d = app.add_subcommand("distill", "train the single-frame student against a teacher");
    add_common(*d, dist, "runs/student");
    d->add_option("--teacher", dist_teacher, "teacher checkpoint")->check(CLI::ExistingFile);
    d->add_option("--data", dist_data, "gen-data output (default: generate from config)")->check(CLI::ExistingDirectory);
    d->add_option("--dump-masks", dist_masks, "write the masks of the first N training frames to <out>/masks")
        ->check(CLI::NonNegativeNumber);

    auto* e = app.add_subcommand("eval", "evaluate a checkpoint");
    add_common(*e, ev, "runs/eval");
    e->add_option("--ckpt", ev_ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
    e->add_option("--data", ev_data, "dataset or gen-data output (default: test split from config)")
        ->check(CLI::ExistingDirectory);
    e->add_option("--protocol", ev_protocol, "f1, ap or both")->check(CLI::IsMember({"f1", "ap", "both"}));

    auto* a = app.add_subcommand("ablate", "run an ablation grid and write table.csv");
    add_common(*a, abl, "runs/ablation");
    a->add_option("--grid", grid, "preset (components, fd_variants, cq_count, frames, lambda) or JSON file");

    auto* p = app.add_subcommand("plot", "write SVG charts from run directories");
    p->add_option("runs", plot_runs, "run directories")->required();
    p->add_option("--out", plot_out, "output directory (default: first run directory)");

    auto* j = app.add_subcommand("run-job", "");
    j->group("");
    j->add_option("--job", job_file)->required();
    j->add_flag("-v,--verbose", job_verbose);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*g) return cmd_gen_data(gen);
        if (*t) return cmd_train_teacher(teach, teach_data);
        if (*d) return cmd_distill(dist, dist_teacher, dist_data, dist_masks);
        if (*e) return cmd_eval(ev, ev_ckpt, ev_data, ev_protocol);
        if (*a) return cmd_ablate(abl, grid);
        if (*p) return cmd_plot(plot_runs, plot_out);
        if (*j) return cmd_run_job(job_file, job_verbose);
    } catch (const ConfigError& err) {
        std::cerr << "config error: " << err.what() << '\n';
        return 2;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << '\n';
        return 1;
    }
    return 1;
}
