#include "v2i/experiment.hpp"

#include <fcntl.h>
#include <spawn.h>
#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <tuple>

#include "v2i/errors.hpp"
#include "v2i/hash.hpp"
#include "v2i/trainer.hpp"

extern char** environ;

namespace v2i::experiment {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError(path.string(), "cannot open");
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw IoError(path.string(), e.what());
    }
}

void write_json(const fs::path& path, const json& j) {
    fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp);
        if (!out) throw IoError(tmp.string(), "cannot open for writing");
        out << j.dump(2) << '\n';
    }
    fs::rename(tmp, path);
}

std::string hex(std::uint64_t v) {
    std::ostringstream s;
    s << std::hex << std::setw(16) << std::setfill('0') << v;
    return s.str();
}

std::string value_text(const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

pid_t spawn_worker(const fs::path& exe, const fs::path& job_file, const fs::path& log) {
    posix_spawn_file_actions_t actions;
    posix_spawn_file_actions_init(&actions);
    const std::string log_s = log.string();
    posix_spawn_file_actions_addopen(&actions, STDOUT_FILENO, log_s.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    posix_spawn_file_actions_adddup2(&actions, STDOUT_FILENO, STDERR_FILENO);
    std::string a0 = exe.string(), a1 = "run-job", a2 = "--job", a3 = job_file.string();
    char* argv[] = {a0.data(), a1.data(), a2.data(), a3.data(), nullptr};
    pid_t pid = 0;
    const int rc = posix_spawn(&pid, a0.c_str(), &actions, nullptr, argv, environ);
    posix_spawn_file_actions_destroy(&actions);
    if (rc != 0) throw IoError(a0, "cannot start worker process");
    return pid;
}

}  // namespace

Splits make_splits(const ExperimentConfig& cfg) {
    data::GeneratorConfig train = cfg.data;
    train.seed = cfg.stream_seed(0);
    data::GeneratorConfig test = cfg.data;
    test.seed = cfg.stream_seed(1);
    test.num_clips = std::max(cfg.test_clips, 1);
    return {data::Dataset::generate(train), data::Dataset::generate(test)};
}

void write_splits(const Splits& splits, const fs::path& dir) {
    data::write_dataset(splits.train.clips(), dir / "train", splits.train.config_hash());
    data::write_dataset(splits.test.clips(), dir / "test", splits.test.config_hash());
}

Splits load_splits(const fs::path& dir) { return {data::Dataset::load(dir / "train"), data::Dataset::load(dir / "test")}; }

fs::path unique_dir(const fs::path& base) {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream s;
    s << base.string() << '-' << std::put_time(&tm, "%Y%m%d-%H%M%S");
    fs::path dir = s.str();
    for (int k = 1; fs::exists(dir); ++k) dir = s.str() + "-" + std::to_string(k);
    return dir;
}

json to_json(const Job& job) {
    return {{"kind", job.kind},
            {"config", job.config},
            {"out_dir", job.out_dir.string()},
            {"teacher_ckpt", job.teacher_ckpt.string()},
            {"data_dir", job.data_dir.string()}};
}

Job job_from_json(const json& j) {
    try {
        return {j.at("kind").get<std::string>(), j.at("config"), j.at("out_dir").get<std::string>(),
                j.value("teacher_ckpt", ""), j.value("data_dir", "")};
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed job description: ") + e.what());
    }
}

// A job counts as done only when its recorded description matches exactly.
bool finished(const Job& job) {
    const fs::path r = job.out_dir / "result.json", d = job.out_dir / "job.json";
    if (!fs::exists(r) || !fs::exists(d)) return false;
    try {
        return read_json(r).value("status", "") == "ok" && read_json(d) == to_json(job);
    } catch (const IoError&) {
        return false;
    }
}

json run_job(const Job& job, bool verbose) {
    json result;
    try {
        fs::create_directories(job.out_dir);
        write_json(job.out_dir / "job.json", to_json(job));
        const ExperimentConfig cfg = job.config.get<ExperimentConfig>();
        cfg.validate();
        const Splits splits = job.data_dir.empty() ? make_splits(cfg) : load_splits(job.data_dir);
        train::RunOptions opt;
        opt.out_dir = job.out_dir;
        opt.validation = &splits.test;
        opt.verbose = verbose;
        train::RunResult r;
        if (job.kind == "teacher")
            r = train::train_teacher(splits.train, cfg, opt);
        else if (job.kind == "student")
            r = train::distill_student(splits.train, job.teacher_ckpt, cfg, opt);
        else
            throw ConfigError("unknown job kind '" + job.kind + "'");
        result = {{"status", "ok"}, {"checkpoint", r.checkpoint.string()}, {"metrics", r.metrics}};
    } catch (const std::exception& e) {
        result = {{"status", "failed"}, {"error", e.what()}};
    }
    try {
        write_json(job.out_dir / "result.json", result);
    } catch (const std::exception& e) {
        result = {{"status", "failed"}, {"error", e.what()}};
    }
    return result;
}

std::vector<json> run_jobs(const std::vector<Job>& jobs, int workers, const fs::path& executable, bool verbose) {
    std::vector<json> results(jobs.size());
    std::vector<std::size_t> pending;
    for (std::size_t i = 0; i < jobs.size(); ++i) {
        if (finished(jobs[i]))
            results[i] = read_json(jobs[i].out_dir / "result.json");
        else
            pending.push_back(i);
    }
    if (workers <= 1 || executable.empty()) {
        for (std::size_t i : pending) {
            if (verbose) std::cerr << "running " << jobs[i].kind << " in " << jobs[i].out_dir << '\n';
            results[i] = run_job(jobs[i], verbose);
        }
        return results;
    }

    std::map<pid_t, std::size_t> running;
    std::size_t next = 0;
    auto collect = [&] {
        int status = 0;
        const pid_t pid = waitpid(-1, &status, 0);
        if (pid <= 0) return;
        const std::size_t i = running.at(pid);
        running.erase(pid);
        const fs::path r = jobs[i].out_dir / "result.json";
        if (fs::exists(r))
            results[i] = read_json(r);
        else
            results[i] = {{"status", "failed"},
                          {"error", "worker exited with status " + std::to_string(WEXITSTATUS(status)) +
                                        " without a result; see worker.log"}};
    };
    while (next < pending.size() || !running.empty()) {
        while (next < pending.size() && static_cast<int>(running.size()) < workers) {
            const Job& job = jobs[pending[next]];
            fs::create_directories(job.out_dir);
            write_json(job.out_dir / "job.json", to_json(job));
            fs::remove(job.out_dir / "result.json");
            if (verbose) std::cerr << "starting " << job.kind << " in " << job.out_dir << '\n';
            running[spawn_worker(executable, job.out_dir / "job.json", job.out_dir / "worker.log")] = pending[next];
            ++next;
        }
        collect();
    }
    return results;
}

Grid product_grid(const json& axes, const std::vector<std::string>& baseline_overrides) {
    if (!axes.is_object() || axes.empty()) throw ConfigError("grid needs at least one axis");
    Grid g;
    g.name = "grid";
    Cell base{"baseline", baseline_overrides, json::object(), true};
    g.cells.push_back(base);
    std::vector<std::pair<std::string, json>> ax;
    for (const auto& [k, v] : axes.items()) ax.emplace_back(k, v);
    for (const auto& [key, values] : ax)
        if (!values.is_array() || values.empty()) throw ConfigError("grid axis '" + key + "' needs a list of values");
    std::vector<std::size_t> idx(ax.size(), 0);
    while (true) {
        Cell c;
        for (std::size_t a = 0; a < ax.size(); ++a) {
            const json& v = ax[a].second[idx[a]];
            c.overrides.push_back(ax[a].first + "=" + v.dump());
            c.axes[ax[a].first] = v;
            c.name += (c.name.empty() ? "" : ",") + ax[a].first + "=" + value_text(v);
        }
        g.cells.push_back(std::move(c));
        std::size_t a = 0;
        while (a < ax.size() && ++idx[a] == ax[a].second.size()) idx[a++] = 0;
        if (a == ax.size()) break;
    }
    return g;
}

Grid preset_grid(const std::string& name) {
    const std::vector<std::string> plain{"distill.tfd=false", "distill.cqd=false"};
    Grid g;
    g.name = name;
    g.cells.push_back({"baseline", plain, json::object(), true});
    auto add = [&](std::string cell, std::vector<std::string> ov, json axes) {
        g.cells.push_back({std::move(cell), std::move(ov), std::move(axes), false});
    };
    auto toggles = [](bool tfd, bool msi, bool cqd) {
        return std::vector<std::string>{std::string("distill.tfd=") + (tfd ? "true" : "false"),
                                        std::string("teacher.msi=") + (msi ? "true" : "false"),
                                        std::string("distill.cqd=") + (cqd ? "true" : "false")};
    };
    if (name == "components") {
        g.cells[0].axes = {{"tfd", false}, {"msi", false}, {"cqd", false}};
        for (auto [tfd, msi, cqd] : {std::tuple{true, false, false}, std::tuple{true, true, false},
                                     std::tuple{true, false, true}, std::tuple{true, true, true}}) {
            std::string n = "tfd";
            if (msi) n += "+msi";
            if (cqd) n += "+cqd";
            add(n, toggles(tfd, msi, cqd), {{"tfd", tfd}, {"msi", msi}, {"cqd", cqd}});
        }
    } else if (name == "fd_variants") {
        for (const char* v : {"vanilla", "gt_hard_mask", "attention_mask", "gaussian_soft"}) {
            auto ov = toggles(true, false, false);
            ov.push_back(std::string("distill.fd_variant=\"") + v + "\"");
            add(std::string("fd_") + v, ov, {{"fd_variant", v}});
        }
    } else if (name == "cq_count") {
        for (const char* m : {"all_TN", "half_TN", "floor_NT"}) {
            auto ov = toggles(false, false, true);
            ov.push_back(std::string("distill.count_mode=\"") + m + "\"");
            add(std::string("cq_") + m, ov, {{"count_mode", m}});
        }
    } else if (name == "frames") {
        for (int T = 1; T <= 5; ++T)
            add("T=" + std::to_string(T), {"train.T=" + std::to_string(T)}, {{"T", T}});
    } else if (name == "lambda") {
        for (double bk : {0.5, 1.0, 2.0})
            for (double qe : {1.0, 5.0, 10.0}) {
                std::ostringstream n;
                n << "bk=" << bk << ",qe=" << qe;
                add(n.str(), {"distill.lambda_bk=" + json(bk).dump(), "distill.lambda_qe=" + json(qe).dump()},
                    {{"lambda_bk", bk}, {"lambda_qe", qe}});
            }
    } else {
        throw ConfigError("unknown ablation preset '" + name +
                          "' (expected components, fd_variants, cq_count, frames or lambda)");
    }
    return g;
}

Grid load_grid(const std::string& spec) {
    if (!fs::exists(spec)) return preset_grid(spec);
    json j;
    try {
        j = read_json(spec);
    } catch (const IoError& e) {
        throw ConfigError(e.what());
    }
    for (const auto& [key, _] : j.items())
        if (key != "preset" && key != "axes" && key != "baseline" && key != "seeds")
            throw ConfigError("unknown grid key '" + key + "'");
    Grid g;
    try {
        if (j.contains("preset")) {
            g = preset_grid(j.at("preset").get<std::string>());
        } else {
            std::vector<std::string> base{"distill.tfd=false", "distill.cqd=false"};
            if (j.contains("baseline")) base = j.at("baseline").get<std::vector<std::string>>();
            g = product_grid(j.value("axes", json::object()), base);
            g.name = fs::path(spec).stem().string();
        }
        if (j.contains("seeds")) g.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed grid file: ") + e.what());
    }
    return g;
}

void write_table(const std::vector<AblationRow>& rows, const fs::path& path) {
    std::vector<std::string> axes;
    for (const auto& r : rows)
        for (const auto& [k, _] : r.cell.axes.items())
            if (std::find(axes.begin(), axes.end(), k) == axes.end()) axes.push_back(k);
    std::ostringstream out;
    out << "id,name";
    for (const auto& a : axes) out << ',' << a;
    out << ",precision,recall,f1,d_precision,d_recall,d_f1,ap50,seed_f1,teacher_f1,status,error\n";
    out << std::setprecision(6) << std::fixed;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const AblationRow& r = rows[i];
        out << i + 1 << ",\"" << r.cell.name << '"';
        for (const auto& a : axes) out << ',' << (r.cell.axes.contains(a) ? value_text(r.cell.axes.at(a)) : "");
        out << ',' << r.precision << ',' << r.recall << ',' << r.f1 << ',' << r.d_precision << ',' << r.d_recall
            << ',' << r.d_f1 << ',' << r.ap50 << ",\"";
        for (std::size_t k = 0; k < r.seed_f1.size(); ++k) out << (k ? " " : "") << r.seed_f1[k];
        out << "\",\"";
        for (std::size_t k = 0; k < r.teacher_f1.size(); ++k) out << (k ? " " : "") << r.teacher_f1[k];
        std::string err = r.error;
        std::replace(err.begin(), err.end(), '"', '\'');
        std::replace(err.begin(), err.end(), '\n', ' ');
        out << "\"," << r.status << ",\"" << err << "\"\n";
    }
    fs::create_directories(path.parent_path());
    std::ofstream f(path);
    if (!f) throw IoError(path.string(), "cannot write table");
    f << out.str();
}

AblationResult run_ablation(const ExperimentConfig& base, const std::vector<std::string>& base_overrides,
                            const Grid& grid, const fs::path& out_dir, int workers, const fs::path& executable,
                            bool verbose) {
    const std::vector<std::uint64_t> seeds = grid.seeds.empty() ? std::vector<std::uint64_t>{base.seed} : grid.seeds;
    struct Planned {
        std::size_t cell;
        std::size_t seed;
        ExperimentConfig cfg;
        std::string teacher_key;
    };
    std::vector<Planned> plan;
    std::map<std::string, Job> teachers;
    const json base_doc = json(base);
    for (std::size_t c = 0; c < grid.cells.size(); ++c) {
        for (std::size_t s = 0; s < seeds.size(); ++s) {
            json doc = base_doc;
            for (const auto& o : base_overrides) apply_override(doc, o);
            for (const auto& o : grid.cells[c].overrides) apply_override(doc, o);
            doc["seed"] = seeds[s];
            ExperimentConfig cfg = doc.get<ExperimentConfig>();
            cfg.validate();
            std::string key;
            if (cfg.distill.tfd || cfg.distill.cqd || cfg.teacher.trainable) {
                // Everything the teacher run depends on.
                json t = doc;
                t.erase("distill");
                t["teacher"].erase("trainable");
                key = std::to_string(seeds[s]) + "-" + hex(fnv1a64(t.dump()));
                if (!teachers.count(key)) teachers[key] = {"teacher", t, out_dir / "teachers" / key, "", ""};
                teachers[key].config = json(cfg);
            }
            plan.push_back({c, s, cfg, key});
        }
    }
    std::vector<Job> teacher_jobs;
    std::vector<std::string> teacher_keys;
    for (auto& [k, j] : teachers) {
        teacher_jobs.push_back(j);
        teacher_keys.push_back(k);
    }
    const auto teacher_results = run_jobs(teacher_jobs, workers, executable, verbose);
    std::map<std::string, json> teacher_status;
    for (std::size_t i = 0; i < teacher_keys.size(); ++i) teacher_status[teacher_keys[i]] = teacher_results[i];

    std::vector<Job> student_jobs;
    for (const Planned& p : plan) {
        Job j{"student", json(p.cfg),
              out_dir / "cells" / (std::to_string(p.cell + 1) + "_" + std::to_string(seeds[p.seed])), "", ""};
        if (!p.teacher_key.empty()) j.teacher_ckpt = out_dir / "teachers" / p.teacher_key / "teacher.ckpt";
        student_jobs.push_back(j);
    }
    std::vector<json> student_results(plan.size());
    {
        std::vector<Job> runnable;
        std::vector<std::size_t> where;
        for (std::size_t i = 0; i < plan.size(); ++i) {
            const auto& key = plan[i].teacher_key;
            if (!key.empty() && teacher_status[key].value("status", "") != "ok") {
                student_results[i] = {{"status", "failed"},
                                      {"error", "teacher run failed: " + teacher_status[key].value("error", "")}};
                continue;
            }
            runnable.push_back(student_jobs[i]);
            where.push_back(i);
        }
        const auto res = run_jobs(runnable, workers, executable, verbose);
        for (std::size_t k = 0; k < res.size(); ++k) student_results[where[k]] = res[k];
    }

    AblationResult out;
    for (std::size_t c = 0; c < grid.cells.size(); ++c) {
        AblationRow row{grid.cells[c], "ok", "", 0, 0, 0, 0, 0, 0, 0, {}, {}};
        int ok = 0;
        for (std::size_t i = 0; i < plan.size(); ++i) {
            if (plan[i].cell != c) continue;
            const json& r = student_results[i];
            if (r.value("status", "") != "ok") {
                row.status = "failed";
                row.error = r.value("error", "unknown failure");
                continue;
            }
            const json& m = r.at("metrics").at("val");
            row.precision += m.at("precision").get<double>();
            row.recall += m.at("recall").get<double>();
            row.f1 += m.at("f1").get<double>();
            row.ap50 += m.at("ap50").get<double>();
            row.seed_f1.push_back(m.at("f1").get<double>());
            if (!plan[i].teacher_key.empty())
                row.teacher_f1.push_back(teacher_status[plan[i].teacher_key].at("metrics").at("val").at("f1").get<double>());
            ++ok;
        }
        if (ok > 0) {
            row.precision /= ok;
            row.recall /= ok;
            row.f1 /= ok;
            row.ap50 /= ok;
        }
        out.rows.push_back(std::move(row));
    }
    const auto base_it = std::find_if(out.rows.begin(), out.rows.end(), [](const auto& r) { return r.cell.baseline; });
    if (base_it != out.rows.end()) {
        const AblationRow b = *base_it;
        for (auto& r : out.rows) {
            r.d_precision = r.precision - b.precision;
            r.d_recall = r.recall - b.recall;
            r.d_f1 = r.f1 - b.f1;
        }
    }
    out.table = out_dir / "table.csv";
    write_table(out.rows, out.table);
    return out;
}

}  // namespace v2i::experiment
