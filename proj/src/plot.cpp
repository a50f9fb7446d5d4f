#include "v2i/plot.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include <json.hpp>

#include "v2i/errors.hpp"

namespace v2i::plot {

namespace fs = std::filesystem;

namespace {

constexpr double kWidth = 640, kHeight = 400;
constexpr double kLeft = 70, kRight = 150, kTop = 40, kBottom = 50;
const char* const kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '&': out += "&amp;"; break;
            default: out += c;
        }
    }
    return out;
}

std::string num(double v) {
    std::ostringstream s;
    s << std::setprecision(4) << v;
    return s.str();
}

void write_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw IoError(path.string(), "cannot write plot");
    out << text;
}

std::string header(const std::string& title) {
    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << kWidth / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape(title)
      << "</text>\n";
    return s.str();
}

}  // namespace

std::string line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                       const std::vector<Series>& series) {
    double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
    for (const Series& s : series)
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (!std::isfinite(s.y[i])) continue;
            x0 = std::min(x0, s.x[i]), x1 = std::max(x1, s.x[i]);
            y0 = std::min(y0, s.y[i]), y1 = std::max(y1, s.y[i]);
        }
    if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    if (x1 == x0) x1 = x0 + 1;
    if (y1 == y0) y1 = y0 + 1;
    const double pw = kWidth - kLeft - kRight, ph = kHeight - kTop - kBottom;
    auto px = [&](double x) { return kLeft + (x - x0) / (x1 - x0) * pw; };
    auto py = [&](double y) { return kTop + ph - (y - y0) / (y1 - y0) * ph; };

    std::ostringstream s;
    s << header(title);
    s << "<rect x=\"" << kLeft << "\" y=\"" << kTop << "\" width=\"" << pw << "\" height=\"" << ph
      << "\" fill=\"none\" stroke=\"black\"/>\n";
    for (int k = 0; k <= 4; ++k) {
        const double xv = x0 + (x1 - x0) * k / 4, yv = y0 + (y1 - y0) * k / 4;
        s << "<text x=\"" << px(xv) << "\" y=\"" << kTop + ph + 16 << "\" text-anchor=\"middle\">" << num(xv)
          << "</text>\n";
        s << "<text x=\"" << kLeft - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << num(yv)
          << "</text>\n";
        s << "<line x1=\"" << kLeft << "\" x2=\"" << kLeft + pw << "\" y1=\"" << py(yv) << "\" y2=\"" << py(yv)
          << "\" stroke=\"#ddd\"/>\n";
    }
    s << "<text x=\"" << kLeft + pw / 2 << "\" y=\"" << kHeight - 10 << "\" text-anchor=\"middle\">"
      << escape(x_label) << "</text>\n";
    s << "<text transform=\"translate(16," << kTop + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
      << escape(y_label) << "</text>\n";
    for (std::size_t k = 0; k < series.size(); ++k) {
        const Series& se = series[k];
        const char* color = kPalette[k % std::size(kPalette)];
        s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
        for (std::size_t i = 0; i < se.x.size(); ++i)
            if (std::isfinite(se.y[i])) s << px(se.x[i]) << ',' << py(se.y[i]) << ' ';
        s << "\"/>\n";
        if (se.x.size() <= 12)
            for (std::size_t i = 0; i < se.x.size(); ++i)
                if (std::isfinite(se.y[i]))
                    s << "<circle cx=\"" << px(se.x[i]) << "\" cy=\"" << py(se.y[i]) << "\" r=\"3\" fill=\"" << color
                      << "\"/>\n";
        const double ly = kTop + 14 + 18 * static_cast<double>(k);
        s << "<line x1=\"" << kWidth - kRight + 12 << "\" x2=\"" << kWidth - kRight + 32 << "\" y1=\"" << ly
          << "\" y2=\"" << ly << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
        s << "<text x=\"" << kWidth - kRight + 36 << "\" y=\"" << ly + 4 << "\">" << escape(se.name) << "</text>\n";
    }
    s << "</svg>\n";
    return s.str();
}

std::string heatmap(const std::string& title, const std::string& row_label, const std::string& col_label,
                    const std::vector<std::string>& rows, const std::vector<std::string>& cols,
                    const std::vector<std::vector<double>>& values) {
    double lo = INFINITY, hi = -INFINITY;
    for (const auto& r : values)
        for (double v : r)
            if (std::isfinite(v)) lo = std::min(lo, v), hi = std::max(hi, v);
    if (!std::isfinite(lo)) lo = 0, hi = 1;
    if (hi == lo) hi = lo + 1e-9;
    const double pw = kWidth - kLeft - kRight, ph = kHeight - kTop - kBottom;
    const double cw = pw / std::max<std::size_t>(cols.size(), 1), ch = ph / std::max<std::size_t>(rows.size(), 1);
    std::ostringstream s;
    s << header(title);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        for (std::size_t c = 0; c < cols.size(); ++c) {
            const double v = values[r][c];
            const double t = std::isfinite(v) ? (v - lo) / (hi - lo) : 0.0;
            const int red = static_cast<int>(255 * (1 - t) + 30 * t), green = static_cast<int>(255 * (1 - t) + 90 * t);
            const int blue = static_cast<int>(255 * (1 - t) + 180 * t);
            const double x = kLeft + cw * static_cast<double>(c), y = kTop + ch * static_cast<double>(r);
            s << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cw << "\" height=\"" << ch
              << "\" fill=\"rgb(" << red << ',' << green << ',' << blue << ")\" stroke=\"white\"/>\n";
            s << "<text x=\"" << x + cw / 2 << "\" y=\"" << y + ch / 2 + 4 << "\" text-anchor=\"middle\" fill=\""
              << (t > 0.6 ? "white" : "black") << "\">" << (std::isfinite(v) ? num(v) : "n/a") << "</text>\n";
        }
        s << "<text x=\"" << kLeft - 6 << "\" y=\"" << kTop + ch * (static_cast<double>(r) + 0.5) + 4
          << "\" text-anchor=\"end\">" << escape(rows[r]) << "</text>\n";
    }
    for (std::size_t c = 0; c < cols.size(); ++c)
        s << "<text x=\"" << kLeft + cw * (static_cast<double>(c) + 0.5) << "\" y=\"" << kTop + ph + 16
          << "\" text-anchor=\"middle\">" << escape(cols[c]) << "</text>\n";
    s << "<text x=\"" << kLeft + pw / 2 << "\" y=\"" << kHeight - 10 << "\" text-anchor=\"middle\">"
      << escape(col_label) << "</text>\n";
    s << "<text transform=\"translate(16," << kTop + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
      << escape(row_label) << "</text>\n";
    s << "</svg>\n";
    return s.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError(path.string(), "cannot open");
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> row;
        std::string field;
        bool quoted = false;
        for (std::size_t i = 0; i < line.size(); ++i) {
            const char c = line[i];
            if (quoted) {
                if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') field += '"', ++i;
                else if (c == '"') quoted = false;
                else field += c;
            } else if (c == '"') {
                quoted = true;
            } else if (c == ',') {
                row.push_back(field);
                field.clear();
            } else {
                field += c;
            }
        }
        row.push_back(field);
        rows.push_back(std::move(row));
    }
    return rows;
}

namespace {

std::string run_name(const fs::path& dir) {
    fs::path p = dir;
    if (p.filename().empty()) p = p.parent_path();
    return p.filename().string();
}

fs::path plot_log(const fs::path& log, const fs::path& out, const std::string& name) {
    Series det{"l_det", {}, {}}, bk{"l_bk", {}, {}}, qe{"l_qe", {}, {}}, total{"total", {}, {}};
    std::ifstream in(log);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        const double step = j.at("step").get<double>();
        for (auto [s, key] : {std::pair{&det, "l_det"}, {&bk, "l_bk"}, {&qe, "l_qe"}, {&total, "total"}}) {
            s->x.push_back(step);
            s->y.push_back(j.at(key).get<double>());
        }
    }
    const fs::path file = out / (name + "_loss.svg");
    write_file(file, line_chart(name + " training losses", "step", "loss", {det, bk, qe, total}));
    return file;
}

std::vector<fs::path> plot_table(const fs::path& table, const fs::path& out, const std::string& name) {
    const auto rows = read_csv(table);
    std::vector<fs::path> files;
    if (rows.size() < 2) return files;
    std::map<std::string, std::size_t> col;
    for (std::size_t i = 0; i < rows[0].size(); ++i) col[rows[0][i]] = i;
    if (!col.count("f1")) throw IoError(table.string(), "table has no f1 column");
    auto value = [&](const std::vector<std::string>& r, const std::string& key) -> double {
        const auto it = col.find(key);
        if (it == col.end() || it->second >= r.size() || r[it->second].empty()) return NAN;
        return std::stod(r[it->second]);
    };
    if (col.count("lambda_bk") && col.count("lambda_qe")) {
        std::vector<double> bks, qes;
        for (std::size_t i = 1; i < rows.size(); ++i) {
            const double b = value(rows[i], "lambda_bk"), q = value(rows[i], "lambda_qe");
            if (std::isnan(b) || std::isnan(q)) continue;
            if (std::find(bks.begin(), bks.end(), b) == bks.end()) bks.push_back(b);
            if (std::find(qes.begin(), qes.end(), q) == qes.end()) qes.push_back(q);
        }
        std::sort(bks.begin(), bks.end());
        std::sort(qes.begin(), qes.end());
        std::vector<std::vector<double>> grid(bks.size(), std::vector<double>(qes.size(), NAN));
        for (std::size_t i = 1; i < rows.size(); ++i) {
            const double b = value(rows[i], "lambda_bk"), q = value(rows[i], "lambda_qe");
            if (std::isnan(b) || std::isnan(q)) continue;
            const auto r = std::find(bks.begin(), bks.end(), b) - bks.begin();
            const auto c = std::find(qes.begin(), qes.end(), q) - qes.begin();
            grid[r][c] = value(rows[i], "f1");
        }
        std::vector<std::string> rl, cl;
        for (double b : bks) rl.push_back(num(b));
        for (double q : qes) cl.push_back(num(q));
        const fs::path file = out / (name + "_lambda_heatmap.svg");
        write_file(file, heatmap(name + ": F1 over loss weights", "lambda_bk", "lambda_qe", rl, cl, grid));
        files.push_back(file);
    }
    if (col.count("T")) {
        Series s{"F1", {}, {}};
        for (std::size_t i = 1; i < rows.size(); ++i) {
            const double T = value(rows[i], "T");
            if (std::isnan(T)) continue;
            s.x.push_back(T);
            s.y.push_back(value(rows[i], "f1"));
        }
        const fs::path file = out / (name + "_frames_f1.svg");
        write_file(file, line_chart(name + ": F1 over training frames", "frames T", "F1", {s}));
        files.push_back(file);
    }
    return files;
}

}  // namespace

std::vector<fs::path> plot_runs(const std::vector<fs::path>& run_dirs, const fs::path& out_dir) {
    std::vector<std::string> missing;
    for (const fs::path& d : run_dirs)
        if (!fs::exists(d / "train_log.jsonl") && !fs::exists(d / "table.csv"))
            missing.push_back((d / "train_log.jsonl").string() + " (or " + (d / "table.csv").string() + ")");
    if (run_dirs.empty()) missing.push_back("(no run directories given)");
    if (!missing.empty()) {
        std::string msg = "missing inputs:";
        for (const auto& m : missing) msg += "\n  " + m;
        throw IoError(out_dir.string(), msg);
    }
    fs::create_directories(out_dir);
    std::vector<fs::path> files;
    for (const fs::path& d : run_dirs) {
        const std::string name = run_name(d);
        if (fs::exists(d / "train_log.jsonl")) files.push_back(plot_log(d / "train_log.jsonl", out_dir, name));
        if (fs::exists(d / "table.csv")) {
            auto more = plot_table(d / "table.csv", out_dir, name);
            files.insert(files.end(), more.begin(), more.end());
        }
    }
    return files;
}

}  // namespace v2i::plot
