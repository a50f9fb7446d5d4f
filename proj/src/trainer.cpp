#include "v2i/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>

#include "v2i/checkpoint.hpp"
#include "v2i/cqd.hpp"
#include "v2i/errors.hpp"
#include "v2i/hash.hpp"
#include "v2i/tfd.hpp"

namespace v2i::train {

using nlohmann::json;

namespace {

// Named RNG streams under the root seed.
enum Stream : std::uint64_t {
    kTeacherInit = 2,
    kStudentInit = 3,
    kTeacherOrder = 4,
    kStudentOrder = 5,
    kSelection = 6,
};

void write_json(const std::filesystem::path& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw IoError(path.string(), "cannot open for writing");
    out << j.dump(2) << '\n';
}

torch::Tensor mask_batch(const Batch& batch, int h, int w, const DistillConfig& ds) {
    std::vector<torch::Tensor> masks;
    for (const auto& boxes : batch.boxes) {
        const tfd::SoftMask m = ds.fd_variant == FdVariant::gt_hard_mask
                                    ? tfd::build_hard_mask(boxes, h, w)
                                    : tfd::build_gaussian_mask(boxes, h, w, ds.sigma_mode);
        masks.push_back(m.tensor().to(torch::kFloat32));
    }
    return torch::stack(masks);
}

}  // namespace

double total_loss(const LossBreakdown& p) {
    for (double v : {p.l_det, p.l_bk, p.l_qe, p.lambda_bk, p.lambda_qe})
        if (!std::isfinite(v)) throw DivergenceError("non-finite loss component");
    return p.l_det + p.lambda_bk * p.l_bk + p.lambda_qe * p.l_qe;
}

std::vector<Sample> all_samples(const data::Dataset& dataset) {
    std::vector<Sample> out;
    for (int c = 0; c < static_cast<int>(dataset.clips().size()); ++c)
        for (int f = 0; f < dataset.clips()[c].length(); ++f) out.push_back({c, f});
    return out;
}

Batch make_batch(const data::Dataset& dataset, std::span<const Sample> samples, int T) {
    Batch b;
    std::vector<torch::Tensor> windows;
    for (const Sample& s : samples) {
        const data::VideoClip& clip = dataset.clips().at(s.clip);
        const data::VideoClip win = data::load_window(clip, s.frame, T);
        auto px = torch::from_blob(const_cast<float*>(win.pixels.data()),
                                   {T, win.channels, win.height, win.width}, torch::kFloat32)
                      .clone();
        windows.push_back(px);
        b.current.push_back(win.current_index);

        std::vector<Box> boxes;
        std::vector<float> flat;
        std::vector<std::int64_t> labels;
        for (const data::Annotation& a : clip.annotations[s.frame]) {
            const Box bx = Box::from_pixels(a.box, clip.width, clip.height);
            boxes.push_back(bx);
            flat.insert(flat.end(), {static_cast<float>(bx.cx), static_cast<float>(bx.cy), static_cast<float>(bx.w),
                                     static_cast<float>(bx.h)});
            labels.push_back(a.class_id);
        }
        const auto g = static_cast<std::int64_t>(boxes.size());
        b.targets.push_back({torch::tensor(flat, torch::kFloat32).view({g, 4}),
                             torch::tensor(labels, torch::kLong).view({g})});
        b.boxes.push_back(std::move(boxes));
        b.samples.push_back(s);
    }
    b.windows = torch::stack(windows);
    auto idx = torch::tensor(std::vector<std::int64_t>(b.current.begin(), b.current.end()), torch::kLong);
    b.images = b.windows.index({torch::arange(b.windows.size(0)), idx});
    return b;
}

torch::Tensor detection_objective(const std::vector<detr::DetectionSet>& layers, std::span<const detr::Target> targets,
                                  const TrainConfig& train) {
    const std::size_t first = train.aux_loss ? 0 : layers.size() - 1;
    torch::Tensor total;
    for (std::size_t l = first; l < layers.size(); ++l) {
        const detr::DetectionSet& pred = layers[l];
        std::vector<detr::MatchResult> matches;
        for (std::size_t b = 0; b < targets.size(); ++b) {
            const auto i = static_cast<std::int64_t>(b);
            matches.push_back(
                detr::hungarian_match({pred.boxes[i], pred.class_logits[i]}, targets[b], train.loss));
        }
        auto loss = detr::detection_loss(pred, targets, matches, train.loss).total;
        total = total.defined() ? total + loss : loss;
    }
    return total;
}

StepLosses teacher_losses(detr::DetectorImpl& teacher, const Batch& batch, const ExperimentConfig& cfg) {
    auto out = teacher.forward_window(batch.windows, batch.current);
    StepLosses s;
    s.det = detection_objective(out.detections, batch.targets, cfg.train);
    s.bk = torch::zeros({});
    s.qe = torch::zeros({});
    s.total = s.det;
    s.parts = {s.det.item<double>(), 0.0, 0.0, 0.0, 0.0, 0.0};
    s.parts.total = total_loss(s.parts);
    return s;
}

StepLosses student_losses(detr::DetectorImpl& student, detr::DetectorImpl& teacher, const Batch& batch,
                          const ExperimentConfig& cfg, std::uint64_t selection_seed) {
    const DistillConfig& ds = cfg.distill;
    auto level3 = student.backbone->forward_last(batch.images);
    auto memory = student.encoder->forward(level3);

    torch::Tensor cross;
    cqd::CrossViewSelection sel;
    if (ds.cqd) {
        auto slots = teacher.all_slot_queries().detach();
        if (slots.size(0) != cfg.train.T) slots = slots.expand({cfg.train.T, -1, -1});
        sel = cqd::select_queries(cfg.train.N, cfg.train.T, selection_seed, ds.count_mode);
        cross = cqd::gather(slots, sel);
    } else {
        cross = student.query_embed.narrow(0, 0, 0).detach();
    }
    const cqd::StudentDecode sd = cqd::student_decode_with_crossview(student, cross, student.query_embed, memory);

    std::vector<detr::DetectionSet> dets;
    for (const auto& d : sd.own) dets.push_back(student.predict(d));
    StepLosses s;
    s.det = detection_objective(dets, batch.targets, cfg.train);
    s.bk = torch::zeros({});
    s.qe = torch::zeros({});
    s.total = s.det;

    if (ds.tfd || ds.cqd) {
        // Everything on the teacher side is computed without autograd; only
        // the student terms below build a graph.
        std::optional<torch::NoGradGuard> guard;
        if (!cfg.teacher.trainable) guard.emplace();
        auto t = teacher.forward_window(batch.windows, batch.current);
        if (t.level3.sizes() != level3.sizes()) throw ConfigError("teacher and student feature grids differ");
        const auto teacher_level3 = t.level3.detach();

        torch::Tensor mask, teacher_rows;
        if (ds.tfd && ds.fd_variant == FdVariant::attention_mask) {
            auto fg = t.detections.back().scores().first;
            std::vector<torch::Tensor> masks;
            for (std::int64_t b = 0; b < level3.size(0); ++b)
                masks.push_back(tfd::attention_mask(t.decoded.back()[b], t.level3[b], fg[b]));
            mask = torch::stack(masks);
        } else if (ds.tfd && ds.fd_variant != FdVariant::vanilla) {
            mask = mask_batch(batch, static_cast<int>(level3.size(2)), static_cast<int>(level3.size(3)), ds);
        }
        if (ds.cqd) {
            auto slots = teacher.all_slot_queries();
            if (slots.size(0) != cfg.train.T) slots = slots.expand({cfg.train.T, -1, -1});
            auto [refs, cur] = cqd::split_slots(slots, batch.current);
            const cqd::TeacherDecode td = cqd::teacher_decode(teacher, refs, cur, t.memory);
            auto decoded = torch::cat({td.reference, td.current}, 1);
            std::vector<torch::Tensor> rows;
            for (std::size_t b = 0; b < batch.current.size(); ++b) {
                auto idx = torch::tensor(cqd::teacher_rows(sel, batch.current[b]), torch::kLong);
                rows.push_back(decoded[static_cast<std::int64_t>(b)].index_select(0, idx));
            }
            teacher_rows = torch::stack(rows).detach();
        }
        guard.reset();

        if (ds.tfd)
            s.bk = ds.fd_variant == FdVariant::vanilla ? tfd::vanilla_fd_loss(level3, teacher_level3, ds.vanilla_norm)
                                                       : tfd::tfd_loss(level3, teacher_level3, mask);
        if (ds.cqd) s.qe = cqd::cqd_loss(sd.crossview.back().flatten(0, 1), teacher_rows.flatten(0, 1));
    }
    // A zero weight keeps the term out of the graph, so gradients match plain training bit for bit.
    if (ds.tfd && ds.lambda_bk != 0) s.total = s.total + ds.lambda_bk * s.bk;
    if (ds.cqd && ds.lambda_qe != 0) s.total = s.total + ds.lambda_qe * s.qe;
    s.parts = {s.det.item<double>(), s.bk.item<double>(), s.qe.item<double>(), ds.tfd ? ds.lambda_bk : 0.0,
               ds.cqd ? ds.lambda_qe : 0.0, 0.0};
    s.parts.total = total_loss(s.parts);
    return s;
}

namespace {

using StepFn = std::function<StepLosses(const Batch&, int)>;

struct LoopSpec {
    std::string role;
    std::vector<torch::Tensor> params;
    std::uint64_t order_seed = 0;
    int window = 1;
    int epochs = 1;
};

int run_loop(const data::Dataset& train, const ExperimentConfig& cfg, const LoopSpec& spec, const StepFn& step_fn,
             const RunOptions& opt, const std::filesystem::path& log_path,
             const std::function<void(const Batch&)>& extra_step = nullptr) {
    const std::vector<Sample> samples = all_samples(train);
    if (samples.empty()) throw ConfigError("training set is empty");
    const int bs = cfg.train.batch_size;
    const int per_epoch = static_cast<int>((samples.size() + bs - 1) / bs);
    const int total = cfg.train.max_steps > 0 ? cfg.train.max_steps : spec.epochs * per_epoch;
    const int drop_at = static_cast<int>(std::floor(cfg.train.lr_drop_at * total));

    torch::optim::AdamW optim(spec.params,
                              torch::optim::AdamWOptions(cfg.train.lr).weight_decay(cfg.train.weight_decay));
    std::ofstream log(log_path);
    if (!log) throw IoError(log_path.string(), "cannot open training log");

    std::vector<Sample> order;
    double lr = cfg.train.lr;
    for (int step = 0; step < total; ++step) {
        const int epoch = step / per_epoch, pos = step % per_epoch;
        if (pos == 0) {
            order = samples;
            std::mt19937_64 rng(derive_seed(spec.order_seed, static_cast<std::uint64_t>(epoch)));
            std::shuffle(order.begin(), order.end(), rng);
        }
        if (step == drop_at && step > 0) {
            lr = cfg.train.lr * cfg.train.lr_drop_factor;
            for (auto& g : optim.param_groups()) static_cast<torch::optim::AdamWOptions&>(g.options()).lr(lr);
        }
        const std::size_t begin = static_cast<std::size_t>(pos) * bs;
        const std::size_t end = std::min(order.size(), begin + bs);
        const Batch batch =
            make_batch(train, std::span<const Sample>(order.data() + begin, end - begin), spec.window);

        if (extra_step) extra_step(batch);
        optim.zero_grad();
        StepLosses losses;
        try {
            losses = step_fn(batch, step);
        } catch (const DivergenceError& e) {
            json dump{{"role", spec.role}, {"step", step}, {"error", e.what()}, {"samples", json::array()}};
            for (const Sample& s : batch.samples)
                dump["samples"].push_back({{"clip", train.clips()[s.clip].clip_id}, {"frame", s.frame}});
            if (!opt.out_dir.empty()) write_json(opt.out_dir / "divergence_dump.json", dump);
            throw DivergenceError(spec.role + " diverged at step " + std::to_string(step) + ": " + e.what());
        }
        losses.total.backward();
        if (opt.after_backward) opt.after_backward(step);
        torch::nn::utils::clip_grad_norm_(spec.params, cfg.train.grad_clip);
        optim.step();

        const LossBreakdown& p = losses.parts;
        log << json{{"step", step}, {"l_det", p.l_det}, {"l_bk", p.l_bk}, {"l_qe", p.l_qe},
                    {"total", p.total}, {"lr", lr}}
                   .dump()
            << '\n';
        if (opt.on_step) opt.on_step(step, p);
        if (opt.verbose && (step % 25 == 0 || step + 1 == total))
            std::cerr << spec.role << " step " << step + 1 << "/" << total << " l_det=" << p.l_det
                      << " l_bk=" << p.l_bk << " l_qe=" << p.l_qe << " total=" << p.total << '\n';
    }
    return total;
}

std::vector<torch::Tensor> trainable(torch::nn::Module& m) {
    std::vector<torch::Tensor> out;
    for (auto& p : m.parameters())
        if (p.requires_grad()) out.push_back(p);
    return out;
}

RunResult finish_run(detr::DetectorImpl& model, const std::string& role, const data::Dataset& train,
                     const ExperimentConfig& cfg, const RunOptions& opt, const std::filesystem::path& log, int steps) {
    model.eval();
    RunResult r;
    r.log = log;
    r.steps = steps;
    r.metrics = json{{"role", role}, {"seed", cfg.seed}, {"config_hash", cfg.hash()}, {"steps", steps}};
    r.metrics["train"] = to_json(evaluate_model(model, train, cfg.eval));
    if (opt.validation != nullptr) r.metrics["val"] = to_json(evaluate_model(model, *opt.validation, cfg.eval));
    r.parameter_checksum = parameter_checksum(model);
    r.metrics["parameter_checksum"] = r.parameter_checksum;
    if (!opt.out_dir.empty()) {
        r.checkpoint = opt.out_dir / (role + ".ckpt");
        save_checkpoint(r.checkpoint, {role, model.config(), cfg.hash(), cfg.seed, r.metrics}, model);
        write_json(opt.out_dir / "metrics.json", r.metrics);
    }
    return r;
}

std::filesystem::path prepare_out(const RunOptions& opt) {
    if (opt.out_dir.empty()) return "/dev/null";
    std::filesystem::create_directories(opt.out_dir);
    return opt.out_dir / "train_log.jsonl";
}

}  // namespace

void seed_everything(std::uint64_t seed) {
    torch::set_num_threads(1);
    at::globalContext().setDeterministicAlgorithms(true, false);
    torch::manual_seed(seed);
}

RunResult train_teacher(const data::Dataset& train, const ExperimentConfig& cfg, const RunOptions& opt) {
    cfg.validate();
    const auto log = prepare_out(opt);
    seed_everything(cfg.stream_seed(kTeacherInit));
    detr::Detector teacher(cfg.teacher_model());
    teacher->train();
    const int epochs = cfg.teacher.epochs > 0 ? cfg.teacher.epochs : cfg.train.epochs;
    LoopSpec spec{"teacher", trainable(*teacher), cfg.stream_seed(kTeacherOrder), cfg.train.T, epochs};
    const int steps = run_loop(
        train, cfg, spec, [&](const Batch& b, int) { return teacher_losses(*teacher, b, cfg); }, opt, log);
    return finish_run(*teacher, "teacher", train, cfg, opt, log, steps);
}

RunResult distill_student(const data::Dataset& train, detr::Detector teacher, const ExperimentConfig& cfg,
                          const RunOptions& opt) {
    cfg.validate();
    const bool needs_teacher = cfg.distill.tfd || cfg.distill.cqd || cfg.teacher.trainable;
    const auto smodel = cfg.student_model();
    if (needs_teacher) {
        if (teacher.is_empty()) throw ConfigError("distillation needs a teacher checkpoint");
        const auto& tm = teacher->config();
        if (tm.d != smodel.d || tm.num_queries != smodel.num_queries)
            throw ConfigError("teacher checkpoint is incompatible: d=" + std::to_string(tm.d) +
                              " N=" + std::to_string(tm.num_queries) + ", expected d=" + std::to_string(smodel.d) +
                              " N=" + std::to_string(smodel.num_queries));
        if (tm.msi && tm.frames != cfg.train.T)
            throw ConfigError("teacher window length " + std::to_string(tm.frames) + " differs from train.T");
    }
    const auto log = prepare_out(opt);

    std::unique_ptr<torch::optim::AdamW> teacher_optim;
    if (needs_teacher) {
        if (cfg.teacher.trainable) {
            teacher->train();
            teacher_optim = std::make_unique<torch::optim::AdamW>(
                teacher->parameters(), torch::optim::AdamWOptions(cfg.train.lr).weight_decay(cfg.train.weight_decay));
        } else {
            teacher->eval();
            for (auto& p : teacher->parameters()) p.set_requires_grad(false);
        }
    }

    seed_everything(cfg.stream_seed(kStudentInit));
    detr::Detector student(smodel);
    student->train();
    LoopSpec spec{"student", trainable(*student), cfg.stream_seed(kStudentOrder), cfg.train.T, cfg.train.epochs};
    const std::uint64_t selection_root = cfg.stream_seed(kSelection);
    auto step_fn = [&](const Batch& b, int step) {
        detr::DetectorImpl& t = needs_teacher ? *teacher : *student;
        return student_losses(*student, t, b, cfg, derive_seed(selection_root, static_cast<std::uint64_t>(step)));
    };
    std::function<void(const Batch&)> teacher_step;
    if (teacher_optim) {
        teacher_step = [&](const Batch& b) {
            teacher_optim->zero_grad();
            auto l = teacher_losses(*teacher, b, cfg);
            l.total.backward();
            torch::nn::utils::clip_grad_norm_(teacher->parameters(), cfg.train.grad_clip);
            teacher_optim->step();
        };
    }
    const int steps = run_loop(train, cfg, spec, step_fn, opt, log, teacher_step);
    return finish_run(*student, "student", train, cfg, opt, log, steps);
}

RunResult distill_student(const data::Dataset& train, const std::filesystem::path& teacher_ckpt,
                          const ExperimentConfig& cfg, const RunOptions& opt) {
    const bool needs_teacher = cfg.distill.tfd || cfg.distill.cqd || cfg.teacher.trainable;
    detr::Detector teacher{nullptr};
    if (needs_teacher) {
        if (teacher_ckpt.empty()) throw ConfigError("distillation needs a teacher checkpoint");
        CheckpointHeader head;
        teacher = load_detector(teacher_ckpt, &head);
        if (head.role != "teacher") throw ConfigError(teacher_ckpt.string() + " is not a teacher checkpoint");
    }
    return distill_student(train, teacher, cfg, opt);
}

namespace {

// Thresholded, score-sorted detections of batch entry b.
std::vector<eval::Detection> select_detections(const detr::DetectionSet& det, std::int64_t b, double W, double H,
                                               double score_thresh, int top_k) {
    auto [score, label] = det.scores();
    auto sc = score[b].to(torch::kFloat64).contiguous();
    auto lb = label[b].to(torch::kLong).contiguous();
    auto bx = det.boxes[b].to(torch::kFloat64).contiguous();
    const double* sp = sc.data_ptr<double>();
    const double* bp = bx.data_ptr<double>();
    const std::int64_t* lp = lb.data_ptr<std::int64_t>();
    std::vector<std::int64_t> order(sc.size(0));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto x, auto y) { return sp[x] > sp[y]; });
    std::vector<eval::Detection> dets;
    for (std::int64_t i : order) {
        if (static_cast<int>(dets.size()) >= top_k || sp[i] < score_thresh) break;
        const double* q = bp + 4 * i;
        dets.push_back({Box{q[0], q[1], q[2], q[3]}.to_pixels(W, H), sp[i], static_cast<int>(lp[i])});
    }
    return dets;
}

}  // namespace

std::vector<eval::Detection> inference(detr::DetectorImpl& model, const torch::Tensor& input, int current,
                                       double score_thresh, int top_k) {
    torch::NoGradGuard guard;
    torch::Tensor windows;
    if (model.config().msi) {
        if (input.dim() != 4) throw ShapeError("video model expects a [T, C, H, W] window");
        windows = input.unsqueeze(0);
    } else {
        if (input.dim() != 3) throw ShapeError("image model expects a [C, H, W] image");
        windows = input.unsqueeze(0).unsqueeze(0);
        current = 0;
    }
    auto out = model.forward_window(windows, {current});
    return select_detections(out.detections.back(), 0, static_cast<double>(input.size(-1)),
                             static_cast<double>(input.size(-2)), score_thresh, top_k);
}

std::vector<eval::FrameRecord> predict_dataset(detr::DetectorImpl& model, const data::Dataset& dataset,
                                               double score_thresh, int top_k) {
    torch::NoGradGuard guard;
    const bool was_training = model.is_training();
    model.eval();
    const int T = model.config().msi ? model.config().frames : 1;
    const std::vector<Sample> samples = all_samples(dataset);
    std::vector<eval::FrameRecord> records;
    constexpr std::size_t kChunk = 16;
    for (std::size_t begin = 0; begin < samples.size(); begin += kChunk) {
        const std::size_t end = std::min(samples.size(), begin + kChunk);
        const Batch batch = make_batch(dataset, std::span<const Sample>(samples.data() + begin, end - begin), T);
        const auto out = model.forward_window(batch.windows, batch.current);
        for (std::size_t i = 0; i < batch.samples.size(); ++i) {
            const Sample s = batch.samples[i];
            const data::VideoClip& clip = dataset.clips()[s.clip];
            eval::FrameRecord rec;
            rec.clip_id = clip.clip_id;
            rec.frame = s.frame;
            rec.detections = select_detections(out.detections.back(), static_cast<std::int64_t>(i), clip.width,
                                               clip.height, score_thresh, top_k);
            for (const data::Annotation& a : clip.annotations[s.frame]) rec.truths.push_back({a.box, a.class_id});
            records.push_back(std::move(rec));
        }
    }
    if (was_training) model.train();
    return records;
}

eval::EvalResult evaluate_model(detr::DetectorImpl& model, const data::Dataset& dataset, const EvalConfig& ev) {
    // AP needs the full score range, so predictions are kept down to zero.
    const auto records = predict_dataset(model, dataset, 0.0, ev.top_k);
    return eval::evaluate(records, ev.iou_thresh, ev.score_thresh, ev.rule);
}

json to_json(const eval::EvalResult& r, bool per_clip) {
    json j{{"precision", r.precision}, {"recall", r.recall}, {"f1", r.f1},
           {"ap", r.ap}, {"ap50", r.ap50}, {"ap75", r.ap75},
           {"best_f1", r.best_f1}, {"best_threshold", r.best_threshold},
           {"tp", r.counts.tp}, {"fp", r.counts.fp}, {"fn", r.counts.fn}};
    if (per_clip) {
        j["per_clip"] = json::array();
        for (const auto& c : r.per_clip)
            j["per_clip"].push_back({{"clip", c.clip_id}, {"precision", c.precision}, {"recall", c.recall},
                                     {"f1", c.f1}, {"tp", c.counts.tp}, {"fp", c.counts.fp}, {"fn", c.counts.fn}});
    }
    return j;
}

}  // namespace v2i::train
