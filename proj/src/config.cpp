#include "v2i/config.hpp"

#include <fstream>

#include "v2i/errors.hpp"
#include "v2i/hash.hpp"

namespace v2i {

using nlohmann::json;

NLOHMANN_JSON_SERIALIZE_ENUM(FdVariant, {{FdVariant::vanilla, "vanilla"},
                                         {FdVariant::gt_hard_mask, "gt_hard_mask"},
                                         {FdVariant::attention_mask, "attention_mask"},
                                         {FdVariant::gaussian_soft, "gaussian_soft"}})

}  // namespace v2i

namespace v2i::tfd {
NLOHMANN_JSON_SERIALIZE_ENUM(SigmaMode, {{SigmaMode::anisotropic, "anisotropic"}, {SigmaMode::isotropic, "isotropic"}})
NLOHMANN_JSON_SERIALIZE_ENUM(FdNorm, {{FdNorm::l1, "l1"}, {FdNorm::l2, "l2"}})
}  // namespace v2i::tfd

namespace v2i::cqd {
NLOHMANN_JSON_SERIALIZE_ENUM(CountMode, {{CountMode::floor_NT, "floor_NT"},
                                         {CountMode::all_TN, "all_TN"},
                                         {CountMode::half_TN, "half_TN"}})
}  // namespace v2i::cqd

namespace v2i::eval {
NLOHMANN_JSON_SERIALIZE_ENUM(MatchRule, {{MatchRule::iou, "iou"}, {MatchRule::centroid_in_box, "centroid_in_box"}})
}  // namespace v2i::eval

namespace v2i {

namespace {

void check_keys(const json& given, const json& reference, const std::string& path) {
    if (!given.is_object()) return;
    for (const auto& [key, value] : given.items()) {
        const std::string where = path.empty() ? key : path + "." + key;
        if (!reference.contains(key)) throw ConfigError("unknown config key: " + where);
        if (value.is_object() && reference.at(key).is_object()) check_keys(value, reference.at(key), where);
    }
}

template <typename E>
E enum_value(const json& j, const char* key, E fallback) {
    if (!j.contains(key)) return fallback;
    const json& v = j.at(key);
    const E parsed = v.get<E>();
    // Unrecognised strings map to the first enumerator; catch that here.
    if (json(parsed) != v) throw ConfigError(std::string("invalid value for ") + key + ": " + v.dump());
    return parsed;
}

}  // namespace

std::string to_string(FdVariant v) { return json(v).get<std::string>(); }
std::string to_string(cqd::CountMode m) { return json(m).get<std::string>(); }

void to_json(json& j, const ExperimentConfig& c) {
    json data = c.data;
    data.erase("seed");
    data["test_clips"] = c.test_clips;
    json model = c.model;
    for (const char* derived : {"num_queries", "frames", "msi"}) model.erase(derived);
    j = json{
        {"seed", c.seed},
        {"data", data},
        {"model", model},
        {"train",
         {{"lr", c.train.lr},
          {"weight_decay", c.train.weight_decay},
          {"batch_size", c.train.batch_size},
          {"epochs", c.train.epochs},
          {"max_steps", c.train.max_steps},
          {"T", c.train.T},
          {"N", c.train.N},
          {"grad_clip", c.train.grad_clip},
          {"lr_drop_at", c.train.lr_drop_at},
          {"lr_drop_factor", c.train.lr_drop_factor},
          {"aux_loss", c.train.aux_loss},
          {"cost_class", c.train.loss.cls},
          {"cost_l1", c.train.loss.l1},
          {"cost_giou", c.train.loss.giou},
          {"eos_coef", c.train.loss.eos}}},
        {"distill",
         {{"lambda_bk", c.distill.lambda_bk},
          {"lambda_qe", c.distill.lambda_qe},
          {"tfd", c.distill.tfd},
          {"cqd", c.distill.cqd},
          {"fd_variant", c.distill.fd_variant},
          {"sigma_mode", c.distill.sigma_mode},
          {"vanilla_norm", c.distill.vanilla_norm},
          {"count_mode", c.distill.count_mode}}},
        {"teacher", {{"msi", c.teacher.msi}, {"trainable", c.teacher.trainable}, {"epochs", c.teacher.epochs}}},
        {"eval",
         {{"iou_thresh", c.eval.iou_thresh},
          {"score_thresh", c.eval.score_thresh},
          {"top_k", c.eval.top_k},
          {"rule", c.eval.rule}}},
    };
}

void from_json(const json& j, ExperimentConfig& c) {
    const ExperimentConfig d;
    check_keys(j, json(d), "");
    try {
        c.seed = j.value("seed", d.seed);
        const json data = j.value("data", json::object());
        c.data = data.get<data::GeneratorConfig>();
        c.test_clips = data.value("test_clips", d.test_clips);
        c.model = j.value("model", json::object()).get<detr::ModelConfig>();

        const json t = j.value("train", json::object());
        c.train.lr = t.value("lr", d.train.lr);
        c.train.weight_decay = t.value("weight_decay", d.train.weight_decay);
        c.train.batch_size = t.value("batch_size", d.train.batch_size);
        c.train.epochs = t.value("epochs", d.train.epochs);
        c.train.max_steps = t.value("max_steps", d.train.max_steps);
        c.train.T = t.value("T", d.train.T);
        c.train.N = t.value("N", d.train.N);
        c.train.grad_clip = t.value("grad_clip", d.train.grad_clip);
        c.train.lr_drop_at = t.value("lr_drop_at", d.train.lr_drop_at);
        c.train.lr_drop_factor = t.value("lr_drop_factor", d.train.lr_drop_factor);
        c.train.aux_loss = t.value("aux_loss", d.train.aux_loss);
        c.train.loss.cls = t.value("cost_class", d.train.loss.cls);
        c.train.loss.l1 = t.value("cost_l1", d.train.loss.l1);
        c.train.loss.giou = t.value("cost_giou", d.train.loss.giou);
        c.train.loss.eos = t.value("eos_coef", d.train.loss.eos);

        const json ds = j.value("distill", json::object());
        c.distill.lambda_bk = ds.value("lambda_bk", d.distill.lambda_bk);
        c.distill.lambda_qe = ds.value("lambda_qe", d.distill.lambda_qe);
        c.distill.tfd = ds.value("tfd", d.distill.tfd);
        c.distill.cqd = ds.value("cqd", d.distill.cqd);
        c.distill.fd_variant = enum_value(ds, "fd_variant", d.distill.fd_variant);
        c.distill.sigma_mode = enum_value(ds, "sigma_mode", d.distill.sigma_mode);
        c.distill.vanilla_norm = enum_value(ds, "vanilla_norm", d.distill.vanilla_norm);
        c.distill.count_mode = enum_value(ds, "count_mode", d.distill.count_mode);

        const json te = j.value("teacher", json::object());
        c.teacher.msi = te.value("msi", d.teacher.msi);
        c.teacher.trainable = te.value("trainable", d.teacher.trainable);
        c.teacher.epochs = te.value("epochs", d.teacher.epochs);

        const json ev = j.value("eval", json::object());
        c.eval.iou_thresh = ev.value("iou_thresh", d.eval.iou_thresh);
        c.eval.score_thresh = ev.value("score_thresh", d.eval.score_thresh);
        c.eval.top_k = ev.value("top_k", d.eval.top_k);
        c.eval.rule = enum_value(ev, "rule", d.eval.rule);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed config: ") + e.what());
    }
    c.data.seed = c.stream_seed(0);
    c.model.num_queries = c.train.N;
}

void ExperimentConfig::validate() const {
    data.validate();
    if (test_clips < 0) throw ConfigError("data: test_clips must be >= 0");
    if (train.T < 1) throw ConfigError("train: T must be >= 1");
    if (train.N < train.T) throw ConfigError("train: N must be >= T");
    if (train.batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (train.epochs < 1 && train.max_steps < 1) throw ConfigError("train: need epochs or max_steps");
    if (teacher.epochs < 0) throw ConfigError("teacher: epochs must be >= 0");
    if (!(train.lr > 0)) throw ConfigError("train: lr must be positive");
    if (distill.lambda_bk < 0 || distill.lambda_qe < 0) throw ConfigError("distill: lambdas must be >= 0");
    if (model.in_channels != data.channels)
        throw ConfigError("model.in_channels must equal data.channels");
    if (model.num_classes != data.num_classes)
        throw ConfigError("model.num_classes must equal data.num_classes");
    if (data.height % 32 != 0 || data.width % 32 != 0)
        throw ConfigError("data: height and width must be divisible by 32");
    teacher_model().validate();
    student_model().validate();
}

std::uint64_t ExperimentConfig::hash() const { return fnv1a64(json(*this).dump()); }

std::uint64_t ExperimentConfig::stream_seed(std::uint64_t stream) const { return derive_seed(seed, stream); }

detr::ModelConfig ExperimentConfig::teacher_model() const {
    detr::ModelConfig m = model;
    m.num_queries = train.N;
    m.msi = teacher.msi;
    m.frames = teacher.msi ? train.T : 1;
    return m;
}

detr::ModelConfig ExperimentConfig::student_model() const {
    detr::ModelConfig m = model;
    m.num_queries = train.N;
    m.msi = false;
    m.frames = 1;
    return m;
}

void apply_override(json& doc, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: " + assignment);
    const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::exception&) {
        value = raw;
    }
    json* node = &doc;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) throw ConfigError("empty path component in override: " + key);
        if (!node->is_object()) *node = json::object();
        if (dot == std::string::npos) {
            (*node)[part] = value;
            return;
        }
        node = &(*node)[part];
        start = dot + 1;
    }
}

ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
    json doc = json::object();
    if (!path.empty()) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot read config file " + path.string());
        try {
            in >> doc;
        } catch (const json::exception& e) {
            throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
        }
    }
    for (const std::string& o : overrides) apply_override(doc, o);
    ExperimentConfig cfg = doc.get<ExperimentConfig>();
    cfg.validate();
    return cfg;
}

}  // namespace v2i
