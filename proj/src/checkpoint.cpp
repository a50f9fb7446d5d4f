#include "v2i/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iterator>

#include "v2i/errors.hpp"
#include "v2i/hash.hpp"

namespace v2i {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'V', '2', 'I', 'C', 'K', 'P', 'T', '1'};

template <typename T>
void put(std::string& buf, T v) {
    buf.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

class Reader {
public:
    Reader(const std::string& buf, std::string path) : buf_(buf), path_(std::move(path)) {}

    template <typename T>
    T get() {
        T v;
        std::memcpy(&v, take(sizeof(T)), sizeof(T));
        return v;
    }
    std::string str(std::size_t n) { return {take(n), n}; }
    const char* take(std::size_t n) {
        if (pos_ + n > buf_.size()) throw IoError(path_, "checkpoint is truncated");
        const char* p = buf_.data() + pos_;
        pos_ += n;
        return p;
    }

private:
    const std::string& buf_;
    std::string path_;
    std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const CheckpointHeader& header, torch::nn::Module& module) {
    std::string buf(kMagic, sizeof(kMagic));
    const std::string head = json{{"role", header.role},
                                  {"model", header.model},
                                  {"config_hash", header.config_hash},
                                  {"seed", header.seed},
                                  {"metrics", header.metrics}}
                                 .dump();
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(head.size()));
    buf += head;
    const auto params = module.named_parameters(true);
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(params.size()));
    for (const auto& item : params) {
        auto t = item.value().detach().to(torch::kFloat32).contiguous();
        put<std::uint32_t>(buf, static_cast<std::uint32_t>(item.key().size()));
        buf += item.key();
        put<std::uint32_t>(buf, static_cast<std::uint32_t>(t.dim()));
        for (auto s : t.sizes()) put<std::int64_t>(buf, s);
        buf.append(reinterpret_cast<const char*>(t.data_ptr<float>()), t.numel() * sizeof(float));
    }
    put<std::uint64_t>(buf, fnv1a64(buf));

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw IoError(tmp, "cannot open for writing");
        out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (!out) throw IoError(tmp, "write failed");
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(path.string(), "cannot open checkpoint");
    const std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < sizeof(kMagic) + 8 || std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0)
        throw IoError(path.string(), "not a checkpoint file");
    std::uint64_t stored;
    std::memcpy(&stored, buf.data() + buf.size() - 8, 8);
    if (fnv1a64(std::string_view(buf.data(), buf.size() - 8)) != stored)
        throw IoError(path.string(), "checkpoint checksum mismatch");

    Reader r(buf, path.string());
    r.take(sizeof(kMagic));
    Checkpoint ck;
    try {
        const json head = json::parse(r.str(r.get<std::uint32_t>()));
        ck.header.role = head.at("role").get<std::string>();
        ck.header.model = head.at("model").get<detr::ModelConfig>();
        ck.header.config_hash = head.at("config_hash").get<std::uint64_t>();
        ck.header.seed = head.at("seed").get<std::uint64_t>();
        ck.header.metrics = head.at("metrics");
    } catch (const json::exception& e) {
        throw IoError(path.string(), std::string("bad checkpoint header: ") + e.what());
    }
    const auto count = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = r.str(r.get<std::uint32_t>());
        const auto ndim = r.get<std::uint32_t>();
        std::vector<std::int64_t> dims(ndim);
        std::int64_t numel = 1;
        for (auto& d : dims) numel *= (d = r.get<std::int64_t>());
        const char* data = r.take(static_cast<std::size_t>(numel) * sizeof(float));
        auto t = torch::empty(dims, torch::kFloat32);
        std::memcpy(t.data_ptr<float>(), data, static_cast<std::size_t>(numel) * sizeof(float));
        ck.tensors.emplace_back(std::move(name), t);
    }
    return ck;
}

void load_into(const Checkpoint& ckpt, torch::nn::Module& module) {
    auto params = module.named_parameters(true);
    if (params.size() != ckpt.tensors.size())
        throw ConfigError("checkpoint holds " + std::to_string(ckpt.tensors.size()) + " tensors, model expects " +
                          std::to_string(params.size()));
    torch::NoGradGuard guard;
    for (const auto& [name, t] : ckpt.tensors) {
        auto* p = params.find(name);
        if (p == nullptr) throw ConfigError("checkpoint tensor '" + name + "' has no matching parameter");
        if (!p->sizes().equals(t.sizes())) throw ConfigError("shape mismatch for '" + name + "'");
        p->copy_(t);
    }
}

detr::Detector load_detector(const std::filesystem::path& path, CheckpointHeader* header) {
    const Checkpoint ck = read_checkpoint(path);
    detr::Detector model(ck.header.model);
    load_into(ck, *model);
    model->eval();
    if (header != nullptr) *header = ck.header;
    return model;
}

std::uint64_t parameter_checksum(torch::nn::Module& module) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& item : module.named_parameters(true)) {
        h = fnv1a64(item.key(), h);
        auto t = item.value().detach().to(torch::kFloat32).contiguous();
        h = fnv1a64({reinterpret_cast<const unsigned char*>(t.data_ptr<float>()), t.numel() * sizeof(float)}, h);
    }
    return h;
}

}  // namespace v2i
