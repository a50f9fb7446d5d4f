#include "v2i/detr.hpp"

#include "v2i/errors.hpp"
#include "v2i/hash.hpp"

namespace v2i::detr {

using nlohmann::json;

void to_json(json& j, const ModelConfig& c) {
    j = json{{"in_channels", c.in_channels},
             {"d", c.d},
             {"num_queries", c.num_queries},
             {"num_classes", c.num_classes},
             {"enc_layers", c.enc_layers},
             {"dec_layers", c.dec_layers},
             {"heads", c.heads},
             {"ffn_mult", c.ffn_mult},
             {"widths", c.widths},
             {"decoder_self_attn", c.decoder_self_attn},
             {"msi", c.msi},
             {"frames", c.frames},
             {"msi_layers", c.msi_layers},
             {"msi_heads", c.msi_heads},
             {"msi_ffn_residual", c.msi_ffn_residual},
             {"msi_token_cap", c.msi_token_cap}};
}

void from_json(const json& j, ModelConfig& c) {
    const ModelConfig d;
    c.in_channels = j.value("in_channels", d.in_channels);
    c.d = j.value("d", d.d);
    c.num_queries = j.value("num_queries", d.num_queries);
    c.num_classes = j.value("num_classes", d.num_classes);
    c.enc_layers = j.value("enc_layers", d.enc_layers);
    c.dec_layers = j.value("dec_layers", d.dec_layers);
    c.heads = j.value("heads", d.heads);
    c.ffn_mult = j.value("ffn_mult", d.ffn_mult);
    c.widths = j.value("widths", d.widths);
    c.decoder_self_attn = j.value("decoder_self_attn", d.decoder_self_attn);
    c.msi = j.value("msi", d.msi);
    c.frames = j.value("frames", d.frames);
    c.msi_layers = j.value("msi_layers", d.msi_layers);
    c.msi_heads = j.value("msi_heads", d.msi_heads);
    c.msi_ffn_residual = j.value("msi_ffn_residual", d.msi_ffn_residual);
    c.msi_token_cap = j.value("msi_token_cap", d.msi_token_cap);
}

void ModelConfig::validate() const {
    if (in_channels < 1) throw ConfigError("model: in_channels must be >= 1");
    if (d < 8 || d % heads != 0 || d % msi_heads != 0)
        throw ConfigError("model: d must be >= 8 and divisible by the head counts");
    if (num_queries < 1) throw ConfigError("model: num_queries must be >= 1");
    if (num_classes < 1) throw ConfigError("model: num_classes must be >= 1");
    if (enc_layers < 0 || dec_layers < 1) throw ConfigError("model: invalid layer counts");
    if (frames < 1) throw ConfigError("model: frames must be >= 1");
    if (msi_layers < 1) throw ConfigError("model: msi_layers must be >= 1");
    for (int w : widths)
        if (w < 8 || w % 8 != 0) throw ConfigError("model: backbone widths must be multiples of 8");
}

std::uint64_t ModelConfig::hash() const { return fnv1a64(json(*this).dump()); }

msi::MsiOptions ModelConfig::msi_options() const {
    return {d, msi_layers, msi_heads, ffn_mult, msi_ffn_residual, msi_token_cap};
}

std::pair<torch::Tensor, torch::Tensor> DetectionSet::scores() const {
    auto prob = torch::softmax(class_logits, -1);
    auto fg = prob.narrow(-1, 0, prob.size(-1) - 1);
    auto [score, label] = fg.max(-1);
    return {score, label};
}

ConvBlockImpl::ConvBlockImpl(int in, int out, int stride) {
    conv = register_module(
        "conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(false)));
    norm = register_module("norm", torch::nn::GroupNorm(torch::nn::GroupNormOptions(8, out)));
}

torch::Tensor ConvBlockImpl::forward(const torch::Tensor& x) { return torch::relu(norm(conv(x))); }

BackboneImpl::BackboneImpl(const ModelConfig& cfg) {
    const int stem_width = cfg.widths[0] / 2 < 8 ? 8 : cfg.widths[0] / 2;
    stem = register_module("stem", ConvBlock(cfg.in_channels, stem_width, 2));
    int in = stem_width;
    for (int l = 0; l < 4; ++l) {
        const std::string s = std::to_string(l);
        down[l] = register_module("down" + s, ConvBlock(in, cfg.widths[l], 2));
        refine[l] = register_module("refine" + s, ConvBlock(cfg.widths[l], cfg.widths[l], 1));
        proj[l] = register_module("proj" + s, torch::nn::Conv2d(torch::nn::Conv2dOptions(cfg.widths[l], cfg.d, 1)));
        in = cfg.widths[l];
    }
}

std::vector<torch::Tensor> BackboneImpl::stages(const torch::Tensor& image) {
    if (image.dim() != 4) throw ShapeError("backbone expects [B, C, H, W]");
    if (image.size(2) % 32 != 0 || image.size(3) % 32 != 0)
        throw ShapeError("backbone input height and width must be divisible by 32, got " +
                         std::to_string(image.size(2)) + "x" + std::to_string(image.size(3)));
    std::vector<torch::Tensor> out;
    auto x = stem(image);
    for (int l = 0; l < 4; ++l) {
        auto y = down[l](x);
        x = y + refine[l](y);
        out.push_back(x);
    }
    return out;
}

FeaturePyramid BackboneImpl::forward(const torch::Tensor& image) {
    const bool single = image.dim() == 3;
    auto s = stages(single ? image.unsqueeze(0) : image);
    FeaturePyramid p;
    for (int l = 0; l < 4; ++l) {
        p.levels[l] = proj[l](s[l]);
        if (single) p.levels[l] = p.levels[l].squeeze(0);
    }
    return p;
}

torch::Tensor BackboneImpl::forward_last(const torch::Tensor& image) {
    return proj[3](stages(image)[3]);
}

EncoderLayerImpl::EncoderLayerImpl(int d, int heads, int hidden) {
    attn = register_module("attn", Attention(d, heads));
    ffn = register_module("ffn", FeedForward(d, hidden));
    norm1 = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));
    norm2 = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));
}

torch::Tensor EncoderLayerImpl::forward(const torch::Tensor& x) {
    auto y = norm1(x + attn(x, x, x));
    return norm2(y + ffn(y));
}

EncoderImpl::EncoderImpl(int d, int heads, int hidden, int layers) : d_(d) {
    layers_ = register_module("layers", torch::nn::ModuleList());
    for (int i = 0; i < layers; ++i) layers_->push_back(EncoderLayer(d, heads, hidden));
}

torch::Tensor EncoderImpl::forward(const torch::Tensor& level3) {
    auto x = level3.dim() == 3 ? level3.unsqueeze(0) : level3;
    if (x.dim() != 4 || x.size(1) != d_) throw ShapeError("encoder expects a [B, d, h, w] level");
    auto tokens = x.flatten(2).transpose(1, 2);
    tokens = tokens + sine_position_2d(x.size(2), x.size(3), d_).to(tokens.dtype()).unsqueeze(0);
    for (const auto& m : *layers_) tokens = m->as<EncoderLayer>()->forward(tokens);
    return tokens;
}

DecoderLayerImpl::DecoderLayerImpl(int d, int heads, int hidden, bool self_attn) {
    if (self_attn) {
        self_attn_ = register_module("self_attn", Attention(d, heads));
        norm0 = register_module("norm0", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));
    }
    cross_attn = register_module("cross_attn", Attention(d, heads));
    ffn = register_module("ffn", FeedForward(d, hidden));
    norm1 = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));
    norm2 = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));
}

torch::Tensor DecoderLayerImpl::forward(const torch::Tensor& tgt, const torch::Tensor& query_pos,
                                        const torch::Tensor& memory) {
    auto x = tgt;
    if (!self_attn_.is_empty()) {
        auto q = x + query_pos;
        x = norm0(x + self_attn_(q, q, x));
    }
    x = norm1(x + cross_attn(x + query_pos, memory, memory));
    return norm2(x + ffn(x));
}

DecoderImpl::DecoderImpl(int d, int heads, int hidden, int layers, bool self_attn) {
    layers_ = register_module("layers", torch::nn::ModuleList());
    for (int i = 0; i < layers; ++i) layers_->push_back(DecoderLayer(d, heads, hidden, self_attn));
    norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));
}

std::vector<torch::Tensor> DecoderImpl::forward(const torch::Tensor& queries, const torch::Tensor& memory) {
    if (memory.dim() != 3) throw ShapeError("decoder memory must be [B, S, d]");
    if (queries.size(-1) != memory.size(2))
        throw ShapeError("decoder query width " + std::to_string(queries.size(-1)) +
                         " does not match memory width " + std::to_string(memory.size(2)));
    if (queries.size(-2) < 1) throw ShapeError("decoder needs at least one query");
    auto pos = queries.dim() == 2 ? queries.unsqueeze(0).expand({memory.size(0), -1, -1}) : queries;
    auto x = torch::zeros_like(pos);
    std::vector<torch::Tensor> outs;
    for (const auto& m : *layers_) {
        x = m->as<DecoderLayer>()->forward(x, pos, memory);
        outs.push_back(norm(x));
    }
    return outs;
}

HeadsImpl::HeadsImpl(int d, int num_classes) {
    cls = register_module("cls", torch::nn::Linear(d, num_classes + 1));
    box1 = register_module("box1", torch::nn::Linear(d, d));
    box2 = register_module("box2", torch::nn::Linear(d, d));
    box3 = register_module("box3", torch::nn::Linear(d, 4));
}

DetectionSet HeadsImpl::forward(const torch::Tensor& decoded) {
    auto h = torch::relu(box1(decoded));
    h = torch::relu(box2(h));
    return {torch::sigmoid(box3(h)), cls(decoded)};
}

DetectorImpl::DetectorImpl(const ModelConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    const int hidden = cfg.d * cfg.ffn_mult;
    backbone = register_module("backbone", Backbone(cfg));
    encoder = register_module("encoder", Encoder(cfg.d, cfg.heads, hidden, cfg.enc_layers));
    decoder = register_module("decoder", Decoder(cfg.d, cfg.heads, hidden, cfg.dec_layers, cfg.decoder_self_attn));
    heads = register_module("heads", Heads(cfg.d, cfg.num_classes));
    query_embed = register_parameter("query_embed", torch::randn({cfg.num_queries, cfg.d}));
    if (cfg.msi) {
        interaction = register_module("msi", msi::Msi(cfg.msi_options()));
        frame_embed = register_parameter("frame_embed", torch::randn({cfg.frames, cfg.d}) * 0.5);
    }
}

torch::Tensor DetectorImpl::slot_queries(int slot) const {
    if (frame_embed.defined()) return query_embed + frame_embed[slot];
    return query_embed;
}

torch::Tensor DetectorImpl::all_slot_queries() const {
    if (frame_embed.defined()) return query_embed.unsqueeze(0) + frame_embed.unsqueeze(1);
    return query_embed.unsqueeze(0);
}

std::vector<torch::Tensor> DetectorImpl::decode(const torch::Tensor& queries, const torch::Tensor& memory) {
    return decoder(queries, memory);
}

ForwardOutput DetectorImpl::finish(torch::Tensor level3, torch::Tensor queries) {
    ForwardOutput out;
    out.level3 = std::move(level3);
    out.memory = encoder->forward(out.level3);
    out.decoded = decoder(queries, out.memory);
    for (const auto& d : out.decoded) out.detections.push_back(heads(d));
    return out;
}

ForwardOutput DetectorImpl::forward_image(const torch::Tensor& images) {
    if (images.dim() != 4) throw ShapeError("forward_image expects [B, C, H, W]");
    return finish(backbone->forward_last(images), query_embed);
}

msi::TemporalPyramid DetectorImpl::temporal_pyramid(const torch::Tensor& windows, bool enhance) {
    if (windows.dim() != 5) throw ShapeError("windows must be [B, T, C, H, W]");
    const auto B = windows.size(0), T = windows.size(1);
    auto pyramid = backbone(windows.flatten(0, 1));
    msi::TemporalPyramid tp;
    for (int l = 0; l < 4; ++l) {
        auto lv = pyramid.levels[l];
        tp.levels[l] = lv.view({B, T, lv.size(1), lv.size(2), lv.size(3)}).permute({0, 2, 1, 3, 4});
    }
    if (enhance && !interaction.is_empty()) tp = interaction(tp);
    return tp;
}

ForwardOutput DetectorImpl::forward_window(const torch::Tensor& windows, const std::vector<int>& current) {
    if (windows.dim() != 5) throw ShapeError("windows must be [B, T, C, H, W]");
    const auto B = windows.size(0), T = windows.size(1);
    if (static_cast<std::int64_t>(current.size()) != B)
        throw ShapeError("one current index per window is required");
    auto idx = torch::tensor(std::vector<std::int64_t>(current.begin(), current.end()), torch::kLong);
    if (!cfg_.msi) {
        auto frames = windows.index({torch::arange(B), idx});
        auto out = finish(backbone->forward_last(frames), query_embed);
        out.frame_queries = all_slot_queries();
        return out;
    }
    if (T != cfg_.frames)
        throw ShapeError("teacher expects windows of " + std::to_string(cfg_.frames) + " frames, got " +
                         std::to_string(T));
    auto f3 = backbone->forward_last(windows.flatten(0, 1));
    f3 = f3.view({B, T, f3.size(1), f3.size(2), f3.size(3)}).permute({0, 2, 1, 3, 4});
    auto y3 = interaction->forward_level(3, f3);                    // [B, d, T, h, w]
    auto level3 = y3.permute({0, 2, 1, 3, 4}).index({torch::arange(B), idx});  // [B, d, h, w]
    auto queries = all_slot_queries().index({idx});                 // [B, N, d]
    auto out = finish(level3, queries);
    out.frame_queries = all_slot_queries();
    return out;
}

}  // namespace v2i::detr
