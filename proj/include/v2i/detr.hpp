#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "v2i/layers.hpp"
#include "v2i/msi.hpp"

namespace v2i::detr {

struct ModelConfig {
    int in_channels = 1;
    int d = 64;
    int num_queries = 100;
    int num_classes = 1;
    int enc_layers = 2;
    int dec_layers = 2;
    int heads = 8;
    int ffn_mult = 4;
    std::array<int, 4> widths{16, 32, 64, 128};
    // Restores query-query self-attention in the decoder. Off by default so
    // decoded rows depend only on their own query and the encoder tokens.
    bool decoder_self_attn = false;

    // Teacher-only: temporal window length and the interaction module.
    bool msi = false;
    int frames = 1;
    int msi_layers = 2;
    int msi_heads = 8;
    bool msi_ffn_residual = false;
    int msi_token_cap = 8192;

    void validate() const;
    std::uint64_t hash() const;
    msi::MsiOptions msi_options() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

inline constexpr std::array<int, 4> kStrides{4, 8, 16, 32};

// Four levels at strides {4, 8, 16, 32}, all projected to width d. Levels are
// [B, d, h, w] (or [d, h, w] for unbatched input).
struct FeaturePyramid {
    std::array<torch::Tensor, 4> levels;
    std::array<int, 4> strides = kStrides;
};

// boxes: [..., M, 4] normalized (cx, cy, w, h); class_logits: [..., M, K+1]
// with the last column the no-object class.
struct DetectionSet {
    torch::Tensor boxes;
    torch::Tensor class_logits;

    // Best foreground probability and its class per query.
    std::pair<torch::Tensor, torch::Tensor> scores() const;
};

class ConvBlockImpl : public torch::nn::Module {
public:
    ConvBlockImpl(int in, int out, int stride);
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::nn::Conv2d conv{nullptr};
    torch::nn::GroupNorm norm{nullptr};
};
TORCH_MODULE(ConvBlock);

// Strided convolutional backbone trained from scratch; width doubles per
// stage, then each stage output is projected to d with a 1x1 convolution.
class BackboneImpl : public torch::nn::Module {
public:
    explicit BackboneImpl(const ModelConfig& cfg);
    // image: [B, C, H, W] or [C, H, W]; H and W must be divisible by 32.
    FeaturePyramid forward(const torch::Tensor& image);
    // Level 3 only, skipping the unused projections.
    torch::Tensor forward_last(const torch::Tensor& image);

private:
    std::vector<torch::Tensor> stages(const torch::Tensor& x);

    ConvBlock stem{nullptr};
    std::array<ConvBlock, 4> down{nullptr, nullptr, nullptr, nullptr};
    std::array<ConvBlock, 4> refine{nullptr, nullptr, nullptr, nullptr};
    std::array<torch::nn::Conv2d, 4> proj{nullptr, nullptr, nullptr, nullptr};
};
TORCH_MODULE(Backbone);

class EncoderLayerImpl : public torch::nn::Module {
public:
    EncoderLayerImpl(int d, int heads, int hidden);
    torch::Tensor forward(const torch::Tensor& x);

private:
    Attention attn{nullptr};
    FeedForward ffn{nullptr};
    torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr};
};
TORCH_MODULE(EncoderLayer);

// Transformer encoder over the level-3 grid. Output is [B, h3*w3, d].
class EncoderImpl : public torch::nn::Module {
public:
    EncoderImpl(int d, int heads, int hidden, int layers);
    torch::Tensor forward(const torch::Tensor& level3);
    torch::Tensor forward(const FeaturePyramid& pyramid) { return forward(pyramid.levels[3]); }

private:
    int d_;
    torch::nn::ModuleList layers_;
};
TORCH_MODULE(Encoder);

class DecoderLayerImpl : public torch::nn::Module {
public:
    DecoderLayerImpl(int d, int heads, int hidden, bool self_attn);
    torch::Tensor forward(const torch::Tensor& tgt, const torch::Tensor& query_pos,
                          const torch::Tensor& memory);

private:
    Attention self_attn_{nullptr};
    Attention cross_attn{nullptr};
    FeedForward ffn{nullptr};
    torch::nn::LayerNorm norm0{nullptr}, norm1{nullptr}, norm2{nullptr};
};
TORCH_MODULE(DecoderLayer);

// Query decoder. Queries enter as positional embeddings re-added at every
// layer with a zero-initialized content stream. Returns the normed output of
// every layer, each [B, M, d].
class DecoderImpl : public torch::nn::Module {
public:
    DecoderImpl(int d, int heads, int hidden, int layers, bool self_attn);
    // queries: [B, M, d] or [M, d] (shared across the batch); memory: [B, S, d].
    std::vector<torch::Tensor> forward(const torch::Tensor& queries, const torch::Tensor& memory);

private:
    torch::nn::ModuleList layers_;
    torch::nn::LayerNorm norm{nullptr};
};
TORCH_MODULE(Decoder);

// Linear class head and 3-layer MLP box head with sigmoid output.
class HeadsImpl : public torch::nn::Module {
public:
    HeadsImpl(int d, int num_classes);
    DetectionSet forward(const torch::Tensor& decoded);

private:
    torch::nn::Linear cls{nullptr};
    torch::nn::Linear box1{nullptr}, box2{nullptr}, box3{nullptr};
};
TORCH_MODULE(Heads);

// Everything a forward pass produces that the losses need.
struct ForwardOutput {
    torch::Tensor level3;                // backbone level 3 of the current frame [B, d, h, w]
    torch::Tensor memory;                // encoded tokens E [B, S, d]
    std::vector<torch::Tensor> decoded;  // per decoder layer [B, N, d]
    std::vector<DetectionSet> detections;  // per decoder layer
    // Teacher only: query sets of every window slot, [T, N, d].
    torch::Tensor frame_queries;
};

// Detection transformer used for both roles. With cfg.msi the model is the
// video teacher: each window frame goes through the backbone, level 3 is
// enhanced by spatiotemporal interaction, and the current frame's slice is
// encoded. Without it the model is a single-frame detector.
class DetectorImpl : public torch::nn::Module {
public:
    explicit DetectorImpl(const ModelConfig& cfg);

    // images: [B, C, H, W].
    ForwardOutput forward_image(const torch::Tensor& images);
    // windows: [B, T, C, H, W]; current[b] is the current slot of sample b.
    ForwardOutput forward_window(const torch::Tensor& windows, const std::vector<int>& current);
    // Level-wise temporal pyramid of a window batch, all 4 levels through MSI.
    msi::TemporalPyramid temporal_pyramid(const torch::Tensor& windows, bool enhance);

    // Decodes arbitrary query rows against encoded memory and applies heads.
    std::vector<torch::Tensor> decode(const torch::Tensor& queries, const torch::Tensor& memory);
    DetectionSet predict(const torch::Tensor& decoded) { return heads(decoded); }

    // Query set for window slot `slot`: shared embeddings plus a per-slot
    // embedding. Single-frame models return the shared embeddings.
    torch::Tensor slot_queries(int slot) const;
    torch::Tensor all_slot_queries() const;

    const ModelConfig& config() const { return cfg_; }

    Backbone backbone{nullptr};
    Encoder encoder{nullptr};
    Decoder decoder{nullptr};
    Heads heads{nullptr};
    msi::Msi interaction{nullptr};
    torch::Tensor query_embed;
    torch::Tensor frame_embed;

private:
    ForwardOutput finish(torch::Tensor level3, torch::Tensor queries);

    ModelConfig cfg_;
};
TORCH_MODULE(Detector);

}  // namespace v2i::detr
