#pragma once

#include <array>

#include <torch/torch.h>

#include "v2i/layers.hpp"

namespace v2i::msi {

inline constexpr int kLevels = 4;

// Per-frame pyramids stacked on a time axis: level l is [B, d, T, h_l, w_l].
struct TemporalPyramid {
    std::array<torch::Tensor, kLevels> levels;
};

struct MsiOptions {
    int d = 64;
    int layers = 2;
    int heads = 8;
    int ffn_mult = 4;
    // Adds a second residual around the FFN (conventional transformer block)
    // instead of the literal FFN(A(PE(F)) + F).
    bool ffn_residual = false;
    int token_cap = 8192;
};

// Linear token projection plus a fixed (t, y, x) sinusoidal code. No spatial
// downsampling.
class PatchEmbedImpl : public torch::nn::Module {
public:
    explicit PatchEmbedImpl(int d);
    torch::Tensor forward(const torch::Tensor& x);

    bool use_position = true;
    torch::nn::Conv3d proj{nullptr};
};
TORCH_MODULE(PatchEmbed);

// 3x3x3 same-padded convolution over (t, y, x), used on shallow levels.
class LocalInteractorImpl : public torch::nn::Module {
public:
    explicit LocalInteractorImpl(int d);
    torch::Tensor forward(const torch::Tensor& x);

    torch::nn::Conv3d conv{nullptr};
};
TORCH_MODULE(LocalInteractor);

// Self-attention across all T*h*w tokens jointly, used on deep levels.
class GlobalInteractorImpl : public torch::nn::Module {
public:
    GlobalInteractorImpl(int d, int heads, int token_cap);
    torch::Tensor forward(const torch::Tensor& x);
    // Attention weights [B, heads, S, S] for the given token volume.
    torch::Tensor weights(const torch::Tensor& x);

    Attention attn{nullptr};

private:
    torch::Tensor tokens(const torch::Tensor& x) const;
    int token_cap_;
};
TORCH_MODULE(GlobalInteractor);

// One interaction layer: FFN(LN(A(PE(F)) + F)).
class InteractionLayerImpl : public torch::nn::Module {
public:
    InteractionLayerImpl(int level, const MsiOptions& opt);
    torch::Tensor forward(const torch::Tensor& x);

    bool is_local() const { return !local.is_empty(); }

    PatchEmbed embed{nullptr};
    LocalInteractor local{nullptr};
    GlobalInteractor global{nullptr};
    torch::nn::LayerNorm norm{nullptr};
    FeedForward ffn{nullptr};

private:
    bool ffn_residual_;
};
TORCH_MODULE(InteractionLayer);

class MsiImpl : public torch::nn::Module {
public:
    explicit MsiImpl(const MsiOptions& opt);

    // Enhances every level; shapes are preserved.
    TemporalPyramid forward(const TemporalPyramid& pyramid);
    // Runs the interaction stack of a single level.
    torch::Tensor forward_level(int level, const torch::Tensor& x);

    void set_use_position(bool on);

    std::array<torch::nn::ModuleList, kLevels> stacks;
};
TORCH_MODULE(Msi);

}  // namespace v2i::msi
