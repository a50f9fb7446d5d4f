#include "v2i/msi.hpp"

#include "v2i/errors.hpp"

namespace v2i::msi {

namespace {

// [d,T,h,w] inputs are promoted to a batch of one.
torch::Tensor batched(const torch::Tensor& x) {
    if (x.dim() == 4) return x.unsqueeze(0);
    if (x.dim() != 5) throw ShapeError("temporal level must be [B, d, T, h, w] or [d, T, h, w]");
    return x;
}

torch::Tensor restore(const torch::Tensor& y, const torch::Tensor& like) {
    return like.dim() == 4 ? y.squeeze(0) : y;
}

// [B, d, T, h, w] -> [B, T*h*w, d] and back.
torch::Tensor to_tokens(const torch::Tensor& x) { return x.flatten(2).transpose(1, 2); }

torch::Tensor from_tokens(const torch::Tensor& t, const torch::Tensor& like) {
    return t.transpose(1, 2).reshape(like.sizes());
}

}  // namespace

PatchEmbedImpl::PatchEmbedImpl(int d) {
    proj = register_module("proj", torch::nn::Conv3d(torch::nn::Conv3dOptions(d, d, 1).bias(false)));
}

torch::Tensor PatchEmbedImpl::forward(const torch::Tensor& x) {
    auto xb = batched(x);
    auto y = proj(xb);
    if (use_position)
        y = y + sine_position_3d(xb.size(2), xb.size(3), xb.size(4), xb.size(1)).to(y.dtype()).unsqueeze(0);
    return restore(y, x);
}

LocalInteractorImpl::LocalInteractorImpl(int d) {
    conv = register_module("conv", torch::nn::Conv3d(torch::nn::Conv3dOptions(d, d, 3).padding(1)));
}

torch::Tensor LocalInteractorImpl::forward(const torch::Tensor& x) {
    return restore(conv(batched(x)), x);
}

GlobalInteractorImpl::GlobalInteractorImpl(int d, int heads, int token_cap) : token_cap_(token_cap) {
    attn = register_module("attn", Attention(d, heads));
}

torch::Tensor GlobalInteractorImpl::tokens(const torch::Tensor& x) const {
    const auto xb = batched(x);
    const std::int64_t count = xb.size(2) * xb.size(3) * xb.size(4);
    if (count > token_cap_)
        throw ConfigError("global interactor: " + std::to_string(count) + " tokens exceed the cap of " +
                          std::to_string(token_cap_) + "; reduce image size or window length T");
    return to_tokens(xb);
}

torch::Tensor GlobalInteractorImpl::forward(const torch::Tensor& x) {
    auto t = tokens(x);
    auto y = attn(t, t, t);
    return restore(from_tokens(y, batched(x)), x);
}

torch::Tensor GlobalInteractorImpl::weights(const torch::Tensor& x) {
    auto t = tokens(x);
    return attn->weights(t, t);
}

InteractionLayerImpl::InteractionLayerImpl(int level, const MsiOptions& opt)
    : ffn_residual_(opt.ffn_residual) {
    embed = register_module("embed", PatchEmbed(opt.d));
    if (level <= 1)
        local = register_module("local", LocalInteractor(opt.d));
    else
        global = register_module("global", GlobalInteractor(opt.d, opt.heads, opt.token_cap));
    norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({opt.d})));
    ffn = register_module("ffn", FeedForward(opt.d, opt.d * opt.ffn_mult));
}

torch::Tensor InteractionLayerImpl::forward(const torch::Tensor& x) {
    auto xb = batched(x);
    auto e = embed(xb);
    auto a = is_local() ? local(e) : global(e);
    auto z = to_tokens(a + xb);
    auto y = ffn(norm(z));
    if (ffn_residual_) y = y + z;
    return restore(from_tokens(y, xb), x);
}

MsiImpl::MsiImpl(const MsiOptions& opt) {
    for (int l = 0; l < kLevels; ++l) {
        torch::nn::ModuleList stack;
        for (int i = 0; i < opt.layers; ++i) stack->push_back(InteractionLayer(l, opt));
        stacks[l] = register_module("level" + std::to_string(l), stack);
    }
}

torch::Tensor MsiImpl::forward_level(int level, const torch::Tensor& x) {
    auto y = x;
    for (const auto& m : *stacks.at(level)) y = m->as<InteractionLayer>()->forward(y);
    return y;
}

TemporalPyramid MsiImpl::forward(const TemporalPyramid& pyramid) {
    TemporalPyramid out;
    for (int l = 0; l < kLevels; ++l) out.levels[l] = forward_level(l, pyramid.levels[l]);
    return out;
}

void MsiImpl::set_use_position(bool on) {
    for (auto& stack : stacks)
        for (const auto& m : *stack) m->as<InteractionLayer>()->embed->use_position = on;
}

}  // namespace v2i::msi
