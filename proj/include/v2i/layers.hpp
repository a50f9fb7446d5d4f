#pragma once

#include <torch/torch.h>

namespace v2i {

// Multi-head scaled dot-product attention over [B, M, d] queries and
// [B, S, d] keys/values. Each output row depends only on its own query row
// and the key/value set.
class AttentionImpl : public torch::nn::Module {
public:
    AttentionImpl(int d, int heads);

    torch::Tensor forward(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v);
    // Softmax weights [B, heads, M, S]; rows sum to one.
    torch::Tensor weights(const torch::Tensor& q, const torch::Tensor& k);

    int heads() const { return heads_; }

private:
    torch::Tensor split(const torch::Tensor& x) const;

    int d_;
    int heads_;
    torch::nn::Linear q_proj{nullptr}, k_proj{nullptr}, v_proj{nullptr}, out_proj{nullptr};
};
TORCH_MODULE(Attention);

// Tokenwise two-layer MLP.
class FeedForwardImpl : public torch::nn::Module {
public:
    FeedForwardImpl(int d, int hidden);
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(FeedForward);

// 2D sinusoidal position code, [h*w, d], row-major over (y, x).
torch::Tensor sine_position_2d(int h, int w, int d);
// 3D sinusoidal position code over (t, y, x), [d, T, h, w].
torch::Tensor sine_position_3d(int T, int h, int w, int d);

}  // namespace v2i
