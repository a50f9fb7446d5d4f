#include "v2i/layers.hpp"

#include <cmath>

#include "v2i/errors.hpp"

namespace v2i {

AttentionImpl::AttentionImpl(int d, int heads) : d_(d), heads_(heads) {
    if (heads < 1 || d % heads != 0)
        throw ConfigError("attention width " + std::to_string(d) + " not divisible by " +
                          std::to_string(heads) + " heads");
    q_proj = register_module("q_proj", torch::nn::Linear(d, d));
    k_proj = register_module("k_proj", torch::nn::Linear(d, d));
    v_proj = register_module("v_proj", torch::nn::Linear(d, d));
    out_proj = register_module("out_proj", torch::nn::Linear(d, d));
}

torch::Tensor AttentionImpl::split(const torch::Tensor& x) const {
    return x.view({x.size(0), x.size(1), heads_, d_ / heads_}).transpose(1, 2);
}

torch::Tensor AttentionImpl::weights(const torch::Tensor& q, const torch::Tensor& k) {
    auto qh = split(q_proj(q));
    auto kh = split(k_proj(k));
    auto scores = torch::matmul(qh, kh.transpose(-2, -1)) / std::sqrt(static_cast<double>(d_ / heads_));
    return torch::softmax(scores, -1);
}

torch::Tensor AttentionImpl::forward(const torch::Tensor& q, const torch::Tensor& k,
                                     const torch::Tensor& v) {
    if (q.dim() != 3 || k.dim() != 3 || v.dim() != 3 || q.size(2) != d_ || k.size(2) != d_)
        throw ShapeError("attention expects [B, M, d] inputs with d=" + std::to_string(d_));
    auto attn = weights(q, k);
    auto out = torch::matmul(attn, split(v_proj(v)));
    out = out.transpose(1, 2).reshape({q.size(0), q.size(1), d_});
    return out_proj(out);
}

FeedForwardImpl::FeedForwardImpl(int d, int hidden) {
    fc1 = register_module("fc1", torch::nn::Linear(d, hidden));
    fc2 = register_module("fc2", torch::nn::Linear(hidden, d));
}

torch::Tensor FeedForwardImpl::forward(const torch::Tensor& x) {
    return fc2(torch::relu(fc1(x)));
}

namespace {

// Fills `channels` rows starting at `offset` with sin/cos codes of `pos`.
void fill_axis(torch::Tensor& out, int offset, int channels, const torch::Tensor& pos) {
    const int pairs = channels / 2;
    for (int i = 0; i < pairs; ++i) {
        const double freq = std::pow(10000.0, -static_cast<double>(i) / std::max(pairs, 1));
        out[offset + 2 * i].copy_(torch::sin(pos * freq));
        out[offset + 2 * i + 1].copy_(torch::cos(pos * freq));
    }
}

}  // namespace

torch::Tensor sine_position_2d(int h, int w, int d) {
    auto ys = torch::arange(h, torch::kFloat32).view({h, 1}).expand({h, w});
    auto xs = torch::arange(w, torch::kFloat32).view({1, w}).expand({h, w});
    auto out = torch::zeros({d, h, w});
    const int half = (d / 4) * 2;
    fill_axis(out, 0, half, ys);
    fill_axis(out, half, half, xs);
    return out.flatten(1).transpose(0, 1).contiguous();
}

torch::Tensor sine_position_3d(int T, int h, int w, int d) {
    auto ts = torch::arange(T, torch::kFloat32).view({T, 1, 1}).expand({T, h, w});
    auto ys = torch::arange(h, torch::kFloat32).view({1, h, 1}).expand({T, h, w});
    auto xs = torch::arange(w, torch::kFloat32).view({1, 1, w}).expand({T, h, w});
    auto out = torch::zeros({d, T, h, w});
    const int spatial = (d / 6) * 2;
    const int temporal = ((d - 2 * spatial) / 2) * 2;
    fill_axis(out, 0, temporal, ts);
    fill_axis(out, temporal, spatial, ys);
    fill_axis(out, temporal + spatial, spatial, xs);
    return out;
}

}  // namespace v2i
