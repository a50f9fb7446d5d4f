#pragma once

#include <cstdint>
#include <vector>

#include <torch/torch.h>

#include "v2i/detr.hpp"

namespace v2i::cqd {

// How many teacher queries each window frame contributes.
//   floor_NT: n = floor(N / T)  (total roughly equals the student query count)
//   all_TN:   n = N             (cross-view count = T * N)
//   half_TN:  n = N / 2         (cross-view count = T * N / 2)
enum class CountMode { floor_NT, all_TN, half_TN };

struct CrossViewSelection {
    int n = 0;
    int N = 0;
    // One index list per window slot, each of length n, unique within a slot.
    std::vector<std::vector<int>> indices;
    std::uint64_t seed = 0;

    int frames() const { return static_cast<int>(indices.size()); }
    int total() const { return n * frames(); }
};

int per_frame_count(int N, int T, CountMode mode = CountMode::floor_NT);

// Uniform sampling without replacement per frame, deterministic in seed.
// Throws ConfigError when N < T.
CrossViewSelection select_queries(int N, int T, std::uint64_t seed, CountMode mode = CountMode::floor_NT);

// Gathers the selected rows from per-slot sets [T, N, d] (or [B, T, N, d])
// into [T*n, d] (or [B, T*n, d]), slot-major.
torch::Tensor gather(const torch::Tensor& slot_sets, const CrossViewSelection& sel);

// Row positions of the selection inside the teacher decoder's
// [reference slots..., current slot] layout.
std::vector<std::int64_t> teacher_rows(const CrossViewSelection& sel, int current_slot);

struct StudentDecode {
    std::vector<torch::Tensor> crossview;  // per decoder layer, [B, T*n, d]
    std::vector<torch::Tensor> own;        // per decoder layer, [B, N, d]
};

// Decodes [q_t, Q_s] and splits the result by partition. q_t is detached.
StudentDecode student_decode_with_crossview(detr::DetectorImpl& student, const torch::Tensor& cross_queries,
                                            const torch::Tensor& student_queries, const torch::Tensor& memory);

struct TeacherDecode {
    torch::Tensor reference;  // [B, (T-1)*N, d], final layer
    torch::Tensor current;    // [B, N, d], final layer
};

// reference_queries: [B, (T-1)*N, d]; current_queries: [B, N, d].
TeacherDecode teacher_decode(detr::DetectorImpl& teacher, const torch::Tensor& reference_queries,
                             const torch::Tensor& current_queries, const torch::Tensor& memory);

// Splits per-slot query sets [T, N, d] into (reference, current) for every
// sample, given each sample's current slot.
std::pair<torch::Tensor, torch::Tensor> split_slots(const torch::Tensor& slot_sets,
                                                    const std::vector<int>& current_slots);

// Mean over rows of the negative cosine similarity; teacher side detached.
torch::Tensor cqd_loss(const torch::Tensor& student_rows, const torch::Tensor& teacher_rows);

}  // namespace v2i::cqd
