#include "v2i/cqd.hpp"

#include <numeric>
#include <random>

#include "v2i/errors.hpp"

namespace v2i::cqd {

int per_frame_count(int N, int T, CountMode mode) {
    if (T < 1 || N < T) throw ConfigError("cross-view selection needs N >= T >= 1");
    switch (mode) {
        case CountMode::floor_NT: return N / T;
        case CountMode::all_TN: return N;
        case CountMode::half_TN: return std::max(1, N / 2);
    }
    return N / T;
}

CrossViewSelection select_queries(int N, int T, std::uint64_t seed, CountMode mode) {
    CrossViewSelection sel;
    sel.n = per_frame_count(N, T, mode);
    sel.N = N;
    sel.seed = seed;
    std::mt19937_64 rng(seed);
    std::vector<int> pool(N);
    for (int f = 0; f < T; ++f) {
        std::iota(pool.begin(), pool.end(), 0);
        // Partial Fisher-Yates: the first n entries are a uniform sample.
        for (int i = 0; i < sel.n; ++i) {
            std::uniform_int_distribution<int> pick(i, N - 1);
            std::swap(pool[i], pool[pick(rng)]);
        }
        sel.indices.emplace_back(pool.begin(), pool.begin() + sel.n);
    }
    return sel;
}

torch::Tensor gather(const torch::Tensor& slot_sets, const CrossViewSelection& sel) {
    const bool batched = slot_sets.dim() == 4;
    auto sets = batched ? slot_sets : slot_sets.unsqueeze(0);
    if (sets.dim() != 4 || sets.size(1) != sel.frames())
        throw ShapeError("gather expects one query set per selected frame");
    std::vector<torch::Tensor> parts;
    for (int f = 0; f < sel.frames(); ++f) {
        auto idx = torch::tensor(std::vector<std::int64_t>(sel.indices[f].begin(), sel.indices[f].end()));
        parts.push_back(sets.select(1, f).index_select(1, idx));
    }
    auto out = torch::cat(parts, 1);
    return batched ? out : out.squeeze(0);
}

std::vector<std::int64_t> teacher_rows(const CrossViewSelection& sel, int current_slot) {
    std::vector<std::int64_t> rows;
    rows.reserve(sel.total());
    for (int f = 0; f < sel.frames(); ++f) {
        // Reference slots keep their order; the current slot is appended last.
        const int block = f == current_slot ? sel.frames() - 1 : (f < current_slot ? f : f - 1);
        for (int q : sel.indices[f]) rows.push_back(static_cast<std::int64_t>(block) * sel.N + q);
    }
    return rows;
}

StudentDecode student_decode_with_crossview(detr::DetectorImpl& student, const torch::Tensor& cross_queries,
                                            const torch::Tensor& student_queries, const torch::Tensor& memory) {
    const auto B = memory.size(0);
    auto expand = [B](const torch::Tensor& q) { return q.dim() == 2 ? q.unsqueeze(0).expand({B, -1, -1}) : q; };
    auto cq = expand(cross_queries.detach());
    auto sq = expand(student_queries);
    if (cq.size(-1) != sq.size(-1)) throw ShapeError("cross-view and student query widths differ");
    const auto n_cross = cq.size(1), n_own = sq.size(1);
    StudentDecode out;
    // Rows never interact inside the decoder, so decoding the partitions in
    // separate calls equals one concatenated pass. Separate calls also keep
    // the student rows bit-identical to a plain decode in both directions.
    out.own = student.decode(sq, memory);
    if (n_cross == 0) {
        for (const auto& d : out.own) out.crossview.push_back(d.narrow(1, 0, 0));
        return out;
    }
    if (student.config().decoder_self_attn) {
        auto decoded = student.decode(torch::cat({cq, sq}, 1), memory);
        out.own.clear();
        for (const auto& d : decoded) {
            out.crossview.push_back(d.narrow(1, 0, n_cross));
            out.own.push_back(d.narrow(1, n_cross, n_own));
        }
        return out;
    }
    out.crossview = student.decode(cq, memory);
    return out;
}

TeacherDecode teacher_decode(detr::DetectorImpl& teacher, const torch::Tensor& reference_queries,
                             const torch::Tensor& current_queries, const torch::Tensor& memory) {
    const auto n_ref = reference_queries.size(1);
    auto decoded = teacher.decode(torch::cat({reference_queries, current_queries}, 1), memory).back();
    return {decoded.narrow(1, 0, n_ref), decoded.narrow(1, n_ref, current_queries.size(1))};
}

std::pair<torch::Tensor, torch::Tensor> split_slots(const torch::Tensor& slot_sets,
                                                    const std::vector<int>& current_slots) {
    const auto T = slot_sets.size(0);
    std::vector<torch::Tensor> refs, curs;
    for (int c : current_slots) {
        if (c < 0 || c >= T) throw ShapeError("current slot outside the window");
        std::vector<torch::Tensor> r;
        for (int f = 0; f < T; ++f)
            if (f != c) r.push_back(slot_sets[f]);
        refs.push_back(r.empty() ? slot_sets.narrow(0, 0, 0).flatten(0, 1) : torch::cat(r, 0));
        curs.push_back(slot_sets[c]);
    }
    return {torch::stack(refs), torch::stack(curs)};
}

torch::Tensor cqd_loss(const torch::Tensor& student_rows, const torch::Tensor& teacher_rows) {
    if (!student_rows.sizes().equals(teacher_rows.sizes()))
        throw ShapeError("cqd_loss: row sets differ in shape");
    if (student_rows.numel() == 0) return torch::zeros({}, student_rows.options());
    auto t = teacher_rows.detach();
    auto dot = (student_rows * t).sum(-1);
    auto denom = (student_rows.norm(2, -1) * t.norm(2, -1)).clamp_min(1e-8);
    return (-dot / denom).mean();
}

}  // namespace v2i::cqd
