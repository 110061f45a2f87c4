#include <algorithm>
#include <numeric>

#include "kvc/errors.hpp"
#include "kvc/policies.hpp"

namespace kvc {

namespace {

struct Candidate {
    float score;
    std::int64_t position;
    std::size_t head;
    std::size_t index;
};

/// Strict "ranks before" relation shared by every selection routine.
bool ranks_before(const Candidate& a, const Candidate& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.position != b.position) return a.position < b.position;
    return a.head < b.head;
}

} // namespace

std::vector<std::size_t> top_k_indices(std::span<const float> scores, std::span<const std::int64_t> positions,
                                       std::size_t k) {
    if (positions.size() != scores.size()) {
        throw ShapeError("top_k_indices: scores and positions differ in length");
    }
    if (k > scores.size()) {
        throw InvalidArgument("top_k_indices: k exceeds number of entries");
    }
    std::vector<Candidate> c(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) {
        c[i] = {scores[i], positions[i], 0, i};
    }
    std::partial_sort(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(k), c.end(), ranks_before);
    std::vector<std::size_t> out(k);
    for (std::size_t i = 0; i < k; ++i) out[i] = c[i].index;
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<std::vector<std::size_t>> allocate_head_adaptive(std::span<const ScoreVector> scores,
                                                             std::span<const std::vector<std::int64_t>> positions,
                                                             std::size_t layer_budget, std::size_t min_keep) {
    const std::size_t n_heads = scores.size();
    if (positions.size() != n_heads) {
        throw ShapeError("allocate_head_adaptive: positions not given for every head");
    }
    std::vector<Candidate> pool;
    std::vector<std::size_t> floor(n_heads);
    std::size_t floors = 0;
    for (std::size_t h = 0; h < n_heads; ++h) {
        if (positions[h].size() != scores[h].size()) {
            throw ShapeError("allocate_head_adaptive: positions misaligned with scores");
        }
        for (std::size_t i = 0; i < scores[h].size(); ++i) {
            pool.push_back({scores[h][i], positions[h][i], h, i});
        }
        floor[h] = std::min(min_keep, scores[h].size());
        floors += floor[h];
    }
    if (layer_budget > pool.size()) {
        throw InvalidArgument("head-adaptive budget " + std::to_string(layer_budget) + " exceeds " +
                              std::to_string(pool.size()) + " cached entries");
    }
    if (floors > layer_budget) {
        throw InvalidArgument("head-adaptive budget " + std::to_string(layer_budget) +
                              " cannot cover per-head minimum of " + std::to_string(floors));
    }
    std::sort(pool.begin(), pool.end(), ranks_before);

    std::vector<char> selected(pool.size(), 0);
    std::vector<std::size_t> count(n_heads, 0);
    for (std::size_t r = 0; r < layer_budget; ++r) {
        selected[r] = 1;
        ++count[pool[r].head];
    }

    // Promote each short head's best unselected entries, each time demoting the
    // globally weakest selected entry from a head holding more than its floor.
    for (std::size_t h = 0; h < n_heads; ++h) {
        std::size_t next = 0;
        while (count[h] < floor[h]) {
            while (next < pool.size() && (pool[next].head != h || selected[next])) ++next;
            std::size_t victim = pool.size();
            for (std::size_t r = pool.size(); r-- > 0;) {
                if (selected[r] && count[pool[r].head] > floor[pool[r].head]) {
                    victim = r;
                    break;
                }
            }
            // floors <= budget guarantees a surplus entry exists.
            selected[victim] = 0;
            --count[pool[victim].head];
            selected[next] = 1;
            ++count[h];
        }
    }

    std::vector<std::vector<std::size_t>> keep(n_heads);
    for (std::size_t r = 0; r < pool.size(); ++r) {
        if (selected[r]) keep[pool[r].head].push_back(pool[r].index);
    }
    for (auto& k : keep) std::sort(k.begin(), k.end());
    return keep;
}

std::vector<std::vector<std::size_t>> allocate_head_adaptive(std::span<const ScoreVector> scores,
                                                             std::size_t layer_budget, std::size_t min_keep) {
    std::vector<std::vector<std::int64_t>> positions(scores.size());
    for (std::size_t h = 0; h < scores.size(); ++h) {
        positions[h].resize(scores[h].size());
        std::iota(positions[h].begin(), positions[h].end(), std::int64_t{0});
    }
    return allocate_head_adaptive(scores, positions, layer_budget, min_keep);
}

} // namespace kvc
