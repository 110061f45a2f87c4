#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kvc/kv_cache.hpp"
#include "kvc/stats.hpp"
#include "kvc/trace.hpp"

namespace kvc {

class Model;

enum class PolicyId { ExpectedAttention, KNorm, Streaming, Tova, SnapKv, KeyDiff, Oracle, AntiOracle, Random };

std::string_view policy_name(PolicyId id);
/// Accepts the CLI ids (expected_attention, knorm, streaming, tova, snapkv,
/// keydiff, oracle, anti_oracle, random). Throws InvalidArgument otherwise.
PolicyId parse_policy(std::string_view name);
std::span<const PolicyId> all_policies();

bool policy_needs_trace(PolicyId id);
bool policy_needs_future(PolicyId id);

struct CompressionConfig {
    PolicyId policy = PolicyId::ExpectedAttention;
    double ratio = 0.0;
    double epsilon = 0.02;
    std::int64_t rope_window = 512;
    std::int64_t decode_interval = 512;
    std::size_t stats_buffer = 128;
    bool use_wo_v = false;
    bool head_adaptive = true;
    std::size_t min_keep_per_head = 1;
    double ridge = 1e-5;

    std::size_t sink_tokens = 4;
    /// Unset means budget minus sinks.
    std::optional<std::size_t> recent_tokens;

    std::size_t snapkv_window = 32;
    std::size_t snapkv_kernel = 5;

    std::uint64_t seed = 0;

    /// Throws InvalidArgument on out-of-domain values.
    void validate() const;
    std::string to_json() const;
};

/// Per-entry importance of one kv head; higher means keep.
using ScoreVector = std::vector<float>;

/// Query heads that read kv head `kv_head` under grouped-query attention.
struct HeadGroup {
    std::size_t first = 0;
    std::size_t count = 1;
};

/// ||v_i|| for every entry of a head.
std::vector<float> value_norms(const KvCache& cache, std::size_t layer, std::size_t kv_head);

/// ||W_o v_i|| using each reading query head's slice of W_o, averaged over
/// the group.
std::vector<float> projected_value_norms(const Model& model, const KvCache& cache, std::size_t layer,
                                         std::size_t kv_head);

/// log ẑ_i for each cached key of the head under one query distribution.
std::vector<double> expected_log_scores(const KvCache& cache, std::size_t layer, std::size_t kv_head,
                                        const QueryDistribution& dist);

/// â: softmax of log ẑ over the head's entries per query head, averaged over
/// the group's distributions.
std::vector<double> expected_attention_weights(const KvCache& cache, std::size_t layer, std::size_t kv_head,
                                               std::span<const QueryDistribution> group);

/// (â_i + ε) * norms_i.
ScoreVector score_expected_attention(const KvCache& cache, std::size_t layer, std::size_t kv_head,
                                     std::span<const QueryDistribution> group, double epsilon,
                                     std::span<const float> norms);

/// -||k_i||: low-norm keys are kept.
ScoreVector score_knorm(const KvCache& cache, std::size_t layer, std::size_t kv_head);

/// 2 for the first `sinks` entries, 1 for the last `recent`, 0 otherwise.
ScoreVector score_streaming(const KvCache& cache, std::size_t layer, std::size_t kv_head, std::size_t sinks,
                            std::size_t recent);

/// Weight from the most recent traced query row, averaged over the group.
ScoreVector score_tova(const KvCache& cache, std::size_t layer, std::size_t kv_head, const AttentionTrace& trace,
                       HeadGroup group);

/// Mean attention over the last `obs_window` rows, max-pooled with width
/// `kernel` along the cache. With `protect_window`, entries whose positions
/// belong to the observation queries score 2 so they are always kept.
ScoreVector score_snapkv(const KvCache& cache, std::size_t layer, std::size_t kv_head, const AttentionTrace& trace,
                         HeadGroup group, std::size_t obs_window, std::size_t kernel, bool protect_window = true);

/// 1 - cos(k_i, mean key).
ScoreVector score_keydiff(const KvCache& cache, std::size_t layer, std::size_t kv_head);

/// Mean over the traced future rows of a_ti * norms_i, averaged over the group.
ScoreVector score_oracle(const KvCache& cache, std::size_t layer, std::size_t kv_head,
                         const AttentionTrace& future_trace, HeadGroup group, std::span<const float> norms);

/// Uniform [0, 1) scores, a pure function of (seed, layer, kv_head, n).
ScoreVector score_random(std::size_t n, std::uint64_t seed, std::size_t layer, std::size_t kv_head);

/// Ordering used for every selection: higher score first, then lower
/// position. Returns the `k` best indices in ascending order.
std::vector<std::size_t> top_k_indices(std::span<const float> scores, std::span<const std::int64_t> positions,
                                       std::size_t k);

/// Pools (head, index, score) over a layer, keeps the global top
/// `layer_budget`, then raises every head to min(min_keep, len) by promoting
/// its best entries and demoting the weakest surplus entries elsewhere.
/// Ties: lower position first, then lower head. Throws InvalidArgument when
/// the budget exceeds the entries or cannot cover the floors.
std::vector<std::vector<std::size_t>> allocate_head_adaptive(std::span<const ScoreVector> scores,
                                                             std::span<const std::vector<std::int64_t>> positions,
                                                             std::size_t layer_budget, std::size_t min_keep);

/// Same, with positions equal to indices.
std::vector<std::vector<std::size_t>> allocate_head_adaptive(std::span<const ScoreVector> scores,
                                                             std::size_t layer_budget, std::size_t min_keep);

/// Reference allocator for tiny layers: enumerates every feasible subset of
/// size `layer_budget` and returns the one whose sorted global ranks are
/// lexicographically smallest. Positions equal indices. Exponential; throws
/// InvalidArgument above 20 entries or when no subset is feasible.
std::vector<std::vector<std::size_t>> brute_force_allocation(std::span<const ScoreVector> scores,
                                                             std::size_t layer_budget, std::size_t min_keep);

} // namespace kvc
