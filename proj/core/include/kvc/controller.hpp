#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "kvc/model.hpp"
#include "kvc/policies.hpp"
#include "kvc/stats.hpp"
#include "kvc/trace.hpp"

namespace kvc {

struct CompressionEvent {
    std::int64_t step = 0;
    std::size_t layer = 0;
    std::size_t bytes_before = 0;
    std::size_t bytes_after = 0;
    std::vector<std::size_t> kept_per_head;
    PolicyId policy = PolicyId::ExpectedAttention;

    /// One JSON object on a single line.
    std::string to_json() const;
};

void write_events_jsonl(const std::filesystem::path& path, const std::vector<CompressionEvent>& events);

/// Whatever a policy may read besides the cache itself.
struct ScoringInputs {
    /// Query moments for expected attention.
    const QueryStatistics* stats = nullptr;
    /// Attention rows of recent queries (tova, snapkv).
    const AttentionTrace* trace = nullptr;
    /// Teacher-forced future attention (oracle, anti_oracle).
    const AttentionTrace* future = nullptr;
};

/// Query distributions for the heads reading `kv_head`, with R̄ averaged
/// over the `config.rope_window` positions after `current_position`.
std::vector<QueryDistribution> group_distributions(const Model& model, const QueryStatistics& stats,
                                                   std::size_t layer, std::size_t kv_head,
                                                   std::int64_t current_position, const CompressionConfig& config);

/// Scores every kv head of `layer` with the configured policy.
/// `head_budget` is only consulted by the streaming policy (recent window).
std::vector<ScoreVector> score_layer(const Model& model, const KvCache& cache, std::size_t layer,
                                     const CompressionConfig& config, const ScoringInputs& inputs,
                                     std::size_t head_budget);

/// round((1 - r) * total), halves rounded up.
std::size_t layer_budget(std::size_t total, double ratio);
/// floor((1 - r) * len).
std::size_t uniform_head_budget(std::size_t length, double ratio);

/// One-shot compression after prefill. Every layer is scored and evicted in
/// order; head-adaptive mode keeps round((1-r) * layer_total) entries per layer
/// (raised to the per-head floors if needed), uniform mode keeps
/// floor((1-r) * len) per head (also subject to the floor).
std::vector<CompressionEvent> compress_prefill(const Model& model, KvCache& cache, const ScoringInputs& inputs,
                                               const CompressionConfig& config);

/// Periodic compression during generation.
///
/// Fires when step % decode_interval == 0 and some head holds more than
/// `max_cache_entries`; each such head is cut to exactly `max_cache_entries`.
/// Queries come from a ring buffer of the last `stats_buffer` tokens, and the
/// most recent min(stats_buffer, max_cache_entries) positions of each head are
/// never evicted.
/// Observers a prefill needs before compress_prefill: streaming query
/// statistics, plus the trailing attention window for trace-based policies.
struct PrefillObservers {
    PrefillObservers(const Model& model, const CompressionConfig& config);
    PrefillObservers(const PrefillObservers&) = delete;
    PrefillObservers& operator=(const PrefillObservers&) = delete;

    ScoringInputs inputs(const AttentionTrace* future = nullptr) const { return {&stats, &trace, future}; }

    QueryStatistics stats;
    AttentionTrace trace;
    ObserverList list;
};

class DecodingCompressor final : public DecodeHook {
public:
    static constexpr std::size_t kUnbounded = std::numeric_limits<std::size_t>::max();

    DecodingCompressor(const Model& model, CompressionConfig config, std::size_t max_cache_entries);

    ForwardObserver* observer() override { return &observers_; }
    void after_token(std::int64_t step, KvCache& cache) override;

    const std::vector<CompressionEvent>& events() const noexcept { return events_; }
    std::size_t protected_recent() const noexcept;

    /// Invoked after every firing with the events it produced.
    std::function<void(const std::vector<CompressionEvent>&)> on_fire;

private:
    const Model& model_;
    CompressionConfig config_;
    std::size_t max_entries_;
    QueryStatistics stats_;
    std::unique_ptr<AttentionTrace> trace_;
    ObserverList observers_;
    std::vector<CompressionEvent> events_;
};

} // namespace kvc
