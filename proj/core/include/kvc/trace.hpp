#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <limits>
#include <map>
#include <span>
#include <vector>

namespace kvc {

/// Hooks the forward pass calls while it runs. Every span is only valid for
/// the duration of the call.
class ForwardObserver {
public:
    virtual ~ForwardObserver() = default;

    /// Residual stream entering a layer (before the attention norm).
    virtual void on_layer_input(std::size_t /*layer*/, std::int64_t /*position*/,
                                std::span<const float> /*hidden*/) {}

    /// Query of one head before rotary embedding (after QK-norm when enabled).
    virtual void on_query(std::size_t /*layer*/, std::size_t /*head*/, std::int64_t /*position*/,
                          std::span<const float> /*query*/) {}

    /// One materialized attention row: weights and logits over the cached
    /// entries visible to this query, aligned with `key_positions`.
    virtual void on_attention(std::size_t /*layer*/, std::size_t /*head*/, std::int64_t /*query_position*/,
                              std::span<const std::int64_t> /*key_positions*/, std::span<const float> /*weights*/,
                              std::span<const float> /*logits*/) {}

    /// Residual stream right after the attention update h + sum_i a_i W_o v_i.
    virtual void on_attention_output(std::size_t /*layer*/, std::int64_t /*position*/,
                                     std::span<const float> /*hidden*/) {}
};

/// Fans every callback out to several observers.
class ObserverList final : public ForwardObserver {
public:
    ObserverList() = default;
    ObserverList(std::initializer_list<ForwardObserver*> observers);

    void add(ForwardObserver* observer);
    bool empty() const noexcept { return observers_.empty(); }

    void on_layer_input(std::size_t layer, std::int64_t position, std::span<const float> hidden) override;
    void on_query(std::size_t layer, std::size_t head, std::int64_t position, std::span<const float> query) override;
    void on_attention(std::size_t layer, std::size_t head, std::int64_t query_position,
                      std::span<const std::int64_t> key_positions, std::span<const float> weights,
                      std::span<const float> logits) override;
    void on_attention_output(std::size_t layer, std::int64_t position, std::span<const float> hidden) override;

private:
    std::vector<ForwardObserver*> observers_;
};

struct AttentionRow {
    std::int64_t query_position = 0;
    std::vector<std::int64_t> key_positions;
    std::vector<float> weights;
    std::vector<float> logits;

    /// Weight on `position`, zero when the row never saw it.
    float weight_at(std::int64_t position) const;
};

/// Materialized attention rows per (layer, query head).
///
/// `keep_last` bounds the rows retained per head (oldest dropped first);
/// rows for queries before `from_position` are ignored.
class AttentionTrace final : public ForwardObserver {
public:
    static constexpr std::size_t kUnbounded = std::numeric_limits<std::size_t>::max();

    AttentionTrace(std::size_t n_layers, std::size_t n_heads, std::size_t keep_last = kUnbounded,
                   std::int64_t from_position = 0);

    std::size_t n_layers() const noexcept { return n_layers_; }
    std::size_t n_heads() const noexcept { return n_heads_; }

    const std::deque<AttentionRow>& rows(std::size_t layer, std::size_t head) const;
    void clear();

    void on_attention(std::size_t layer, std::size_t head, std::int64_t query_position,
                      std::span<const std::int64_t> key_positions, std::span<const float> weights,
                      std::span<const float> logits) override;

private:
    std::size_t n_layers_;
    std::size_t n_heads_;
    std::size_t keep_last_;
    std::int64_t from_position_;
    std::vector<std::deque<AttentionRow>> rows_;
};

/// Records the post-attention residual stream per (layer, position).
class HiddenRecorder final : public ForwardObserver {
public:
    explicit HiddenRecorder(std::size_t n_layers, std::int64_t from_position = 0);

    void on_attention_output(std::size_t layer, std::int64_t position, std::span<const float> hidden) override;

    const std::map<std::int64_t, std::vector<float>>& layer(std::size_t layer) const { return states_.at(layer); }

private:
    std::int64_t from_position_;
    std::vector<std::map<std::int64_t, std::vector<float>>> states_;
};

} // namespace kvc
