#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "kvc/kvt_io.hpp"

namespace kvc {

/// Read-only view of one cached pair. Keys are stored post-RoPE.
struct KvEntry {
    std::span<const float> key;
    std::span<const float> value;
    std::int64_t position = 0;
};

/// Per-layer, per-kv-head growable store of cached key/value pairs.
///
/// Within one head positions are strictly increasing; different heads may hold
/// different numbers of entries once head-adaptive eviction has run. Original
/// position ids survive eviction.
class KvCache {
public:
    KvCache() = default;
    KvCache(std::size_t n_layers, std::size_t n_kv_heads, std::size_t head_dim);

    std::size_t n_layers() const noexcept { return n_layers_; }
    std::size_t n_kv_heads() const noexcept { return n_kv_heads_; }
    std::size_t head_dim() const noexcept { return head_dim_; }

    /// Throws NonMonotonicPosition unless position exceeds the head's last one.
    void append(std::size_t layer, std::size_t kv_head, std::span<const float> key,
                std::span<const float> value, std::int64_t position);

    /// Keeps exactly the entries at `keep_indices` (sorted ascending, unique).
    void evict(std::size_t layer, std::size_t kv_head, std::span<const std::size_t> keep_indices);

    std::size_t length(std::size_t layer, std::size_t kv_head) const;
    std::size_t layer_length(std::size_t layer) const;
    std::size_t total_length() const;

    KvEntry entry(std::size_t layer, std::size_t kv_head, std::size_t index) const;
    std::span<const float> key(std::size_t layer, std::size_t kv_head, std::size_t index) const;
    std::span<const float> value(std::size_t layer, std::size_t kv_head, std::size_t index) const;
    std::span<const std::int64_t> positions(std::size_t layer, std::size_t kv_head) const;

    /// Index of `position` in the head, or -1 when it is not cached.
    std::ptrdiff_t find(std::size_t layer, std::size_t kv_head, std::int64_t position) const;

    /// Bytes held by keys and values: sum over heads of len * 2 * head_dim * 4.
    std::size_t memory_bytes() const;
    std::size_t layer_memory_bytes(std::size_t layer) const;

    /// Number of tokens fed through the model so far; the next token gets
    /// this position id. Unaffected by eviction.
    std::int64_t next_position() const noexcept { return next_position_; }
    void advance(std::int64_t n) { next_position_ += n; }

    /// Cache dump in the weight container format, tensors named
    /// cache.{layer}.{head}.{keys|values|positions}. Positions are stored as
    /// f32 (exact below 2^24). Empty heads are omitted.
    TensorMap to_tensors() const;

private:
    struct Head {
        std::vector<float> keys;
        std::vector<float> values;
        std::vector<std::int64_t> positions;
    };

    const Head& head(std::size_t layer, std::size_t kv_head) const;
    Head& head(std::size_t layer, std::size_t kv_head);

    std::size_t n_layers_ = 0;
    std::size_t n_kv_heads_ = 0;
    std::size_t head_dim_ = 0;
    std::int64_t next_position_ = 0;
    std::vector<Head> heads_;
};

} // namespace kvc
