#include "kvc/kv_cache.hpp"

#include <utility>
#include <algorithm>
#include <string>

#include "kvc/errors.hpp"

namespace kvc {

KvCache::KvCache(std::size_t n_layers, std::size_t n_kv_heads, std::size_t head_dim)
    : n_layers_(n_layers), n_kv_heads_(n_kv_heads), head_dim_(head_dim), heads_(n_layers * n_kv_heads) {}

const KvCache::Head& KvCache::head(std::size_t layer, std::size_t kv_head) const {
    if (layer >= n_layers_ || kv_head >= n_kv_heads_) {
        throw InvalidArgument("cache head (" + std::to_string(layer) + ", " + std::to_string(kv_head) +
                              ") out of range");
    }
    return heads_[layer * n_kv_heads_ + kv_head];
}

KvCache::Head& KvCache::head(std::size_t layer, std::size_t kv_head) {
    return const_cast<Head&>(std::as_const(*this).head(layer, kv_head));
}

void KvCache::append(std::size_t layer, std::size_t kv_head, std::span<const float> key,
                     std::span<const float> value, std::int64_t position) {
    Head& h = head(layer, kv_head);
    if (key.size() != head_dim_ || value.size() != head_dim_) {
        throw ShapeError("cache append: key/value width must equal head_dim " + std::to_string(head_dim_));
    }
    if (position < 0 || (!h.positions.empty() && position <= h.positions.back())) {
        throw NonMonotonicPosition("cache append: position " + std::to_string(position) +
                                   " does not follow " +
                                   (h.positions.empty() ? std::string("an empty head")
                                                        : std::to_string(h.positions.back())));
    }
    h.keys.insert(h.keys.end(), key.begin(), key.end());
    h.values.insert(h.values.end(), value.begin(), value.end());
    h.positions.push_back(position);
}

void KvCache::evict(std::size_t layer, std::size_t kv_head, std::span<const std::size_t> keep_indices) {
    Head& h = head(layer, kv_head);
    const std::size_t n = h.positions.size();
    for (std::size_t i = 0; i < keep_indices.size(); ++i) {
        if (keep_indices[i] >= n) {
            throw InvalidArgument("evict: index " + std::to_string(keep_indices[i]) + " out of range for length " +
                                  std::to_string(n));
        }
        if (i > 0 && keep_indices[i] <= keep_indices[i - 1]) {
            throw InvalidArgument("evict: keep indices must be sorted and unique");
        }
    }
    // Compaction in place: destination never overtakes the source.
    std::size_t dst = 0;
    for (std::size_t src : keep_indices) {
        if (dst != src) {
            std::copy_n(h.keys.begin() + src * head_dim_, head_dim_, h.keys.begin() + dst * head_dim_);
            std::copy_n(h.values.begin() + src * head_dim_, head_dim_, h.values.begin() + dst * head_dim_);
            h.positions[dst] = h.positions[src];
        }
        ++dst;
    }
    h.keys.resize(dst * head_dim_);
    h.values.resize(dst * head_dim_);
    h.positions.resize(dst);
}

std::size_t KvCache::length(std::size_t layer, std::size_t kv_head) const {
    return head(layer, kv_head).positions.size();
}

std::size_t KvCache::layer_length(std::size_t layer) const {
    std::size_t n = 0;
    for (std::size_t h = 0; h < n_kv_heads_; ++h) {
        n += length(layer, h);
    }
    return n;
}

std::size_t KvCache::total_length() const {
    std::size_t n = 0;
    for (const auto& h : heads_) {
        n += h.positions.size();
    }
    return n;
}

KvEntry KvCache::entry(std::size_t layer, std::size_t kv_head, std::size_t index) const {
    return {key(layer, kv_head, index), value(layer, kv_head, index), head(layer, kv_head).positions.at(index)};
}

std::span<const float> KvCache::key(std::size_t layer, std::size_t kv_head, std::size_t index) const {
    const Head& h = head(layer, kv_head);
    return std::span<const float>(h.keys).subspan(index * head_dim_, head_dim_);
}

std::span<const float> KvCache::value(std::size_t layer, std::size_t kv_head, std::size_t index) const {
    const Head& h = head(layer, kv_head);
    return std::span<const float>(h.values).subspan(index * head_dim_, head_dim_);
}

std::span<const std::int64_t> KvCache::positions(std::size_t layer, std::size_t kv_head) const {
    return head(layer, kv_head).positions;
}

std::ptrdiff_t KvCache::find(std::size_t layer, std::size_t kv_head, std::int64_t position) const {
    const auto& pos = head(layer, kv_head).positions;
    auto it = std::lower_bound(pos.begin(), pos.end(), position);
    if (it == pos.end() || *it != position) {
        return -1;
    }
    return it - pos.begin();
}

std::size_t KvCache::memory_bytes() const {
    return total_length() * 2 * head_dim_ * sizeof(float);
}

std::size_t KvCache::layer_memory_bytes(std::size_t layer) const {
    return layer_length(layer) * 2 * head_dim_ * sizeof(float);
}

TensorMap KvCache::to_tensors() const {
    TensorMap out;
    for (std::size_t l = 0; l < n_layers_; ++l) {
        for (std::size_t h = 0; h < n_kv_heads_; ++h) {
            const Head& hd = head(l, h);
            const std::size_t n = hd.positions.size();
            if (n == 0) {
                continue;
            }
            const std::string prefix = "cache." + std::to_string(l) + "." + std::to_string(h) + ".";
            out.emplace(prefix + "keys", Tensor({n, head_dim_}, hd.keys));
            out.emplace(prefix + "values", Tensor({n, head_dim_}, hd.values));
            std::vector<float> pos(hd.positions.begin(), hd.positions.end());
            out.emplace(prefix + "positions", Tensor({n}, std::move(pos)));
        }
    }
    return out;
}

} // namespace kvc
