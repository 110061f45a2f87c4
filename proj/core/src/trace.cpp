#include "kvc/trace.hpp"

#include <algorithm>

#include "kvc/errors.hpp"

namespace kvc {

ObserverList::ObserverList(std::initializer_list<ForwardObserver*> observers) {
    for (auto* o : observers) {
        add(o);
    }
}

void ObserverList::add(ForwardObserver* observer) {
    if (observer != nullptr) {
        observers_.push_back(observer);
    }
}

void ObserverList::on_layer_input(std::size_t layer, std::int64_t position, std::span<const float> hidden) {
    for (auto* o : observers_) o->on_layer_input(layer, position, hidden);
}

void ObserverList::on_query(std::size_t layer, std::size_t head, std::int64_t position,
                            std::span<const float> query) {
    for (auto* o : observers_) o->on_query(layer, head, position, query);
}

void ObserverList::on_attention(std::size_t layer, std::size_t head, std::int64_t query_position,
                                std::span<const std::int64_t> key_positions, std::span<const float> weights,
                                std::span<const float> logits) {
    for (auto* o : observers_) o->on_attention(layer, head, query_position, key_positions, weights, logits);
}

void ObserverList::on_attention_output(std::size_t layer, std::int64_t position, std::span<const float> hidden) {
    for (auto* o : observers_) o->on_attention_output(layer, position, hidden);
}

float AttentionRow::weight_at(std::int64_t position) const {
    auto it = std::lower_bound(key_positions.begin(), key_positions.end(), position);
    if (it == key_positions.end() || *it != position) {
        return 0.0f;
    }
    return weights[static_cast<std::size_t>(it - key_positions.begin())];
}

AttentionTrace::AttentionTrace(std::size_t n_layers, std::size_t n_heads, std::size_t keep_last,
                               std::int64_t from_position)
    : n_layers_(n_layers), n_heads_(n_heads), keep_last_(keep_last), from_position_(from_position),
      rows_(n_layers * n_heads) {
    if (keep_last == 0) {
        throw InvalidArgument("attention trace must retain at least one row");
    }
}

const std::deque<AttentionRow>& AttentionTrace::rows(std::size_t layer, std::size_t head) const {
    if (layer >= n_layers_ || head >= n_heads_) {
        throw InvalidArgument("attention trace head out of range");
    }
    return rows_[layer * n_heads_ + head];
}

void AttentionTrace::clear() {
    for (auto& r : rows_) {
        r.clear();
    }
}

void AttentionTrace::on_attention(std::size_t layer, std::size_t head, std::int64_t query_position,
                                  std::span<const std::int64_t> key_positions, std::span<const float> weights,
                                  std::span<const float> logits) {
    if (query_position < from_position_) {
        return;
    }
    auto& q = rows_[layer * n_heads_ + head];
    q.push_back(AttentionRow{query_position, {key_positions.begin(), key_positions.end()},
                             {weights.begin(), weights.end()}, {logits.begin(), logits.end()}});
    while (q.size() > keep_last_) {
        q.pop_front();
    }
}

HiddenRecorder::HiddenRecorder(std::size_t n_layers, std::int64_t from_position)
    : from_position_(from_position), states_(n_layers) {}

void HiddenRecorder::on_attention_output(std::size_t layer, std::int64_t position, std::span<const float> hidden) {
    if (position < from_position_) {
        return;
    }
    states_[layer][position].assign(hidden.begin(), hidden.end());
}

} // namespace kvc
