#include "kvc/controller.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "kvc/errors.hpp"

namespace kvc {

namespace {

// Guards the budget arithmetic against representation error in (1 - r) * n,
// e.g. (1 - 0.9) * 100 = 9.999999999999998.
constexpr double kRoundingSlack = 1e-9;

HeadGroup group_of(const ModelConfig& c, std::size_t kv_head) {
    return {kv_head * c.group_size(), c.group_size()};
}

std::vector<float> norms_for(const Model& model, const KvCache& cache, std::size_t layer, std::size_t kv_head,
                             const CompressionConfig& config) {
    return config.use_wo_v ? projected_value_norms(model, cache, layer, kv_head)
                           : value_norms(cache, layer, kv_head);
}

} // namespace

std::string CompressionEvent::to_json() const {
    nlohmann::json j = {
        {"step", step},
        {"layer", layer},
        {"bytes_before", bytes_before},
        {"bytes_after", bytes_after},
        {"kept_per_head", kept_per_head},
        {"policy", policy_name(policy)},
    };
    return j.dump();
}

void write_events_jsonl(const std::filesystem::path& path, const std::vector<CompressionEvent>& events) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) {
        throw IoError("cannot write event log " + path.string());
    }
    for (const auto& e : events) {
        f << e.to_json() << '\n';
    }
}

std::vector<QueryDistribution> group_distributions(const Model& model, const QueryStatistics& stats,
                                                   std::size_t layer, std::size_t kv_head,
                                                   std::int64_t current_position, const CompressionConfig& config) {
    const auto r_bar = future_rope_average(current_position, config.rope_window, model.rope());
    const HeadGroup g = group_of(model.config(), kv_head);
    std::vector<QueryDistribution> out;
    out.reserve(g.count);
    for (std::size_t h = g.first; h < g.first + g.count; ++h) {
        out.push_back(finalize_moments(stats.moments(layer, h), r_bar, config.ridge));
    }
    return out;
}

std::vector<ScoreVector> score_layer(const Model& model, const KvCache& cache, std::size_t layer,
                                     const CompressionConfig& config, const ScoringInputs& inputs,
                                     std::size_t head_budget) {
    const auto& c = model.config();
    std::vector<ScoreVector> scores(c.n_kv_heads);
    const std::int64_t current = cache.next_position() - 1;
    for (std::size_t g = 0; g < c.n_kv_heads; ++g) {
        switch (config.policy) {
        case PolicyId::ExpectedAttention: {
            if (!inputs.stats) throw InvalidArgument("expected_attention needs query statistics");
            const auto dists = group_distributions(model, *inputs.stats, layer, g, current, config);
            scores[g] = score_expected_attention(cache, layer, g, dists, config.epsilon,
                                                 norms_for(model, cache, layer, g, config));
            break;
        }
        case PolicyId::KNorm:
            scores[g] = score_knorm(cache, layer, g);
            break;
        case PolicyId::Streaming: {
            const std::size_t sinks = config.sink_tokens;
            const std::size_t recent =
                config.recent_tokens.value_or(head_budget > sinks ? head_budget - sinks : std::size_t{0});
            scores[g] = score_streaming(cache, layer, g, sinks, recent);
            break;
        }
        case PolicyId::Tova:
            if (!inputs.trace) throw InvalidArgument("tova needs an attention trace");
            scores[g] = score_tova(cache, layer, g, *inputs.trace, group_of(c, g));
            break;
        case PolicyId::SnapKv:
            if (!inputs.trace) throw InvalidArgument("snapkv needs an attention trace");
            scores[g] = score_snapkv(cache, layer, g, *inputs.trace, group_of(c, g), config.snapkv_window,
                                     config.snapkv_kernel);
            break;
        case PolicyId::KeyDiff:
            scores[g] = score_keydiff(cache, layer, g);
            break;
        case PolicyId::Oracle:
        case PolicyId::AntiOracle: {
            if (!inputs.future) throw InvalidArgument("oracle policies need a teacher-forced future trace");
            scores[g] = score_oracle(cache, layer, g, *inputs.future, group_of(c, g),
                                     norms_for(model, cache, layer, g, config));
            if (config.policy == PolicyId::AntiOracle) {
                for (float& v : scores[g]) v = -v;
            }
            break;
        }
        case PolicyId::Random:
            scores[g] = score_random(cache.length(layer, g), config.seed, layer, g);
            break;
        }
    }
    return scores;
}

std::size_t layer_budget(std::size_t total, double ratio) {
    const double exact = (1.0 - ratio) * static_cast<double>(total);
    return std::min(total, static_cast<std::size_t>(std::floor(exact + 0.5 + kRoundingSlack)));
}

std::size_t uniform_head_budget(std::size_t length, double ratio) {
    const double exact = (1.0 - ratio) * static_cast<double>(length);
    return std::min(length, static_cast<std::size_t>(std::floor(exact + kRoundingSlack)));
}

std::vector<CompressionEvent> compress_prefill(const Model& model, KvCache& cache, const ScoringInputs& inputs,
                                               const CompressionConfig& config) {
    config.validate();
    const auto& c = model.config();
    std::vector<CompressionEvent> events;
    if (config.ratio == 0.0) {
        return events;
    }
    for (std::size_t layer = 0; layer < c.n_layers; ++layer) {
        CompressionEvent ev;
        ev.step = 0;
        ev.layer = layer;
        ev.policy = config.policy;
        ev.bytes_before = cache.layer_memory_bytes(layer);

        std::vector<std::vector<std::size_t>> keep(c.n_kv_heads);
        if (config.head_adaptive) {
            const std::size_t total = cache.layer_length(layer);
            std::size_t floors = 0;
            for (std::size_t g = 0; g < c.n_kv_heads; ++g) {
                floors += std::min(config.min_keep_per_head, cache.length(layer, g));
            }
            const std::size_t budget = std::max(layer_budget(total, config.ratio), floors);
            const std::size_t per_head = (budget + c.n_kv_heads - 1) / c.n_kv_heads;
            auto scores = score_layer(model, cache, layer, config, inputs, per_head);
            std::vector<std::vector<std::int64_t>> positions(c.n_kv_heads);
            for (std::size_t g = 0; g < c.n_kv_heads; ++g) {
                auto p = cache.positions(layer, g);
                positions[g].assign(p.begin(), p.end());
            }
            keep = allocate_head_adaptive(scores, positions, budget, config.min_keep_per_head);
        } else {
            // Streaming needs a per-head budget; heads share one length unless
            // an earlier adaptive pass already made them ragged.
            std::size_t hint = 0;
            for (std::size_t g = 0; g < c.n_kv_heads; ++g) {
                hint = std::max(hint, uniform_head_budget(cache.length(layer, g), config.ratio));
            }
            auto scores = score_layer(model, cache, layer, config, inputs, hint);
            for (std::size_t g = 0; g < c.n_kv_heads; ++g) {
                const std::size_t len = cache.length(layer, g);
                const std::size_t k =
                    std::max(uniform_head_budget(len, config.ratio), std::min(config.min_keep_per_head, len));
                keep[g] = top_k_indices(scores[g], cache.positions(layer, g), k);
            }
        }
        for (std::size_t g = 0; g < c.n_kv_heads; ++g) {
            cache.evict(layer, g, keep[g]);
            ev.kept_per_head.push_back(keep[g].size());
        }
        ev.bytes_after = cache.layer_memory_bytes(layer);
        events.push_back(std::move(ev));
    }
    return events;
}

DecodingCompressor::DecodingCompressor(const Model& model, CompressionConfig config, std::size_t max_cache_entries)
    : model_(model), config_(std::move(config)), max_entries_(max_cache_entries),
      stats_(model.config().n_layers, model.config().n_heads, model.config().head_dim,
             QueryStatistics::Mode::Window, config_.stats_buffer) {
    config_.validate();
    if (max_cache_entries == 0) {
        throw InvalidArgument("max cache entries must be positive");
    }
    if (policy_needs_future(config_.policy)) {
        throw InvalidArgument(std::string(policy_name(config_.policy)) +
                              " needs future attention and cannot run during decoding");
    }
    observers_.add(&stats_);
    if (policy_needs_trace(config_.policy)) {
        trace_ = std::make_unique<AttentionTrace>(model.config().n_layers, model.config().n_heads,
                                                  std::max<std::size_t>(config_.snapkv_window, 1));
        observers_.add(trace_.get());
    }
}

std::size_t DecodingCompressor::protected_recent() const noexcept {
    return std::min(config_.stats_buffer, max_entries_);
}

void DecodingCompressor::after_token(std::int64_t step, KvCache& cache) {
    if (max_entries_ == kUnbounded || step % config_.decode_interval != 0) {
        return;
    }
    const auto& c = model_.config();
    std::vector<CompressionEvent> fired;
    const std::int64_t newest = cache.next_position() - 1;
    const auto guard = static_cast<std::int64_t>(protected_recent());
    ScoringInputs inputs{&stats_, trace_.get(), nullptr};

    for (std::size_t layer = 0; layer < c.n_layers; ++layer) {
        bool over = false;
        for (std::size_t g = 0; g < c.n_kv_heads; ++g) {
            over = over || cache.length(layer, g) > max_entries_;
        }
        if (!over) continue;

        CompressionEvent ev;
        ev.step = step;
        ev.layer = layer;
        ev.policy = config_.policy;
        ev.bytes_before = cache.layer_memory_bytes(layer);
        auto scores = score_layer(model_, cache, layer, config_, inputs, max_entries_);
        for (std::size_t g = 0; g < c.n_kv_heads; ++g) {
            const std::size_t len = cache.length(layer, g);
            if (len <= max_entries_) {
                ev.kept_per_head.push_back(len);
                continue;
            }
            auto positions = cache.positions(layer, g);
            std::vector<std::size_t> keep;
            std::vector<float> cand_scores;
            std::vector<std::int64_t> cand_pos;
            std::vector<std::size_t> cand_idx;
            for (std::size_t i = 0; i < len; ++i) {
                if (positions[i] > newest - guard) {
                    keep.push_back(i);
                } else {
                    cand_scores.push_back(scores[g][i]);
                    cand_pos.push_back(positions[i]);
                    cand_idx.push_back(i);
                }
            }
            const std::size_t room = max_entries_ > keep.size() ? max_entries_ - keep.size() : 0;
            for (std::size_t j : top_k_indices(cand_scores, cand_pos, std::min(room, cand_scores.size()))) {
                keep.push_back(cand_idx[j]);
            }
            std::sort(keep.begin(), keep.end());
            cache.evict(layer, g, keep);
            ev.kept_per_head.push_back(keep.size());
        }
        ev.bytes_after = cache.layer_memory_bytes(layer);
        fired.push_back(ev);
    }
    if (!fired.empty()) {
        events_.insert(events_.end(), fired.begin(), fired.end());
        if (on_fire) on_fire(fired);
    }
}

PrefillObservers::PrefillObservers(const Model& model, const CompressionConfig& config)
    : stats(model.config().n_layers, model.config().n_heads, model.config().head_dim, QueryStatistics::Mode::Streaming),
      trace(model.config().n_layers, model.config().n_heads, std::max<std::size_t>(config.snapkv_window, 1)) {
    list.add(&stats);
    if (policy_needs_trace(config.policy)) {
        list.add(&trace);
    }
}

} // namespace kvc
