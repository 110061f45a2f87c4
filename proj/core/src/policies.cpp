#include "kvc/policies.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>

#include "kvc/errors.hpp"
#include "kvc/model.hpp"

namespace kvc {

namespace {

constexpr std::array<PolicyId, 9> kPolicies = {
    PolicyId::ExpectedAttention, PolicyId::KNorm,  PolicyId::Streaming,  PolicyId::Tova,   PolicyId::SnapKv,
    PolicyId::KeyDiff,           PolicyId::Oracle, PolicyId::AntiOracle, PolicyId::Random,
};

const std::deque<AttentionRow>& require_rows(const AttentionTrace& trace, std::size_t layer, std::size_t head) {
    const auto& rows = trace.rows(layer, head);
    if (rows.empty()) {
        throw InvalidArgument("attention trace has no rows for layer " + std::to_string(layer) + " head " +
                              std::to_string(head));
    }
    return rows;
}

void check_norms(std::span<const float> norms, std::size_t n) {
    if (norms.size() != n) {
        throw ShapeError("value norms not aligned with cache entries");
    }
}

} // namespace

std::string_view policy_name(PolicyId id) {
    switch (id) {
    case PolicyId::ExpectedAttention: return "expected_attention";
    case PolicyId::KNorm: return "knorm";
    case PolicyId::Streaming: return "streaming";
    case PolicyId::Tova: return "tova";
    case PolicyId::SnapKv: return "snapkv";
    case PolicyId::KeyDiff: return "keydiff";
    case PolicyId::Oracle: return "oracle";
    case PolicyId::AntiOracle: return "anti_oracle";
    case PolicyId::Random: return "random";
    }
    return "unknown";
}

PolicyId parse_policy(std::string_view name) {
    for (PolicyId id : kPolicies) {
        if (policy_name(id) == name) {
            return id;
        }
    }
    throw InvalidArgument("unknown policy id '" + std::string(name) + "'");
}

std::span<const PolicyId> all_policies() { return kPolicies; }

bool policy_needs_trace(PolicyId id) { return id == PolicyId::Tova || id == PolicyId::SnapKv; }

bool policy_needs_future(PolicyId id) { return id == PolicyId::Oracle || id == PolicyId::AntiOracle; }

void CompressionConfig::validate() const {
    if (!(ratio >= 0.0 && ratio <= 1.0)) {
        throw InvalidArgument("compression ratio must lie in [0, 1], got " + std::to_string(ratio));
    }
    if (!(epsilon >= 0.0)) {
        throw InvalidArgument("epsilon must be non-negative");
    }
    if (rope_window < 1) {
        throw InvalidArgument("rope window must be >= 1");
    }
    if (decode_interval < 1) {
        throw InvalidArgument("decode interval must be >= 1");
    }
    if (stats_buffer < 1) {
        throw InvalidArgument("stats buffer must be >= 1");
    }
    if (snapkv_window < 1 || snapkv_kernel < 1) {
        throw InvalidArgument("snapkv window and kernel must be >= 1");
    }
    if (!(ridge >= 0.0)) {
        throw InvalidArgument("ridge must be non-negative");
    }
}

std::string CompressionConfig::to_json() const {
    nlohmann::json j = {
        {"policy", policy_name(policy)},
        {"ratio", ratio},
        {"epsilon", epsilon},
        {"rope_window", rope_window},
        {"decode_interval", decode_interval},
        {"stats_buffer", stats_buffer},
        {"use_wo_v", use_wo_v},
        {"head_adaptive", head_adaptive},
        {"min_keep_per_head", min_keep_per_head},
        {"ridge", ridge},
        {"sink_tokens", sink_tokens},
        {"recent_tokens", recent_tokens ? nlohmann::json(*recent_tokens) : nlohmann::json(nullptr)},
        {"snapkv_window", snapkv_window},
        {"snapkv_kernel", snapkv_kernel},
        {"seed", seed},
    };
    return j.dump();
}

std::vector<float> value_norms(const KvCache& cache, std::size_t layer, std::size_t kv_head) {
    const std::size_t n = cache.length(layer, kv_head);
    std::vector<float> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = l2_norm(cache.value(layer, kv_head, i));
    }
    return out;
}

std::vector<float> projected_value_norms(const Model& model, const KvCache& cache, std::size_t layer,
                                         std::size_t kv_head) {
    const auto& c = model.config();
    const Tensor& wo = model.weights().layers.at(layer).wo;
    const std::size_t hd = c.head_dim, group = c.group_size();
    const std::size_t n = cache.length(layer, kv_head);
    std::vector<float> out(n, 0.0f);
    std::vector<double> proj(c.hidden_dim);
    for (std::size_t i = 0; i < n; ++i) {
        auto v = cache.value(layer, kv_head, i);
        double acc = 0.0;
        for (std::size_t h = kv_head * group; h < (kv_head + 1) * group; ++h) {
            for (std::size_t r = 0; r < c.hidden_dim; ++r) {
                const float* w = wo.data().data() + r * c.q_width() + h * hd;
                double s = 0.0;
                for (std::size_t d = 0; d < hd; ++d) {
                    s += static_cast<double>(w[d]) * v[d];
                }
                proj[r] = s;
            }
            double sq = 0.0;
            for (double p : proj) sq += p * p;
            acc += std::sqrt(sq);
        }
        out[i] = static_cast<float>(acc / static_cast<double>(group));
    }
    return out;
}

std::vector<double> expected_log_scores(const KvCache& cache, std::size_t layer, std::size_t kv_head,
                                        const QueryDistribution& dist) {
    const std::size_t n = cache.length(layer, kv_head);
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = expected_log_score(cache.key(layer, kv_head, i), dist);
    }
    return out;
}

std::vector<double> expected_attention_weights(const KvCache& cache, std::size_t layer, std::size_t kv_head,
                                               std::span<const QueryDistribution> group) {
    if (group.empty()) {
        throw InvalidArgument("expected attention needs at least one query distribution");
    }
    const std::size_t n = cache.length(layer, kv_head);
    std::vector<double> mean(n, 0.0);
    for (const auto& dist : group) {
        auto logs = expected_log_scores(cache, layer, kv_head, dist);
        if (n == 0) break;
        const double mx = *std::max_element(logs.begin(), logs.end());
        double sum = 0.0;
        for (double& v : logs) {
            v = std::exp(v - mx);
            sum += v;
        }
        for (std::size_t i = 0; i < n; ++i) {
            mean[i] += logs[i] / sum;
        }
    }
    for (double& v : mean) {
        v /= static_cast<double>(group.size());
    }
    return mean;
}

ScoreVector score_expected_attention(const KvCache& cache, std::size_t layer, std::size_t kv_head,
                                     std::span<const QueryDistribution> group, double epsilon,
                                     std::span<const float> norms) {
    const std::size_t n = cache.length(layer, kv_head);
    check_norms(norms, n);
    const auto a_hat = expected_attention_weights(cache, layer, kv_head, group);
    ScoreVector out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = static_cast<float>((a_hat[i] + epsilon) * norms[i]);
    }
    return out;
}

ScoreVector score_knorm(const KvCache& cache, std::size_t layer, std::size_t kv_head) {
    const std::size_t n = cache.length(layer, kv_head);
    ScoreVector out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = -l2_norm(cache.key(layer, kv_head, i));
    }
    return out;
}

ScoreVector score_streaming(const KvCache& cache, std::size_t layer, std::size_t kv_head, std::size_t sinks,
                            std::size_t recent) {
    const std::size_t n = cache.length(layer, kv_head);
    ScoreVector out(n, 0.0f);
    for (std::size_t i = 0; i < n; ++i) {
        if (i < sinks) {
            out[i] = 2.0f;
        } else if (i + recent >= n) {
            out[i] = 1.0f;
        }
    }
    return out;
}

ScoreVector score_tova(const KvCache& cache, std::size_t layer, std::size_t kv_head, const AttentionTrace& trace,
                       HeadGroup group) {
    const std::size_t n = cache.length(layer, kv_head);
    auto positions = cache.positions(layer, kv_head);
    ScoreVector out(n, 0.0f);
    for (std::size_t h = group.first; h < group.first + group.count; ++h) {
        const AttentionRow& row = require_rows(trace, layer, h).back();
        for (std::size_t i = 0; i < n; ++i) {
            out[i] += row.weight_at(positions[i]);
        }
    }
    for (float& v : out) {
        v /= static_cast<float>(group.count);
    }
    return out;
}

ScoreVector score_snapkv(const KvCache& cache, std::size_t layer, std::size_t kv_head, const AttentionTrace& trace,
                         HeadGroup group, std::size_t obs_window, std::size_t kernel, bool protect_window) {
    if (obs_window == 0 || kernel == 0) {
        throw InvalidArgument("snapkv window and kernel must be positive");
    }
    const std::size_t n = cache.length(layer, kv_head);
    auto positions = cache.positions(layer, kv_head);
    std::vector<double> mean(n, 0.0);
    std::vector<std::int64_t> observed;
    for (std::size_t h = group.first; h < group.first + group.count; ++h) {
        const auto& rows = require_rows(trace, layer, h);
        const std::size_t take = std::min(obs_window, rows.size());
        for (auto it = rows.end() - static_cast<std::ptrdiff_t>(take); it != rows.end(); ++it) {
            for (std::size_t i = 0; i < n; ++i) {
                mean[i] += it->weight_at(positions[i]) / static_cast<double>(take);
            }
            observed.push_back(it->query_position);
        }
    }
    for (double& v : mean) {
        v /= static_cast<double>(group.count);
    }
    const std::size_t half = kernel / 2;
    ScoreVector out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t lo = i >= half ? i - half : 0;
        const std::size_t hi = std::min(n - 1, i + (kernel - 1 - half));
        double m = mean[lo];
        for (std::size_t j = lo + 1; j <= hi; ++j) {
            m = std::max(m, mean[j]);
        }
        out[i] = static_cast<float>(m);
    }
    if (protect_window) {
        std::sort(observed.begin(), observed.end());
        for (std::size_t i = 0; i < n; ++i) {
            if (std::binary_search(observed.begin(), observed.end(), positions[i])) {
                out[i] = 2.0f;
            }
        }
    }
    return out;
}

ScoreVector score_keydiff(const KvCache& cache, std::size_t layer, std::size_t kv_head) {
    const std::size_t n = cache.length(layer, kv_head);
    const std::size_t d = cache.head_dim();
    std::vector<double> anchor(d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        auto k = cache.key(layer, kv_head, i);
        for (std::size_t j = 0; j < d; ++j) anchor[j] += k[j];
    }
    double anchor_norm = 0.0;
    for (double& a : anchor) {
        a /= static_cast<double>(std::max<std::size_t>(n, 1));
        anchor_norm += a * a;
    }
    anchor_norm = std::sqrt(anchor_norm);
    ScoreVector out(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto k = cache.key(layer, kv_head, i);
        double dotp = 0.0, kn = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            dotp += k[j] * anchor[j];
            kn += static_cast<double>(k[j]) * k[j];
        }
        kn = std::sqrt(kn);
        const double cosine = (kn > 0.0 && anchor_norm > 0.0) ? dotp / (kn * anchor_norm) : 0.0;
        out[i] = static_cast<float>(1.0 - std::clamp(cosine, -1.0, 1.0));
    }
    return out;
}

ScoreVector score_oracle(const KvCache& cache, std::size_t layer, std::size_t kv_head,
                         const AttentionTrace& future_trace, HeadGroup group, std::span<const float> norms) {
    const std::size_t n = cache.length(layer, kv_head);
    check_norms(norms, n);
    auto positions = cache.positions(layer, kv_head);
    std::vector<double> acc(n, 0.0);
    for (std::size_t h = group.first; h < group.first + group.count; ++h) {
        const auto& rows = require_rows(future_trace, layer, h);
        for (const auto& row : rows) {
            for (std::size_t i = 0; i < n; ++i) {
                acc[i] += row.weight_at(positions[i]) / static_cast<double>(rows.size());
            }
        }
    }
    ScoreVector out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = static_cast<float>(acc[i] / static_cast<double>(group.count) * norms[i]);
    }
    return out;
}

ScoreVector score_random(std::size_t n, std::uint64_t seed, std::size_t layer, std::size_t kv_head) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(layer), static_cast<std::uint32_t>(kv_head)};
    std::mt19937_64 rng(seq);
    std::uniform_real_distribution<float> uni(0.0f, 1.0f);
    ScoreVector out(n);
    for (float& v : out) v = uni(rng);
    return out;
}

std::vector<std::vector<std::size_t>> brute_force_allocation(std::span<const ScoreVector> scores,
                                                             std::size_t layer_budget, std::size_t min_keep) {
    struct Item {
        float score;
        std::size_t index;
        std::size_t head;
    };
    std::vector<Item> items;
    for (std::size_t h = 0; h < scores.size(); ++h) {
        for (std::size_t i = 0; i < scores[h].size(); ++i) {
            items.push_back({scores[h][i], i, h});
        }
    }
    if (items.size() > 20) {
        throw InvalidArgument("brute_force_allocation: at most 20 entries");
    }
    // Global rank: score desc, position asc, head asc.
    std::vector<std::size_t> order(items.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (items[a].score != items[b].score) {
            return items[a].score > items[b].score;
        }
        if (items[a].index != items[b].index) {
            return items[a].index < items[b].index;
        }
        return items[a].head < items[b].head;
    });
    std::vector<std::size_t> rank(items.size());
    for (std::size_t r = 0; r < order.size(); ++r) {
        rank[order[r]] = r;
    }

    std::vector<std::size_t> best_ranks;
    std::uint32_t best_mask = 0;
    bool found = false;
    std::vector<std::size_t> per_head(scores.size());
    std::vector<std::size_t> ranks;
    for (std::uint32_t mask = 0; mask < (1u << items.size()); ++mask) {
        if (static_cast<std::size_t>(std::popcount(mask)) != layer_budget) {
            continue;
        }
        std::fill(per_head.begin(), per_head.end(), 0);
        ranks.clear();
        for (std::size_t e = 0; e < items.size(); ++e) {
            if (mask >> e & 1u) {
                ++per_head[items[e].head];
                ranks.push_back(rank[e]);
            }
        }
        bool feasible = true;
        for (std::size_t h = 0; h < scores.size(); ++h) {
            feasible = feasible && per_head[h] >= std::min(min_keep, scores[h].size());
        }
        if (!feasible) {
            continue;
        }
        std::sort(ranks.begin(), ranks.end());
        if (!found || ranks < best_ranks) {
            best_ranks = ranks;
            best_mask = mask;
            found = true;
        }
    }
    if (!found) {
        throw InvalidArgument("brute_force_allocation: no feasible subset");
    }
    std::vector<std::vector<std::size_t>> out(scores.size());
    for (std::size_t e = 0; e < items.size(); ++e) {
        if (best_mask >> e & 1u) {
            out[items[e].head].push_back(items[e].index);
        }
    }
    for (auto& h : out) {
        std::sort(h.begin(), h.end());
    }
    return out;
}

} // namespace kvc
