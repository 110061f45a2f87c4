#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "kvc/controller.hpp"
#include "kvc/errors.hpp"
#include "kvc/policies.hpp"
#include "test_support.hpp"

using namespace kvc;

namespace {

KvCache head_from_keys(const std::vector<std::vector<float>>& keys, const std::vector<std::vector<float>>& values) {
    KvCache cache(1, 1, keys.front().size());
    for (std::size_t i = 0; i < keys.size(); ++i) cache.append(0, 0, keys[i], values[i], static_cast<std::int64_t>(i));
    return cache;
}

KvCache seeded_head(std::size_t n, std::size_t d, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<std::vector<float>> k, v;
    for (std::size_t i = 0; i < n; ++i) {
        k.push_back(fixtures::gaussian_vector(d, rng));
        v.push_back(fixtures::gaussian_vector(d, rng));
    }
    return head_from_keys(k, v);
}

std::vector<std::size_t> kept(const ScoreVector& s, const KvCache& cache, std::size_t k) {
    return top_k_indices(s, cache.positions(0, 0), k);
}

/// Feeds a row into head (0, h) of a trace.
void push_row(AttentionTrace& trace, std::size_t h, std::int64_t qpos, std::vector<std::int64_t> pos,
              std::vector<float> w) {
    trace.on_attention(0, h, qpos, pos, w, w);
}

std::vector<std::int64_t> iota_positions(std::size_t n) {
    std::vector<std::int64_t> p(n);
    std::iota(p.begin(), p.end(), 0);
    return p;
}

} // namespace

TEST(PolicyIds, ParseAndName) {
    for (PolicyId id : all_policies()) EXPECT_EQ(parse_policy(policy_name(id)), id);
    EXPECT_EQ(all_policies().size(), 9u);
    EXPECT_EQ(parse_policy("expected_attention"), PolicyId::ExpectedAttention);
    EXPECT_THROW(parse_policy("h2o"), InvalidArgument);
}

TEST(CompressionConfigTest, DefaultsAndValidation) {
    CompressionConfig c;
    EXPECT_DOUBLE_EQ(c.epsilon, 0.02);
    EXPECT_EQ(c.rope_window, 512);
    EXPECT_EQ(c.decode_interval, 512);
    EXPECT_EQ(c.stats_buffer, 128u);
    EXPECT_FALSE(c.use_wo_v);
    EXPECT_TRUE(c.head_adaptive);
    EXPECT_EQ(c.min_keep_per_head, 1u);
    EXPECT_NO_THROW(c.validate());
    c.ratio = 1.5;
    EXPECT_THROW(c.validate(), InvalidArgument);
    c.ratio = -0.1;
    EXPECT_THROW(c.validate(), InvalidArgument);
}

TEST(ExpectedAttention, IdenticalKeysAndNormsGiveUniformScores) {
    const std::vector<float> k{0.3f, -1.0f, 0.5f, 2.0f};
    const std::vector<float> v{1, 0, 0, 0};
    auto cache = head_from_keys({k, k, k, k, k}, {v, v, v, v, v});
    QueryMoments m(4);
    m.update(std::vector<float>{1, 2, 3, 4});
    m.update(std::vector<float>{0, 1, -1, 2});
    const QueryDistribution dist[1] = {finalize_moments(m, AveragedRope::identity(4), 1e-5)};
    const auto s = score_expected_attention(cache, 0, 0, dist, 0.02, value_norms(cache, 0, 0));
    for (float x : s) EXPECT_NEAR(x, s[0], 1e-7f);
    EXPECT_NEAR(s[0], 0.2f + 0.02f, 1e-6f);
}

TEST(ExpectedAttention, EmptyHeadGivesEmptyScores) {
    KvCache cache(1, 1, 4);
    QueryMoments m(4);
    m.update(std::vector<float>{1, 2, 3, 4});
    const QueryDistribution dist[1] = {finalize_moments(m, AveragedRope::identity(4), 1e-5)};
    EXPECT_TRUE(score_expected_attention(cache, 0, 0, dist, 0.02, {}).empty());
}

TEST(ExpectedAttention, EpsilonZeroRankingMatchesUnnormalizedScore) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto cache = seeded_head(16, 8, seed);
        QueryMoments m(8);
        std::mt19937_64 rng(seed + 100);
        for (int i = 0; i < 30; ++i) m.update(fixtures::gaussian_vector(8, rng));
        const QueryDistribution dist[1] = {finalize_moments(m, AveragedRope::identity(8), 1e-5)};
        const auto norms = value_norms(cache, 0, 0);
        const auto s = score_expected_attention(cache, 0, 0, dist, 0.0, norms);
        const auto logs = expected_log_scores(cache, 0, 0, dist[0]);
        ScoreVector z(16);
        for (std::size_t i = 0; i < 16; ++i) z[i] = static_cast<float>(std::exp(logs[i]) * norms[i]);
        for (std::size_t k = 1; k <= 16; ++k) EXPECT_EQ(kept(s, cache, k), kept(z, cache, k));
    }
}

TEST(ExpectedAttention, InvariantToCommonValueScale) {
    auto cache = seeded_head(12, 4, 3);
    auto scaled = KvCache(1, 1, 4);
    for (std::size_t i = 0; i < 12; ++i) {
        std::vector<float> v(cache.value(0, 0, i).begin(), cache.value(0, 0, i).end());
        for (float& x : v) x *= 3.5f;
        scaled.append(0, 0, cache.key(0, 0, i), v, static_cast<std::int64_t>(i));
    }
    QueryMoments m(4);
    std::mt19937_64 rng(5);
    for (int i = 0; i < 20; ++i) m.update(fixtures::gaussian_vector(4, rng));
    const QueryDistribution dist[1] = {finalize_moments(m, AveragedRope::identity(4), 1e-5)};
    const auto a = score_expected_attention(cache, 0, 0, dist, 0.02, value_norms(cache, 0, 0));
    const auto b = score_expected_attention(scaled, 0, 0, dist, 0.02, value_norms(scaled, 0, 0));
    for (std::size_t k = 1; k <= 12; ++k) EXPECT_EQ(kept(a, cache, k), kept(b, scaled, k));
}

TEST(ExpectedAttention, MatchesDenseMatrixOracle) {
    // Full pipeline (prefill stats -> R̄ -> ridge -> score) against a dense
    // evaluation with explicitly materialized R̄, μ̄ and Σ̄.
    const auto model = fixtures::seeded_model(21);
    const auto& c = model.config();
    const auto tokens = fixtures::seeded_tokens(16, c.vocab_size, 2);
    auto cache = model.make_cache();
    QueryStatistics stats(c.n_layers, c.n_heads, c.head_dim, QueryStatistics::Mode::Streaming);
    model.forward(tokens, cache, &stats);

    CompressionConfig cfg;
    cfg.rope_window = 64;
    cfg.ridge = 1e-3;
    const std::size_t d = c.head_dim;
    Eigen::MatrixXd rbar = Eigen::MatrixXd::Zero(d, d);
    for (std::int64_t p = 16; p < 16 + 64; ++p) {
        const auto r = rope_matrix(p, model.rope());
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < d; ++j) rbar(i, j) += r.at(i, j) / 64.0;
    }
    for (std::size_t layer = 0; layer < c.n_layers; ++layer) {
        const ScoringInputs inputs{&stats, nullptr, nullptr};
        const auto scores = score_layer(model, cache, layer, cfg, inputs, 0);
        for (std::size_t g = 0; g < c.n_kv_heads; ++g) {
            const std::size_t n = cache.length(layer, g);
            std::vector<double> a_hat(n, 0.0);
            for (std::size_t h = g * c.group_size(); h < (g + 1) * c.group_size(); ++h) {
                const auto m = stats.moments(layer, h);
                Eigen::VectorXd mu(d);
                for (std::size_t i = 0; i < d; ++i) mu(i) = m.mean()[i];
                const auto cv = m.covariance();
                Eigen::MatrixXd sigma(d, d);
                for (std::size_t i = 0; i < d; ++i)
                    for (std::size_t j = 0; j < d; ++j) sigma(i, j) = cv[i * d + j];
                sigma += cfg.ridge * sigma.trace() / static_cast<double>(d) * Eigen::MatrixXd::Identity(d, d);
                const Eigen::VectorXd mu_bar = rbar * mu;
                const Eigen::MatrixXd sigma_bar = rbar * sigma * rbar.transpose();
                std::vector<double> z(n);
                for (std::size_t i = 0; i < n; ++i) {
                    Eigen::VectorXd k(d);
                    for (std::size_t j = 0; j < d; ++j) k(j) = cache.key(layer, g, i)[j];
                    z[i] = std::exp(mu_bar.dot(k) / std::sqrt(double(d)) + k.dot(sigma_bar * k) / (2.0 * double(d)));
                }
                const double total = std::accumulate(z.begin(), z.end(), 0.0);
                for (std::size_t i = 0; i < n; ++i) a_hat[i] += z[i] / total / double(c.group_size());
            }
            ScoreVector expect(n);
            for (std::size_t i = 0; i < n; ++i) {
                expect[i] = static_cast<float>((a_hat[i] + cfg.epsilon) * l2_norm(cache.value(layer, g, i)));
                EXPECT_NEAR(scores[g][i], expect[i], 1e-5f * std::max(1.0f, std::abs(expect[i])));
            }
            auto pos = cache.positions(layer, g);
            EXPECT_EQ(top_k_indices(scores[g], pos, n / 2), top_k_indices(expect, pos, n / 2));
        }
    }
}

TEST(ExpectedAttention, WoProjectedNormsUseHeadSlices) {
    const auto model = fixtures::seeded_model(22);
    auto cache = model.make_cache();
    model.forward(fixtures::seeded_tokens(5, 64, 1), cache);
    const auto& c = model.config();
    const auto norms = projected_value_norms(model, cache, 1, 1);
    const auto& wo = model.weights().layers[1].wo;
    for (std::size_t i = 0; i < 5; ++i) {
        double acc = 0.0;
        for (std::size_t h = 2; h < 4; ++h) {
            std::vector<float> padded(c.q_width(), 0.0f);
            auto v = cache.value(1, 1, i);
            std::copy(v.begin(), v.end(), padded.begin() + static_cast<std::ptrdiff_t>(h * c.head_dim));
            std::vector<float> out(c.hidden_dim);
            matvec(wo, padded, out);
            acc += l2_norm(out);
        }
        EXPECT_NEAR(norms[i], acc / 2.0, 1e-5);
    }
}

TEST(KNorm, KeepsLowestNormKeys) {
    auto cache = head_from_keys({{3, 0}, {1, 0}, {0, 2}}, {{1, 1}, {1, 1}, {1, 1}});
    const auto s = score_knorm(cache, 0, 0);
    EXPECT_EQ(kept(s, cache, 1), (std::vector<std::size_t>{1}));
    EXPECT_EQ(kept(s, cache, 2), (std::vector<std::size_t>{1, 2}));
}

TEST(KNorm, EqualNormsTieToLowerPosition) {
    auto cache = head_from_keys({{1, 0}, {0, 1}, {-1, 0}}, {{1, 1}, {1, 1}, {1, 1}});
    EXPECT_EQ(kept(score_knorm(cache, 0, 0), cache, 2), (std::vector<std::size_t>{0, 1}));
}

TEST(KNorm, MatchesSortOracle) {
    auto cache = seeded_head(20, 6, 9);
    std::vector<std::size_t> order(20);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return l2_norm(cache.key(0, 0, a)) < l2_norm(cache.key(0, 0, b));
    });
    std::vector<std::size_t> expect(order.begin(), order.begin() + 7);
    std::sort(expect.begin(), expect.end());
    EXPECT_EQ(kept(score_knorm(cache, 0, 0), cache, 7), expect);
}

TEST(Streaming, SinksPlusRecent) {
    auto cache = seeded_head(10, 2, 1);
    const auto s = score_streaming(cache, 0, 0, 2, 3);
    EXPECT_EQ(kept(s, cache, 5), (std::vector<std::size_t>{0, 1, 7, 8, 9}));
}

TEST(Streaming, SinksCoveringEverything) {
    auto cache = seeded_head(3, 2, 1);
    const auto s = score_streaming(cache, 0, 0, 5, 0);
    EXPECT_EQ(s, ScoreVector(3, 2.0f));
}

TEST(Streaming, MatchesIndexConstruction) {
    auto cache = seeded_head(30, 2, 1);
    for (std::size_t sinks : {0u, 1u, 4u})
        for (std::size_t recent : {0u, 5u, 12u}) {
            const auto s = score_streaming(cache, 0, 0, sinks, recent);
            std::vector<std::size_t> expect;
            for (std::size_t i = 0; i < 30; ++i)
                if (i < sinks || i >= 30 - recent) expect.push_back(i);
            EXPECT_EQ(kept(s, cache, sinks + recent), expect);
        }
}

TEST(Tova, SingleEntryAndUniformRow) {
    auto one = seeded_head(1, 2, 1);
    AttentionTrace t1(1, 1);
    push_row(t1, 0, 0, {0}, {1.0f});
    EXPECT_EQ(score_tova(one, 0, 0, t1, {0, 1}), ScoreVector{1.0f});

    auto four = seeded_head(4, 2, 1);
    AttentionTrace t4(1, 1);
    push_row(t4, 0, 3, iota_positions(4), {0.25f, 0.25f, 0.25f, 0.25f});
    EXPECT_EQ(score_tova(four, 0, 0, t4, {0, 1}), ScoreVector(4, 0.25f));
}

TEST(Tova, ReadsLastRowAveragedOverGroup) {
    auto cache = seeded_head(3, 2, 1);
    AttentionTrace trace(1, 2);
    push_row(trace, 0, 1, {0, 1}, {0.5f, 0.5f});
    push_row(trace, 0, 2, {0, 1, 2}, {0.2f, 0.3f, 0.5f});
    push_row(trace, 1, 2, {0, 1, 2}, {0.6f, 0.3f, 0.1f});
    const auto s = score_tova(cache, 0, 0, trace, {0, 2});
    EXPECT_NEAR(s[0], 0.4f, 1e-7f);
    EXPECT_NEAR(s[1], 0.3f, 1e-7f);
    EXPECT_NEAR(s[2], 0.3f, 1e-7f);
}

TEST(SnapKv, DegenerateWindowIsTova) {
    auto cache = seeded_head(5, 2, 1);
    AttentionTrace trace(1, 1);
    push_row(trace, 0, 3, iota_positions(4), {0.1f, 0.2f, 0.3f, 0.4f});
    push_row(trace, 0, 4, iota_positions(5), {0.3f, 0.1f, 0.05f, 0.25f, 0.3f});
    EXPECT_EQ(score_snapkv(cache, 0, 0, trace, {0, 1}, 1, 1, false), score_tova(cache, 0, 0, trace, {0, 1}));
}

TEST(SnapKv, UniformRowsGiveUniformScores) {
    auto cache = seeded_head(4, 2, 1);
    AttentionTrace trace(1, 1);
    for (int q = 0; q < 3; ++q) push_row(trace, 0, 10 + q, iota_positions(4), {0.25f, 0.25f, 0.25f, 0.25f});
    EXPECT_EQ(score_snapkv(cache, 0, 0, trace, {0, 1}, 3, 3), ScoreVector(4, 0.25f));
}

TEST(SnapKv, MeanThenMaxPoolOracle) {
    const std::size_t n = 12;
    auto cache = seeded_head(n, 2, 1);
    AttentionTrace trace(1, 1);
    std::mt19937_64 rng(7);
    std::vector<std::vector<float>> rows;
    for (int q = 0; q < 6; ++q) {
        auto w = fixtures::gaussian_vector(n, rng);
        float sum = 0.0f;
        for (float& x : w) sum += (x = std::abs(x));
        for (float& x : w) x /= sum;
        rows.push_back(w);
        push_row(trace, 0, 20 + q, iota_positions(n), w);
    }
    std::vector<double> mean(n, 0.0);
    for (int q = 2; q < 6; ++q)
        for (std::size_t i = 0; i < n; ++i) mean[i] += rows[q][i] / 4.0;
    const auto s = score_snapkv(cache, 0, 0, trace, {0, 1}, 4, 3);
    for (std::size_t i = 0; i < n; ++i) {
        double m = mean[i];
        if (i > 0) m = std::max(m, mean[i - 1]);
        if (i + 1 < n) m = std::max(m, mean[i + 1]);
        EXPECT_NEAR(s[i], m, 1e-6);
    }
}

TEST(SnapKv, ObservationWindowIsProtected) {
    auto cache = seeded_head(6, 2, 1);
    AttentionTrace trace(1, 1);
    push_row(trace, 0, 4, iota_positions(5), {0.9f, 0.1f, 0.0f, 0.0f, 0.0f});
    push_row(trace, 0, 5, iota_positions(6), {0.9f, 0.1f, 0.0f, 0.0f, 0.0f, 0.0f});
    const auto s = score_snapkv(cache, 0, 0, trace, {0, 1}, 2, 1);
    EXPECT_EQ(kept(s, cache, 2), (std::vector<std::size_t>{4, 5}));
}

TEST(KeyDiff, EqualKeysScoreZero) {
    auto cache = head_from_keys({{1, 2}, {1, 2}, {1, 2}}, {{1, 1}, {1, 1}, {1, 1}});
    for (float s : score_keydiff(cache, 0, 0)) EXPECT_NEAR(s, 0.0f, 1e-6f);
}

TEST(KeyDiff, OppositeKeyScoresTwoAndRanksFirst) {
    auto cache = head_from_keys({{1, 0}, {1, 0}, {1, 0}, {-1, 0}}, {{1, 1}, {1, 1}, {1, 1}, {1, 1}});
    const auto s = score_keydiff(cache, 0, 0);
    EXPECT_NEAR(s[3], 2.0f, 1e-6f);
    EXPECT_EQ(kept(s, cache, 1), (std::vector<std::size_t>{3}));
}

TEST(KeyDiff, MatchesCosineComputation) {
    auto cache = seeded_head(10, 5, 4);
    std::vector<double> mean(5, 0.0);
    for (std::size_t i = 0; i < 10; ++i)
        for (std::size_t j = 0; j < 5; ++j) mean[j] += cache.key(0, 0, i)[j] / 10.0;
    const auto s = score_keydiff(cache, 0, 0);
    for (std::size_t i = 0; i < 10; ++i) {
        double dp = 0, a = 0, b = 0;
        for (std::size_t j = 0; j < 5; ++j) {
            dp += cache.key(0, 0, i)[j] * mean[j];
            a += mean[j] * mean[j];
            b += cache.key(0, 0, i)[j] * cache.key(0, 0, i)[j];
        }
        EXPECT_NEAR(s[i], 1.0 - dp / std::sqrt(a * b), 1e-6);
    }
}

TEST(Oracle, FutureFocusedEntryIsMaximal) {
    auto cache = seeded_head(4, 2, 1);
    AttentionTrace future(1, 1);
    for (int q = 0; q < 3; ++q) push_row(future, 0, 4 + q, iota_positions(4 + q), {0, 0, 1, 0, 0, 0, 0});
    const auto s = score_oracle(cache, 0, 0, future, {0, 1}, value_norms(cache, 0, 0));
    EXPECT_EQ(kept(s, cache, 1), (std::vector<std::size_t>{2}));
}

TEST(Oracle, UniformFutureWithEqualNormsTies) {
    auto cache = head_from_keys({{1, 0}, {0, 1}, {1, 1}}, {{1, 0}, {0, 1}, {-1, 0}});
    AttentionTrace future(1, 1);
    push_row(future, 0, 3, {0, 1, 2, 3}, {0.25f, 0.25f, 0.25f, 0.25f});
    const auto s = score_oracle(cache, 0, 0, future, {0, 1}, value_norms(cache, 0, 0));
    EXPECT_EQ(s, ScoreVector(3, 0.25f));
}

TEST(Oracle, EqualsDirectAccumulationFromTrace) {
    const auto model = fixtures::seeded_model(23);
    const auto tokens = fixtures::seeded_tokens(30, 64, 3);
    auto cache = model.make_cache();
    model.forward(std::span(tokens).first(20), cache);
    auto future_cache = cache;
    AttentionTrace future(2, 4, AttentionTrace::kUnbounded, 20);
    model.forward(std::span(tokens).subspan(20), future_cache, &future);
    const auto norms = value_norms(cache, 1, 0);
    const auto s = score_oracle(cache, 1, 0, future, {0, 2}, norms);
    for (std::size_t i = 0; i < 20; ++i) {
        double acc = 0.0;
        for (std::size_t h = 0; h < 2; ++h)
            for (const auto& row : future.rows(1, h)) acc += row.weights[i] / 10.0 / 2.0;
        EXPECT_NEAR(s[i], acc * norms[i], 1e-6);
    }
}

TEST(Random, ReproducibleAndSeedDependent) {
    EXPECT_EQ(score_random(10, 42, 0, 1), score_random(10, 42, 0, 1));
    EXPECT_NE(score_random(10, 42, 0, 1), score_random(10, 43, 0, 1));
    EXPECT_NE(score_random(10, 42, 0, 1), score_random(10, 42, 1, 1));
}

TEST(TopK, HigherScoreThenLowerPosition) {
    const ScoreVector s{1, 3, 3, 2, 3};
    const std::vector<std::int64_t> pos{0, 1, 2, 3, 4};
    EXPECT_EQ(top_k_indices(s, pos, 2), (std::vector<std::size_t>{1, 2}));
    EXPECT_EQ(top_k_indices(s, pos, 0), std::vector<std::size_t>{});
}
