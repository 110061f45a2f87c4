#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "kvc/errors.hpp"
#include "kvc/model.hpp"
#include "test_support.hpp"

using namespace kvc;

namespace {

std::filesystem::path scratch_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("kvc_model_test_" + name);
    std::filesystem::remove_all(dir);
    return dir;
}

std::vector<double> rms(const std::vector<double>& x, std::span<const float> w, double eps) {
    double ss = 0.0;
    for (double v : x) ss += v * v;
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + eps);
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * inv * w[i];
    return out;
}

std::vector<double> mv(const Tensor& w, const std::vector<double>& x) {
    std::vector<double> y(w.dim(0), 0.0);
    for (std::size_t o = 0; o < w.dim(0); ++o)
        for (std::size_t i = 0; i < w.dim(1); ++i) y[o] += static_cast<double>(w.at(o, i)) * x[i];
    return y;
}

void rotate(std::vector<double>& x, std::size_t offset, std::size_t d, std::int64_t pos, double theta) {
    for (std::size_t j = 0; j < d / 2; ++j) {
        const double ang = static_cast<double>(pos) * std::pow(theta, -2.0 * static_cast<double>(j) / static_cast<double>(d));
        const double a = x[offset + 2 * j], b = x[offset + 2 * j + 1];
        x[offset + 2 * j] = a * std::cos(ang) - b * std::sin(ang);
        x[offset + 2 * j + 1] = a * std::sin(ang) + b * std::cos(ang);
    }
}

/// Whole-sequence causal forward in double with no cache, written directly
/// from the architecture description.
std::vector<std::vector<double>> reference_logits(const Model& model, std::span<const TokenId> tokens) {
    const auto& c = model.config();
    const auto& W = model.weights();
    const std::size_t n = tokens.size(), d = c.head_dim;
    std::vector<std::vector<double>> h(n);
    for (std::size_t t = 0; t < n; ++t) {
        auto row = W.embed.row(static_cast<std::size_t>(tokens[t]));
        h[t].assign(row.begin(), row.end());
    }
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        const auto& L = W.layers[l];
        std::vector<std::vector<double>> q(n), k(n), v(n);
        for (std::size_t t = 0; t < n; ++t) {
            const auto x = rms(h[t], L.norm_attn.data(), c.norm_eps);
            q[t] = mv(L.wq, x);
            k[t] = mv(L.wk, x);
            v[t] = mv(L.wv, x);
            auto head_norm = [&](std::vector<double>& vec, std::size_t heads, const Tensor& w) {
                for (std::size_t hh = 0; hh < heads; ++hh) {
                    std::vector<double> part(vec.begin() + hh * d, vec.begin() + (hh + 1) * d);
                    part = rms(part, w.data(), c.norm_eps);
                    std::copy(part.begin(), part.end(), vec.begin() + hh * d);
                }
            };
            if (L.q_norm) head_norm(q[t], c.n_heads, *L.q_norm);
            if (L.k_norm) head_norm(k[t], c.n_kv_heads, *L.k_norm);
            for (std::size_t hh = 0; hh < c.n_heads; ++hh) rotate(q[t], hh * d, d, static_cast<std::int64_t>(t), c.rope_theta);
            for (std::size_t g = 0; g < c.n_kv_heads; ++g) rotate(k[t], g * d, d, static_cast<std::int64_t>(t), c.rope_theta);
        }
        for (std::size_t t = 0; t < n; ++t) {
            std::vector<double> attn(c.q_width(), 0.0);
            for (std::size_t hh = 0; hh < c.n_heads; ++hh) {
                const std::size_t g = hh * c.n_kv_heads / c.n_heads;
                std::vector<double> s(t + 1);
                double mx = -INFINITY;
                for (std::size_t i = 0; i <= t; ++i) {
                    double dp = 0.0;
                    for (std::size_t e = 0; e < d; ++e) dp += q[t][hh * d + e] * k[i][g * d + e];
                    s[i] = dp / std::sqrt(static_cast<double>(d));
                    mx = std::max(mx, s[i]);
                }
                double z = 0.0;
                for (auto& x : s) z += (x = std::exp(x - mx));
                for (std::size_t i = 0; i <= t; ++i)
                    for (std::size_t e = 0; e < d; ++e) attn[hh * d + e] += s[i] / z * v[i][g * d + e];
            }
            const auto o = mv(L.wo, attn);
            for (std::size_t e = 0; e < c.hidden_dim; ++e) h[t][e] += o[e];
            const auto x = rms(h[t], L.norm_mlp.data(), c.norm_eps);
            auto gate = mv(L.w1, x);
            const auto up = mv(L.w3, x);
            for (std::size_t f = 0; f < gate.size(); ++f) gate[f] = gate[f] / (1.0 + std::exp(-gate[f])) * up[f];
            const auto down = mv(L.w2, gate);
            for (std::size_t e = 0; e < c.hidden_dim; ++e) h[t][e] += down[e];
        }
    }
    std::vector<std::vector<double>> logits(n);
    for (std::size_t t = 0; t < n; ++t) logits[t] = mv(W.lm_head, rms(h[t], W.final_norm.data(), c.norm_eps));
    return logits;
}

class RowCollector : public ForwardObserver {
public:
    void on_attention(std::size_t layer, std::size_t head, std::int64_t, std::span<const std::int64_t>,
                      std::span<const float> weights, std::span<const float>) override {
        if (layer == 0 && head == 0) rows.emplace_back(weights.begin(), weights.end());
    }
    std::vector<std::vector<float>> rows;
};

class ResidualProbe : public ForwardObserver {
public:
    void on_layer_input(std::size_t layer, std::int64_t, std::span<const float> h) override {
        if (layer == 0) in.assign(h.begin(), h.end());
    }
    void on_attention_output(std::size_t layer, std::int64_t, std::span<const float> h) override {
        if (layer == 0) out.assign(h.begin(), h.end());
    }
    std::vector<float> in, out;
};

} // namespace

TEST(ModelConfig, JsonRoundTrip) {
    auto c = fixtures::small_config();
    c.qk_norm = true;
    EXPECT_EQ(ModelConfig::from_json(c.to_json()), c);
}

TEST(ModelConfig, MissingFieldAndBadGroupRejected) {
    EXPECT_THROW(ModelConfig::from_json(R"({"n_layers": 1})"), FormatError);
    EXPECT_THROW(ModelConfig::from_json("not json"), FormatError);
    auto c = fixtures::small_config();
    c.n_kv_heads = 3;
    EXPECT_THROW(c.validate(), InvalidArgument);
}

TEST(ModelIo, ZeroWeightModelRoundTripsBitIdentically) {
    auto c = fixtures::small_config(1, 2, 1);
    auto m = random_model(c, {});
    auto tensors = m.weights().to_tensors();
    for (auto& [name, t] : tensors) std::fill(t.data().begin(), t.data().end(), 0.0f);
    const Model zero(c, ModelWeights::from_tensors(c, tensors));
    const auto dir = scratch_dir("zero");
    save_model(dir, zero);
    const auto back = load_model(dir);
    EXPECT_EQ(back.config(), c);
    EXPECT_EQ(back.weights().to_tensors(), tensors);
    std::filesystem::remove_all(dir);
}

TEST(ModelIo, TamperedMagicIsBadMagic) {
    const auto dir = scratch_dir("magic");
    save_model(dir, fixtures::seeded_model(1, fixtures::small_config(1, 2, 1)));
    {
        std::fstream f(dir / "weights.kvt", std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(0);
        f.write("XXXX", 4);
    }
    EXPECT_THROW(load_model(dir), BadMagic);
    std::filesystem::remove_all(dir);
}

TEST(ModelIo, MissingTensorAndExtentMismatchAreDistinct) {
    const auto c = fixtures::small_config(1, 2, 1);
    auto tensors = fixtures::seeded_model(2, c).weights().to_tensors();
    auto missing = tensors;
    missing.erase("layers.0.attn.wk");
    EXPECT_THROW(ModelWeights::from_tensors(c, missing), MissingTensor);
    auto wrong = tensors;
    wrong.at("lm_head") = Tensor({3, 3});
    EXPECT_THROW(ModelWeights::from_tensors(c, wrong), ExtentMismatch);
}

TEST(ModelIo, MissingDirectoryIsIoError) {
    EXPECT_THROW(load_model("/nonexistent/kvc/model"), IoError);
}

TEST(Forward, SingleTokenAttendsToItself) {
    const auto model = fixtures::seeded_model(3);
    auto cache = model.make_cache();
    RowCollector rows;
    const std::vector<TokenId> tok{5};
    model.forward(tok, cache, &rows);
    ASSERT_EQ(rows.rows.size(), 1u);
    ASSERT_EQ(rows.rows[0].size(), 1u);
    EXPECT_FLOAT_EQ(rows.rows[0][0], 1.0f);
    EXPECT_EQ(cache.length(0, 0), 1u);
    EXPECT_EQ(cache.next_position(), 1);
}

TEST(Forward, MatchesDoublePrecisionReference) {
    for (auto [heads, kv] : {std::pair{4u, 4u}, std::pair{4u, 2u}, std::pair{4u, 1u}}) {
        auto cfg = fixtures::small_config(2, heads, kv);
        cfg.qk_norm = kv == 1;
        const auto model = fixtures::seeded_model(4, cfg);
        const auto tokens = fixtures::seeded_tokens(24, model.config().vocab_size, 9);
        auto cache = model.make_cache();
        const auto logits = model.forward(tokens, cache);
        const auto ref = reference_logits(model, tokens);
        double worst = 0.0;
        for (std::size_t t = 0; t < tokens.size(); ++t)
            for (std::size_t v = 0; v < model.config().vocab_size; ++v)
                worst = std::max(worst, std::abs(logits.at(t, v) - ref[t][v]));
        EXPECT_LE(worst, 1e-4) << heads << " heads, " << kv << " kv heads";
    }
}

TEST(Forward, TwoStepDecodeEqualsTwoTokenPrefill) {
    const auto model = fixtures::seeded_model(5);
    const std::vector<TokenId> toks{3, 17};
    auto a = model.make_cache();
    const auto both = model.forward(toks, a);
    auto b = model.make_cache();
    model.forward(std::span(toks).first(1), b);
    const auto last = model.forward(std::span(toks).subspan(1), b);
    EXPECT_LE(max_abs_diff(both.row(1), last.row(0)), 1e-4f);
}

TEST(Forward, IncrementalDecodeMatchesPrefill64) {
    const auto model = fixtures::seeded_model(6);
    const auto tokens = fixtures::seeded_tokens(64, model.config().vocab_size, 3);
    auto full = model.make_cache();
    const auto logits = model.forward(tokens, full);
    auto inc = model.make_cache();
    float worst = 0.0f;
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        const auto step = model.forward(std::span(tokens).subspan(t, 1), inc);
        worst = std::max(worst, max_abs_diff(step.row(0), logits.row(t)));
    }
    EXPECT_LE(worst, 1e-4f);
}

TEST(Forward, ZeroOutputProjectionLeavesResidualUnchanged) {
    const auto c = fixtures::small_config(1, 4, 2);
    auto tensors = fixtures::seeded_model(7, c).weights().to_tensors();
    auto& wo = tensors.at("layers.0.attn.wo");
    std::fill(wo.data().begin(), wo.data().end(), 0.0f);
    const Model model(c, ModelWeights::from_tensors(c, tensors));
    auto cache = model.make_cache();
    ResidualProbe probe;
    model.forward(std::vector<TokenId>{1, 2, 3}, cache, &probe);
    EXPECT_EQ(probe.in, probe.out);
}

TEST(Forward, GqaWithDuplicatedKvHeadsEqualsSharedHeads) {
    const auto gqa_cfg = fixtures::small_config(2, 4, 2);
    const auto gqa = fixtures::seeded_model(8, gqa_cfg);
    auto mha_cfg = gqa_cfg;
    mha_cfg.n_kv_heads = 4;
    auto tensors = gqa.weights().to_tensors();
    const std::size_t d = gqa_cfg.head_dim, hid = gqa_cfg.hidden_dim;
    for (std::size_t l = 0; l < gqa_cfg.n_layers; ++l) {
        for (const char* name : {"wk", "wv"}) {
            const auto key = "layers." + std::to_string(l) + ".attn." + name;
            const Tensor src = tensors.at(key);
            Tensor dup({4 * d, hid});
            for (std::size_t h = 0; h < 4; ++h)
                for (std::size_t r = 0; r < d; ++r)
                    for (std::size_t col = 0; col < hid; ++col) dup.at(h * d + r, col) = src.at((h / 2) * d + r, col);
            tensors.at(key) = dup;
        }
    }
    const Model mha(mha_cfg, ModelWeights::from_tensors(mha_cfg, tensors));
    const auto tokens = fixtures::seeded_tokens(20, gqa_cfg.vocab_size, 4);
    auto c1 = gqa.make_cache();
    auto c2 = mha.make_cache();
    EXPECT_EQ(gqa.forward(tokens, c1), mha.forward(tokens, c2));
}

TEST(Forward, EvictionEqualsMasking) {
    const auto model = fixtures::seeded_model(9);
    const auto tokens = fixtures::seeded_tokens(40, model.config().vocab_size, 5);
    const auto prefix = std::span(tokens).first(30);
    const auto rest = std::span(tokens).subspan(30);
    auto base = model.make_cache();
    model.forward(prefix, base);

    auto evicted = base;
    AttentionMask mask;
    for (std::size_t l = 0; l < 2; ++l)
        for (std::size_t g = 0; g < 2; ++g) {
            std::vector<std::size_t> keep;
            for (std::size_t i = 0; i < 30; ++i) {
                if ((i + l + g) % 3 == 0) {
                    mask.mask(l, g, static_cast<std::int64_t>(i));
                } else {
                    keep.push_back(i);
                }
            }
            evicted.evict(l, g, keep);
        }
    auto masked = base;
    const auto a = model.forward(rest, evicted);
    const auto b = model.forward(rest, masked, nullptr, &mask);
    EXPECT_LE(max_abs_diff(a.data(), b.data()), 1e-5f);
}

TEST(Forward, PositionOverflowAndBadToken) {
    auto c = fixtures::small_config(1, 2, 1);
    c.max_position = 4;
    const auto model = fixtures::seeded_model(1, c);
    auto cache = model.make_cache();
    EXPECT_THROW(model.forward(std::vector<TokenId>{1, 2, 3, 4, 5}, cache), PositionOverflow);
    EXPECT_THROW(model.forward(std::vector<TokenId>{64}, cache), InvalidArgument);
}

TEST(GreedyDecode, ZeroNewTokensIsEmpty) {
    const auto model = fixtures::seeded_model(10);
    auto cache = model.make_cache();
    const auto out = greedy_decode(model, std::vector<TokenId>{1, 2}, 0, cache);
    EXPECT_TRUE(out.tokens.empty());
}

TEST(GreedyDecode, Deterministic) {
    const auto tokens = fixtures::seeded_tokens(8, 64, 1);
    std::vector<TokenId> first;
    for (int run = 0; run < 2; ++run) {
        const auto model = fixtures::seeded_model(11);
        auto cache = model.make_cache();
        const auto out = greedy_decode(model, tokens, 20, cache);
        if (run == 0) first = out.tokens;
        else EXPECT_EQ(out.tokens, first);
    }
    EXPECT_EQ(first.size(), 20u);
}

TEST(GreedyDecode, HookSeesPromptPlusStepTokens) {
    struct Hook : DecodeHook {
        std::vector<std::int64_t> lengths;
        void after_token(std::int64_t step, KvCache& cache) override {
            lengths.push_back(static_cast<std::int64_t>(cache.length(0, 0)) - step);
        }
    } hook;
    const auto model = fixtures::seeded_model(12);
    auto cache = model.make_cache();
    greedy_decode(model, std::vector<TokenId>{1, 2, 3}, 5, cache, &hook);
    EXPECT_EQ(hook.lengths, std::vector<std::int64_t>(5, 3));
}

TEST(Argmax, TiesGoToLowestIndex) {
    EXPECT_EQ(argmax(std::vector<float>{1, 3, 3, 2}), 1);
}
