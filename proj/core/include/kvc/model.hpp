#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "kvc/kv_cache.hpp"
#include "kvc/kvt_io.hpp"
#include "kvc/rope.hpp"
#include "kvc/tensor.hpp"
#include "kvc/trace.hpp"

namespace kvc {

using TokenId = std::int32_t;

struct ModelConfig {
    std::size_t n_layers = 0;
    std::size_t n_heads = 0;
    std::size_t n_kv_heads = 0;
    std::size_t head_dim = 0;
    std::size_t hidden_dim = 0;
    std::size_t ffn_dim = 0;
    std::size_t vocab_size = 0;
    double rope_theta = 10000.0;
    double norm_eps = 1e-5;
    std::int64_t max_position = 0;
    bool qk_norm = false;

    std::size_t group_size() const noexcept { return n_heads / n_kv_heads; }
    std::size_t q_width() const noexcept { return n_heads * head_dim; }
    std::size_t kv_width() const noexcept { return n_kv_heads * head_dim; }

    /// Throws InvalidArgument on any violated invariant.
    void validate() const;

    std::string to_json() const;
    /// Parses config.json text; field names match the struct members.
    static ModelConfig from_json(const std::string& text);

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Weight layout: every projection is stored [out x in].
struct LayerWeights {
    Tensor wq, wk, wv, wo;
    std::optional<Tensor> q_norm, k_norm;
    Tensor w1, w2, w3;
    Tensor norm_attn, norm_mlp;
};

struct ModelWeights {
    Tensor embed;
    std::vector<LayerWeights> layers;
    Tensor final_norm;
    Tensor lm_head;

    TensorMap to_tensors() const;
    /// Pulls the named tensors out of `tensors` and checks every extent
    /// against `config`. Throws MissingTensor / ExtentMismatch.
    static ModelWeights from_tensors(const ModelConfig& config, const TensorMap& tensors);
};

/// Attention logits to force to -inf during a forward pass, addressed by
/// (layer, kv_head, original position).
class AttentionMask {
public:
    void mask(std::size_t layer, std::size_t kv_head, std::int64_t position);
    bool masked(std::size_t layer, std::size_t kv_head, std::int64_t position) const;
    bool empty() const noexcept { return masked_.empty(); }

private:
    std::set<std::tuple<std::size_t, std::size_t, std::int64_t>> masked_;
};

/// Llama-style decoder: RMSNorm, SwiGLU MLP, interleaved RoPE, GQA, optional
/// per-head QK-norm.
class Model {
public:
    Model(ModelConfig config, ModelWeights weights);

    const ModelConfig& config() const noexcept { return config_; }
    const ModelWeights& weights() const noexcept { return weights_; }
    const RopeTable& rope() const noexcept { return rope_; }

    KvCache make_cache() const;

    /// Runs `tokens` at positions cache.next_position() onward, appends their
    /// post-RoPE keys and values to `cache`, and returns logits [len x vocab].
    Tensor forward(std::span<const TokenId> tokens, KvCache& cache, ForwardObserver* observer = nullptr,
                   const AttentionMask* mask = nullptr) const;

private:
    ModelConfig config_;
    ModelWeights weights_;
    RopeTable rope_;
};

/// Reads config.json + weights.kvt from `dir`.
Model load_model(const std::filesystem::path& dir);
void save_model(const std::filesystem::path& dir, const Model& model);

/// Token-id files: whitespace-separated decimal ids, UTF-8 text. An empty
/// file is an empty prompt. Throws IoError or FormatError.
std::vector<TokenId> read_prompt_file(const std::filesystem::path& path);
void write_prompt_file(const std::filesystem::path& path, std::span<const TokenId> tokens);

struct RandomModelOptions {
    std::uint64_t seed = 0;
    /// Multiplier on the 1/sqrt(fan_in) projection scale. Larger gains give
    /// peakier attention.
    float weight_gain = 1.0f;
    /// Norm of a direction shared by every token embedding, which gives the
    /// residual stream (and hence the queries) a nonzero mean.
    float embed_offset = 0.0f;
};

Model random_model(const ModelConfig& config, const RandomModelOptions& options);

/// Small GQA configuration used by tests and the desk-scale analyses.
ModelConfig tiny_config();

/// Called by greedy_decode after each generated token has been fed to the
/// model. `step` counts generated tokens from 1.
class DecodeHook {
public:
    virtual ~DecodeHook() = default;
    virtual ForwardObserver* observer() { return nullptr; }
    virtual void after_token(std::int64_t step, KvCache& cache) = 0;
};

struct DecodeResult {
    std::vector<TokenId> tokens;
    /// Logit rows each argmax was taken over (only when requested).
    std::vector<std::vector<float>> logits;
};

/// Argmax decoding. The prompt is prefilled into `cache` (which may already
/// hold earlier context), then each generated token is fed back so that after
/// step s the cache covers the prompt plus s generated tokens.
DecodeResult greedy_decode(const Model& model, std::span<const TokenId> prompt, std::size_t max_new, KvCache& cache,
                           DecodeHook* hook = nullptr, bool keep_logits = false,
                           ForwardObserver* prefill_observer = nullptr);

/// Continues decoding from logits already produced for the last context
/// token (for callers that prefill and compress before generation).
DecodeResult decode_from(const Model& model, std::span<const float> last_logits, std::size_t max_new,
                         KvCache& cache, DecodeHook* hook = nullptr, bool keep_logits = false);

/// Index of the largest entry; ties go to the lowest index.
TokenId argmax(std::span<const float> row);

} // namespace kvc
