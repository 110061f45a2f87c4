#include "kvc/model.hpp"

#include <algorithm>
#include <charconv>
#include <limits>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "kvc/errors.hpp"

namespace kvc {

namespace {

using json = nlohmann::json;

const Tensor& require(const TensorMap& tensors, const std::string& name, std::vector<std::size_t> dims) {
    auto it = tensors.find(name);
    if (it == tensors.end()) {
        throw MissingTensor("weights are missing tensor '" + name + "'");
    }
    if (it->second.dims() != dims) {
        Tensor expected(std::move(dims));
        throw ExtentMismatch("tensor '" + name + "' has extents " + it->second.shape_string() + ", expected " +
                             expected.shape_string());
    }
    return it->second;
}

std::string layer_name(std::size_t layer, const char* suffix) {
    return "layers." + std::to_string(layer) + "." + suffix;
}

float silu(float x) { return x / (1.0f + std::exp(-x)); }

} // namespace

void ModelConfig::validate() const {
    auto positive = [](std::size_t v, const char* name) {
        if (v == 0) {
            throw InvalidArgument(std::string("model config: ") + name + " must be positive");
        }
    };
    positive(n_layers, "n_layers");
    positive(n_heads, "n_heads");
    positive(n_kv_heads, "n_kv_heads");
    positive(head_dim, "head_dim");
    positive(hidden_dim, "hidden_dim");
    positive(ffn_dim, "ffn_dim");
    positive(vocab_size, "vocab_size");
    if (n_heads % n_kv_heads != 0) {
        throw InvalidArgument("model config: n_heads must be divisible by n_kv_heads");
    }
    if (head_dim % 2 != 0) {
        throw InvalidArgument("model config: head_dim must be even for rotary embeddings");
    }
    if (!(rope_theta > 0.0) || !(norm_eps > 0.0)) {
        throw InvalidArgument("model config: rope_theta and norm_eps must be positive");
    }
    if (max_position < 1) {
        throw InvalidArgument("model config: max_position must be positive");
    }
}

std::string ModelConfig::to_json() const {
    json j = {
        {"n_layers", n_layers},     {"n_heads", n_heads},       {"n_kv_heads", n_kv_heads},
        {"head_dim", head_dim},     {"hidden_dim", hidden_dim}, {"ffn_dim", ffn_dim},
        {"vocab_size", vocab_size}, {"rope_theta", rope_theta}, {"norm_eps", norm_eps},
        {"max_position", max_position}, {"qk_norm", qk_norm},
    };
    return j.dump(2);
}

ModelConfig ModelConfig::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("config.json is not valid JSON: ") + e.what());
    }
    auto field = [&](const char* name) -> const json& {
        if (!j.contains(name)) {
            throw FormatError(std::string("config.json is missing field '") + name + "'");
        }
        return j.at(name);
    };
    ModelConfig c;
    try {
        c.n_layers = field("n_layers").get<std::size_t>();
        c.n_heads = field("n_heads").get<std::size_t>();
        c.n_kv_heads = field("n_kv_heads").get<std::size_t>();
        c.head_dim = field("head_dim").get<std::size_t>();
        c.hidden_dim = field("hidden_dim").get<std::size_t>();
        c.ffn_dim = field("ffn_dim").get<std::size_t>();
        c.vocab_size = field("vocab_size").get<std::size_t>();
        c.rope_theta = field("rope_theta").get<double>();
        c.norm_eps = field("norm_eps").get<double>();
        c.max_position = field("max_position").get<std::int64_t>();
        c.qk_norm = j.value("qk_norm", false);
    } catch (const json::type_error& e) {
        throw FormatError(std::string("config.json has a field of the wrong type: ") + e.what());
    }
    c.validate();
    return c;
}

TensorMap ModelWeights::to_tensors() const {
    TensorMap m;
    m.emplace("embed.weight", embed);
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& l = layers[i];
        m.emplace(layer_name(i, "attn.wq"), l.wq);
        m.emplace(layer_name(i, "attn.wk"), l.wk);
        m.emplace(layer_name(i, "attn.wv"), l.wv);
        m.emplace(layer_name(i, "attn.wo"), l.wo);
        if (l.q_norm) m.emplace(layer_name(i, "attn.q_norm"), *l.q_norm);
        if (l.k_norm) m.emplace(layer_name(i, "attn.k_norm"), *l.k_norm);
        m.emplace(layer_name(i, "mlp.w1"), l.w1);
        m.emplace(layer_name(i, "mlp.w2"), l.w2);
        m.emplace(layer_name(i, "mlp.w3"), l.w3);
        m.emplace(layer_name(i, "norm_attn"), l.norm_attn);
        m.emplace(layer_name(i, "norm_mlp"), l.norm_mlp);
    }
    m.emplace("final_norm", final_norm);
    m.emplace("lm_head", lm_head);
    return m;
}

ModelWeights ModelWeights::from_tensors(const ModelConfig& c, const TensorMap& t) {
    ModelWeights w;
    w.embed = require(t, "embed.weight", {c.vocab_size, c.hidden_dim});
    w.layers.resize(c.n_layers);
    for (std::size_t i = 0; i < c.n_layers; ++i) {
        auto& l = w.layers[i];
        l.wq = require(t, layer_name(i, "attn.wq"), {c.q_width(), c.hidden_dim});
        l.wk = require(t, layer_name(i, "attn.wk"), {c.kv_width(), c.hidden_dim});
        l.wv = require(t, layer_name(i, "attn.wv"), {c.kv_width(), c.hidden_dim});
        l.wo = require(t, layer_name(i, "attn.wo"), {c.hidden_dim, c.q_width()});
        if (c.qk_norm) {
            l.q_norm = require(t, layer_name(i, "attn.q_norm"), {c.head_dim});
            l.k_norm = require(t, layer_name(i, "attn.k_norm"), {c.head_dim});
        }
        l.w1 = require(t, layer_name(i, "mlp.w1"), {c.ffn_dim, c.hidden_dim});
        l.w2 = require(t, layer_name(i, "mlp.w2"), {c.hidden_dim, c.ffn_dim});
        l.w3 = require(t, layer_name(i, "mlp.w3"), {c.ffn_dim, c.hidden_dim});
        l.norm_attn = require(t, layer_name(i, "norm_attn"), {c.hidden_dim});
        l.norm_mlp = require(t, layer_name(i, "norm_mlp"), {c.hidden_dim});
    }
    w.final_norm = require(t, "final_norm", {c.hidden_dim});
    w.lm_head = require(t, "lm_head", {c.vocab_size, c.hidden_dim});
    return w;
}

void AttentionMask::mask(std::size_t layer, std::size_t kv_head, std::int64_t position) {
    masked_.emplace(layer, kv_head, position);
}

bool AttentionMask::masked(std::size_t layer, std::size_t kv_head, std::int64_t position) const {
    return masked_.contains({layer, kv_head, position});
}

Model::Model(ModelConfig config, ModelWeights weights)
    : config_(std::move(config)), weights_(std::move(weights)),
      rope_((config_.validate(), config_.head_dim), config_.rope_theta, config_.max_position) {
    // Re-run the extent checks so hand-built weights get the same validation as loaded ones.
    weights_ = ModelWeights::from_tensors(config_, weights_.to_tensors());
}

KvCache Model::make_cache() const {
    return KvCache(config_.n_layers, config_.n_kv_heads, config_.head_dim);
}

Tensor Model::forward(std::span<const TokenId> tokens, KvCache& cache, ForwardObserver* observer,
                      const AttentionMask* mask) const {
    const ModelConfig& c = config_;
    const std::size_t n = tokens.size();
    const std::int64_t p0 = cache.next_position();
    if (cache.n_layers() != c.n_layers || cache.n_kv_heads() != c.n_kv_heads || cache.head_dim() != c.head_dim) {
        throw ShapeError("cache geometry does not match the model");
    }
    if (p0 + static_cast<std::int64_t>(n) > c.max_position) {
        throw PositionOverflow("forward would reach position " + std::to_string(p0 + static_cast<std::int64_t>(n) - 1) +
                               " but max_position is " + std::to_string(c.max_position));
    }
    for (TokenId t : tokens) {
        if (t < 0 || static_cast<std::size_t>(t) >= c.vocab_size) {
            throw InvalidArgument("token id " + std::to_string(t) + " outside vocabulary of " +
                                  std::to_string(c.vocab_size));
        }
    }
    if (n == 0) {
        return Tensor();
    }

    const std::size_t hd = c.head_dim;
    const float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(hd));
    const float eps = static_cast<float>(c.norm_eps);

    Tensor h({n, c.hidden_dim});
    for (std::size_t t = 0; t < n; ++t) {
        auto src = weights_.embed.row(static_cast<std::size_t>(tokens[t]));
        std::copy(src.begin(), src.end(), h.row(t).begin());
    }

    std::vector<float> x(c.hidden_dim), q(n * c.q_width()), k(c.kv_width()), v(c.kv_width());
    std::vector<float> attn(c.q_width()), delta(c.hidden_dim);
    std::vector<float> gate(c.ffn_dim), up(c.ffn_dim);
    std::vector<float> scores;

    for (std::size_t li = 0; li < c.n_layers; ++li) {
        const LayerWeights& L = weights_.layers[li];

        // Projections for the whole chunk; keys/values land in the cache first
        // so each query below sees exactly the entries at or before its position.
        for (std::size_t t = 0; t < n; ++t) {
            const std::int64_t pos = p0 + static_cast<std::int64_t>(t);
            if (observer) observer->on_layer_input(li, pos, h.row(t));
            rms_norm(h.row(t), L.norm_attn.data(), eps, x);
            std::span<float> qt(q.data() + t * c.q_width(), c.q_width());
            matvec(L.wq, x, qt);
            matvec(L.wk, x, k);
            matvec(L.wv, x, v);
            for (std::size_t hh = 0; hh < c.n_heads; ++hh) {
                auto qh = qt.subspan(hh * hd, hd);
                if (L.q_norm) rms_norm(qh, L.q_norm->data(), eps, qh);
                if (observer) observer->on_query(li, hh, pos, qh);
                apply_rope_inplace(qh, pos, rope_);
            }
            for (std::size_t g = 0; g < c.n_kv_heads; ++g) {
                std::span<float> kh(k.data() + g * hd, hd);
                if (L.k_norm) rms_norm(kh, L.k_norm->data(), eps, kh);
                apply_rope_inplace(kh, pos, rope_);
                cache.append(li, g, kh, std::span<const float>(v.data() + g * hd, hd), pos);
            }
        }

        for (std::size_t t = 0; t < n; ++t) {
            const std::int64_t pos = p0 + static_cast<std::int64_t>(t);
            std::fill(attn.begin(), attn.end(), 0.0f);
            for (std::size_t hh = 0; hh < c.n_heads; ++hh) {
                const std::size_t g = hh / c.group_size();
                auto positions = cache.positions(li, g);
                const auto visible = static_cast<std::size_t>(
                    std::upper_bound(positions.begin(), positions.end(), pos) - positions.begin());
                std::span<const float> qh(q.data() + t * c.q_width() + hh * hd, hd);
                scores.resize(visible);
                for (std::size_t i = 0; i < visible; ++i) {
                    if (mask && mask->masked(li, g, positions[i])) {
                        scores[i] = -INFINITY;
                    } else {
                        scores[i] = dot(qh, cache.key(li, g, i)) * inv_sqrt_d;
                    }
                }
                std::vector<float> weights = scores;
                softmax_inplace(weights);
                float* out = attn.data() + hh * hd;
                for (std::size_t i = 0; i < visible; ++i) {
                    const float a = weights[i];
                    if (a == 0.0f) continue;
                    auto vi = cache.value(li, g, i);
                    for (std::size_t d = 0; d < hd; ++d) {
                        out[d] += a * vi[d];
                    }
                }
                if (observer) {
                    observer->on_attention(li, hh, pos, positions.first(visible), weights, scores);
                }
            }
            matvec(L.wo, attn, delta);
            auto ht = h.row(t);
            for (std::size_t d = 0; d < c.hidden_dim; ++d) {
                ht[d] += delta[d];
            }
            if (observer) observer->on_attention_output(li, pos, ht);

            rms_norm(ht, L.norm_mlp.data(), eps, x);
            matvec(L.w1, x, gate);
            matvec(L.w3, x, up);
            for (std::size_t f = 0; f < c.ffn_dim; ++f) {
                gate[f] = silu(gate[f]) * up[f];
            }
            matvec(L.w2, gate, delta);
            for (std::size_t d = 0; d < c.hidden_dim; ++d) {
                ht[d] += delta[d];
            }
        }
    }

    cache.advance(static_cast<std::int64_t>(n));

    Tensor logits({n, c.vocab_size});
    for (std::size_t t = 0; t < n; ++t) {
        rms_norm(h.row(t), weights_.final_norm.data(), eps, x);
        matvec(weights_.lm_head, x, logits.row(t));
    }
    return logits;
}

Model load_model(const std::filesystem::path& dir) {
    const auto cfg_path = dir / "config.json";
    std::ifstream f(cfg_path);
    if (!f) {
        throw IoError("cannot open " + cfg_path.string());
    }
    std::stringstream ss;
    ss << f.rdbuf();
    ModelConfig config = ModelConfig::from_json(ss.str());
    TensorMap tensors = read_kvt(dir / "weights.kvt");
    ModelWeights weights = ModelWeights::from_tensors(config, tensors);
    return Model(std::move(config), std::move(weights));
}

void save_model(const std::filesystem::path& dir, const Model& model) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) {
        throw IoError("cannot create " + dir.string() + ": " + ec.message());
    }
    std::ofstream f(dir / "config.json", std::ios::trunc);
    if (!f) {
        throw IoError("cannot write " + (dir / "config.json").string());
    }
    f << model.config().to_json() << '\n';
    write_kvt(dir / "weights.kvt", model.weights().to_tensors());
}

std::vector<TokenId> read_prompt_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) {
        throw IoError("cannot open prompt file " + path.string());
    }
    std::vector<TokenId> tokens;
    std::string word;
    while (f >> word) {
        std::int64_t id = 0;
        const auto* end = word.data() + word.size();
        const auto [ptr, ec] = std::from_chars(word.data(), end, id);
        if (ec != std::errc{} || ptr != end || id < 0 || id > std::numeric_limits<TokenId>::max()) {
            throw FormatError("prompt file " + path.string() + ": '" + word + "' is not a token id");
        }
        tokens.push_back(static_cast<TokenId>(id));
    }
    return tokens;
}

void write_prompt_file(const std::filesystem::path& path, std::span<const TokenId> tokens) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) {
        throw IoError("cannot write prompt file " + path.string());
    }
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        f << (i ? " " : "") << tokens[i];
    }
    if (!tokens.empty()) {
        f << '\n';
    }
    if (!f) {
        throw IoError("short write to " + path.string());
    }
}

Model random_model(const ModelConfig& c, const RandomModelOptions& opt) {
    c.validate();
    std::mt19937_64 rng(opt.seed);
    std::normal_distribution<float> normal(0.0f, 1.0f);

    auto gaussian = [&](std::vector<std::size_t> dims, float scale) {
        Tensor t(std::move(dims));
        for (float& v : t.data()) v = normal(rng) * scale;
        return t;
    };
    auto ones = [](std::size_t n) { return Tensor({n}, std::vector<float>(n, 1.0f)); };
    auto proj = [&](std::size_t out, std::size_t in) {
        return gaussian({out, in}, opt.weight_gain / std::sqrt(static_cast<float>(in)));
    };

    ModelWeights w;
    w.embed = gaussian({c.vocab_size, c.hidden_dim}, 1.0f);
    if (opt.embed_offset != 0.0f) {
        Tensor dir = gaussian({c.hidden_dim}, 1.0f);
        const float norm = l2_norm(dir.data());
        for (std::size_t t = 0; t < c.vocab_size; ++t) {
            auto row = w.embed.row(t);
            for (std::size_t d = 0; d < c.hidden_dim; ++d) {
                row[d] += opt.embed_offset * dir[d] / norm * std::sqrt(static_cast<float>(c.hidden_dim));
            }
        }
    }
    w.layers.resize(c.n_layers);
    for (auto& l : w.layers) {
        l.wq = proj(c.q_width(), c.hidden_dim);
        l.wk = proj(c.kv_width(), c.hidden_dim);
        l.wv = proj(c.kv_width(), c.hidden_dim);
        l.wo = gaussian({c.hidden_dim, c.q_width()}, 1.0f / std::sqrt(static_cast<float>(c.q_width())));
        if (c.qk_norm) {
            l.q_norm = ones(c.head_dim);
            l.k_norm = ones(c.head_dim);
        }
        l.w1 = gaussian({c.ffn_dim, c.hidden_dim}, 1.0f / std::sqrt(static_cast<float>(c.hidden_dim)));
        l.w2 = gaussian({c.hidden_dim, c.ffn_dim}, 1.0f / std::sqrt(static_cast<float>(c.ffn_dim)));
        l.w3 = gaussian({c.ffn_dim, c.hidden_dim}, 1.0f / std::sqrt(static_cast<float>(c.hidden_dim)));
        l.norm_attn = ones(c.hidden_dim);
        l.norm_mlp = ones(c.hidden_dim);
    }
    w.final_norm = ones(c.hidden_dim);
    w.lm_head = gaussian({c.vocab_size, c.hidden_dim}, 1.0f / std::sqrt(static_cast<float>(c.hidden_dim)));
    return Model(c, std::move(w));
}

ModelConfig tiny_config() {
    ModelConfig c;
    c.n_layers = 2;
    c.n_heads = 4;
    c.n_kv_heads = 2;
    c.head_dim = 16;
    c.hidden_dim = 64;
    c.ffn_dim = 128;
    c.vocab_size = 256;
    c.rope_theta = 10000.0;
    c.norm_eps = 1e-5;
    c.max_position = 2048;
    c.qk_norm = false;
    return c;
}

TokenId argmax(std::span<const float> row) {
    return static_cast<TokenId>(std::max_element(row.begin(), row.end()) - row.begin());
}

DecodeResult decode_from(const Model& model, std::span<const float> last_logits, std::size_t max_new,
                         KvCache& cache, DecodeHook* hook, bool keep_logits) {
    DecodeResult result;
    std::vector<float> current(last_logits.begin(), last_logits.end());
    ForwardObserver* observer = hook ? hook->observer() : nullptr;
    for (std::size_t step = 1; step <= max_new; ++step) {
        const TokenId next = argmax(current);
        result.tokens.push_back(next);
        if (keep_logits) {
            result.logits.push_back(current);
        }
        const TokenId fed[1] = {next};
        Tensor logits = model.forward(fed, cache, observer);
        if (hook) {
            hook->after_token(static_cast<std::int64_t>(step), cache);
        }
        auto row = logits.row(0);
        current.assign(row.begin(), row.end());
    }
    return result;
}

DecodeResult greedy_decode(const Model& model, std::span<const TokenId> prompt, std::size_t max_new, KvCache& cache,
                           DecodeHook* hook, bool keep_logits, ForwardObserver* prefill_observer) {
    if (prompt.empty()) {
        throw InvalidArgument("greedy_decode needs a non-empty prompt");
    }
    ObserverList observers{prefill_observer, hook ? hook->observer() : nullptr};
    Tensor logits = model.forward(prompt, cache, observers.empty() ? nullptr : &observers);
    return decode_from(model, logits.row(prompt.size() - 1), max_new, cache, hook, keep_logits);
}

} // namespace kvc
