#include "options.hpp"

#include <fstream>
#include <iostream>
#include <sstream>

#include "kvc/errors.hpp"

namespace kvc::cli {

void CompressionFlags::attach(CLI::App& app) {
    app.add_option("--policy", policy, "Scoring policy id")->group("Compression");
    app.add_option("--ratio", ratio, "Fraction of prefill entries to evict")->group("Compression");
    app.add_option("--epsilon", epsilon, "Additive constant on expected attention")->group("Compression");
    app.add_option("--rope-window", rope_window, "Future positions averaged into the query rotation")
        ->group("Compression");
    app.add_option("--decode-interval", decode_interval, "Decode steps between compressions")->group("Compression");
    app.add_option("--stats-buffer", stats_buffer, "Recent queries kept for decode statistics")
        ->group("Compression");
    app.add_option("--head-adaptive", head_adaptive, "Allocate the layer budget across heads")
        ->group("Compression");
    app.add_option("--use-wo-v", use_wo_v, "Weight scores by ||W_o v|| instead of ||v||")->group("Compression");
    app.add_option("--min-keep", min_keep, "Entries every head keeps")->group("Compression");
    app.add_option("--ridge", ridge, "Relative ridge added to the query covariance")->group("Compression");
    app.add_option("--streaming-sinks", sink_tokens, "Sink tokens kept by the streaming policy")
        ->group("Compression");
    app.add_option("--streaming-recent", recent_tokens, "Recent tokens kept by the streaming policy")
        ->group("Compression");
    app.add_option("--snapkv-window", snapkv_window, "Observation window of snapkv")->group("Compression");
    app.add_option("--snapkv-kernel", snapkv_kernel, "Pooling kernel of snapkv")->group("Compression");
}

void CompressionFlags::apply(CompressionConfig& c) const {
    if (policy) c.policy = parse_policy(*policy);
    if (ratio) c.ratio = *ratio;
    if (epsilon) c.epsilon = *epsilon;
    if (rope_window) c.rope_window = *rope_window;
    if (decode_interval) c.decode_interval = *decode_interval;
    if (stats_buffer) c.stats_buffer = *stats_buffer;
    if (head_adaptive) c.head_adaptive = *head_adaptive;
    if (use_wo_v) c.use_wo_v = *use_wo_v;
    if (min_keep) c.min_keep_per_head = *min_keep;
    if (ridge) c.ridge = *ridge;
    if (sink_tokens) c.sink_tokens = *sink_tokens;
    if (recent_tokens) c.recent_tokens = *recent_tokens;
    if (snapkv_window) c.snapkv_window = *snapkv_window;
    if (snapkv_kernel) c.snapkv_kernel = *snapkv_kernel;
}

bool CompressionFlags::any_policy_flag() const {
    return policy || ratio || epsilon || rope_window || decode_interval || stats_buffer || head_adaptive ||
           use_wo_v || min_keep || ridge || sink_tokens || recent_tokens || snapkv_window || snapkv_kernel;
}

void ModelSource::attach(CLI::App& app) {
    app.add_option("--model", dir, "Model directory (config.json + weights.kvt); random model when omitted")
        ->group("Model");
    app.add_option("--model-config", config_file, "ModelConfig JSON for the random model")->group("Model");
    app.add_option("--weight-gain", weight_gain, "Projection scale of the random model")->group("Model");
    app.add_option("--embed-offset", embed_offset, "Shared embedding offset of the random model")->group("Model");
}

ModelConfig ModelSource::random_config() const {
    if (config_file.empty()) {
        return tiny_config();
    }
    std::ifstream f(config_file);
    if (!f) {
        throw IoError("cannot open " + config_file);
    }
    std::stringstream ss;
    ss << f.rdbuf();
    return ModelConfig::from_json(ss.str());
}

Model ModelSource::load(std::uint64_t seed) const {
    if (!is_random()) {
        if (!config_file.empty()) {
            throw UsageError("--model-config only applies to the random model");
        }
        return load_model(dir);
    }
    RandomModelOptions opt;
    opt.seed = seed;
    opt.weight_gain = weight_gain;
    opt.embed_offset = embed_offset;
    return random_model(random_config(), opt);
}

std::string ModelSource::describe(std::uint64_t seed) const {
    return is_random() ? "random:" + std::to_string(seed) : dir;
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) {
        throw IoError("cannot open " + path.string());
    }
    try {
        return nlohmann::json::parse(f);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

void apply_json(CompressionConfig& c, const nlohmann::json& j, std::initializer_list<std::string_view> extra) {
    if (!j.is_object()) {
        throw UsageError("config file must hold a JSON object");
    }
    for (const auto& [key, value] : j.items()) {
        bool known_extra = false;
        for (auto e : extra) known_extra = known_extra || key == e;
        if (known_extra) {
            continue;
        }
        try {
            if (key == "policy") c.policy = parse_policy(value.get<std::string>());
            else if (key == "ratio") c.ratio = value.get<double>();
            else if (key == "epsilon") c.epsilon = value.get<double>();
            else if (key == "rope_window") c.rope_window = value.get<std::int64_t>();
            else if (key == "decode_interval") c.decode_interval = value.get<std::int64_t>();
            else if (key == "stats_buffer") c.stats_buffer = value.get<std::size_t>();
            else if (key == "use_wo_v") c.use_wo_v = value.get<bool>();
            else if (key == "head_adaptive") c.head_adaptive = value.get<bool>();
            else if (key == "min_keep_per_head") c.min_keep_per_head = value.get<std::size_t>();
            else if (key == "ridge") c.ridge = value.get<double>();
            else if (key == "sink_tokens") c.sink_tokens = value.get<std::size_t>();
            else if (key == "recent_tokens")
                c.recent_tokens = value.is_null() ? std::nullopt : std::optional(value.get<std::size_t>());
            else if (key == "snapkv_window") c.snapkv_window = value.get<std::size_t>();
            else if (key == "snapkv_kernel") c.snapkv_kernel = value.get<std::size_t>();
            else if (key == "seed") c.seed = value.get<std::uint64_t>();
            else throw UsageError("unknown config key '" + key + "'");
        } catch (const nlohmann::json::exception& e) {
            throw UsageError("config key '" + key + "': " + e.what());
        }
    }
}

void print_summary(const nlohmann::json& summary) {
    std::cout << summary.dump() << '\n';
}

} // namespace kvc::cli
