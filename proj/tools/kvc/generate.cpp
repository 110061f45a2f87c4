#include <iostream>
#include <memory>
#include <optional>
#include <string>

#include "commands.hpp"
#include "kvc/analysis.hpp"
#include "kvc/controller.hpp"
#include "kvc/kvt_io.hpp"
#include "kvc/parallel.hpp"
#include "options.hpp"

namespace kvc::cli {

namespace {

struct GenerateOptions {
    ModelSource model;
    CompressionFlags compression;
    std::string prompt_file;
    std::optional<std::size_t> prompt_len;
    std::optional<std::size_t> max_new;
    std::optional<std::size_t> max_cache;
    std::optional<std::uint64_t> seed;
    std::string config_file;
    std::string events_file;
    std::string dump_file;
};

int run_generate(const GenerateOptions& o) {
    CompressionConfig cfg;
    std::optional<std::size_t> max_new;
    std::optional<std::size_t> max_cache;
    bool file_selects_policy = false;
    if (!o.config_file.empty()) {
        const auto j = read_json_file(o.config_file);
        apply_json(cfg, j, {"max_new", "max_cache"});
        max_new = json_value<std::size_t>(j, "max_new");
        max_cache = json_value<std::size_t>(j, "max_cache");
        file_selects_policy = j.contains("policy") || j.contains("ratio");
    }
    o.compression.apply(cfg);
    if (o.max_new) max_new = o.max_new;
    if (o.max_cache) max_cache = o.max_cache;
    if (o.seed) cfg.seed = *o.seed;
    cfg.validate();

    if (cfg.ratio > 0.0 && max_cache) {
        throw UsageError("--ratio (prefill compression) and --max-cache (decode compression) are mutually exclusive");
    }
    const bool compress = o.compression.any_policy_flag() || file_selects_policy || max_cache.has_value();
    if (compress && policy_needs_future(cfg.policy)) {
        throw UsageError("policy " + std::string(policy_name(cfg.policy)) +
                         " needs future attention and is only available in 'bench recon'");
    }

    const Model model = o.model.load(cfg.seed);
    std::vector<TokenId> prompt;
    if (!o.prompt_file.empty()) {
        prompt = read_prompt_file(o.prompt_file);
    } else if (o.prompt_len) {
        prompt = random_tokens(*o.prompt_len, model.config().vocab_size, cfg.seed);
    } else {
        throw UsageError("one of --prompt or --prompt-len is required");
    }
    if (prompt.empty()) {
        throw UsageError("prompt is empty");
    }
    const std::size_t n_new = max_new.value_or(32);

    KvCache cache = model.make_cache();
    DecodeResult result;
    std::vector<CompressionEvent> events;
    if (!compress) {
        result = greedy_decode(model, prompt, n_new, cache);
    } else {
        PrefillObservers pre(model, cfg);
        const Tensor logits = model.forward(prompt, cache, &pre.list);
        events = compress_prefill(model, cache, pre.inputs(), cfg);
        DecodingCompressor hook(model, cfg, max_cache.value_or(DecodingCompressor::kUnbounded));
        result = decode_from(model, logits.row(prompt.size() - 1), n_new, cache, &hook);
        events.insert(events.end(), hook.events().begin(), hook.events().end());
    }
    if (!o.events_file.empty()) {
        write_events_jsonl(o.events_file, events);
    }
    if (!o.dump_file.empty()) {
        write_kvt(o.dump_file, cache.to_tensors());
    }

    for (std::size_t i = 0; i < result.tokens.size(); ++i) {
        std::cout << (i ? " " : "") << result.tokens[i];
    }
    std::cout << '\n';
    print_summary({
        {"command", "generate"},
        {"model", o.model.describe(cfg.seed)},
        {"model_config", nlohmann::json::parse(model.config().to_json())},
        {"prompt_tokens", prompt.size()},
        {"max_new", n_new},
        {"compression", compress},
        {"config", nlohmann::json::parse(cfg.to_json())},
        {"max_cache", max_cache ? nlohmann::json(*max_cache) : nlohmann::json(nullptr)},
        {"generated", result.tokens},
        {"cache_entries", cache.total_length()},
        {"cache_bytes", cache.memory_bytes()},
        {"events", events.size()},
        {"event_log", o.events_file.empty() ? nlohmann::json(nullptr) : nlohmann::json(o.events_file)},
        {"cache_dump", o.dump_file.empty() ? nlohmann::json(nullptr) : nlohmann::json(o.dump_file)},
        {"threads", thread_budget()},
    });
    return kExitOk;
}

struct ExportOptions {
    ModelSource model;
    std::string out;
    std::uint64_t seed = 0;
    std::string prompt_out;
    std::size_t prompt_len = 64;
};

int run_export(const ExportOptions& o) {
    if (!o.model.is_random()) {
        throw UsageError("export-random writes a random model; drop --model");
    }
    const Model model = o.model.load(o.seed);
    save_model(o.out, model);
    nlohmann::json summary = {
        {"command", "export-random"},
        {"out", o.out},
        {"seed", o.seed},
        {"model_config", nlohmann::json::parse(model.config().to_json())},
        {"prompt", nullptr},
    };
    if (!o.prompt_out.empty()) {
        write_prompt_file(o.prompt_out, random_tokens(o.prompt_len, model.config().vocab_size, o.seed));
        summary["prompt"] = o.prompt_out;
    }
    print_summary(summary);
    return kExitOk;
}

} // namespace

void add_generate(CLI::App& app, Action& action) {
    auto o = std::make_shared<GenerateOptions>();
    auto* sub = app.add_subcommand("generate", "Greedy decoding with optional cache compression");
    o->model.attach(*sub);
    o->compression.attach(*sub);
    auto* prompt = sub->add_option("--prompt", o->prompt_file, "Token-id file");
    sub->add_option("--prompt-len", o->prompt_len, "Random prompt of this length instead of --prompt")
        ->excludes(prompt);
    sub->add_option("--max-new", o->max_new, "Tokens to generate (default 32)");
    sub->add_option("--max-cache", o->max_cache, "Decode-time ceiling on entries per head");
    sub->add_option("--seed", o->seed, "Seed for random models, prompts and the random policy");
    sub->add_option("--config", o->config_file, "JSON config; flags override its keys");
    sub->add_option("--events", o->events_file, "Write compression events as JSON lines");
    sub->add_option("--dump-cache", o->dump_file, "Write the final cache as a KVT1 container");
    sub->callback([o, &action] { action = [o] { return run_generate(*o); }; });
}

void add_export_random(CLI::App& app, Action& action) {
    auto o = std::make_shared<ExportOptions>();
    auto* sub = app.add_subcommand("export-random", "Write a seeded random model (and prompt) in the on-disk format");
    o->model.attach(*sub);
    sub->add_option("--out", o->out, "Output directory")->required();
    sub->add_option("--seed", o->seed, "Model seed");
    sub->add_option("--prompt-out", o->prompt_out, "Also write a random token-id file");
    sub->add_option("--prompt-len", o->prompt_len, "Length of the random prompt");
    sub->callback([o, &action] { action = [o] { return run_export(*o); }; });
}

} // namespace kvc::cli
