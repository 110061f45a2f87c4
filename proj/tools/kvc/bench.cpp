#include <memory>
#include <string>
#include <vector>

#include "commands.hpp"
#include "kvc/analysis.hpp"
#include "kvc/parallel.hpp"
#include "options.hpp"

namespace kvc::cli {

namespace {

struct BenchCommon {
    ModelSource model;
    CompressionFlags compression;
    std::string config_file;
    std::string out;
    std::uint64_t seed = 0;

    void attach(CLI::App& sub) {
        model.attach(sub);
        compression.attach(sub);
        sub.add_option("--config", config_file, "JSON config; flags override its keys");
        sub.add_option("--out", out, "Output CSV")->required();
        sub.add_option("--seed", seed, "Seed for models, prompts and trials");
    }

    /// defaults, then the config file, then flags.
    CompressionConfig resolve(double default_ratio) const {
        CompressionConfig cfg;
        cfg.ratio = default_ratio;
        if (!config_file.empty()) {
            apply_json(cfg, read_json_file(config_file), {});
        }
        compression.apply(cfg);
        cfg.seed = seed;
        cfg.validate();
        return cfg;
    }

    nlohmann::json summary(const char* kind, const CompressionConfig& cfg) const {
        return {
            {"command", std::string("bench ") + kind},
            {"model", model.describe(seed)},
            {"config", nlohmann::json::parse(cfg.to_json())},
            {"out", out},
            {"threads", thread_budget()},
        };
    }
};

struct PasskeyOptions {
    BenchCommon common;
    std::vector<std::size_t> lengths{256, 512};
    std::vector<double> depths{0.0, 0.25, 0.5, 0.75, 1.0};
    std::size_t trials = 4;
    std::string template_file;
};

int run_passkey(const PasskeyOptions& o) {
    const auto cfg = o.common.resolve(0.5);
    const Model model = o.common.model.load(o.common.seed);
    const auto tpl = o.template_file.empty() ? default_passkey_template(model.config().vocab_size)
                                             : load_passkey_template(o.template_file);
    const auto cells = passkey_bench(model, tpl, o.lengths, o.depths, cfg, o.trials, o.common.seed);
    write_passkey_csv(o.common.out, cells);
    auto s = o.common.summary("passkey", cfg);
    s["lengths"] = o.lengths;
    s["depths"] = o.depths;
    s["trials"] = o.trials;
    s["rows"] = cells.size();
    print_summary(s);
    return kExitOk;
}

struct ReconOptions {
    BenchCommon common;
    std::size_t seeds = 10;
    std::vector<std::string> policies;
    std::size_t prompt_len = 96;
    std::size_t continuation = 32;

    ReconOptions() { common.model.weight_gain = 1.5f; }
};

int run_recon(const ReconOptions& o) {
    if (!o.common.model.is_random()) {
        throw UsageError("bench recon draws a random model per seed; drop --model");
    }
    const auto cfg = o.common.resolve(0.5);
    ReconstructionStudy study;
    study.model = o.common.model.random_config();
    study.model_options.weight_gain = o.common.model.weight_gain;
    study.model_options.embed_offset = o.common.model.embed_offset;
    study.prompt_len = o.prompt_len;
    study.continuation_len = o.continuation;
    study.ratio = cfg.ratio;
    study.base = cfg;
    if (o.policies.empty()) {
        study.policies.assign(all_policies().begin(), all_policies().end());
    } else {
        for (const auto& p : o.policies) study.policies.push_back(parse_policy(p));
    }
    for (std::size_t i = 0; i < o.seeds; ++i) study.seeds.push_back(o.common.seed + i);
    const auto rows = run_reconstruction_study(study);
    write_reconstruction_csv(o.common.out, rows);

    auto s = o.common.summary("recon", cfg);
    s["model"] = "random";
    s["weight_gain"] = study.model_options.weight_gain;
    s["embed_offset"] = study.model_options.embed_offset;
    s["seeds"] = study.seeds;
    nlohmann::json means = nlohmann::json::object();
    for (PolicyId p : study.policies) {
        double sum = 0.0;
        for (const auto& r : rows) {
            if (r.policy == p) sum += r.mean();
        }
        means[std::string(policy_name(p))] = sum / static_cast<double>(study.seeds.size());
    }
    s["mean_error"] = means;
    s["rows"] = rows.size();
    print_summary(s);
    return kExitOk;
}

struct CorrOptions {
    BenchCommon common;
    std::size_t length = 512;
    std::size_t prefix = 256;
};

int run_corr(const CorrOptions& o) {
    if (o.prefix >= o.length) {
        throw UsageError("--prefix must be shorter than --length");
    }
    const auto cfg = o.common.resolve(0.0);
    const Model model = o.common.model.load(o.common.seed);
    const auto tokens = random_tokens(o.length, model.config().vocab_size, o.common.seed);
    const auto rows = attention_correlation(model, tokens, o.prefix, o.length - o.prefix, cfg);
    write_correlation_csv(o.common.out, rows);
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& r : rows) {
        if (r.pearson) {
            sum += *r.pearson;
            ++n;
        }
    }
    auto s = o.common.summary("corr", cfg);
    s["length"] = o.length;
    s["prefix"] = o.prefix;
    s["rows"] = rows.size();
    s["mean_pearson"] = n ? nlohmann::json(sum / static_cast<double>(n)) : nlohmann::json(nullptr);
    print_summary(s);
    return kExitOk;
}

struct MemoryOptions {
    BenchCommon common;
    std::vector<std::size_t> lengths{512, 1024, 2048};
    std::vector<double> ratios{0.0, 0.25, 0.5, 0.75, 0.9};
};

int run_memory(const MemoryOptions& o) {
    const auto cfg = o.common.resolve(0.0);
    const Model model = o.common.model.load(o.common.seed);
    const auto points = memory_curve(model, o.lengths, o.ratios, cfg, o.common.seed);
    write_memory_csv(o.common.out, points);
    bool exact = true;
    for (const auto& p : points) exact = exact && p.analytic_bytes == p.measured_bytes;
    auto s = o.common.summary("memory", cfg);
    s["lengths"] = o.lengths;
    s["ratios"] = o.ratios;
    s["rows"] = points.size();
    s["analytic_matches_measured"] = exact;
    print_summary(s);
    return exact ? kExitOk : kExitVerification;
}

struct HistOptions {
    BenchCommon common;
    std::size_t length = 512;
    std::size_t layer = 0;
    std::size_t head = 0;
    std::size_t bins = 32;
};

int run_hist(const HistOptions& o) {
    const auto cfg = o.common.resolve(0.0);
    const Model model = o.common.model.load(o.common.seed);
    const auto tokens = random_tokens(o.length, model.config().vocab_size, o.common.seed);
    const auto report = activation_histograms(model, tokens, o.layer, o.head, o.bins);
    write_histogram_csv(o.common.out, report);
    auto s = o.common.summary("hist", cfg);
    s["length"] = o.length;
    s["layer"] = o.layer;
    s["head"] = o.head;
    s["bins"] = o.bins;
    print_summary(s);
    return kExitOk;
}

template <typename Options, typename Run>
CLI::App* add_bench_kind(CLI::App& bench, Action& action, const char* name, const char* help,
                         std::shared_ptr<Options> o, Run run) {
    auto* sub = bench.add_subcommand(name, help);
    o->common.attach(*sub);
    sub->callback([o, run, &action] { action = [o, run] { return run(*o); }; });
    return sub;
}

} // namespace

void add_bench(CLI::App& app, Action& action) {
    auto* bench = app.add_subcommand("bench", "Seeded analyses that write CSV reports");
    bench->require_subcommand(1);

    auto passkey = std::make_shared<PasskeyOptions>();
    auto* p = add_bench_kind(*bench, action, "passkey", "Passkey retrieval accuracy by length and depth", passkey,
                             run_passkey);
    p->add_option("--lengths", passkey->lengths, "Prompt lengths")->delimiter(',');
    p->add_option("--depths", passkey->depths, "Needle depths in [0, 1]")->delimiter(',');
    p->add_option("--trials", passkey->trials, "Trials per cell");
    p->add_option("--template", passkey->template_file, "Passkey template JSON");

    auto recon = std::make_shared<ReconOptions>();
    auto* r = add_bench_kind(*bench, action, "recon", "Residual-stream reconstruction error per policy", recon,
                             run_recon);
    r->add_option("--seeds", recon->seeds, "Number of consecutive seeds starting at --seed");
    r->add_option("--policies", recon->policies, "Policy ids to compare (default all)")->delimiter(',');
    r->add_option("--prompt-len", recon->prompt_len, "Tokens before compression");
    r->add_option("--continuation", recon->continuation, "Tokens after compression");

    auto corr = std::make_shared<CorrOptions>();
    auto* c = add_bench_kind(*bench, action, "corr", "Expected vs realized attention correlation per head", corr,
                             run_corr);
    c->add_option("--length", corr->length, "Total tokens");
    c->add_option("--prefix", corr->prefix, "Tokens whose queries build the statistics");

    auto memory = std::make_shared<MemoryOptions>();
    auto* m = add_bench_kind(*bench, action, "memory", "Analytic and measured cache bytes", memory, run_memory);
    m->add_option("--lengths", memory->lengths, "Prompt lengths")->delimiter(',');
    m->add_option("--ratios", memory->ratios, "Compression ratios")->delimiter(',');

    auto hist = std::make_shared<HistOptions>();
    auto* h = add_bench_kind(*bench, action, "hist", "Hidden-state and query histograms with normal fits", hist,
                             run_hist);
    h->add_option("--length", hist->length, "Tokens to run");
    h->add_option("--layer", hist->layer, "Layer");
    h->add_option("--head", hist->head, "Query head");
    h->add_option("--bins", hist->bins, "Histogram bins");
}

} // namespace kvc::cli
