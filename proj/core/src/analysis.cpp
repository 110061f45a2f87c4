#include "kvc/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "kvc/errors.hpp"
#include "kvc/parallel.hpp"

namespace kvc {

namespace {

std::ofstream open_csv(const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) {
        throw IoError("cannot write " + path.string());
    }
    return f;
}

std::string fmt_double(double v) {
    std::ostringstream os;
    os.precision(9);
    os << v;
    return os.str();
}

std::string fmt_optional(const std::optional<double>& v) { return v ? fmt_double(*v) : std::string(); }

std::vector<double> ranks(std::span<const double> x) {
    std::vector<std::size_t> order(x.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> r(x.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j);
        for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
        i = j + 1;
    }
    return r;
}

} // namespace

std::vector<TokenId> random_tokens(std::size_t n, std::size_t vocab, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<TokenId> uni(0, static_cast<TokenId>(vocab - 1));
    std::vector<TokenId> out(n);
    for (auto& t : out) t = uni(rng);
    return out;
}

// --- reconstruction --------------------------------------------------------

std::vector<double> reconstruction_error(const Model& model, std::span<const TokenId> tokens, std::size_t compress_at,
                                         const CompressionConfig& config) {
    if (compress_at == 0 || compress_at >= tokens.size()) {
        throw InvalidArgument("reconstruction_error: compression point must fall inside the sequence");
    }
    const auto& c = model.config();
    const auto at = static_cast<std::int64_t>(compress_at);

    KvCache full = model.make_cache();
    HiddenRecorder reference(c.n_layers, at);
    AttentionTrace future(c.n_layers, c.n_heads, AttentionTrace::kUnbounded, at);
    ObserverList full_obs{&reference};
    if (policy_needs_future(config.policy)) {
        full_obs.add(&future);
    }
    model.forward(tokens, full, &full_obs);

    KvCache cache = model.make_cache();
    PrefillObservers pre(model, config);
    model.forward(tokens.first(compress_at), cache, &pre.list);
    compress_prefill(model, cache, pre.inputs(&future), config);

    HiddenRecorder compressed(c.n_layers, at);
    model.forward(tokens.subspan(compress_at), cache, &compressed);

    std::vector<double> errors(c.n_layers, 0.0);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        const auto& ref = reference.layer(l);
        const auto& got = compressed.layer(l);
        double sum = 0.0;
        for (const auto& [pos, h] : ref) {
            const auto& hc = got.at(pos);
            double sq = 0.0;
            for (std::size_t d = 0; d < h.size(); ++d) {
                const double diff = static_cast<double>(h[d]) - hc[d];
                sq += diff * diff;
            }
            sum += std::sqrt(sq);
        }
        errors[l] = sum / static_cast<double>(ref.size());
    }
    return errors;
}

double ReconstructionRow::mean() const {
    if (per_layer.empty()) return 0.0;
    return std::accumulate(per_layer.begin(), per_layer.end(), 0.0) / static_cast<double>(per_layer.size());
}

std::vector<ReconstructionRow> run_reconstruction_study(const ReconstructionStudy& study) {
    const std::size_t n_pol = study.policies.size();
    std::vector<ReconstructionRow> rows(study.seeds.size() * n_pol);
    parallel_for(study.seeds.size(), [&](std::size_t s) {
        const std::uint64_t seed = study.seeds[s];
        RandomModelOptions opt = study.model_options;
        opt.seed = seed;
        const Model model = random_model(study.model, opt);
        const auto tokens = random_tokens(study.prompt_len + study.continuation_len, study.model.vocab_size,
                                          seed ^ 0x9e3779b97f4a7c15ULL);
        for (std::size_t p = 0; p < n_pol; ++p) {
            CompressionConfig cfg = study.base;
            cfg.policy = study.policies[p];
            cfg.ratio = study.ratio;
            cfg.seed = seed;
            rows[s * n_pol + p] = {seed, cfg.policy, reconstruction_error(model, tokens, study.prompt_len, cfg)};
        }
    });
    return rows;
}

void write_reconstruction_csv(const std::filesystem::path& path, const std::vector<ReconstructionRow>& rows) {
    auto f = open_csv(path);
    f << "seed,policy,layer,error\n";
    for (const auto& r : rows) {
        for (std::size_t l = 0; l < r.per_layer.size(); ++l) {
            f << r.seed << ',' << policy_name(r.policy) << ',' << l << ',' << fmt_double(r.per_layer[l]) << '\n';
        }
    }
}

// --- correlation -----------------------------------------------------------

std::optional<double> pearson_correlation(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw ShapeError("pearson_correlation: length mismatch");
    }
    const std::size_t n = a.size();
    if (n < 2) return std::nullopt;
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / static_cast<double>(n);
    const double mb = std::accumulate(b.begin(), b.end(), 0.0) / static_cast<double>(n);
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double da = a[i] - ma, db = b[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if (saa <= 0.0 || sbb <= 0.0) return std::nullopt;
    return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

std::optional<double> spearman_correlation(std::span<const double> a, std::span<const double> b) {
    const auto ra = ranks(a);
    const auto rb = ranks(b);
    return pearson_correlation(ra, rb);
}

std::vector<HeadCorrelation> attention_correlation(const Model& model, std::span<const TokenId> tokens,
                                                   std::size_t stats_prefix_len, std::size_t horizon,
                                                   const CompressionConfig& config) {
    if (stats_prefix_len == 0 || horizon == 0 || tokens.size() < stats_prefix_len + horizon) {
        throw InvalidArgument("attention_correlation: need tokens longer than prefix + horizon");
    }
    const auto& c = model.config();
    KvCache cache = model.make_cache();
    QueryStatistics stats(c.n_layers, c.n_heads, c.head_dim, QueryStatistics::Mode::Streaming);
    model.forward(tokens.first(stats_prefix_len), cache, &stats);

    const std::int64_t current = cache.next_position() - 1;
    const auto r_bar = future_rope_average(current, config.rope_window, model.rope());
    std::vector<std::vector<double>> expected(c.n_layers * c.n_heads);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        for (std::size_t h = 0; h < c.n_heads; ++h) {
            const auto dist = finalize_moments(stats.moments(l, h), r_bar, config.ridge);
            const QueryDistribution one[1] = {dist};
            expected[l * c.n_heads + h] = expected_attention_weights(cache, l, h / c.group_size(), one);
        }
    }

    AttentionTrace trace(c.n_layers, c.n_heads, AttentionTrace::kUnbounded, static_cast<std::int64_t>(stats_prefix_len));
    model.forward(tokens.subspan(stats_prefix_len, horizon), cache, &trace);

    std::vector<HeadCorrelation> out;
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        for (std::size_t h = 0; h < c.n_heads; ++h) {
            const std::size_t g = h / c.group_size();
            auto positions = cache.positions(l, g);
            const auto& rows = trace.rows(l, h);
            const std::size_t n = expected[l * c.n_heads + h].size();
            std::vector<double> realized(n, 0.0);
            for (const auto& row : rows) {
                for (std::size_t i = 0; i < n; ++i) {
                    realized[i] += row.weight_at(positions[i]) / static_cast<double>(rows.size());
                }
            }
            const auto& ex = expected[l * c.n_heads + h];
            out.push_back({l, h, n, pearson_correlation(ex, realized), spearman_correlation(ex, realized)});
        }
    }
    return out;
}

void write_correlation_csv(const std::filesystem::path& path, const std::vector<HeadCorrelation>& rows) {
    auto f = open_csv(path);
    f << "layer,head,entries,pearson,spearman\n";
    for (const auto& r : rows) {
        f << r.layer << ',' << r.head << ',' << r.entries << ',' << fmt_optional(r.pearson) << ','
          << fmt_optional(r.spearman) << '\n';
    }
}

// --- passkey -----------------------------------------------------------------

PasskeyTemplate default_passkey_template(std::size_t vocab_size) {
    if (vocab_size < 64) {
        throw InvalidArgument("passkey template needs a vocabulary of at least 64 ids");
    }
    PasskeyTemplate t;
    t.digits = {16, 17, 18, 19, 20, 21, 22, 23, 24, 25};
    t.filler = {40, 41, 42, 43, 44, 45, 46, 47};
    t.needle_prefix = {30, 31, 32};
    t.needle_suffix = {33};
    t.question = {34, 35, 36, 37, 31, 32};
    t.passkey_length = 5;
    return t;
}

PasskeyTemplate load_passkey_template(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) {
        throw IoError("cannot open passkey template " + path.string());
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(f);
        PasskeyTemplate t;
        t.filler = j.at("filler").get<std::vector<TokenId>>();
        t.needle_prefix = j.at("needle_prefix").get<std::vector<TokenId>>();
        t.needle_suffix = j.value("needle_suffix", std::vector<TokenId>{});
        t.question = j.at("question").get<std::vector<TokenId>>();
        t.digits = j.at("digits").get<std::vector<TokenId>>();
        t.passkey_length = j.value("passkey_length", std::size_t{5});
        if (t.digits.size() != 10 || t.filler.empty()) {
            throw FormatError("passkey template needs ten digit ids and a non-empty filler");
        }
        return t;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad passkey template: ") + e.what());
    }
}

std::vector<TokenId> build_passkey_prompt(const PasskeyTemplate& tpl, std::size_t length, double depth,
                                          std::span<const TokenId> passkey) {
    std::vector<TokenId> needle = tpl.needle_prefix;
    needle.insert(needle.end(), passkey.begin(), passkey.end());
    needle.insert(needle.end(), tpl.needle_suffix.begin(), tpl.needle_suffix.end());
    if (length < needle.size()) {
        throw InvalidArgument("haystack shorter than the needle");
    }
    const std::size_t filler_len = length - needle.size();
    const auto cut = static_cast<std::size_t>(std::lround(std::clamp(depth, 0.0, 1.0) * static_cast<double>(filler_len)));
    std::vector<TokenId> out;
    out.reserve(length + tpl.question.size());
    for (std::size_t i = 0; i < filler_len; ++i) {
        if (i == cut) out.insert(out.end(), needle.begin(), needle.end());
        out.push_back(tpl.filler[i % tpl.filler.size()]);
    }
    if (cut == filler_len) out.insert(out.end(), needle.begin(), needle.end());
    out.insert(out.end(), tpl.question.begin(), tpl.question.end());
    return out;
}

std::vector<PasskeyCell> passkey_bench(const Model& model, const PasskeyTemplate& tpl,
                                       std::span<const std::size_t> lengths, std::span<const double> depths,
                                       const CompressionConfig& config, std::size_t trials, std::uint64_t seed) {
    config.validate();
    if (policy_needs_future(config.policy)) {
        throw InvalidArgument("passkey bench cannot run oracle policies");
    }
    for (std::size_t len : lengths) {
        const std::size_t total = len + tpl.question.size() + tpl.passkey_length;
        if (static_cast<std::int64_t>(total) > model.config().max_position) {
            throw InvalidArgument("haystack of " + std::to_string(len) + " tokens exceeds max_position " +
                                  std::to_string(model.config().max_position));
        }
    }
    std::vector<PasskeyCell> cells;
    for (std::size_t len : lengths) {
        for (double depth : depths) {
            cells.push_back({len, depth, trials, 0});
        }
    }
    parallel_for(cells.size(), [&](std::size_t ci) {
        PasskeyCell& cell = cells[ci];
        std::mt19937_64 rng(seed + 1000003ULL * ci);
        std::uniform_int_distribution<std::size_t> digit(0, 9);
        for (std::size_t t = 0; t < trials; ++t) {
            std::vector<TokenId> key(tpl.passkey_length);
            for (auto& k : key) k = tpl.digits[digit(rng)];
            const auto prompt = build_passkey_prompt(tpl, cell.length, cell.depth, key);

            KvCache cache = model.make_cache();
            PrefillObservers pre(model, config);
            Tensor logits = model.forward(prompt, cache, &pre.list);
            CompressionConfig cfg = config;
            cfg.seed = seed + t;
            compress_prefill(model, cache, pre.inputs(), cfg);
            const auto out = decode_from(model, logits.row(prompt.size() - 1), tpl.passkey_length, cache);
            if (out.tokens == key) ++cell.correct;
        }
    });
    return cells;
}

void write_passkey_csv(const std::filesystem::path& path, const std::vector<PasskeyCell>& cells) {
    auto f = open_csv(path);
    f << "length,depth,trials,correct,accuracy\n";
    for (const auto& c : cells) {
        f << c.length << ',' << fmt_double(c.depth) << ',' << c.trials << ',' << c.correct << ','
          << fmt_double(c.accuracy()) << '\n';
    }
}

// --- memory ------------------------------------------------------------------

std::size_t analytic_cache_bytes(const ModelConfig& model, std::size_t length, const CompressionConfig& config) {
    const std::size_t per_entry = 2 * model.head_dim * sizeof(float);
    std::size_t entries_per_layer = 0;
    if (config.ratio == 0.0) {
        entries_per_layer = length * model.n_kv_heads;
    } else if (config.head_adaptive) {
        const std::size_t floors = model.n_kv_heads * std::min(config.min_keep_per_head, length);
        entries_per_layer = std::max(layer_budget(length * model.n_kv_heads, config.ratio), floors);
    } else {
        entries_per_layer =
            model.n_kv_heads *
            std::max(uniform_head_budget(length, config.ratio), std::min(config.min_keep_per_head, length));
    }
    return model.n_layers * entries_per_layer * per_entry;
}

std::vector<MemoryPoint> memory_curve(const Model& model, std::span<const std::size_t> lengths,
                                      std::span<const double> ratios, const CompressionConfig& config,
                                      std::uint64_t seed) {
    if (policy_needs_future(config.policy)) {
        throw InvalidArgument("memory curve cannot run oracle policies");
    }
    std::vector<MemoryPoint> points;
    for (std::size_t len : lengths) {
        const auto tokens = random_tokens(len, model.config().vocab_size, seed + len);
        KvCache prefilled = model.make_cache();
        PrefillObservers pre(model, config);
        model.forward(tokens, prefilled, &pre.list);
        for (double r : ratios) {
            CompressionConfig cfg = config;
            cfg.ratio = r;
            KvCache cache = prefilled;
            compress_prefill(model, cache, pre.inputs(), cfg);
            points.push_back({len, r, analytic_cache_bytes(model.config(), len, cfg), cache.memory_bytes()});
        }
    }
    return points;
}

void write_memory_csv(const std::filesystem::path& path, const std::vector<MemoryPoint>& points) {
    auto f = open_csv(path);
    f << "length,ratio,analytic_bytes,measured_bytes\n";
    for (const auto& p : points) {
        f << p.length << ',' << fmt_double(p.ratio) << ',' << p.analytic_bytes << ',' << p.measured_bytes << '\n';
    }
}

// --- histograms ------------------------------------------------------------

HistogramFit fit_histogram(std::span<const float> samples, std::size_t bins) {
    if (samples.empty() || bins == 0) {
        throw InvalidArgument("fit_histogram needs samples and at least one bin");
    }
    HistogramFit fit;
    double mean = 0.0, m2 = 0.0;
    std::size_t n = 0;
    for (float x : samples) {
        ++n;
        const double d = x - mean;
        mean += d / static_cast<double>(n);
        m2 += d * (x - mean);
    }
    fit.mean = mean;
    fit.stddev = n > 1 ? std::sqrt(m2 / static_cast<double>(n - 1)) : 0.0;
    const auto [mn, mx] = std::minmax_element(samples.begin(), samples.end());
    fit.lo = *mn;
    fit.hi = *mx;
    fit.degenerate = !(fit.stddev > 0.0) || fit.hi <= fit.lo;
    fit.counts.assign(bins, 0);
    fit.normal_counts.assign(bins, 0.0);
    if (fit.degenerate) {
        fit.counts[0] = samples.size();
        return fit;
    }
    const double width = (fit.hi - fit.lo) / static_cast<double>(bins);
    for (float x : samples) {
        auto b = static_cast<std::size_t>((x - fit.lo) / width);
        fit.counts[std::min(b, bins - 1)]++;
    }
    auto cdf = [&](double x) { return 0.5 * std::erfc(-(x - fit.mean) / (fit.stddev * std::sqrt(2.0))); };
    for (std::size_t b = 0; b < bins; ++b) {
        const double a = fit.lo + width * static_cast<double>(b);
        fit.normal_counts[b] = static_cast<double>(n) * (cdf(a + width) - cdf(a));
    }
    return fit;
}

namespace {

class ActivationCollector final : public ForwardObserver {
public:
    ActivationCollector(std::size_t layer, std::size_t head) : layer_(layer), head_(head) {}

    void on_layer_input(std::size_t layer, std::int64_t, std::span<const float> hidden) override {
        if (layer != layer_) return;
        if (hidden_.empty()) hidden_.resize(hidden.size());
        for (std::size_t d = 0; d < hidden.size(); ++d) hidden_[d].push_back(hidden[d]);
    }

    void on_query(std::size_t layer, std::size_t head, std::int64_t, std::span<const float> q) override {
        if (layer != layer_ || head != head_) return;
        if (queries_.empty()) queries_.resize(q.size());
        for (std::size_t d = 0; d < q.size(); ++d) queries_[d].push_back(q[d]);
    }

    std::vector<std::vector<float>> hidden_;
    std::vector<std::vector<float>> queries_;

private:
    std::size_t layer_;
    std::size_t head_;
};

} // namespace

ActivationReport activation_histograms(const Model& model, std::span<const TokenId> tokens, std::size_t layer,
                                       std::size_t head, std::size_t bins) {
    const auto& c = model.config();
    if (layer >= c.n_layers || head >= c.n_heads) {
        throw InvalidArgument("activation_histograms: layer/head out of range");
    }
    if (tokens.empty()) {
        throw InvalidArgument("activation_histograms: empty token stream");
    }
    ActivationCollector collector(layer, head);
    KvCache cache = model.make_cache();
    model.forward(tokens, cache, &collector);
    ActivationReport report;
    report.layer = layer;
    report.head = head;
    for (const auto& d : collector.hidden_) report.hidden.push_back(fit_histogram(d, bins));
    for (const auto& d : collector.queries_) report.queries.push_back(fit_histogram(d, bins));
    return report;
}

void write_histogram_csv(const std::filesystem::path& path, const ActivationReport& report) {
    auto f = open_csv(path);
    f << "kind,dim,mean,stddev,degenerate,bin,lo,hi,count,normal_count\n";
    auto emit = [&](const char* kind, const std::vector<HistogramFit>& fits) {
        for (std::size_t d = 0; d < fits.size(); ++d) {
            const auto& h = fits[d];
            const double width = (h.hi - h.lo) / static_cast<double>(h.counts.size());
            for (std::size_t b = 0; b < h.counts.size(); ++b) {
                f << kind << ',' << d << ',' << fmt_double(h.mean) << ',' << fmt_double(h.stddev) << ','
                  << (h.degenerate ? 1 : 0) << ',' << b << ',' << fmt_double(h.lo + width * static_cast<double>(b))
                  << ',' << fmt_double(h.lo + width * static_cast<double>(b + 1)) << ',' << h.counts[b] << ','
                  << fmt_double(h.normal_counts[b]) << '\n';
            }
        }
    };
    emit("hidden", report.hidden);
    emit("query", report.queries);
}

} // namespace kvc
