#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kvc/controller.hpp"
#include "kvc/model.hpp"
#include "kvc/policies.hpp"

namespace kvc {

// ---------------------------------------------------------------------------
// Reconstruction error of the residual stream
// ---------------------------------------------------------------------------

/// Prefills tokens[0, compress_at), compresses with `config`, teacher-forces
/// the rest, and returns per layer the mean over positions >= compress_at of
/// ||h - h_compressed|| for the post-attention residual stream. The oracle
/// policies read their future attention from the uncompressed pass.
std::vector<double> reconstruction_error(const Model& model, std::span<const TokenId> tokens, std::size_t compress_at,
                                         const CompressionConfig& config);

struct ReconstructionStudy {
    ModelConfig model = tiny_config();
    RandomModelOptions model_options;
    std::size_t prompt_len = 96;
    std::size_t continuation_len = 32;
    double ratio = 0.5;
    std::vector<PolicyId> policies;
    std::vector<std::uint64_t> seeds;
    CompressionConfig base;
};

struct ReconstructionRow {
    std::uint64_t seed = 0;
    PolicyId policy = PolicyId::ExpectedAttention;
    std::vector<double> per_layer;

    double mean() const;
};

/// One seeded random model + random token stream per seed, every policy
/// evaluated on it. Seeds run in parallel.
std::vector<ReconstructionRow> run_reconstruction_study(const ReconstructionStudy& study);

/// seed,policy,layer,error
void write_reconstruction_csv(const std::filesystem::path& path, const std::vector<ReconstructionRow>& rows);

// ---------------------------------------------------------------------------
// Expected vs realized attention
// ---------------------------------------------------------------------------

/// Pearson correlation; nullopt when either side has zero variance.
std::optional<double> pearson_correlation(std::span<const double> a, std::span<const double> b);
/// Pearson on average ranks.
std::optional<double> spearman_correlation(std::span<const double> a, std::span<const double> b);

struct HeadCorrelation {
    std::size_t layer = 0;
    std::size_t head = 0;
    std::size_t entries = 0;
    std::optional<double> pearson;
    std::optional<double> spearman;
};

/// Query moments from tokens[0, stats_prefix_len); expected attention â of
/// each query head over the cached prefix keys versus the realized attention
/// on those keys averaged over the next `horizon` query rows.
std::vector<HeadCorrelation> attention_correlation(const Model& model, std::span<const TokenId> tokens,
                                                   std::size_t stats_prefix_len, std::size_t horizon,
                                                   const CompressionConfig& config);

/// layer,head,entries,pearson,spearman (empty field when undefined)
void write_correlation_csv(const std::filesystem::path& path, const std::vector<HeadCorrelation>& rows);

// ---------------------------------------------------------------------------
// Passkey retrieval
// ---------------------------------------------------------------------------

/// Token-id templates for the haystack; no tokenizer involved.
struct PasskeyTemplate {
    std::vector<TokenId> filler;
    std::vector<TokenId> needle_prefix;
    std::vector<TokenId> needle_suffix;
    std::vector<TokenId> question;
    std::vector<TokenId> digits;  // ten ids for '0'..'9'
    std::size_t passkey_length = 5;
};

/// A template whose ids fit in a vocabulary of `vocab_size` (>= 64).
PasskeyTemplate default_passkey_template(std::size_t vocab_size);
PasskeyTemplate load_passkey_template(const std::filesystem::path& path);

/// Filler repeated to `length` tokens with the needle spliced in at
/// `depth` (fraction of the haystack), followed by the question.
std::vector<TokenId> build_passkey_prompt(const PasskeyTemplate& tpl, std::size_t length, double depth,
                                          std::span<const TokenId> passkey);

struct PasskeyCell {
    std::size_t length = 0;
    double depth = 0.0;
    std::size_t trials = 0;
    std::size_t correct = 0;

    double accuracy() const { return trials ? static_cast<double>(correct) / static_cast<double>(trials) : 0.0; }
};

std::vector<PasskeyCell> passkey_bench(const Model& model, const PasskeyTemplate& tpl,
                                       std::span<const std::size_t> lengths, std::span<const double> depths,
                                       const CompressionConfig& config, std::size_t trials, std::uint64_t seed);

/// length,depth,trials,correct,accuracy
void write_passkey_csv(const std::filesystem::path& path, const std::vector<PasskeyCell>& cells);

// ---------------------------------------------------------------------------
// Cache memory
// ---------------------------------------------------------------------------

/// Bytes the cache holds after prefill compression of `length` tokens at
/// `ratio`, from the budget arithmetic alone.
std::size_t analytic_cache_bytes(const ModelConfig& model, std::size_t length, const CompressionConfig& config);

struct MemoryPoint {
    std::size_t length = 0;
    double ratio = 0.0;
    std::size_t analytic_bytes = 0;
    std::size_t measured_bytes = 0;
};

std::vector<MemoryPoint> memory_curve(const Model& model, std::span<const std::size_t> lengths,
                                      std::span<const double> ratios, const CompressionConfig& config,
                                      std::uint64_t seed);

/// length,ratio,analytic_bytes,measured_bytes
void write_memory_csv(const std::filesystem::path& path, const std::vector<MemoryPoint>& points);

// ---------------------------------------------------------------------------
// Activation histograms
// ---------------------------------------------------------------------------

struct HistogramFit {
    double mean = 0.0;
    double stddev = 0.0;
    bool degenerate = false;
    double lo = 0.0;
    double hi = 0.0;
    std::vector<std::size_t> counts;
    /// Expected count per bin under N(mean, stddev²).
    std::vector<double> normal_counts;
};

/// Equal-width histogram plus moment-matched Normal.
HistogramFit fit_histogram(std::span<const float> samples, std::size_t bins);

struct ActivationReport {
    std::size_t layer = 0;
    std::size_t head = 0;
    std::vector<HistogramFit> hidden;   // per hidden dimension
    std::vector<HistogramFit> queries;  // per head dimension
};

ActivationReport activation_histograms(const Model& model, std::span<const TokenId> tokens, std::size_t layer,
                                       std::size_t head, std::size_t bins);

/// kind,dim,mean,stddev,degenerate,bin,lo,hi,count,normal_count
void write_histogram_csv(const std::filesystem::path& path, const ActivationReport& report);

/// Uniform random ids in [0, vocab).
std::vector<TokenId> random_tokens(std::size_t n, std::size_t vocab, std::uint64_t seed);

} // namespace kvc
