#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <span>
#include <vector>

#include "kvc/rope.hpp"
#include "kvc/trace.hpp"

namespace kvc {

/// One-pass (Welford) mean and co-moment accumulator for pre-RoPE queries.
class QueryMoments {
public:
    QueryMoments() = default;
    explicit QueryMoments(std::size_t dim);

    void update(std::span<const float> sample);
    void reset();

    std::size_t dim() const noexcept { return dim_; }
    std::size_t count() const noexcept { return count_; }
    std::span<const double> mean() const noexcept { return mean_; }

    /// Unbiased covariance (divisor n-1), row-major d x d. Zero for n < 2.
    std::vector<double> covariance() const;

private:
    std::size_t dim_ = 0;
    std::size_t count_ = 0;
    std::vector<double> mean_;
    std::vector<double> comoment_;
};

/// Last `capacity` query vectors of one head, oldest first.
class QueryRing {
public:
    explicit QueryRing(std::size_t capacity = 128);

    void push(std::span<const float> sample);
    std::size_t size() const noexcept { return samples_.size(); }
    std::size_t capacity() const noexcept { return capacity_; }
    QueryMoments moments(std::size_t dim) const;

private:
    std::size_t capacity_;
    std::deque<std::vector<float>> samples_;
};

/// Position-averaged query distribution N(μ̄_q, Σ̄_q) for one query head.
struct QueryDistribution {
    std::vector<double> mean;
    std::vector<double> cov;

    std::size_t dim() const noexcept { return mean.size(); }
};

/// Adds ridge * (trace/d) to the covariance diagonal (ridge * 1 when the
/// trace is zero) and conjugates by R̄: μ̄_q = R̄ μ, Σ̄_q = R̄ Σ R̄ᵀ.
/// Throws InvalidArgument when no samples were seen.
QueryDistribution finalize_moments(const QueryMoments& moments, const AveragedRope& r_bar, double ridge);

/// log ẑ = μ̄ᵀk/√d + kᵀΣ̄k/(2d), the log of the Gaussian MGF evaluated at k/√d.
double expected_log_score(std::span<const float> key, const QueryDistribution& dist);
double expected_log_score(std::span<const double> key, std::span<const double> mean, std::span<const double> cov);

struct MonteCarloEstimate {
    double mean = 0.0;
    double std_error = 0.0;
    std::size_t samples = 0;
};

/// Monte-Carlo estimate of E[exp(qᵀk/√d)] for q ~ N(mean, cov).
/// Throws NotPositiveSemidefinite when cov is not PSD.
MonteCarloEstimate mgf_oracle(std::span<const double> mean, std::span<const double> cov, std::span<const double> key,
                              std::size_t n_samples, std::uint64_t seed);

/// Lower-triangular L with L Lᵀ = cov, tolerating zero pivots of a
/// semidefinite matrix. Throws NotPositiveSemidefinite.
std::vector<double> cholesky_psd(std::span<const double> cov, std::size_t dim);

/// Collects pre-RoPE query statistics during forward passes.
///
/// Streaming mode accumulates every query seen (prefill); window mode keeps
/// the last `window` queries per head (decoding).
class QueryStatistics final : public ForwardObserver {
public:
    enum class Mode { Streaming, Window };

    QueryStatistics(std::size_t n_layers, std::size_t n_heads, std::size_t head_dim, Mode mode,
                    std::size_t window = 128);

    void on_query(std::size_t layer, std::size_t head, std::int64_t position, std::span<const float> query) override;

    Mode mode() const noexcept { return mode_; }
    std::size_t head_dim() const noexcept { return head_dim_; }
    QueryMoments moments(std::size_t layer, std::size_t head) const;
    std::int64_t last_position() const noexcept { return last_position_; }
    void reset();

private:
    std::size_t n_layers_;
    std::size_t n_heads_;
    std::size_t head_dim_;
    Mode mode_;
    std::vector<QueryMoments> streaming_;
    std::vector<QueryRing> rings_;
    std::int64_t last_position_ = -1;
};

} // namespace kvc
