#include "kvc/stats.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "kvc/errors.hpp"

namespace kvc {

QueryMoments::QueryMoments(std::size_t dim) : dim_(dim), mean_(dim, 0.0), comoment_(dim * dim, 0.0) {}

void QueryMoments::update(std::span<const float> sample) {
    if (sample.size() != dim_) {
        throw ShapeError("query moments: sample of " + std::to_string(sample.size()) + " for dim " +
                         std::to_string(dim_));
    }
    ++count_;
    const double n = static_cast<double>(count_);
    std::vector<double> before(dim_);
    for (std::size_t i = 0; i < dim_; ++i) {
        before[i] = sample[i] - mean_[i];
        mean_[i] += before[i] / n;
    }
    // C += (x - mean_old)(x - mean_new)ᵀ
    for (std::size_t i = 0; i < dim_; ++i) {
        double* row = comoment_.data() + i * dim_;
        for (std::size_t j = 0; j < dim_; ++j) {
            row[j] += before[i] * (sample[j] - mean_[j]);
        }
    }
}

void QueryMoments::reset() {
    count_ = 0;
    std::fill(mean_.begin(), mean_.end(), 0.0);
    std::fill(comoment_.begin(), comoment_.end(), 0.0);
}

std::vector<double> QueryMoments::covariance() const {
    std::vector<double> cov(dim_ * dim_, 0.0);
    if (count_ < 2) {
        return cov;
    }
    const double inv = 1.0 / static_cast<double>(count_ - 1);
    for (std::size_t i = 0; i < dim_; ++i) {
        for (std::size_t j = 0; j < dim_; ++j) {
            // Symmetrize away the rounding asymmetry of the rank-1 updates.
            cov[i * dim_ + j] = 0.5 * (comoment_[i * dim_ + j] + comoment_[j * dim_ + i]) * inv;
        }
    }
    return cov;
}

QueryRing::QueryRing(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) {
        throw InvalidArgument("query ring capacity must be positive");
    }
}

void QueryRing::push(std::span<const float> sample) {
    samples_.emplace_back(sample.begin(), sample.end());
    if (samples_.size() > capacity_) {
        samples_.pop_front();
    }
}

QueryMoments QueryRing::moments(std::size_t dim) const {
    QueryMoments m(dim);
    for (const auto& s : samples_) {
        m.update(s);
    }
    return m;
}

QueryDistribution finalize_moments(const QueryMoments& moments, const AveragedRope& r_bar, double ridge) {
    if (moments.count() == 0) {
        throw InvalidArgument("finalize_moments: no query samples accumulated");
    }
    const std::size_t d = moments.dim();
    if (r_bar.head_dim() != d) {
        throw ShapeError("finalize_moments: averaged rope width does not match query width");
    }
    std::vector<double> cov = moments.covariance();
    double trace = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        trace += cov[i * d + i];
    }
    const double scale = trace > 0.0 ? trace / static_cast<double>(d) : 1.0;
    for (std::size_t i = 0; i < d; ++i) {
        cov[i * d + i] += ridge * scale;
    }

    QueryDistribution out;
    out.mean.resize(d);
    const auto mu = moments.mean();
    auto mc = r_bar.mean_cos();
    auto ms = r_bar.mean_sin();
    for (std::size_t j = 0; j < d / 2; ++j) {
        const double c = mc[j], s = ms[j];
        out.mean[2 * j] = c * mu[2 * j] - s * mu[2 * j + 1];
        out.mean[2 * j + 1] = s * mu[2 * j] + c * mu[2 * j + 1];
    }
    out.cov = r_bar.conjugate(cov);
    return out;
}

double expected_log_score(std::span<const double> key, std::span<const double> mean, std::span<const double> cov) {
    const std::size_t d = key.size();
    double linear = 0.0;
    double quad = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        linear += mean[i] * key[i];
        const double* row = cov.data() + i * d;
        double acc = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            acc += row[j] * key[j];
        }
        quad += key[i] * acc;
    }
    const double dd = static_cast<double>(d);
    return linear / std::sqrt(dd) + quad / (2.0 * dd);
}

double expected_log_score(std::span<const float> key, const QueryDistribution& dist) {
    if (key.size() != dist.dim()) {
        throw ShapeError("expected_log_score: key width does not match the query distribution");
    }
    std::vector<double> k(key.begin(), key.end());
    return expected_log_score(k, dist.mean, dist.cov);
}

std::vector<double> cholesky_psd(std::span<const double> cov, std::size_t d) {
    if (cov.size() != d * d) {
        throw ShapeError("cholesky: matrix is not d x d");
    }
    double scale = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            if (std::abs(cov[i * d + j] - cov[j * d + i]) > 1e-9 * (1.0 + std::abs(cov[i * d + j]))) {
                throw NotPositiveSemidefinite("covariance is not symmetric");
            }
        }
        scale = std::max(scale, std::abs(cov[i * d + i]));
    }
    const double tol = 1e-10 * std::max(scale, 1e-300);
    std::vector<double> L(d * d, 0.0);
    for (std::size_t j = 0; j < d; ++j) {
        double diag = cov[j * d + j];
        for (std::size_t p = 0; p < j; ++p) {
            diag -= L[j * d + p] * L[j * d + p];
        }
        if (diag < -tol) {
            throw NotPositiveSemidefinite("covariance has a negative pivot at column " + std::to_string(j));
        }
        if (diag <= tol) {
            // Zero pivot: the remaining column must vanish too.
            for (std::size_t i = j + 1; i < d; ++i) {
                double off = cov[i * d + j];
                for (std::size_t p = 0; p < j; ++p) {
                    off -= L[i * d + p] * L[j * d + p];
                }
                if (std::abs(off) > std::sqrt(tol) * std::sqrt(scale)) {
                    throw NotPositiveSemidefinite("covariance is indefinite at column " + std::to_string(j));
                }
            }
            continue;
        }
        const double ljj = std::sqrt(diag);
        L[j * d + j] = ljj;
        for (std::size_t i = j + 1; i < d; ++i) {
            double off = cov[i * d + j];
            for (std::size_t p = 0; p < j; ++p) {
                off -= L[i * d + p] * L[j * d + p];
            }
            L[i * d + j] = off / ljj;
        }
    }
    return L;
}

MonteCarloEstimate mgf_oracle(std::span<const double> mean, std::span<const double> cov, std::span<const double> key,
                              std::size_t n_samples, std::uint64_t seed) {
    const std::size_t d = key.size();
    if (mean.size() != d) {
        throw ShapeError("mgf_oracle: mean/key width mismatch");
    }
    if (n_samples == 0) {
        throw InvalidArgument("mgf_oracle: need at least one sample");
    }
    const auto L = cholesky_psd(cov, d);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

    // qᵀk/√d = μᵀk/√d + zᵀ(Lᵀk)/√d with z ~ N(0, I).
    double offset = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        offset += mean[i] * key[i];
    }
    offset *= inv_sqrt_d;
    std::vector<double> w(d, 0.0);
    for (std::size_t p = 0; p < d; ++p) {
        for (std::size_t i = p; i < d; ++i) {
            w[p] += L[i * d + p] * key[i];
        }
        w[p] *= inv_sqrt_d;
    }

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    double m = 0.0, m2 = 0.0;
    for (std::size_t s = 1; s <= n_samples; ++s) {
        double x = offset;
        for (std::size_t p = 0; p < d; ++p) {
            x += w[p] * normal(rng);
        }
        const double z = std::exp(x);
        const double delta = z - m;
        m += delta / static_cast<double>(s);
        m2 += delta * (z - m);
    }
    MonteCarloEstimate est;
    est.mean = m;
    est.samples = n_samples;
    est.std_error =
        n_samples > 1 ? std::sqrt(m2 / static_cast<double>(n_samples - 1) / static_cast<double>(n_samples)) : 0.0;
    return est;
}

QueryStatistics::QueryStatistics(std::size_t n_layers, std::size_t n_heads, std::size_t head_dim, Mode mode,
                                 std::size_t window)
    : n_layers_(n_layers), n_heads_(n_heads), head_dim_(head_dim), mode_(mode) {
    if (mode == Mode::Streaming) {
        streaming_.assign(n_layers * n_heads, QueryMoments(head_dim));
    } else {
        rings_.assign(n_layers * n_heads, QueryRing(window));
    }
}

void QueryStatistics::on_query(std::size_t layer, std::size_t head, std::int64_t position,
                               std::span<const float> query) {
    const std::size_t idx = layer * n_heads_ + head;
    if (mode_ == Mode::Streaming) {
        streaming_[idx].update(query);
    } else {
        rings_[idx].push(query);
    }
    last_position_ = std::max(last_position_, position);
}

QueryMoments QueryStatistics::moments(std::size_t layer, std::size_t head) const {
    if (layer >= n_layers_ || head >= n_heads_) {
        throw InvalidArgument("query statistics head out of range");
    }
    const std::size_t idx = layer * n_heads_ + head;
    return mode_ == Mode::Streaming ? streaming_[idx] : rings_[idx].moments(head_dim_);
}

void QueryStatistics::reset() {
    for (auto& m : streaming_) m.reset();
    for (auto& r : rings_) r = QueryRing(r.capacity());
    last_position_ = -1;
}

} // namespace kvc
