#include "kvc/rope.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "kvc/errors.hpp"

namespace kvc {

RopeTable::RopeTable(std::size_t head_dim, double theta, std::int64_t max_position)
    : head_dim_(head_dim), theta_(theta), max_position_(max_position) {
    if (head_dim == 0 || head_dim % 2 != 0) {
        throw InvalidArgument("rope head_dim must be even and positive, got " + std::to_string(head_dim));
    }
    if (!(theta > 0.0)) {
        throw InvalidArgument("rope theta must be positive");
    }
    if (max_position < 1) {
        throw InvalidArgument("rope max_position must be >= 1");
    }
    const std::size_t n_pairs = head_dim / 2;
    frequencies_.resize(n_pairs);
    for (std::size_t j = 0; j < n_pairs; ++j) {
        frequencies_[j] = std::pow(theta, -2.0 * static_cast<double>(j) / static_cast<double>(head_dim));
    }
    cos_.resize(static_cast<std::size_t>(max_position) * n_pairs);
    sin_.resize(cos_.size());
    for (std::int64_t p = 0; p < max_position; ++p) {
        for (std::size_t j = 0; j < n_pairs; ++j) {
            const double angle = static_cast<double>(p) * frequencies_[j];
            cos_[static_cast<std::size_t>(p) * n_pairs + j] = static_cast<float>(std::cos(angle));
            sin_[static_cast<std::size_t>(p) * n_pairs + j] = static_cast<float>(std::sin(angle));
        }
    }
}

float RopeTable::cos_at(std::int64_t position, std::size_t pair) const {
    return cos_[static_cast<std::size_t>(position) * pairs() + pair];
}

float RopeTable::sin_at(std::int64_t position, std::size_t pair) const {
    return sin_[static_cast<std::size_t>(position) * pairs() + pair];
}

void apply_rope_inplace(std::span<float> x, std::int64_t position, const RopeTable& table) {
    if (x.size() != table.head_dim()) {
        throw ShapeError("apply_rope: vector of " + std::to_string(x.size()) + " against head_dim " +
                         std::to_string(table.head_dim()));
    }
    if (position < 0 || position >= table.max_position()) {
        throw PositionOverflow("rope position " + std::to_string(position) + " outside [0, " +
                               std::to_string(table.max_position()) + ")");
    }
    for (std::size_t j = 0; j < table.pairs(); ++j) {
        const float c = table.cos_at(position, j);
        const float s = table.sin_at(position, j);
        const float x0 = x[2 * j];
        const float x1 = x[2 * j + 1];
        x[2 * j] = x0 * c - x1 * s;
        x[2 * j + 1] = x0 * s + x1 * c;
    }
}

Tensor apply_rope(const Tensor& x, std::int64_t position, const RopeTable& table) {
    Tensor out = x;
    apply_rope_inplace(out.data(), position, table);
    return out;
}

AveragedRope::AveragedRope(std::vector<float> mean_cos, std::vector<float> mean_sin)
    : mean_cos_(std::move(mean_cos)), mean_sin_(std::move(mean_sin)) {
    if (mean_cos_.size() != mean_sin_.size()) {
        throw ShapeError("averaged rope: cos/sin length mismatch");
    }
}

AveragedRope AveragedRope::identity(std::size_t head_dim) {
    return AveragedRope(std::vector<float>(head_dim / 2, 1.0f), std::vector<float>(head_dim / 2, 0.0f));
}

void AveragedRope::apply(std::span<const float> x, std::span<float> out) const {
    for (std::size_t j = 0; j < mean_cos_.size(); ++j) {
        const float c = mean_cos_[j], s = mean_sin_[j];
        const float x0 = x[2 * j], x1 = x[2 * j + 1];
        out[2 * j] = c * x0 - s * x1;
        out[2 * j + 1] = s * x0 + c * x1;
    }
}

std::vector<double> AveragedRope::conjugate(std::span<const double> cov) const {
    const std::size_t d = head_dim();
    if (cov.size() != d * d) {
        throw ShapeError("averaged rope conjugate: expected a " + std::to_string(d) + "x" + std::to_string(d) +
                         " matrix");
    }
    // Left multiply: rows (2a, 2a+1) mix through block a.
    std::vector<double> tmp(d * d);
    for (std::size_t a = 0; a < mean_cos_.size(); ++a) {
        const double c = mean_cos_[a], s = mean_sin_[a];
        const double* r0 = cov.data() + (2 * a) * d;
        const double* r1 = cov.data() + (2 * a + 1) * d;
        double* o0 = tmp.data() + (2 * a) * d;
        double* o1 = tmp.data() + (2 * a + 1) * d;
        for (std::size_t col = 0; col < d; ++col) {
            o0[col] = c * r0[col] - s * r1[col];
            o1[col] = s * r0[col] + c * r1[col];
        }
    }
    // Right multiply by the transpose: columns (2b, 2b+1) mix through block b.
    std::vector<double> out(d * d);
    for (std::size_t row = 0; row < d; ++row) {
        const double* t = tmp.data() + row * d;
        double* o = out.data() + row * d;
        for (std::size_t b = 0; b < mean_cos_.size(); ++b) {
            const double c = mean_cos_[b], s = mean_sin_[b];
            const double t0 = t[2 * b], t1 = t[2 * b + 1];
            o[2 * b] = t0 * c - t1 * s;
            o[2 * b + 1] = t0 * s + t1 * c;
        }
    }
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = i + 1; j < d; ++j) {
            const double m = 0.5 * (out[i * d + j] + out[j * d + i]);
            out[i * d + j] = m;
            out[j * d + i] = m;
        }
    }
    return out;
}

Tensor AveragedRope::to_dense() const {
    const std::size_t d = head_dim();
    Tensor m({d, d});
    for (std::size_t j = 0; j < mean_cos_.size(); ++j) {
        m.at(2 * j, 2 * j) = mean_cos_[j];
        m.at(2 * j, 2 * j + 1) = -mean_sin_[j];
        m.at(2 * j + 1, 2 * j) = mean_sin_[j];
        m.at(2 * j + 1, 2 * j + 1) = mean_cos_[j];
    }
    return m;
}

AveragedRope averaged_rope_matrix(std::int64_t start, std::int64_t window, const RopeTable& table) {
    if (window < 1) {
        throw InvalidArgument("averaged rope window must be >= 1");
    }
    if (start < -1) {
        throw InvalidArgument("averaged rope start must be >= -1");
    }
    if (start + window > table.max_position()) {
        throw PositionOverflow("averaged rope window [" + std::to_string(start + 1) + ", " +
                               std::to_string(start + window) + "] exceeds max_position " +
                               std::to_string(table.max_position()));
    }
    const std::size_t n_pairs = table.pairs();
    std::vector<float> mc(n_pairs), ms(n_pairs);
    for (std::size_t j = 0; j < n_pairs; ++j) {
        const double f = table.frequency(j);
        double sc = 0.0, ss = 0.0;
        for (std::int64_t p = start + 1; p <= start + window; ++p) {
            const double angle = static_cast<double>(p) * f;
            sc += std::cos(angle);
            ss += std::sin(angle);
        }
        mc[j] = static_cast<float>(sc / static_cast<double>(window));
        ms[j] = static_cast<float>(ss / static_cast<double>(window));
    }
    return AveragedRope(std::move(mc), std::move(ms));
}

AveragedRope future_rope_average(std::int64_t current, std::int64_t window, const RopeTable& table) {
    const std::int64_t last_valid = table.max_position() - 1;
    std::int64_t start = std::max<std::int64_t>(current, -1);
    std::int64_t span = std::min(window, last_valid - start);
    if (span < 1) {
        start = last_valid - 1;
        span = 1;
    }
    return averaged_rope_matrix(start, span, table);
}

Tensor rope_matrix(std::int64_t position, const RopeTable& table) {
    if (position < 0 || position >= table.max_position()) {
        throw PositionOverflow("rope position " + std::to_string(position) + " out of range");
    }
    const std::size_t d = table.head_dim();
    Tensor m({d, d});
    for (std::size_t j = 0; j < table.pairs(); ++j) {
        const float c = table.cos_at(position, j), s = table.sin_at(position, j);
        m.at(2 * j, 2 * j) = c;
        m.at(2 * j, 2 * j + 1) = -s;
        m.at(2 * j + 1, 2 * j) = s;
        m.at(2 * j + 1, 2 * j + 1) = c;
    }
    return m;
}

} // namespace kvc
