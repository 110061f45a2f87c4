#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "kvc/tensor.hpp"

namespace kvc {

/// Precomputed cos/sin values for interleaved-pair rotary embeddings.
///
/// Pair j covers dimensions (2j, 2j+1) and rotates by angle
/// position * theta^(-2j/head_dim). Positions [0, max_position) are tabulated.
class RopeTable {
public:
    RopeTable(std::size_t head_dim, double theta, std::int64_t max_position);

    std::size_t head_dim() const noexcept { return head_dim_; }
    std::size_t pairs() const noexcept { return head_dim_ / 2; }
    double theta() const noexcept { return theta_; }
    std::int64_t max_position() const noexcept { return max_position_; }

    /// Angular frequency of rotation pair j.
    double frequency(std::size_t pair) const { return frequencies_[pair]; }

    float cos_at(std::int64_t position, std::size_t pair) const;
    float sin_at(std::int64_t position, std::size_t pair) const;

private:
    std::size_t head_dim_;
    double theta_;
    std::int64_t max_position_;
    std::vector<double> frequencies_;
    std::vector<float> cos_;
    std::vector<float> sin_;
};

/// Rotates `x` in place as if it sat at `position`.
void apply_rope_inplace(std::span<float> x, std::int64_t position, const RopeTable& table);

/// Value-returning form. Throws PositionOverflow for positions outside the table.
Tensor apply_rope(const Tensor& x, std::int64_t position, const RopeTable& table);

/// Mean of the rotation matrices R_p over p in [start+1, start+window].
///
/// The average of block-diagonal 2x2 rotations is itself block diagonal with
/// blocks [[c, -s], [s, c]], so only (c, s) per pair is stored.
class AveragedRope {
public:
    AveragedRope() = default;
    AveragedRope(std::vector<float> mean_cos, std::vector<float> mean_sin);

    /// Identity transform for a head of width `head_dim`.
    static AveragedRope identity(std::size_t head_dim);

    std::size_t head_dim() const noexcept { return mean_cos_.size() * 2; }
    std::span<const float> mean_cos() const noexcept { return mean_cos_; }
    std::span<const float> mean_sin() const noexcept { return mean_sin_; }

    /// out = R̄ x
    void apply(std::span<const float> x, std::span<float> out) const;

    /// R̄ C R̄ᵀ for a symmetric d x d matrix stored row-major in double.
    std::vector<double> conjugate(std::span<const double> cov) const;

    /// Materializes the full d x d matrix (tests and diagnostics only).
    Tensor to_dense() const;

private:
    std::vector<float> mean_cos_;
    std::vector<float> mean_sin_;
};

/// Averages R_p over p in [start+1, start+window].
/// Throws InvalidArgument when window == 0 or start < -1, PositionOverflow when
/// start + window > max_position.
AveragedRope averaged_rope_matrix(std::int64_t start, std::int64_t window, const RopeTable& table);

/// Window actually used by the compressor: the next `window` positions after
/// `current`, clamped so the last averaged position stays below max_position.
/// Falls back to the last valid position when nothing is left to average.
AveragedRope future_rope_average(std::int64_t current, std::int64_t window, const RopeTable& table);

/// Dense d x d rotation matrix R_position (tests and diagnostics only).
Tensor rope_matrix(std::int64_t position, const RopeTable& table);

} // namespace kvc
