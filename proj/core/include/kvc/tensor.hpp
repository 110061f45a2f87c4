#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace kvc {

/// Dense row-major float32 array. All extents are >= 1 and the element
/// count always equals the product of the extents.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> dims);
    Tensor(std::vector<std::size_t> dims, std::vector<float> data);

    static Tensor zeros(std::vector<std::size_t> dims) { return Tensor(std::move(dims)); }
    static Tensor from_rows(std::initializer_list<std::initializer_list<float>> rows);
    static Tensor vector(std::vector<float> values);

    const std::vector<std::size_t>& dims() const noexcept { return dims_; }
    std::size_t rank() const noexcept { return dims_.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<float> data() noexcept { return data_; }
    std::span<const float> data() const noexcept { return data_; }

    float& operator[](std::size_t i) noexcept { return data_[i]; }
    float operator[](std::size_t i) const noexcept { return data_[i]; }

    /// Element access for rank-2 tensors.
    float& at(std::size_t r, std::size_t c) { return data_[r * dims_[1] + c]; }
    float at(std::size_t r, std::size_t c) const { return data_[r * dims_[1] + c]; }

    /// Row view of a rank-2 tensor.
    std::span<float> row(std::size_t r);
    std::span<const float> row(std::size_t r) const;

    std::string shape_string() const;

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    std::vector<std::size_t> dims_;
    std::vector<float> data_;
};

/// Standard matrix product. Throws ShapeError when inner extents differ.
Tensor matmul(const Tensor& a, const Tensor& b);

/// y = W x for W stored as [out x in] (the layout of every projection in the
/// weight container). `out` must have W.dim(0) elements.
void matvec(const Tensor& w, std::span<const float> x, std::span<float> out);

/// Row-wise numerically stable softmax of a rank-2 tensor.
Tensor softmax_rows(const Tensor& x);

/// In-place stable softmax over a single row.
void softmax_inplace(std::span<float> row);

float dot(std::span<const float> a, std::span<const float> b);
float l2_norm(std::span<const float> x);

/// RMSNorm: out_i = x_i / sqrt(mean(x^2) + eps) * weight_i.
void rms_norm(std::span<const float> x, std::span<const float> weight, float eps, std::span<float> out);

float max_abs_diff(std::span<const float> a, std::span<const float> b);

} // namespace kvc
