#include "kvc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include "kvc/errors.hpp"

namespace kvc {

namespace {

std::size_t checked_product(const std::vector<std::size_t>& dims) {
    if (dims.empty()) {
        throw ShapeError("tensor must have at least one axis");
    }
    std::size_t n = 1;
    for (std::size_t d : dims) {
        if (d == 0) {
            throw ShapeError("tensor extents must be >= 1");
        }
        n *= d;
    }
    return n;
}

} // namespace

Tensor::Tensor(std::vector<std::size_t> dims) : dims_(std::move(dims)) {
    data_.assign(checked_product(dims_), 0.0f);
}

Tensor::Tensor(std::vector<std::size_t> dims, std::vector<float> data)
    : dims_(std::move(dims)), data_(std::move(data)) {
    if (checked_product(dims_) != data_.size()) {
        throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                         " does not match extents " + shape_string());
    }
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<float>> rows) {
    const std::size_t m = rows.size();
    const std::size_t n = m == 0 ? 0 : rows.begin()->size();
    std::vector<float> data;
    data.reserve(m * n);
    for (const auto& r : rows) {
        if (r.size() != n) {
            throw ShapeError("ragged rows");
        }
        data.insert(data.end(), r.begin(), r.end());
    }
    return Tensor({m, n}, std::move(data));
}

Tensor Tensor::vector(std::vector<float> values) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values));
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= dims_.size()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_string());
    }
    return dims_[axis];
}

std::span<float> Tensor::row(std::size_t r) {
    const std::size_t n = dims_.back();
    return std::span<float>(data_).subspan(r * n, n);
}

std::span<const float> Tensor::row(std::size_t r) const {
    const std::size_t n = dims_.back();
    return std::span<const float>(data_).subspan(r * n, n);
}

std::string Tensor::shape_string() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < dims_.size(); ++i) {
        os << (i ? "x" : "") << dims_[i];
    }
    os << ']';
    return os.str();
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw ShapeError("matmul expects rank-2 operands, got " + a.shape_string() + " and " + b.shape_string());
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw ShapeError("matmul inner extents differ: " + a.shape_string() + " x " + b.shape_string());
    }
    Tensor c({m, n});
    // i-p-j order keeps the inner loop contiguous in both b and c.
    for (std::size_t i = 0; i < m; ++i) {
        float* crow = c.data().data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const float aip = a.at(i, p);
            const float* brow = b.data().data() + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                crow[j] += aip * brow[j];
            }
        }
    }
    return c;
}

namespace {

/// Dot product with eight independent accumulators so the loop vectorizes
/// without reassociation flags; the summation order is fixed.
float lane_dot(const float* a, const float* b, std::size_t n) {
    constexpr std::size_t kLanes = 8;
    float acc[kLanes] = {};
    std::size_t i = 0;
    for (; i + kLanes <= n; i += kLanes) {
        for (std::size_t j = 0; j < kLanes; ++j) {
            acc[j] += a[i + j] * b[i + j];
        }
    }
    float tail = 0.0f;
    for (; i < n; ++i) {
        tail += a[i] * b[i];
    }
    return ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail;
}

} // namespace

void matvec(const Tensor& w, std::span<const float> x, std::span<float> out) {
    const std::size_t rows = w.dim(0), cols = w.dim(1);
    if (x.size() != cols || out.size() != rows) {
        throw ShapeError("matvec: weight " + w.shape_string() + " against input of " + std::to_string(x.size()));
    }
    const float* wd = w.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        out[r] = lane_dot(wd + r * cols, x.data(), cols);
    }
}

void softmax_inplace(std::span<float> row) {
    if (row.empty()) {
        return;
    }
    const float mx = *std::max_element(row.begin(), row.end());
    if (mx == -INFINITY) {
        // Fully masked row: nothing to attend to.
        std::fill(row.begin(), row.end(), 0.0f);
        return;
    }
    float sum = 0.0f;
    for (float& v : row) {
        v = std::exp(v - mx);
        sum += v;
    }
    const float inv = 1.0f / sum;
    for (float& v : row) {
        v *= inv;
    }
}

Tensor softmax_rows(const Tensor& x) {
    if (x.rank() != 2) {
        throw ShapeError("softmax_rows expects a rank-2 tensor, got " + x.shape_string());
    }
    Tensor out = x;
    for (std::size_t r = 0; r < x.dim(0); ++r) {
        softmax_inplace(out.row(r));
    }
    return out;
}

float dot(std::span<const float> a, std::span<const float> b) {
    return lane_dot(a.data(), b.data(), a.size());
}

float l2_norm(std::span<const float> x) {
    double acc = 0.0;
    for (float v : x) {
        acc += static_cast<double>(v) * v;
    }
    return static_cast<float>(std::sqrt(acc));
}

void rms_norm(std::span<const float> x, std::span<const float> weight, float eps, std::span<float> out) {
    float ss = 0.0f;
    for (float v : x) {
        ss += v * v;
    }
    const float scale = 1.0f / std::sqrt(ss / static_cast<float>(x.size()) + eps);
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = x[i] * scale * weight[i];
    }
}

float max_abs_diff(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size()) {
        throw ShapeError("max_abs_diff: length mismatch");
    }
    float m = 0.0f;
    for (std::size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(a[i] - b[i]));
    }
    return m;
}

} // namespace kvc
