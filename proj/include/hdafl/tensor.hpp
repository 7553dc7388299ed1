#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "hdafl/common.hpp"
#include "hdafl/rng.hpp"

namespace hdafl {

/// Dense row-major tensor of doubles. Rank 1..3 in practice; shape is dynamic.
class tensor {
public:
    tensor() = default;

    explicit tensor(std::vector<std::size_t> shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(checked_count(shape_), fill) {}

    static tensor from(std::vector<std::size_t> shape, std::vector<double> data) {
        tensor t;
        if (count(shape) != data.size())
            throw validation_error("tensor::from: data size does not match shape");
        t.shape_ = std::move(shape);
        t.data_ = std::move(data);
        return t;
    }

    static tensor row(std::initializer_list<double> values) {
        return from({1, values.size()}, std::vector<double>(values));
    }

    static tensor filled_like(const tensor& other, double fill) {
        return tensor(other.shape_, fill);
    }

    static tensor random_uniform(std::vector<std::size_t> shape, double lo, double hi, rng& r) {
        tensor t(std::move(shape));
        for (auto& v : t.data_) v = r.uniform(lo, hi);
        return t;
    }

    static tensor random_normal(std::vector<std::size_t> shape, double stddev, rng& r) {
        tensor t(std::move(shape));
        for (auto& v : t.data_) v = stddev * r.normal();
        return t;
    }

    static tensor identity(std::size_t n) {
        tensor t({n, n});
        for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
        return t;
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }

    std::size_t rows() const { return require_rank2(), shape_[0]; }
    std::size_t cols() const { return require_rank2(), shape_[1]; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

    double& operator()(std::size_t i, std::size_t j, std::size_t k) {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    double operator()(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& storage() { return data_; }
    const std::vector<double>& storage() const { return data_; }

    /// Same storage reinterpreted under a new shape (row-major layout is shared).
    tensor reshaped(std::vector<std::size_t> new_shape) const {
        if (count(new_shape) != data_.size())
            throw validation_error("tensor::reshaped: element count mismatch");
        tensor t;
        t.shape_ = std::move(new_shape);
        t.data_ = data_;
        return t;
    }

    bool same_shape(const tensor& other) const { return shape_ == other.shape_; }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    std::string shape_str() const {
        std::string s = "(";
        for (std::size_t i = 0; i < shape_.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape_[i]);
        }
        return s + ")";
    }

private:
    static std::size_t count(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (std::size_t d : shape) n *= d;
        return shape.empty() ? 0 : n;
    }

    static std::size_t checked_count(const std::vector<std::size_t>& shape) {
        if (shape.empty()) throw validation_error("tensor: shape must have at least one dimension");
        for (std::size_t d : shape)
            if (d == 0) throw validation_error("tensor: zero-sized dimension");
        return count(shape);
    }

    void require_rank2() const {
        if (shape_.size() != 2) throw validation_error("tensor: rank-2 required, got " + shape_str());
    }

    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

inline tensor matmul(const tensor& a, const tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
        throw validation_error("matmul: shape mismatch " + a.shape_str() + " x " + b.shape_str());
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    tensor c({n, m});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = a(i, p);
            if (aip == 0.0) continue;
            for (std::size_t j = 0; j < m; ++j) c(i, j) += aip * b(p, j);
        }
    }
    return c;
}

inline tensor transposed(const tensor& a) {
    if (a.rank() != 2) throw validation_error("transposed: rank-2 required");
    tensor t({a.cols(), a.rows()});
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

inline double dot(const tensor& a, const tensor& b) {
    if (a.size() != b.size()) throw validation_error("dot: size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm(const tensor& a) { return std::sqrt(dot(a, a)); }

/// cos(a, b) over flat storage with the denominator floored for zero vectors.
inline double cosine(const tensor& a, const tensor& b, double floor_val = 1e-12) {
    const double na = std::max(norm(a), floor_val);
    const double nb = std::max(norm(b), floor_val);
    return dot(a, b) / (na * nb);
}

}  // namespace hdafl
