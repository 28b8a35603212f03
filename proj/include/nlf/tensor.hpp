// Dense row-major tensor of doubles. Most of the engine works with 2D
// (rows x cols) tensors; grids and conv feature maps use higher ranks.
#pragma once

#include <numeric>
#include <initializer_list>

#include "nlf/common.hpp"

namespace nlf {

class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(checked_size(shape_), fill) {}

    static Tensor zeros(int rows, int cols) { return Tensor({rows, cols}); }

    static Tensor full(std::vector<int> shape, double v) { return Tensor(std::move(shape), v); }

    static Tensor scalar(double v) {
        Tensor t({1, 1});
        t.data_[0] = v;
        return t;
    }

    // Validating constructor: the public entry point for external values.
    static Tensor from_values(std::vector<int> shape, std::vector<double> values) {
        Tensor t;
        t.shape_ = std::move(shape);
        if (checked_size(t.shape_) != values.size())
            throw ValidationError("tensor: shape does not match value count");
        for (double v : values)
            if (!is_finite(v)) throw ValidationError("tensor: non-finite value rejected");
        t.data_ = std::move(values);
        return t;
    }

    static Tensor row(std::initializer_list<double> v) {
        return from_values({1, int(v.size())}, std::vector<double>(v));
    }

    static Tensor random_normal(std::vector<int> shape, Rng& rng, double mean = 0.0, double stddev = 1.0) {
        Tensor t(std::move(shape));
        for (double& x : t.data_) x = rng.normal(mean, stddev);
        return t;
    }

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return int(shape_.size()); }
    size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    int rows() const { return rank() >= 1 ? shape_[0] : 0; }
    int cols() const {
        if (rank() == 1) return 1;
        return rank() >= 2 ? shape_[1] : 0;
    }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](size_t i) { return data_[i]; }
    double operator[](size_t i) const { return data_[i]; }

    double& at(int r, int c) { return data_[size_t(r) * cols() + c]; }
    double at(int r, int c) const { return data_[size_t(r) * cols() + c]; }

    double value() const {
        if (size() != 1) throw ValidationError("tensor: value() requires a 1-element tensor");
        return data_[0];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (double v : data_)
            if (!is_finite(v)) return false;
        return true;
    }

    Tensor reshaped(std::vector<int> shape) const {
        if (checked_size(shape) != size()) throw ValidationError("tensor: reshape size mismatch");
        Tensor t = *this;
        t.shape_ = std::move(shape);
        return t;
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    double sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

    double squared_norm() const {
        double s = 0.0;
        for (double v : data_) s += v * v;
        return s;
    }
    double norm() const { return std::sqrt(squared_norm()); }

    double max_abs() const {
        double m = 0.0;
        for (double v : data_) m = std::max(m, std::fabs(v));
        return m;
    }

private:
    static size_t checked_size(const std::vector<int>& shape) {
        if (shape.empty()) throw ValidationError("tensor: empty shape");
        size_t n = 1;
        for (int d : shape) {
            if (d <= 0) throw ValidationError("tensor: non-positive dimension");
            n *= size_t(d);
        }
        return n;
    }

    std::vector<int> shape_;
    std::vector<double> data_;
};

// C += or = A * B with optional transposes, row-major ikj kernel.
inline void matmul_into(const Tensor& a, bool ta, const Tensor& b, bool tb, Tensor& out,
                        bool accumulate) {
    const int m = ta ? a.cols() : a.rows();
    const int k = ta ? a.rows() : a.cols();
    const int kb = tb ? b.cols() : b.rows();
    const int n = tb ? b.rows() : b.cols();
    if (k != kb) throw ValidationError("matmul: inner dimensions disagree");
    if (out.rows() != m || out.cols() != n) {
        if (accumulate) throw ValidationError("matmul: output shape mismatch");
        out = Tensor::zeros(m, n);
    } else if (!accumulate) {
        out.fill(0.0);
    }
    const double* A = a.data();
    const double* B = b.data();
    double* C = out.data();
    const int lda = a.cols(), ldb = b.cols();
    parallel_for(m, [&](int64_t r0, int64_t r1) {
        for (int64_t i = r0; i < r1; ++i) {
            double* crow = C + i * n;
            for (int p = 0; p < k; ++p) {
                const double av = ta ? A[size_t(p) * lda + i] : A[size_t(i) * lda + p];
                if (av == 0.0) continue;
                const double* brow = tb ? nullptr : B + size_t(p) * ldb;
                if (!tb) {
                    for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
                } else {
                    for (int j = 0; j < n; ++j) crow[j] += av * B[size_t(j) * ldb + p];
                }
            }
        }
    });
}

inline Tensor matmul(const Tensor& a, const Tensor& b, bool ta = false, bool tb = false) {
    Tensor out;
    matmul_into(a, ta, b, tb, out, false);
    return out;
}

}  // namespace nlf
