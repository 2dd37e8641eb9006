// Dense row-major tensors of 64-bit floats, rank 0..2.
// Everything runs in double: at desk scale speed is irrelevant and the
// finite-difference gradient checks need the precision.

#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace clozelab {

struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// malformed or inconsistent external input (files, configs)
struct data_error : error {
    using error::error;
};

// numerical divergence (NaN loss and similar aborts)
struct numeric_error : error {
    using error::error;
};

struct TensorValue {
    std::vector<int> shape;
    std::vector<double> data;

    TensorValue() = default;
    TensorValue(std::vector<int> s, std::vector<double> d)
        : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<std::size_t>(count(shape)) != data.size())
            throw error("tensor shape/data mismatch: " + shape_str(shape) +
                        " vs " + std::to_string(data.size()) + " values");
    }

    static long long count(const std::vector<int>& s) {
        long long n = 1;
        for (int d : s) {
            if (d <= 0) throw error("non-positive dimension in " + shape_str(s));
            n *= d;
        }
        return n;
    }

    static TensorValue zeros(std::vector<int> s) {
        auto n = count(s);
        return TensorValue(std::move(s), std::vector<double>(static_cast<std::size_t>(n), 0.0));
    }

    static TensorValue scalar(double v) { return TensorValue({}, {v}); }

    static TensorValue vec(std::vector<double> d) {
        int n = static_cast<int>(d.size());
        return TensorValue({n}, std::move(d));
    }

    static TensorValue matrix(int r, int c, std::vector<double> d) {
        return TensorValue({r, c}, std::move(d));
    }

    static TensorValue identity(int n) {
        TensorValue t = zeros({n, n});
        for (int i = 0; i < n; ++i) t.data[static_cast<std::size_t>(i) * n + i] = 1.0;
        return t;
    }

    int rank() const { return static_cast<int>(shape.size()); }
    std::size_t size() const { return data.size(); }

    int rows() const { return shape.at(0); }
    int cols() const { return shape.at(1); }
    int dim() const { return rank() == 0 ? 1 : shape.at(0); } // 1-D length

    double& at(std::size_t i) { return data[i]; }
    double at(std::size_t i) const { return data[i]; }
    double& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols() + c]; }
    double at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols() + c]; }

    double item() const {
        if (data.size() != 1) throw error("item() on non-scalar tensor " + shape_str(shape));
        return data[0];
    }

    bool same_shape(const TensorValue& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    static std::string shape_str(const std::vector<int>& s) {
        std::ostringstream os;
        os << '(';
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i) os << 'x';
            os << s[i];
        }
        os << ')';
        return os.str();
    }
    std::string shape_str() const { return shape_str(shape); }
};

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double l2_norm(const std::vector<double>& a) {
    return std::sqrt(dot(a, a));
}

inline double cosine(const TensorValue& a, const TensorValue& b) {
    double na = l2_norm(a.data), nb = l2_norm(b.data);
    if (na < 1e-300 || nb < 1e-300) return 0.0; // zero vector: angle undefined
    return dot(a.data, b.data) / (na * nb);
}

} // namespace clozelab
