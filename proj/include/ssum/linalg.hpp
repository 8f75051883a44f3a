#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "ssum/common.hpp"
#include "ssum/rng.hpp"

namespace ssum {

// Dense row-major matrix of doubles. Everything in this project is small
// enough that plain loops over contiguous storage are the right tool.
struct Mat {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> a;

    Mat() = default;
    Mat(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), a(r * c, fill) {}

    double& operator()(std::size_t i, std::size_t j) { return a[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return a[i * cols + j]; }

    double* row(std::size_t i) { return a.data() + i * cols; }
    const double* row(std::size_t i) const { return a.data() + i * cols; }

    std::span<double> row_span(std::size_t i) { return {row(i), cols}; }
    std::span<const double> row_span(std::size_t i) const { return {row(i), cols}; }

    bool empty() const { return a.empty(); }
    std::size_t size() const { return a.size(); }

    void fill(double v) { std::fill(a.begin(), a.end(), v); }

    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }

    static Mat identity(std::size_t n) {
        Mat m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    static Mat gaussian(std::size_t r, std::size_t c, double sigma, Rng& rng) {
        Mat m(r, c);
        for (double& v : m.a) v = sigma * rng.normal();
        return m;
    }
};

using Vec = std::vector<double>;

// y = M x
inline void matvec(const Mat& m, std::span<const double> x, std::span<double> y) {
    if (x.size() != m.cols || y.size() != m.rows) throw ShapeError("matvec: dimension mismatch");
    for (std::size_t i = 0; i < m.rows; ++i) {
        const double* r = m.row(i);
        double s = 0.0;
        for (std::size_t j = 0; j < m.cols; ++j) s += r[j] * x[j];
        y[i] = s;
    }
}

inline Vec matvec(const Mat& m, std::span<const double> x) {
    Vec y(m.rows);
    matvec(m, x, y);
    return y;
}

// y += M^T x
inline void tmatvec_acc(const Mat& m, std::span<const double> x, std::span<double> y) {
    if (x.size() != m.rows || y.size() != m.cols) throw ShapeError("tmatvec: dimension mismatch");
    for (std::size_t i = 0; i < m.rows; ++i) {
        const double xi = x[i];
        if (xi == 0.0) continue;
        const double* r = m.row(i);
        for (std::size_t j = 0; j < m.cols; ++j) y[j] += xi * r[j];
    }
}

// M += u v^T
inline void outer_acc(Mat& m, std::span<const double> u, std::span<const double> v) {
    if (u.size() != m.rows || v.size() != m.cols) throw ShapeError("outer_acc: dimension mismatch");
    for (std::size_t i = 0; i < m.rows; ++i) {
        const double ui = u[i];
        if (ui == 0.0) continue;
        double* r = m.row(i);
        for (std::size_t j = 0; j < m.cols; ++j) r[j] += ui * v[j];
    }
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline double logsumexp(std::span<const double> x) {
    double m = x[0];
    for (double v : x) m = std::max(m, v);
    double s = 0.0;
    for (double v : x) s += std::exp(v - m);
    return m + std::log(s);
}

inline void softmax_inplace(std::span<double> x) {
    double m = x[0];
    for (double v : x) m = std::max(m, v);
    double s = 0.0;
    for (double& v : x) {
        v = std::exp(v - m);
        s += v;
    }
    for (double& v : x) v /= s;
}

inline Vec softmax(std::span<const double> x) {
    Vec y(x.begin(), x.end());
    softmax_inplace(y);
    return y;
}

inline Vec log_softmax(std::span<const double> x) {
    const double lse = logsumexp(x);
    Vec y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] - lse;
    return y;
}

inline bool all_finite(std::span<const double> x) {
    for (double v : x)
        if (!std::isfinite(v)) return false;
    return true;
}

}  // namespace ssum
