#pragma once

#include "ssum/common.hpp"
#include "ssum/linalg.hpp"

namespace ssum {

// Low-rank additive adaptation of a frozen square weight:
// effective W = base + (alpha / rank) * B * A. With B = 0 the adapter is
// the identity perturbation.
struct LoraAdapter {
    Mat A;  // rank x d
    Mat B;  // d x rank
    double alpha = 32.0;
    int rank = 16;

    double scale() const { return alpha / static_cast<double>(rank); }

    void validate() const {
        if (rank < 1) throw ShapeError("lora rank must be positive");
        if (A.rows != static_cast<std::size_t>(rank) || B.cols != static_cast<std::size_t>(rank) ||
            A.cols != B.rows)
            throw ShapeError("lora adapter shapes inconsistent");
    }
};

// base*x + (alpha/rank) * B * (A * x), without materializing the delta.
inline Vec lora_apply(const Mat& base, const LoraAdapter& adapter, std::span<const double> x) {
    adapter.validate();
    if (base.rows != base.cols || base.cols != x.size() || adapter.A.cols != base.cols ||
        adapter.B.rows != base.rows)
        throw ShapeError("lora_apply: dimension mismatch");
    Vec y = matvec(base, x);
    Vec ax = matvec(adapter.A, x);
    const double s = adapter.scale();
    for (std::size_t i = 0; i < base.rows; ++i) {
        const double* br = adapter.B.row(i);
        double acc = 0.0;
        for (std::size_t j = 0; j < ax.size(); ++j) acc += br[j] * ax[j];
        y[i] += s * acc;
    }
    return y;
}

// Materialized effective weight, used by the forward/backward passes where
// the dense product is reused across positions.
inline Mat lora_effective(const Mat& base, const LoraAdapter& adapter) {
    adapter.validate();
    if (base.rows != adapter.B.rows || base.cols != adapter.A.cols)
        throw ShapeError("lora_effective: dimension mismatch");
    Mat w = base;
    const double s = adapter.scale();
    const std::size_t r = adapter.A.rows;
    for (std::size_t i = 0; i < w.rows; ++i) {
        const double* brow = adapter.B.row(i);
        double* wrow = w.row(i);
        for (std::size_t k = 0; k < r; ++k) {
            const double b = s * brow[k];
            if (b == 0.0) continue;
            const double* arow = adapter.A.row(k);
            for (std::size_t j = 0; j < w.cols; ++j) wrow[j] += b * arow[j];
        }
    }
    return w;
}

}  // namespace ssum
