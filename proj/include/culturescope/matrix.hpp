#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "culturescope/error.hpp"

namespace culturescope {

using Vec = std::vector<double>;

// Dense row-major matrix. All engine math is 64-bit.
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<double> a;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), a(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), 0.0) {}

    double& operator()(int r, int c) { return a[static_cast<std::size_t>(r) * cols + c]; }
    double operator()(int r, int c) const { return a[static_cast<std::size_t>(r) * cols + c]; }

    std::span<const double> row(int r) const {
        return std::span<const double>(a).subspan(static_cast<std::size_t>(r) * cols, cols);
    }
    std::span<double> row(int r) {
        return std::span<double>(a).subspan(static_cast<std::size_t>(r) * cols, cols);
    }
};

inline double dot(std::span<const double> x, std::span<const double> y) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
    return s;
}

// y = x^T M, for a row vector x of length M.rows.
inline Vec vec_mat(std::span<const double> x, const Mat& m) {
    if (static_cast<int>(x.size()) != m.rows)
        throw Error(Error::Kind::shape, "vec_mat: vector length does not match matrix rows");
    Vec y(static_cast<std::size_t>(m.cols), 0.0);
    for (int r = 0; r < m.rows; ++r) {
        double xv = x[static_cast<std::size_t>(r)];
        if (xv == 0.0) continue;
        const double* mr = &m.a[static_cast<std::size_t>(r) * m.cols];
        for (int c = 0; c < m.cols; ++c) y[static_cast<std::size_t>(c)] += xv * mr[c];
    }
    return y;
}

inline void add_inplace(Vec& x, std::span<const double> y) {
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += y[i];
}

inline double norm2(std::span<const double> x) {
    return std::sqrt(dot(x, x));
}

inline bool all_finite(std::span<const double> x) {
    for (double v : x)
        if (!std::isfinite(v)) return false;
    return true;
}

inline double max_abs_diff(std::span<const double> x, std::span<const double> y) {
    double m = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        double d = std::fabs(x[i] - y[i]);
        if (d > m) m = d;
    }
    return m;
}

}  // namespace culturescope
