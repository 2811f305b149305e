#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

namespace mpem {

// Dense row-major matrix of doubles. All model state and activations use
// this one type; vectors are 1-by-n or n-by-1 as convenient.
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<double> a;

    Mat() = default;
    Mat(int r, int c, double fill = 0.0) : rows(r), cols(c), a(static_cast<size_t>(r) * c, fill) {}

    double& at(int r, int c) { return a[static_cast<size_t>(r) * cols + c]; }
    double at(int r, int c) const { return a[static_cast<size_t>(r) * cols + c]; }

    double* row(int r) { return a.data() + static_cast<size_t>(r) * cols; }
    const double* row(int r) const { return a.data() + static_cast<size_t>(r) * cols; }

    size_t size() const { return a.size(); }

    void fill(double v) { std::fill(a.begin(), a.end(), v); }

    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
};

// out[m x n] += x[m x k] * w[k x n]
inline void matmul_acc(const Mat& x, const Mat& w, Mat& out) {
    assert(x.cols == w.rows && out.rows == x.rows && out.cols == w.cols);
    for (int i = 0; i < x.rows; ++i) {
        const double* xi = x.row(i);
        double* oi = out.row(i);
        for (int k = 0; k < x.cols; ++k) {
            double v = xi[k];
            if (v == 0.0) continue;
            const double* wk = w.row(k);
            for (int j = 0; j < w.cols; ++j) oi[j] += v * wk[j];
        }
    }
}

// out[m x n] += x[m x k] * w[n x k]^T
inline void matmul_bt_acc(const Mat& x, const Mat& w, Mat& out) {
    assert(x.cols == w.cols && out.rows == x.rows && out.cols == w.rows);
    for (int i = 0; i < x.rows; ++i) {
        const double* xi = x.row(i);
        double* oi = out.row(i);
        for (int j = 0; j < w.rows; ++j) {
            const double* wj = w.row(j);
            double s = 0.0;
            for (int k = 0; k < x.cols; ++k) s += xi[k] * wj[k];
            oi[j] += s;
        }
    }
}

// out[k x n] += x[m x k]^T * y[m x n]
inline void matmul_at_acc(const Mat& x, const Mat& y, Mat& out) {
    assert(x.rows == y.rows && out.rows == x.cols && out.cols == y.cols);
    for (int i = 0; i < x.rows; ++i) {
        const double* xi = x.row(i);
        const double* yi = y.row(i);
        for (int k = 0; k < x.cols; ++k) {
            double v = xi[k];
            if (v == 0.0) continue;
            double* ok = out.row(k);
            for (int j = 0; j < y.cols; ++j) ok[j] += v * yi[j];
        }
    }
}

inline bool all_finite(const Mat& m) {
    for (double v : m.a)
        if (!std::isfinite(v)) return false;
    return true;
}

}  // namespace mpem
