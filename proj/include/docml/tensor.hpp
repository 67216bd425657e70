#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

namespace docml {

// Minimal row-major matrix. Vectors are 1 x n tensors.
template <class S>
struct Tensor {
    std::vector<S> data;
    int rows = 0, cols = 0;

    Tensor() = default;
    Tensor(int r, int c) : data(std::size_t(r) * std::size_t(c), S(0)), rows(r), cols(c) {}

    S* row(int r) { return data.data() + std::size_t(r) * cols; }
    const S* row(int r) const { return data.data() + std::size_t(r) * cols; }
    S& at(int r, int c) { return data[std::size_t(r) * cols + c]; }
    S at(int r, int c) const { return data[std::size_t(r) * cols + c]; }

    std::size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }
    void zero() { std::fill(data.begin(), data.end(), S(0)); }

    bool finite() const {
        for (S v : data)
            if (!std::isfinite(double(v)))
                return false;
        return true;
    }
    bool operator==(const Tensor&) const = default;
};

// y[n x o] = x[n x i] * w[i x o] (+ y when accumulate)
template <class S>
void matmul(const Tensor<S>& x, const Tensor<S>& w, Tensor<S>& y, bool accumulate = false) {
    if (!accumulate)
        y.zero();
    for (int n = 0; n < x.rows; ++n) {
        const S* xr = x.row(n);
        S* yr = y.row(n);
        for (int i = 0; i < x.cols; ++i) {
            const S xv = xr[i];
            if (xv == S(0))
                continue;
            const S* wr = w.row(i);
            for (int o = 0; o < w.cols; ++o)
                yr[o] += xv * wr[o];
        }
    }
}

// y[n x m] = x[n x i] * w[m x i]^T
template <class S>
void matmul_bt(const Tensor<S>& x, const Tensor<S>& w, Tensor<S>& y, bool accumulate = false) {
    if (!accumulate)
        y.zero();
    for (int n = 0; n < x.rows; ++n) {
        const S* xr = x.row(n);
        S* yr = y.row(n);
        for (int m = 0; m < w.rows; ++m) {
            const S* wr = w.row(m);
            S acc = S(0);
            for (int i = 0; i < x.cols; ++i)
                acc += xr[i] * wr[i];
            yr[m] += acc;
        }
    }
}

// dw[i x o] += x[n x i]^T * dy[n x o]
template <class S>
void matmul_at_acc(const Tensor<S>& x, const Tensor<S>& dy, Tensor<S>& dw) {
    for (int n = 0; n < x.rows; ++n) {
        const S* xr = x.row(n);
        const S* dyr = dy.row(n);
        for (int i = 0; i < x.cols; ++i) {
            const S xv = xr[i];
            if (xv == S(0))
                continue;
            S* dwr = dw.row(i);
            for (int o = 0; o < dy.cols; ++o)
                dwr[o] += xv * dyr[o];
        }
    }
}

// db[1 x o] += column sums of dy[n x o]
template <class S>
void rowsum_acc(const Tensor<S>& dy, Tensor<S>& db) {
    for (int n = 0; n < dy.rows; ++n) {
        const S* dyr = dy.row(n);
        for (int o = 0; o < dy.cols; ++o)
            db.data[o] += dyr[o];
    }
}

template <class S>
void add_inplace(Tensor<S>& x, const Tensor<S>& d) {
    for (std::size_t i = 0; i < x.size(); ++i)
        x.data[i] += d.data[i];
}

template <class S>
void scale_inplace(Tensor<S>& x, S s) {
    for (auto& v : x.data)
        v *= s;
}

} // namespace docml
