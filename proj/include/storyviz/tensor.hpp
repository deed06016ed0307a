#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <vector>

#include "storyviz/rng.hpp"

namespace storyviz {

// Dense row-major tensor. Rank is implied by use: most of the engine works
// on 2-D (rows x cols); feature maps are stored (channels, height*width).
template <typename T>
struct Tensor {
    int rows = 0;
    int cols = 0;
    std::vector<T> data;

    Tensor() = default;
    Tensor(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, T(0)) {}

    static Tensor zeros(int r, int c) { return Tensor(r, c); }

    static Tensor full(int r, int c, T v) {
        Tensor t(r, c);
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    static Tensor randn(int r, int c, Rng& rng, T stddev = T(1)) {
        Tensor t(r, c);
        for (auto& v : t.data) v = static_cast<T>(rng.normal()) * stddev;
        return t;
    }

    int64_t numel() const { return static_cast<int64_t>(rows) * cols; }

    T& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    const T& at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

    T* row_ptr(int r) { return data.data() + static_cast<size_t>(r) * cols; }
    const T* row_ptr(int r) const { return data.data() + static_cast<size_t>(r) * cols; }

    bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }

    bool all_finite() const {
        for (const T& v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(rows, cols);
        for (int64_t i = 0; i < numel(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace storyviz
