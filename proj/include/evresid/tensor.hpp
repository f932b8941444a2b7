#pragma once

#include <array>
#include <cassert>
#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

#include "evresid/rng.hpp"

namespace evresid {

// Dense shape, up to 4 dimensions.
class Shape {
public:
    Shape() = default;
    Shape(std::initializer_list<int64_t> dims) {
        rank_ = 0;
        for (int64_t d : dims) dims_[rank_++] = d;
    }

    int rank() const { return rank_; }
    int64_t operator[](int i) const { return dims_[i]; }
    int64_t& operator[](int i) { return dims_[i]; }

    int64_t numel() const {
        int64_t n = 1;
        for (int i = 0; i < rank_; ++i) n *= dims_[i];
        return n;
    }

    bool operator==(const Shape& o) const {
        if (rank_ != o.rank_) return false;
        for (int i = 0; i < rank_; ++i)
            if (dims_[i] != o.dims_[i]) return false;
        return true;
    }
    bool operator!=(const Shape& o) const { return !(*this == o); }

    std::string str() const {
        std::string s = "(";
        for (int i = 0; i < rank_; ++i) {
            if (i) s += ",";
            s += std::to_string(dims_[i]);
        }
        return s + ")";
    }

private:
    std::array<int64_t, 4> dims_{1, 1, 1, 1};
    int rank_ = 0;
};

template <typename T>
class TensorT {
public:
    TensorT() = default;
    explicit TensorT(Shape shape, T fill = T(0))
        : shape_(shape), data_(size_t(shape.numel()), fill) {}
    TensorT(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
        if (int64_t(data_.size()) != shape_.numel())
            throw std::runtime_error("tensor data size does not match shape " + shape_.str());
    }

    const Shape& shape() const { return shape_; }
    int64_t numel() const { return int64_t(data_.size()); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }

    T& operator[](int64_t i) { return data_[size_t(i)]; }
    T operator[](int64_t i) const { return data_[size_t(i)]; }

    // (c, h, w) indexing for rank-3 tensors
    T& at3(int64_t c, int64_t y, int64_t x) {
        return data_[size_t((c * shape_[1] + y) * shape_[2] + x)];
    }
    T at3(int64_t c, int64_t y, int64_t x) const {
        return data_[size_t((c * shape_[1] + y) * shape_[2] + x)];
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    template <typename U>
    TensorT<U> cast() const {
        TensorT<U> out(shape_);
        for (size_t i = 0; i < data_.size(); ++i) out.data()[i] = U(data_[i]);
        return out;
    }

    static TensorT randn(Shape shape, Rng& rng, T scale = T(1)) {
        TensorT t(shape);
        for (auto& v : t.data_) v = T(rng.normal()) * scale;
        return t;
    }

private:
    Shape shape_;
    std::vector<T> data_;
};

using Tensor = TensorT<double>;
using TensorF = TensorT<float>;

} // namespace evresid
