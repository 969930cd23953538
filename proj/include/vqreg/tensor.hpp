#pragma once

#include <algorithm>
#include <span>
#include <vector>

#include "vqreg/common.hpp"

namespace vqreg {

/// Channel-first dense array: channels × z × y × x, x fastest.
/// Also used as a FeatureMap: position p (raster order) holds the vector
/// (at(0, p), at(1, p), ..., at(C-1, p)).
template <typename T>
class Tensor {
public:
    Tensor() = default;
    Tensor(int64_t channels, Dims dims, T fill = T(0))
        : channels_(channels), dims_(dims), data_(static_cast<size_t>(channels * dims.voxels()), fill)
    {
        if (channels < 1 || !dims.valid()) throw Error("Tensor: invalid shape");
    }

    [[nodiscard]] int64_t channels() const { return channels_; }
    [[nodiscard]] const Dims& dims() const { return dims_; }
    [[nodiscard]] int64_t voxels() const { return dims_.voxels(); }
    [[nodiscard]] int64_t size() const { return static_cast<int64_t>(data_.size()); }
    [[nodiscard]] bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::span<T> span() { return data_; }
    std::span<const T> span() const { return data_; }
    T* channel(int64_t c) { return data_.data() + c * voxels(); }
    const T* channel(int64_t c) const { return data_.data() + c * voxels(); }

    T& at(int64_t c, int64_t p) { return data_[static_cast<size_t>(c * voxels() + p)]; }
    const T& at(int64_t c, int64_t p) const { return data_[static_cast<size_t>(c * voxels() + p)]; }
    T& at(int64_t c, int64_t i, int64_t j, int64_t k) { return at(c, dims_.index(i, j, k)); }
    const T& at(int64_t c, int64_t i, int64_t j, int64_t k) const { return at(c, dims_.index(i, j, k)); }

    T& operator[](int64_t n) { return data_[static_cast<size_t>(n)]; }
    const T& operator[](int64_t n) const { return data_[static_cast<size_t>(n)]; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
    void zero() { fill(T(0)); }

    [[nodiscard]] bool same_shape(const Tensor& o) const { return channels_ == o.channels_ && dims_ == o.dims_; }

    Tensor& operator+=(const Tensor& o)
    {
        if (!same_shape(o)) throw Error("Tensor +=: shape mismatch");
        for (size_t n = 0; n < data_.size(); ++n) data_[n] += o.data_[n];
        return *this;
    }

    template <typename U>
    [[nodiscard]] Tensor<U> cast() const
    {
        Tensor<U> out(channels_, dims_);
        std::transform(data_.begin(), data_.end(), out.data(), [](T v) { return static_cast<U>(v); });
        return out;
    }

private:
    int64_t channels_ = 0;
    Dims dims_{};
    std::vector<T> data_;
};

/// Stacks tensors with equal spatial dims along the channel axis.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b)
{
    if (!(a.dims() == b.dims())) throw Error("concat_channels: dims mismatch");
    Tensor<T> out(a.channels() + b.channels(), a.dims());
    std::copy(a.data(), a.data() + a.size(), out.data());
    std::copy(b.data(), b.data() + b.size(), out.data() + a.size());
    return out;
}

/// Inverse of concat_channels: returns channels [first, first + count).
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& t, int64_t first, int64_t count)
{
    if (first < 0 || count < 1 || first + count > t.channels()) throw Error("slice_channels: out of range");
    Tensor<T> out(count, t.dims());
    std::copy(t.channel(first), t.channel(first) + count * t.voxels(), out.data());
    return out;
}

}  // namespace vqreg
