#pragma once

// OpenMP-parallel compute kernels. Work is partitioned over independent outputs, or
// over a fixed number of partial sums reduced in a fixed order, so results are
// bitwise identical for any thread count. Serial reference versions live in reference.hpp.

#include <span>

#include "vqreg/common.hpp"

namespace vqreg::kernels {

struct ConvShape {
    int64_t in_channels = 1;
    int64_t out_channels = 1;
    int kernel = 3;  // 1 or 3, zero padding kernel / 2
    int stride = 1;  // 1 or 2
    Dims in_dims{};

    [[nodiscard]] int padding() const { return kernel / 2; }
    [[nodiscard]] Dims out_dims() const;
    [[nodiscard]] int64_t taps() const { return int64_t(kernel) * kernel * kernel; }
    [[nodiscard]] int64_t weight_count() const { return out_channels * in_channels * taps(); }
    void validate() const;
};

/// out[co] = bias[co] + Σ_ci,tap w[co][ci][tap] · in[ci] (shifted by tap, stride applied).
/// Weights are laid out [co][ci][kz][ky][kx].
template <typename T>
void conv3d_forward(const ConvShape& s, const T* in, const T* weight, const T* bias, T* out);

/// Accumulates (+=) into grad_weight / grad_bias; writes (=) grad_in when non-null.
template <typename T>
void conv3d_backward(const ConvShape& s, const T* in, const T* weight, const T* grad_out, T* grad_in,
                     T* grad_weight, T* grad_bias);

/// Per-channel normalization over the spatial extent. Stores mean and inverse std per channel.
template <typename T>
void instance_norm_forward(int64_t channels, int64_t voxels, const T* in, const T* gamma, const T* beta, T eps,
                           T* out, T* mean, T* inv_std);

template <typename T>
void instance_norm_backward(int64_t channels, int64_t voxels, const T* in, const T* gamma, const T* mean,
                            const T* inv_std, const T* grad_out, T* grad_in, T* grad_gamma, T* grad_beta);

template <typename T>
void relu_forward(std::span<const T> in, std::span<T> out);

/// grad_in = grad_out where out > 0.
template <typename T>
void relu_backward(std::span<const T> out, std::span<const T> grad_out, std::span<T> grad_in);

/// Nearest-neighbour 2× upsampling: out dims are exactly twice in_dims.
template <typename T>
void upsample_nearest_forward(int64_t channels, Dims in_dims, const T* in, T* out);
template <typename T>
void upsample_nearest_backward(int64_t channels, Dims in_dims, const T* grad_out, T* grad_in);

/// Trilinear 2× upsampling with half-pixel centres and clamped borders.
template <typename T>
void upsample_trilinear_forward(int64_t channels, Dims in_dims, const T* in, T* out);
template <typename T>
void upsample_trilinear_backward(int64_t channels, Dims in_dims, const T* grad_out, T* grad_in);

/// out[c](p) = trilinear sample of src[c] at p + ddf(p), coordinates clamped to the grid.
/// ddf holds 3 channels (x, y, z displacement in voxels).
template <typename T>
void resample_forward(int64_t channels, Dims dims, const T* src, const T* ddf, T* out);

/// Accumulates (+=) into grad_src and grad_ddf when non-null.
template <typename T>
void resample_backward(int64_t channels, Dims dims, const T* src, const T* ddf, const T* grad_out, T* grad_src,
                       T* grad_ddf);

}  // namespace vqreg::kernels
