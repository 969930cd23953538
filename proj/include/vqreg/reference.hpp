#pragma once

// Serial, loop-literal versions of the kernels in kernels.hpp. They are slow and kept
// for unit tests and the kernel benchmark only.

#include <cmath>
#include <vector>

#include "vqreg/kernels.hpp"

namespace vqreg::reference {

template <typename T>
void conv3d_forward(const kernels::ConvShape& s, const T* in, const T* weight, const T* bias, T* out)
{
    const Dims id = s.in_dims, od = s.out_dims();
    const int k = s.kernel, pad = s.padding();
    for (int64_t co = 0; co < s.out_channels; ++co)
        for (int64_t oz = 0; oz < od.z; ++oz)
            for (int64_t oy = 0; oy < od.y; ++oy)
                for (int64_t ox = 0; ox < od.x; ++ox) {
                    T acc = bias != nullptr ? bias[co] : T(0);
                    for (int64_t ci = 0; ci < s.in_channels; ++ci)
                        for (int kz = 0; kz < k; ++kz)
                            for (int ky = 0; ky < k; ++ky)
                                for (int kx = 0; kx < k; ++kx) {
                                    const int64_t ix = ox * s.stride + kx - pad;
                                    const int64_t iy = oy * s.stride + ky - pad;
                                    const int64_t iz = oz * s.stride + kz - pad;
                                    if (ix < 0 || iy < 0 || iz < 0 || ix >= id.x || iy >= id.y || iz >= id.z) continue;
                                    acc += weight[((co * s.in_channels + ci) * k + kz) * k * k + ky * k + kx] *
                                           in[ci * id.voxels() + id.index(ix, iy, iz)];
                                }
                    out[co * od.voxels() + od.index(ox, oy, oz)] = acc;
                }
}

/// Same contract as kernels::conv3d_backward (grad_in written, weight/bias grads accumulated).
template <typename T>
void conv3d_backward(const kernels::ConvShape& s, const T* in, const T* weight, const T* grad_out, T* grad_in,
                     T* grad_weight, T* grad_bias)
{
    const Dims id = s.in_dims, od = s.out_dims();
    const int k = s.kernel, pad = s.padding();
    if (grad_in != nullptr)
        for (int64_t n = 0; n < s.in_channels * id.voxels(); ++n) grad_in[n] = T(0);
    for (int64_t co = 0; co < s.out_channels; ++co)
        for (int64_t oz = 0; oz < od.z; ++oz)
            for (int64_t oy = 0; oy < od.y; ++oy)
                for (int64_t ox = 0; ox < od.x; ++ox) {
                    const T g = grad_out[co * od.voxels() + od.index(ox, oy, oz)];
                    if (grad_bias != nullptr) grad_bias[co] += g;
                    for (int64_t ci = 0; ci < s.in_channels; ++ci)
                        for (int kz = 0; kz < k; ++kz)
                            for (int ky = 0; ky < k; ++ky)
                                for (int kx = 0; kx < k; ++kx) {
                                    const int64_t ix = ox * s.stride + kx - pad;
                                    const int64_t iy = oy * s.stride + ky - pad;
                                    const int64_t iz = oz * s.stride + kz - pad;
                                    if (ix < 0 || iy < 0 || iz < 0 || ix >= id.x || iy >= id.y || iz >= id.z) continue;
                                    const int64_t wi = ((co * s.in_channels + ci) * k + kz) * k * k + ky * k + kx;
                                    const int64_t xi = ci * id.voxels() + id.index(ix, iy, iz);
                                    if (grad_weight != nullptr) grad_weight[wi] += g * in[xi];
                                    if (grad_in != nullptr) grad_in[xi] += g * weight[wi];
                                }
                }
}

/// Per-voxel trilinear sampling with clamp-to-edge, written out corner by corner.
template <typename T>
void resample_forward(int64_t channels, Dims d, const T* src, const T* ddf, T* out)
{
    const int64_t nv = d.voxels();
    for (int64_t c = 0; c < channels; ++c)
        for (int64_t k = 0; k < d.z; ++k)
            for (int64_t j = 0; j < d.y; ++j)
                for (int64_t i = 0; i < d.x; ++i) {
                    const int64_t p = d.index(i, j, k);
                    const T q[3] = {T(i) + ddf[p], T(j) + ddf[nv + p], T(k) + ddf[2 * nv + p]};
                    int64_t lo[3], hi[3];
                    T f[3];
                    for (int a = 0; a < 3; ++a) {
                        const int64_t n = d[a];
                        const T qc = std::fmin(std::fmax(q[a], T(0)), T(n - 1));
                        lo[a] = n == 1 ? 0 : std::min<int64_t>(int64_t(std::floor(qc)), n - 2);
                        hi[a] = n == 1 ? 0 : lo[a] + 1;
                        f[a] = n == 1 ? T(0) : qc - T(lo[a]);
                    }
                    T acc = 0;
                    for (int corner = 0; corner < 8; ++corner) {
                        const int bx = corner & 1, by = (corner >> 1) & 1, bz = (corner >> 2) & 1;
                        const T w = (bx ? f[0] : 1 - f[0]) * (by ? f[1] : 1 - f[1]) * (bz ? f[2] : 1 - f[2]);
                        acc += w * src[c * nv + d.index(bx ? hi[0] : lo[0], by ? hi[1] : lo[1], bz ? hi[2] : lo[2])];
                    }
                    out[c * nv + p] = acc;
                }
}

template <typename T>
void instance_norm_forward(int64_t channels, int64_t voxels, const T* in, const T* gamma, const T* beta, T eps,
                           T* out)
{
    for (int64_t c = 0; c < channels; ++c) {
        double mu = 0, var = 0;
        for (int64_t n = 0; n < voxels; ++n) mu += in[c * voxels + n];
        mu /= double(voxels);
        for (int64_t n = 0; n < voxels; ++n) var += (in[c * voxels + n] - mu) * (in[c * voxels + n] - mu);
        var /= double(voxels);
        for (int64_t n = 0; n < voxels; ++n)
            out[c * voxels + n] = gamma[c] * T((in[c * voxels + n] - mu) / std::sqrt(var + double(eps))) + beta[c];
    }
}

}  // namespace vqreg::reference
