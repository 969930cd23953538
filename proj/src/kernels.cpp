#include "vqreg/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include <Eigen/Core>

namespace vqreg::kernels {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
std::vector<T>& scratch(int slot)
{
    thread_local std::vector<T> buffers[2];
    return buffers[slot];
}

/// Output voxels are processed in tiles of whole x-lines so that each tile's
/// column matrix stays cache resident. The tile size depends only on the shape,
/// never on the thread count.
struct Tiling {
    int64_t lines = 0;           // total output x-lines (z * y)
    int64_t lines_per_tile = 1;
    int64_t line_len = 0;        // output x extent
    [[nodiscard]] int64_t tiles() const { return (lines + lines_per_tile - 1) / lines_per_tile; }
};

constexpr int64_t kTileElements = 48 * 1024;
constexpr int64_t kMinTileWidth = 256;

Tiling make_tiling(const ConvShape& s)
{
    const Dims od = s.out_dims();
    Tiling t;
    t.lines = od.z * od.y;
    t.line_len = od.x;
    const int64_t rows = s.in_channels * s.taps();
    const int64_t min_lines = (kMinTileWidth + od.x - 1) / od.x;
    t.lines_per_tile = std::clamp<int64_t>(std::max(kTileElements / (rows * od.x), min_lines), 1, t.lines);
    return t;
}

/// Column matrix for output lines [l0, l1): rows = in_channels * taps, cols = (l1 - l0) * out.x.
template <typename T>
void im2col_lines(const ConvShape& s, const T* in, int64_t l0, int64_t l1, T* col)
{
    const Dims id = s.in_dims;
    const Dims od = s.out_dims();
    const int64_t width = (l1 - l0) * od.x;
    const int64_t rows = s.in_channels * s.taps();
    const int k = s.kernel;
    const int pad = s.padding();
    for (int64_t r = 0; r < rows; ++r) {
        const int64_t ci = r / s.taps();
        const int64_t t = r % s.taps();
        const int64_t kz = t / (k * k), ky = (t / k) % k, kx = t % k;
        const T* src = in + ci * id.voxels();
        T* dst = col + r * width;
        for (int64_t l = l0; l < l1; ++l) {
            const int64_t oz = l / od.y, oy = l % od.y;
            const int64_t iz = oz * s.stride + kz - pad;
            const int64_t iy = oy * s.stride + ky - pad;
            T* row = dst + (l - l0) * od.x;
            if (iz < 0 || iz >= id.z || iy < 0 || iy >= id.y) {
                std::fill(row, row + od.x, T(0));
                continue;
            }
            const T* line = src + (iz * id.y + iy) * id.x;
            if (s.stride == 1) {
                // shifted copy of the input line with zero fill where the kernel overhangs
                const int64_t shift = kx - pad;
                const int64_t lo = std::max<int64_t>(0, -shift), hi = std::min<int64_t>(od.x, id.x - shift);
                std::fill(row, row + lo, T(0));
                std::copy(line + lo + shift, line + hi + shift, row + lo);
                std::fill(row + hi, row + od.x, T(0));
            } else {
                for (int64_t ox = 0; ox < od.x; ++ox) {
                    const int64_t ix = ox * s.stride + kx - pad;
                    row[ox] = (ix >= 0 && ix < id.x) ? line[ix] : T(0);
                }
            }
        }
    }
}

template <typename T>
void col2im(const ConvShape& s, const T* col, T* grad_in)
{
    const Dims id = s.in_dims;
    const Dims od = s.out_dims();
    const int64_t n_out = od.voxels();
    const int k = s.kernel;
    const int pad = s.padding();
#pragma omp parallel for schedule(static)
    for (int64_t ci = 0; ci < s.in_channels; ++ci) {
        T* dst = grad_in + ci * id.voxels();
        std::fill(dst, dst + id.voxels(), T(0));
        for (int64_t t = 0; t < s.taps(); ++t) {
            const int64_t kz = t / (k * k), ky = (t / k) % k, kx = t % k;
            const T* src = col + (ci * s.taps() + t) * n_out;
            for (int64_t oz = 0; oz < od.z; ++oz) {
                const int64_t iz = oz * s.stride + kz - pad;
                if (iz < 0 || iz >= id.z) continue;
                for (int64_t oy = 0; oy < od.y; ++oy) {
                    const int64_t iy = oy * s.stride + ky - pad;
                    if (iy < 0 || iy >= id.y) continue;
                    const T* row = src + (oz * od.y + oy) * od.x;
                    T* line = dst + (iz * id.y + iy) * id.x;
                    for (int64_t ox = 0; ox < od.x; ++ox) {
                        const int64_t ix = ox * s.stride + kx - pad;
                        if (ix >= 0 && ix < id.x) line[ix] += row[ox];
                    }
                }
            }
        }
    }
}

bool is_pointwise(const ConvShape& s) { return s.kernel == 1 && s.stride == 1; }

template <typename T>
using StridedRowMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedRowMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

/// Forward convolution without bias, tiled over output lines.
template <typename T>
void conv_tiled(const ConvShape& s, const T* in, const T* weight, T* out)
{
    const int64_t n_out = s.out_dims().voxels();
    const int64_t rows = s.in_channels * s.taps();
    Eigen::Map<const RowMat<T>> w(weight, s.out_channels, rows);
    if (is_pointwise(s)) {
        Eigen::Map<const RowMat<T>> c(in, rows, n_out);
        Eigen::Map<RowMat<T>> o(out, s.out_channels, n_out);
        o.noalias() = w * c;
        return;
    }
    const Tiling tl = make_tiling(s);
#pragma omp parallel for schedule(static)
    for (int64_t t = 0; t < tl.tiles(); ++t) {
        const int64_t l0 = t * tl.lines_per_tile, l1 = std::min(tl.lines, l0 + tl.lines_per_tile);
        const int64_t width = (l1 - l0) * tl.line_len;
        auto& buf = scratch<T>(0);
        buf.resize(static_cast<size_t>(rows * width));
        im2col_lines(s, in, l0, l1, buf.data());
        Eigen::Map<const RowMat<T>> c(buf.data(), rows, width);
        StridedRowMap<T> o(out + l0 * tl.line_len, s.out_channels, width, Eigen::OuterStride<>(n_out));
        o.noalias() = w * c;
    }
}

/// Number of independent partial sums for the weight gradient; fixed so that the
/// reduction order never depends on the thread count.
constexpr int64_t kWeightGradChunks = 8;

}  // namespace

Dims ConvShape::out_dims() const
{
    auto o = [&](int64_t n) { return (n + 2 * padding() - kernel) / stride + 1; };
    return {o(in_dims.x), o(in_dims.y), o(in_dims.z)};
}

void ConvShape::validate() const
{
    if (in_channels < 1 || out_channels < 1) throw Error("conv3d: channel counts must be >= 1");
    if (kernel != 1 && kernel != 3) throw Error("conv3d: kernel must be 1 or 3");
    if (stride != 1 && stride != 2) throw Error("conv3d: stride must be 1 or 2");
    if (!in_dims.valid()) throw Error("conv3d: invalid input dims");
}

template <typename T>
void conv3d_forward(const ConvShape& s, const T* in, const T* weight, const T* bias, T* out)
{
    conv_tiled(s, in, weight, out);
    if (bias != nullptr) {
        const int64_t n_out = s.out_dims().voxels();
#pragma omp parallel for schedule(static)
        for (int64_t co = 0; co < s.out_channels; ++co) {
            T* row = out + co * n_out;
            for (int64_t n = 0; n < n_out; ++n) row[n] += bias[co];
        }
    }
}

template <typename T>
void conv3d_backward(const ConvShape& s, const T* in, const T* weight, const T* grad_out, T* grad_in,
                     T* grad_weight, T* grad_bias)
{
    const int64_t n_out = s.out_dims().voxels();
    const int64_t rows = s.in_channels * s.taps();
    const int64_t wcount = s.weight_count();
    if (grad_weight != nullptr) {
        Eigen::Map<RowMat<T>> gw(grad_weight, s.out_channels, rows);
        if (is_pointwise(s)) {
            Eigen::Map<const RowMat<T>> go(grad_out, s.out_channels, n_out);
            Eigen::Map<const RowMat<T>> c(in, rows, n_out);
            gw.noalias() += go * c.transpose();
        } else {
            const Tiling tl = make_tiling(s);
            const int64_t chunks = std::min(kWeightGradChunks, tl.tiles());
            std::vector<T> partial(static_cast<size_t>(chunks * wcount), T(0));
#pragma omp parallel for schedule(static)
            for (int64_t ch = 0; ch < chunks; ++ch) {
                Eigen::Map<RowMat<T>> pw(partial.data() + ch * wcount, s.out_channels, rows);
                auto& buf = scratch<T>(0);
                for (int64_t t = ch * tl.tiles() / chunks; t < (ch + 1) * tl.tiles() / chunks; ++t) {
                    const int64_t l0 = t * tl.lines_per_tile, l1 = std::min(tl.lines, l0 + tl.lines_per_tile);
                    const int64_t width = (l1 - l0) * tl.line_len;
                    buf.resize(static_cast<size_t>(rows * width));
                    im2col_lines(s, in, l0, l1, buf.data());
                    Eigen::Map<const RowMat<T>> c(buf.data(), rows, width);
                    ConstStridedRowMap<T> go(grad_out + l0 * tl.line_len, s.out_channels, width,
                                             Eigen::OuterStride<>(n_out));
                    pw.noalias() += go * c.transpose();
                }
            }
            for (int64_t ch = 0; ch < chunks; ++ch)
                for (int64_t n = 0; n < wcount; ++n) grad_weight[n] += partial[size_t(ch * wcount + n)];
        }
    }
    if (grad_bias != nullptr) {
        for (int64_t co = 0; co < s.out_channels; ++co) {
            const T* row = grad_out + co * n_out;
            T acc = 0;
            for (int64_t n = 0; n < n_out; ++n) acc += row[n];
            grad_bias[co] += acc;
        }
    }
    if (grad_in != nullptr) {
        Eigen::Map<const RowMat<T>> w(weight, s.out_channels, rows);
        Eigen::Map<const RowMat<T>> go(grad_out, s.out_channels, n_out);
        if (is_pointwise(s)) {
            Eigen::Map<RowMat<T>> gi(grad_in, rows, n_out);
            gi.noalias() = w.transpose() * go;
        } else if (s.stride == 1) {
            // the input gradient of a stride-1 "same" convolution is a convolution of the
            // output gradient with the spatially flipped, channel-transposed kernel
            const int64_t taps = s.taps();
            std::vector<T> flipped(static_cast<size_t>(wcount));
            for (int64_t co = 0; co < s.out_channels; ++co)
                for (int64_t ci = 0; ci < s.in_channels; ++ci)
                    for (int64_t t = 0; t < taps; ++t)
                        flipped[size_t((ci * s.out_channels + co) * taps + (taps - 1 - t))] =
                            weight[(co * s.in_channels + ci) * taps + t];
            ConvShape ts{s.out_channels, s.in_channels, s.kernel, 1, s.in_dims};
            conv_tiled(ts, grad_out, flipped.data(), grad_in);
        } else {
            auto& buf = scratch<T>(1);
            buf.resize(static_cast<size_t>(rows * n_out));
            Eigen::Map<RowMat<T>> gc(buf.data(), rows, n_out);
            gc.noalias() = w.transpose() * go;
            col2im(s, buf.data(), grad_in);
        }
    }
}

template <typename T>
void instance_norm_forward(int64_t channels, int64_t voxels, const T* in, const T* gamma, const T* beta, T eps,
                           T* out, T* mean, T* inv_std)
{
#pragma omp parallel for schedule(static)
    for (int64_t c = 0; c < channels; ++c) {
        const T* x = in + c * voxels;
        double sum = 0;
        for (int64_t n = 0; n < voxels; ++n) sum += x[n];
        const double mu = sum / double(voxels);
        double sq = 0;
        for (int64_t n = 0; n < voxels; ++n) sq += (x[n] - mu) * (x[n] - mu);
        const double istd = 1.0 / std::sqrt(sq / double(voxels) + double(eps));
        mean[c] = T(mu);
        inv_std[c] = T(istd);
        T* y = out + c * voxels;
        for (int64_t n = 0; n < voxels; ++n) y[n] = gamma[c] * T((x[n] - mu) * istd) + beta[c];
    }
}

template <typename T>
void instance_norm_backward(int64_t channels, int64_t voxels, const T* in, const T* gamma, const T* mean,
                            const T* inv_std, const T* grad_out, T* grad_in, T* grad_gamma, T* grad_beta)
{
#pragma omp parallel for schedule(static)
    for (int64_t c = 0; c < channels; ++c) {
        const T* x = in + c * voxels;
        const T* gy = grad_out + c * voxels;
        const double mu = mean[c];
        const double istd = inv_std[c];
        double sum_g = 0, sum_gx = 0;
        for (int64_t n = 0; n < voxels; ++n) {
            const double xhat = (x[n] - mu) * istd;
            sum_g += gy[n];
            sum_gx += gy[n] * xhat;
        }
        grad_gamma[c] += T(sum_gx);
        grad_beta[c] += T(sum_g);
        const double mg = sum_g / double(voxels);
        const double mgx = sum_gx / double(voxels);
        const double scale = double(gamma[c]) * istd;
        T* gx = grad_in + c * voxels;
        for (int64_t n = 0; n < voxels; ++n) {
            const double xhat = (x[n] - mu) * istd;
            gx[n] = T(scale * (gy[n] - mg - xhat * mgx));
        }
    }
}

template <typename T>
void relu_forward(std::span<const T> in, std::span<T> out)
{
    const auto n = static_cast<int64_t>(in.size());
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) out[i] = in[i] > T(0) ? in[i] : T(0);
}

template <typename T>
void relu_backward(std::span<const T> out, std::span<const T> grad_out, std::span<T> grad_in)
{
    const auto n = static_cast<int64_t>(out.size());
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) grad_in[i] = out[i] > T(0) ? grad_out[i] : T(0);
}

template <typename T>
void upsample_nearest_forward(int64_t channels, Dims in_dims, const T* in, T* out)
{
    const Dims od = in_dims.doubled();
#pragma omp parallel for schedule(static)
    for (int64_t cz = 0; cz < channels * od.z; ++cz) {
        const int64_t c = cz / od.z, z = cz % od.z;
        const T* src = in + c * in_dims.voxels();
        T* dst = out + c * od.voxels();
        for (int64_t y = 0; y < od.y; ++y)
            for (int64_t x = 0; x < od.x; ++x) dst[od.index(x, y, z)] = src[in_dims.index(x / 2, y / 2, z / 2)];
    }
}

template <typename T>
void upsample_nearest_backward(int64_t channels, Dims in_dims, const T* grad_out, T* grad_in)
{
    const Dims od = in_dims.doubled();
#pragma omp parallel for schedule(static)
    for (int64_t cz = 0; cz < channels * in_dims.z; ++cz) {
        const int64_t c = cz / in_dims.z, z = cz % in_dims.z;
        const T* src = grad_out + c * od.voxels();
        T* dst = grad_in + c * in_dims.voxels();
        for (int64_t y = 0; y < in_dims.y; ++y)
            for (int64_t x = 0; x < in_dims.x; ++x) {
                T acc = 0;
                for (int dz = 0; dz < 2; ++dz)
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx) acc += src[od.index(2 * x + dx, 2 * y + dy, 2 * z + dz)];
                dst[in_dims.index(x, y, z)] = acc;
            }
    }
}

namespace {

template <typename T>
struct AxisTap {
    int64_t i0 = 0;
    int64_t i1 = 0;
    T f = 0;
    bool clamped = false;
};

/// Linear interpolation taps for coordinate q on an axis of n samples (clamp-to-edge).
template <typename T>
AxisTap<T> axis_tap(T q, int64_t n)
{
    AxisTap<T> a;
    if (n == 1) {
        a.clamped = true;
        return a;
    }
    const T hi = T(n - 1);
    if (q < T(0)) {
        q = T(0);
        a.clamped = true;
    } else if (q > hi) {
        q = hi;
        a.clamped = true;
    }
    a.i0 = std::min<int64_t>(static_cast<int64_t>(std::floor(q)), n - 2);
    a.i1 = a.i0 + 1;
    a.f = q - T(a.i0);
    return a;
}

template <typename T>
std::vector<AxisTap<T>> upsample_taps(int64_t n)
{
    std::vector<AxisTap<T>> taps(static_cast<size_t>(2 * n));
    for (int64_t o = 0; o < 2 * n; ++o) taps[static_cast<size_t>(o)] = axis_tap<T>(T(0.5) * T(o) - T(0.25), n);
    return taps;
}

}  // namespace

template <typename T>
void upsample_trilinear_forward(int64_t channels, Dims in_dims, const T* in, T* out)
{
    const Dims od = in_dims.doubled();
    const auto tx = upsample_taps<T>(in_dims.x), ty = upsample_taps<T>(in_dims.y), tz = upsample_taps<T>(in_dims.z);
#pragma omp parallel for schedule(static)
    for (int64_t cz = 0; cz < channels * od.z; ++cz) {
        const int64_t c = cz / od.z, z = cz % od.z;
        const T* src = in + c * in_dims.voxels();
        T* dst = out + c * od.voxels();
        const auto& az = tz[size_t(z)];
        for (int64_t y = 0; y < od.y; ++y) {
            const auto& ay = ty[size_t(y)];
            for (int64_t x = 0; x < od.x; ++x) {
                const auto& ax = tx[size_t(x)];
                auto v = [&](int64_t i, int64_t j, int64_t k) { return src[in_dims.index(i, j, k)]; };
                const T c00 = v(ax.i0, ay.i0, az.i0) * (1 - ax.f) + v(ax.i1, ay.i0, az.i0) * ax.f;
                const T c10 = v(ax.i0, ay.i1, az.i0) * (1 - ax.f) + v(ax.i1, ay.i1, az.i0) * ax.f;
                const T c01 = v(ax.i0, ay.i0, az.i1) * (1 - ax.f) + v(ax.i1, ay.i0, az.i1) * ax.f;
                const T c11 = v(ax.i0, ay.i1, az.i1) * (1 - ax.f) + v(ax.i1, ay.i1, az.i1) * ax.f;
                const T c0 = c00 * (1 - ay.f) + c10 * ay.f;
                const T c1 = c01 * (1 - ay.f) + c11 * ay.f;
                dst[od.index(x, y, z)] = c0 * (1 - az.f) + c1 * az.f;
            }
        }
    }
}

template <typename T>
void upsample_trilinear_backward(int64_t channels, Dims in_dims, const T* grad_out, T* grad_in)
{
    const Dims od = in_dims.doubled();
    const auto tx = upsample_taps<T>(in_dims.x), ty = upsample_taps<T>(in_dims.y), tz = upsample_taps<T>(in_dims.z);
#pragma omp parallel for schedule(static)
    for (int64_t c = 0; c < channels; ++c) {
        const T* src = grad_out + c * od.voxels();
        T* dst = grad_in + c * in_dims.voxels();
        std::fill(dst, dst + in_dims.voxels(), T(0));
        for (int64_t z = 0; z < od.z; ++z) {
            const auto& az = tz[size_t(z)];
            for (int64_t y = 0; y < od.y; ++y) {
                const auto& ay = ty[size_t(y)];
                for (int64_t x = 0; x < od.x; ++x) {
                    const auto& ax = tx[size_t(x)];
                    const T g = src[od.index(x, y, z)];
                    const T wx[2] = {1 - ax.f, ax.f}, wy[2] = {1 - ay.f, ay.f}, wz[2] = {1 - az.f, az.f};
                    const int64_t ix[2] = {ax.i0, ax.i1}, iy[2] = {ay.i0, ay.i1}, iz[2] = {az.i0, az.i1};
                    for (int a = 0; a < 2; ++a)
                        for (int b = 0; b < 2; ++b)
                            for (int d = 0; d < 2; ++d) dst[in_dims.index(ix[d], iy[b], iz[a])] += g * wx[d] * wy[b] * wz[a];
                }
            }
        }
    }
}

template <typename T>
void resample_forward(int64_t channels, Dims dims, const T* src, const T* ddf, T* out)
{
    const int64_t nv = dims.voxels();
#pragma omp parallel for schedule(static)
    for (int64_t k = 0; k < dims.z; ++k)
        for (int64_t j = 0; j < dims.y; ++j)
            for (int64_t i = 0; i < dims.x; ++i) {
                const int64_t p = dims.index(i, j, k);
                const auto ax = axis_tap<T>(T(i) + ddf[p], dims.x);
                const auto ay = axis_tap<T>(T(j) + ddf[nv + p], dims.y);
                const auto az = axis_tap<T>(T(k) + ddf[2 * nv + p], dims.z);
                for (int64_t c = 0; c < channels; ++c) {
                    const T* s = src + c * nv;
                    auto v = [&](int64_t x, int64_t y, int64_t z) { return s[dims.index(x, y, z)]; };
                    const T c00 = v(ax.i0, ay.i0, az.i0) * (1 - ax.f) + v(ax.i1, ay.i0, az.i0) * ax.f;
                    const T c10 = v(ax.i0, ay.i1, az.i0) * (1 - ax.f) + v(ax.i1, ay.i1, az.i0) * ax.f;
                    const T c01 = v(ax.i0, ay.i0, az.i1) * (1 - ax.f) + v(ax.i1, ay.i0, az.i1) * ax.f;
                    const T c11 = v(ax.i0, ay.i1, az.i1) * (1 - ax.f) + v(ax.i1, ay.i1, az.i1) * ax.f;
                    const T c0 = c00 * (1 - ay.f) + c10 * ay.f;
                    const T c1 = c01 * (1 - ay.f) + c11 * ay.f;
                    out[c * nv + p] = c0 * (1 - az.f) + c1 * az.f;
                }
            }
}

template <typename T>
void resample_backward(int64_t channels, Dims dims, const T* src, const T* ddf, const T* grad_out, T* grad_src,
                       T* grad_ddf)
{
    const int64_t nv = dims.voxels();
    if (grad_ddf != nullptr) {
#pragma omp parallel for schedule(static)
        for (int64_t k = 0; k < dims.z; ++k)
            for (int64_t j = 0; j < dims.y; ++j)
                for (int64_t i = 0; i < dims.x; ++i) {
                    const int64_t p = dims.index(i, j, k);
                    const auto ax = axis_tap<T>(T(i) + ddf[p], dims.x);
                    const auto ay = axis_tap<T>(T(j) + ddf[nv + p], dims.y);
                    const auto az = axis_tap<T>(T(k) + ddf[2 * nv + p], dims.z);
                    T gx = 0, gy = 0, gz = 0;
                    for (int64_t c = 0; c < channels; ++c) {
                        const T* s = src + c * nv;
                        const T g = grad_out[c * nv + p];
                        auto v = [&](int64_t x, int64_t y, int64_t z) { return s[dims.index(x, y, z)]; };
                        const T v000 = v(ax.i0, ay.i0, az.i0), v100 = v(ax.i1, ay.i0, az.i0);
                        const T v010 = v(ax.i0, ay.i1, az.i0), v110 = v(ax.i1, ay.i1, az.i0);
                        const T v001 = v(ax.i0, ay.i0, az.i1), v101 = v(ax.i1, ay.i0, az.i1);
                        const T v011 = v(ax.i0, ay.i1, az.i1), v111 = v(ax.i1, ay.i1, az.i1);
                        const T wy0 = 1 - ay.f, wz0 = 1 - az.f, wx0 = 1 - ax.f;
                        const T dx = wz0 * (wy0 * (v100 - v000) + ay.f * (v110 - v010)) +
                                     az.f * (wy0 * (v101 - v001) + ay.f * (v111 - v011));
                        const T dy = wz0 * (wx0 * (v010 - v000) + ax.f * (v110 - v100)) +
                                     az.f * (wx0 * (v011 - v001) + ax.f * (v111 - v101));
                        const T dz = wy0 * (wx0 * (v001 - v000) + ax.f * (v101 - v100)) +
                                     ay.f * (wx0 * (v011 - v010) + ax.f * (v111 - v110));
                        gx += g * dx;
                        gy += g * dy;
                        gz += g * dz;
                    }
                    if (!ax.clamped) grad_ddf[p] += gx;
                    if (!ay.clamped) grad_ddf[nv + p] += gy;
                    if (!az.clamped) grad_ddf[2 * nv + p] += gz;
                }
    }
    if (grad_src != nullptr) {
#pragma omp parallel for schedule(static)
        for (int64_t c = 0; c < channels; ++c) {
            T* gs = grad_src + c * nv;
            for (int64_t k = 0; k < dims.z; ++k)
                for (int64_t j = 0; j < dims.y; ++j)
                    for (int64_t i = 0; i < dims.x; ++i) {
                        const int64_t p = dims.index(i, j, k);
                        const auto ax = axis_tap<T>(T(i) + ddf[p], dims.x);
                        const auto ay = axis_tap<T>(T(j) + ddf[nv + p], dims.y);
                        const auto az = axis_tap<T>(T(k) + ddf[2 * nv + p], dims.z);
                        const T g = grad_out[c * nv + p];
                        const T wx[2] = {1 - ax.f, ax.f}, wy[2] = {1 - ay.f, ay.f}, wz[2] = {1 - az.f, az.f};
                        const int64_t ix[2] = {ax.i0, ax.i1}, iy[2] = {ay.i0, ay.i1}, iz[2] = {az.i0, az.i1};
                        for (int a = 0; a < 2; ++a)
                            for (int b = 0; b < 2; ++b)
                                for (int d = 0; d < 2; ++d) gs[dims.index(ix[d], iy[b], iz[a])] += g * wx[d] * wy[b] * wz[a];
                    }
        }
    }
}

#define VQREG_INSTANTIATE(T)                                                                                          \
    template void conv3d_forward<T>(const ConvShape&, const T*, const T*, const T*, T*);                              \
    template void conv3d_backward<T>(const ConvShape&, const T*, const T*, const T*, T*, T*, T*);                     \
    template void instance_norm_forward<T>(int64_t, int64_t, const T*, const T*, const T*, T, T*, T*, T*);            \
    template void instance_norm_backward<T>(int64_t, int64_t, const T*, const T*, const T*, const T*, const T*, T*,   \
                                            T*, T*);                                                                  \
    template void relu_forward<T>(std::span<const T>, std::span<T>);                                                  \
    template void relu_backward<T>(std::span<const T>, std::span<const T>, std::span<T>);                             \
    template void upsample_nearest_forward<T>(int64_t, Dims, const T*, T*);                                           \
    template void upsample_nearest_backward<T>(int64_t, Dims, const T*, T*);                                          \
    template void upsample_trilinear_forward<T>(int64_t, Dims, const T*, T*);                                         \
    template void upsample_trilinear_backward<T>(int64_t, Dims, const T*, T*);                                        \
    template void resample_forward<T>(int64_t, Dims, const T*, const T*, T*);                                         \
    template void resample_backward<T>(int64_t, Dims, const T*, const T*, const T*, T*, T*);

VQREG_INSTANTIATE(float)
VQREG_INSTANTIATE(double)

#undef VQREG_INSTANTIATE

}  // namespace vqreg::kernels
