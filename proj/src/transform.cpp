#include "vqreg/transform.hpp"

#include <algorithm>

#include "vqreg/kernels.hpp"

namespace vqreg {

namespace {

void check_field(const Dims& volume_dims, const DisplacementField& ddf)
{
    if (!(ddf.dims() == volume_dims))
        throw Error("resample: ddf dims " + to_string(ddf.dims()) + " differ from volume dims " + to_string(volume_dims));
    ddf.validate();
}

}  // namespace

Volume3D resample(const Volume3D& volume, const DisplacementField& ddf, const ResampleSpec&)
{
    check_field(volume.dims(), ddf);
    Volume3D out(volume.geometry());
    kernels::resample_forward<double>(1, volume.dims(), volume.values().data(), ddf.data.data(), out.values().data());
    return out;
}

MaskVolume resample(const MaskVolume& mask, const DisplacementField& ddf, const ResampleSpec& spec)
{
    Volume3D warped = resample(mask.volume(), ddf, spec);
    for (double& v : warped.values()) v = std::clamp(v, 0.0, 1.0);
    MaskVolume soft(std::move(warped), MaskKind::soft);
    return spec.mask_mode == MaskMode::threshold ? soft.thresholded() : soft;
}

Vec3 interpolate_displacement(const DisplacementField& ddf, const Vec3& v)
{
    const Dims& d = ddf.dims();
    int64_t lo[3], hi[3];
    double f[3];
    for (int a = 0; a < 3; ++a) {
        const int64_t n = d[a];
        const double q = std::clamp(v[a], 0.0, double(n - 1));
        lo[a] = n == 1 ? 0 : std::min<int64_t>(int64_t(std::floor(q)), n - 2);
        hi[a] = n == 1 ? 0 : lo[a] + 1;
        f[a] = n == 1 ? 0.0 : q - double(lo[a]);
    }
    Vec3 u{0, 0, 0};
    for (int corner = 0; corner < 8; ++corner) {
        const int bx = corner & 1, by = (corner >> 1) & 1, bz = (corner >> 2) & 1;
        const double w = (bx ? f[0] : 1 - f[0]) * (by ? f[1] : 1 - f[1]) * (bz ? f[2] : 1 - f[2]);
        const int64_t p = d.index(bx ? hi[0] : lo[0], by ? hi[1] : lo[1], bz ? hi[2] : lo[2]);
        for (int c = 0; c < 3; ++c) u[c] += w * ddf.data.at(c, p);
    }
    return u;
}

Vec3 warp_point(const Vec3& point_fixed_mm, const DisplacementField& ddf)
{
    const Geometry g = ddf.geometry();
    const Vec3 v = g.mm_to_voxel(point_fixed_mm);
    constexpr double tol = 1e-9;
    for (int a = 0; a < 3; ++a)
        if (v[a] < -tol || v[a] > double(g.dims[a] - 1) + tol)
            throw Error("warp_point: point outside the fixed-volume extent");
    return g.voxel_to_mm(v + interpolate_displacement(ddf, v));
}

Volume3D jacobian_determinants(const DisplacementField& ddf)
{
    const Dims& d = ddf.dims();
    if (d.x < 3 || d.y < 3 || d.z < 3) throw Error("jacobian_determinants: dims must be >= 3 per axis");
    Volume3D out(ddf.geometry());
    const Tensor<double>& u = ddf.data;
    // derivative of channel c along axis a at (i, j, k)
    auto deriv = [&](int c, int a, int64_t i, int64_t j, int64_t k) {
        int64_t idx[3] = {i, j, k};
        const int64_t n = d[a];
        int64_t lo = idx[a] - 1, hi = idx[a] + 1;
        double h = 2.0;
        if (idx[a] == 0) {
            lo = 0;
            h = 1.0;
        } else if (idx[a] == n - 1) {
            hi = n - 1;
            h = 1.0;
        }
        int64_t a_idx[3] = {i, j, k}, b_idx[3] = {i, j, k};
        a_idx[a] = hi;
        b_idx[a] = lo;
        return (u.at(c, a_idx[0], a_idx[1], a_idx[2]) - u.at(c, b_idx[0], b_idx[1], b_idx[2])) / h;
    };
#pragma omp parallel for schedule(static)
    for (int64_t k = 0; k < d.z; ++k)
        for (int64_t j = 0; j < d.y; ++j)
            for (int64_t i = 0; i < d.x; ++i) {
                double m[3][3];
                for (int c = 0; c < 3; ++c)
                    for (int a = 0; a < 3; ++a) m[c][a] = (c == a ? 1.0 : 0.0) + deriv(c, a, i, j, k);
                out(i, j, k) = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
                               m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
                               m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
            }
    return out;
}

template <typename T>
Tensor<T> warp(const Tensor<T>& src, const Tensor<T>& ddf)
{
    if (ddf.channels() != 3 || !(ddf.dims() == src.dims())) throw Error("warp: ddf shape mismatch");
    Tensor<T> out(src.channels(), src.dims());
    kernels::resample_forward<T>(src.channels(), src.dims(), src.data(), ddf.data(), out.data());
    return out;
}

template <typename T>
void warp_backward(const Tensor<T>& src, const Tensor<T>& ddf, const Tensor<T>& grad_out, Tensor<T>* grad_src,
                   Tensor<T>* grad_ddf)
{
    if (!grad_out.same_shape(src)) throw Error("warp_backward: gradient shape mismatch");
    kernels::resample_backward<T>(src.channels(), src.dims(), src.data(), ddf.data(), grad_out.data(),
                                  grad_src != nullptr ? grad_src->data() : nullptr,
                                  grad_ddf != nullptr ? grad_ddf->data() : nullptr);
}

template Tensor<float> warp<float>(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> warp<double>(const Tensor<double>&, const Tensor<double>&);
template void warp_backward<float>(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&, Tensor<float>*,
                                   Tensor<float>*);
template void warp_backward<double>(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&,
                                    Tensor<double>*, Tensor<double>*);

}  // namespace vqreg
