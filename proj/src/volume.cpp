#include "vqreg/volume.hpp"

#include <algorithm>

namespace vqreg {

void Geometry::validate() const
{
    if (!dims.valid()) throw Error("geometry: dimensions must be >= 1, got " + to_string(dims));
    for (double s : spacing)
        if (!(s > 0.0) || !std::isfinite(s)) throw Error("geometry: spacing must be positive and finite");
    for (double o : origin)
        if (!std::isfinite(o)) throw Error("geometry: origin must be finite");
}

Vec3 Geometry::voxel_to_mm(const Vec3& v) const
{
    return {origin[0] + v[0] * spacing[0], origin[1] + v[1] * spacing[1], origin[2] + v[2] * spacing[2]};
}

Vec3 Geometry::mm_to_voxel(const Vec3& p) const
{
    return {(p[0] - origin[0]) / spacing[0], (p[1] - origin[1]) / spacing[1], (p[2] - origin[2]) / spacing[2]};
}

bool Geometry::contains_voxel_coord(const Vec3& v) const
{
    for (int a = 0; a < 3; ++a)
        if (!(v[a] >= 0.0 && v[a] <= static_cast<double>(dims[a] - 1))) return false;
    return true;
}

Volume3D::Volume3D(Geometry geom, double fill) : geom_(geom)
{
    geom_.validate();
    data_.assign(static_cast<size_t>(geom_.dims.voxels()), fill);
}

Volume3D::Volume3D(Geometry geom, std::vector<double> data) : geom_(geom), data_(std::move(data))
{
    geom_.validate();
    if (static_cast<int64_t>(data_.size()) != geom_.dims.voxels())
        throw Error("Volume3D: payload size does not match dims " + to_string(geom_.dims));
}

MaskVolume::MaskVolume(Volume3D values, MaskKind kind) : vol_(std::move(values)), kind_(kind)
{
    for (double v : vol_.values()) {
        if (kind_ == MaskKind::binary && v != 0.0 && v != 1.0) throw Error("MaskVolume: binary mask holds non-binary value");
        if (kind_ == MaskKind::soft && !(v >= 0.0 && v <= 1.0)) throw Error("MaskVolume: soft mask value outside [0,1]");
    }
}

MaskVolume MaskVolume::thresholded() const
{
    Volume3D out(vol_.geometry());
    for (int64_t p = 0; p < vol_.voxels(); ++p) out[p] = vol_[p] > 0.5 ? 1.0 : 0.0;
    return MaskVolume(std::move(out), MaskKind::binary);
}

int64_t MaskVolume::count_foreground() const
{
    return std::count_if(vol_.values().begin(), vol_.values().end(), [](double v) { return v > 0.5; });
}

void LandmarkSet::validate() const
{
    if (points.size() != labels.size()) throw Error("LandmarkSet: points/labels length mismatch");
    for (const auto& p : points)
        for (double c : p)
            if (!std::isfinite(c)) throw Error("LandmarkSet: non-finite coordinate");
}

void DisplacementField::validate() const
{
    if (data.channels() != 3) throw Error("DisplacementField: expected 3 channels");
    for (double v : data.span())
        if (!std::isfinite(v)) throw Error("DisplacementField: non-finite displacement");
}

void RegistrationSample::validate() const
{
    const Geometry& g = fixed.geometry();
    auto same = [&](const Geometry& o) { return o.dims == g.dims && o.spacing == g.spacing; };
    if (!same(moving.geometry()) || !same(moving_mask.geometry()) || !same(fixed_mask.geometry()))
        throw Error("RegistrationSample: volumes must share dimensions and spacing");
    moving_landmarks.validate();
    fixed_landmarks.validate();
    if (moving_landmarks.labels != fixed_landmarks.labels)
        throw Error("RegistrationSample: moving/fixed landmark labels differ");
}

namespace {

Volume3D crop_volume(const Volume3D& v, const std::array<int64_t, 3>& start, const Dims& dims)
{
    Geometry g = v.geometry();
    g.dims = dims;
    g.origin = v.geometry().voxel_to_mm({double(start[0]), double(start[1]), double(start[2])});
    Volume3D out(g);
    for (int64_t k = 0; k < dims.z; ++k)
        for (int64_t j = 0; j < dims.y; ++j)
            for (int64_t i = 0; i < dims.x; ++i) out(i, j, k) = v(start[0] + i, start[1] + j, start[2] + k);
    return out;
}

}  // namespace

RegistrationSample crop_to_gland(const RegistrationSample& s, const Dims& dims)
{
    s.validate();
    const Dims& full = s.fixed.dims();
    if (dims.x > full.x || dims.y > full.y || dims.z > full.z || !dims.valid())
        throw Error("crop_to_gland: crop " + to_string(dims) + " does not fit " + to_string(full));
    Vec3 c{0, 0, 0};
    double mass = 0;
    for (int64_t k = 0; k < full.z; ++k)
        for (int64_t j = 0; j < full.y; ++j)
            for (int64_t i = 0; i < full.x; ++i) {
                double w = s.fixed_mask.volume()(i, j, k);
                c = c + w * Vec3{double(i), double(j), double(k)};
                mass += w;
            }
    if (mass <= 0) throw Error("crop_to_gland: fixed mask is empty");
    std::array<int64_t, 3> start{};
    for (int a = 0; a < 3; ++a) {
        auto lo = static_cast<int64_t>(std::llround(c[a] / mass - 0.5 * double(dims[a])));
        start[a] = std::clamp<int64_t>(lo, 0, full[a] - dims[a]);
    }
    RegistrationSample out = s;
    out.moving = crop_volume(s.moving, start, dims);
    out.fixed = crop_volume(s.fixed, start, dims);
    out.moving_mask = MaskVolume(crop_volume(s.moving_mask.volume(), start, dims), s.moving_mask.kind());
    out.fixed_mask = MaskVolume(crop_volume(s.fixed_mask.volume(), start, dims), s.fixed_mask.kind());
    return out;
}

}  // namespace vqreg
