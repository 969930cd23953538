#pragma once

#include <string>
#include <vector>

#include "vqreg/common.hpp"
#include "vqreg/tensor.hpp"

namespace vqreg {

/// Voxel grid placement in physical space (mm).
struct Geometry {
    Dims dims{};
    Vec3 spacing{1.0, 1.0, 1.0};
    Vec3 origin{0.0, 0.0, 0.0};

    void validate() const;
    [[nodiscard]] Vec3 voxel_to_mm(const Vec3& v) const;
    [[nodiscard]] Vec3 mm_to_voxel(const Vec3& p) const;
    [[nodiscard]] bool contains_voxel_coord(const Vec3& v) const;

    friend bool operator==(const Geometry&, const Geometry&) = default;
};

/// Scalar image on a 3D grid, values indexed (x, y, z).
class Volume3D {
public:
    Volume3D() = default;
    explicit Volume3D(Geometry geom, double fill = 0.0);
    Volume3D(Geometry geom, std::vector<double> data);

    [[nodiscard]] const Geometry& geometry() const { return geom_; }
    [[nodiscard]] const Dims& dims() const { return geom_.dims; }
    [[nodiscard]] const Vec3& spacing() const { return geom_.spacing; }
    [[nodiscard]] const Vec3& origin() const { return geom_.origin; }
    [[nodiscard]] int64_t voxels() const { return geom_.dims.voxels(); }

    double& operator()(int64_t i, int64_t j, int64_t k) { return data_[static_cast<size_t>(geom_.dims.index(i, j, k))]; }
    double operator()(int64_t i, int64_t j, int64_t k) const { return data_[static_cast<size_t>(geom_.dims.index(i, j, k))]; }
    double& operator[](int64_t p) { return data_[static_cast<size_t>(p)]; }
    double operator[](int64_t p) const { return data_[static_cast<size_t>(p)]; }

    [[nodiscard]] std::vector<double>& values() { return data_; }
    [[nodiscard]] const std::vector<double>& values() const { return data_; }

    /// Single-channel tensor view copy for the network.
    template <typename T>
    [[nodiscard]] Tensor<T> to_tensor() const
    {
        Tensor<T> t(1, geom_.dims);
        for (int64_t p = 0; p < voxels(); ++p) t[p] = static_cast<T>(data_[static_cast<size_t>(p)]);
        return t;
    }

private:
    Geometry geom_{};
    std::vector<double> data_;
};

enum class MaskKind { binary, soft };

/// Segmentation map. Binary masks hold exactly 0 or 1; soft masks lie in [0, 1].
class MaskVolume {
public:
    MaskVolume() = default;
    MaskVolume(Volume3D values, MaskKind kind);

    [[nodiscard]] const Volume3D& volume() const { return vol_; }
    [[nodiscard]] MaskKind kind() const { return kind_; }
    [[nodiscard]] const Dims& dims() const { return vol_.dims(); }
    [[nodiscard]] const Geometry& geometry() const { return vol_.geometry(); }
    [[nodiscard]] int64_t voxels() const { return vol_.voxels(); }
    double operator[](int64_t p) const { return vol_[p]; }

    /// value > 0.5 → 1, else 0.
    [[nodiscard]] MaskVolume thresholded() const;
    [[nodiscard]] int64_t count_foreground() const;

private:
    Volume3D vol_;
    MaskKind kind_ = MaskKind::binary;
};

/// Named points in physical (mm) space.
struct LandmarkSet {
    std::vector<Vec3> points;
    std::vector<std::string> labels;

    [[nodiscard]] size_t size() const { return points.size(); }
    void validate() const;
};

/// Per-voxel displacement in voxel units on the fixed grid; channel 0/1/2 = x/y/z.
struct DisplacementField {
    Tensor<double> data;
    Vec3 spacing{1.0, 1.0, 1.0};
    Vec3 origin{0.0, 0.0, 0.0};

    DisplacementField() = default;
    explicit DisplacementField(const Geometry& g) : data(3, g.dims), spacing(g.spacing), origin(g.origin) {}

    [[nodiscard]] const Dims& dims() const { return data.dims(); }
    [[nodiscard]] Geometry geometry() const { return {data.dims(), spacing, origin}; }
    void validate() const;
};

struct RegistrationSample {
    Volume3D moving;
    Volume3D fixed;
    MaskVolume moving_mask;
    MaskVolume fixed_mask;
    LandmarkSet moving_landmarks;
    LandmarkSet fixed_landmarks;
    std::string subject_id;

    void validate() const;
};

/// Crops every volume of a sample to a box of `dims` centred on the fixed gland mask
/// centroid (shifted inward at borders). Landmarks are kept in mm.
RegistrationSample crop_to_gland(const RegistrationSample& s, const Dims& dims);

}  // namespace vqreg
