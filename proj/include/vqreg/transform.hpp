#pragma once

#include "vqreg/tensor.hpp"
#include "vqreg/volume.hpp"

namespace vqreg {

enum class Boundary { clamp };
enum class Interpolation { trilinear };
enum class MaskMode { soft, threshold };

struct ResampleSpec {
    Boundary boundary = Boundary::clamp;
    Interpolation interpolation = Interpolation::trilinear;
    MaskMode mask_mode = MaskMode::soft;  // only consulted for MaskVolume inputs
};

/// warped(p) = volume(p + u(p)); u maps fixed-grid positions to moving sampling locations.
Volume3D resample(const Volume3D& volume, const DisplacementField& ddf, const ResampleSpec& spec = {});

/// Soft mode returns a soft mask; threshold mode returns the 0.5-thresholded binary mask.
MaskVolume resample(const MaskVolume& mask, const DisplacementField& ddf, const ResampleSpec& spec = {});

/// Maps a fixed-space point (mm) to the moving-space location (mm) given by the field.
Vec3 warp_point(const Vec3& point_fixed_mm, const DisplacementField& ddf);

/// Trilinear interpolation of the displacement (voxels) at a continuous voxel coordinate.
Vec3 interpolate_displacement(const DisplacementField& ddf, const Vec3& voxel);

/// det(I + ∇u) per voxel; central differences inside, one-sided at the border.
Volume3D jacobian_determinants(const DisplacementField& ddf);

/// Differentiable warping of a multi-channel tensor by a 3-channel displacement tensor.
template <typename T>
Tensor<T> warp(const Tensor<T>& src, const Tensor<T>& ddf);

/// Accumulates into the non-null gradient outputs.
template <typename T>
void warp_backward(const Tensor<T>& src, const Tensor<T>& ddf, const Tensor<T>& grad_out, Tensor<T>* grad_src,
                   Tensor<T>* grad_ddf);

}  // namespace vqreg
