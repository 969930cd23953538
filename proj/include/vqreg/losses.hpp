#pragma once

#include <string>
#include <utility>
#include <vector>

#include "vqreg/regnet.hpp"
#include "vqreg/tensor.hpp"
#include "vqreg/volume.hpp"

namespace vqreg {

struct LossWeights {
    double quant = 1.0;
    double ssd = 1.0;
    double dice = 1.0;
    double bending = 50.0;
    double beta = 0.25;

    void validate() const;
    [[nodiscard]] std::vector<std::pair<std::string, std::string>> to_kv() const;
    static LossWeights from_kv(const std::vector<std::pair<std::string, std::string>>& kv);
};

/// Every component of one evaluation of the training objective.
struct LossTerms {
    double vanilla = 0, hierarchical = 0, collaborative = 0;
    double ssd = 0, dice = 0, bending = 0;
    double total = 0;
};

constexpr double kDiceEps = 1e-6;

/// Mean squared intensity difference. `grad` (optional) receives d/d(warped), overwritten.
template <typename T>
double ssd_loss(const Tensor<T>& warped, const Tensor<T>& fixed, Tensor<T>* grad = nullptr);

/// −(2Σab + ε) / (Σa + Σb + ε). `grad` (optional) receives d/d(a), overwritten.
template <typename T>
double dice_loss(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>* grad = nullptr);

/// Mean over interior voxels and the 3 channels of
/// u_xx² + u_yy² + u_zz² + 2(u_xy² + u_xz² + u_yz²), central differences in voxel units.
/// `grad` (optional) is accumulated (+=).
template <typename T>
double bending_energy(const Tensor<T>& ddf, Tensor<T>* grad = nullptr);

double ssd_loss(const Volume3D& warped, const Volume3D& fixed);
double dice_loss(const MaskVolume& warped, const MaskVolume& fixed);
double bending_energy(const DisplacementField& ddf);

/// Weighted sum of the components already stored in `terms`; also writes terms.total.
double total_loss(LossTerms& terms, const LossWeights& w);

/// Single-channel tensors of one training pair.
template <typename T>
struct PairTensors {
    Tensor<T> moving, fixed, moving_mask, fixed_mask;
    static PairTensors from(const RegistrationSample& s);
};

/// Full objective for a predicted field: warps image and mask, evaluates every term,
/// and (if `grad_ddf` is given) writes d(total − λQ·quant)/d(ddf). The quantization part
/// of the gradient is handled by the model's backward pass.
template <typename T>
LossTerms registration_objective(const Tensor<T>& ddf, const PairTensors<T>& pair, const QuantLosses& quant,
                                 const LossWeights& w, Tensor<T>* grad_ddf = nullptr);

}  // namespace vqreg
