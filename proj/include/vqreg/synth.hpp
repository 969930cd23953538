#pragma once

#include <cstdint>
#include <vector>

#include "vqreg/volume.hpp"

namespace vqreg {

struct SynthParams {
    Dims dims{32, 32, 24};
    double deform_amplitude_mm = 2.0;
    Vec3 spacing{1.0, 1.0, 1.0};
    bool noise = true;
    double noise_sigma = 0.02;
    /// Treat the bump field as a stationary velocity and integrate it over unit time instead
    /// of adding it directly. The result stays invertible at large amplitudes.
    bool diffeomorphic = false;
};

/// A generated pair plus the deformation it was built from (voxel units, fixed grid).
struct SynthSample {
    RegistrationSample sample;
    DisplacementField ground_truth;
};

/// Deterministic phantom pair: an ellipsoidal gland with texture and 3–8 internal blobs
/// (landmarks at their centres). The fixed image is the moving phantom deformed by a sum of
/// Gaussian displacement bumps whose peak magnitude equals `deform_amplitude_mm` (in
/// diffeomorphic mode the peak applies to the velocity field).
SynthSample synth_sample(uint64_t seed, const SynthParams& params);
SynthSample synth_sample(uint64_t seed, const Dims& dims, double deform_amplitude_mm);

/// `count` samples with seeds base_seed, base_seed + 1, ...
std::vector<SynthSample> synth_dataset(int count, uint64_t base_seed, const SynthParams& params);

}  // namespace vqreg
