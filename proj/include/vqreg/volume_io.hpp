#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "vqreg/volume.hpp"

namespace vqreg {

enum class DType { f32, f64 };

/// Key=value text header followed by a blank line and a raw little-endian payload.
/// Shared by volumes, displacement fields and codebooks.
struct ArrayFile {
    std::vector<std::pair<std::string, std::string>> header;
    DType dtype = DType::f64;
    std::vector<double> payload;

    [[nodiscard]] const std::string& get(const std::string& key) const;
    [[nodiscard]] bool has(const std::string& key) const;
    void set(const std::string& key, std::string value);
};

void write_array_file(const std::filesystem::path& path, const ArrayFile& file);
/// The payload length is taken from the `count` header key; any byte-size disagreement is an error.
ArrayFile read_array_file(const std::filesystem::path& path);

std::string format_real(double v);
std::string format_vec3(const Vec3& v);
Vec3 parse_vec3(const std::string& s);
Dims parse_dims(const std::string& s);

void save_volume(const std::filesystem::path& path, const Volume3D& v, DType dtype = DType::f32);
Volume3D load_volume(const std::filesystem::path& path);

void save_mask(const std::filesystem::path& path, const MaskVolume& m);
MaskVolume load_mask(const std::filesystem::path& path);

/// Three-channel payload in channel order x, y, z; float64.
void save_ddf(const std::filesystem::path& path, const DisplacementField& ddf);
DisplacementField load_ddf(const std::filesystem::path& path);

/// One line per landmark: label x_mm y_mm z_mm.
void save_landmarks(const std::filesystem::path& path, const LandmarkSet& lm);
LandmarkSet load_landmarks(const std::filesystem::path& path);

/// Minimal uncompressed NIfTI-1 (.nii) reader; rotation is ignored, qoffset becomes the origin.
Volume3D load_nifti(const std::filesystem::path& path);

/// Dispatches on extension: .nii → NIfTI-1, otherwise the native format.
Volume3D load_any_volume(const std::filesystem::path& path);

}  // namespace vqreg
