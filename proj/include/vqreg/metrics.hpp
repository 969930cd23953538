#pragma once

#include <string>
#include <utility>
#include <vector>

#include "vqreg/volume.hpp"

namespace vqreg {

/// 2|A∩B| / (|A| + |B|) on binary masks; 1 when both are empty.
double dsc(const MaskVolume& a, const MaskVolume& b);

/// Distance in mm between the intensity-weighted centroids of two non-empty masks.
double centroid_distance(const MaskVolume& a, const MaskVolume& b);
Vec3 mask_centroid_mm(const MaskVolume& m);

double mse(const Volume3D& a, const Volume3D& b);

/// Per-landmark ‖warp_point(fixed) − moving‖ in mm, paired by label order.
std::vector<double> tre(const RegistrationSample& sample, const DisplacementField& ddf);

/// Per-voxel flag (1 = det(I + ∇u) ≤ 0) on interior voxels; border voxels are 0.
Volume3D folding_map(const DisplacementField& ddf);
/// Fraction of interior voxels with a non-positive Jacobian determinant.
double neg_jacobian_fraction(const DisplacementField& ddf);

struct EvalRow {
    std::string id;
    double dsc = 0;
    double cd = 0;    // mm
    double mse = 0;
    double tre = 0;   // mean over the sample's landmarks, mm
    double neg_jac = 0;
};

/// Metrics for one pair under a field: the moving mask is warped and thresholded at 0.5.
EvalRow evaluate_pair(const RegistrationSample& sample, const DisplacementField& ddf);

struct Summary {
    double mean = 0;
    double std = 0;  // population
};
Summary summarize(const std::vector<double>& values);

struct EvalReport {
    std::string label;
    std::vector<EvalRow> rows;
    std::vector<std::pair<std::string, std::string>> metadata;
    std::string config_echo;

    [[nodiscard]] std::vector<double> column(const std::string& metric) const;
    [[nodiscard]] Summary aggregate(const std::string& metric) const;
    /// Header comment lines (metadata and config) followed by one row per sample.
    [[nodiscard]] std::string to_csv() const;
};

inline const std::vector<std::string> kMetricNames{"dsc", "cd", "mse", "tre", "neg_jac"};

/// "0.881±0.025" style.
std::string format_mean_std(const Summary& s, int precision);

/// Fixed-width text table with one line per report and DSC, CD, MSE, TRE, NegJac columns.
std::string format_table(const std::vector<EvalReport>& reports);

/// Two-sided p-value of the paired t-test on a − b.
double paired_t_test(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace vqreg
