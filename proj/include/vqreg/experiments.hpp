#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "vqreg/train.hpp"

namespace vqreg {

/// One configuration in a comparison: a quantizer subset, optionally with a K-means
/// collaborative codebook, optionally with a different dictionary size for D^v and D^c.
struct Arm {
    std::string label;
    QuantizerSet quantizers;
    bool kmeans_init = false;
    int64_t dict_size = 0;  // 0 keeps the configured K_v / K_c

    [[nodiscard]] std::string dir_name() const;
};

/// none, v, v+h, v+c, v+h+c, then v+h+c with a randomly initialized collaborative codebook.
std::vector<Arm> ablation_arms();
std::vector<Arm> dict_size_arms(const std::vector<int64_t>& sizes);

struct RunResult {
    uint64_t seed = 0;
    TrainResult train;
    EvalReport test;
    double train_dsc = 0;  // best checkpoint, every training pair
    double test_dsc = 0;
    double test_tre = 0;
    [[nodiscard]] double gap() const { return train_dsc - test_dsc; }
};

struct ArmResult {
    Arm arm;
    std::vector<RunResult> runs;
    [[nodiscard]] Summary test_dsc() const;
    [[nodiscard]] Summary test_tre() const;
    [[nodiscard]] Summary gap() const;
    /// Test rows of every seed, for the mean ± std table.
    [[nodiscard]] EvalReport pooled() const;
};

struct ExperimentResult {
    EvalReport unregistered;
    std::vector<ArmResult> arms;

    [[nodiscard]] const ArmResult& arm(const std::string& label) const;
    /// Metric table (unregistered first, arms in order) followed by per-arm seed means and gaps.
    [[nodiscard]] std::string table() const;
};

/// Trains every arm for every seed in `base.seeds` on the same split. Each finished run is
/// appended to runs.csv and table.txt is rewritten, so a failure keeps the completed rows.
/// A run directory that already holds a finished run with the identical config is reused.
ExperimentResult run_arms(const TrainConfig& base, const std::vector<Arm>& arms, const DataSplit& data,
                          const std::filesystem::path& out_dir, std::ostream* progress = nullptr);

/// Segmentation checkpoint and K-means codebook for a seed, cached under `cache_dir`.
std::filesystem::path cached_collaborative_codebook(const TrainConfig& cfg, const DataSplit& data, uint64_t seed,
                                                    const std::filesystem::path& cache_dir,
                                                    std::ostream* progress = nullptr);

}  // namespace vqreg
