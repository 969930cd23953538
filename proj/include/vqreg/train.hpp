#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "vqreg/bootstrap.hpp"
#include "vqreg/config.hpp"
#include "vqreg/losses.hpp"
#include "vqreg/metrics.hpp"
#include "vqreg/regnet.hpp"
#include "vqreg/synth.hpp"

namespace vqreg {

struct DataConfig {
    int pairs = 50;
    uint64_t base_seed = 1000;
    SynthParams synth;
    double train_fraction = 0.7;
    double val_fraction = 0.1;
    /// Directory written by `synth-data`; empty means generate in memory.
    std::string dir;
};

struct OptimConfig {
    double lr = 1e-4;
    int batch_size = 4;
    int epochs = 1000;
};

struct TrainConfig {
    std::string profile = "desk";
    uint64_t seed = 1;
    std::vector<uint64_t> seeds{1, 2, 3};
    /// Training pairs scored each epoch for the train curve (0 = all).
    int train_eval_pairs = 10;
    NetworkConfig network;
    LossWeights loss;
    OptimConfig optim;
    DataConfig data;
    BootstrapConfig bootstrap;
    /// Codebook file for the collaborative quantizer; empty keeps the random init.
    std::string init_collaborative;

    static TrainConfig desk();
    static TrainConfig paper();
    static TrainConfig profile_defaults(const std::string& name);
    /// Starts from the profile named in [run] (desk if absent) and applies every key.
    static TrainConfig from_doc(const ConfigDoc& doc);
    [[nodiscard]] ConfigDoc to_doc() const;
    [[nodiscard]] std::string echo() const { return to_doc().dump(); }
    void validate() const;
};

struct DataSplit {
    std::vector<RegistrationSample> train, val, test;
};

/// Subjects are shuffled by the data seed and cut into train/val/test; each subject's pair
/// lands in exactly one part.
DataSplit load_split(const DataConfig& cfg);
std::vector<RegistrationSample> load_pairs(const DataConfig& cfg);

/// One sub-directory per pair plus a manifest carrying the config echo.
void write_dataset(const std::filesystem::path& dir, const DataConfig& cfg, const std::string& config_echo);

// ---------------------------------------------------------------- checkpoints

struct NamedArray {
    std::string name;
    std::vector<int64_t> shape;
    std::vector<float> values;
};

struct Checkpoint {
    std::string kind;         // "registration" or "segmentation"
    std::string config_text;  // full config echo
    KeyValues meta;
    std::vector<NamedArray> params;
};

void save_checkpoint(const std::filesystem::path& path, const std::string& kind, const std::string& config_echo,
                     const KeyValues& meta, const nn::ParamList<float>& params);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Copies values by name; every parameter must be present with a matching shape.
void assign_params(const Checkpoint& ck, const nn::ParamList<float>& params);
RegModel<float> model_from_checkpoint(const Checkpoint& ck);
SegModel<float> seg_model_from_checkpoint(const Checkpoint& ck);
/// Throws when the network sections differ.
void require_same_network(const NetworkConfig& checkpoint, const NetworkConfig& requested);

// ---------------------------------------------------------------- training and inference

struct EpochStats {
    int epoch = 0;
    LossTerms mean_terms;
    double train_dsc = 0;
    double val_dsc = 0;
};

struct TrainResult {
    std::vector<EpochStats> epochs;
    int best_epoch = -1;
    double best_val_dsc = -1;
    double unregistered_val_dsc = 0;
    std::filesystem::path best_checkpoint;
    double seconds = 0;
};

/// Loads the collaborative codebook named in the config, if any.
void apply_codebook_init(const TrainConfig& cfg, RegModel<float>& model);

/// Minimizes the weighted objective with Adam. Writes config.ini, loss_log.csv, curves.csv,
/// usage.csv, best.ckpt and final.ckpt into `out_dir`.
TrainResult train(const TrainConfig& cfg, const DataSplit& data, const std::filesystem::path& out_dir,
                  std::ostream* progress = nullptr);

DisplacementField predict_ddf(const RegModel<float>& model, const Volume3D& moving, const Volume3D& fixed);

/// Mean hard Dice of warped moving masks against fixed masks.
double mean_dsc(const RegModel<float>& model, const std::vector<RegistrationSample>& samples);

EvalReport evaluate_model(const RegModel<float>& model, const std::vector<RegistrationSample>& samples,
                          const std::string& label, const std::string& config_echo);
/// Same metrics under the zero field.
EvalReport evaluate_unregistered(const std::vector<RegistrationSample>& samples, const std::string& config_echo);

/// Segmentation training on the split's training images, then K-means on harvested features.
Codebook bootstrap_collaborative(const TrainConfig& cfg, const DataSplit& data, uint64_t seed,
                                 std::ostream* progress = nullptr, SegModel<float>* model_out = nullptr);
std::vector<LabeledImage> training_images(const DataSplit& data, int count);

}  // namespace vqreg
