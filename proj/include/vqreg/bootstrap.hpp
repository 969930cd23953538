#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "vqreg/regnet.hpp"
#include "vqreg/vq.hpp"

namespace vqreg {

struct BootstrapConfig {
    int seg_epochs = 100;
    double seg_lr = 1e-3;
    int seg_images = 20;
    int64_t feature_cap = 100000;
    /// "head": the C_c-channel map feeding the decoder; "deepest": the last encoder stage.
    std::string feature_layer = "head";

    void validate() const;
};

struct LabeledImage {
    Volume3D image;
    MaskVolume mask;
};

struct SegTrainLog {
    std::vector<double> epoch_dice;  // mean soft Dice over the training images per epoch
};

/// Dice-loss training, one image per Adam step, image order reshuffled every epoch.
SegModel<float> train_segmentation(const NetworkConfig& net, const BootstrapConfig& cfg,
                                   const std::vector<LabeledImage>& images, uint64_t seed, SegTrainLog* log = nullptr,
                                   std::ostream* progress = nullptr);

/// Mean hard (0.5) Dice of the model's masks against the reference masks.
double segmentation_dice(const SegModel<float>& model, const std::vector<LabeledImage>& images);

/// Row-major N × C feature vectors.
struct FeatureSet {
    int64_t C = 0;
    std::vector<double> data;
    int64_t total_before_cap = 0;

    [[nodiscard]] int64_t count() const { return C ? int64_t(data.size()) / C : 0; }
};

/// Every spatial position of the chosen feature map across all images, uniformly subsampled
/// to at most `cap` vectors (order preserved) when there are more.
FeatureSet harvest_features(const SegModel<float>& model, const std::vector<Volume3D>& images, int64_t cap,
                            uint64_t seed, const std::string& layer = "head");

/// K-means centres of the features as the collaborative codebook.
Codebook init_collaborative(const FeatureSet& features, int64_t K, uint64_t seed);

/// Mean squared distance from each vector to its nearest code.
double mean_quantization_error(const FeatureSet& features, const Codebook& cb);

}  // namespace vqreg
