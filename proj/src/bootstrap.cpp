#include "vqreg/bootstrap.hpp"

#include <algorithm>
#include <numeric>
#include <ostream>
#include <random>

#include "vqreg/losses.hpp"
#include "vqreg/metrics.hpp"

namespace vqreg {

void BootstrapConfig::validate() const
{
    if (seg_epochs < 0) throw Error("bootstrap: seg_epochs must be >= 0");
    if (!(seg_lr > 0)) throw Error("bootstrap: seg_lr must be > 0");
    if (seg_images < 1) throw Error("bootstrap: seg_images must be >= 1");
    if (feature_cap < 1) throw Error("bootstrap: feature_cap must be >= 1");
    if (feature_layer != "head" && feature_layer != "deepest")
        throw Error("bootstrap: feature_layer must be 'head' or 'deepest'");
}

SegModel<float> train_segmentation(const NetworkConfig& net, const BootstrapConfig& cfg,
                                   const std::vector<LabeledImage>& images, uint64_t seed, SegTrainLog* log,
                                   std::ostream* progress)
{
    cfg.validate();
    if (images.empty()) throw Error("train_segmentation: no images");
    SegModel<float> model(net, seed);
    nn::Adam<float> opt(cfg.seg_lr);
    std::vector<Tensor<float>> inputs, targets;
    for (const LabeledImage& li : images) {
        inputs.push_back(li.image.to_tensor<float>());
        targets.push_back(li.mask.volume().to_tensor<float>());
    }
    std::vector<size_t> order(images.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed ^ 0x5e6ULL);
    const auto params = model.params();
    for (int epoch = 0; epoch < cfg.seg_epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double sum = 0;
        for (size_t i : order) {
            auto fw = model.forward(inputs[i]);
            Tensor<float> grad;
            const double loss = dice_loss(fw.prob, targets[i], &grad);
            if (!std::isfinite(loss)) throw Error("train_segmentation: non-finite Dice loss at epoch " + std::to_string(epoch));
            sum += -loss;
            model.zero_grad();
            model.backward(fw, grad);
            opt.step(params);
        }
        const double mean = sum / double(images.size());
        if (log) log->epoch_dice.push_back(mean);
        if (progress && (epoch + 1) % 10 == 0)
            *progress << "seg epoch " << epoch + 1 << "/" << cfg.seg_epochs << " soft dice " << mean << std::endl;
    }
    return model;
}

double segmentation_dice(const SegModel<float>& model, const std::vector<LabeledImage>& images)
{
    if (images.empty()) throw Error("segmentation_dice: no images");
    double sum = 0;
    for (const LabeledImage& li : images) {
        const auto [soft, bottleneck] = seg_forward(model, li.image);
        sum += dsc(soft.thresholded(), li.mask.thresholded());
    }
    return sum / double(images.size());
}

FeatureSet harvest_features(const SegModel<float>& model, const std::vector<Volume3D>& images, int64_t cap,
                            uint64_t seed, const std::string& layer)
{
    if (images.empty()) throw Error("harvest_features: no images");
    if (cap < 1) throw Error("harvest_features: cap must be >= 1");
    if (layer != "head" && layer != "deepest") throw Error("harvest_features: unknown layer '" + layer + "'");
    FeatureSet all;
    for (const Volume3D& img : images) {
        auto fw = model.forward(img.to_tensor<float>());
        const Tensor<float>& f = layer == "head" ? fw.bottleneck : fw.stages.back();
        if (all.C == 0) all.C = f.channels();
        const int64_t n = f.dims().voxels();
        for (int64_t p = 0; p < n; ++p)
            for (int64_t c = 0; c < f.channels(); ++c) all.data.push_back(double(f.at(c, p)));
    }
    all.total_before_cap = all.count();
    if (all.count() <= cap) return all;

    std::vector<int64_t> idx(static_cast<size_t>(all.count()));
    std::iota(idx.begin(), idx.end(), 0);
    std::vector<int64_t> keep;
    keep.reserve(static_cast<size_t>(cap));
    std::mt19937_64 rng(seed);
    std::sample(idx.begin(), idx.end(), std::back_inserter(keep), cap, rng);
    FeatureSet out;
    out.C = all.C;
    out.total_before_cap = all.total_before_cap;
    out.data.reserve(static_cast<size_t>(cap * all.C));
    for (int64_t i : keep)
        out.data.insert(out.data.end(), all.data.begin() + i * all.C, all.data.begin() + (i + 1) * all.C);
    return out;
}

Codebook init_collaborative(const FeatureSet& features, int64_t K, uint64_t seed)
{
    if (features.count() < K)
        throw Error("init_collaborative: need at least K=" + std::to_string(K) + " feature vectors, got " +
                    std::to_string(features.count()));
    const KMeansResult km = kmeans(features.data, features.C, K, seed);
    Codebook cb;
    cb.K = K;
    cb.C = features.C;
    cb.codes = km.centers;
    cb.init_kind = CodebookInit::kmeans;
    cb.name = QuantizerName::collaborative;
    cb.validate();
    return cb;
}

double mean_quantization_error(const FeatureSet& features, const Codebook& cb)
{
    if (features.C != cb.C) throw Error("mean_quantization_error: channel mismatch");
    if (features.count() == 0) throw Error("mean_quantization_error: no features");
    return quantization_error(features.data, features.C, cb.codes) / double(features.count());
}

}  // namespace vqreg
