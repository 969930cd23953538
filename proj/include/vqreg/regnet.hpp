#pragma once

#include <string>
#include <utility>
#include <vector>

#include "vqreg/nn.hpp"
#include "vqreg/volume.hpp"

namespace vqreg {

/// Which of the three quantizers are active. The empty set is the plain U-Net baseline.
struct QuantizerSet {
    bool vanilla = false;
    bool hierarchical = false;
    bool collaborative = false;

    /// "none", or '+'-joined initials in v, h, c order (e.g. "v+h+c").
    [[nodiscard]] std::string label() const;
    static QuantizerSet parse(const std::string& label);
    static QuantizerSet all() { return {true, true, true}; }
    friend bool operator==(const QuantizerSet&, const QuantizerSet&) = default;
};

struct NetworkConfig {
    std::vector<int64_t> channels{8, 16, 32, 64};  // one entry per encoder stage
    int convs_per_block = 3;
    int64_t K_v = 64, K_h = 64, K_c = 32;
    int64_t C_v = 64, C_h = 32, C_c = 64;
    QuantizerSet enabled{};
    Dims input_dims{32, 32, 24};
    double beta = 0.25;

    /// CPU-sized defaults.
    static NetworkConfig desk();
    /// Full-size channels and vocabularies; hierarchical channels follow the third stage.
    static NetworkConfig paper();

    [[nodiscard]] int stages() const { return static_cast<int>(channels.size()); }
    /// Input dims rounded up to a multiple of 2^(stages-1); inputs are edge-padded to this grid
    /// and the field is cropped back.
    [[nodiscard]] Dims working_dims() const;
    [[nodiscard]] Dims bottleneck_dims() const;
    void validate() const;

    [[nodiscard]] std::vector<std::pair<std::string, std::string>> to_kv() const;
    static NetworkConfig from_kv(const std::vector<std::pair<std::string, std::string>>& kv);
    friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

struct QuantLosses {
    double vanilla = 0;
    double hierarchical = 0;
    double collaborative = 0;
    [[nodiscard]] double sum() const { return vanilla + hierarchical + collaborative; }
};

/// Stack of residual blocks; block 0 keeps resolution, every later block halves it.
template <typename T>
class Encoder {
public:
    using Cache = std::vector<typename nn::ResBlock<T>::Cache>;

    Encoder() = default;
    Encoder(const std::string& name, int64_t in_ch, const std::vector<int64_t>& channels, int convs_per_block);
    void init(std::mt19937_64& rng);
    /// Returns every stage output E1..ES.
    std::vector<Tensor<T>> forward(const Tensor<T>& x, Cache& cache) const;
    /// grads[s] is the total gradient arriving at stage s output; consumed in place.
    void backward(Cache& cache, std::vector<Tensor<T>>& grads);
    void collect(nn::ParamList<T>& out);

private:
    std::vector<nn::ResBlock<T>> blocks_;
};

/// Mirror of the encoder: per level, nearest 2× upsampling → CNR, concat skip → CNR,
/// then a final 3×3×3 convolution.
template <typename T>
class Decoder {
public:
    struct Cache {
        std::vector<Dims> in_dims;
        std::vector<typename nn::ConvNormRelu<T>::Cache> up, merge;
        std::vector<int64_t> up_channels;
        Tensor<T> final_in;
    };

    Decoder() = default;
    Decoder(const std::string& name, int64_t bottleneck_ch, const std::vector<int64_t>& channels, int64_t out_ch);
    void init(std::mt19937_64& rng, bool zero_final);

    /// skips[l] is the level-l skip tensor (resolution of encoder stage l).
    Tensor<T> forward(const Tensor<T>& bottleneck, const std::vector<const Tensor<T>*>& skips, Cache& c) const;
    void backward(Cache& c, const Tensor<T>& grad_out, Tensor<T>& grad_bottleneck, std::vector<Tensor<T>>& grad_skips);
    void collect(nn::ParamList<T>& out);

private:
    std::vector<nn::ConvNormRelu<T>> up_;
    std::vector<nn::ConvNormRelu<T>> merge_;
    nn::Conv3d<T> final_;
};

/// Registration network: moving/fixed are channel-concatenated into the encoder; the
/// deepest stage feeds two heads (collaborative, vanilla) whose quantized outputs are
/// concatenated as the bottleneck; the second-deepest stage is quantized (hierarchical)
/// and summed with the projected, trilinearly upsampled deepest stage to form its skip.
template <typename T>
class RegModel {
public:
    struct Forward {
        typename Encoder<T>::Cache enc;
        std::vector<Tensor<T>> stages;
        Tensor<T> head_c, head_v, proj;
        typename nn::Quantizer<T>::Cache qc, qv, qh;
        Tensor<T> skip_merged;
        typename Decoder<T>::Cache dec;
        Tensor<T> ddf;  // 3 × input dims, voxel units
        QuantLosses losses;
    };

    RegModel(NetworkConfig cfg, uint64_t seed);

    [[nodiscard]] Forward forward(const Tensor<T>& moving, const Tensor<T>& fixed) const;
    [[nodiscard]] Forward forward(const RegistrationSample& s) const;
    /// Back-propagates d(loss)/d(ddf); quantization losses enter with weight `quant_scale`.
    void backward(Forward& fw, const Tensor<T>& grad_ddf, T quant_scale);

    nn::ParamList<T> params();
    void zero_grad();
    [[nodiscard]] int64_t parameter_count();

    nn::Quantizer<T>& quantizer(QuantizerName n);
    [[nodiscard]] const nn::Quantizer<T>& quantizer(QuantizerName n) const;
    [[nodiscard]] const NetworkConfig& config() const { return cfg_; }

    /// Re-initializes the final layer with small random weights (tests need a non-identity field).
    void randomize_output_layer(uint64_t seed, double scale);

private:
    NetworkConfig cfg_;
    Encoder<T> encoder_;
    nn::Conv3d<T> head_c_, head_v_, hier_proj_;
    nn::Quantizer<T> q_v_, q_h_, q_c_;
    Decoder<T> decoder_;
};

/// Companion segmentation U-Net; its bottleneck (C_c channels) seeds the collaborative codebook.
template <typename T>
class SegModel {
public:
    struct Forward {
        typename Encoder<T>::Cache enc;
        std::vector<Tensor<T>> stages;
        Tensor<T> bottleneck;
        typename Decoder<T>::Cache dec;
        Tensor<T> logits;
        Tensor<T> prob;
    };

    SegModel(NetworkConfig cfg, uint64_t seed);

    [[nodiscard]] Forward forward(const Tensor<T>& image) const;
    /// grad_prob: d(loss)/d(sigmoid output).
    void backward(Forward& fw, const Tensor<T>& grad_prob);

    nn::ParamList<T> params();
    void zero_grad();
    [[nodiscard]] const NetworkConfig& config() const { return cfg_; }

private:
    NetworkConfig cfg_;
    Encoder<T> encoder_;
    nn::Conv3d<T> head_;
    Decoder<T> decoder_;
};

/// seg_forward: soft mask in [0,1] and the C_c-channel bottleneck feature map.
template <typename T>
std::pair<MaskVolume, Tensor<T>> seg_forward(const SegModel<T>& model, const Volume3D& image);

}  // namespace vqreg
