#pragma once

// Layers with explicit forward/backward passes. Layers are immutable during forward:
// activations needed by backward live in per-call cache structs, so a model can run
// inference on several samples concurrently. Parameter gradients accumulate (+=).

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "vqreg/kernels.hpp"
#include "vqreg/tensor.hpp"
#include "vqreg/vq.hpp"

namespace vqreg::nn {

template <typename T>
struct Param {
    std::string name;
    std::vector<int64_t> shape;
    std::vector<T> value;
    std::vector<T> grad;

    Param() = default;
    Param(std::string n, std::vector<int64_t> s);
    [[nodiscard]] int64_t numel() const { return static_cast<int64_t>(value.size()); }
    void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

template <typename T>
using ParamList = std::vector<Param<T>*>;

template <typename T>
class Conv3d {
public:
    Conv3d() = default;
    /// Without bias when `with_bias` is false (a following normalization would cancel it).
    Conv3d(const std::string& name, int64_t in_ch, int64_t out_ch, int kernel, int stride, bool with_bias = true);

    /// He-normal weights and zero bias; `zero` leaves everything at 0.
    void init(std::mt19937_64& rng, bool zero = false);

    [[nodiscard]] Tensor<T> forward(const Tensor<T>& x) const;
    /// Returns the input gradient (empty tensor when `need_input_grad` is false).
    Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& grad_out, bool need_input_grad = true);

    [[nodiscard]] kernels::ConvShape shape(const Dims& in_dims) const;
    void collect(ParamList<T>& out)
    {
        out.push_back(&weight);
        if (has_bias_) out.push_back(&bias);
    }

    Param<T> weight;
    Param<T> bias;

private:
    int64_t in_ch_ = 0, out_ch_ = 0;
    int kernel_ = 3, stride_ = 1;
    bool has_bias_ = true;
};

template <typename T>
struct NormCache {
    std::vector<T> mean;
    std::vector<T> inv_std;
};

template <typename T>
class InstanceNorm {
public:
    InstanceNorm() = default;
    InstanceNorm(const std::string& name, int64_t channels);

    [[nodiscard]] Tensor<T> forward(const Tensor<T>& x, NormCache<T>& cache) const;
    Tensor<T> backward(const Tensor<T>& x, const NormCache<T>& cache, const Tensor<T>& grad_out);
    void collect(ParamList<T>& out) { out.push_back(&gamma); out.push_back(&beta); }

    Param<T> gamma;
    Param<T> beta;
    T eps = T(1e-5);
};

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
/// Gradient through ReLU given its output.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& out, const Tensor<T>& grad_out);

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& x);
template <typename T>
Tensor<T> upsample_nearest_backward(const Tensor<T>& grad_out, const Dims& in_dims);
template <typename T>
Tensor<T> upsample_trilinear(const Tensor<T>& x);
template <typename T>
Tensor<T> upsample_trilinear_backward(const Tensor<T>& grad_out, const Dims& in_dims);

/// conv → instance norm → ReLU
template <typename T>
class ConvNormRelu {
public:
    struct Cache {
        Tensor<T> x, conv, out;
        NormCache<T> norm;
    };

    ConvNormRelu() = default;
    ConvNormRelu(const std::string& name, int64_t in_ch, int64_t out_ch, int stride = 1);
    void init(std::mt19937_64& rng) { conv_.init(rng); }

    [[nodiscard]] Tensor<T> forward(const Tensor<T>& x, Cache& c) const;
    Tensor<T> backward(Cache& c, const Tensor<T>& grad_out);
    void collect(ParamList<T>& out) { conv_.collect(out); norm_.collect(out); }

private:
    Conv3d<T> conv_;
    InstanceNorm<T> norm_;
};

/// Encoder residual block. With 3 convolutions:
///   h = CNR_stride(x); r = relu(norm(conv(h))); out = relu(h + norm(conv(r)))
/// With 2 convolutions the residual branch is a single conv + norm.
template <typename T>
class ResBlock {
public:
    struct Cache {
        typename ConvNormRelu<T>::Cache head, mid;
        Tensor<T> branch_in, branch_conv, branch_norm, out;
        NormCache<T> branch_nc;
    };

    ResBlock() = default;
    ResBlock(const std::string& name, int64_t in_ch, int64_t out_ch, int stride, int convs);
    void init(std::mt19937_64& rng);

    [[nodiscard]] Tensor<T> forward(const Tensor<T>& x, Cache& c) const;
    Tensor<T> backward(Cache& c, const Tensor<T>& grad_out);
    void collect(ParamList<T>& out);

private:
    int convs_ = 3;
    ConvNormRelu<T> head_;
    ConvNormRelu<T> mid_;  // only with 3 convolutions
    Conv3d<T> branch_conv_;
    InstanceNorm<T> branch_norm_;
};

/// Vector-quantization layer: nearest-code replacement with the straight-through
/// estimator and the two-term codebook/commitment loss. A disabled layer is an exact
/// identity with zero loss.
template <typename T>
class Quantizer {
public:
    struct Cache {
        Tensor<T> features;
        Tensor<T> quantized;
        std::vector<int32_t> indices;
        T loss = 0;
    };

    Quantizer() = default;
    Quantizer(QuantizerName name, int64_t K, int64_t C, T beta, bool enabled);

    void init_random(uint64_t seed);
    void load(const Codebook& cb);
    [[nodiscard]] Codebook export_codebook() const;

    [[nodiscard]] Tensor<T> forward(const Tensor<T>& f, Cache& c) const;
    /// grad_z flows straight through; `loss_scale` multiplies this layer's quantization loss.
    Tensor<T> backward(const Cache& c, const Tensor<T>& grad_z, T loss_scale);

    /// Test hook: pin the current code assignment and stop-gradient values so that the
    /// forward pass becomes the smooth surrogate whose exact gradient backward computes.
    void freeze(const Cache& c);
    void unfreeze() { frozen_.reset(); }

    [[nodiscard]] bool enabled() const { return enabled_; }
    [[nodiscard]] QuantizerName name() const { return name_; }
    [[nodiscard]] int64_t K() const { return K_; }
    [[nodiscard]] int64_t C() const { return C_; }
    [[nodiscard]] CodebookInit init_kind() const { return init_kind_; }
    void collect(ParamList<T>& out)
    {
        if (enabled_) out.push_back(&codes);
    }

    Param<T> codes;  // K × C

private:
    QuantizerName name_ = QuantizerName::vanilla;
    int64_t K_ = 1, C_ = 1;
    T beta_ = T(0.25);
    bool enabled_ = false;
    CodebookInit init_kind_ = CodebookInit::random;
    std::optional<Cache> frozen_;
};

/// Adam with bias correction.
template <typename T>
class Adam {
public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps)
    {
    }
    void step(const ParamList<T>& params);
    [[nodiscard]] int64_t steps() const { return t_; }

private:
    double lr_, b1_, b2_, eps_;
    int64_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

}  // namespace vqreg::nn
