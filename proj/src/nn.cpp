#include "vqreg/nn.hpp"

#include <cmath>
#include <numeric>

namespace vqreg::nn {

template <typename T>
Param<T>::Param(std::string n, std::vector<int64_t> s) : name(std::move(n)), shape(std::move(s))
{
    const int64_t count = std::accumulate(shape.begin(), shape.end(), int64_t(1), std::multiplies<>());
    value.assign(size_t(count), T(0));
    grad.assign(size_t(count), T(0));
}

template <typename T>
Conv3d<T>::Conv3d(const std::string& name, int64_t in_ch, int64_t out_ch, int kernel, int stride, bool with_bias)
    : weight(name + ".weight", {out_ch, in_ch, kernel, kernel, kernel}),
      bias(name + ".bias", {with_bias ? out_ch : 0}),
      in_ch_(in_ch),
      out_ch_(out_ch),
      kernel_(kernel),
      stride_(stride),
      has_bias_(with_bias)
{
    shape(Dims{1, 1, 1}).validate();
}

template <typename T>
void Conv3d<T>::init(std::mt19937_64& rng, bool zero)
{
    std::fill(bias.value.begin(), bias.value.end(), T(0));
    if (zero) {
        std::fill(weight.value.begin(), weight.value.end(), T(0));
        return;
    }
    const double fan_in = double(in_ch_) * kernel_ * kernel_ * kernel_;
    std::normal_distribution<double> n(0.0, std::sqrt(2.0 / fan_in));
    for (T& w : weight.value) w = T(n(rng));
}

template <typename T>
kernels::ConvShape Conv3d<T>::shape(const Dims& in_dims) const
{
    return {in_ch_, out_ch_, kernel_, stride_, in_dims};
}

template <typename T>
Tensor<T> Conv3d<T>::forward(const Tensor<T>& x) const
{
    if (x.channels() != in_ch_)
        throw Error(weight.name + ": expected " + std::to_string(in_ch_) + " input channels, got " +
                    std::to_string(x.channels()));
    const auto s = shape(x.dims());
    Tensor<T> out(out_ch_, s.out_dims());
    kernels::conv3d_forward<T>(s, x.data(), weight.value.data(), has_bias_ ? bias.value.data() : nullptr, out.data());
    return out;
}

template <typename T>
Tensor<T> Conv3d<T>::backward(const Tensor<T>& x, const Tensor<T>& grad_out, bool need_input_grad)
{
    const auto s = shape(x.dims());
    Tensor<T> gin;
    if (need_input_grad) gin = Tensor<T>(in_ch_, x.dims());
    kernels::conv3d_backward<T>(s, x.data(), weight.value.data(), grad_out.data(), need_input_grad ? gin.data() : nullptr,
                                weight.grad.data(), has_bias_ ? bias.grad.data() : nullptr);
    return gin;
}

template <typename T>
InstanceNorm<T>::InstanceNorm(const std::string& name, int64_t channels)
    : gamma(name + ".gamma", {channels}), beta(name + ".beta", {channels})
{
    std::fill(gamma.value.begin(), gamma.value.end(), T(1));
}

template <typename T>
Tensor<T> InstanceNorm<T>::forward(const Tensor<T>& x, NormCache<T>& cache) const
{
    Tensor<T> out(x.channels(), x.dims());
    cache.mean.resize(size_t(x.channels()));
    cache.inv_std.resize(size_t(x.channels()));
    kernels::instance_norm_forward<T>(x.channels(), x.voxels(), x.data(), gamma.value.data(), beta.value.data(), eps,
                                      out.data(), cache.mean.data(), cache.inv_std.data());
    return out;
}

template <typename T>
Tensor<T> InstanceNorm<T>::backward(const Tensor<T>& x, const NormCache<T>& cache, const Tensor<T>& grad_out)
{
    Tensor<T> gin(x.channels(), x.dims());
    kernels::instance_norm_backward<T>(x.channels(), x.voxels(), x.data(), gamma.value.data(), cache.mean.data(),
                                       cache.inv_std.data(), grad_out.data(), gin.data(), gamma.grad.data(),
                                       beta.grad.data());
    return gin;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x)
{
    Tensor<T> out(x.channels(), x.dims());
    kernels::relu_forward<T>(x.span(), out.span());
    return out;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& out, const Tensor<T>& grad_out)
{
    Tensor<T> g(out.channels(), out.dims());
    kernels::relu_backward<T>(out.span(), grad_out.span(), g.span());
    return g;
}

template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& x)
{
    Tensor<T> out(x.channels(), x.dims().doubled());
    kernels::upsample_nearest_forward<T>(x.channels(), x.dims(), x.data(), out.data());
    return out;
}

template <typename T>
Tensor<T> upsample_nearest_backward(const Tensor<T>& grad_out, const Dims& in_dims)
{
    Tensor<T> g(grad_out.channels(), in_dims);
    kernels::upsample_nearest_backward<T>(grad_out.channels(), in_dims, grad_out.data(), g.data());
    return g;
}

template <typename T>
Tensor<T> upsample_trilinear(const Tensor<T>& x)
{
    Tensor<T> out(x.channels(), x.dims().doubled());
    kernels::upsample_trilinear_forward<T>(x.channels(), x.dims(), x.data(), out.data());
    return out;
}

template <typename T>
Tensor<T> upsample_trilinear_backward(const Tensor<T>& grad_out, const Dims& in_dims)
{
    Tensor<T> g(grad_out.channels(), in_dims);
    kernels::upsample_trilinear_backward<T>(grad_out.channels(), in_dims, grad_out.data(), g.data());
    return g;
}

template <typename T>
ConvNormRelu<T>::ConvNormRelu(const std::string& name, int64_t in_ch, int64_t out_ch, int stride)
    : conv_(name + ".conv", in_ch, out_ch, 3, stride, false), norm_(name + ".norm", out_ch)
{
}

template <typename T>
Tensor<T> ConvNormRelu<T>::forward(const Tensor<T>& x, Cache& c) const
{
    c.x = x;
    c.conv = conv_.forward(x);
    c.out = relu(norm_.forward(c.conv, c.norm));
    return c.out;
}

template <typename T>
Tensor<T> ConvNormRelu<T>::backward(Cache& c, const Tensor<T>& grad_out)
{
    Tensor<T> g = relu_backward(c.out, grad_out);
    g = norm_.backward(c.conv, c.norm, g);
    return conv_.backward(c.x, g);
}

template <typename T>
ResBlock<T>::ResBlock(const std::string& name, int64_t in_ch, int64_t out_ch, int stride, int convs)
    : convs_(convs),
      head_(name + ".conv1", in_ch, out_ch, stride),
      branch_conv_(name + (convs == 3 ? ".conv3" : ".conv2"), out_ch, out_ch, 3, 1, false),
      branch_norm_(name + (convs == 3 ? ".norm3" : ".norm2"), out_ch)
{
    if (convs != 2 && convs != 3) throw Error("ResBlock: convs per block must be 2 or 3");
    if (convs == 3) mid_ = ConvNormRelu<T>(name + ".conv2", out_ch, out_ch, 1);
}

template <typename T>
void ResBlock<T>::init(std::mt19937_64& rng)
{
    head_.init(rng);
    if (convs_ == 3) mid_.init(rng);
    branch_conv_.init(rng);
}

template <typename T>
Tensor<T> ResBlock<T>::forward(const Tensor<T>& x, Cache& c) const
{
    Tensor<T> h = head_.forward(x, c.head);
    c.branch_in = convs_ == 3 ? mid_.forward(h, c.mid) : h;
    c.branch_conv = branch_conv_.forward(c.branch_in);
    c.branch_norm = branch_norm_.forward(c.branch_conv, c.branch_nc);
    Tensor<T> sum = h;
    sum += c.branch_norm;
    c.out = relu(sum);
    return c.out;
}

template <typename T>
Tensor<T> ResBlock<T>::backward(Cache& c, const Tensor<T>& grad_out)
{
    Tensor<T> g_sum = relu_backward(c.out, grad_out);
    Tensor<T> g = branch_norm_.backward(c.branch_conv, c.branch_nc, g_sum);
    g = branch_conv_.backward(c.branch_in, g);
    if (convs_ == 3) g = mid_.backward(c.mid, g);
    g += g_sum;
    return head_.backward(c.head, g);
}

template <typename T>
void ResBlock<T>::collect(ParamList<T>& out)
{
    head_.collect(out);
    if (convs_ == 3) mid_.collect(out);
    branch_conv_.collect(out);
    branch_norm_.collect(out);
}

template <typename T>
Quantizer<T>::Quantizer(QuantizerName name, int64_t K, int64_t C, T beta, bool enabled)
    : codes("codebook." + to_string(name), {K, C}), name_(name), K_(K), C_(C), beta_(beta), enabled_(enabled)
{
    if (K < 1 || C < 1) throw Error("Quantizer: K and C must be >= 1");
}

template <typename T>
void Quantizer<T>::init_random(uint64_t seed)
{
    load(random_codebook(K_, C_, name_, seed));
}

template <typename T>
void Quantizer<T>::load(const Codebook& cb)
{
    cb.validate();
    if (cb.K != K_ || cb.C != C_)
        throw Error("Quantizer " + to_string(name_) + ": codebook is " + std::to_string(cb.K) + "x" +
                    std::to_string(cb.C) + ", expected " + std::to_string(K_) + "x" + std::to_string(C_));
    for (size_t n = 0; n < cb.codes.size(); ++n) codes.value[n] = T(cb.codes[n]);
    init_kind_ = cb.init_kind;
}

template <typename T>
Codebook Quantizer<T>::export_codebook() const
{
    Codebook cb{K_, C_, std::vector<double>(codes.value.begin(), codes.value.end()), init_kind_, name_};
    return cb;
}

template <typename T>
Tensor<T> Quantizer<T>::forward(const Tensor<T>& f, Cache& c) const
{
    if (!enabled_) {
        c = Cache{};
        c.loss = T(0);
        return f;
    }
    if (f.channels() != C_)
        throw Error("Quantizer " + to_string(name_) + ": feature channels " + std::to_string(f.channels()) +
                    " differ from codebook channels " + std::to_string(C_));
    if (frozen_) {
        const Cache& b = *frozen_;
        c.features = f;
        c.indices = b.indices;
        c.quantized = Tensor<T>(C_, f.dims());
        Tensor<T> out = f;
        double code_term = 0, commit_term = 0;
        for (int64_t p = 0; p < f.voxels(); ++p) {
            const int64_t k = b.indices[size_t(p)];
            for (int64_t ch = 0; ch < C_; ++ch) {
                const T code = codes.value[size_t(k * C_ + ch)];
                c.quantized.at(ch, p) = code;
                out.at(ch, p) = f.at(ch, p) + (b.quantized.at(ch, p) - b.features.at(ch, p));
                code_term += double(b.features.at(ch, p) - code) * double(b.features.at(ch, p) - code);
                commit_term += double(f.at(ch, p) - b.quantized.at(ch, p)) * double(f.at(ch, p) - b.quantized.at(ch, p));
            }
        }
        c.loss = T(code_term + double(beta_) * commit_term);
        return out;
    }
    auto r = quantize<T>(f, std::span<const T>(codes.value), K_, beta_);
    c.features = f;
    c.quantized = std::move(r.quantized);
    c.indices = std::move(r.indices);
    c.loss = r.loss;
    return c.quantized;
}

template <typename T>
Tensor<T> Quantizer<T>::backward(const Cache& c, const Tensor<T>& grad_z, T loss_scale)
{
    Tensor<T> g = straight_through_backward(grad_z);
    if (!enabled_) return g;
    if (frozen_) {
        // commitment against the pinned codes, codebook term against the pinned features
        quant_loss_backward<T>(c.features, frozen_->quantized, c.indices, beta_, loss_scale, g, {});
        Tensor<T> unused(C_, c.features.dims());
        quant_loss_backward<T>(frozen_->features, c.quantized, c.indices, beta_, loss_scale, unused,
                               std::span<T>(codes.grad));
        return g;
    }
    quant_loss_backward<T>(c.features, c.quantized, c.indices, beta_, loss_scale, g, std::span<T>(codes.grad));
    return g;
}

template <typename T>
void Quantizer<T>::freeze(const Cache& c)
{
    if (enabled_) frozen_ = c;
}

template <typename T>
void Adam<T>::step(const ParamList<T>& params)
{
    if (m_.empty()) {
        for (const auto* p : params) {
            m_.emplace_back(size_t(p->numel()), 0.0);
            v_.emplace_back(size_t(p->numel()), 0.0);
        }
    }
    if (m_.size() != params.size()) throw Error("Adam: parameter list changed between steps");
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, double(t_));
    const double c2 = 1.0 - std::pow(b2_, double(t_));
    for (size_t i = 0; i < params.size(); ++i) {
        Param<T>& p = *params[i];
        auto& m = m_[i];
        auto& v = v_[i];
        for (size_t n = 0; n < p.value.size(); ++n) {
            const double g = p.grad[n];
            m[n] = b1_ * m[n] + (1 - b1_) * g;
            v[n] = b2_ * v[n] + (1 - b2_) * g * g;
            p.value[n] -= T(lr_ * (m[n] / c1) / (std::sqrt(v[n] / c2) + eps_));
        }
    }
}

#define VQREG_NN_INSTANTIATE(T)                                                        \
    template struct Param<T>;                                                          \
    template class Conv3d<T>;                                                          \
    template class InstanceNorm<T>;                                                    \
    template class ConvNormRelu<T>;                                                    \
    template class ResBlock<T>;                                                        \
    template class Quantizer<T>;                                                       \
    template class Adam<T>;                                                            \
    template Tensor<T> relu<T>(const Tensor<T>&);                                      \
    template Tensor<T> relu_backward<T>(const Tensor<T>&, const Tensor<T>&);           \
    template Tensor<T> upsample_nearest<T>(const Tensor<T>&);                          \
    template Tensor<T> upsample_nearest_backward<T>(const Tensor<T>&, const Dims&);    \
    template Tensor<T> upsample_trilinear<T>(const Tensor<T>&);                        \
    template Tensor<T> upsample_trilinear_backward<T>(const Tensor<T>&, const Dims&);

VQREG_NN_INSTANTIATE(float)
VQREG_NN_INSTANTIATE(double)

}  // namespace vqreg::nn
