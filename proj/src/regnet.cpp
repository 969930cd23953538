#include "vqreg/regnet.hpp"

#include <sstream>

#include "vqreg/volume_io.hpp"

namespace vqreg {

std::string QuantizerSet::label() const
{
    std::string s;
    auto add = [&](bool on, const char* tag) {
        if (!on) return;
        if (!s.empty()) s += '+';
        s += tag;
    };
    add(vanilla, "v");
    add(hierarchical, "h");
    add(collaborative, "c");
    return s.empty() ? "none" : s;
}

QuantizerSet QuantizerSet::parse(const std::string& label)
{
    QuantizerSet q;
    if (label == "none" || label.empty()) return q;
    std::stringstream ss(label);
    std::string tok;
    while (std::getline(ss, tok, '+')) {
        switch (parse_quantizer_name(tok)) {
        case QuantizerName::vanilla: q.vanilla = true; break;
        case QuantizerName::hierarchical: q.hierarchical = true; break;
        case QuantizerName::collaborative: q.collaborative = true; break;
        }
    }
    return q;
}

NetworkConfig NetworkConfig::desk()
{
    return NetworkConfig{};
}

NetworkConfig NetworkConfig::paper()
{
    NetworkConfig c;
    c.channels = {32, 64, 128, 256};
    c.K_v = 1024;
    c.K_h = 1024;
    c.K_c = 512;
    c.C_v = 256;
    c.C_c = 256;
    c.C_h = 128;
    c.enabled = QuantizerSet::all();
    c.input_dims = Dims{128, 128, 102};
    return c;
}

Dims NetworkConfig::working_dims() const
{
    const int64_t f = int64_t(1) << (stages() - 1);
    auto up = [f](int64_t n) { return (n + f - 1) / f * f; };
    return Dims{up(input_dims.x), up(input_dims.y), up(input_dims.z)};
}

Dims NetworkConfig::bottleneck_dims() const
{
    Dims d = working_dims();
    for (int s = 1; s < stages(); ++s) d = d.halved();
    return d;
}

void NetworkConfig::validate() const
{
    if (channels.size() < 2) throw Error("NetworkConfig: need at least 2 encoder stages");
    for (int64_t c : channels)
        if (c < 1) throw Error("NetworkConfig: channel counts must be positive");
    if (convs_per_block != 2 && convs_per_block != 3) throw Error("NetworkConfig: convs_per_block must be 2 or 3");
    if (K_v < 1 || K_h < 1 || K_c < 1) throw Error("NetworkConfig: dictionary sizes must be >= 1");
    if (C_v < 1 || C_h < 1 || C_c < 1) throw Error("NetworkConfig: dictionary channels must be >= 1");
    if (C_v != C_c)
        throw Error("NetworkConfig: C_v (" + std::to_string(C_v) + ") must equal C_c (" + std::to_string(C_c) + ")");
    if (C_h != channels[channels.size() - 2])
        throw Error("NetworkConfig: C_h (" + std::to_string(C_h) + ") must equal the second-deepest stage width (" +
                    std::to_string(channels[channels.size() - 2]) + ")");
    if (!input_dims.valid()) throw Error("NetworkConfig: input dims must be positive");
    if (!(beta >= 0)) throw Error("NetworkConfig: beta must be >= 0");
}

std::vector<std::pair<std::string, std::string>> NetworkConfig::to_kv() const
{
    std::string ch;
    for (size_t i = 0; i < channels.size(); ++i) ch += (i ? "," : "") + std::to_string(channels[i]);
    return {
        {"channels", ch},
        {"convs_per_block", std::to_string(convs_per_block)},
        {"K_v", std::to_string(K_v)},
        {"K_h", std::to_string(K_h)},
        {"K_c", std::to_string(K_c)},
        {"C_v", std::to_string(C_v)},
        {"C_h", std::to_string(C_h)},
        {"C_c", std::to_string(C_c)},
        {"quantizers", enabled.label()},
        {"input_dims", std::to_string(input_dims.x) + " " + std::to_string(input_dims.y) + " " +
                           std::to_string(input_dims.z)},
        {"beta", format_real(beta)},
    };
}

NetworkConfig NetworkConfig::from_kv(const std::vector<std::pair<std::string, std::string>>& kv)
{
    NetworkConfig c;
    for (const auto& [k, v] : kv) {
        try {
            if (k == "channels") {
                c.channels.clear();
                std::stringstream ss(v);
                std::string tok;
                while (std::getline(ss, tok, ',')) c.channels.push_back(std::stoll(tok));
            } else if (k == "convs_per_block") c.convs_per_block = std::stoi(v);
            else if (k == "K_v") c.K_v = std::stoll(v);
            else if (k == "K_h") c.K_h = std::stoll(v);
            else if (k == "K_c") c.K_c = std::stoll(v);
            else if (k == "C_v") c.C_v = std::stoll(v);
            else if (k == "C_h") c.C_h = std::stoll(v);
            else if (k == "C_c") c.C_c = std::stoll(v);
            else if (k == "quantizers") c.enabled = QuantizerSet::parse(v);
            else if (k == "input_dims") c.input_dims = parse_dims(v);
            else if (k == "beta") c.beta = std::stod(v);
            else throw Error("unknown network key '" + k + "'");
        } catch (const std::logic_error&) {
            throw Error("network config: bad value for '" + k + "': '" + v + "'");
        }
    }
    return c;
}

namespace {

template <typename T>
Tensor<T> pad_edge(const Tensor<T>& t, Dims to)
{
    if (t.dims() == to) return t;
    const Dims d = t.dims();
    Tensor<T> o(t.channels(), to);
    for (int64_t c = 0; c < t.channels(); ++c)
        for (int64_t k = 0; k < to.z; ++k)
            for (int64_t j = 0; j < to.y; ++j)
                for (int64_t i = 0; i < to.x; ++i)
                    o.at(c, i, j, k) = t.at(c, std::min(i, d.x - 1), std::min(j, d.y - 1), std::min(k, d.z - 1));
    return o;
}

template <typename T>
Tensor<T> crop(const Tensor<T>& t, Dims to)
{
    if (t.dims() == to) return t;
    Tensor<T> o(t.channels(), to);
    for (int64_t c = 0; c < t.channels(); ++c)
        for (int64_t k = 0; k < to.z; ++k)
            for (int64_t j = 0; j < to.y; ++j)
                for (int64_t i = 0; i < to.x; ++i) o.at(c, i, j, k) = t.at(c, i, j, k);
    return o;
}

/// Adjoint of crop: zero outside the cropped region.
template <typename T>
Tensor<T> uncrop(const Tensor<T>& t, Dims to)
{
    if (t.dims() == to) return t;
    Tensor<T> o(t.channels(), to);
    const Dims d = t.dims();
    for (int64_t c = 0; c < t.channels(); ++c)
        for (int64_t k = 0; k < d.z; ++k)
            for (int64_t j = 0; j < d.y; ++j)
                for (int64_t i = 0; i < d.x; ++i) o.at(c, i, j, k) = t.at(c, i, j, k);
    return o;
}

}  // namespace

// ---------------------------------------------------------------- encoder

template <typename T>
Encoder<T>::Encoder(const std::string& name, int64_t in_ch, const std::vector<int64_t>& channels, int convs_per_block)
{
    int64_t prev = in_ch;
    for (size_t s = 0; s < channels.size(); ++s) {
        blocks_.emplace_back(name + ".block" + std::to_string(s + 1), prev, channels[s], s == 0 ? 1 : 2,
                             convs_per_block);
        prev = channels[s];
    }
}

template <typename T>
void Encoder<T>::init(std::mt19937_64& rng)
{
    for (auto& b : blocks_) b.init(rng);
}

template <typename T>
std::vector<Tensor<T>> Encoder<T>::forward(const Tensor<T>& x, Cache& cache) const
{
    cache.assign(blocks_.size(), {});
    std::vector<Tensor<T>> out;
    out.reserve(blocks_.size());
    const Tensor<T>* in = &x;
    for (size_t s = 0; s < blocks_.size(); ++s) {
        out.push_back(blocks_[s].forward(*in, cache[s]));
        in = &out.back();
    }
    return out;
}

template <typename T>
void Encoder<T>::backward(Cache& cache, std::vector<Tensor<T>>& grads)
{
    for (size_t s = blocks_.size(); s-- > 0;) {
        if (grads[s].empty()) continue;
        Tensor<T> g = blocks_[s].backward(cache[s], grads[s]);
        if (s == 0) break;
        if (grads[s - 1].empty())
            grads[s - 1] = std::move(g);
        else
            grads[s - 1] += g;
    }
}

template <typename T>
void Encoder<T>::collect(nn::ParamList<T>& out)
{
    for (auto& b : blocks_) b.collect(out);
}

// ---------------------------------------------------------------- decoder

template <typename T>
Decoder<T>::Decoder(const std::string& name, int64_t bottleneck_ch, const std::vector<int64_t>& channels, int64_t out_ch)
{
    const size_t levels = channels.size() - 1;
    up_.resize(levels);
    merge_.resize(levels);
    for (size_t l = levels; l-- > 0;) {
        const int64_t in = l + 1 == levels ? bottleneck_ch : channels[l + 1];
        const std::string lv = name + ".level" + std::to_string(l + 1);
        up_[l] = nn::ConvNormRelu<T>(lv + ".up", in, channels[l]);
        merge_[l] = nn::ConvNormRelu<T>(lv + ".merge", 2 * channels[l], channels[l]);
    }
    final_ = nn::Conv3d<T>(name + ".out", channels[0], out_ch, 3, 1);
}

template <typename T>
void Decoder<T>::init(std::mt19937_64& rng, bool zero_final)
{
    for (size_t l = up_.size(); l-- > 0;) {
        up_[l].init(rng);
        merge_[l].init(rng);
    }
    final_.init(rng, zero_final);
}

template <typename T>
Tensor<T> Decoder<T>::forward(const Tensor<T>& bottleneck, const std::vector<const Tensor<T>*>& skips, Cache& c) const
{
    const size_t levels = up_.size();
    if (skips.size() != levels) throw Error("Decoder: expected " + std::to_string(levels) + " skip tensors");
    c.in_dims.assign(levels, Dims{});
    c.up.assign(levels, {});
    c.merge.assign(levels, {});
    c.up_channels.assign(levels, 0);
    Tensor<T> cur = bottleneck;
    for (size_t l = levels; l-- > 0;) {
        c.in_dims[l] = cur.dims();
        Tensor<T> a = up_[l].forward(nn::upsample_nearest(cur), c.up[l]);
        c.up_channels[l] = a.channels();
        cur = merge_[l].forward(concat_channels(a, *skips[l]), c.merge[l]);
    }
    c.final_in = cur;
    return final_.forward(cur);
}

template <typename T>
void Decoder<T>::backward(Cache& c, const Tensor<T>& grad_out, Tensor<T>& grad_bottleneck,
                          std::vector<Tensor<T>>& grad_skips)
{
    const size_t levels = up_.size();
    grad_skips.assign(levels, {});
    Tensor<T> g = final_.backward(c.final_in, grad_out);
    for (size_t l = 0; l < levels; ++l) {
        Tensor<T> gcat = merge_[l].backward(c.merge[l], g);
        const int64_t a = c.up_channels[l];
        grad_skips[l] = slice_channels(gcat, a, gcat.channels() - a);
        Tensor<T> gup = up_[l].backward(c.up[l], slice_channels(gcat, 0, a));
        g = nn::upsample_nearest_backward(gup, c.in_dims[l]);
    }
    grad_bottleneck = std::move(g);
}

template <typename T>
void Decoder<T>::collect(nn::ParamList<T>& out)
{
    for (size_t l = up_.size(); l-- > 0;) {
        up_[l].collect(out);
        merge_[l].collect(out);
    }
    final_.collect(out);
}

// ---------------------------------------------------------------- registration model

template <typename T>
RegModel<T>::RegModel(NetworkConfig cfg, uint64_t seed) : cfg_(std::move(cfg))
{
    cfg_.validate();
    const auto& ch = cfg_.channels;
    const int64_t deep = ch.back();
    const int64_t second = ch[ch.size() - 2];
    encoder_ = Encoder<T>("encoder", 2, ch, cfg_.convs_per_block);
    head_c_ = nn::Conv3d<T>("head_c.conv", deep, cfg_.C_c, 3, 1);
    head_v_ = nn::Conv3d<T>("head_v.conv", deep, cfg_.C_v, 3, 1);
    hier_proj_ = nn::Conv3d<T>("hier.proj", deep, second, 1, 1);
    const T beta = T(cfg_.beta);
    q_v_ = nn::Quantizer<T>(QuantizerName::vanilla, cfg_.K_v, cfg_.C_v, beta, cfg_.enabled.vanilla);
    q_h_ = nn::Quantizer<T>(QuantizerName::hierarchical, cfg_.K_h, cfg_.C_h, beta, cfg_.enabled.hierarchical);
    q_c_ = nn::Quantizer<T>(QuantizerName::collaborative, cfg_.K_c, cfg_.C_c, beta, cfg_.enabled.collaborative);
    decoder_ = Decoder<T>("decoder", cfg_.C_c + cfg_.C_v, ch, 3);

    // Network weights are drawn from one stream in a fixed order so that every quantizer
    // subset starts from identical weights; codebooks use their own derived seeds.
    std::mt19937_64 rng(seed);
    encoder_.init(rng);
    head_c_.init(rng);
    head_v_.init(rng);
    hier_proj_.init(rng);
    decoder_.init(rng, true);
    q_v_.init_random(seed ^ 0x7631ULL);
    q_h_.init_random(seed ^ 0x6832ULL);
    q_c_.init_random(seed ^ 0x6333ULL);
}

template <typename T>
typename RegModel<T>::Forward RegModel<T>::forward(const Tensor<T>& moving, const Tensor<T>& fixed) const
{
    if (moving.channels() != 1 || fixed.channels() != 1) throw Error("RegModel: expected single-channel volumes");
    if (!(moving.dims() == cfg_.input_dims) || !(fixed.dims() == cfg_.input_dims))
        throw Error("RegModel: volume dims " + to_string(moving.dims()) + " / " + to_string(fixed.dims()) +
                    " do not match the network input dims " + to_string(cfg_.input_dims));
    Forward fw;
    const Dims work = cfg_.working_dims();
    fw.stages = encoder_.forward(concat_channels(pad_edge(moving, work), pad_edge(fixed, work)), fw.enc);
    const size_t S = fw.stages.size();
    const Tensor<T>& deep = fw.stages[S - 1];
    const Tensor<T>& second = fw.stages[S - 2];

    fw.head_c = head_c_.forward(deep);
    fw.head_v = head_v_.forward(deep);
    Tensor<T> zc = q_c_.forward(fw.head_c, fw.qc);
    Tensor<T> zv = q_v_.forward(fw.head_v, fw.qv);
    Tensor<T> bottleneck = concat_channels(zc, zv);

    Tensor<T> zh = q_h_.forward(second, fw.qh);
    fw.proj = hier_proj_.forward(deep);
    fw.skip_merged = nn::upsample_trilinear(fw.proj);
    fw.skip_merged += zh;

    std::vector<const Tensor<T>*> skips;
    for (size_t s = 0; s + 2 < S; ++s) skips.push_back(&fw.stages[s]);
    skips.push_back(&fw.skip_merged);
    fw.ddf = crop(decoder_.forward(bottleneck, skips, fw.dec), cfg_.input_dims);

    fw.losses.vanilla = double(fw.qv.loss);
    fw.losses.hierarchical = double(fw.qh.loss);
    fw.losses.collaborative = double(fw.qc.loss);
    return fw;
}

template <typename T>
typename RegModel<T>::Forward RegModel<T>::forward(const RegistrationSample& s) const
{
    return forward(s.moving.to_tensor<T>(), s.fixed.to_tensor<T>());
}

template <typename T>
void RegModel<T>::backward(Forward& fw, const Tensor<T>& grad_ddf, T quant_scale)
{
    Tensor<T> g_bottleneck;
    std::vector<Tensor<T>> g_skips;
    decoder_.backward(fw.dec, uncrop(grad_ddf, cfg_.working_dims()), g_bottleneck, g_skips);

    const size_t S = fw.stages.size();
    std::vector<Tensor<T>> g_stages(S);
    for (size_t s = 0; s + 2 < S; ++s) g_stages[s] = std::move(g_skips[s]);

    const Tensor<T>& g_merged = g_skips[S - 2];
    g_stages[S - 2] = q_h_.backward(fw.qh, g_merged, quant_scale);
    Tensor<T> g_proj = nn::upsample_trilinear_backward(g_merged, fw.proj.dims());

    const Tensor<T>& deep = fw.stages[S - 1];
    Tensor<T> g_hc = q_c_.backward(fw.qc, slice_channels(g_bottleneck, 0, cfg_.C_c), quant_scale);
    Tensor<T> g_hv = q_v_.backward(fw.qv, slice_channels(g_bottleneck, cfg_.C_c, cfg_.C_v), quant_scale);
    Tensor<T> g_deep = head_c_.backward(deep, g_hc);
    g_deep += head_v_.backward(deep, g_hv);
    g_deep += hier_proj_.backward(deep, g_proj);
    g_stages[S - 1] = std::move(g_deep);

    encoder_.backward(fw.enc, g_stages);
}

template <typename T>
nn::ParamList<T> RegModel<T>::params()
{
    nn::ParamList<T> out;
    encoder_.collect(out);
    head_c_.collect(out);
    head_v_.collect(out);
    hier_proj_.collect(out);
    decoder_.collect(out);
    q_v_.collect(out);
    q_h_.collect(out);
    q_c_.collect(out);
    return out;
}

template <typename T>
void RegModel<T>::zero_grad()
{
    for (auto* p : params()) p->zero_grad();
}

template <typename T>
int64_t RegModel<T>::parameter_count()
{
    int64_t n = 0;
    for (auto* p : params()) n += p->numel();
    return n;
}

template <typename T>
nn::Quantizer<T>& RegModel<T>::quantizer(QuantizerName n)
{
    switch (n) {
    case QuantizerName::vanilla: return q_v_;
    case QuantizerName::hierarchical: return q_h_;
    case QuantizerName::collaborative: return q_c_;
    }
    throw Error("RegModel: bad quantizer name");
}

template <typename T>
const nn::Quantizer<T>& RegModel<T>::quantizer(QuantizerName n) const
{
    return const_cast<RegModel*>(this)->quantizer(n);
}

template <typename T>
void RegModel<T>::randomize_output_layer(uint64_t seed, double scale)
{
    auto ps = params();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0, scale);
    for (auto* p : ps)
        if (p->name == "decoder.out.weight" || p->name == "decoder.out.bias")
            for (T& v : p->value) v = T(n(rng));
}

// ---------------------------------------------------------------- segmentation model

template <typename T>
SegModel<T>::SegModel(NetworkConfig cfg, uint64_t seed) : cfg_(std::move(cfg))
{
    if (cfg_.channels.size() < 2) throw Error("SegModel: need at least 2 encoder stages");
    if (!cfg_.input_dims.valid()) throw Error("SegModel: input dims must be positive");
    encoder_ = Encoder<T>("seg.encoder", 1, cfg_.channels, cfg_.convs_per_block);
    head_ = nn::Conv3d<T>("seg.head.conv", cfg_.channels.back(), cfg_.C_c, 3, 1);
    decoder_ = Decoder<T>("seg.decoder", cfg_.C_c, cfg_.channels, 1);
    std::mt19937_64 rng(seed);
    encoder_.init(rng);
    head_.init(rng);
    decoder_.init(rng, true);
}

template <typename T>
typename SegModel<T>::Forward SegModel<T>::forward(const Tensor<T>& image) const
{
    if (image.channels() != 1) throw Error("SegModel: expected a single-channel image");
    if (!(image.dims() == cfg_.input_dims))
        throw Error("SegModel: image dims " + to_string(image.dims()) + " do not match " + to_string(cfg_.input_dims));
    Forward fw;
    fw.stages = encoder_.forward(pad_edge(image, cfg_.working_dims()), fw.enc);
    fw.bottleneck = head_.forward(fw.stages.back());
    std::vector<const Tensor<T>*> skips;
    for (size_t s = 0; s + 1 < fw.stages.size(); ++s) skips.push_back(&fw.stages[s]);
    fw.logits = crop(decoder_.forward(fw.bottleneck, skips, fw.dec), image.dims());
    fw.prob = Tensor<T>(1, image.dims());
    for (int64_t n = 0; n < fw.logits.size(); ++n) fw.prob[n] = T(1) / (T(1) + std::exp(-fw.logits[n]));
    return fw;
}

template <typename T>
void SegModel<T>::backward(Forward& fw, const Tensor<T>& grad_prob)
{
    Tensor<T> g(1, fw.logits.dims());
    for (int64_t n = 0; n < g.size(); ++n) g[n] = grad_prob[n] * fw.prob[n] * (T(1) - fw.prob[n]);
    Tensor<T> g_bottleneck;
    std::vector<Tensor<T>> g_skips;
    decoder_.backward(fw.dec, uncrop(g, cfg_.working_dims()), g_bottleneck, g_skips);
    std::vector<Tensor<T>> g_stages = std::move(g_skips);
    g_stages.push_back(head_.backward(fw.stages.back(), g_bottleneck));
    encoder_.backward(fw.enc, g_stages);
}

template <typename T>
nn::ParamList<T> SegModel<T>::params()
{
    nn::ParamList<T> out;
    encoder_.collect(out);
    head_.collect(out);
    decoder_.collect(out);
    return out;
}

template <typename T>
void SegModel<T>::zero_grad()
{
    for (auto* p : params()) p->zero_grad();
}

template <typename T>
std::pair<MaskVolume, Tensor<T>> seg_forward(const SegModel<T>& model, const Volume3D& image)
{
    auto fw = model.forward(image.to_tensor<T>());
    Volume3D soft(image.geometry());
    for (int64_t n = 0; n < fw.prob.size(); ++n) soft[n] = std::clamp(double(fw.prob[n]), 0.0, 1.0);
    return {MaskVolume(std::move(soft), MaskKind::soft), std::move(fw.bottleneck)};
}

#define VQREG_REGNET_INSTANTIATE(T)                                                               \
    template class Encoder<T>;                                                                    \
    template class Decoder<T>;                                                                    \
    template class RegModel<T>;                                                                   \
    template class SegModel<T>;                                                                   \
    template std::pair<MaskVolume, Tensor<T>> seg_forward<T>(const SegModel<T>&, const Volume3D&);

VQREG_REGNET_INSTANTIATE(float)
VQREG_REGNET_INSTANTIATE(double)

}  // namespace vqreg
