#include <cmath>
#include <map>
#include <random>

#include "doctest.h"
#include "vqreg/regnet.hpp"
#include "vqreg/synth.hpp"

using namespace vqreg;

namespace {

Tensor<float> random_image(Dims d, uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(0, 1);
    Tensor<float> t(1, d);
    for (float& v : t.span()) v = u(rng);
    return t;
}

template <typename T>
std::map<std::string, const nn::Param<T>*> by_name(nn::ParamList<T> ps)
{
    std::map<std::string, const nn::Param<T>*> m;
    for (auto* p : ps) m[p->name] = p;
    return m;
}

template <typename T>
void copy_params(nn::ParamList<T> dst, RegModel<T>& src)
{
    auto m = by_name(src.params());
    for (auto* p : dst) {
        REQUIRE(m.count(p->name) == 1);
        p->value = m[p->name]->value;
    }
}

/// Plain U-Net assembled from the public building blocks: no quantization anywhere.
struct Baseline {
    Encoder<float> encoder;
    nn::Conv3d<float> head_c, head_v, proj;
    Decoder<float> decoder;

    explicit Baseline(const NetworkConfig& c)
        : encoder("encoder", 2, c.channels, c.convs_per_block),
          head_c("head_c.conv", c.channels.back(), c.C_c, 3, 1),
          head_v("head_v.conv", c.channels.back(), c.C_v, 3, 1),
          proj("hier.proj", c.channels.back(), c.channels[c.channels.size() - 2], 1, 1),
          decoder("decoder", c.C_c + c.C_v, c.channels, 3)
    {
    }

    nn::ParamList<float> params()
    {
        nn::ParamList<float> out;
        encoder.collect(out);
        head_c.collect(out);
        head_v.collect(out);
        proj.collect(out);
        decoder.collect(out);
        return out;
    }

    Tensor<float> forward(const Tensor<float>& m, const Tensor<float>& f)
    {
        Encoder<float>::Cache ec;
        auto e = encoder.forward(concat_channels(m, f), ec);
        const Tensor<float>& deep = e.back();
        Tensor<float> b = concat_channels(head_c.forward(deep), head_v.forward(deep));
        Tensor<float> skip = nn::upsample_trilinear(proj.forward(deep));
        skip += e[e.size() - 2];
        std::vector<const Tensor<float>*> skips;
        for (size_t s = 0; s + 2 < e.size(); ++s) skips.push_back(&e[s]);
        skips.push_back(&skip);
        Decoder<float>::Cache dc;
        return decoder.forward(b, skips, dc);
    }
};

}  // namespace

TEST_CASE("network config validation")
{
    NetworkConfig c = NetworkConfig::desk();
    CHECK_NOTHROW(c.validate());
    CHECK(c.bottleneck_dims() == Dims{4, 4, 3});
    CHECK_NOTHROW(NetworkConfig::paper().validate());

    NetworkConfig bad = c;
    bad.C_v = 32;
    CHECK_THROWS_AS(bad.validate(), Error);
    bad = c;
    bad.C_h = 16;
    CHECK_THROWS_AS(bad.validate(), Error);
    NetworkConfig odd = c;
    odd.input_dims = Dims{128, 128, 102};
    CHECK_NOTHROW(odd.validate());
    CHECK(odd.working_dims() == Dims{128, 128, 104});
    bad = c;
    bad.convs_per_block = 4;
    CHECK_THROWS_AS(bad.validate(), Error);

    NetworkConfig e = c;
    e.enabled = QuantizerSet{true, false, true};
    e.channels = {4, 8, 16};
    e.C_h = 8;
    CHECK(NetworkConfig::from_kv(e.to_kv()) == e);
    CHECK(QuantizerSet::parse("v+h+c") == QuantizerSet::all());
    CHECK(QuantizerSet::parse("none").label() == "none");
    CHECK(QuantizerSet{true, false, true}.label() == "v+c");
    CHECK_THROWS_AS(QuantizerSet::parse("v+x"), Error);
}

TEST_CASE("registration network output shape and identity start")
{
    NetworkConfig c = NetworkConfig::desk();
    c.enabled = QuantizerSet::all();
    RegModel<float> model(c, 1);
    auto s = synth_sample(3, SynthParams{});
    auto fw = model.forward(s.sample);
    CHECK(fw.ddf.channels() == 3);
    CHECK(fw.ddf.dims() == Dims{32, 32, 24});
    for (float v : fw.ddf.span()) CHECK(v == 0.0f);
    CHECK(fw.losses.vanilla > 0);
    CHECK(fw.losses.hierarchical > 0);
    CHECK(fw.losses.collaborative > 0);

    Tensor<float> wrong(1, Dims{32, 32, 16});
    CHECK_THROWS_AS((void)model.forward(wrong, wrong), Error);
}

TEST_CASE("grid sizes that are not a multiple of the downsampling factor")
{
    NetworkConfig c = NetworkConfig::desk();
    c.enabled = QuantizerSet::all();
    c.input_dims = Dims{128, 128, 102};
    RegModel<float> model(c, 1);
    model.randomize_output_layer(2, 0.05);
    auto fw = model.forward(random_image(c.input_dims, 1), random_image(c.input_dims, 2));
    CHECK(fw.ddf.channels() == 3);
    CHECK(fw.ddf.dims() == Dims{128, 128, 102});
    Tensor<float> g(3, c.input_dims, 1.0f);
    model.zero_grad();
    CHECK_NOTHROW(model.backward(fw, g, 1.0f));
}

TEST_CASE("quantizers off reduce exactly to the plain U-Net")
{
    NetworkConfig c = NetworkConfig::desk();
    c.enabled = {};
    RegModel<float> model(c, 5);
    model.randomize_output_layer(6, 0.05);

    Baseline base(c);
    copy_params(base.params(), model);

    const Tensor<float> m = random_image(c.input_dims, 7), f = random_image(c.input_dims, 8);
    auto fw = model.forward(m, f);
    Tensor<float> ref = base.forward(m, f);
    CHECK(std::equal(fw.ddf.span().begin(), fw.ddf.span().end(), ref.span().begin()));
    CHECK(fw.losses.sum() == 0.0);
}

TEST_CASE("network weights are shared across quantizer subsets")
{
    std::map<std::string, int64_t> counts;
    NetworkConfig c = NetworkConfig::desk();
    RegModel<float> plain(c, 11);
    auto plain_params = by_name(plain.params());
    for (const char* label : {"none", "v", "v+h", "v+c", "v+h+c"}) {
        c.enabled = QuantizerSet::parse(label);
        RegModel<float> m(c, 11);
        RegModel<float> again(c, 11);
        CHECK(m.parameter_count() == again.parameter_count());
        counts[label] = m.parameter_count();
        for (auto* p : m.params()) {
            if (p->name.rfind("codebook.", 0) == 0) continue;
            CHECK(p->value == plain_params.at(p->name)->value);
        }
    }
    CHECK(counts["v"] == counts["none"] + c.K_v * c.C_v);
    CHECK(counts["v+h"] == counts["v"] + c.K_h * c.C_h);
    CHECK(counts["v+c"] == counts["v"] + c.K_c * c.C_c);
    CHECK(counts["v+h+c"] == counts["v+h"] + c.K_c * c.C_c);
}

TEST_CASE("forward is deterministic")
{
    NetworkConfig c = NetworkConfig::desk();
    c.enabled = QuantizerSet::all();
    RegModel<float> model(c, 2);
    model.randomize_output_layer(3, 0.05);
    const Tensor<float> m = random_image(c.input_dims, 1), f = random_image(c.input_dims, 2);
    auto a = model.forward(m, f);
    auto b = model.forward(m, f);
    CHECK(std::equal(a.ddf.span().begin(), a.ddf.span().end(), b.ddf.span().begin()));
    CHECK(a.losses.vanilla == b.losses.vanilla);
    CHECK(a.losses.hierarchical == b.losses.hierarchical);
    CHECK(a.losses.collaborative == b.losses.collaborative);
    CHECK(a.qv.indices == b.qv.indices);
}

TEST_CASE("gradients reach every encoder parameter and every used code")
{
    NetworkConfig c = NetworkConfig::desk();
    c.channels = {4, 8, 16};
    c.C_h = 8;
    c.C_v = c.C_c = 12;
    c.K_v = c.K_h = c.K_c = 6;
    c.input_dims = Dims{16, 16, 12};
    c.enabled = QuantizerSet::all();
    RegModel<double> model(c, 4);
    model.randomize_output_layer(5, 0.05);
    const Tensor<double> m = random_image(c.input_dims, 3).cast<double>(), f = random_image(c.input_dims, 4).cast<double>();

    auto fw = model.forward(m, f);
    Tensor<double> g(3, c.input_dims);
    std::mt19937_64 rng(6);
    std::normal_distribution<double> n(0, 1);
    for (double& v : g.span()) v = n(rng);

    // straight-through only (no quantization loss): the encoder still sees the upstream gradient
    model.zero_grad();
    model.backward(fw, g, 0.0);
    for (auto* p : model.params()) {
        if (p->name.rfind("encoder.", 0) != 0) continue;
        double norm = 0;
        for (double v : p->grad) norm += v * v;
        INFO(p->name);
        CHECK(norm > 0);
    }
    for (auto name : {QuantizerName::vanilla, QuantizerName::hierarchical, QuantizerName::collaborative})
        for (double v : model.quantizer(name).codes.grad) CHECK(v == 0.0);

    model.zero_grad();
    model.backward(fw, g, 1.0);
    auto check_codes = [&](QuantizerName name, const std::vector<int32_t>& idx) {
        auto& q = model.quantizer(name);
        auto use = code_usage(idx, q.K());
        for (int64_t k = 0; k < q.K(); ++k) {
            double norm = 0;
            for (int64_t ch = 0; ch < q.C(); ++ch) norm += std::pow(q.codes.grad[size_t(k * q.C() + ch)], 2);
            INFO(to_string(name) << " code " << k);
            CHECK((norm > 0) == (use[size_t(k)] > 0));
        }
    };
    check_codes(QuantizerName::vanilla, fw.qv.indices);
    check_codes(QuantizerName::hierarchical, fw.qh.indices);
    check_codes(QuantizerName::collaborative, fw.qc.indices);
}

TEST_CASE("two-convolution blocks are supported")
{
    NetworkConfig c = NetworkConfig::desk();
    c.convs_per_block = 2;
    c.enabled = QuantizerSet::all();
    RegModel<float> two(c, 1);
    c.convs_per_block = 3;
    RegModel<float> three(c, 1);
    CHECK(two.parameter_count() < three.parameter_count());
    auto fw = two.forward(random_image(c.input_dims, 1), random_image(c.input_dims, 2));
    CHECK(fw.ddf.dims() == c.input_dims);
}

TEST_CASE("segmentation network starts at one half")
{
    NetworkConfig c = NetworkConfig::desk();
    SegModel<float> seg(c, 3);
    auto s = synth_sample(4, SynthParams{});
    auto [mask, bottleneck] = seg_forward(seg, s.sample.moving);
    CHECK(mask.kind() == MaskKind::soft);
    for (double v : mask.volume().values()) CHECK(v == 0.5);
    CHECK(bottleneck.channels() == c.C_c);
    CHECK(bottleneck.dims() == Dims{4, 4, 3});
    CHECK_THROWS_AS(seg_forward(seg, Volume3D(Geometry{Dims{16, 16, 16}})), Error);
}

TEST_CASE("segmentation gradient matches finite differences")
{
    NetworkConfig c;
    c.channels = {3, 5};
    c.C_c = 4;
    c.input_dims = Dims{8, 8, 8};
    SegModel<double> seg(c, 9);
    // give the output layer non-zero weights through the parameter list
    std::mt19937_64 rng(10);
    std::normal_distribution<double> n(0, 0.1);
    for (auto* p : seg.params())
        if (p->name.rfind("seg.decoder.out", 0) == 0)
            for (double& v : p->value) v = n(rng);
    const Tensor<double> img = random_image(c.input_dims, 11).cast<double>();
    Tensor<double> w = random_image(c.input_dims, 12).cast<double>();
    auto objective = [&] {
        auto fw = seg.forward(img);
        double s = 0;
        for (int64_t i = 0; i < w.size(); ++i) s += w[i] * fw.prob[i];
        return s;
    };
    seg.zero_grad();
    auto fw = seg.forward(img);
    seg.backward(fw, w);
    double diff = 0, na = 0, nf = 0;
    for (auto* p : seg.params()) {
        for (size_t i = 0; i < p->value.size(); i += 5) {
            const double keep = p->value[i];
            p->value[i] = keep + 1e-6;
            const double lp = objective();
            p->value[i] = keep - 1e-6;
            const double lm = objective();
            p->value[i] = keep;
            const double fd = (lp - lm) / 2e-6;
            diff += std::pow(fd - p->grad[i], 2);
            na += p->grad[i] * p->grad[i];
            nf += fd * fd;
        }
    }
    CHECK(std::sqrt(diff) / std::max(std::sqrt(na), std::sqrt(nf)) < 1e-4);
}

TEST_CASE("interior of the field is insensitive to a joint shift")
{
    // one downsampling level, so an even shift is an exact symmetry away from the borders
    NetworkConfig c;
    c.channels = {4, 8};
    c.C_h = 4;
    c.C_v = c.C_c = 6;
    c.input_dims = Dims{24, 16, 16};
    RegModel<float> model(c, 21);
    model.randomize_output_layer(22, 0.1);
    const Dims d = c.input_dims;
    const Tensor<float> m = random_image(d, 1), f = random_image(d, 2);
    const int64_t shift = 2;
    auto shifted = [&](const Tensor<float>& t) {
        Tensor<float> o(1, d);
        for (int64_t k = 0; k < d.z; ++k)
            for (int64_t j = 0; j < d.y; ++j)
                for (int64_t i = 0; i < d.x; ++i) o.at(0, i, j, k) = t.at(0, std::min(i + shift, d.x - 1), j, k);
        return o;
    };
    auto a = model.forward(m, f);
    auto b = model.forward(shifted(m), shifted(f));
    double interior = 0, border = 0;
    int64_t ni = 0, nb = 0;
    const int64_t margin = 6;
    for (int64_t ch = 0; ch < 3; ++ch)
        for (int64_t k = 0; k < d.z; ++k)
            for (int64_t j = 0; j < d.y; ++j)
                for (int64_t i = 0; i + shift < d.x; ++i) {
                    const double diff = std::abs(double(b.ddf.at(ch, i, j, k)) - double(a.ddf.at(ch, i + shift, j, k)));
                    const bool inside = i >= margin && i + shift < d.x - margin && j >= margin && j < d.y - margin &&
                                        k >= margin && k < d.z - margin;
                    (inside ? interior : border) += diff;
                    ++(inside ? ni : nb);
                }
    interior /= double(ni);
    border /= double(nb);
    CHECK(border > 0);
    CHECK(interior < 10 * border);
}
