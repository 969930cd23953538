#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "vqreg/nn.hpp"
#include "vqreg/vq.hpp"

using namespace vqreg;

namespace {

Tensor<double> random_features(int64_t C, Dims d, uint64_t seed, double scale = 1.0)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0, scale);
    Tensor<double> t(C, d);
    for (double& v : t.span()) v = n(rng);
    return t;
}

/// Plain Lloyd with uniformly random initial centres, used as a restart oracle.
double naive_lloyd(const std::vector<double>& x, int64_t C, int64_t K, std::mt19937_64& rng)
{
    const int64_t N = int64_t(x.size()) / C;
    std::vector<double> centers(size_t(K * C));
    std::vector<int64_t> pick(static_cast<size_t>(N));
    std::iota(pick.begin(), pick.end(), 0);
    std::shuffle(pick.begin(), pick.end(), rng);
    for (int64_t k = 0; k < K; ++k)
        for (int64_t c = 0; c < C; ++c) centers[size_t(k * C + c)] = x[size_t(pick[size_t(k)] * C + c)];
    std::vector<int64_t> a(size_t(N), -1);
    double obj = 0;
    for (int it = 0; it < 300; ++it) {
        bool changed = false;
        obj = 0;
        for (int64_t n = 0; n < N; ++n) {
            int64_t best = 0;
            double bd = 1e300;
            for (int64_t k = 0; k < K; ++k) {
                double d = 0;
                for (int64_t c = 0; c < C; ++c) d += std::pow(x[size_t(n * C + c)] - centers[size_t(k * C + c)], 2);
                if (d < bd) bd = d, best = k;
            }
            obj += bd;
            if (a[size_t(n)] != best) changed = true;
            a[size_t(n)] = best;
        }
        if (!changed) break;
        std::vector<double> s(size_t(K * C), 0.0);
        std::vector<int64_t> cnt(size_t(K), 0);
        for (int64_t n = 0; n < N; ++n) {
            ++cnt[size_t(a[size_t(n)])];
            for (int64_t c = 0; c < C; ++c) s[size_t(a[size_t(n)] * C + c)] += x[size_t(n * C + c)];
        }
        for (int64_t k = 0; k < K; ++k)
            if (cnt[size_t(k)])
                for (int64_t c = 0; c < C; ++c) centers[size_t(k * C + c)] = s[size_t(k * C + c)] / double(cnt[size_t(k)]);
    }
    return obj;
}

}  // namespace

TEST_CASE("exact code match selects that code")
{
    Codebook cb = random_codebook(6, 4, QuantizerName::vanilla, 3);
    Tensor<double> f(4, Dims{1, 1, 1});
    for (int c = 0; c < 4; ++c) f.at(c, 0) = cb.codes[size_t(3 * 4 + c)];
    auto r = quantize(f, cb);
    CHECK(r.indices[0] == 3);
    for (int c = 0; c < 4; ++c) CHECK(r.quantized.at(c, 0) == f.at(c, 0));
    CHECK(r.loss == 0.0);
}

TEST_CASE("equidistant codes resolve to the lowest index")
{
    Codebook cb{2, 2, {1, 0, -1, 0}, CodebookInit::random, QuantizerName::vanilla};
    Tensor<double> f(2, Dims{1, 1, 1});
    auto r = quantize(f, cb);
    CHECK(r.indices[0] == 0);
    CHECK(r.quantized.at(0, 0) == 1.0);
}

TEST_CASE("nearest code agrees with an exhaustive scan")
{
    for (uint64_t seed : {42u, 43u, 44u}) {
        Tensor<double> f = random_features(8, Dims{4, 4, 4}, seed, 0.3);
        Codebook cb = random_codebook(16, 8, QuantizerName::vanilla, seed + 100);
        // spread the codes so that neighbours are not all nearly equidistant
        for (double& v : cb.codes) v *= 16 * 0.3;
        auto r = quantize(f, cb);
        CHECK(r.indices == oracle::nearest_codes(f, cb));
        for (int64_t p = 0; p < f.voxels(); ++p)
            for (int64_t c = 0; c < 8; ++c) CHECK(r.quantized.at(c, p) == cb.codes[size_t(r.indices[size_t(p)] * 8 + c)]);
    }
}

TEST_CASE("quantize is idempotent and outputs codebook rows")
{
    Tensor<double> f = random_features(5, Dims{6, 5, 4}, 9);
    Codebook cb = random_codebook(12, 5, QuantizerName::hierarchical, 10);
    auto a = quantize(f, cb);
    auto b = quantize(a.quantized, cb);
    CHECK(a.indices == b.indices);
    CHECK(std::equal(a.quantized.span().begin(), a.quantized.span().end(), b.quantized.span().begin()));
    CHECK(b.loss == 0.0);
}

TEST_CASE("quantize rejects bad input")
{
    Codebook cb = random_codebook(4, 3, QuantizerName::vanilla, 1);
    CHECK_THROWS_AS(quantize(Tensor<double>(2, Dims{2, 2, 2}), cb), Error);
    Tensor<double> f(3, Dims{2, 2, 2});
    f[5] = std::nan("");
    CHECK_THROWS_AS(quantize(f, cb), Error);
    f[5] = INFINITY;
    CHECK_THROWS_AS(quantize(f, cb), Error);
    Codebook bad = cb;
    bad.codes[0] = std::nan("");
    CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("quantization loss values")
{
    Tensor<double> f = random_features(3, Dims{2, 3, 2}, 5);
    CHECK(quant_loss(f, f, 0.25) == 0.0);

    Tensor<double> a(2, Dims{1, 1, 1}), z(2, Dims{1, 1, 1});
    a.at(0, 0) = 1.0;
    CHECK(quant_loss(a, z, 0.25) == doctest::Approx(1.25).epsilon(1e-15));

    Tensor<double> g = random_features(3, Dims{2, 3, 2}, 6);
    CHECK_THROWS_AS(quant_loss(f, Tensor<double>(2, Dims{2, 3, 2}), 0.25), Error);

    CHECK(std::abs(quant_loss(f, g, 0.25) - oracle::quant_loss(f, g, 0.25)) < 1e-10);
}

TEST_CASE("straight-through gradient is the identity")
{
    Tensor<double> ones(4, Dims{3, 2, 2}, 1.0);
    Tensor<double> g = straight_through_backward(ones);
    for (double v : g.span()) CHECK(v == 1.0);
    Tensor<double> zeros(4, Dims{3, 2, 2});
    Tensor<double> gz = straight_through_backward(zeros);
    for (double v : gz.span()) CHECK(v == 0.0);

    // through the layer: with no loss weight the codebook sees nothing and the features see grad_z
    nn::Quantizer<double> q(QuantizerName::vanilla, 8, 4, 0.25, true);
    q.init_random(2);
    nn::Quantizer<double>::Cache cache;
    Tensor<double> f = random_features(4, Dims{3, 2, 2}, 8, 0.1);
    (void)q.forward(f, cache);
    Tensor<double> gf = q.backward(cache, ones, 0.0);
    for (double v : gf.span()) CHECK(v == 1.0);
    for (double v : q.codes.grad) CHECK(v == 0.0);
}

TEST_CASE("codebook and commitment gradients reach separate targets")
{
    Tensor<double> f = random_features(4, Dims{3, 3, 2}, 21, 0.2);
    Codebook cb = random_codebook(6, 4, QuantizerName::vanilla, 22);
    auto r = quantize(f, cb);
    const double beta = 0.25;

    // codebook term: d/d code_k Σ ‖sg(f) − d_k‖² = Σ_{p→k} 2(d_k − f_p); features receive nothing
    Tensor<double> gf(4, f.dims());
    std::vector<double> gc(cb.codes.size(), 0.0);
    quant_loss_backward<double>(f, r.quantized, r.indices, 0.0, 1.0, gf, gc);
    for (double v : gf.span()) CHECK(v == 0.0);
    std::vector<double> expect(cb.codes.size(), 0.0);
    for (int64_t p = 0; p < f.voxels(); ++p)
        for (int64_t c = 0; c < 4; ++c)
            expect[size_t(r.indices[size_t(p)] * 4 + c)] += 2 * (cb.codes[size_t(r.indices[size_t(p)] * 4 + c)] - f.at(c, p));
    for (size_t n = 0; n < gc.size(); ++n) CHECK(gc[n] == doctest::Approx(expect[n]).epsilon(1e-12));

    // commitment term alone: features get 2β(f − z), the codebook nothing
    Tensor<double> gf2(4, f.dims());
    quant_loss_backward<double>(f, r.quantized, r.indices, beta, 1.0, gf2, {});
    for (int64_t n = 0; n < f.size(); ++n) CHECK(gf2[n] == doctest::Approx(2 * beta * (f[n] - r.quantized[n])));

    // unselected rows never receive gradient
    auto use = code_usage(r.indices, cb.K);
    for (int64_t k = 0; k < cb.K; ++k)
        if (use[size_t(k)] == 0)
            for (int64_t c = 0; c < 4; ++c) CHECK(gc[size_t(k * 4 + c)] == 0.0);
}

TEST_CASE("commitment gradient through a two-layer encoder matches finite differences")
{
    std::mt19937_64 rng(77);
    nn::Conv3d<double> c1("c1", 2, 4, 3, 1), c2("c2", 4, 3, 3, 1);
    c1.init(rng);
    c2.init(rng);
    Tensor<double> x = random_features(2, Dims{5, 4, 4}, 78);
    Codebook cb = random_codebook(8, 3, QuantizerName::vanilla, 79);
    for (double& v : cb.codes) v *= 8;
    const double beta = 0.25;

    auto commitment = [&]() {
        Tensor<double> f = c2.forward(nn::relu(c1.forward(x)));
        auto r = quantize(f, cb, beta);
        double s = 0;
        for (int64_t n = 0; n < f.size(); ++n) s += beta * (f[n] - r.quantized[n]) * (f[n] - r.quantized[n]);
        return s;
    };

    Tensor<double> h1 = nn::relu(c1.forward(x));
    Tensor<double> f = c2.forward(h1);
    auto r = quantize(f, cb, beta);
    Tensor<double> gf(f.channels(), f.dims());
    quant_loss_backward<double>(f, r.quantized, r.indices, beta, 1.0, gf, {});
    c1.weight.zero_grad();
    c2.weight.zero_grad();
    Tensor<double> gh = c2.backward(h1, gf);
    c1.backward(x, nn::relu_backward(h1, gh), false);

    for (nn::Param<double>* p : {&c1.weight, &c2.weight}) {
        std::vector<double> ga, gn;
        for (size_t n = 0; n < p->value.size(); n += 7) {
            const double keep = p->value[n];
            const double h = 1e-6;
            p->value[n] = keep + h;
            const double lp = commitment();
            p->value[n] = keep - h;
            const double lm = commitment();
            p->value[n] = keep;
            ga.push_back(p->grad[n]);
            gn.push_back((lp - lm) / (2 * h));
        }
        double diff = 0, na = 0, nf = 0;
        for (size_t i = 0; i < ga.size(); ++i) {
            diff += (ga[i] - gn[i]) * (ga[i] - gn[i]);
            na += ga[i] * ga[i];
            nf += gn[i] * gn[i];
        }
        CHECK(std::sqrt(diff) / std::max(std::sqrt(na), std::sqrt(nf)) < 1e-4);
    }
}

TEST_CASE("frozen quantizer surrogate has the straight-through gradient")
{
    nn::Quantizer<double> q(QuantizerName::collaborative, 6, 3, 0.25, true);
    q.init_random(4);
    for (double& v : q.codes.value) v *= 20;
    Tensor<double> f = random_features(3, Dims{3, 3, 2}, 5, 0.5);
    nn::Quantizer<double>::Cache c0;
    (void)q.forward(f, c0);
    q.freeze(c0);

    // scalar objective: Σ w ⊙ out + loss
    Tensor<double> w = random_features(3, f.dims(), 6);
    auto objective = [&](const Tensor<double>& in) {
        nn::Quantizer<double>::Cache c;
        Tensor<double> out = q.forward(in, c);
        double s = c.loss;
        for (int64_t n = 0; n < out.size(); ++n) s += w[n] * out[n];
        return s;
    };
    nn::Quantizer<double>::Cache c;
    (void)q.forward(f, c);
    q.codes.zero_grad();
    Tensor<double> gf = q.backward(c, w, 1.0);
    const double h = 1e-6;
    for (int64_t n = 0; n < f.size(); ++n) {
        Tensor<double> a = f, b = f;
        a[n] += h;
        b[n] -= h;
        CHECK(gf[n] == doctest::Approx((objective(a) - objective(b)) / (2 * h)).epsilon(1e-6));
    }
    for (size_t n = 0; n < q.codes.value.size(); ++n) {
        const double keep = q.codes.value[n];
        q.codes.value[n] = keep + h;
        const double lp = objective(f);
        q.codes.value[n] = keep - h;
        const double lm = objective(f);
        q.codes.value[n] = keep;
        CHECK(q.codes.grad[n] == doctest::Approx((lp - lm) / (2 * h)).epsilon(1e-6));
    }
}

TEST_CASE("disabled quantizer is an exact identity")
{
    nn::Quantizer<float> q(QuantizerName::vanilla, 4, 2, 0.25f, false);
    Tensor<float> f = random_features(2, Dims{2, 2, 2}, 3).cast<float>();
    nn::Quantizer<float>::Cache c;
    Tensor<float> out = q.forward(f, c);
    CHECK(std::equal(out.span().begin(), out.span().end(), f.span().begin()));
    CHECK(c.loss == 0.0f);
    nn::ParamList<float> params;
    q.collect(params);
    CHECK(params.empty());
}

TEST_CASE("codebook file round trip")
{
    const auto path = std::filesystem::temp_directory_path() / "vqreg_test_codebook.arr";
    Codebook cb = random_codebook(5, 7, QuantizerName::collaborative, 8);
    cb.init_kind = CodebookInit::kmeans;
    save_codebook(path, cb);
    Codebook back = load_codebook(path);
    CHECK(back.K == 5);
    CHECK(back.C == 7);
    CHECK(back.codes == cb.codes);
    CHECK(back.init_kind == CodebookInit::kmeans);
    CHECK(back.name == QuantizerName::collaborative);

    nn::Quantizer<double> q(QuantizerName::collaborative, 5, 7, 0.25, true);
    q.load(back);
    CHECK(q.export_codebook().codes == cb.codes);
    nn::Quantizer<double> wrong(QuantizerName::collaborative, 6, 7, 0.25, true);
    CHECK_THROWS_AS(wrong.load(back), Error);
    std::filesystem::remove(path);
}

TEST_CASE("kmeans with N equal to K recovers the points")
{
    std::vector<double> x{0, 0, 1, 0, 0, 1, 5, 5, -3, 2};
    auto r = kmeans(x, 2, 5, 1);
    CHECK(r.objective.back() == 0.0);
    std::vector<std::pair<double, double>> a, b;
    for (int k = 0; k < 5; ++k) {
        a.emplace_back(x[size_t(2 * k)], x[size_t(2 * k + 1)]);
        b.emplace_back(r.centers[size_t(2 * k)], r.centers[size_t(2 * k + 1)]);
    }
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    CHECK(a == b);
}

TEST_CASE("kmeans separates two distant blobs")
{
    std::mt19937_64 rng(5);
    std::normal_distribution<double> n(0, 0.1);
    std::vector<double> x;
    double m0[3] = {0, 0, 0}, m1[3] = {0, 0, 0};
    for (int i = 0; i < 200; ++i) {
        const double off = i < 100 ? -10.0 : 10.0;
        for (int c = 0; c < 3; ++c) {
            const double v = off + n(rng);
            x.push_back(v);
            (i < 100 ? m0 : m1)[c] += v / 100;
        }
    }
    auto r = kmeans(x, 3, 2, 9);
    const bool first_low = r.centers[0] < 0;
    const double* lo = first_low ? r.centers.data() : r.centers.data() + 3;
    const double* hi = first_low ? r.centers.data() + 3 : r.centers.data();
    for (int c = 0; c < 3; ++c) {
        CHECK(std::abs(lo[c] - m0[c]) < 1e-9);
        CHECK(std::abs(hi[c] - m1[c]) < 1e-9);
    }
}

TEST_CASE("kmeans is near the best of many restarts on a Gaussian mixture")
{
    std::mt19937_64 rng(11);
    const int64_t N = 2000, C = 8, K = 4;
    std::normal_distribution<double> unit(0, 1);
    std::vector<std::vector<double>> means(K, std::vector<double>(C));
    for (auto& m : means)
        for (double& v : m) v = 3 * unit(rng);
    std::vector<double> x;
    for (int64_t i = 0; i < N; ++i) {
        const auto& m = means[size_t(i % K)];
        for (int64_t c = 0; c < C; ++c) x.push_back(m[size_t(c)] + unit(rng));
    }
    auto r = kmeans(x, C, K, 11);
    for (size_t i = 1; i < r.objective.size(); ++i) CHECK(r.objective[i] <= r.objective[i - 1]);
    CHECK(r.objective.back() == doctest::Approx(quantization_error(x, C, r.centers)).epsilon(1e-12));

    std::mt19937_64 orng(1234);
    double best = 1e300;
    for (int restart = 0; restart < 20; ++restart) best = std::min(best, naive_lloyd(x, C, K, orng));
    CHECK(r.objective.back() <= 1.05 * best);
}

TEST_CASE("kmeans objective never increases")
{
    for (uint64_t seed = 0; seed < 5; ++seed) {
        std::mt19937_64 rng(seed);
        std::uniform_real_distribution<double> u(-1, 1);
        std::vector<double> x(600);
        for (double& v : x) v = u(rng);
        auto r = kmeans(x, 3, 7, seed, 50);
        CHECK(r.iterations >= 1);
        for (size_t i = 1; i < r.objective.size(); ++i) CHECK(r.objective[i] <= r.objective[i - 1] + 1e-12);
    }
}

TEST_CASE("kmeans rejects bad input")
{
    CHECK_THROWS_AS(kmeans(std::vector<double>{}, 2, 1, 0), Error);
    CHECK_THROWS_AS(kmeans(std::vector<double>{1, 2, 3, 4}, 2, 3, 0), Error);
    CHECK_THROWS_AS(kmeans(std::vector<double>{1, 2, std::nan(""), 4}, 2, 1, 0), Error);
}
