#include <cmath>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "vqreg/losses.hpp"
#include "vqreg/regnet.hpp"

using namespace vqreg;

namespace {

Tensor<double> random_tensor(int64_t C, Dims d, uint64_t seed, double lo = 0, double hi = 1)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor<double> t(C, d);
    for (double& v : t.span()) v = u(rng);
    return t;
}

Tensor<double> smooth_tensor(Dims d, uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1, 1);
    const double a = u(rng), b = u(rng), c = u(rng), ph = u(rng);
    Tensor<double> t(1, d);
    for (int64_t k = 0; k < d.z; ++k)
        for (int64_t j = 0; j < d.y; ++j)
            for (int64_t i = 0; i < d.x; ++i)
                t.at(0, i, j, k) = 0.5 + 0.4 * std::sin(0.9 * a * i + 0.7 * b * j + 0.8 * c * k + 3 * ph);
    return t;
}

template <typename F>
std::vector<double> numeric_grad(Tensor<double>& x, F&& f, double h = 1e-6)
{
    std::vector<double> g;
    for (int64_t n = 0; n < x.size(); ++n) {
        const double keep = x[n];
        x[n] = keep + h;
        const double lp = f();
        x[n] = keep - h;
        const double lm = f();
        x[n] = keep;
        g.push_back((lp - lm) / (2 * h));
    }
    return g;
}

}  // namespace

TEST_CASE("ssd values")
{
    const Dims d{4, 3, 5};
    Tensor<double> a = random_tensor(1, d, 1);
    CHECK(ssd_loss(a, a) == 0.0);
    CHECK(ssd_loss(Tensor<double>(1, d, 0.4), Tensor<double>(1, d, 0.6)) == doctest::Approx(0.04).epsilon(1e-12));

    Tensor<double> b = random_tensor(1, d, 2);
    double s = 0;
    for (int64_t k = 0; k < d.z; ++k)
        for (int64_t j = 0; j < d.y; ++j)
            for (int64_t i = 0; i < d.x; ++i) s += std::pow(a.at(0, i, j, k) - b.at(0, i, j, k), 2);
    CHECK(std::abs(ssd_loss(a, b) - s / double(d.voxels())) < 1e-10);
    CHECK_THROWS_AS(ssd_loss(a, Tensor<double>(1, Dims{4, 3, 4})), Error);

    Volume3D va(Geometry{d}, 0.4), vb(Geometry{d}, 0.6);
    CHECK(ssd_loss(va, vb) == doctest::Approx(0.04));
}

TEST_CASE("dice values")
{
    const Dims d{4, 1, 1};
    Tensor<double> a(1, d), b(1, d);
    a[0] = a[1] = 1;
    CHECK(std::abs(dice_loss(a, a) + 1) < 1e-6);

    b[2] = b[3] = 1;
    CHECK(dice_loss(a, b) == doctest::Approx(-kDiceEps / (4 + kDiceEps)).epsilon(1e-12));

    Tensor<double> c(1, d);
    c[1] = c[2] = 1;
    CHECK(dice_loss(a, c) == doctest::Approx(-0.5).epsilon(1e-6));

    Tensor<double> p = random_tensor(1, Dims{5, 4, 3}, 3), q = random_tensor(1, Dims{5, 4, 3}, 4);
    CHECK(dice_loss(p, q) == doctest::Approx(dice_loss(q, p)).epsilon(1e-14));
    CHECK(dice_loss(p, q) <= 0.0);
    CHECK(dice_loss(p, q) >= -1.0);
    CHECK_THROWS_AS(dice_loss(p, Tensor<double>(1, d)), Error);
}

TEST_CASE("bending energy values")
{
    const Dims d{9, 9, 9};
    CHECK(bending_energy(Tensor<double>(3, d)) == 0.0);

    // affine field
    Tensor<double> aff(3, d);
    const double A[3][3] = {{0.1, -0.2, 0.05}, {0.3, 0.0, -0.1}, {0.02, 0.07, 0.2}};
    for (int c = 0; c < 3; ++c)
        for (int64_t k = 0; k < d.z; ++k)
            for (int64_t j = 0; j < d.y; ++j)
                for (int64_t i = 0; i < d.x; ++i) aff.at(c, i, j, k) = A[c][0] * i + A[c][1] * j + A[c][2] * k + 0.5 * c;
    CHECK(bending_energy(aff) < 1e-24);

    Tensor<double> sq(3, d);
    for (int64_t k = 0; k < d.z; ++k)
        for (int64_t j = 0; j < d.y; ++j)
            for (int64_t i = 0; i < d.x; ++i) sq.at(0, i, j, k) = double(i * i);
    CHECK(std::abs(bending_energy(sq) - oracle::bending(sq)) < 1e-8);
    CHECK(bending_energy(sq) == doctest::Approx(4.0 / 3.0).epsilon(1e-12));

    Tensor<double> r = random_tensor(3, Dims{6, 5, 7}, 8, -1, 1);
    CHECK(std::abs(bending_energy(r) - oracle::bending(r)) < 1e-10);

    // invariance under adding an affine field
    Tensor<double> r2 = random_tensor(3, d, 9, -1, 1);
    Tensor<double> r2a = r2;
    r2a += aff;
    CHECK(bending_energy(r2a) == doctest::Approx(bending_energy(r2)).epsilon(1e-10));

    CHECK_THROWS_AS(bending_energy(Tensor<double>(3, Dims{2, 5, 5})), Error);
}

TEST_CASE("loss gradients match finite differences")
{
    const Dims d{5, 4, 6};
    Tensor<double> a = random_tensor(1, d, 11), b = random_tensor(1, d, 12);
    Tensor<double> g;
    ssd_loss(a, b, &g);
    CHECK(oracle::vector_rel_error(std::vector<double>(g.span().begin(), g.span().end()),
                           numeric_grad(a, [&] { return ssd_loss(a, b); })) < 1e-6);
    dice_loss(a, b, &g);
    CHECK(oracle::vector_rel_error(std::vector<double>(g.span().begin(), g.span().end()),
                           numeric_grad(a, [&] { return dice_loss(a, b); })) < 1e-6);

    Tensor<double> u = random_tensor(3, d, 13, -1, 1);
    Tensor<double> gu(3, d);
    bending_energy(u, &gu);
    CHECK(oracle::vector_rel_error(std::vector<double>(gu.span().begin(), gu.span().end()),
                           numeric_grad(u, [&] { return bending_energy(u); })) < 1e-6);
}

TEST_CASE("total loss combination")
{
    LossTerms zero;
    CHECK(total_loss(zero, LossWeights{}) == 0.0);

    LossTerms t;
    t.vanilla = 1.0;
    t.collaborative = 0.25;
    t.ssd = 0.04;
    t.dice = -0.5;
    t.bending = 0.001;
    CHECK(total_loss(t, LossWeights{}) == doctest::Approx(0.84).epsilon(1e-12));
    CHECK(t.total == doctest::Approx(0.84).epsilon(1e-12));

    LossWeights w2;
    w2.ssd = 2;
    LossTerms t2 = t;
    CHECK(total_loss(t2, w2) - total_loss(t, LossWeights{}) == doctest::Approx(0.04).epsilon(1e-12));

    LossWeights bad;
    bad.dice = -1;
    CHECK_THROWS_AS(total_loss(t, bad), Error);

    auto kv = w2.to_kv();
    LossWeights back = LossWeights::from_kv(kv);
    CHECK(back.ssd == 2.0);
    CHECK(back.bending == 50.0);
}

TEST_CASE("objective gradient with respect to the field")
{
    const Dims d{6, 5, 7};
    PairTensors<double> pair{smooth_tensor(d, 1), smooth_tensor(d, 2), smooth_tensor(d, 3), smooth_tensor(d, 4)};
    Tensor<double> u = random_tensor(3, d, 5, -0.8, 0.8);
    LossWeights w;
    Tensor<double> g;
    registration_objective(u, pair, QuantLosses{}, w, &g);
    auto fd = numeric_grad(u, [&] { return registration_objective(u, pair, QuantLosses{}, w).total; });
    CHECK(oracle::vector_rel_error(std::vector<double>(g.span().begin(), g.span().end()), fd) < 1e-4);
}

TEST_CASE("full-model gradient matches finite differences")
{
    NetworkConfig cfg;
    cfg.channels = {4, 6};
    cfg.convs_per_block = 3;
    cfg.K_v = 5;
    cfg.K_h = 5;
    cfg.K_c = 4;
    cfg.C_v = cfg.C_c = 3;
    cfg.C_h = 4;
    cfg.enabled = QuantizerSet::all();
    cfg.input_dims = Dims{8, 8, 8};
    RegModel<double> model(cfg, 31);
    model.randomize_output_layer(32, 0.05);

    const Dims d = cfg.input_dims;
    PairTensors<double> pair{smooth_tensor(d, 6), smooth_tensor(d, 7), smooth_tensor(d, 8), smooth_tensor(d, 9)};
    LossWeights w;

    auto fw0 = model.forward(pair.moving, pair.fixed);
    for (auto n : {QuantizerName::vanilla, QuantizerName::hierarchical, QuantizerName::collaborative}) {
        const auto& cache = n == QuantizerName::vanilla ? fw0.qv : n == QuantizerName::hierarchical ? fw0.qh : fw0.qc;
        model.quantizer(n).freeze(cache);
    }
    // the field must be non-trivial so that sampling happens at non-integer positions
    double max_u = 0;
    for (double v : fw0.ddf.span()) max_u = std::max(max_u, std::abs(v));
    REQUIRE(max_u > 0.05);
    REQUIRE(fw0.losses.sum() > 0);

    auto objective = [&] {
        auto fw = model.forward(pair.moving, pair.fixed);
        return registration_objective(fw.ddf, pair, fw.losses, w).total;
    };

    model.zero_grad();
    auto fw = model.forward(pair.moving, pair.fixed);
    Tensor<double> g;
    registration_objective(fw.ddf, pair, fw.losses, w, &g);
    model.backward(fw, g, w.quant);

    std::vector<double> analytic, numeric;
    std::mt19937_64 rng(99);
    for (auto* p : model.params()) {
        std::vector<double> a_p, n_p;
        for (int s = 0; s < 4; ++s) {
            const size_t n = std::uniform_int_distribution<size_t>(0, p->value.size() - 1)(rng);
            const double keep = p->value[n];
            const double h = 1e-6;
            p->value[n] = keep + h;
            const double lp = objective();
            p->value[n] = keep - h;
            const double lm = objective();
            p->value[n] = keep;
            a_p.push_back(p->grad[n]);
            n_p.push_back((lp - lm) / (2 * h));
        }
        analytic.insert(analytic.end(), a_p.begin(), a_p.end());
        numeric.insert(numeric.end(), n_p.begin(), n_p.end());
        INFO(p->name);
        CHECK(oracle::vector_rel_error(a_p, n_p) < 1e-4);
    }
    CHECK(oracle::vector_rel_error(analytic, numeric) < 1e-4);
}
