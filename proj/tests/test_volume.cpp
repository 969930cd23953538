#include <cstring>
#include <filesystem>
#include <fstream>
#include <queue>
#include <random>

#include "doctest.h"
#include "vqreg/synth.hpp"
#include "vqreg/transform.hpp"
#include "vqreg/volume_io.hpp"

using namespace vqreg;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name)
{
    fs::path dir = fs::temp_directory_path() / "vqreg_test_volume";
    fs::create_directories(dir);
    return dir / name;
}

std::string file_payload(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return all.substr(all.find("\n\n") + 2);
}

bool connected(const MaskVolume& m)
{
    const Dims d = m.dims();
    std::vector<char> seen(size_t(d.voxels()), 0);
    int64_t start = -1;
    for (int64_t p = 0; p < d.voxels(); ++p)
        if (m[p] > 0.5) {
            start = p;
            break;
        }
    if (start < 0) return false;
    std::queue<int64_t> q;
    q.push(start);
    seen[size_t(start)] = 1;
    int64_t reached = 0;
    while (!q.empty()) {
        const int64_t p = q.front();
        q.pop();
        ++reached;
        const int64_t i = p % d.x, j = (p / d.x) % d.y, k = p / (d.x * d.y);
        const int64_t nb[6][3] = {{i - 1, j, k}, {i + 1, j, k}, {i, j - 1, k}, {i, j + 1, k}, {i, j, k - 1}, {i, j, k + 1}};
        for (auto& n : nb) {
            if (n[0] < 0 || n[1] < 0 || n[2] < 0 || n[0] >= d.x || n[1] >= d.y || n[2] >= d.z) continue;
            const int64_t np = d.index(n[0], n[1], n[2]);
            if (!seen[size_t(np)] && m[np] > 0.5) {
                seen[size_t(np)] = 1;
                q.push(np);
            }
        }
    }
    return reached == m.count_foreground();
}

int64_t boundary_margin(const MaskVolume& m)
{
    const Dims d = m.dims();
    int64_t margin = std::numeric_limits<int64_t>::max();
    for (int64_t k = 0; k < d.z; ++k)
        for (int64_t j = 0; j < d.y; ++j)
            for (int64_t i = 0; i < d.x; ++i)
                if (m.volume()(i, j, k) > 0.5)
                    margin = std::min({margin, i, j, k, d.x - 1 - i, d.y - 1 - j, d.z - 1 - k});
    return margin;
}

}  // namespace

TEST_CASE("volume save/load round-trips the payload bytes")
{
    Volume3D v(Geometry{{4, 4, 4}, {1, 1, 1}, {0, 0, 0}}, 0.0);
    const fs::path a = temp_path("zeros.vol"), b = temp_path("zeros2.vol");
    save_volume(a, v);
    Volume3D back = load_volume(a);
    save_volume(b, back);
    CHECK(back.dims() == v.dims());
    CHECK(back.values() == v.values());
    CHECK(file_payload(a) == file_payload(b));
}

TEST_CASE("volume spacing and values survive at stored precision")
{
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0, 1);
    Volume3D v(Geometry{{5, 3, 2}, {0.7, 0.7, 0.7}, {-12.25, 3.5, 0.1}});
    for (double& x : v.values()) x = u(rng);
    const fs::path p = temp_path("spacing.vol");
    save_volume(p, v, DType::f64);
    Volume3D back = load_volume(p);
    CHECK(back.spacing() == Vec3{0.7, 0.7, 0.7});
    CHECK(back.origin() == v.origin());
    CHECK(back.values() == v.values());

    save_volume(p, v, DType::f32);
    back = load_volume(p);
    for (int64_t n = 0; n < v.voxels(); ++n) CHECK(back[n] == double(float(v[n])));
}

TEST_CASE("payload shorter than the declared dims is rejected")
{
    const fs::path p = temp_path("short.vol");
    {
        std::ofstream out(p, std::ios::binary);
        out << "format=volume\ndims=8 8 8\nchannels=1\nspacing=1 1 1\norigin=0 0 0\norder=x-fastest\ndtype=f32\ncount=448\n\n";
        std::vector<float> payload(7 * 8 * 8, 0.f);
        out.write(reinterpret_cast<const char*>(payload.data()), std::streamsize(payload.size() * 4));
    }
    CHECK_THROWS_WITH_AS(load_volume(p), doctest::Contains("payload size mismatch"), Error);

    {
        std::ofstream out(p, std::ios::binary);
        out << "format=volume\ndims=8 8 8\nchannels=1\nspacing=1 1 1\norigin=0 0 0\norder=x-fastest\ndtype=f32\ncount=512\n\n";
        std::vector<float> payload(7 * 8 * 8, 0.f);
        out.write(reinterpret_cast<const char*>(payload.data()), std::streamsize(payload.size() * 4));
    }
    CHECK_THROWS_WITH_AS(load_volume(p), doctest::Contains("payload size mismatch"), Error);
}

TEST_CASE("malformed or missing volume files")
{
    CHECK_THROWS_AS(load_volume(temp_path("does_not_exist.vol")), Error);
    const fs::path p = temp_path("bad.vol");
    {
        std::ofstream out(p);
        out << "dims=4 4\nspacing=1 1 1\n";
    }
    CHECK_THROWS_AS(load_volume(p), Error);
    {
        std::ofstream out(p);
        out << "dims=4 4 4\nspacing=1 1 1\norigin=0 0 0\norder=x-fastest\ndtype=i8\ncount=64\n\n";
    }
    CHECK_THROWS_WITH_AS(load_volume(p), doctest::Contains("dtype"), Error);
}

TEST_CASE("ddf, mask and landmark files round-trip")
{
    SynthSample s = synth_sample(5, Dims{16, 16, 16}, 2.0);
    const fs::path pd = temp_path("gt.ddf"), pm = temp_path("m.mask"), pl = temp_path("lm.txt");
    save_ddf(pd, s.ground_truth);
    DisplacementField back = load_ddf(pd);
    CHECK(back.data.span().size() == s.ground_truth.data.span().size());
    CHECK(std::equal(back.data.span().begin(), back.data.span().end(), s.ground_truth.data.span().begin()));

    save_mask(pm, s.sample.fixed_mask);
    MaskVolume m = load_mask(pm);
    CHECK(m.kind() == MaskKind::binary);
    CHECK(m.volume().values() == s.sample.fixed_mask.volume().values());

    save_landmarks(pl, s.sample.fixed_landmarks);
    LandmarkSet lm = load_landmarks(pl);
    CHECK(lm.labels == s.sample.fixed_landmarks.labels);
    CHECK(lm.points == s.sample.fixed_landmarks.points);
}

TEST_CASE("minimal NIfTI-1 reader")
{
    const fs::path p = temp_path("tiny.nii");
    {
        std::string hdr(352, '\0');
        auto put = [&](size_t off, auto v) { std::memcpy(hdr.data() + off, &v, sizeof(v)); };
        put(0, int32_t(348));
        put(40, int16_t(3));
        put(42, int16_t(2));
        put(44, int16_t(3));
        put(46, int16_t(4));
        put(70, int16_t(16));
        put(72, int16_t(32));
        put(80, 0.5f);
        put(84, 0.5f);
        put(88, 2.0f);
        put(108, 352.0f);
        put(112, 2.0f);
        put(116, 1.0f);
        put(268, -3.0f);
        std::ofstream out(p, std::ios::binary);
        out.write(hdr.data(), std::streamsize(hdr.size()));
        for (int n = 0; n < 24; ++n) {
            float v = float(n);
            out.write(reinterpret_cast<const char*>(&v), 4);
        }
    }
    Volume3D v = load_any_volume(p);
    CHECK(v.dims() == Dims{2, 3, 4});
    CHECK(v.spacing() == Vec3{0.5, 0.5, 2.0});
    CHECK(v.origin()[0] == -3.0);
    CHECK(v(1, 2, 3) == doctest::Approx(2.0 * 23 + 1.0));
}

TEST_CASE("synth_sample is deterministic for a seed")
{
    SynthSample a = synth_sample(11, Dims{32, 32, 24}, 2.0);
    SynthSample b = synth_sample(11, Dims{32, 32, 24}, 2.0);
    CHECK(a.sample.moving.values() == b.sample.moving.values());
    CHECK(a.sample.fixed.values() == b.sample.fixed.values());
    CHECK(a.sample.fixed_mask.volume().values() == b.sample.fixed_mask.volume().values());
    CHECK(a.sample.fixed_landmarks.points == b.sample.fixed_landmarks.points);
    CHECK(std::equal(a.ground_truth.data.span().begin(), a.ground_truth.data.span().end(),
                     b.ground_truth.data.span().begin()));
    SynthSample c = synth_sample(12, Dims{32, 32, 24}, 2.0);
    CHECK(c.sample.moving.values() != a.sample.moving.values());
}

TEST_CASE("zero amplitude without noise gives an identical pair")
{
    SynthParams p;
    p.deform_amplitude_mm = 0.0;
    p.noise = false;
    SynthSample s = synth_sample(4, p);
    CHECK(s.sample.moving.values() == s.sample.fixed.values());
    CHECK(s.sample.moving_mask.volume().values() == s.sample.fixed_mask.volume().values());
    CHECK(s.sample.moving_landmarks.points == s.sample.fixed_landmarks.points);
    for (double u : s.ground_truth.data.span()) CHECK(u == 0.0);
}

TEST_CASE("synthetic samples satisfy the phantom invariants")
{
    for (Dims d : {Dims{32, 32, 24}, Dims{16, 16, 16}, Dims{24, 24, 16}}) {
        for (uint64_t seed = 0; seed < 12; ++seed) {
            SynthSample s = synth_sample(seed, d, 2.0);
            const RegistrationSample& r = s.sample;
            for (const MaskVolume* m : {&r.moving_mask, &r.fixed_mask}) {
                const double frac = double(m->count_foreground()) / double(m->voxels());
                CHECK(frac >= 0.05);
                CHECK(frac <= 0.50);
                CHECK(boundary_margin(*m) >= 2);
                CHECK(connected(*m));
            }
            for (double v : r.moving.values()) CHECK((v >= 0.0 && v <= 1.0));
            for (double v : r.fixed.values()) CHECK((v >= 0.0 && v <= 1.0));
            CHECK(r.moving_landmarks.size() >= 3);
            CHECK(r.moving_landmarks.size() <= 8);
            CHECK(r.moving_landmarks.labels == r.fixed_landmarks.labels);
        }
    }
}

TEST_CASE("synth_sample rejects undersized grids")
{
    CHECK_THROWS_AS(synth_sample(1, Dims{15, 32, 32}, 1.0), Error);
    CHECK_THROWS_AS(synth_sample(1, Dims{32, 32, 32}, -1.0), Error);
}

TEST_CASE("gland-centred crop keeps physical placement")
{
    SynthSample s = synth_sample(2, Dims{32, 32, 24}, 1.0);
    RegistrationSample c = crop_to_gland(s.sample, Dims{24, 24, 16});
    CHECK(c.fixed.dims() == Dims{24, 24, 16});
    const Vec3 o = c.fixed.origin();
    const Vec3 v = s.sample.fixed.geometry().mm_to_voxel(o);
    CHECK(c.fixed(3, 4, 5) == s.sample.fixed(int64_t(v[0]) + 3, int64_t(v[1]) + 4, int64_t(v[2]) + 5));
    CHECK(c.fixed_mask.count_foreground() == s.sample.fixed_mask.count_foreground());
    CHECK_THROWS_AS(crop_to_gland(s.sample, Dims{40, 24, 16}), Error);
}

TEST_CASE("diffeomorphic mode stays invertible at large amplitude")
{
    SynthParams p;
    p.diffeomorphic = true;
    p.deform_amplitude_mm = 8.0;
    for (uint64_t seed : {3u, 19u}) {
        SynthSample s = synth_sample(seed, p);
        const Volume3D det = jacobian_determinants(s.ground_truth);
        for (double v : det.values()) CHECK(v > 0.0);
        const MaskVolume warped = resample(s.sample.moving_mask, s.ground_truth, ResampleSpec{.mask_mode = MaskMode::threshold});
        CHECK(warped.volume().values() == s.sample.fixed_mask.volume().values());
        const auto& fl = s.sample.fixed_landmarks.points;
        const auto& ml = s.sample.moving_landmarks.points;
        for (size_t n = 0; n < fl.size(); ++n) CHECK(norm(warp_point(fl[n], s.ground_truth) - ml[n]) < 0.1);
        double peak = 0;
        for (int64_t q = 0; q < s.ground_truth.dims().voxels(); ++q)
            peak = std::max(peak, norm(Vec3{s.ground_truth.data.at(0, q), s.ground_truth.data.at(1, q), s.ground_truth.data.at(2, q)}));
        CHECK(peak > 4.0);
        CHECK(peak <= 8.0 + 1e-9);
    }
}
