#include "vqreg/synth.hpp"

#include <algorithm>
#include <numbers>
#include <random>

#include "vqreg/transform.hpp"

namespace vqreg {

namespace {

struct Blob {
    Vec3 center;
    double radius;
    double value;
};

struct Bump {
    Vec3 center;
    double sigma;
    Vec3 direction;
};

double sigmoid(double t) { return 1.0 / (1.0 + std::exp(-t)); }

/// Continuous phantom in voxel coordinates.
struct Phantom {
    Vec3 center;
    Vec3 radii;
    std::array<Vec3, 3> tex_freq;
    std::array<double, 3> tex_phase;
    std::vector<Blob> blobs;

    [[nodiscard]] double rho(const Vec3& x) const
    {
        double s = 0;
        for (int a = 0; a < 3; ++a) s += ((x[a] - center[a]) / radii[a]) * ((x[a] - center[a]) / radii[a]);
        return std::sqrt(s);
    }

    [[nodiscard]] double intensity(const Vec3& x) const
    {
        const double rmin = std::min({radii[0], radii[1], radii[2]});
        const double gland = sigmoid((1.0 - rho(x)) * rmin / 0.4);
        double texture = 0;
        for (int n = 0; n < 3; ++n)
            texture += std::sin(tex_freq[n][0] * x[0] + tex_freq[n][1] * x[1] + tex_freq[n][2] * x[2] + tex_phase[n]);
        double v = 0.2 + gland * (0.4 + 0.05 * texture / 3.0);
        for (const Blob& b : blobs) {
            const double w = sigmoid((b.radius - norm(x - b.center)) / 0.35);
            v = v * (1.0 - w) + b.value * w;
        }
        return v;
    }
};

/// Displacement in voxels: scale · taper(x) · Σ bumps, expressed per axis in mm then divided by spacing.
struct Deformation {
    std::vector<Bump> bumps;
    double scale = 0;
    Dims dims;
    Vec3 spacing;

    [[nodiscard]] double taper(const Vec3& x) const
    {
        constexpr double ramp = 3.0;
        double w = 1;
        for (int a = 0; a < 3; ++a) {
            const double d = std::min(x[a], double(dims[a] - 1) - x[a]);
            const double t = std::clamp(d / ramp, 0.0, 1.0);
            const double s = std::sin(0.5 * std::numbers::pi * t);
            w *= s * s;
        }
        return w;
    }

    [[nodiscard]] Vec3 raw_mm(const Vec3& x) const
    {
        Vec3 u{0, 0, 0};
        for (const Bump& b : bumps) {
            const Vec3 r = x - b.center;
            const double g = std::exp(-(r[0] * r[0] + r[1] * r[1] + r[2] * r[2]) / (2 * b.sigma * b.sigma));
            u = u + g * b.direction;
        }
        return taper(x) * u;
    }

    [[nodiscard]] Vec3 velocity(const Vec3& x) const
    {
        const Vec3 mm = scale * raw_mm(x);
        return {mm[0] / spacing[0], mm[1] / spacing[1], mm[2] / spacing[2]};
    }

    // RK4 over unit time along `sign` × velocity; returns the end point.
    [[nodiscard]] Vec3 flow(const Vec3& x, double sign) const
    {
        constexpr int steps = 32;
        const double h = sign / steps;
        Vec3 y = x;
        for (int n = 0; n < steps; ++n) {
            const Vec3 k1 = velocity(y);
            const Vec3 k2 = velocity(y + (0.5 * h) * k1);
            const Vec3 k3 = velocity(y + (0.5 * h) * k2);
            const Vec3 k4 = velocity(y + h * k3);
            y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        return y;
    }

    bool integrate = false;

    [[nodiscard]] Vec3 voxels(const Vec3& x) const { return integrate ? flow(x, 1.0) - x : velocity(x); }

    /// Fixed-grid point q with q + u(q) = c.
    [[nodiscard]] Vec3 preimage(const Vec3& c) const
    {
        if (integrate) return flow(c, -1.0);
        // Fixed-point iteration; the additive field is a contraction at the supported amplitudes.
        Vec3 q = c;
        for (int it = 0; it < 200; ++it) {
            const Vec3 next = c - voxels(q);
            const bool done = norm(next - q) < 1e-13;
            q = next;
            if (done) break;
        }
        return q;
    }
};

Vec3 random_unit(std::mt19937_64& rng)
{
    std::normal_distribution<double> n(0.0, 1.0);
    for (;;) {
        Vec3 v{n(rng), n(rng), n(rng)};
        const double l = norm(v);
        if (l > 1e-6) return (1.0 / l) * v;
    }
}

}  // namespace

SynthSample synth_sample(uint64_t seed, const SynthParams& params)
{
    const Dims d = params.dims;
    if (d.x < 16 || d.y < 16 || d.z < 16) throw Error("synth_sample: dims must be >= 16 per axis to contain the gland");
    if (!(params.deform_amplitude_mm >= 0)) throw Error("synth_sample: deform_amplitude must be >= 0");
    const Geometry geom{d, params.spacing, {0, 0, 0}};
    geom.validate();

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

    Phantom ph;
    for (int a = 0; a < 3; ++a) {
        ph.center[a] = 0.5 * double(d[a] - 1) + uniform(-1.0, 1.0);
        ph.radii[a] = double(d[a]) * uniform(0.24, 0.30);
    }
    for (int n = 0; n < 3; ++n) {
        const Vec3 dir = random_unit(rng);
        ph.tex_freq[n] = uniform(0.2, 0.5) * dir;
        ph.tex_phase[n] = uniform(0.0, 2 * std::numbers::pi);
    }
    const int n_blobs = std::uniform_int_distribution<int>(3, 8)(rng);
    // small glands get proportionally smaller blobs so three always fit
    const double blob_scale = std::min(1.0, std::min({ph.radii[0], ph.radii[1], ph.radii[2]}) / 5.5);
    for (int attempt = 0; attempt < 20000 && int(ph.blobs.size()) < n_blobs; ++attempt) {
        Blob b;
        b.radius = blob_scale * uniform(1.2, 2.0);
        for (int a = 0; a < 3; ++a) b.center[a] = ph.center[a] + ph.radii[a] * uniform(-0.7, 0.7);
        if (ph.rho(b.center) > 0.7) continue;
        bool clear = true;
        for (const Blob& o : ph.blobs)
            if (norm(o.center - b.center) < o.radius + b.radius + 0.5) clear = false;
        if (!clear) continue;
        b.value = unit(rng) < 0.5 ? 0.9 : 0.05;
        ph.blobs.push_back(b);
    }
    if (ph.blobs.size() < 3) throw Error("synth_sample: could not place internal structures");

    Deformation def;
    def.dims = d;
    def.spacing = params.spacing;
    def.integrate = params.diffeomorphic;
    const int n_bumps = std::uniform_int_distribution<int>(3, 6)(rng);
    for (int n = 0; n < n_bumps; ++n) {
        Bump b;
        for (int a = 0; a < 3; ++a) b.center[a] = ph.center[a] + ph.radii[a] * uniform(-1.0, 1.0);
        b.sigma = uniform(4.0, 8.0);
        b.direction = uniform(0.5, 1.0) * random_unit(rng);
        def.bumps.push_back(b);
    }
    double peak = 0;
    for (int64_t k = 0; k < d.z; ++k)
        for (int64_t j = 0; j < d.y; ++j)
            for (int64_t i = 0; i < d.x; ++i) peak = std::max(peak, norm(def.raw_mm({double(i), double(j), double(k)})));
    def.scale = (params.deform_amplitude_mm > 0 && peak > 0) ? params.deform_amplitude_mm / peak : 0.0;

    std::mt19937_64 noise_rng(seed ^ 0x9e3779b97f4a7c15ULL);
    std::normal_distribution<double> noise(0.0, params.noise_sigma);
    auto noisy = [&](double v) { return params.noise ? std::clamp(v + noise(noise_rng), 0.0, 1.0) : std::clamp(v, 0.0, 1.0); };

    SynthSample out;
    out.ground_truth = DisplacementField(geom);
    Volume3D moving(geom), fixed(geom), moving_mask(geom);
    for (int64_t k = 0; k < d.z; ++k)
        for (int64_t j = 0; j < d.y; ++j)
            for (int64_t i = 0; i < d.x; ++i) {
                const Vec3 x{double(i), double(j), double(k)};
                const int64_t p = d.index(i, j, k);
                const Vec3 u = def.voxels(x);
                for (int c = 0; c < 3; ++c) out.ground_truth.data.at(c, p) = u[c];
                moving[p] = ph.intensity(x);
                fixed[p] = ph.intensity(x + u);
                moving_mask[p] = ph.rho(x) <= 1.0 ? 1.0 : 0.0;
            }
    for (int64_t p = 0; p < moving.voxels(); ++p) moving[p] = noisy(moving[p]);
    for (int64_t p = 0; p < fixed.voxels(); ++p) fixed[p] = noisy(fixed[p]);

    RegistrationSample& s = out.sample;
    s.subject_id = "subj-" + std::to_string(seed);
    s.moving = std::move(moving);
    s.fixed = std::move(fixed);
    s.moving_mask = MaskVolume(std::move(moving_mask), MaskKind::binary);
    s.fixed_mask = resample(s.moving_mask, out.ground_truth, ResampleSpec{.mask_mode = MaskMode::threshold});

    for (size_t n = 0; n < ph.blobs.size(); ++n) {
        const Vec3 c = ph.blobs[n].center;
        const Vec3 q = def.preimage(c);
        const std::string label = "L" + std::to_string(n + 1);
        s.moving_landmarks.labels.push_back(label);
        s.moving_landmarks.points.push_back(geom.voxel_to_mm(c));
        s.fixed_landmarks.labels.push_back(label);
        s.fixed_landmarks.points.push_back(geom.voxel_to_mm(q));
    }
    s.validate();
    return out;
}

SynthSample synth_sample(uint64_t seed, const Dims& dims, double deform_amplitude_mm)
{
    SynthParams p;
    p.dims = dims;
    p.deform_amplitude_mm = deform_amplitude_mm;
    return synth_sample(seed, p);
}

std::vector<SynthSample> synth_dataset(int count, uint64_t base_seed, const SynthParams& params)
{
    std::vector<SynthSample> out;
    out.reserve(static_cast<size_t>(count));
    for (int n = 0; n < count; ++n) out.push_back(synth_sample(base_seed + uint64_t(n), params));
    return out;
}

}  // namespace vqreg
