#include "vqreg/losses.hpp"

#include <cmath>

#include "vqreg/transform.hpp"
#include "vqreg/volume_io.hpp"

namespace vqreg {

void LossWeights::validate() const
{
    for (double v : {quant, ssd, dice, bending, beta})
        if (!std::isfinite(v) || v < 0) throw Error("LossWeights: weights must be finite and >= 0");
}

std::vector<std::pair<std::string, std::string>> LossWeights::to_kv() const
{
    return {{"lambda_quant", format_real(quant)},
            {"lambda_ssd", format_real(ssd)},
            {"lambda_dice", format_real(dice)},
            {"lambda_bending", format_real(bending)},
            {"beta", format_real(beta)}};
}

LossWeights LossWeights::from_kv(const std::vector<std::pair<std::string, std::string>>& kv)
{
    LossWeights w;
    for (const auto& [k, v] : kv) {
        double x = 0;
        try {
            x = std::stod(v);
        } catch (const std::logic_error&) {
            throw Error("loss config: bad value for '" + k + "': '" + v + "'");
        }
        if (k == "lambda_quant") w.quant = x;
        else if (k == "lambda_ssd") w.ssd = x;
        else if (k == "lambda_dice") w.dice = x;
        else if (k == "lambda_bending") w.bending = x;
        else if (k == "beta") w.beta = x;
        else throw Error("unknown loss key '" + k + "'");
    }
    w.validate();
    return w;
}

template <typename T>
double ssd_loss(const Tensor<T>& warped, const Tensor<T>& fixed, Tensor<T>* grad)
{
    if (!warped.same_shape(fixed)) throw Error("ssd_loss: dims mismatch");
    const double n = double(warped.size());
    double s = 0;
    for (int64_t i = 0; i < warped.size(); ++i) {
        const double d = double(warped[i]) - double(fixed[i]);
        s += d * d;
    }
    if (grad) {
        *grad = Tensor<T>(warped.channels(), warped.dims());
        for (int64_t i = 0; i < warped.size(); ++i) (*grad)[i] = T(2.0 * (double(warped[i]) - double(fixed[i])) / n);
    }
    return s / n;
}

template <typename T>
double dice_loss(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>* grad)
{
    if (!a.same_shape(b)) throw Error("dice_loss: dims mismatch");
    double ab = 0, sa = 0, sb = 0;
    for (int64_t i = 0; i < a.size(); ++i) {
        ab += double(a[i]) * double(b[i]);
        sa += double(a[i]);
        sb += double(b[i]);
    }
    const double num = 2 * ab + kDiceEps;
    const double den = sa + sb + kDiceEps;
    if (grad) {
        *grad = Tensor<T>(a.channels(), a.dims());
        for (int64_t i = 0; i < a.size(); ++i) (*grad)[i] = T(-(2 * double(b[i]) * den - num) / (den * den));
    }
    return -num / den;
}

template <typename T>
double bending_energy(const Tensor<T>& ddf, Tensor<T>* grad)
{
    const Dims d = ddf.dims();
    if (d.x < 3 || d.y < 3 || d.z < 3) throw Error("bending_energy: need at least 3 voxels per axis, got " + to_string(d));
    if (grad && !grad->same_shape(ddf)) throw Error("bending_energy: gradient shape mismatch");
    const int64_t sx = 1, sy = d.x, sz = d.x * d.y;
    const double count = double((d.x - 2) * (d.y - 2) * (d.z - 2) * ddf.channels());
    const int64_t step[3] = {sx, sy, sz};
    double total = 0;
    for (int64_t c = 0; c < ddf.channels(); ++c) {
        const T* u = ddf.channel(c);
        T* g = grad ? grad->channel(c) : nullptr;
        double ch_sum = 0;
#pragma omp parallel for reduction(+ : ch_sum) schedule(static) if (!grad)
        for (int64_t k = 1; k < d.z - 1; ++k)
            for (int64_t j = 1; j < d.y - 1; ++j)
                for (int64_t i = 1; i < d.x - 1; ++i) {
                    const int64_t p = d.index(i, j, k);
                    for (int a = 0; a < 3; ++a) {
                        const int64_t s = step[a];
                        const double v = double(u[p + s]) - 2 * double(u[p]) + double(u[p - s]);
                        ch_sum += v * v;
                        if (g) {
                            const double f = 2 * v / count;
                            g[p + s] += T(f);
                            g[p] += T(-2 * f);
                            g[p - s] += T(f);
                        }
                    }
                    for (int a = 0; a < 3; ++a)
                        for (int b = a + 1; b < 3; ++b) {
                            const int64_t s = step[a], t = step[b];
                            const double v =
                                0.25 * (double(u[p + s + t]) - double(u[p + s - t]) - double(u[p - s + t]) + double(u[p - s - t]));
                            ch_sum += 2 * v * v;
                            if (g) {
                                const double f = 2 * 2 * v * 0.25 / count;
                                g[p + s + t] += T(f);
                                g[p + s - t] -= T(f);
                                g[p - s + t] -= T(f);
                                g[p - s - t] += T(f);
                            }
                        }
                }
        total += ch_sum;
    }
    return total / count;
}

double ssd_loss(const Volume3D& warped, const Volume3D& fixed)
{
    if (!(warped.dims() == fixed.dims())) throw Error("ssd_loss: dims mismatch");
    return ssd_loss(warped.to_tensor<double>(), fixed.to_tensor<double>());
}

double dice_loss(const MaskVolume& warped, const MaskVolume& fixed)
{
    if (!(warped.dims() == fixed.dims())) throw Error("dice_loss: dims mismatch");
    return dice_loss(warped.volume().to_tensor<double>(), fixed.volume().to_tensor<double>());
}

double bending_energy(const DisplacementField& ddf)
{
    ddf.validate();
    return bending_energy(ddf.data);
}

double total_loss(LossTerms& t, const LossWeights& w)
{
    w.validate();
    t.total = w.quant * (t.vanilla + t.hierarchical + t.collaborative) + w.ssd * t.ssd + w.dice * t.dice +
              w.bending * t.bending;
    return t.total;
}

template <typename T>
PairTensors<T> PairTensors<T>::from(const RegistrationSample& s)
{
    return {s.moving.to_tensor<T>(), s.fixed.to_tensor<T>(), s.moving_mask.volume().to_tensor<T>(),
            s.fixed_mask.volume().to_tensor<T>()};
}

template <typename T>
LossTerms registration_objective(const Tensor<T>& ddf, const PairTensors<T>& pair, const QuantLosses& quant,
                                 const LossWeights& w, Tensor<T>* grad_ddf)
{
    LossTerms t;
    t.vanilla = quant.vanilla;
    t.hierarchical = quant.hierarchical;
    t.collaborative = quant.collaborative;

    Tensor<T> warped = warp(pair.moving, ddf);
    Tensor<T> warped_mask = warp(pair.moving_mask, ddf);
    Tensor<T> g_img, g_mask;
    t.ssd = ssd_loss(warped, pair.fixed, grad_ddf ? &g_img : nullptr);
    t.dice = dice_loss(warped_mask, pair.fixed_mask, grad_ddf ? &g_mask : nullptr);
    if (grad_ddf) {
        *grad_ddf = Tensor<T>(3, ddf.dims());
        t.bending = bending_energy(ddf, grad_ddf);
        for (T& v : grad_ddf->span()) v *= T(w.bending);
        for (T& v : g_img.span()) v *= T(w.ssd);
        for (T& v : g_mask.span()) v *= T(w.dice);
        warp_backward<T>(pair.moving, ddf, g_img, nullptr, grad_ddf);
        warp_backward<T>(pair.moving_mask, ddf, g_mask, nullptr, grad_ddf);
    } else {
        t.bending = bending_energy(ddf);
    }
    total_loss(t, w);
    return t;
}

#define VQREG_LOSS_INSTANTIATE(T)                                                                       \
    template double ssd_loss<T>(const Tensor<T>&, const Tensor<T>&, Tensor<T>*);                        \
    template double dice_loss<T>(const Tensor<T>&, const Tensor<T>&, Tensor<T>*);                       \
    template double bending_energy<T>(const Tensor<T>&, Tensor<T>*);                                    \
    template struct PairTensors<T>;                                                                     \
    template LossTerms registration_objective<T>(const Tensor<T>&, const PairTensors<T>&, const QuantLosses&, \
                                                 const LossWeights&, Tensor<T>*);

VQREG_LOSS_INSTANTIATE(float)
VQREG_LOSS_INSTANTIATE(double)

}  // namespace vqreg
