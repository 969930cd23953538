#include "vqreg/metrics.hpp"

#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "vqreg/transform.hpp"

namespace vqreg {

double dsc(const MaskVolume& a, const MaskVolume& b)
{
    if (a.kind() != MaskKind::binary || b.kind() != MaskKind::binary) throw Error("dsc: masks must be binary");
    if (!(a.dims() == b.dims())) throw Error("dsc: dims mismatch");
    int64_t inter = 0, sa = 0, sb = 0;
    for (int64_t p = 0; p < a.voxels(); ++p) {
        const bool x = a[p] != 0, y = b[p] != 0;
        inter += x && y;
        sa += x;
        sb += y;
    }
    if (sa + sb == 0) return 1.0;
    return 2.0 * double(inter) / double(sa + sb);
}

Vec3 mask_centroid_mm(const MaskVolume& m)
{
    const Dims& d = m.dims();
    double w = 0;
    Vec3 acc{0, 0, 0};
    for (int64_t k = 0; k < d.z; ++k)
        for (int64_t j = 0; j < d.y; ++j)
            for (int64_t i = 0; i < d.x; ++i) {
                const double v = m[d.index(i, j, k)];
                w += v;
                acc = acc + v * Vec3{double(i), double(j), double(k)};
            }
    if (w <= 0) throw Error("centroid: empty mask");
    return m.geometry().voxel_to_mm((1.0 / w) * acc);
}

double centroid_distance(const MaskVolume& a, const MaskVolume& b)
{
    return norm(mask_centroid_mm(a) - mask_centroid_mm(b));
}

double mse(const Volume3D& a, const Volume3D& b)
{
    if (!(a.dims() == b.dims())) throw Error("mse: dims mismatch");
    double s = 0;
    for (int64_t p = 0; p < a.voxels(); ++p) s += (a[p] - b[p]) * (a[p] - b[p]);
    return s / double(a.voxels());
}

std::vector<double> tre(const RegistrationSample& sample, const DisplacementField& ddf)
{
    const LandmarkSet& f = sample.fixed_landmarks;
    const LandmarkSet& m = sample.moving_landmarks;
    if (f.labels != m.labels) throw Error("tre: fixed and moving landmark labels differ");
    std::vector<double> out;
    out.reserve(f.size());
    for (size_t n = 0; n < f.size(); ++n) {
        if (!ddf.geometry().contains_voxel_coord(ddf.geometry().mm_to_voxel(f.points[n])))
            throw Error("tre: landmark '" + f.labels[n] + "' lies outside the volume");
        out.push_back(norm(warp_point(f.points[n], ddf) - m.points[n]));
    }
    return out;
}

Volume3D folding_map(const DisplacementField& ddf)
{
    ddf.validate();
    const Volume3D det = jacobian_determinants(ddf);
    const Dims& d = ddf.dims();
    Volume3D out(det.geometry());
    for (int64_t k = 1; k < d.z - 1; ++k)
        for (int64_t j = 1; j < d.y - 1; ++j)
            for (int64_t i = 1; i < d.x - 1; ++i) out(i, j, k) = det(i, j, k) <= 0 ? 1.0 : 0.0;
    return out;
}

double neg_jacobian_fraction(const DisplacementField& ddf)
{
    const Dims& d = ddf.dims();
    const Volume3D map = folding_map(ddf);
    double n = 0;
    for (double v : map.values()) n += v;
    return n / double((d.x - 2) * (d.y - 2) * (d.z - 2));
}

EvalRow evaluate_pair(const RegistrationSample& sample, const DisplacementField& ddf)
{
    EvalRow r;
    r.id = sample.subject_id;
    const MaskVolume warped_mask = resample(sample.moving_mask, ddf, ResampleSpec{.mask_mode = MaskMode::threshold});
    const MaskVolume fixed_mask = sample.fixed_mask.thresholded();
    r.dsc = dsc(warped_mask, fixed_mask);
    r.cd = centroid_distance(warped_mask, fixed_mask);
    r.mse = mse(resample(sample.moving, ddf), sample.fixed);
    r.tre = summarize(tre(sample, ddf)).mean;
    r.neg_jac = neg_jacobian_fraction(ddf);
    return r;
}

Summary summarize(const std::vector<double>& values)
{
    if (values.empty()) return {};
    double mean = 0;
    for (double v : values) mean += v;
    mean /= double(values.size());
    double var = 0;
    for (double v : values) var += (v - mean) * (v - mean);
    return {mean, std::sqrt(var / double(values.size()))};
}

std::vector<double> EvalReport::column(const std::string& metric) const
{
    std::vector<double> out;
    for (const EvalRow& r : rows) {
        if (metric == "dsc") out.push_back(r.dsc);
        else if (metric == "cd") out.push_back(r.cd);
        else if (metric == "mse") out.push_back(r.mse);
        else if (metric == "tre") out.push_back(r.tre);
        else if (metric == "neg_jac") out.push_back(r.neg_jac);
        else throw Error("unknown metric '" + metric + "'");
    }
    return out;
}

Summary EvalReport::aggregate(const std::string& metric) const { return summarize(column(metric)); }

namespace {
std::string full(double v)
{
    std::ostringstream s;
    s << std::setprecision(17) << v;
    return s.str();
}

void echo_comment(std::ostringstream& out, const std::string& text)
{
    std::istringstream in(text);
    for (std::string line; std::getline(in, line);) out << "# " << line << '\n';
}
}  // namespace

std::string EvalReport::to_csv() const
{
    std::ostringstream out;
    if (!label.empty()) out << "# report: " << label << '\n';
    for (const auto& [k, v] : metadata) out << "# " << k << ": " << v << '\n';
    echo_comment(out, config_echo);
    out << "id,dsc,cd_mm,mse,tre_mm,neg_jac\n";
    for (const EvalRow& r : rows)
        out << r.id << ',' << full(r.dsc) << ',' << full(r.cd) << ',' << full(r.mse) << ',' << full(r.tre) << ','
            << full(r.neg_jac) << '\n';
    return out.str();
}

std::string format_mean_std(const Summary& s, int precision)
{
    std::ostringstream out;
    out << std::fixed << std::setprecision(precision) << s.mean << "±" << s.std;
    return out.str();
}

std::string format_table(const std::vector<EvalReport>& reports)
{
    size_t width = 6;
    for (const EvalReport& r : reports) width = std::max(width, r.label.size());
    std::ostringstream out;
    auto cell = [&](const std::string& s, size_t w) {
        out << s;
        // '±' is two bytes but one column
        const size_t shown = s.size() - (s.find("±") != std::string::npos ? 1 : 0);
        for (size_t n = shown; n < w; ++n) out << ' ';
    };
    cell("method", width + 2);
    for (const char* h : {"DSC", "CD (mm)", "MSE", "TRE (mm)", "NegJac"}) cell(h, 18);
    out << '\n';
    for (const EvalReport& r : reports) {
        cell(r.label, width + 2);
        cell(format_mean_std(r.aggregate("dsc"), 3), 18);
        cell(format_mean_std(r.aggregate("cd"), 3), 18);
        cell(format_mean_std(r.aggregate("mse"), 5), 18);
        cell(format_mean_std(r.aggregate("tre"), 3), 18);
        cell(format_mean_std(r.aggregate("neg_jac"), 4), 18);
        out << '\n';
    }
    return out.str();
}

double paired_t_test(const std::vector<double>& a, const std::vector<double>& b)
{
    if (a.size() != b.size()) throw Error("paired_t_test: sample sizes differ");
    if (a.size() < 2) throw Error("paired_t_test: need at least two pairs");
    const double n = double(a.size());
    double mean = 0;
    for (size_t i = 0; i < a.size(); ++i) mean += a[i] - b[i];
    mean /= n;
    double ss = 0;
    for (size_t i = 0; i < a.size(); ++i) ss += (a[i] - b[i] - mean) * (a[i] - b[i] - mean);
    const double sd = std::sqrt(ss / (n - 1));
    if (sd == 0) return mean == 0 ? 1.0 : 0.0;
    const double t = mean / (sd / std::sqrt(n));
    const boost::math::students_t dist(n - 1);
    return 2 * boost::math::cdf(boost::math::complement(dist, std::fabs(t)));
}

}  // namespace vqreg
