#include "vqreg/vq.hpp"

#include <algorithm>
#include <limits>
#include <random>

#include "vqreg/volume_io.hpp"

namespace vqreg {

std::string to_string(CodebookInit k) { return k == CodebookInit::random ? "random" : "kmeans"; }

std::string to_string(QuantizerName n)
{
    switch (n) {
    case QuantizerName::vanilla: return "vanilla";
    case QuantizerName::hierarchical: return "hierarchical";
    case QuantizerName::collaborative: return "collaborative";
    }
    return "?";
}

QuantizerName parse_quantizer_name(const std::string& s)
{
    if (s == "vanilla" || s == "v") return QuantizerName::vanilla;
    if (s == "hierarchical" || s == "h") return QuantizerName::hierarchical;
    if (s == "collaborative" || s == "c") return QuantizerName::collaborative;
    throw Error("unknown quantizer name '" + s + "'");
}

void Codebook::validate() const
{
    if (K < 1 || C < 1) throw Error("Codebook: K and C must be >= 1");
    if (static_cast<int64_t>(codes.size()) != K * C) throw Error("Codebook: payload is not K x C");
    for (double v : codes)
        if (!std::isfinite(v)) throw Error("Codebook: non-finite code value");
}

Codebook random_codebook(int64_t K, int64_t C, QuantizerName name, uint64_t seed)
{
    if (K < 1 || C < 1) throw Error("random_codebook: K and C must be >= 1");
    Codebook cb{K, C, std::vector<double>(size_t(K * C)), CodebookInit::random, name};
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0 / double(K), 1.0 / double(K));
    for (double& v : cb.codes) v = u(rng);
    return cb;
}

void save_codebook(const std::filesystem::path& path, const Codebook& cb)
{
    cb.validate();
    ArrayFile f;
    f.dtype = DType::f64;
    f.set("format", "codebook");
    f.set("K", std::to_string(cb.K));
    f.set("C", std::to_string(cb.C));
    f.set("init_kind", to_string(cb.init_kind));
    f.set("name", to_string(cb.name));
    f.set("order", "row-major");
    f.payload = cb.codes;
    write_array_file(path, f);
}

Codebook load_codebook(const std::filesystem::path& path)
{
    ArrayFile f = read_array_file(path);
    if (f.get("format") != "codebook") throw Error("load_codebook: not a codebook file: " + path.string());
    Codebook cb;
    cb.K = std::stoll(f.get("K"));
    cb.C = std::stoll(f.get("C"));
    const std::string& kind = f.get("init_kind");
    if (kind != "random" && kind != "kmeans") throw Error("load_codebook: unknown init_kind '" + kind + "'");
    cb.init_kind = kind == "random" ? CodebookInit::random : CodebookInit::kmeans;
    cb.name = parse_quantizer_name(f.get("name"));
    cb.codes = std::move(f.payload);
    cb.validate();
    return cb;
}

template <typename T>
QuantResult<T> quantize(const Tensor<T>& features, std::span<const T> codes, int64_t K, T beta)
{
    const int64_t C = features.channels();
    if (K < 1 || static_cast<int64_t>(codes.size()) != K * C)
        throw Error("quantize: channel mismatch between features (C=" + std::to_string(C) + ") and codebook");
    for (T v : features.span())
        if (!std::isfinite(v)) throw Error("quantize: non-finite feature value");
    const int64_t P = features.voxels();
    QuantResult<T> r{Tensor<T>(C, features.dims()), std::vector<int32_t>(size_t(P)), T(0)};
#pragma omp parallel for schedule(static)
    for (int64_t p = 0; p < P; ++p) {
        int32_t best = 0;
        T best_d = std::numeric_limits<T>::infinity();
        for (int64_t k = 0; k < K; ++k) {
            const T* code = codes.data() + k * C;
            T d = 0;
            for (int64_t c = 0; c < C; ++c) {
                const T diff = features.at(c, p) - code[c];
                d += diff * diff;
            }
            if (d < best_d) {
                best_d = d;
                best = static_cast<int32_t>(k);
            }
        }
        r.indices[size_t(p)] = best;
        for (int64_t c = 0; c < C; ++c) r.quantized.at(c, p) = codes[size_t(best * C + c)];
    }
    r.loss = quant_loss(features, r.quantized, beta);
    return r;
}

QuantResult<double> quantize(const Tensor<double>& features, const Codebook& cb, double beta)
{
    cb.validate();
    if (cb.C != features.channels()) throw Error("quantize: channel mismatch between features and codebook");
    return quantize<double>(features, std::span<const double>(cb.codes), cb.K, beta);
}

template <typename T>
T quant_loss(const Tensor<T>& features, const Tensor<T>& quantized, T beta)
{
    if (!features.same_shape(quantized)) throw Error("quant_loss: shape mismatch");
    // Both terms share the value ‖f − z‖²; stop-gradient only changes where gradients flow.
    double sq = 0;
    for (int64_t n = 0; n < features.size(); ++n) {
        const double d = double(features[n]) - double(quantized[n]);
        sq += d * d;
    }
    return T(sq + double(beta) * sq);
}

template <typename T>
void quant_loss_backward(const Tensor<T>& features, const Tensor<T>& quantized, std::span<const int32_t> indices,
                         T beta, T scale, Tensor<T>& grad_features, std::span<T> grad_codes)
{
    if (!features.same_shape(quantized) || !features.same_shape(grad_features))
        throw Error("quant_loss_backward: shape mismatch");
    const int64_t C = features.channels();
    const int64_t P = features.voxels();
    if (static_cast<int64_t>(indices.size()) != P) throw Error("quant_loss_backward: index count mismatch");
    for (int64_t c = 0; c < C; ++c)
        for (int64_t p = 0; p < P; ++p) {
            const T diff = features.at(c, p) - quantized.at(c, p);
            grad_features.at(c, p) += scale * T(2) * beta * diff;
        }
    if (!grad_codes.empty()) {
        for (int64_t p = 0; p < P; ++p) {
            T* row = grad_codes.data() + int64_t(indices[size_t(p)]) * C;
            for (int64_t c = 0; c < C; ++c) row[c] += scale * T(2) * (quantized.at(c, p) - features.at(c, p));
        }
    }
}

template <typename T>
Tensor<T> straight_through_backward(const Tensor<T>& grad_z)
{
    return grad_z;
}

std::vector<int64_t> code_usage(std::span<const int32_t> indices, int64_t K)
{
    std::vector<int64_t> counts(size_t(K), 0);
    for (int32_t i : indices) {
        if (i < 0 || i >= K) throw Error("code_usage: index out of range");
        ++counts[size_t(i)];
    }
    return counts;
}

namespace {

double sq_dist(const double* a, const double* b, int64_t C)
{
    double d = 0;
    for (int64_t c = 0; c < C; ++c) d += (a[c] - b[c]) * (a[c] - b[c]);
    return d;
}

/// Assigns each vector to its nearest centre; returns the objective.
double assign(std::span<const double> x, int64_t C, std::span<const double> centers, std::vector<int32_t>& out)
{
    const int64_t N = static_cast<int64_t>(x.size()) / C;
    const int64_t K = static_cast<int64_t>(centers.size()) / C;
    std::vector<double> dist(static_cast<size_t>(N));
#pragma omp parallel for schedule(static)
    for (int64_t n = 0; n < N; ++n) {
        int32_t best = 0;
        double bd = std::numeric_limits<double>::infinity();
        for (int64_t k = 0; k < K; ++k) {
            const double d = sq_dist(x.data() + n * C, centers.data() + k * C, C);
            if (d < bd) {
                bd = d;
                best = int32_t(k);
            }
        }
        out[size_t(n)] = best;
        dist[size_t(n)] = bd;
    }
    double total = 0;
    for (double d : dist) total += d;
    return total;
}

}  // namespace

double quantization_error(std::span<const double> vectors, int64_t C, std::span<const double> centers)
{
    if (C < 1 || vectors.size() % size_t(C) != 0 || centers.empty() || centers.size() % size_t(C) != 0)
        throw Error("quantization_error: shape mismatch");
    std::vector<int32_t> a(vectors.size() / size_t(C));
    return assign(vectors, C, centers, a);
}

KMeansResult kmeans(std::span<const double> vectors, int64_t C, int64_t K, uint64_t seed, int max_iters)
{
    if (vectors.empty()) throw Error("kmeans: empty input");
    if (C < 1 || vectors.size() % size_t(C) != 0) throw Error("kmeans: input is not N x C");
    const int64_t N = static_cast<int64_t>(vectors.size()) / C;
    if (K < 1 || N < K) throw Error("kmeans: need N >= K (N=" + std::to_string(N) + ", K=" + std::to_string(K) + ")");
    for (double v : vectors)
        if (!std::isfinite(v)) throw Error("kmeans: non-finite input");

    KMeansResult r;
    r.centers.resize(size_t(K * C));
    std::mt19937_64 rng(seed);

    // k-means++ seeding
    std::vector<double> d2(size_t(N), std::numeric_limits<double>::infinity());
    int64_t first = std::uniform_int_distribution<int64_t>(0, N - 1)(rng);
    std::copy_n(vectors.data() + first * C, C, r.centers.data());
    for (int64_t k = 1; k < K; ++k) {
        const double* prev = r.centers.data() + (k - 1) * C;
        double total = 0;
        for (int64_t n = 0; n < N; ++n) {
            d2[size_t(n)] = std::min(d2[size_t(n)], sq_dist(vectors.data() + n * C, prev, C));
            total += d2[size_t(n)];
        }
        int64_t pick = 0;
        if (total > 0) {
            double target = std::uniform_real_distribution<double>(0.0, total)(rng);
            pick = -1;
            for (int64_t n = 0; n < N; ++n) {
                if (d2[size_t(n)] <= 0) continue;
                target -= d2[size_t(n)];
                pick = n;
                if (target < 0) break;
            }
        } else {
            pick = std::uniform_int_distribution<int64_t>(0, N - 1)(rng);
        }
        std::copy_n(vectors.data() + pick * C, C, r.centers.data() + k * C);
    }

    r.assignment.assign(size_t(N), -1);
    std::vector<int32_t> next(static_cast<size_t>(N));
    r.objective.push_back(assign(vectors, C, r.centers, next));
    r.assignment = next;
    std::vector<double> sums(static_cast<size_t>(K * C));
    std::vector<int64_t> counts(static_cast<size_t>(K));
    for (int it = 0; it < max_iters; ++it) {
        std::fill(sums.begin(), sums.end(), 0.0);
        std::fill(counts.begin(), counts.end(), 0);
        for (int64_t n = 0; n < N; ++n) {
            const int32_t a = r.assignment[size_t(n)];
            ++counts[size_t(a)];
            for (int64_t c = 0; c < C; ++c) sums[size_t(a * C + c)] += vectors[size_t(n * C + c)];
        }
        for (int64_t k = 0; k < K; ++k)
            if (counts[size_t(k)] > 0)
                for (int64_t c = 0; c < C; ++c) r.centers[size_t(k * C + c)] = sums[size_t(k * C + c)] / double(counts[size_t(k)]);
        r.iterations = it + 1;
        const double obj = assign(vectors, C, r.centers, next);
        r.objective.push_back(obj);
        if (next == r.assignment) break;
        r.assignment = next;
    }
    return r;
}

template QuantResult<float> quantize<float>(const Tensor<float>&, std::span<const float>, int64_t, float);
template QuantResult<double> quantize<double>(const Tensor<double>&, std::span<const double>, int64_t, double);
template float quant_loss<float>(const Tensor<float>&, const Tensor<float>&, float);
template double quant_loss<double>(const Tensor<double>&, const Tensor<double>&, double);
template void quant_loss_backward<float>(const Tensor<float>&, const Tensor<float>&, std::span<const int32_t>, float,
                                         float, Tensor<float>&, std::span<float>);
template void quant_loss_backward<double>(const Tensor<double>&, const Tensor<double>&, std::span<const int32_t>,
                                          double, double, Tensor<double>&, std::span<double>);
template Tensor<float> straight_through_backward<float>(const Tensor<float>&);
template Tensor<double> straight_through_backward<double>(const Tensor<double>&);

}  // namespace vqreg
