#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "vqreg/tensor.hpp"

namespace vqreg {

enum class CodebookInit { random, kmeans };
enum class QuantizerName { vanilla, hierarchical, collaborative };

std::string to_string(CodebookInit k);
std::string to_string(QuantizerName n);
QuantizerName parse_quantizer_name(const std::string& s);

/// K code vectors of dimension C, stored row-major.
struct Codebook {
    int64_t K = 0;
    int64_t C = 0;
    std::vector<double> codes;
    CodebookInit init_kind = CodebookInit::random;
    QuantizerName name = QuantizerName::vanilla;

    [[nodiscard]] std::span<const double> row(int64_t k) const { return {codes.data() + k * C, size_t(C)}; }
    void validate() const;
};

/// Rows drawn uniformly from [-1/K, 1/K].
Codebook random_codebook(int64_t K, int64_t C, QuantizerName name, uint64_t seed);

void save_codebook(const std::filesystem::path& path, const Codebook& cb);
Codebook load_codebook(const std::filesystem::path& path);

template <typename T>
struct QuantResult {
    Tensor<T> quantized;           // z: every vector is a codebook row
    std::vector<int32_t> indices;  // per raster position, 0-based code index
    T loss = 0;                    // quant_loss(features, quantized, beta)
};

/// Nearest code per position under squared Euclidean distance; ties go to the lowest index.
/// `codes` is K × C row-major with C == features.channels().
template <typename T>
QuantResult<T> quantize(const Tensor<T>& features, std::span<const T> codes, int64_t K, T beta = T(0.25));

QuantResult<double> quantize(const Tensor<double>& features, const Codebook& cb, double beta = 0.25);

/// Σ_p ‖sg(f_p) − z_p‖² + β‖f_p − sg(z_p)‖².
template <typename T>
T quant_loss(const Tensor<T>& features, const Tensor<T>& quantized, T beta);

/// Gradient of `scale · quant_loss`. The codebook term reaches only the selected code rows,
/// the commitment term only the features. Both outputs are accumulated (+=).
template <typename T>
void quant_loss_backward(const Tensor<T>& features, const Tensor<T>& quantized, std::span<const int32_t> indices,
                         T beta, T scale, Tensor<T>& grad_features, std::span<T> grad_codes);

/// Straight-through estimator: ∂z/∂f is the identity; the codebook receives nothing from this path.
template <typename T>
Tensor<T> straight_through_backward(const Tensor<T>& grad_z);

/// Per-code selection counts.
std::vector<int64_t> code_usage(std::span<const int32_t> indices, int64_t K);

struct KMeansResult {
    std::vector<double> centers;    // K × C row-major
    std::vector<int32_t> assignment;
    std::vector<double> objective;  // after each assignment step; non-increasing
    int iterations = 0;
};

/// Lloyd's algorithm with k-means++ seeding over N row-major C-dimensional vectors.
/// Stops at `max_iters` or when the assignment no longer changes. Empty clusters keep
/// their previous centre.
KMeansResult kmeans(std::span<const double> vectors, int64_t C, int64_t K, uint64_t seed, int max_iters = 100);

/// Sum of squared distances of each vector to its nearest centre.
double quantization_error(std::span<const double> vectors, int64_t C, std::span<const double> centers);

}  // namespace vqreg
