#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace vqreg {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Grid extent in voxels, x fastest in memory.
struct Dims {
    int64_t x = 1;
    int64_t y = 1;
    int64_t z = 1;

    [[nodiscard]] int64_t voxels() const { return x * y * z; }
    [[nodiscard]] int64_t index(int64_t i, int64_t j, int64_t k) const { return (k * y + j) * x + i; }
    [[nodiscard]] bool valid() const { return x >= 1 && y >= 1 && z >= 1; }
    [[nodiscard]] Dims halved() const { return {(x + 1) / 2, (y + 1) / 2, (z + 1) / 2}; }
    [[nodiscard]] Dims doubled() const { return {x * 2, y * 2, z * 2}; }
    [[nodiscard]] int64_t operator[](int axis) const { return axis == 0 ? x : (axis == 1 ? y : z); }

    friend bool operator==(const Dims&, const Dims&) = default;
};

std::string to_string(const Dims& d);

using Vec3 = std::array<double, 3>;

inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }
inline double norm(const Vec3& a) { return std::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]); }

/// True when VQREG_DETERMINISTIC=1 is set in the environment or forced programmatically.
bool deterministic_mode();
void set_deterministic_mode(bool on);

/// Applies the deterministic-mode thread policy to OpenMP. Call once at program start.
void configure_threads();

}  // namespace vqreg
