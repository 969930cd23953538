#include "vqreg/volume_io.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

namespace vqreg {

static_assert(std::endian::native == std::endian::little, "payload I/O assumes a little-endian host");

namespace {

std::string trim(const std::string& s)
{
    size_t b = s.find_first_not_of(" \t\r");
    size_t e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

double parse_real(const std::string& tok)
{
    double v = 0;
    auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || ptr != tok.data() + tok.size()) throw Error("malformed header: bad number '" + tok + "'");
    return v;
}

int64_t parse_int(const std::string& tok)
{
    int64_t v = 0;
    auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || ptr != tok.data() + tok.size()) throw Error("malformed header: bad integer '" + tok + "'");
    return v;
}

std::vector<std::string> split_ws(const std::string& s)
{
    std::istringstream in(s);
    std::vector<std::string> out;
    for (std::string t; in >> t;) out.push_back(t);
    return out;
}

size_t dtype_bytes(DType d) { return d == DType::f32 ? 4 : 8; }

}  // namespace

const std::string& ArrayFile::get(const std::string& key) const
{
    for (const auto& [k, v] : header)
        if (k == key) return v;
    throw Error("malformed header: missing key '" + key + "'");
}

bool ArrayFile::has(const std::string& key) const
{
    for (const auto& kv : header)
        if (kv.first == key) return true;
    return false;
}

void ArrayFile::set(const std::string& key, std::string value)
{
    for (auto& [k, v] : header)
        if (k == key) {
            v = std::move(value);
            return;
        }
    header.emplace_back(key, std::move(value));
}

std::string format_real(double v)
{
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (ec != std::errc()) throw Error("format_real: conversion failed");
    return std::string(buf, ptr);
}

std::string format_vec3(const Vec3& v)
{
    return format_real(v[0]) + " " + format_real(v[1]) + " " + format_real(v[2]);
}

Vec3 parse_vec3(const std::string& s)
{
    auto t = split_ws(s);
    if (t.size() != 3) throw Error("malformed header: expected 3 components in '" + s + "'");
    return {parse_real(t[0]), parse_real(t[1]), parse_real(t[2])};
}

Dims parse_dims(const std::string& s)
{
    auto t = split_ws(s);
    if (t.size() != 3) throw Error("malformed header: expected 3 dims in '" + s + "'");
    Dims d{parse_int(t[0]), parse_int(t[1]), parse_int(t[2])};
    if (!d.valid()) throw Error("malformed header: non-positive dims '" + s + "'");
    return d;
}

void write_array_file(const std::filesystem::path& path, const ArrayFile& file)
{
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open for writing: " + path.string());
    for (const auto& [k, v] : file.header) {
        if (k == "dtype" || k == "count") continue;
        out << k << '=' << v << '\n';
    }
    out << "dtype=" << (file.dtype == DType::f32 ? "f32" : "f64") << '\n';
    out << "count=" << file.payload.size() << '\n';
    out << '\n';
    if (file.dtype == DType::f32) {
        std::vector<float> buf(file.payload.begin(), file.payload.end());
        out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
    } else {
        out.write(reinterpret_cast<const char*>(file.payload.data()),
                  static_cast<std::streamsize>(file.payload.size() * 8));
    }
    if (!out) throw Error("write failed: " + path.string());
}

ArrayFile read_array_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("missing file: " + path.string());
    ArrayFile file;
    std::string line;
    bool terminated = false;
    while (std::getline(in, line)) {
        if (trim(line).empty()) {
            terminated = true;
            break;
        }
        auto eq = line.find('=');
        if (eq == std::string::npos) throw Error("malformed header line: '" + line + "'");
        file.header.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    if (!terminated) throw Error("malformed header: no blank-line terminator in " + path.string());
    const std::string& dt = file.get("dtype");
    if (dt == "f32")
        file.dtype = DType::f32;
    else if (dt == "f64")
        file.dtype = DType::f64;
    else
        throw Error("malformed header: unsupported dtype '" + dt + "'");
    const int64_t count = parse_int(file.get("count"));
    if (count < 0) throw Error("malformed header: negative count");

    std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const size_t expect = static_cast<size_t>(count) * dtype_bytes(file.dtype);
    if (payload.size() != expect)
        throw Error("payload size mismatch in " + path.string() + ": header implies " + std::to_string(expect) +
                    " bytes, found " + std::to_string(payload.size()));
    file.payload.resize(static_cast<size_t>(count));
    if (file.dtype == DType::f32) {
        std::vector<float> buf(static_cast<size_t>(count));
        std::memcpy(buf.data(), payload.data(), expect);
        std::copy(buf.begin(), buf.end(), file.payload.begin());
    } else {
        std::memcpy(file.payload.data(), payload.data(), expect);
    }
    return file;
}

namespace {

ArrayFile grid_file(const std::string& kind, const Geometry& g, int64_t channels, DType dtype)
{
    ArrayFile f;
    f.dtype = dtype;
    f.set("format", kind);
    f.set("dims", std::to_string(g.dims.x) + " " + std::to_string(g.dims.y) + " " + std::to_string(g.dims.z));
    f.set("channels", std::to_string(channels));
    f.set("spacing", format_vec3(g.spacing));
    f.set("origin", format_vec3(g.origin));
    f.set("order", "x-fastest");
    return f;
}

Geometry read_grid(const ArrayFile& f, const std::string& kind, int64_t channels)
{
    if (f.has("format") && f.get("format") != kind)
        throw Error("malformed header: expected format '" + kind + "', found '" + f.get("format") + "'");
    if (f.get("order") != "x-fastest") throw Error("malformed header: unsupported order '" + f.get("order") + "'");
    Geometry g{parse_dims(f.get("dims")), parse_vec3(f.get("spacing")), parse_vec3(f.get("origin"))};
    g.validate();
    const int64_t ch = f.has("channels") ? parse_int(f.get("channels")) : 1;
    if (ch != channels) throw Error("malformed header: expected " + std::to_string(channels) + " channel(s)");
    if (static_cast<int64_t>(f.payload.size()) != g.dims.voxels() * channels)
        throw Error("payload size mismatch: dims " + to_string(g.dims) + " need " +
                    std::to_string(g.dims.voxels() * channels) + " values, payload has " +
                    std::to_string(f.payload.size()));
    return g;
}

}  // namespace

void save_volume(const std::filesystem::path& path, const Volume3D& v, DType dtype)
{
    ArrayFile f = grid_file("volume", v.geometry(), 1, dtype);
    f.payload = v.values();
    write_array_file(path, f);
}

Volume3D load_volume(const std::filesystem::path& path)
{
    ArrayFile f = read_array_file(path);
    Geometry g = read_grid(f, "volume", 1);
    return Volume3D(g, std::move(f.payload));
}

void save_mask(const std::filesystem::path& path, const MaskVolume& m)
{
    ArrayFile f = grid_file("mask", m.geometry(), 1, DType::f32);
    f.set("kind", m.kind() == MaskKind::binary ? "binary" : "soft");
    f.payload = m.volume().values();
    write_array_file(path, f);
}

MaskVolume load_mask(const std::filesystem::path& path)
{
    ArrayFile f = read_array_file(path);
    Geometry g = read_grid(f, "mask", 1);
    const std::string kind = f.has("kind") ? f.get("kind") : "binary";
    if (kind != "binary" && kind != "soft") throw Error("malformed header: unknown mask kind '" + kind + "'");
    return MaskVolume(Volume3D(g, std::move(f.payload)), kind == "binary" ? MaskKind::binary : MaskKind::soft);
}

void save_ddf(const std::filesystem::path& path, const DisplacementField& ddf)
{
    ArrayFile f = grid_file("ddf", ddf.geometry(), 3, DType::f64);
    f.set("channel_order", "x y z");
    f.set("units", "voxel");
    f.payload.assign(ddf.data.data(), ddf.data.data() + ddf.data.size());
    write_array_file(path, f);
}

DisplacementField load_ddf(const std::filesystem::path& path)
{
    ArrayFile f = read_array_file(path);
    Geometry g = read_grid(f, "ddf", 3);
    if (f.get("channel_order") != "x y z") throw Error("malformed header: unsupported channel_order");
    DisplacementField ddf(g);
    std::copy(f.payload.begin(), f.payload.end(), ddf.data.data());
    ddf.validate();
    return ddf;
}

void save_landmarks(const std::filesystem::path& path, const LandmarkSet& lm)
{
    lm.validate();
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw Error("cannot open for writing: " + path.string());
    for (size_t n = 0; n < lm.size(); ++n) out << lm.labels[n] << ' ' << format_vec3(lm.points[n]) << '\n';
}

LandmarkSet load_landmarks(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw Error("missing file: " + path.string());
    LandmarkSet lm;
    std::string line;
    while (std::getline(in, line)) {
        auto t = split_ws(line);
        if (t.empty()) continue;
        if (t.size() != 4) throw Error("malformed landmark line: '" + line + "'");
        lm.labels.push_back(t[0]);
        lm.points.push_back({parse_real(t[1]), parse_real(t[2]), parse_real(t[3])});
    }
    return lm;
}

namespace {

template <typename T>
T read_at(const std::string& buf, size_t off)
{
    if (off + sizeof(T) > buf.size()) throw Error("NIfTI: truncated file");
    T v;
    std::memcpy(&v, buf.data() + off, sizeof(T));
    return v;
}

}  // namespace

Volume3D load_nifti(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("missing file: " + path.string());
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (read_at<int32_t>(buf, 0) != 348) throw Error("NIfTI: unsupported header (byte-swapped or not NIfTI-1)");
    const auto dim0 = read_at<int16_t>(buf, 40);
    if (dim0 < 3) throw Error("NIfTI: fewer than 3 dimensions");
    Dims d{read_at<int16_t>(buf, 42), read_at<int16_t>(buf, 44), read_at<int16_t>(buf, 46)};
    const auto datatype = read_at<int16_t>(buf, 70);
    Vec3 spacing{read_at<float>(buf, 80), read_at<float>(buf, 84), read_at<float>(buf, 88)};
    const auto vox_offset = static_cast<size_t>(read_at<float>(buf, 108));
    float slope = read_at<float>(buf, 112);
    const float inter = read_at<float>(buf, 116);
    if (slope == 0.0f) slope = 1.0f;
    Vec3 origin{read_at<float>(buf, 268), read_at<float>(buf, 272), read_at<float>(buf, 276)};
    Geometry g{d, spacing, origin};
    g.validate();
    std::vector<double> data(static_cast<size_t>(d.voxels()));
    for (size_t n = 0; n < data.size(); ++n) {
        double raw = 0;
        switch (datatype) {
        case 2: raw = read_at<uint8_t>(buf, vox_offset + n); break;
        case 4: raw = read_at<int16_t>(buf, vox_offset + 2 * n); break;
        case 8: raw = read_at<int32_t>(buf, vox_offset + 4 * n); break;
        case 16: raw = read_at<float>(buf, vox_offset + 4 * n); break;
        case 64: raw = read_at<double>(buf, vox_offset + 8 * n); break;
        case 512: raw = read_at<uint16_t>(buf, vox_offset + 2 * n); break;
        default: throw Error("NIfTI: unsupported datatype " + std::to_string(datatype));
        }
        data[n] = raw * slope + inter;
    }
    return Volume3D(g, std::move(data));
}

Volume3D load_any_volume(const std::filesystem::path& path)
{
    return path.extension() == ".nii" ? load_nifti(path) : load_volume(path);
}

}  // namespace vqreg
