/*
   Copyright 2026 the sonoseg authors

   Licensed under the Apache License, Version 2.0 (the "License");
   you may not use this file except in compliance with the License.
   You may obtain a copy of the License at

       http://www.apache.org/licenses/LICENSE-2.0

   Unless required by applicable law or agreed to in writing, software
   distributed under the License is distributed on an "AS IS" BASIS,
   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
   See the License for the specific language governing permissions and
   limitations under the License.
*/
#pragma once

#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "sonoseg/geometry.hpp"
#include "sonoseg/parallel.hpp"

namespace sonoseg {

static_assert(std::endian::native == std::endian::little,
              "volume raw I/O assumes a little-endian host");

enum class ElementKind { float32, uint8 };

enum class Interpolation { nearest, trilinear };

/// Shortest decimal string that parses back to exactly the same double.
inline std::string number_to_string(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

/// Dense scalar 3D grid with world placement. Voxel (0,0,0) has its center at
/// `origin`; the columns of `direction` map voxel axes to world axes. Data is
/// stored x-fastest. Immutable by convention after construction (the pipeline
/// treats volumes as values).
class Volume3D {
public:
    using FloatData = std::vector<float>;
    using LabelData = std::vector<std::uint8_t>;

    Volume3D() = default;

    Volume3D(std::array<int, 3> dims, Vec3 spacing, Vec3 origin, Mat3 direction,
             std::variant<FloatData, LabelData> data)
        : dims_(dims),
          spacing_(spacing),
          origin_(origin),
          direction_(direction),
          data_(std::move(data)) {
        validate();
    }

    /// Zero-filled volume of the given kind.
    static Volume3D create(std::array<int, 3> dims, Vec3 spacing, Vec3 origin, Mat3 direction,
                           ElementKind kind) {
        const std::size_t n = checked_voxel_count(dims);
        if (kind == ElementKind::float32)
            return Volume3D(dims, spacing, origin, direction, FloatData(n, 0.0f));
        return Volume3D(dims, spacing, origin, direction, LabelData(n, 0));
    }

    const std::array<int, 3>& dims() const { return dims_; }
    const Vec3& spacing() const { return spacing_; }
    const Vec3& origin() const { return origin_; }
    const Mat3& direction() const { return direction_; }

    ElementKind kind() const {
        return std::holds_alternative<FloatData>(data_) ? ElementKind::float32
                                                        : ElementKind::uint8;
    }

    std::size_t voxel_count() const {
        return static_cast<std::size_t>(dims_[0]) * dims_[1] * dims_[2];
    }

    FloatData& floats() {
        if (kind() != ElementKind::float32)
            throw std::logic_error("Volume3D: float access on a label volume");
        return std::get<FloatData>(data_);
    }
    const FloatData& floats() const { return const_cast<Volume3D*>(this)->floats(); }

    LabelData& labels() {
        if (kind() != ElementKind::uint8)
            throw std::logic_error("Volume3D: label access on an intensity volume");
        return std::get<LabelData>(data_);
    }
    const LabelData& labels() const { return const_cast<Volume3D*>(this)->labels(); }

    std::size_t index(int x, int y, int z) const {
        return static_cast<std::size_t>(x) +
               static_cast<std::size_t>(dims_[0]) *
                   (static_cast<std::size_t>(y) + static_cast<std::size_t>(dims_[1]) * z);
    }

    bool in_bounds(int x, int y, int z) const {
        return x >= 0 && y >= 0 && z >= 0 && x < dims_[0] && y < dims_[1] && z < dims_[2];
    }

    double value_at(std::size_t i) const {
        if (const auto* f = std::get_if<FloatData>(&data_)) return (*f)[i];
        return std::get<LabelData>(data_)[i];
    }

    void set_value(std::size_t i, double v) {
        if (auto* f = std::get_if<FloatData>(&data_))
            (*f)[i] = static_cast<float>(v);
        else
            std::get<LabelData>(data_)[i] = static_cast<std::uint8_t>(v);
    }

    /// World position of a (possibly fractional) voxel coordinate.
    Vec3 voxel_to_world(const Vec3& v) const {
        return origin_ + direction_ * cwise_mul(spacing_, v);
    }

    /// Continuous voxel coordinate of a world point; exact inverse of
    /// voxel_to_world because the direction matrix is orthonormal.
    Vec3 world_to_voxel(const Vec3& p) const {
        return cwise_div(direction_.transposed() * (p - origin_), spacing_);
    }

    /// Header keys this reader does not interpret, kept for round-tripping.
    std::vector<std::pair<std::string, std::string>> extra_header;

    bool operator==(const Volume3D& o) const {
        return dims_ == o.dims_ && spacing_ == o.spacing_ && origin_ == o.origin_ &&
               direction_ == o.direction_ && data_ == o.data_ && extra_header == o.extra_header;
    }

private:
    static std::size_t checked_voxel_count(const std::array<int, 3>& dims) {
        for (int d : dims)
            if (d <= 0) throw std::invalid_argument("Volume3D: dims must be positive");
        return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
    }

    void validate() const {
        const std::size_t n = checked_voxel_count(dims_);
        const std::size_t have = std::holds_alternative<FloatData>(data_)
                                     ? std::get<FloatData>(data_).size()
                                     : std::get<LabelData>(data_).size();
        if (have != n) throw std::invalid_argument("Volume3D: data length does not match dims");
        for (int i = 0; i < 3; ++i)
            if (!(spacing_[i] > 0.0) || !std::isfinite(spacing_[i]))
                throw std::invalid_argument("Volume3D: non-finite spacing");
        if (!is_orthonormal(direction_))
            throw std::invalid_argument("Volume3D: direction matrix not orthonormal");
    }

    std::array<int, 3> dims_{1, 1, 1};
    Vec3 spacing_{1, 1, 1};
    Vec3 origin_{0, 0, 0};
    Mat3 direction_{};
    std::variant<FloatData, LabelData> data_{FloatData{1, 0.0f}};
};

namespace detail {

// Continuous coordinates a hair away from an exact voxel center are snapped
// onto it, so resampling onto an identical grid reads centers exactly.
inline double snap_coord(double x) {
    const double r = std::round(x);
    return std::abs(x - r) < 1e-9 ? r : x;
}

// Nearest voxel index with ties broken toward the lower index.
inline int nearest_index(double x) { return static_cast<int>(std::ceil(x - 0.5)); }

}  // namespace detail

/// Point sample in world coordinates. Outside the grid the background value 0
/// is returned. Label volumes must be sampled with nearest interpolation.
inline double sample(const Volume3D& vol, const Vec3& world, Interpolation interp) {
    if (vol.kind() == ElementKind::uint8 && interp != Interpolation::nearest)
        throw std::invalid_argument("sample: label volumes require nearest interpolation");
    const Vec3 c = vol.world_to_voxel(world);
    const double x = detail::snap_coord(c.x);
    const double y = detail::snap_coord(c.y);
    const double z = detail::snap_coord(c.z);

    if (interp == Interpolation::nearest) {
        const int i = detail::nearest_index(x);
        const int j = detail::nearest_index(y);
        const int k = detail::nearest_index(z);
        if (!vol.in_bounds(i, j, k)) return 0.0;
        return vol.value_at(vol.index(i, j, k));
    }

    const int i0 = static_cast<int>(std::floor(x));
    const int j0 = static_cast<int>(std::floor(y));
    const int k0 = static_cast<int>(std::floor(z));
    const double fx = x - i0, fy = y - j0, fz = z - k0;
    const double wx[2] = {1.0 - fx, fx};
    const double wy[2] = {1.0 - fy, fy};
    const double wz[2] = {1.0 - fz, fz};
    double acc = 0.0;
    for (int dz = 0; dz < 2; ++dz)
        for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
                const double w = wx[dx] * wy[dy] * wz[dz];
                if (w == 0.0) continue;
                const int i = i0 + dx, j = j0 + dy, k = k0 + dz;
                const double v = vol.in_bounds(i, j, k) ? vol.value_at(vol.index(i, j, k)) : 0.0;
                acc += w * v;
            }
    return acc;
}

/// Resamples onto an explicit target grid.
inline Volume3D resample_to_grid(const Volume3D& vol, const std::array<int, 3>& dims,
                                 const Vec3& spacing, const Vec3& origin, const Mat3& direction,
                                 Interpolation interp) {
    Volume3D out = Volume3D::create(dims, spacing, origin, direction, vol.kind());
    const int nx = dims[0], ny = dims[1];
    parallel_for(static_cast<std::int64_t>(out.voxel_count()), [&](std::int64_t idx) {
        const int x = static_cast<int>(idx % nx);
        const int y = static_cast<int>((idx / nx) % ny);
        const int z = static_cast<int>(idx / (static_cast<std::int64_t>(nx) * ny));
        const Vec3 w = out.voxel_to_world({static_cast<double>(x), static_cast<double>(y),
                                           static_cast<double>(z)});
        out.set_value(static_cast<std::size_t>(idx), sample(vol, w, interp));
    });
    return out;
}

/// Resamples to a new isotropic or per-axis spacing. The output covers the
/// input's world extent; grids are anchored at the input voxel-box corner so
/// an identical target spacing reproduces the input exactly.
inline Volume3D resample(const Volume3D& vol, const Vec3& target_spacing, Interpolation interp) {
    for (int i = 0; i < 3; ++i)
        if (!(target_spacing[i] > 0.0) || !std::isfinite(target_spacing[i]))
            throw std::invalid_argument("resample: target spacing must be positive");
    std::array<int, 3> dims_out;
    for (int i = 0; i < 3; ++i) {
        const double extent = vol.dims()[i] * vol.spacing()[i];
        if (!(extent > 0.0)) throw std::invalid_argument("resample: degenerate input extent");
        dims_out[i] = std::max(1, static_cast<int>(std::ceil(extent / target_spacing[i] - 1e-9)));
    }
    const Vec3 half_in = vol.spacing() * 0.5;
    const Vec3 half_out = target_spacing * 0.5;
    const Vec3 corner = vol.origin() - vol.direction() * half_in;
    const Vec3 origin_out = corner + vol.direction() * half_out;
    return resample_to_grid(vol, dims_out, target_spacing, origin_out, vol.direction(), interp);
}

// ---------------------------------------------------------------------------
// MetaImage (.mhd + companion .raw) I/O, little-endian raw data.
// ---------------------------------------------------------------------------

namespace detail {

inline std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return {};
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

inline std::vector<double> parse_numbers(const std::string& text, std::size_t expect,
                                         const std::string& key) {
    std::vector<double> out;
    std::istringstream iss(text);
    std::string tok;
    while (iss >> tok) {
        double v = 0.0;
        const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
        if (res.ec != std::errc{} || res.ptr != tok.data() + tok.size())
            throw std::runtime_error("load_volume: bad number in " + key + ": '" + tok + "'");
        out.push_back(v);
    }
    if (out.size() != expect)
        throw std::runtime_error("load_volume: " + key + " expects " + std::to_string(expect) +
                                 " values");
    return out;
}

}  // namespace detail

/// Reads a MetaImage header and its companion raw file.
inline Volume3D load_volume(const std::filesystem::path& path) {
    std::ifstream header(path);
    if (!header) throw std::runtime_error("load_volume: missing file: " + path.string());

    std::array<int, 3> dims{0, 0, 0};
    Vec3 spacing{1, 1, 1}, origin{0, 0, 0};
    Mat3 direction = Mat3::identity();
    std::string element_type, data_file;
    bool have_dims = false, have_type = false;
    std::vector<std::pair<std::string, std::string>> extras;

    std::string line;
    while (std::getline(header, line)) {
        if (detail::trim(line).empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("load_volume: malformed header line: '" + line + "'");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));

        if (key == "ObjectType") {
            if (value != "Image")
                throw std::runtime_error("load_volume: unsupported ObjectType " + value);
        } else if (key == "NDims") {
            if (value != "3") throw std::runtime_error("load_volume: only NDims = 3 is supported");
        } else if (key == "DimSize") {
            const auto v = detail::parse_numbers(value, 3, key);
            for (int i = 0; i < 3; ++i) dims[i] = static_cast<int>(v[i]);
            have_dims = true;
        } else if (key == "ElementSpacing") {
            const auto v = detail::parse_numbers(value, 3, key);
            spacing = {v[0], v[1], v[2]};
        } else if (key == "Offset") {
            const auto v = detail::parse_numbers(value, 3, key);
            origin = {v[0], v[1], v[2]};
        } else if (key == "TransformMatrix") {
            const auto v = detail::parse_numbers(value, 9, key);
            for (int i = 0; i < 9; ++i) direction.m[i] = v[i];
        } else if (key == "ElementType") {
            element_type = value;
            have_type = true;
        } else if (key == "ElementDataFile") {
            data_file = value;
        } else {
            extras.emplace_back(key, value);
        }
    }

    if (!have_dims) throw std::runtime_error("load_volume: header lacks DimSize");
    if (!have_type) throw std::runtime_error("load_volume: header lacks ElementType");
    if (data_file.empty()) throw std::runtime_error("load_volume: header lacks ElementDataFile");
    if (data_file == "LOCAL" || data_file == "LIST")
        throw std::runtime_error("load_volume: unsupported ElementDataFile " + data_file);

    ElementKind kind;
    std::size_t elem_size;
    if (element_type == "MET_FLOAT") {
        kind = ElementKind::float32;
        elem_size = 4;
    } else if (element_type == "MET_UCHAR") {
        kind = ElementKind::uint8;
        elem_size = 1;
    } else {
        throw std::runtime_error("load_volume: unsupported ElementType " + element_type);
    }

    for (int i = 0; i < 3; ++i) {
        if (dims[i] <= 0) throw std::runtime_error("load_volume: DimSize must be positive");
        if (!(spacing[i] > 0.0) || !std::isfinite(spacing[i]))
            throw std::runtime_error("load_volume: non-finite spacing");
    }

    const std::filesystem::path raw_path = path.parent_path() / data_file;
    std::ifstream raw(raw_path, std::ios::binary);
    if (!raw) throw std::runtime_error("load_volume: missing file: " + raw_path.string());
    raw.seekg(0, std::ios::end);
    const std::uint64_t file_bytes = static_cast<std::uint64_t>(raw.tellg());
    raw.seekg(0, std::ios::beg);

    const std::size_t n = static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
    if (file_bytes != n * elem_size)
        throw std::runtime_error("load_volume: data-length mismatch: header declares " +
                                 std::to_string(n * elem_size) + " bytes, raw file has " +
                                 std::to_string(file_bytes));

    Volume3D vol = [&] {
        if (kind == ElementKind::float32) {
            Volume3D::FloatData data(n);
            raw.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * 4));
            return Volume3D(dims, spacing, origin, direction, std::move(data));
        }
        Volume3D::LabelData data(n);
        raw.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n));
        return Volume3D(dims, spacing, origin, direction, std::move(data));
    }();
    if (!raw) throw std::runtime_error("load_volume: raw read failed: " + raw_path.string());
    vol.extra_header = std::move(extras);
    return vol;
}

/// Writes `<path>` (header) and `<path stem>.raw` so load_volume inverts the
/// pair bit-exactly.
inline void save_volume(const Volume3D& vol, const std::filesystem::path& path) {
    std::filesystem::path raw_path = path;
    raw_path.replace_extension(".raw");

    std::ostringstream h;
    h << "ObjectType = Image\n";
    h << "NDims = 3\n";
    h << "DimSize = " << vol.dims()[0] << ' ' << vol.dims()[1] << ' ' << vol.dims()[2] << '\n';
    h << "ElementSpacing = " << number_to_string(vol.spacing().x) << ' '
      << number_to_string(vol.spacing().y) << ' ' << number_to_string(vol.spacing().z) << '\n';
    h << "Offset = " << number_to_string(vol.origin().x) << ' ' << number_to_string(vol.origin().y)
      << ' ' << number_to_string(vol.origin().z) << '\n';
    h << "TransformMatrix =";
    for (double v : vol.direction().m) h << ' ' << number_to_string(v);
    h << '\n';
    for (const auto& [key, value] : vol.extra_header) h << key << " = " << value << '\n';
    h << "ElementType = " << (vol.kind() == ElementKind::float32 ? "MET_FLOAT" : "MET_UCHAR")
      << '\n';
    h << "ElementDataFile = " << raw_path.filename().string() << '\n';

    std::ofstream header(path, std::ios::trunc);
    if (!header) throw std::runtime_error("save_volume: cannot open " + path.string());
    header << h.str();
    if (!header.flush()) throw std::runtime_error("save_volume: write failed: " + path.string());

    std::ofstream raw(raw_path, std::ios::binary | std::ios::trunc);
    if (!raw) throw std::runtime_error("save_volume: cannot open " + raw_path.string());
    if (vol.kind() == ElementKind::float32) {
        const auto& d = vol.floats();
        raw.write(reinterpret_cast<const char*>(d.data()),
                  static_cast<std::streamsize>(d.size() * 4));
    } else {
        const auto& d = vol.labels();
        raw.write(reinterpret_cast<const char*>(d.data()),
                  static_cast<std::streamsize>(d.size()));
    }
    if (!raw.flush()) throw std::runtime_error("save_volume: write failed: " + raw_path.string());
}

}  // namespace sonoseg
