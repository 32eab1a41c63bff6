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
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "sonoseg/parallel.hpp"
#include "sonoseg/rng.hpp"
#include "sonoseg/volume.hpp"

namespace sonoseg {

struct AugmentConfig {
    double max_scale_delta = 0.1;    // scale drawn from [1-d, 1+d]
    double max_rotation_deg = 10.0;  // each Euler angle from [-r, r]

    void validate() const {
        if (!(max_scale_delta >= 0.0 && max_scale_delta < 1.0))
            throw std::invalid_argument("AugmentConfig: max_scale_delta must be in [0, 1)");
        if (!(max_rotation_deg >= 0.0 && max_rotation_deg <= 180.0))
            throw std::invalid_argument("AugmentConfig: max_rotation_deg must be in [0, 180]");
    }
};

/// Similarity transform about a center that is bound at application time
/// (the volume center): T(p) = c + scale * R * (p - c).
struct SimilarityTransform {
    double scale = 1.0;
    std::array<double, 3> angles_deg{0.0, 0.0, 0.0};  // XYZ Euler angles
    Mat3 rotation = Mat3::identity();                  // Rz * Ry * Rx

    SimilarityTransform inverse() const {
        SimilarityTransform inv;
        inv.scale = 1.0 / scale;
        inv.angles_deg = {-angles_deg[0], -angles_deg[1], -angles_deg[2]};
        inv.rotation = rotation.transposed();
        return inv;
    }
};

/// Random similarity parameters; draw k of an epoch is keyed by (seed, k).
inline SimilarityTransform draw_similarity(const AugmentConfig& cfg, std::uint64_t seed,
                                           std::uint64_t index) {
    cfg.validate();
    SimilarityTransform t;
    t.scale = rng_uniform(seed, RngStream::augment, index, 0, 1.0 - cfg.max_scale_delta,
                          1.0 + cfg.max_scale_delta);
    for (int axis = 0; axis < 3; ++axis)
        t.angles_deg[static_cast<std::size_t>(axis)] =
            rng_uniform(seed, RngStream::augment, index, static_cast<std::uint32_t>(1 + axis),
                        -cfg.max_rotation_deg, cfg.max_rotation_deg);
    t.rotation = axis_rotation_deg(2, t.angles_deg[2]) *
                 axis_rotation_deg(1, t.angles_deg[1]) *
                 axis_rotation_deg(0, t.angles_deg[0]);
    return t;
}

/// Warps a volume by the similarity transform about its own center, onto its
/// own grid, by inverse mapping: out(q) = in(T^-1(q)). Labels must use
/// nearest interpolation; regions pulled from outside become background.
inline Volume3D apply_transform(const Volume3D& vol, const SimilarityTransform& t,
                                Interpolation interp) {
    if (vol.kind() == ElementKind::uint8 && interp != Interpolation::nearest)
        throw std::invalid_argument("apply_transform: label volumes require nearest");
    if (!(t.scale > 0.0)) throw std::invalid_argument("apply_transform: scale must be > 0");

    const auto dims = vol.dims();
    const Vec3 center = vol.voxel_to_world(
        {(dims[0] - 1) / 2.0, (dims[1] - 1) / 2.0, (dims[2] - 1) / 2.0});
    const Mat3 rot_inv = t.rotation.transposed();

    Volume3D out = Volume3D::create(dims, vol.spacing(), vol.origin(), vol.direction(),
                                    vol.kind());
    parallel_for(static_cast<std::int64_t>(out.voxel_count()), [&](std::int64_t idx) {
        const int i = static_cast<int>(idx % dims[0]);
        const int j = static_cast<int>((idx / dims[0]) % dims[1]);
        const int k = static_cast<int>(idx / (std::int64_t(dims[0]) * dims[1]));
        const Vec3 q = out.voxel_to_world({double(i), double(j), double(k)});
        const Vec3 p = center + rot_inv * ((q - center) / t.scale);
        out.set_value(static_cast<std::size_t>(idx), sample(vol, p, interp));
    });
    return out;
}

// ---------------------------------------------------------------------------
// Patch sampling
// ---------------------------------------------------------------------------

struct PatchConfig {
    std::array<int, 3> patch_dims{128, 128, 128};
    double foreground_bias = 0.5;  // probability of forcing a foreground patch

    void validate() const {
        for (int d : patch_dims)
            if (d < 1) throw std::invalid_argument("PatchConfig: patch dims must be >= 1");
        if (!(foreground_bias >= 0.0 && foreground_bias <= 1.0))
            throw std::invalid_argument("PatchConfig: foreground_bias must be in [0, 1]");
    }
};

struct PatchSample {
    Volume3D image;               // float patch, world-placed at its corner
    Volume3D label;               // matching uint8 patch
    std::array<int, 3> corner{};  // voxel corner in the source volume
    bool fallback_uniform = false;  // bias requested but no foreground found
};

namespace detail {

/// Exclusive 3D prefix sums of the foreground indicator, for O(1) queries
/// of how many foreground voxels any box contains.
class ForegroundTable {
public:
    explicit ForegroundTable(const Volume3D& label) : nx_(label.dims()[0] + 1),
                                                      ny_(label.dims()[1] + 1),
                                                      nz_(label.dims()[2] + 1) {
        s_.assign(std::size_t(nx_) * ny_ * nz_, 0);
        const auto& d = label.labels();
        for (int k = 1; k < nz_; ++k)
            for (int j = 1; j < ny_; ++j)
                for (int i = 1; i < nx_; ++i) {
                    const std::int64_t fg =
                        d[label.index(i - 1, j - 1, k - 1)] != 0 ? 1 : 0;
                    at(i, j, k) = fg + at(i - 1, j, k) + at(i, j - 1, k) + at(i, j, k - 1) -
                                  at(i - 1, j - 1, k) - at(i - 1, j, k - 1) -
                                  at(i, j - 1, k - 1) + at(i - 1, j - 1, k - 1);
                }
    }

    /// Foreground count in [c, min(c+size, dim)) per axis.
    std::int64_t box_count(const std::array<int, 3>& c, const std::array<int, 3>& size) const {
        const int x1 = std::min(c[0] + size[0], nx_ - 1), y1 = std::min(c[1] + size[1], ny_ - 1),
                  z1 = std::min(c[2] + size[2], nz_ - 1);
        const int x0 = c[0], y0 = c[1], z0 = c[2];
        return at(x1, y1, z1) - at(x0, y1, z1) - at(x1, y0, z1) - at(x1, y1, z0) +
               at(x0, y0, z1) + at(x0, y1, z0) + at(x1, y0, z0) - at(x0, y0, z0);
    }

private:
    std::int64_t& at(int i, int j, int k) {
        return s_[std::size_t(i) + std::size_t(nx_) * (std::size_t(j) + std::size_t(ny_) * k)];
    }
    std::int64_t at(int i, int j, int k) const {
        return const_cast<ForegroundTable*>(this)->at(i, j, k);
    }

    int nx_, ny_, nz_;
    std::vector<std::int64_t> s_;
};

inline Volume3D crop_with_padding(const Volume3D& vol, const std::array<int, 3>& corner,
                                  const std::array<int, 3>& size) {
    Volume3D out = Volume3D::create(size, vol.spacing(),
                                    vol.voxel_to_world({double(corner[0]), double(corner[1]),
                                                        double(corner[2])}),
                                    vol.direction(), vol.kind());
    const auto dims = vol.dims();
    for (int z = 0; z < size[2]; ++z)
        for (int y = 0; y < size[1]; ++y)
            for (int x = 0; x < size[0]; ++x) {
                const int i = corner[0] + x, j = corner[1] + y, k = corner[2] + z;
                if (i >= dims[0] || j >= dims[1] || k >= dims[2]) continue;  // pad with 0
                out.set_value(out.index(x, y, z), vol.value_at(vol.index(i, j, k)));
            }
    return out;
}

}  // namespace detail

/// Draws one training patch. With probability foreground_bias the corner is
/// uniform over corners whose patch contains foreground; otherwise (and when
/// no such corner exists, flagged as fallback) it is uniform over all valid
/// corners. Volumes smaller than the patch are zero-padded at the high end.
inline PatchSample sample_patch(const Volume3D& image, const Volume3D& label,
                                const PatchConfig& cfg, std::uint64_t seed,
                                std::uint64_t index) {
    cfg.validate();
    if (image.kind() != ElementKind::float32 || label.kind() != ElementKind::uint8)
        throw std::invalid_argument("sample_patch: need a float image and a uint8 label");
    if (image.dims() != label.dims())
        throw std::invalid_argument("sample_patch: image and label dimensions differ");

    const auto dims = image.dims();
    const std::array<int, 3> counts{std::max(1, dims[0] - cfg.patch_dims[0] + 1),
                                    std::max(1, dims[1] - cfg.patch_dims[1] + 1),
                                    std::max(1, dims[2] - cfg.patch_dims[2] + 1)};
    const std::int64_t total =
        std::int64_t(counts[0]) * counts[1] * counts[2];
    const auto corner_of = [&counts](std::int64_t flat) {
        return std::array<int, 3>{int(flat % counts[0]), int((flat / counts[0]) % counts[1]),
                                  int(flat / (std::int64_t(counts[0]) * counts[1]))};
    };

    PatchSample out;
    const bool want_fg =
        cfg.foreground_bias > 0.0 &&
        rng_uniform01(seed, RngStream::patch, index, 0) < cfg.foreground_bias;

    std::int64_t flat = -1;
    if (want_fg) {
        const detail::ForegroundTable table(label);
        std::vector<std::int64_t> fg_corners;
        for (std::int64_t f = 0; f < total; ++f)
            if (table.box_count(corner_of(f), cfg.patch_dims) > 0) fg_corners.push_back(f);
        if (!fg_corners.empty()) {
            flat = fg_corners[rng_below(seed, RngStream::patch, index, 1,
                                        fg_corners.size())];
        } else {
            out.fallback_uniform = true;
        }
    }
    if (flat < 0)
        flat = static_cast<std::int64_t>(
            rng_below(seed, RngStream::patch, index, 1, static_cast<std::uint64_t>(total)));

    out.corner = corner_of(flat);
    out.image = detail::crop_with_padding(image, out.corner, cfg.patch_dims);
    out.label = detail::crop_with_padding(label, out.corner, cfg.patch_dims);
    return out;
}

}  // namespace sonoseg
