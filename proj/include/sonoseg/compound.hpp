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

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "sonoseg/parallel.hpp"
#include "sonoseg/simulate.hpp"
#include "sonoseg/volume.hpp"

namespace sonoseg {

enum class CompoundMode { mean, max };

inline std::string to_string(CompoundMode m) {
    return m == CompoundMode::mean ? "mean" : "max";
}

inline CompoundMode compound_mode_from_string(const std::string& s) {
    if (s == "mean") return CompoundMode::mean;
    if (s == "max") return CompoundMode::max;
    throw std::runtime_error("compound mode must be 'mean' or 'max', got '" + s + "'");
}

struct CompoundingConfig {
    Vec3 spacing{0.3, 0.3, 0.3};
    CompoundMode mode = CompoundMode::mean;
    int hole_fill_radius = 1;  // Chebyshev radius; 0 disables filling

    void validate() const {
        if (!(spacing.x > 0.0 && spacing.y > 0.0 && spacing.z > 0.0))
            throw std::invalid_argument("CompoundingConfig: spacing must be positive");
        if (hole_fill_radius < 0)
            throw std::invalid_argument("CompoundingConfig: hole_fill_radius must be >= 0");
    }
};

inline nlohmann::json compounding_config_to_json(const CompoundingConfig& c) {
    return {{"spacing", {c.spacing.x, c.spacing.y, c.spacing.z}},
            {"mode", to_string(c.mode)},
            {"hole_fill_radius", c.hole_fill_radius}};
}

inline CompoundingConfig compounding_config_from_json(const nlohmann::json& j) {
    CompoundingConfig c;
    if (j.contains("spacing")) {
        if (j.at("spacing").is_array()) {
            const auto s = j.at("spacing").get<std::vector<double>>();
            if (s.size() != 3)
                throw std::runtime_error("compounding config: spacing needs 3 entries");
            c.spacing = {s[0], s[1], s[2]};
        } else {
            const double s = j.at("spacing").get<double>();
            c.spacing = {s, s, s};
        }
    }
    if (j.contains("mode")) c.mode = compound_mode_from_string(j.at("mode").get<std::string>());
    if (j.contains("hole_fill_radius")) c.hole_fill_radius = j.at("hole_fill_radius").get<int>();
    c.validate();
    return c;
}

namespace detail {

struct SplatAccumulator {
    Volume3D volume;                   // pre-fill values where covered
    std::vector<std::uint32_t> count;  // contributions per voxel
};

/// Axis-aligned grid covering every frame corner. An axis with zero extent
/// (a single plane) gets exactly one voxel; exact multiples of the spacing
/// do not gain a voxel from floating-point noise.
inline SplatAccumulator splat_frames(const std::vector<Frame>& frames,
                                     const CompoundingConfig& cfg) {
    cfg.validate();
    if (frames.empty()) throw std::invalid_argument("compound: sweep has no frames");

    Vec3 lo{1e300, 1e300, 1e300}, hi{-1e300, -1e300, -1e300};
    for (const Frame& f : frames) {
        for (const double r : {0.0, double(f.rows - 1)}) {
            for (const double c : {0.0, double(f.cols - 1)}) {
                const Vec3 p = f.pixel_to_world(r, c);
                lo = {std::min(lo.x, p.x), std::min(lo.y, p.y), std::min(lo.z, p.z)};
                hi = {std::max(hi.x, p.x), std::max(hi.y, p.y), std::max(hi.z, p.z)};
            }
        }
    }
    const std::array<int, 3> dims{
        int(std::floor((hi.x - lo.x) / cfg.spacing.x + 1e-6)) + 1,
        int(std::floor((hi.y - lo.y) / cfg.spacing.y + 1e-6)) + 1,
        int(std::floor((hi.z - lo.z) / cfg.spacing.z + 1e-6)) + 1};

    SplatAccumulator acc{Volume3D::create(dims, cfg.spacing, lo, Mat3::identity(),
                                          ElementKind::float32),
                         std::vector<std::uint32_t>()};
    acc.count.assign(acc.volume.voxel_count(), 0);

    // Mean accumulation runs in double and in frame order; permuting the
    // frames only reorders the inner sums, which moves the result by less
    // than 1e-6 of the display range.
    std::vector<double> sum(acc.volume.voxel_count(), 0.0);
    auto& vox = acc.volume.floats();

    for (const Frame& f : frames) {
        for (int r = 0; r < f.rows; ++r) {
            for (int c = 0; c < f.cols; ++c) {
                const Vec3 g = acc.volume.world_to_voxel(f.pixel_to_world(r, c));
                const int i = detail::nearest_index(detail::snap_coord(g.x));
                const int j = detail::nearest_index(detail::snap_coord(g.y));
                const int k = detail::nearest_index(detail::snap_coord(g.z));
                if (!acc.volume.in_bounds(i, j, k)) continue;
                const std::size_t idx = acc.volume.index(i, j, k);
                const double v = f.at(r, c);
                if (cfg.mode == CompoundMode::mean) {
                    sum[idx] += v;
                } else if (acc.count[idx] == 0 || v > vox[idx]) {
                    vox[idx] = static_cast<float>(v);
                }
                ++acc.count[idx];
            }
        }
    }
    if (cfg.mode == CompoundMode::mean) {
        for (std::size_t i = 0; i < sum.size(); ++i)
            if (acc.count[i] > 0) vox[i] = static_cast<float>(sum[i] / acc.count[i]);
    }
    return acc;
}

}  // namespace detail

/// Binary mask of voxels that received at least one pixel contribution.
inline Volume3D coverage_mask(const std::vector<Frame>& frames, const CompoundingConfig& cfg) {
    const detail::SplatAccumulator acc = detail::splat_frames(frames, cfg);
    Volume3D mask = Volume3D::create(acc.volume.dims(), acc.volume.spacing(),
                                     acc.volume.origin(), acc.volume.direction(),
                                     ElementKind::uint8);
    auto& out = mask.labels();
    for (std::size_t i = 0; i < acc.count.size(); ++i) out[i] = acc.count[i] > 0 ? 1 : 0;
    return mask;
}

inline Volume3D coverage_mask(const Sweep& sweep, const CompoundingConfig& cfg) {
    return coverage_mask(sweep.frames, cfg);
}

/// Compounds the frames of a sweep into an axis-aligned intensity volume by
/// forward splatting each pixel into its nearest voxel. Voxels no frame
/// touched borrow the average of covered voxels on the nearest Chebyshev
/// shell within hole_fill_radius; farther voxels stay 0.
inline Volume3D compound(const std::vector<Frame>& frames, const CompoundingConfig& cfg) {
    detail::SplatAccumulator acc = detail::splat_frames(frames, cfg);
    if (cfg.hole_fill_radius == 0) return std::move(acc.volume);

    const auto dims = acc.volume.dims();
    Volume3D out = acc.volume;  // filled values land in the copy
    auto& dst = out.floats();
    const auto& src = acc.volume.floats();
    const auto& covered = acc.count;
    const Volume3D& grid = acc.volume;

    parallel_for(static_cast<std::int64_t>(grid.voxel_count()), [&](std::int64_t idx) {
        if (covered[static_cast<std::size_t>(idx)] > 0) return;
        const int i = int(idx % dims[0]);
        const int j = int((idx / dims[0]) % dims[1]);
        const int k = int(idx / (std::int64_t(dims[0]) * dims[1]));
        for (int radius = 1; radius <= cfg.hole_fill_radius; ++radius) {
            double sum = 0.0;
            int n = 0;
            for (int dk = -radius; dk <= radius; ++dk) {
                for (int dj = -radius; dj <= radius; ++dj) {
                    for (int di = -radius; di <= radius; ++di) {
                        if (std::max({std::abs(di), std::abs(dj), std::abs(dk)}) != radius)
                            continue;
                        const int ii = i + di, jj = j + dj, kk = k + dk;
                        if (!grid.in_bounds(ii, jj, kk)) continue;
                        const std::size_t nidx = grid.index(ii, jj, kk);
                        if (covered[nidx] == 0) continue;
                        sum += src[nidx];
                        ++n;
                    }
                }
            }
            if (n > 0) {
                dst[static_cast<std::size_t>(idx)] = static_cast<float>(sum / n);
                return;
            }
        }
    });
    return out;
}

inline Volume3D compound(const Sweep& sweep, const CompoundingConfig& cfg) {
    return compound(sweep.frames, cfg);
}

}  // namespace sonoseg
