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
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "sonoseg/parallel.hpp"
#include "sonoseg/rng.hpp"
#include "sonoseg/tissue.hpp"
#include "sonoseg/volume.hpp"

namespace sonoseg {

/// Speed of sound used throughout, in mm/us (1540 m/s).
inline constexpr double kSpeedOfSoundMmPerUs = 1.54;

enum class ProbeKind { linear, curvilinear };

inline std::string to_string(ProbeKind k) {
    return k == ProbeKind::linear ? "linear" : "curvilinear";
}

inline ProbeKind probe_kind_from_string(const std::string& s) {
    if (s == "linear") return ProbeKind::linear;
    if (s == "curvilinear") return ProbeKind::curvilinear;
    throw std::runtime_error("probe kind must be 'linear' or 'curvilinear', got '" + s + "'");
}

/// Transducer description. The frame plane is local x (lateral) by local y
/// (axial, pointing into the tissue); local z is the elevation direction.
struct ProbeGeometry {
    ProbeKind kind = ProbeKind::linear;
    int scanline_count = 64;
    int samples_per_line = 128;
    double width_mm = 40.0;         // linear aperture
    double sector_angle_deg = 60.0; // curvilinear fan
    double depth_mm = 50.0;
    double frequency_mhz = 5.0;

    void validate() const {
        if (scanline_count < 2)
            throw std::invalid_argument("ProbeGeometry: scanline_count must be >= 2");
        if (samples_per_line < 2)
            throw std::invalid_argument("ProbeGeometry: samples_per_line must be >= 2");
        if (!(depth_mm > 0.0))
            throw std::invalid_argument("ProbeGeometry: depth_mm must be > 0");
        if (!(frequency_mhz > 0.0))
            throw std::invalid_argument("ProbeGeometry: frequency_mhz must be > 0");
        if (kind == ProbeKind::linear && !(width_mm > 0.0))
            throw std::invalid_argument("ProbeGeometry: width_mm must be > 0");
        if (kind == ProbeKind::curvilinear &&
            !(sector_angle_deg > 0.0 && sector_angle_deg < 180.0))
            throw std::invalid_argument("ProbeGeometry: sector_angle_deg must be in (0, 180)");
    }

    /// Spacing between consecutive axial samples; the last sample sits
    /// exactly at depth_mm.
    double axial_step_mm() const { return depth_mm / (samples_per_line - 1); }

    /// One carrier period expressed in axial samples, at least 1.
    int carrier_period_samples() const {
        const double period_mm = kSpeedOfSoundMmPerUs / frequency_mhz;
        return std::max(1, static_cast<int>(std::llround(period_mm / axial_step_mm())));
    }

    bool operator==(const ProbeGeometry&) const = default;
};

struct ImagingParams {
    double dynamic_range_db = 60.0;
    double tgc_db_per_cm = 0.0;
    double noise_floor = 0.0;  // additive uniform noise amplitude, pre-normalization
    double psf_axial_sigma_mm = 0.3;
    double psf_lateral_sigma_mm = 0.6;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(dynamic_range_db >= 20.0 && dynamic_range_db <= 100.0))
            throw std::invalid_argument("ImagingParams: dynamic_range_db must be in [20, 100]");
        if (tgc_db_per_cm < 0.0)
            throw std::invalid_argument("ImagingParams: tgc_db_per_cm must be >= 0");
        if (noise_floor < 0.0)
            throw std::invalid_argument("ImagingParams: noise_floor must be >= 0");
        if (!(psf_axial_sigma_mm > 0.0) || !(psf_lateral_sigma_mm > 0.0))
            throw std::invalid_argument("ImagingParams: PSF sigmas must be > 0");
    }

    bool operator==(const ImagingParams&) const = default;
};

/// Row-major double image; row = axial sample, column = scanline.
struct Grid2D {
    int rows = 0;
    int cols = 0;
    std::vector<double> v;

    Grid2D() = default;
    Grid2D(int r, int c) : rows(r), cols(c), v(static_cast<std::size_t>(r) * c, 0.0) {}
    double& at(int r, int c) { return v[static_cast<std::size_t>(r) * cols + c]; }
    double at(int r, int c) const { return v[static_cast<std::size_t>(r) * cols + c]; }
};

/// One rendered B-mode image with its world placement. Pixel (row, col)
/// lies at plane point (x0 + col*dx, y0 + row*dy, 0) in probe coordinates.
struct Frame {
    int rows = 0;
    int cols = 0;
    std::vector<float> pixels;  // row-major, rows*cols
    RigidTransform pose;        // probe plane -> world
    double x0 = 0.0, dx = 1.0, y0 = 0.0, dy = 1.0;

    float at(int r, int c) const { return pixels[static_cast<std::size_t>(r) * cols + c]; }
    float& at(int r, int c) { return pixels[static_cast<std::size_t>(r) * cols + c]; }

    Vec3 pixel_to_world(double r, double c) const {
        return pose.apply({x0 + c * dx, y0 + r * dy, 0.0});
    }
};

struct Sweep {
    ProbeGeometry geometry;
    ImagingParams imaging;
    std::string tissue_map_id;
    std::string params_id;
    std::vector<Frame> frames;
};

// ---------------------------------------------------------------------------
// Acoustics primitives
// ---------------------------------------------------------------------------

/// Intensity reflection coefficient at a planar interface,
/// ((z2-z1)/(z2+z1))^2. Symmetric in its arguments, 0 for equal impedances,
/// approaching 1 as the mismatch grows.
inline double reflection_coefficient(double z1, double z2) {
    if (z1 < 0.0 || z2 < 0.0)
        throw std::invalid_argument("reflection_coefficient: impedances must be >= 0");
    if (z1 == 0.0 && z2 == 0.0)
        throw std::invalid_argument("reflection_coefficient: both impedances are zero");
    if (z1 == z2) return 0.0;
    const double r = (z2 - z1) / (z2 + z1);
    return r * r;
}

/// One-way amplitude attenuation over a path, 10^(-att*f*cm/20) with
/// att in dB/(cm*MHz).
inline double attenuation_factor(double att_db_per_cm_mhz, double frequency_mhz,
                                 double path_mm) {
    if (att_db_per_cm_mhz < 0.0 || path_mm < 0.0)
        throw std::invalid_argument("attenuation_factor: negative attenuation or path");
    const double loss_db = att_db_per_cm_mhz * frequency_mhz * (path_mm / 10.0);
    return std::pow(10.0, -loss_db / 20.0);
}

// ---------------------------------------------------------------------------
// Ray tracing
// ---------------------------------------------------------------------------

/// Marches one ray through the tissue map and returns the raw echo train,
/// one value per axial sample.
///
/// Sample r sits at origin + r*step*dir. Crossing into a different tissue
/// emits a specular echo R*T and multiplies the running transmission T by
/// (1-R); voxels scatter diffusely with presence and amplitude draws keyed
/// by the voxel's linear index, so the speckle pattern is a property of the
/// tissue, not of the probe position. Every echo is scaled by the squared
/// one-way attenuation accumulated up to its depth (round trip).
inline std::vector<double> trace_scanline(const TissueMap& tm, const Vec3& origin,
                                          const Vec3& dir, const ProbeGeometry& geom,
                                          const ImagingParams& params) {
    geom.validate();
    params.validate();
    const double n = norm(dir);
    if (std::abs(n - 1.0) > 1e-9)
        throw std::invalid_argument("trace_scanline: direction must be unit length");

    const double step = geom.axial_step_mm();
    const int samples = geom.samples_per_line;
    std::vector<double> line(static_cast<std::size_t>(samples), 0.0);

    double attenuation = 1.0;   // one-way amplitude factor accumulated so far
    double transmission = 1.0;  // prod (1 - R) over crossed interfaces
    std::uint8_t prev_label = 0;

    for (int r = 0; r < samples; ++r) {
        const Vec3 p = origin + dir * (r * step);
        const std::uint8_t label = tm.label_at(p);
        const AcousticProperties& props = tm.properties_of(label);

        double echo = 0.0;
        if (r > 0 && label != prev_label) {
            const AcousticProperties& prev = tm.properties_of(prev_label);
            const double refl = reflection_coefficient(prev.impedance, props.impedance);
            echo += refl * transmission;
            transmission *= 1.0 - refl;
        }
        if (props.scatter_density > 0.0) {
            const std::int64_t voxel = tm.voxel_index_at(p);
            if (voxel >= 0) {
                const auto key = static_cast<std::uint64_t>(voxel);
                if (rng_uniform01(params.seed, RngStream::scatter_presence, key) <
                    props.scatter_density) {
                    const double amp =
                        props.scatter_mean +
                        props.scatter_sigma *
                            rng_normal(params.seed, RngStream::scatter_amplitude, key);
                    echo += std::max(0.0, amp) * transmission;
                }
            }
        }
        line[static_cast<std::size_t>(r)] = echo * attenuation * attenuation;
        attenuation *= attenuation_factor(props.attenuation, geom.frequency_mhz, step);
        prev_label = label;
    }
    return line;
}

namespace detail {

/// Gaussian envelope modulated by the carrier, sampled at integer offsets
/// and truncated at 3 sigma. Normalized by the envelope sum so a lone
/// reflector keeps its peak amplitude.
inline std::vector<double> axial_psf_kernel(const ProbeGeometry& geom,
                                            const ImagingParams& params, int* half_out) {
    const double step = geom.axial_step_mm();
    const double sigma = params.psf_axial_sigma_mm / step;  // in samples
    const int half = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(static_cast<std::size_t>(2 * half + 1));
    double envelope_sum = 0.0;
    for (int i = -half; i <= half; ++i) {
        const double env = std::exp(-0.5 * (i / sigma) * (i / sigma));
        const double dist_mm = i * step;
        const double phase =
            2.0 * 3.14159265358979323846 * geom.frequency_mhz * dist_mm / kSpeedOfSoundMmPerUs;
        k[static_cast<std::size_t>(i + half)] = env * std::cos(phase);
        envelope_sum += env;
    }
    for (double& x : k) x /= envelope_sum;
    *half_out = half;
    return k;
}

/// Plain Gaussian across scanlines. The lateral pitch is the element pitch
/// for linear probes and the arc spacing at half depth for curvilinear ones.
inline std::vector<double> lateral_psf_kernel(const ProbeGeometry& geom,
                                              const ImagingParams& params, int* half_out) {
    double pitch;
    if (geom.kind == ProbeKind::linear) {
        pitch = geom.width_mm / (geom.scanline_count - 1);
    } else {
        const double angle_rad = geom.sector_angle_deg * 3.14159265358979323846 / 180.0;
        pitch = (geom.depth_mm / 2.0) * angle_rad / (geom.scanline_count - 1);
    }
    const double sigma = params.psf_lateral_sigma_mm / pitch;  // in scanlines
    const int half = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(static_cast<std::size_t>(2 * half + 1));
    double sum = 0.0;
    for (int j = -half; j <= half; ++j) {
        const double w = std::exp(-0.5 * (j / sigma) * (j / sigma));
        k[static_cast<std::size_t>(j + half)] = w;
        sum += w;
    }
    for (double& x : k) x /= sum;
    *half_out = half;
    return k;
}

}  // namespace detail

/// Separable PSF convolution of the raw echo image (zero padding outside).
inline Grid2D convolve_psf(const Grid2D& rf, const ProbeGeometry& geom,
                           const ImagingParams& params) {
    params.validate();
    int ha = 0, hl = 0;
    const std::vector<double> ka = detail::axial_psf_kernel(geom, params, &ha);
    const std::vector<double> kl = detail::lateral_psf_kernel(geom, params, &hl);
    if (2 * ha + 1 > rf.rows || 2 * hl + 1 > rf.cols)
        throw std::invalid_argument("convolve_psf: PSF kernel wider than image");

    Grid2D tmp(rf.rows, rf.cols);
    // axial pass
    for (int c = 0; c < rf.cols; ++c) {
        for (int r = 0; r < rf.rows; ++r) {
            double acc = 0.0;
            for (int i = -ha; i <= ha; ++i) {
                const int rr = r + i;
                if (rr < 0 || rr >= rf.rows) continue;
                acc += ka[static_cast<std::size_t>(i + ha)] * rf.at(rr, c);
            }
            tmp.at(r, c) = acc;
        }
    }
    Grid2D out(rf.rows, rf.cols);
    // lateral pass
    for (int r = 0; r < rf.rows; ++r) {
        for (int c = 0; c < rf.cols; ++c) {
            double acc = 0.0;
            for (int j = -hl; j <= hl; ++j) {
                const int cc = c + j;
                if (cc < 0 || cc >= rf.cols) continue;
                acc += kl[static_cast<std::size_t>(j + hl)] * tmp.at(r, cc);
            }
            out.at(r, c) = acc;
        }
    }
    return out;
}

/// Envelope detection: magnitude followed by an axial moving maximum over
/// one carrier period, which flattens the carrier ripple.
inline Grid2D detect_envelope(const Grid2D& rf, const ProbeGeometry& geom) {
    const int half = geom.carrier_period_samples() / 2;
    Grid2D env(rf.rows, rf.cols);
    for (int c = 0; c < rf.cols; ++c) {
        for (int r = 0; r < rf.rows; ++r) {
            double m = 0.0;
            const int lo = std::max(0, r - half);
            const int hi = std::min(rf.rows - 1, r + half);
            for (int rr = lo; rr <= hi; ++rr) m = std::max(m, std::abs(rf.at(rr, c)));
            env.at(r, c) = m;
        }
    }
    return env;
}

namespace detail {

/// Nearest-rank percentile (p in (0, 100]) of a copied value list.
inline double nearest_rank_percentile(std::vector<double> values, double p) {
    const auto n = static_cast<std::int64_t>(values.size());
    std::int64_t rank = static_cast<std::int64_t>(std::ceil(p / 100.0 * n));
    rank = std::clamp<std::int64_t>(rank, 1, n);
    std::nth_element(values.begin(), values.begin() + (rank - 1), values.end());
    return values[static_cast<std::size_t>(rank - 1)];
}

}  // namespace detail

/// TGC gain, additive noise, percentile normalization and log compression,
/// mapping the envelope image to display range [0, 1].
///
/// Noise draws are keyed by (frame index, row, column) so a sweep is a pure
/// function of its parameters regardless of evaluation order.
inline Grid2D postprocess(const Grid2D& env, const ProbeGeometry& geom,
                          const ImagingParams& params, int frame_index = 0) {
    params.validate();
    const double step_cm = geom.axial_step_mm() / 10.0;
    Grid2D x(env.rows, env.cols);
    for (int r = 0; r < env.rows; ++r) {
        const double gain = std::pow(10.0, params.tgc_db_per_cm * (r * step_cm) / 20.0);
        for (int c = 0; c < env.cols; ++c) {
            double val = env.at(r, c) * gain;
            if (params.noise_floor > 0.0) {
                const std::uint64_t a =
                    (static_cast<std::uint64_t>(static_cast<std::uint32_t>(frame_index)) << 32) |
                    static_cast<std::uint32_t>(r);
                val += params.noise_floor *
                       rng_uniform01(params.seed, RngStream::frame_noise, a,
                                     static_cast<std::uint32_t>(c));
            }
            x.at(r, c) = val;
        }
    }
    double p = detail::nearest_rank_percentile(x.v, 99.5);
    Grid2D out(env.rows, env.cols);
    // Sparse frames can have a zero percentile while still carrying echoes;
    // fall back to the frame maximum so they stay visible.
    if (p <= 0.0) p = *std::max_element(x.v.begin(), x.v.end());
    if (p <= 0.0) return out;  // nothing echoed; the frame is black
    const double dr = params.dynamic_range_db;
    for (std::size_t i = 0; i < x.v.size(); ++i) {
        const double db = 20.0 * std::log10(x.v[i] / p + 1e-6);
        out.v[i] = std::clamp((db + dr) / dr, 0.0, 1.0);
    }
    return out;
}

namespace detail {

/// Converts a fan-coordinate image (row = range sample, column = beam angle)
/// to a Cartesian grid of the same size via bilinear interpolation. Pixels
/// outside the fan are 0.
inline Grid2D scan_convert(const Grid2D& fan, const ProbeGeometry& geom) {
    const double angle_rad = geom.sector_angle_deg * 3.14159265358979323846 / 180.0;
    const double step = geom.axial_step_mm();
    const double half_width = geom.depth_mm * std::sin(angle_rad / 2.0);
    const double x0 = -half_width;
    const double dx = 2.0 * half_width / (fan.cols - 1);

    Grid2D out(fan.rows, fan.cols);
    for (int r = 0; r < fan.rows; ++r) {
        const double y = r * step;
        for (int c = 0; c < fan.cols; ++c) {
            const double x = x0 + c * dx;
            const double d = std::sqrt(x * x + y * y);
            const double theta = std::atan2(x, y);
            if (d > geom.depth_mm * (1.0 + 1e-12) || std::abs(theta) > angle_rad / 2.0) continue;
            const double row_f = std::min(d / step, double(fan.rows - 1));
            const double col_f = (theta / angle_rad + 0.5) * (fan.cols - 1);
            const int r0 = std::clamp(static_cast<int>(std::floor(row_f)), 0, fan.rows - 1);
            const int c0 = std::clamp(static_cast<int>(std::floor(col_f)), 0, fan.cols - 1);
            const int r1 = std::min(r0 + 1, fan.rows - 1);
            const int c1 = std::min(c0 + 1, fan.cols - 1);
            const double fr = row_f - r0;
            const double fc = col_f - c0;
            out.at(r, c) = (1 - fr) * ((1 - fc) * fan.at(r0, c0) + fc * fan.at(r0, c1)) +
                           fr * ((1 - fc) * fan.at(r1, c0) + fc * fan.at(r1, c1));
        }
    }
    return out;
}

}  // namespace detail

/// Renders one frame: per-line ray tracing, PSF convolution, envelope
/// detection, display mapping, and scan conversion for curvilinear probes.
inline Frame render_frame(const TissueMap& tm, const RigidTransform& pose,
                          const ProbeGeometry& geom, const ImagingParams& params,
                          int frame_index = 0) {
    geom.validate();
    params.validate();
    const int rows = geom.samples_per_line;
    const int cols = geom.scanline_count;
    const double angle_rad = geom.sector_angle_deg * 3.14159265358979323846 / 180.0;

    Grid2D rf(rows, cols);
    parallel_for(cols, [&](std::int64_t c) {
        Vec3 local_origin, local_dir;
        if (geom.kind == ProbeKind::linear) {
            const double x = -geom.width_mm / 2.0 + c * (geom.width_mm / (cols - 1));
            local_origin = {x, 0.0, 0.0};
            local_dir = {0.0, 1.0, 0.0};
        } else {
            const double theta = (double(c) / (cols - 1) - 0.5) * angle_rad;
            local_origin = {0.0, 0.0, 0.0};
            local_dir = {std::sin(theta), std::cos(theta), 0.0};
        }
        const std::vector<double> line = trace_scanline(
            tm, pose.apply(local_origin), pose.rotation * local_dir, geom, params);
        for (int r = 0; r < rows; ++r) rf.at(r, static_cast<int>(c)) = line[r];
    });

    Grid2D img = postprocess(detect_envelope(convolve_psf(rf, geom, params), geom), geom,
                             params, frame_index);
    if (geom.kind == ProbeKind::curvilinear) img = detail::scan_convert(img, geom);

    Frame f;
    f.rows = rows;
    f.cols = cols;
    f.pose = pose;
    f.y0 = 0.0;
    f.dy = geom.axial_step_mm();
    if (geom.kind == ProbeKind::linear) {
        f.x0 = -geom.width_mm / 2.0;
        f.dx = geom.width_mm / (cols - 1);
    } else {
        const double half_width = geom.depth_mm * std::sin(angle_rad / 2.0);
        f.x0 = -half_width;
        f.dx = 2.0 * half_width / (cols - 1);
    }
    f.pixels.resize(img.v.size());
    for (std::size_t i = 0; i < img.v.size(); ++i)
        f.pixels[i] = static_cast<float>(img.v[i]);
    return f;
}

/// Straight-line probe path: pose k translates the start by k * step_mm.
inline std::vector<RigidTransform> make_linear_trajectory(const Vec3& start,
                                                          const Vec3& step_mm, int frame_count,
                                                          const Mat3& rotation = Mat3::identity()) {
    if (frame_count < 1)
        throw std::invalid_argument("make_linear_trajectory: frame_count must be >= 1");
    std::vector<RigidTransform> poses;
    poses.reserve(static_cast<std::size_t>(frame_count));
    for (int k = 0; k < frame_count; ++k)
        poses.push_back({rotation, start + step_mm * double(k)});
    return poses;
}

/// Renders one frame per pose. Deterministic for a fixed (tissue map,
/// trajectory, geometry, params) tuple at any thread count.
inline Sweep simulate_sweep(const TissueMap& tm, const std::vector<RigidTransform>& trajectory,
                            const ProbeGeometry& geom, const ImagingParams& params,
                            const std::string& tissue_map_id = "",
                            const std::string& params_id = "") {
    if (trajectory.empty())
        throw std::invalid_argument("simulate_sweep: trajectory must contain at least one pose");
    Sweep sweep;
    sweep.geometry = geom;
    sweep.imaging = params;
    sweep.tissue_map_id = tissue_map_id;
    sweep.params_id = params_id;
    sweep.frames.reserve(trajectory.size());
    for (std::size_t k = 0; k < trajectory.size(); ++k)
        sweep.frames.push_back(
            render_frame(tm, trajectory[k], geom, params, static_cast<int>(k)));
    return sweep;
}

// ---------------------------------------------------------------------------
// Sweep persistence
// ---------------------------------------------------------------------------

inline nlohmann::json probe_geometry_to_json(const ProbeGeometry& g) {
    return {{"kind", to_string(g.kind)},
            {"scanline_count", g.scanline_count},
            {"samples_per_line", g.samples_per_line},
            {"width_mm", g.width_mm},
            {"sector_angle_deg", g.sector_angle_deg},
            {"depth_mm", g.depth_mm},
            {"frequency_mhz", g.frequency_mhz}};
}

inline ProbeGeometry probe_geometry_from_json(const nlohmann::json& j) {
    ProbeGeometry g;
    g.kind = probe_kind_from_string(j.at("kind").get<std::string>());
    g.scanline_count = j.at("scanline_count").get<int>();
    g.samples_per_line = j.at("samples_per_line").get<int>();
    g.width_mm = j.at("width_mm").get<double>();
    g.sector_angle_deg = j.at("sector_angle_deg").get<double>();
    g.depth_mm = j.at("depth_mm").get<double>();
    g.frequency_mhz = j.at("frequency_mhz").get<double>();
    g.validate();
    return g;
}

inline nlohmann::json imaging_params_to_json(const ImagingParams& p) {
    return {{"dynamic_range_db", p.dynamic_range_db},
            {"tgc_db_per_cm", p.tgc_db_per_cm},
            {"noise_floor", p.noise_floor},
            {"psf_axial_sigma_mm", p.psf_axial_sigma_mm},
            {"psf_lateral_sigma_mm", p.psf_lateral_sigma_mm},
            {"seed", p.seed}};
}

inline ImagingParams imaging_params_from_json(const nlohmann::json& j) {
    ImagingParams p;
    p.dynamic_range_db = j.at("dynamic_range_db").get<double>();
    p.tgc_db_per_cm = j.at("tgc_db_per_cm").get<double>();
    p.noise_floor = j.at("noise_floor").get<double>();
    p.psf_axial_sigma_mm = j.at("psf_axial_sigma_mm").get<double>();
    p.psf_lateral_sigma_mm = j.at("psf_lateral_sigma_mm").get<double>();
    p.seed = j.at("seed").get<std::uint64_t>();
    p.validate();
    return p;
}

namespace detail {

inline std::string frame_file_name(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "frame_%04zu.mhd", index);
    return buf;
}

/// A frame's pixel grid as a one-slice volume placed in world space.
inline Volume3D frame_to_volume(const Frame& f) {
    Volume3D v = Volume3D::create({f.cols, f.rows, 1}, {f.dx, f.dy, 1.0},
                                  f.pixel_to_world(0.0, 0.0), f.pose.rotation,
                                  ElementKind::float32);
    auto& data = v.floats();
    for (int r = 0; r < f.rows; ++r)
        for (int c = 0; c < f.cols; ++c)
            data[v.index(c, r, 0)] = f.at(r, c);
    return v;
}

}  // namespace detail

/// Writes one .mhd/.raw pair per frame plus a sweep.json manifest carrying
/// geometry, imaging parameters, provenance ids and per-frame poses.
inline void save_sweep(const Sweep& sweep, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json frames = nlohmann::json::array();
    for (std::size_t i = 0; i < sweep.frames.size(); ++i) {
        const Frame& f = sweep.frames[i];
        const std::string name = detail::frame_file_name(i);
        save_volume(detail::frame_to_volume(f), dir / name);
        const Mat3& rot = f.pose.rotation;
        frames.push_back({{"file", name},
                          {"rotation", std::vector<double>(rot.m.begin(), rot.m.end())},
                          {"translation", {f.pose.translation.x, f.pose.translation.y,
                                           f.pose.translation.z}}});
    }
    nlohmann::json j = {{"geometry", probe_geometry_to_json(sweep.geometry)},
                        {"imaging", imaging_params_to_json(sweep.imaging)},
                        {"metadata",
                         {{"tissue_map_id", sweep.tissue_map_id},
                          {"params_id", sweep.params_id}}},
                        {"plane",
                         {{"x0", sweep.frames.empty() ? 0.0 : sweep.frames[0].x0},
                          {"dx", sweep.frames.empty() ? 1.0 : sweep.frames[0].dx},
                          {"y0", sweep.frames.empty() ? 0.0 : sweep.frames[0].y0},
                          {"dy", sweep.frames.empty() ? 1.0 : sweep.frames[0].dy}}},
                        {"frames", frames}};
    std::ofstream out(dir / "sweep.json", std::ios::trunc);
    if (!out) throw std::runtime_error("save_sweep: cannot write " + dir.string());
    out << j.dump(2) << '\n';
}

inline Sweep load_sweep(const std::filesystem::path& dir) {
    const auto manifest = dir / "sweep.json";
    std::ifstream in(manifest);
    if (!in) throw std::runtime_error("load_sweep: missing file: " + manifest.string());
    nlohmann::json j;
    in >> j;

    Sweep sweep;
    sweep.geometry = probe_geometry_from_json(j.at("geometry"));
    sweep.imaging = imaging_params_from_json(j.at("imaging"));
    sweep.tissue_map_id = j.at("metadata").at("tissue_map_id").get<std::string>();
    sweep.params_id = j.at("metadata").at("params_id").get<std::string>();
    const auto& plane = j.at("plane");

    for (const auto& fj : j.at("frames")) {
        const Volume3D v = load_volume(dir / fj.at("file").get<std::string>());
        Frame f;
        f.cols = v.dims()[0];
        f.rows = v.dims()[1];
        const auto rot = fj.at("rotation").get<std::vector<double>>();
        if (rot.size() != 9) throw std::runtime_error("load_sweep: rotation needs 9 entries");
        std::copy(rot.begin(), rot.end(), f.pose.rotation.m.begin());
        if (!is_orthonormal(f.pose.rotation))
            throw std::runtime_error("load_sweep: frame rotation not orthonormal");
        const auto tr = fj.at("translation").get<std::vector<double>>();
        if (tr.size() != 3) throw std::runtime_error("load_sweep: translation needs 3 entries");
        f.pose.translation = {tr[0], tr[1], tr[2]};
        f.x0 = plane.at("x0").get<double>();
        f.dx = plane.at("dx").get<double>();
        f.y0 = plane.at("y0").get<double>();
        f.dy = plane.at("dy").get<double>();
        f.pixels.resize(v.voxel_count());
        for (int r = 0; r < f.rows; ++r)
            for (int c = 0; c < f.cols; ++c)
                f.pixels[static_cast<std::size_t>(r) * f.cols + c] = v.floats()[v.index(c, r, 0)];
        sweep.frames.push_back(std::move(f));
    }
    return sweep;
}

}  // namespace sonoseg
