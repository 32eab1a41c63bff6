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
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "sonoseg/augment.hpp"
#include "sonoseg/parallel.hpp"
#include "sonoseg/rng.hpp"
#include "sonoseg/volume.hpp"

namespace sonoseg {

// ---------------------------------------------------------------------------
// Tensors
// ---------------------------------------------------------------------------

/// Dense 4D tensor, x fastest then y, z, channel. All network math runs in
/// double precision; only checkpoints quantize to float.
struct Tensor {
    std::array<int, 4> shape{0, 0, 0, 0};  // nx, ny, nz, channels
    std::vector<double> v;

    static Tensor zeros(int nx, int ny, int nz, int c) {
        Tensor t;
        t.shape = {nx, ny, nz, c};
        t.v.assign(std::size_t(nx) * ny * nz * c, 0.0);
        return t;
    }

    std::size_t idx(int x, int y, int z, int c) const {
        return std::size_t(x) +
               std::size_t(shape[0]) *
                   (std::size_t(y) + std::size_t(shape[1]) *
                                         (std::size_t(z) + std::size_t(shape[2]) * c));
    }
    double at(int x, int y, int z, int c) const { return v[idx(x, y, z, c)]; }
    double& at(int x, int y, int z, int c) { return v[idx(x, y, z, c)]; }
    std::size_t size() const { return v.size(); }
    std::size_t voxels() const { return std::size_t(shape[0]) * shape[1] * shape[2]; }
};

// ---------------------------------------------------------------------------
// Architecture
// ---------------------------------------------------------------------------

/// Dense fully-convolutional segmentation net. Each scale s runs at stride
/// 2^s: a 3x3x3 stem (stride 2 past scale 0) followed by layers_per_scale
/// densely concatenated 3x3x3 convolutions. Every scale's final features are
/// trilinearly upsampled to full resolution, concatenated, and mapped to a
/// voxelwise foreground probability by a 1x1x1 convolution with a logistic.
struct NetConfig {
    int in_channels = 1;
    int base_channels = 8;
    int growth = 8;
    int layers_per_scale = 2;
    int scales = 3;

    void validate() const {
        if (in_channels < 1 || base_channels < 1 || growth < 1)
            throw std::invalid_argument("NetConfig: channel counts must be >= 1");
        if (layers_per_scale < 0)
            throw std::invalid_argument("NetConfig: layers_per_scale must be >= 0");
        if (scales < 1 || scales > 6)
            throw std::invalid_argument("NetConfig: scales must be in [1, 6]");
    }

    /// Channel width of each scale's final feature map.
    int scale_width() const { return base_channels + layers_per_scale * growth; }
    /// Width of the full-resolution concatenation feeding the head.
    int concat_width() const { return scales * scale_width(); }
    /// Patch dims must be divisible by this for the skip paths to line up.
    int dim_multiple() const { return 1 << (scales - 1); }

    bool operator==(const NetConfig&) const = default;
};

inline nlohmann::json net_config_to_json(const NetConfig& c) {
    return {{"in_channels", c.in_channels},
            {"base_channels", c.base_channels},
            {"growth", c.growth},
            {"layers_per_scale", c.layers_per_scale},
            {"scales", c.scales}};
}

inline NetConfig net_config_from_json(const nlohmann::json& j) {
    NetConfig c;
    c.in_channels = j.at("in_channels").get<int>();
    c.base_channels = j.at("base_channels").get<int>();
    c.growth = j.at("growth").get<int>();
    c.layers_per_scale = j.at("layers_per_scale").get<int>();
    c.scales = j.at("scales").get<int>();
    c.validate();
    return c;
}

namespace detail {

struct ConvSpec {
    int cin = 0, cout = 0, kernel = 3, stride = 1;
    std::size_t w_off = 0, b_off = 0;  // into the flat parameter vector

    std::size_t weight_count() const {
        return std::size_t(kernel) * kernel * kernel * cin * cout;
    }
};

}  // namespace detail

/// The network: its config, a flat double parameter vector and the conv
/// layout derived from the config. Conv order: per scale the stem then the
/// dense layers, finally the 1x1x1 head.
struct Network {
    NetConfig config;
    std::vector<double> params;
    std::vector<detail::ConvSpec> convs;

    const detail::ConvSpec& stem(int scale) const {
        return convs[std::size_t(scale) * (1 + config.layers_per_scale)];
    }
    const detail::ConvSpec& dense(int scale, int layer) const {
        return convs[std::size_t(scale) * (1 + config.layers_per_scale) + 1 + layer];
    }
    const detail::ConvSpec& head() const { return convs.back(); }
};

namespace detail {

inline std::vector<ConvSpec> build_conv_layout(const NetConfig& cfg, std::size_t* total) {
    std::vector<ConvSpec> convs;
    std::size_t off = 0;
    const auto push = [&](int cin, int cout, int kernel, int stride) {
        ConvSpec c;
        c.cin = cin;
        c.cout = cout;
        c.kernel = kernel;
        c.stride = stride;
        c.w_off = off;
        off += c.weight_count();
        c.b_off = off;
        off += std::size_t(cout);
        convs.push_back(c);
    };
    for (int s = 0; s < cfg.scales; ++s) {
        push(s == 0 ? cfg.in_channels : cfg.scale_width(), cfg.base_channels, 3,
             s == 0 ? 1 : 2);
        for (int l = 0; l < cfg.layers_per_scale; ++l)
            push(cfg.base_channels + l * cfg.growth, cfg.growth, 3, 1);
    }
    push(cfg.concat_width(), 1, 1, 1);
    *total = off;
    return convs;
}

}  // namespace detail

/// Total parameter count for a config (weights plus biases of every conv).
inline std::size_t parameter_count(const NetConfig& cfg) {
    std::size_t total = 0;
    detail::build_conv_layout(cfg, &total);
    return total;
}

/// He-initialized network: weight w ~ N(0, 2/fan_in) keyed by its flat
/// parameter index, biases zero. A (config, seed) pair fully determines the
/// parameters.
inline Network init_network(const NetConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Network net;
    net.config = cfg;
    std::size_t total = 0;
    net.convs = detail::build_conv_layout(cfg, &total);
    net.params.assign(total, 0.0);
    for (const auto& conv : net.convs) {
        const double scale =
            std::sqrt(2.0 / (double(conv.cin) * conv.kernel * conv.kernel * conv.kernel));
        for (std::size_t i = 0; i < conv.weight_count(); ++i) {
            const std::size_t p = conv.w_off + i;
            net.params[p] = scale * rng_normal(seed, RngStream::net_init, p);
        }
        // biases stay zero
    }
    return net;
}

// ---------------------------------------------------------------------------
// Primitive ops
// ---------------------------------------------------------------------------

namespace detail {

inline int conv_out_dim(int in, int kernel, int stride) {
    const int pad = kernel == 3 ? 1 : 0;
    return (in + 2 * pad - kernel) / stride + 1;
}

/// Weight index: (((co*cin + ci)*k + kz)*k + ky)*k + kx.
inline void conv3d_forward(const Tensor& in, Tensor& out, const double* w, const double* b,
                           const ConvSpec& spec) {
    const int k = spec.kernel, pad = k == 3 ? 1 : 0, st = spec.stride;
    const int nx = in.shape[0], ny = in.shape[1], nz = in.shape[2];
    const int ox = out.shape[0], oy = out.shape[1], oz = out.shape[2];
    parallel_for(std::int64_t(spec.cout) * oz, [&](std::int64_t job) {
        const int co = int(job / oz);
        const int z = int(job % oz);
        for (int y = 0; y < oy; ++y) {
            for (int x = 0; x < ox; ++x) {
                double acc = b[co];
                for (int ci = 0; ci < spec.cin; ++ci) {
                    const double* wc = w + ((std::size_t(co) * spec.cin + ci) * k * k * k);
                    for (int kz = 0; kz < k; ++kz) {
                        const int iz = z * st + kz - pad;
                        if (iz < 0 || iz >= nz) continue;
                        for (int ky = 0; ky < k; ++ky) {
                            const int iy = y * st + ky - pad;
                            if (iy < 0 || iy >= ny) continue;
                            const double* row = &in.v[in.idx(0, iy, iz, ci)];
                            const double* wr = wc + (std::size_t(kz) * k + ky) * k;
                            for (int kx = 0; kx < k; ++kx) {
                                const int ix = x * st + kx - pad;
                                if (ix < 0 || ix >= nx) continue;
                                acc += row[ix] * wr[kx];
                            }
                        }
                    }
                }
                out.at(x, y, z, co) = acc;
            }
        }
    });
}

/// Gradient with respect to the conv input (gather form: each input element
/// sums over the output positions its value reached).
inline void conv3d_backward_input(const Tensor& grad_out, Tensor& grad_in, const double* w,
                                  const ConvSpec& spec) {
    const int k = spec.kernel, pad = k == 3 ? 1 : 0, st = spec.stride;
    const int nx = grad_in.shape[0], ny = grad_in.shape[1], nz = grad_in.shape[2];
    const int ox = grad_out.shape[0], oy = grad_out.shape[1], oz = grad_out.shape[2];
    parallel_for(std::int64_t(spec.cin) * nz, [&](std::int64_t job) {
        const int ci = int(job / nz);
        const int iz = int(job % nz);
        for (int iy = 0; iy < ny; ++iy) {
            for (int ix = 0; ix < nx; ++ix) {
                double acc = 0.0;
                for (int co = 0; co < spec.cout; ++co) {
                    const double* wc = w + ((std::size_t(co) * spec.cin + ci) * k * k * k);
                    for (int kz = 0; kz < k; ++kz) {
                        const int num_z = iz + pad - kz;
                        if (num_z < 0 || num_z % st != 0) continue;
                        const int z = num_z / st;
                        if (z >= oz) continue;
                        for (int ky = 0; ky < k; ++ky) {
                            const int num_y = iy + pad - ky;
                            if (num_y < 0 || num_y % st != 0) continue;
                            const int y = num_y / st;
                            if (y >= oy) continue;
                            for (int kx = 0; kx < k; ++kx) {
                                const int num_x = ix + pad - kx;
                                if (num_x < 0 || num_x % st != 0) continue;
                                const int x = num_x / st;
                                if (x >= ox) continue;
                                acc += grad_out.at(x, y, z, co) *
                                       wc[(std::size_t(kz) * k + ky) * k + kx];
                            }
                        }
                    }
                }
                grad_in.at(ix, iy, iz, ci) = acc;
            }
        }
    });
}

/// Gradients with respect to weights and biases, accumulated into grad_w /
/// grad_b (caller zeroes them). Deterministic: each (co, ci, k) cell sums
/// output positions in a fixed order.
inline void conv3d_backward_params(const Tensor& in, const Tensor& grad_out, double* grad_w,
                                   double* grad_b, const ConvSpec& spec) {
    const int k = spec.kernel, pad = k == 3 ? 1 : 0, st = spec.stride;
    const int nx = in.shape[0], ny = in.shape[1], nz = in.shape[2];
    const int ox = grad_out.shape[0], oy = grad_out.shape[1], oz = grad_out.shape[2];
    parallel_for(spec.cout, [&](std::int64_t co64) {
        const int co = int(co64);
        double bias_acc = 0.0;
        for (int z = 0; z < oz; ++z)
            for (int y = 0; y < oy; ++y)
                for (int x = 0; x < ox; ++x) bias_acc += grad_out.at(x, y, z, co);
        grad_b[co] += bias_acc;

        for (int ci = 0; ci < spec.cin; ++ci) {
            double* wc = grad_w + ((std::size_t(co) * spec.cin + ci) * k * k * k);
            for (int kz = 0; kz < k; ++kz)
                for (int ky = 0; ky < k; ++ky)
                    for (int kx = 0; kx < k; ++kx) {
                        double acc = 0.0;
                        for (int z = 0; z < oz; ++z) {
                            const int iz = z * st + kz - pad;
                            if (iz < 0 || iz >= nz) continue;
                            for (int y = 0; y < oy; ++y) {
                                const int iy = y * st + ky - pad;
                                if (iy < 0 || iy >= ny) continue;
                                for (int x = 0; x < ox; ++x) {
                                    const int ix = x * st + kx - pad;
                                    if (ix < 0 || ix >= nx) continue;
                                    acc += grad_out.at(x, y, z, co) * in.at(ix, iy, iz, ci);
                                }
                            }
                        }
                        wc[(std::size_t(kz) * k + ky) * k + kx] += acc;
                    }
        }
    });
}

inline double elu(double x) { return x > 0.0 ? x : std::expm1(x); }
inline double elu_grad_from_input(double x) { return x > 0.0 ? 1.0 : std::exp(x); }

inline void elu_forward(const Tensor& z, Tensor& a) {
    a.shape = z.shape;
    a.v.resize(z.v.size());
    for (std::size_t i = 0; i < z.v.size(); ++i) a.v[i] = elu(z.v[i]);
}

/// Trilinear upsampling by an integer factor per axis, centers aligned:
/// source coordinate of output x is (x + 0.5)/f - 0.5, clamped.
inline void upsample_forward(const Tensor& in, Tensor& out, int factor) {
    const int nx = in.shape[0], ny = in.shape[1], nz = in.shape[2], nc = in.shape[3];
    out = Tensor::zeros(nx * factor, ny * factor, nz * factor, nc);
    const auto src = [factor](int o, int n, int* i0, int* i1, double* f1) {
        const double s = (o + 0.5) / factor - 0.5;
        const double c = std::clamp(s, 0.0, double(n - 1));
        *i0 = int(std::floor(c));
        *i1 = std::min(*i0 + 1, n - 1);
        *f1 = c - *i0;
    };
    parallel_for(nc, [&](std::int64_t c64) {
        const int c = int(c64);
        for (int z = 0; z < out.shape[2]; ++z) {
            int z0, z1;
            double fz;
            src(z, nz, &z0, &z1, &fz);
            for (int y = 0; y < out.shape[1]; ++y) {
                int y0, y1;
                double fy;
                src(y, ny, &y0, &y1, &fy);
                for (int x = 0; x < out.shape[0]; ++x) {
                    int x0, x1;
                    double fx;
                    src(x, nx, &x0, &x1, &fx);
                    const double v =
                        (1 - fz) * ((1 - fy) * ((1 - fx) * in.at(x0, y0, z0, c) +
                                                fx * in.at(x1, y0, z0, c)) +
                                    fy * ((1 - fx) * in.at(x0, y1, z0, c) +
                                          fx * in.at(x1, y1, z0, c))) +
                        fz * ((1 - fy) * ((1 - fx) * in.at(x0, y0, z1, c) +
                                          fx * in.at(x1, y0, z1, c)) +
                              fy * ((1 - fx) * in.at(x0, y1, z1, c) +
                                    fx * in.at(x1, y1, z1, c)));
                    out.at(x, y, z, c) = v;
                }
            }
        }
    });
}

/// Transpose of upsample_forward: scatter each output gradient back onto its
/// eight interpolation sources. Channels run in parallel; within a channel
/// the scatter order is fixed.
inline void upsample_backward(const Tensor& grad_out, Tensor& grad_in, int factor) {
    const int nx = grad_in.shape[0], ny = grad_in.shape[1], nz = grad_in.shape[2],
              nc = grad_in.shape[3];
    const auto src = [factor](int o, int n, int* i0, int* i1, double* f1) {
        const double s = (o + 0.5) / factor - 0.5;
        const double c = std::clamp(s, 0.0, double(n - 1));
        *i0 = int(std::floor(c));
        *i1 = std::min(*i0 + 1, n - 1);
        *f1 = c - *i0;
    };
    parallel_for(nc, [&](std::int64_t c64) {
        const int c = int(c64);
        for (int z = 0; z < grad_out.shape[2]; ++z) {
            int z0, z1;
            double fz;
            src(z, nz, &z0, &z1, &fz);
            for (int y = 0; y < grad_out.shape[1]; ++y) {
                int y0, y1;
                double fy;
                src(y, ny, &y0, &y1, &fy);
                for (int x = 0; x < grad_out.shape[0]; ++x) {
                    int x0, x1;
                    double fx;
                    src(x, nx, &x0, &x1, &fx);
                    const double g = grad_out.at(x, y, z, c);
                    grad_in.at(x0, y0, z0, c) += (1 - fz) * (1 - fy) * (1 - fx) * g;
                    grad_in.at(x1, y0, z0, c) += (1 - fz) * (1 - fy) * fx * g;
                    grad_in.at(x0, y1, z0, c) += (1 - fz) * fy * (1 - fx) * g;
                    grad_in.at(x1, y1, z0, c) += (1 - fz) * fy * fx * g;
                    grad_in.at(x0, y0, z1, c) += fz * (1 - fy) * (1 - fx) * g;
                    grad_in.at(x1, y0, z1, c) += fz * (1 - fy) * fx * g;
                    grad_in.at(x0, y1, z1, c) += fz * fy * (1 - fx) * g;
                    grad_in.at(x1, y1, z1, c) += fz * fy * fx * g;
                }
            }
        }
    });
}

/// Copies src into channels [c_off, c_off+src.channels) of dst.
inline void concat_channels(const Tensor& src, Tensor& dst, int c_off) {
    const std::size_t block = src.voxels();
    for (int c = 0; c < src.shape[3]; ++c)
        std::copy(src.v.begin() + std::ptrdiff_t(block) * c,
                  src.v.begin() + std::ptrdiff_t(block) * (c + 1),
                  dst.v.begin() + std::ptrdiff_t(block) * (c_off + c));
}

inline Tensor slice_channels(const Tensor& src, int c_off, int count) {
    Tensor out = Tensor::zeros(src.shape[0], src.shape[1], src.shape[2], count);
    const std::size_t block = src.voxels();
    std::copy(src.v.begin() + std::ptrdiff_t(block) * c_off,
              src.v.begin() + std::ptrdiff_t(block) * (c_off + count), out.v.begin());
    return out;
}

/// Everything the backward pass needs from a forward evaluation.
struct ForwardTape {
    std::vector<Tensor> stem_in;     // per scale: input to the stem conv
    std::vector<Tensor> stem_z;      // per scale: stem pre-activation
    std::vector<std::vector<Tensor>> dense_in;  // per scale, per layer
    std::vector<std::vector<Tensor>> dense_z;
    std::vector<Tensor> scale_out;   // per scale: final dense feature map
    Tensor concat;                   // full-resolution skip concatenation
    Tensor prob;                     // logistic output, 1 channel
};

}  // namespace detail

/// Forward evaluation. Input shape (x, y, z, in_channels) with each spatial
/// dim divisible by 2^(scales-1); output has one probability channel on the
/// same spatial grid. Keeping the tape is only needed when backpropagating.
inline Tensor forward(const Network& net, const Tensor& input,
                      detail::ForwardTape* tape = nullptr) {
    const NetConfig& cfg = net.config;
    if (input.shape[3] != cfg.in_channels)
        throw std::invalid_argument("forward: input channel count mismatch");
    for (int d = 0; d < 3; ++d) {
        if (input.shape[d] < cfg.dim_multiple() || input.shape[d] % cfg.dim_multiple() != 0)
            throw std::invalid_argument(
                "forward: spatial dims must be positive multiples of 2^(scales-1)");
    }

    detail::ForwardTape local;
    detail::ForwardTape& t = tape ? *tape : local;
    t.stem_in.clear();
    t.stem_z.clear();
    t.dense_in.assign(std::size_t(cfg.scales), {});
    t.dense_z.assign(std::size_t(cfg.scales), {});
    t.scale_out.clear();

    const double* P = net.params.data();
    Tensor feat = input;
    for (int s = 0; s < cfg.scales; ++s) {
        const auto& stem = net.stem(s);
        Tensor z = Tensor::zeros(detail::conv_out_dim(feat.shape[0], stem.kernel, stem.stride),
                                 detail::conv_out_dim(feat.shape[1], stem.kernel, stem.stride),
                                 detail::conv_out_dim(feat.shape[2], stem.kernel, stem.stride),
                                 stem.cout);
        detail::conv3d_forward(feat, z, P + stem.w_off, P + stem.b_off, stem);
        t.stem_in.push_back(std::move(feat));
        Tensor cur;
        detail::elu_forward(z, cur);
        t.stem_z.push_back(std::move(z));

        for (int l = 0; l < cfg.layers_per_scale; ++l) {
            const auto& spec = net.dense(s, l);
            Tensor zl = Tensor::zeros(cur.shape[0], cur.shape[1], cur.shape[2], spec.cout);
            detail::conv3d_forward(cur, zl, P + spec.w_off, P + spec.b_off, spec);
            Tensor g;
            detail::elu_forward(zl, g);
            Tensor wider =
                Tensor::zeros(cur.shape[0], cur.shape[1], cur.shape[2], cur.shape[3] + spec.cout);
            detail::concat_channels(cur, wider, 0);
            detail::concat_channels(g, wider, cur.shape[3]);
            t.dense_in[std::size_t(s)].push_back(std::move(cur));
            t.dense_z[std::size_t(s)].push_back(std::move(zl));
            cur = std::move(wider);
        }
        t.scale_out.push_back(cur);
        feat = std::move(cur);
    }

    // full-resolution skip concatenation
    Tensor concat = Tensor::zeros(input.shape[0], input.shape[1], input.shape[2],
                                  cfg.concat_width());
    for (int s = 0; s < cfg.scales; ++s) {
        if (s == 0) {
            detail::concat_channels(t.scale_out[0], concat, 0);
        } else {
            Tensor up;
            detail::upsample_forward(t.scale_out[std::size_t(s)], up, 1 << s);
            detail::concat_channels(up, concat, s * cfg.scale_width());
        }
    }

    const auto& head = net.head();
    Tensor z_head = Tensor::zeros(concat.shape[0], concat.shape[1], concat.shape[2], 1);
    detail::conv3d_forward(concat, z_head, P + head.w_off, P + head.b_off, head);
    t.concat = std::move(concat);

    Tensor prob = Tensor::zeros(z_head.shape[0], z_head.shape[1], z_head.shape[2], 1);
    for (std::size_t i = 0; i < z_head.v.size(); ++i)
        prob.v[i] = 1.0 / (1.0 + std::exp(-z_head.v[i]));
    t.prob = prob;
    return prob;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

inline constexpr double kDiceSmooth = 1e-5;

/// Soft-Dice loss 1 - (2*sum(p*g) + eps) / (sum(p^2) + sum(g^2) + eps) and
/// its gradient with respect to the probabilities. The squared denominator
/// keeps D <= 1 (per-voxel 2pg <= p^2 + g^2), so the loss stays in [0, 1];
/// the smooth term makes the both-empty case a perfect score.
inline double soft_dice_loss(const Tensor& prob, const Tensor& target, Tensor* grad = nullptr) {
    if (prob.shape != target.shape)
        throw std::invalid_argument("soft_dice_loss: shape mismatch");
    double inter = 0.0, sum_p2 = 0.0, sum_t2 = 0.0;
    for (std::size_t i = 0; i < prob.v.size(); ++i) {
        inter += prob.v[i] * target.v[i];
        sum_p2 += prob.v[i] * prob.v[i];
        sum_t2 += target.v[i] * target.v[i];
    }
    const double num = 2.0 * inter + kDiceSmooth;
    const double den = sum_p2 + sum_t2 + kDiceSmooth;
    if (grad) {
        grad->shape = prob.shape;
        grad->v.assign(prob.v.size(), 0.0);
        // d/dp_i of -num/den with num and den both functions of p_i
        const double inv_den2 = 1.0 / (den * den);
        for (std::size_t i = 0; i < prob.v.size(); ++i)
            grad->v[i] = (2.0 * prob.v[i] * num - 2.0 * target.v[i] * den) * inv_den2;
    }
    return 1.0 - num / den;
}

// ---------------------------------------------------------------------------
// Backpropagation
// ---------------------------------------------------------------------------

struct LossAndGrad {
    double loss = 0.0;
    std::vector<double> grad;  // same layout as Network::params
};

/// Forward, soft-Dice loss against the binary target, and a full reverse
/// sweep producing the gradient of the loss with respect to every parameter.
inline LossAndGrad backward(const Network& net, const Tensor& input, const Tensor& target) {
    const NetConfig& cfg = net.config;
    detail::ForwardTape tape;
    const Tensor prob = forward(net, input, &tape);

    LossAndGrad out;
    Tensor d_prob;
    out.loss = soft_dice_loss(prob, target, &d_prob);
    out.grad.assign(net.params.size(), 0.0);
    double* G = out.grad.data();
    const double* P = net.params.data();

    // logistic
    Tensor d_zhead = Tensor::zeros(prob.shape[0], prob.shape[1], prob.shape[2], 1);
    for (std::size_t i = 0; i < prob.v.size(); ++i)
        d_zhead.v[i] = d_prob.v[i] * prob.v[i] * (1.0 - prob.v[i]);

    // head conv
    const auto& head = net.head();
    Tensor d_concat = Tensor::zeros(tape.concat.shape[0], tape.concat.shape[1],
                                    tape.concat.shape[2], tape.concat.shape[3]);
    detail::conv3d_backward_params(tape.concat, d_zhead, G + head.w_off, G + head.b_off, head);
    detail::conv3d_backward_input(d_zhead, d_concat, P + head.w_off, head);

    // split the concat gradient back to per-scale outputs
    std::vector<Tensor> d_scale_out(std::size_t(cfg.scales));
    for (int s = 0; s < cfg.scales; ++s) {
        const Tensor slice =
            detail::slice_channels(d_concat, s * cfg.scale_width(), cfg.scale_width());
        if (s == 0) {
            d_scale_out[0] = slice;
        } else {
            const Tensor& coarse = tape.scale_out[std::size_t(s)];
            d_scale_out[std::size_t(s)] =
                Tensor::zeros(coarse.shape[0], coarse.shape[1], coarse.shape[2],
                              coarse.shape[3]);
            detail::upsample_backward(slice, d_scale_out[std::size_t(s)], 1 << s);
        }
    }

    // scales in reverse: dense chains, then the stem, whose input gradient
    // adds to the previous scale's output gradient
    for (int s = cfg.scales - 1; s >= 0; --s) {
        Tensor d_cur = std::move(d_scale_out[std::size_t(s)]);
        for (int l = cfg.layers_per_scale - 1; l >= 0; --l) {
            const auto& spec = net.dense(s, l);
            const Tensor& zl = tape.dense_z[std::size_t(s)][std::size_t(l)];
            const Tensor& in_l = tape.dense_in[std::size_t(s)][std::size_t(l)];
            Tensor d_g = detail::slice_channels(d_cur, in_l.shape[3], spec.cout);
            for (std::size_t i = 0; i < d_g.v.size(); ++i)
                d_g.v[i] *= detail::elu_grad_from_input(zl.v[i]);
            Tensor d_in = Tensor::zeros(in_l.shape[0], in_l.shape[1], in_l.shape[2],
                                        in_l.shape[3]);
            detail::conv3d_backward_params(in_l, d_g, G + spec.w_off, G + spec.b_off, spec);
            detail::conv3d_backward_input(d_g, d_in, P + spec.w_off, spec);
            Tensor d_prev = detail::slice_channels(d_cur, 0, in_l.shape[3]);
            for (std::size_t i = 0; i < d_prev.v.size(); ++i) d_prev.v[i] += d_in.v[i];
            d_cur = std::move(d_prev);
        }
        const auto& stem = net.stem(s);
        const Tensor& z = tape.stem_z[std::size_t(s)];
        for (std::size_t i = 0; i < d_cur.v.size(); ++i)
            d_cur.v[i] *= detail::elu_grad_from_input(z.v[i]);
        const Tensor& stem_in = tape.stem_in[std::size_t(s)];
        detail::conv3d_backward_params(stem_in, d_cur, G + stem.w_off, G + stem.b_off, stem);
        if (s > 0) {
            Tensor d_in = Tensor::zeros(stem_in.shape[0], stem_in.shape[1], stem_in.shape[2],
                                        stem_in.shape[3]);
            detail::conv3d_backward_input(d_cur, d_in, P + stem.w_off, stem);
            Tensor& below = d_scale_out[std::size_t(s) - 1];
            for (std::size_t i = 0; i < d_in.v.size(); ++i) below.v[i] += d_in.v[i];
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamState {
    std::vector<double> m, v;
    std::uint64_t t = 0;
    double lr = 2e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    static AdamState for_params(std::size_t n) {
        AdamState s;
        s.m.assign(n, 0.0);
        s.v.assign(n, 0.0);
        return s;
    }
};

/// One bias-corrected Adam update in place. Non-finite gradients are an
/// error, never silently clamped.
inline void adam_step(std::vector<double>& params, const std::vector<double>& grad,
                      AdamState& state) {
    if (params.size() != grad.size() || params.size() != state.m.size())
        throw std::invalid_argument("adam_step: size mismatch");
    for (double g : grad)
        if (!std::isfinite(g)) throw std::invalid_argument("adam_step: non-finite gradient");
    state.t += 1;
    const double c1 = 1.0 - std::pow(state.beta1, double(state.t));
    const double c2 = 1.0 - std::pow(state.beta2, double(state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grad[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
        const double mhat = state.m[i] / c1;
        const double vhat = state.v[i] / c2;
        params[i] -= state.lr * mhat / (std::sqrt(vhat) + state.epsilon);
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainCase {
    std::string id;
    Volume3D image;  // float
    Volume3D label;  // uint8, nonzero = foreground
};

/// One training phase: which dataset it draws from and how long it runs.
struct TrainPhase {
    std::string dataset_id;
    int iterations = 0;
    int batch_size = 8;
    double lr = 2e-5;
    bool augment = false;
};

struct TrainSchedule {
    std::vector<TrainPhase> phases;
    std::uint64_t seed = 0;

    void validate() const {
        if (phases.empty()) throw std::invalid_argument("TrainSchedule: no phases");
        for (const TrainPhase& p : phases) {
            if (p.iterations < 1)
                throw std::invalid_argument("TrainSchedule: iterations must be >= 1");
            if (p.batch_size < 1)
                throw std::invalid_argument("TrainSchedule: batch_size must be >= 1");
            if (p.dataset_id.empty())
                throw std::invalid_argument("TrainSchedule: empty dataset_id");
        }
    }
};

using DatasetMap = std::map<std::string, std::vector<TrainCase>>;

struct TrainOptions {
    PatchConfig patch;
    AugmentConfig augment;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    void validate() const {
        patch.validate();
        augment.validate();
    }
};

struct LossPoint {
    int iteration = 0;  // within its phase
    std::string phase;  // the phase's dataset_id
    double loss = 0.0;
};
using TrainLog = std::vector<LossPoint>;

namespace detail {

inline Tensor image_to_tensor(const Volume3D& vol) {
    const auto d = vol.dims();
    Tensor t = Tensor::zeros(d[0], d[1], d[2], 1);
    const auto& f = vol.floats();
    for (std::size_t i = 0; i < f.size(); ++i) t.v[i] = f[i];
    return t;
}

inline Tensor label_to_tensor(const Volume3D& vol) {
    const auto d = vol.dims();
    Tensor t = Tensor::zeros(d[0], d[1], d[2], 1);
    const auto& l = vol.labels();
    for (std::size_t i = 0; i < l.size(); ++i) t.v[i] = l[i] != 0 ? 1.0 : 0.0;
    return t;
}

inline std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace detail

/// Runs the phases in order on the same parameter vector; later phases
/// continue from what earlier phases learned, which is all fine-tuning is.
/// The optimizer state is reset at each phase boundary and every draw is
/// keyed by (schedule seed, dataset_id, iteration), so running [A, B]
/// equals running [A], then [B] on the resulting network, bit for bit.
inline TrainLog train(Network& net, const TrainSchedule& schedule, const DatasetMap& data,
                      const TrainOptions& opt) {
    schedule.validate();
    opt.validate();
    TrainLog log;
    for (const TrainPhase& phase : schedule.phases) {
        const auto it = data.find(phase.dataset_id);
        if (it == data.end())
            throw std::invalid_argument("train: unknown dataset '" + phase.dataset_id + "'");
        const std::vector<TrainCase>& cases = it->second;
        if (cases.empty())
            throw std::invalid_argument("train: dataset '" + phase.dataset_id +
                                        "' has no cases");
        for (const TrainCase& c : cases) {
            if (c.image.kind() != ElementKind::float32 || c.label.kind() != ElementKind::uint8)
                throw std::invalid_argument("train: cases need a float image and uint8 label");
            if (c.image.dims() != c.label.dims())
                throw std::invalid_argument("train: image and label dims differ for case " +
                                            c.id);
        }

        const std::uint64_t phase_seed = schedule.seed ^ detail::fnv1a(phase.dataset_id);
        AdamState state = AdamState::for_params(net.params.size());
        state.lr = phase.lr;
        state.beta1 = opt.beta1;
        state.beta2 = opt.beta2;
        state.epsilon = opt.epsilon;

        for (int iter = 0; iter < phase.iterations; ++iter) {
            std::vector<double> grad(net.params.size(), 0.0);
            double loss = 0.0;
            for (int b = 0; b < phase.batch_size; ++b) {
                const std::uint64_t draw = std::uint64_t(iter) * phase.batch_size + b;
                const std::size_t pick =
                    rng_below(phase_seed, RngStream::train_pick, draw, 0, cases.size());
                const TrainCase& c = cases[pick];

                Tensor input, target;
                if (phase.augment) {
                    const SimilarityTransform t =
                        draw_similarity(opt.augment, phase_seed, draw);
                    const Volume3D img = apply_transform(c.image, t, Interpolation::trilinear);
                    const Volume3D lbl = apply_transform(c.label, t, Interpolation::nearest);
                    const PatchSample p = sample_patch(img, lbl, opt.patch, phase_seed, draw);
                    input = detail::image_to_tensor(p.image);
                    target = detail::label_to_tensor(p.label);
                } else {
                    const PatchSample p =
                        sample_patch(c.image, c.label, opt.patch, phase_seed, draw);
                    input = detail::image_to_tensor(p.image);
                    target = detail::label_to_tensor(p.label);
                }

                const LossAndGrad lg = backward(net, input, target);
                loss += lg.loss;
                for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += lg.grad[i];
            }
            const double inv_b = 1.0 / phase.batch_size;
            loss *= inv_b;
            for (double& g : grad) g *= inv_b;
            if (!std::isfinite(loss))
                throw std::runtime_error("train: non-finite loss in phase '" +
                                         phase.dataset_id + "' at iteration " +
                                         std::to_string(iter));
            adam_step(net.params, grad, state);
            log.push_back({iter, phase.dataset_id, loss});
        }
    }
    return log;
}

inline nlohmann::json train_schedule_to_json(const TrainSchedule& s) {
    nlohmann::json phases = nlohmann::json::array();
    for (const TrainPhase& p : s.phases)
        phases.push_back({{"dataset_id", p.dataset_id},
                          {"iterations", p.iterations},
                          {"batch_size", p.batch_size},
                          {"lr", p.lr},
                          {"augment", p.augment}});
    return {{"phases", phases}, {"seed", s.seed}};
}

inline TrainSchedule train_schedule_from_json(const nlohmann::json& j) {
    TrainSchedule s;
    s.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& p : j.at("phases")) {
        TrainPhase phase;
        phase.dataset_id = p.at("dataset_id").get<std::string>();
        phase.iterations = p.at("iterations").get<int>();
        phase.batch_size = p.value("batch_size", 8);
        phase.lr = p.value("lr", 2e-5);
        phase.augment = p.value("augment", false);
        s.phases.push_back(std::move(phase));
    }
    s.validate();
    return s;
}

/// Loss curve as CSV, one row per training iteration.
inline std::string train_log_to_csv(const TrainLog& log) {
    std::ostringstream out;
    out << "iteration,phase,loss\n";
    for (const LossPoint& p : log)
        out << p.iteration << ',' << p.phase << ',' << number_to_string(p.loss) << '\n';
    return out.str();
}

// ---------------------------------------------------------------------------
// Whole-volume prediction
// ---------------------------------------------------------------------------

/// Sliding-window inference: patches of patch_dims are placed at stride
/// round(patch * (1 - overlap)), clamped so the last window ends at the
/// volume edge, and overlapping probabilities are averaged. Volumes smaller
/// than the patch are zero-padded for evaluation and cropped back.
inline Volume3D predict_probabilities(const Network& net, const Volume3D& image,
                                      const std::array<int, 3>& patch_dims,
                                      double overlap = 0.25) {
    if (image.kind() != ElementKind::float32)
        throw std::invalid_argument("predict_probabilities: image must be a float volume");
    if (!(overlap >= 0.0 && overlap < 1.0))
        throw std::invalid_argument("predict_probabilities: overlap must be in [0, 1)");
    std::array<int, 3> stride{};
    for (int d = 0; d < 3; ++d) {
        if (patch_dims[d] < net.config.dim_multiple() ||
            patch_dims[d] % net.config.dim_multiple() != 0)
            throw std::invalid_argument(
                "predict_probabilities: patch dims must be positive multiples of "
                "2^(scales-1)");
        stride[d] = std::max(1, int(std::llround(patch_dims[d] * (1.0 - overlap))));
    }

    const auto dims = image.dims();
    std::array<std::vector<int>, 3> corners;
    for (int d = 0; d < 3; ++d) {
        const int last = std::max(0, dims[d] - patch_dims[d]);
        for (int c = 0;; c += stride[d]) {
            if (c >= last) {
                corners[d].push_back(last);
                break;
            }
            corners[d].push_back(c);
        }
    }

    std::vector<double> sum(image.voxel_count(), 0.0);
    std::vector<std::uint32_t> count(image.voxel_count(), 0);
    for (int ck : corners[2])
        for (int cj : corners[1])
            for (int ci : corners[0]) {
                const std::array<int, 3> corner{ci, cj, ck};
                const Volume3D patch = detail::crop_with_padding(image, corner, patch_dims);
                const Tensor prob = forward(net, detail::image_to_tensor(patch));
                for (int z = 0; z < patch_dims[2]; ++z) {
                    const int k = ck + z;
                    if (k >= dims[2]) break;
                    for (int y = 0; y < patch_dims[1]; ++y) {
                        const int j = cj + y;
                        if (j >= dims[1]) break;
                        for (int x = 0; x < patch_dims[0]; ++x) {
                            const int i = ci + x;
                            if (i >= dims[0]) break;
                            const std::size_t idx = image.index(i, j, k);
                            sum[idx] += prob.at(x, y, z, 0);
                            count[idx] += 1;
                        }
                    }
                }
            }

    Volume3D out = Volume3D::create(dims, image.spacing(), image.origin(), image.direction(),
                                    ElementKind::float32);
    auto& o = out.floats();
    for (std::size_t i = 0; i < o.size(); ++i)
        o[i] = count[i] ? static_cast<float>(sum[i] / count[i]) : 0.0f;
    return out;
}

/// Probability volume thresholded into a binary uint8 mask.
inline Volume3D binarize_probabilities(const Volume3D& prob, double threshold = 0.5) {
    if (prob.kind() != ElementKind::float32)
        throw std::invalid_argument("binarize_probabilities: need a float volume");
    if (!(threshold > 0.0 && threshold < 1.0))
        throw std::invalid_argument("binarize_probabilities: threshold must be in (0, 1)");
    Volume3D out = Volume3D::create(prob.dims(), prob.spacing(), prob.origin(),
                                    prob.direction(), ElementKind::uint8);
    const auto& p = prob.floats();
    auto& m = out.labels();
    for (std::size_t i = 0; i < p.size(); ++i) m[i] = p[i] >= threshold ? 1 : 0;
    return out;
}

/// Whole-volume binary segmentation: averaged sliding-window probabilities
/// thresholded on the input grid.
inline Volume3D predict_volume(const Network& net, const Volume3D& image,
                               const std::array<int, 3>& patch_dims, double overlap = 0.25,
                               double threshold = 0.5) {
    return binarize_probabilities(predict_probabilities(net, image, patch_dims, overlap),
                                  threshold);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace detail {

inline constexpr char kCheckpointMagic[8] = {'S', 'S', 'E', 'G', 'N', 'E', 'T', '1'};

}  // namespace detail

/// Binary checkpoint: 8-byte magic, u64 JSON-preamble length, the preamble
/// (config, parameter count, optimizer presence), float32 parameters, and
/// optionally the Adam state (u64 step count, float32 m then v).
inline void save_checkpoint(const std::filesystem::path& path, const Network& net,
                            const AdamState* adam = nullptr) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path.string());
    out.write(detail::kCheckpointMagic, 8);
    nlohmann::json meta = {{"config", net_config_to_json(net.config)},
                           {"param_count", net.params.size()},
                           {"has_adam", adam != nullptr}};
    if (adam)
        meta["adam"] = {{"lr", adam->lr},
                        {"beta1", adam->beta1},
                        {"beta2", adam->beta2},
                        {"epsilon", adam->epsilon}};
    const std::string js = meta.dump();
    const std::uint64_t len = js.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(js.data(), std::streamsize(js.size()));

    const auto write_f32 = [&out](const std::vector<double>& xs) {
        std::vector<float> f(xs.size());
        for (std::size_t i = 0; i < xs.size(); ++i) f[i] = static_cast<float>(xs[i]);
        out.write(reinterpret_cast<const char*>(f.data()),
                  std::streamsize(f.size() * sizeof(float)));
    };
    write_f32(net.params);
    if (adam) {
        if (adam->m.size() != net.params.size() || adam->v.size() != net.params.size())
            throw std::invalid_argument("save_checkpoint: Adam state size mismatch");
        out.write(reinterpret_cast<const char*>(&adam->t), sizeof adam->t);
        write_f32(adam->m);
        write_f32(adam->v);
    }
    if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path.string());
}

struct Checkpoint {
    Network net;
    std::optional<AdamState> adam;
};

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_checkpoint: missing file: " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, detail::kCheckpointMagic, 8) != 0)
        throw std::runtime_error("load_checkpoint: not a checkpoint file: " + path.string());
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof len);
    if (!in || len > (1u << 20))
        throw std::runtime_error("load_checkpoint: corrupt preamble: " + path.string());
    std::string js(len, '\0');
    in.read(js.data(), std::streamsize(len));
    if (!in) throw std::runtime_error("load_checkpoint: truncated checkpoint: " + path.string());
    const nlohmann::json meta = nlohmann::json::parse(js);

    Checkpoint ck;
    ck.net.config = net_config_from_json(meta.at("config"));
    std::size_t total = 0;
    ck.net.convs = detail::build_conv_layout(ck.net.config, &total);
    const auto stored = meta.at("param_count").get<std::size_t>();
    if (stored != total)
        throw std::runtime_error("load_checkpoint: parameter count does not match the config");

    const auto read_f32 = [&in, &path](std::vector<double>& xs, std::size_t n) {
        std::vector<float> f(n);
        in.read(reinterpret_cast<char*>(f.data()), std::streamsize(n * sizeof(float)));
        if (!in)
            throw std::runtime_error("load_checkpoint: truncated checkpoint: " + path.string());
        xs.assign(f.begin(), f.end());
    };
    read_f32(ck.net.params, total);
    if (meta.at("has_adam").get<bool>()) {
        AdamState st;
        const auto& aj = meta.at("adam");
        st.lr = aj.at("lr").get<double>();
        st.beta1 = aj.at("beta1").get<double>();
        st.beta2 = aj.at("beta2").get<double>();
        st.epsilon = aj.at("epsilon").get<double>();
        in.read(reinterpret_cast<char*>(&st.t), sizeof st.t);
        if (!in)
            throw std::runtime_error("load_checkpoint: truncated checkpoint: " + path.string());
        read_f32(st.m, total);
        read_f32(st.v, total);
        ck.adam = std::move(st);
    }
    return ck;
}

}  // namespace sonoseg
