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

#include <set>
#include <stdexcept>

#include "sonoseg/volume.hpp"

namespace sonoseg {

// Synthetic label volumes for tests, smoke runs and the phantom CLI. All of
// them classify voxel centers, axis-aligned at the given spacing with the
// origin at voxel (0,0,0).

inline Volume3D make_filled_labels(std::array<int, 3> dims, const Vec3& spacing,
                                   std::uint8_t fill) {
    Volume3D v = Volume3D::create(dims, spacing, {0, 0, 0}, Mat3::identity(),
                                  ElementKind::uint8);
    std::fill(v.labels().begin(), v.labels().end(), fill);
    return v;
}

/// Two layers split along the y axis: voxels with j < boundary_j get the
/// lower label, the rest the upper label.
inline Volume3D make_two_layer_labels(std::array<int, 3> dims, const Vec3& spacing,
                                      int boundary_j, std::uint8_t lower, std::uint8_t upper) {
    if (boundary_j <= 0 || boundary_j >= dims[1])
        throw std::invalid_argument("make_two_layer_labels: boundary outside the volume");
    Volume3D v = Volume3D::create(dims, spacing, {0, 0, 0}, Mat3::identity(),
                                  ElementKind::uint8);
    auto& d = v.labels();
    for (int k = 0; k < dims[2]; ++k)
        for (int j = 0; j < dims[1]; ++j)
            for (int i = 0; i < dims[0]; ++i)
                d[v.index(i, j, k)] = j < boundary_j ? lower : upper;
    return v;
}

/// Solid ellipsoid: ((x-c)/a)^2 sum <= 1 at voxel centers (world mm).
inline Volume3D make_ellipsoid_labels(std::array<int, 3> dims, const Vec3& spacing,
                                      const Vec3& center, const Vec3& semi_axes,
                                      std::uint8_t inside, std::uint8_t outside) {
    if (!(semi_axes.x > 0 && semi_axes.y > 0 && semi_axes.z > 0))
        throw std::invalid_argument("make_ellipsoid_labels: semi-axes must be positive");
    Volume3D v = Volume3D::create(dims, spacing, {0, 0, 0}, Mat3::identity(),
                                  ElementKind::uint8);
    auto& d = v.labels();
    for (int k = 0; k < dims[2]; ++k)
        for (int j = 0; j < dims[1]; ++j)
            for (int i = 0; i < dims[0]; ++i) {
                const Vec3 p = v.voxel_to_world({double(i), double(j), double(k)});
                const Vec3 q = cwise_div(p - center, semi_axes);
                d[v.index(i, j, k)] = dot(q, q) <= 1.0 ? inside : outside;
            }
    return v;
}

inline Volume3D make_ball_labels(std::array<int, 3> dims, const Vec3& spacing,
                                 const Vec3& center, double radius, std::uint8_t inside,
                                 std::uint8_t outside) {
    return make_ellipsoid_labels(dims, spacing, center, {radius, radius, radius}, inside,
                                 outside);
}

/// Binary foreground mask: 1 where the label is in the foreground set.
inline Volume3D labels_to_mask(const Volume3D& labels,
                               const std::set<std::uint8_t>& foreground) {
    if (labels.kind() != ElementKind::uint8)
        throw std::invalid_argument("labels_to_mask: input must be a label volume");
    Volume3D mask = Volume3D::create(labels.dims(), labels.spacing(), labels.origin(),
                                     labels.direction(), ElementKind::uint8);
    const auto& in = labels.labels();
    auto& out = mask.labels();
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = foreground.count(in[i]) ? 1 : 0;
    return mask;
}

}  // namespace sonoseg
