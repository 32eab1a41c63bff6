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
#include <cmath>
#include <stdexcept>

namespace sonoseg {

/// 3-vector of doubles. World coordinates are millimetres throughout.
struct Vec3 {
    double x = 0.0, y = 0.0, z = 0.0;

    double& operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }
    double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }
    Vec3 operator-() const { return {-x, -y, -z}; }

    bool operator==(const Vec3&) const = default;
};

inline Vec3 operator*(double s, const Vec3& v) { return v * s; }

inline double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline double norm(const Vec3& v) { return std::sqrt(dot(v, v)); }
inline Vec3 cwise_mul(const Vec3& a, const Vec3& b) { return {a.x * b.x, a.y * b.y, a.z * b.z}; }
inline Vec3 cwise_div(const Vec3& a, const Vec3& b) { return {a.x / b.x, a.y / b.y, a.z / b.z}; }

/// Row-major 3x3 matrix.
struct Mat3 {
    std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

    double& operator()(int r, int c) { return m[r * 3 + c]; }
    double operator()(int r, int c) const { return m[r * 3 + c]; }

    static Mat3 identity() { return {}; }

    Vec3 col(int c) const { return {m[c], m[3 + c], m[6 + c]}; }
    Vec3 row(int r) const { return {m[r * 3], m[r * 3 + 1], m[r * 3 + 2]}; }

    Mat3 transposed() const {
        Mat3 t;
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) t(r, c) = (*this)(c, r);
        return t;
    }

    bool operator==(const Mat3&) const = default;
};

inline Vec3 operator*(const Mat3& a, const Vec3& v) {
    return {a.m[0] * v.x + a.m[1] * v.y + a.m[2] * v.z,
            a.m[3] * v.x + a.m[4] * v.y + a.m[5] * v.z,
            a.m[6] * v.x + a.m[7] * v.y + a.m[8] * v.z};
}

inline Mat3 operator*(const Mat3& a, const Mat3& b) {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double s = 0.0;
            for (int k = 0; k < 3; ++k) s += a(i, k) * b(k, j);
            r(i, j) = s;
        }
    return r;
}

/// Largest deviation of M^T M from the identity.
inline double orthonormality_error(const Mat3& m) {
    Mat3 g = m.transposed() * m;
    double err = 0.0;
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) err = std::max(err, std::abs(g(r, c) - (r == c ? 1.0 : 0.0)));
    return err;
}

inline bool is_orthonormal(const Mat3& m, double tol = 1e-6) {
    return orthonormality_error(m) <= tol;
}

/// Rotation about one coordinate axis (0=x, 1=y, 2=z), angle in degrees.
inline Mat3 axis_rotation_deg(int axis, double deg) {
    const double a = deg * (3.14159265358979323846 / 180.0);
    const double c = std::cos(a), s = std::sin(a);
    Mat3 r;
    switch (axis) {
        case 0: r.m = {1, 0, 0, 0, c, -s, 0, s, c}; break;
        case 1: r.m = {c, 0, s, 0, 1, 0, -s, 0, c}; break;
        case 2: r.m = {c, -s, 0, s, c, 0, 0, 0, 1}; break;
        default: throw std::invalid_argument("axis_rotation_deg: axis must be 0, 1 or 2");
    }
    return r;
}

/// Rigid transform p -> R p + t.
struct RigidTransform {
    Mat3 rotation;
    Vec3 translation;

    Vec3 apply(const Vec3& p) const { return rotation * p + translation; }

    /// Inverse transform, valid because rotation is orthonormal.
    Vec3 apply_inverse(const Vec3& p) const { return rotation.transposed() * (p - translation); }

    bool operator==(const RigidTransform&) const = default;
};

}  // namespace sonoseg
