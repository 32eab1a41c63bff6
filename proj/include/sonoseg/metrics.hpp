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
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "sonoseg/volume.hpp"

namespace sonoseg {

namespace detail {

inline void require_binary_pair(const Volume3D& a, const Volume3D& b, const char* op) {
    if (a.kind() != ElementKind::uint8 || b.kind() != ElementKind::uint8)
        throw std::invalid_argument(std::string(op) + ": masks must be uint8 volumes");
    if (a.dims() != b.dims())
        throw std::invalid_argument(std::string(op) + ": mask dimensions differ");
    if (!(a.spacing() == b.spacing()) || !(a.origin() == b.origin()) ||
        !(a.direction() == b.direction()))
        throw std::invalid_argument(std::string(op) + ": mask geometries differ");
}

struct OverlapCounts {
    std::size_t a = 0, b = 0, both = 0;
};

inline OverlapCounts overlap_counts(const Volume3D& a, const Volume3D& b) {
    OverlapCounts n;
    const auto& da = a.labels();
    const auto& db = b.labels();
    for (std::size_t i = 0; i < da.size(); ++i) {
        const bool fa = da[i] != 0, fb = db[i] != 0;
        n.a += fa;
        n.b += fb;
        n.both += fa && fb;
    }
    return n;
}

}  // namespace detail

/// Dice overlap 2|A^B| / (|A|+|B|). Two empty masks agree perfectly (1);
/// one empty mask scores 0.
inline double dice(const Volume3D& a, const Volume3D& b) {
    detail::require_binary_pair(a, b, "dice");
    const auto n = detail::overlap_counts(a, b);
    if (n.a + n.b == 0) return 1.0;
    return 2.0 * double(n.both) / double(n.a + n.b);
}

/// Jaccard index |A^B| / |AvB|, with the same empty-mask conventions.
inline double jaccard(const Volume3D& a, const Volume3D& b) {
    detail::require_binary_pair(a, b, "jaccard");
    const auto n = detail::overlap_counts(a, b);
    const std::size_t uni = n.a + n.b - n.both;
    if (uni == 0) return 1.0;
    return double(n.both) / double(uni);
}

/// Voxel indices of the mask surface: foreground voxels with at least one
/// 6-neighbor that is background or outside the volume.
inline std::vector<std::array<int, 3>> surface_points(const Volume3D& mask) {
    if (mask.kind() != ElementKind::uint8)
        throw std::invalid_argument("surface_points: mask must be a uint8 volume");
    const auto& d = mask.labels();
    const auto dims = mask.dims();
    std::vector<std::array<int, 3>> pts;
    for (int k = 0; k < dims[2]; ++k)
        for (int j = 0; j < dims[1]; ++j)
            for (int i = 0; i < dims[0]; ++i) {
                if (d[mask.index(i, j, k)] == 0) continue;
                const bool exposed =
                    i == 0 || d[mask.index(i - 1, j, k)] == 0 ||
                    i == dims[0] - 1 || d[mask.index(i + 1, j, k)] == 0 ||
                    j == 0 || d[mask.index(i, j - 1, k)] == 0 ||
                    j == dims[1] - 1 || d[mask.index(i, j + 1, k)] == 0 ||
                    k == 0 || d[mask.index(i, j, k - 1)] == 0 ||
                    k == dims[2] - 1 || d[mask.index(i, j, k + 1)] == 0;
                if (exposed) pts.push_back({i, j, k});
            }
    return pts;
}

namespace detail {

/// Millimeter position of a voxel index on the (orthonormal) grid. Distances
/// are computed in this grid-aligned space; the direction matrix preserves
/// them.
inline std::array<double, 3> grid_mm(const std::array<int, 3>& idx, const Vec3& spacing) {
    return {idx[0] * spacing.x, idx[1] * spacing.y, idx[2] * spacing.z};
}

inline double squared_distance_mm(const std::array<int, 3>& a, const std::array<int, 3>& b,
                                  const Vec3& spacing) {
    const double dx = (a[0] - b[0]) * spacing.x;
    const double dy = (a[1] - b[1]) * spacing.y;
    const double dz = (a[2] - b[2]) * spacing.z;
    return dx * dx + dy * dy + dz * dz;
}

/// Nearest-neighbor squared distances from each query to the target set,
/// exact: voxel-bucket search over expanding Chebyshev shells, stopping only
/// when no farther voxel can beat the incumbent. Computes the identical
/// arithmetic expression a brute-force scan would, so results match it
/// bit for bit.
inline std::vector<double> nn_squared_distances(const std::vector<std::array<int, 3>>& queries,
                                                const std::vector<std::array<int, 3>>& targets,
                                                const std::array<int, 3>& dims,
                                                const Vec3& spacing) {
    std::vector<double> out(queries.size(), 0.0);
    if (targets.empty())
        throw std::logic_error("nn_squared_distances: empty target set");

    std::vector<std::uint8_t> occupied(std::size_t(dims[0]) * dims[1] * dims[2], 0);
    const auto flat = [&](int i, int j, int k) {
        return std::size_t(i) + std::size_t(dims[0]) * (std::size_t(j) + std::size_t(dims[1]) * k);
    };
    for (const auto& t : targets) occupied[flat(t[0], t[1], t[2])] = 1;

    const double h_min = std::min({spacing.x, spacing.y, spacing.z});
    const int max_radius = std::max({dims[0], dims[1], dims[2]});

    for (std::size_t q = 0; q < queries.size(); ++q) {
        const auto& p = queries[q];
        double best = std::numeric_limits<double>::infinity();
        for (int radius = 0; radius <= max_radius; ++radius) {
            // shell at Chebyshev index distance == radius
            const int ilo = std::max(0, p[0] - radius), ihi = std::min(dims[0] - 1, p[0] + radius);
            const int jlo = std::max(0, p[1] - radius), jhi = std::min(dims[1] - 1, p[1] + radius);
            const int klo = std::max(0, p[2] - radius), khi = std::min(dims[2] - 1, p[2] + radius);
            for (int k = klo; k <= khi; ++k)
                for (int j = jlo; j <= jhi; ++j)
                    for (int i = ilo; i <= ihi; ++i) {
                        if (std::max({std::abs(i - p[0]), std::abs(j - p[1]),
                                      std::abs(k - p[2])}) != radius)
                            continue;
                        if (!occupied[flat(i, j, k)]) continue;
                        best = std::min(best, squared_distance_mm(p, {i, j, k}, spacing));
                    }
            // any voxel on a farther shell is at least (radius+1)*h_min away
            const double bound = (radius + 1) * h_min;
            if (best <= bound * bound) break;
        }
        out[q] = best;
    }
    return out;
}

}  // namespace detail

struct SurfaceDistances {
    double asd_mm = 0.0;        // symmetric average surface distance
    double hausdorff_mm = 0.0;  // exact symmetric Hausdorff distance
};

/// Surface distances between two masks on the same grid. Undefined (nullopt)
/// when either mask has no surface.
inline std::optional<SurfaceDistances> surface_distances(const Volume3D& a, const Volume3D& b) {
    detail::require_binary_pair(a, b, "surface_distances");
    const auto sa = surface_points(a);
    const auto sb = surface_points(b);
    if (sa.empty() || sb.empty()) return std::nullopt;

    const auto d_ab = detail::nn_squared_distances(sa, sb, a.dims(), a.spacing());
    const auto d_ba = detail::nn_squared_distances(sb, sa, a.dims(), a.spacing());

    // per-direction accumulators keep the result exactly symmetric in (a, b)
    double sum_ab = 0.0, sum_ba = 0.0, worst = 0.0;
    for (double d2 : d_ab) {
        sum_ab += std::sqrt(d2);
        worst = std::max(worst, d2);
    }
    for (double d2 : d_ba) {
        sum_ba += std::sqrt(d2);
        worst = std::max(worst, d2);
    }
    SurfaceDistances out;
    out.asd_mm = (sum_ab + sum_ba) / double(d_ab.size() + d_ba.size());
    out.hausdorff_mm = std::sqrt(worst);
    return out;
}

// ---------------------------------------------------------------------------
// Case and aggregate reports
// ---------------------------------------------------------------------------

struct CaseReport {
    std::string case_id;
    double dice = 0.0;
    double jaccard = 0.0;
    std::optional<double> asd_mm;
    std::optional<double> hausdorff_mm;
    std::size_t pred_voxels = 0;
    std::size_t ref_voxels = 0;
};

/// All metrics for one (prediction, reference) pair.
inline CaseReport evaluate_case(const Volume3D& pred, const Volume3D& ref,
                                const std::string& case_id) {
    CaseReport r;
    r.case_id = case_id;
    r.dice = dice(pred, ref);
    r.jaccard = jaccard(pred, ref);
    const auto n = detail::overlap_counts(pred, ref);
    r.pred_voxels = n.a;
    r.ref_voxels = n.b;
    if (const auto d = surface_distances(pred, ref)) {
        r.asd_mm = d->asd_mm;
        r.hausdorff_mm = d->hausdorff_mm;
    }
    return r;
}

struct MetricSummary {
    double mean = 0.0;
    double stddev = 0.0;  // population standard deviation
    std::size_t n = 0;
};

struct AggregateReport {
    std::size_t n_cases = 0;
    MetricSummary dice;
    MetricSummary jaccard;
    MetricSummary asd_mm;        // over cases with defined distances
    MetricSummary hausdorff_mm;  // over cases with defined distances
};

namespace detail {

inline MetricSummary summarize(const std::vector<double>& xs) {
    MetricSummary s;
    s.n = xs.size();
    if (xs.empty()) return s;
    double sum = 0.0;
    for (double x : xs) sum += x;
    s.mean = sum / double(xs.size());
    double var = 0.0;
    for (double x : xs) var += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(var / double(xs.size()));
    return s;
}

}  // namespace detail

/// Mean and population standard deviation per metric. Cases are sorted by
/// case_id first so the result does not depend on input order; cases without
/// defined distances are skipped by the distance summaries.
inline AggregateReport aggregate(std::vector<CaseReport> reports) {
    std::sort(reports.begin(), reports.end(),
              [](const CaseReport& x, const CaseReport& y) { return x.case_id < y.case_id; });
    AggregateReport agg;
    agg.n_cases = reports.size();
    std::vector<double> d, j, a, h;
    for (const CaseReport& r : reports) {
        d.push_back(r.dice);
        j.push_back(r.jaccard);
        if (r.asd_mm) a.push_back(*r.asd_mm);
        if (r.hausdorff_mm) h.push_back(*r.hausdorff_mm);
    }
    agg.dice = detail::summarize(d);
    agg.jaccard = detail::summarize(j);
    agg.asd_mm = detail::summarize(a);
    agg.hausdorff_mm = detail::summarize(h);
    return agg;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace detail {

inline std::string opt_to_csv(const std::optional<double>& v) {
    return v ? number_to_string(*v) : std::string("NA");
}

}  // namespace detail

/// CSV table of case reports, one row per case, "NA" for undefined distances.
inline std::string case_reports_to_csv(const std::vector<CaseReport>& reports) {
    std::ostringstream out;
    out << "case_id,dice,jaccard,asd_mm,hausdorff_mm,pred_voxels,ref_voxels\n";
    for (const CaseReport& r : reports) {
        out << r.case_id << ',' << number_to_string(r.dice) << ','
            << number_to_string(r.jaccard) << ',' << detail::opt_to_csv(r.asd_mm) << ','
            << detail::opt_to_csv(r.hausdorff_mm) << ',' << r.pred_voxels << ','
            << r.ref_voxels << '\n';
    }
    return out.str();
}

inline std::vector<CaseReport> case_reports_from_csv(const std::string& csv) {
    std::istringstream in(csv);
    std::string line;
    if (!std::getline(in, line) ||
        line != "case_id,dice,jaccard,asd_mm,hausdorff_mm,pred_voxels,ref_voxels")
        throw std::runtime_error("case reports CSV: unexpected header");
    std::vector<CaseReport> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string field;
        CaseReport r;
        std::getline(row, r.case_id, ',');
        std::getline(row, field, ',');
        r.dice = std::stod(field);
        std::getline(row, field, ',');
        r.jaccard = std::stod(field);
        std::getline(row, field, ',');
        if (field != "NA") r.asd_mm = std::stod(field);
        std::getline(row, field, ',');
        if (field != "NA") r.hausdorff_mm = std::stod(field);
        std::getline(row, field, ',');
        r.pred_voxels = std::stoull(field);
        std::getline(row, field, ',');
        r.ref_voxels = std::stoull(field);
        out.push_back(std::move(r));
    }
    return out;
}

inline nlohmann::json metric_summary_to_json(const MetricSummary& s) {
    return {{"mean", s.mean}, {"stddev", s.stddev}, {"n", s.n}};
}

inline MetricSummary metric_summary_from_json(const nlohmann::json& j) {
    MetricSummary s;
    s.mean = j.at("mean").get<double>();
    s.stddev = j.at("stddev").get<double>();
    s.n = j.at("n").get<std::size_t>();
    return s;
}

inline nlohmann::json aggregate_report_to_json(const AggregateReport& a) {
    return {{"n_cases", a.n_cases},
            {"dice", metric_summary_to_json(a.dice)},
            {"jaccard", metric_summary_to_json(a.jaccard)},
            {"asd_mm", metric_summary_to_json(a.asd_mm)},
            {"hausdorff_mm", metric_summary_to_json(a.hausdorff_mm)}};
}

inline AggregateReport aggregate_report_from_json(const nlohmann::json& j) {
    AggregateReport a;
    a.n_cases = j.at("n_cases").get<std::size_t>();
    a.dice = metric_summary_from_json(j.at("dice"));
    a.jaccard = metric_summary_from_json(j.at("jaccard"));
    a.asd_mm = metric_summary_from_json(j.at("asd_mm"));
    a.hausdorff_mm = metric_summary_from_json(j.at("hausdorff_mm"));
    return a;
}

}  // namespace sonoseg
