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

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>

#include <json.hpp>

#include "sonoseg/volume.hpp"

namespace sonoseg {

/// Per-tissue acoustics driving the simulator. Impedance in MRayl,
/// attenuation in dB/(cm*MHz), scatter parameters dimensionless.
struct AcousticProperties {
    double impedance = 1.5;
    double attenuation = 0.0;
    double scatter_density = 0.0;
    double scatter_mean = 0.0;
    double scatter_sigma = 0.0;

    void validate() const {
        if (!(impedance > 0.0))
            throw std::invalid_argument("AcousticProperties: impedance must be > 0");
        if (attenuation < 0.0)
            throw std::invalid_argument("AcousticProperties: attenuation must be >= 0");
        if (scatter_density < 0.0 || scatter_density > 1.0)
            throw std::invalid_argument("AcousticProperties: scatter_density must be in [0,1]");
        if (scatter_mean < 0.0 || scatter_mean > 1.0)
            throw std::invalid_argument("AcousticProperties: scatter_mean must be in [0,1]");
        if (scatter_sigma < 0.0)
            throw std::invalid_argument("AcousticProperties: scatter_sigma must be >= 0");
    }

    bool operator==(const AcousticProperties&) const = default;
};

using TissuePropertyMap = std::map<std::uint8_t, AcousticProperties>;

/// Label volume bound to acoustic properties; the simulator's scene.
class TissueMap {
public:
    TissueMap(Volume3D labels, TissuePropertyMap table, std::uint8_t background)
        : labels_(std::move(labels)), table_(std::move(table)), background_(background) {
        if (labels_.kind() != ElementKind::uint8)
            throw std::invalid_argument("TissueMap: labels must be a uint8 volume");
        for (const auto& [label, props] : table_) props.validate();
        for (std::uint8_t l : labels_.labels()) census_.insert(l);
        for (std::uint8_t l : census_) {
            if (!table_.count(l))
                throw std::invalid_argument("TissueMap: label " + std::to_string(int(l)) +
                                            " occurs in the volume but has no table entry");
        }
        const auto bg = table_.find(background_);
        if (bg == table_.end())
            throw std::invalid_argument("TissueMap: background label " +
                                        std::to_string(int(background_)) +
                                        " has no table entry");
        if (bg->second.scatter_density != 0.0 || bg->second.scatter_mean != 0.0 ||
            bg->second.scatter_sigma != 0.0)
            throw std::invalid_argument("TissueMap: background tissue must be scatter-free");
    }

    const Volume3D& labels() const { return labels_; }
    const TissuePropertyMap& table() const { return table_; }
    std::uint8_t background_label() const { return background_; }

    /// Labels present in the volume, excluding the background label.
    std::set<std::uint8_t> foreground_census() const {
        std::set<std::uint8_t> fg = census_;
        fg.erase(background_);
        return fg;
    }

    /// Nearest-neighbor label at a world point; outside the grid the
    /// background label applies.
    std::uint8_t label_at(const Vec3& world) const {
        const Vec3 c = labels_.world_to_voxel(world);
        const int i = detail::nearest_index(detail::snap_coord(c.x));
        const int j = detail::nearest_index(detail::snap_coord(c.y));
        const int k = detail::nearest_index(detail::snap_coord(c.z));
        if (!labels_.in_bounds(i, j, k)) return background_;
        return labels_.labels()[labels_.index(i, j, k)];
    }

    /// Linear index of the voxel owning a world point, or -1 outside the grid.
    std::int64_t voxel_index_at(const Vec3& world) const {
        const Vec3 c = labels_.world_to_voxel(world);
        const int i = detail::nearest_index(detail::snap_coord(c.x));
        const int j = detail::nearest_index(detail::snap_coord(c.y));
        const int k = detail::nearest_index(detail::snap_coord(c.z));
        if (!labels_.in_bounds(i, j, k)) return -1;
        return static_cast<std::int64_t>(labels_.index(i, j, k));
    }

    const AcousticProperties& properties_of(std::uint8_t label) const {
        const auto it = table_.find(label);
        if (it == table_.end())
            throw std::invalid_argument("TissueMap: label " + std::to_string(int(label)) +
                                        " has no table entry");
        return it->second;
    }

private:
    Volume3D labels_;
    TissuePropertyMap table_;
    std::uint8_t background_;
    std::set<std::uint8_t> census_;
};

/// Validates and binds a label volume to its acoustic property table.
inline TissueMap bind_tissue_map(Volume3D labels, TissuePropertyMap table,
                                 std::uint8_t background) {
    return TissueMap(std::move(labels), std::move(table), background);
}

/// World-point property lookup (nearest-neighbor, categorical labels).
inline const AcousticProperties& properties_at(const TissueMap& tm, const Vec3& world) {
    return tm.properties_of(tm.label_at(world));
}

// ---------------------------------------------------------------------------
// Property-table configuration (JSON document)
// ---------------------------------------------------------------------------

/// Property table plus display names, as stored in the JSON config.
struct TissueTable {
    TissuePropertyMap properties;
    std::map<std::uint8_t, std::string> names;
    std::uint8_t background = 0;
};

/// Default brain-tissue table. These values are working defaults for the
/// simulator, not measured ground truth; override them via the JSON config.
inline TissueTable default_tissue_table() {
    TissueTable t;
    t.background = 0;
    t.properties[0] = {0.0004, 0.0, 0.0, 0.0, 0.0};  // air-like background
    t.names[0] = "background";
    t.properties[1] = {1.6, 0.6, 0.5, 0.5, 0.1};
    t.names[1] = "white_matter";
    t.properties[2] = {1.62, 0.55, 0.45, 0.45, 0.1};
    t.names[2] = "gray_matter";
    t.properties[3] = {1.48, 0.002, 0.02, 0.1, 0.01};
    t.names[3] = "csf";
    t.properties[4] = t.properties[3];  // lateral ventricle behaves like CSF
    t.names[4] = "lateral_ventricle";
    return t;
}

inline nlohmann::json tissue_table_to_json(const TissueTable& t) {
    nlohmann::json labels = nlohmann::json::object();
    for (const auto& [label, p] : t.properties) {
        nlohmann::json entry = {{"impedance", p.impedance},
                                {"attenuation", p.attenuation},
                                {"scatter_density", p.scatter_density},
                                {"scatter_mean", p.scatter_mean},
                                {"scatter_sigma", p.scatter_sigma}};
        const auto name = t.names.find(label);
        entry["name"] = name == t.names.end() ? ("label_" + std::to_string(int(label)))
                                              : name->second;
        labels[std::to_string(int(label))] = entry;
    }
    return {{"labels", labels}, {"background", int(t.background)}};
}

inline TissueTable tissue_table_from_json(const nlohmann::json& j) {
    TissueTable t;
    if (!j.contains("labels") || !j.contains("background"))
        throw std::runtime_error("tissue table: document needs 'labels' and 'background'");
    const int bg = j.at("background").get<int>();
    if (bg < 0 || bg > 255) throw std::runtime_error("tissue table: background out of range");
    t.background = static_cast<std::uint8_t>(bg);
    for (const auto& [key, entry] : j.at("labels").items()) {
        const int label = std::stoi(key);
        if (label < 0 || label > 255)
            throw std::runtime_error("tissue table: label out of range: " + key);
        AcousticProperties p;
        p.impedance = entry.at("impedance").get<double>();
        p.attenuation = entry.at("attenuation").get<double>();
        p.scatter_density = entry.at("scatter_density").get<double>();
        p.scatter_mean = entry.at("scatter_mean").get<double>();
        p.scatter_sigma = entry.at("scatter_sigma").get<double>();
        p.validate();
        t.properties[static_cast<std::uint8_t>(label)] = p;
        if (entry.contains("name"))
            t.names[static_cast<std::uint8_t>(label)] = entry.at("name").get<std::string>();
    }
    if (!t.properties.count(t.background))
        throw std::runtime_error("tissue table: background label has no entry");
    return t;
}

inline void save_tissue_table(const TissueTable& t, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("save_tissue_table: cannot open " + path.string());
    out << tissue_table_to_json(t).dump(2) << '\n';
}

inline TissueTable load_tissue_table(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_tissue_table: missing file: " + path.string());
    nlohmann::json j;
    in >> j;
    return tissue_table_from_json(j);
}

}  // namespace sonoseg
