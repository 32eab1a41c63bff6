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
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sonoseg/compound.hpp"
#include "sonoseg/metrics.hpp"
#include "sonoseg/net.hpp"
#include "sonoseg/phantom.hpp"
#include "sonoseg/simulate.hpp"
#include "sonoseg/tissue.hpp"
#include "sonoseg/volume.hpp"

namespace sonoseg {

// ---------------------------------------------------------------------------
// Cross-validation splits
// ---------------------------------------------------------------------------

/// How the split reconciles a 60/20/20 division with k-fold cross-validation.
/// Stored in every manifest rather than assumed silently.
inline constexpr const char* kSplitPolicy =
    "test sets partition the subjects across folds; per fold the remaining "
    "subjects split about 3:1 into train and validation, approximating a "
    "60/20/20 division of the whole";

struct Fold {
    int fold_id = 0;
    std::vector<std::string> test_subjects;
    std::vector<std::string> validation_subjects;
    std::vector<std::string> train_subjects;
};

struct SplitManifest {
    std::vector<Fold> folds;
    std::uint64_t seed = 0;
    std::vector<std::string> subjects;
    std::string policy = kSplitPolicy;
};

/// Partition laws: within a fold the three sets are disjoint and cover all
/// subjects; across folds the test sets partition the subjects.
inline void validate_split_manifest(const SplitManifest& m) {
    const std::set<std::string> all(m.subjects.begin(), m.subjects.end());
    if (all.size() != m.subjects.size())
        throw std::invalid_argument("split manifest: duplicate subjects");
    if (m.folds.empty()) throw std::invalid_argument("split manifest: no folds");

    std::set<std::string> tested;
    for (const Fold& f : m.folds) {
        std::set<std::string> seen;
        const auto take = [&](const std::vector<std::string>& group) {
            for (const std::string& s : group) {
                if (!all.count(s))
                    throw std::invalid_argument("split manifest: unknown subject " + s);
                if (!seen.insert(s).second)
                    throw std::invalid_argument(
                        "split manifest: subject in two sets of one fold: " + s);
            }
        };
        take(f.test_subjects);
        take(f.validation_subjects);
        take(f.train_subjects);
        if (seen.size() != all.size())
            throw std::invalid_argument("split manifest: fold does not cover all subjects");
        for (const std::string& s : f.test_subjects)
            if (!tested.insert(s).second)
                throw std::invalid_argument("split manifest: subject tested twice: " + s);
    }
    if (tested.size() != all.size())
        throw std::invalid_argument("split manifest: some subject is never tested");
}

/// Deterministic k-fold split: a seeded Fisher-Yates shuffle, test chunks as
/// even as possible (the first n mod k folds get the extra subject), and the
/// rest of each fold split train:validation about 3:1.
inline SplitManifest make_splits(const std::vector<std::string>& subjects, int n_folds,
                                 std::uint64_t seed) {
    if (n_folds < 2) throw std::invalid_argument("make_splits: n_folds must be >= 2");
    if (int(subjects.size()) < n_folds)
        throw std::invalid_argument("make_splits: need at least n_folds subjects");
    if (std::set<std::string>(subjects.begin(), subjects.end()).size() != subjects.size())
        throw std::invalid_argument("make_splits: duplicate subjects");

    SplitManifest m;
    m.seed = seed;
    m.subjects = subjects;

    std::vector<std::string> order = subjects;
    for (std::size_t i = order.size() - 1; i > 0; --i) {
        const std::size_t j = rng_below(seed, RngStream::split_shuffle, i, 0, i + 1);
        std::swap(order[i], order[j]);
    }

    const int n = int(order.size());
    const int base = n / n_folds, extra = n % n_folds;
    const auto train_target = std::size_t(std::llround(0.6 * n));
    int pos = 0;
    for (int f = 0; f < n_folds; ++f) {
        const int test_size = base + (f < extra ? 1 : 0);
        Fold fold;
        fold.fold_id = f;
        fold.test_subjects.assign(order.begin() + pos, order.begin() + pos + test_size);
        std::vector<std::string> rest;
        rest.reserve(std::size_t(n - test_size));
        for (int i = 0; i < n; ++i)
            if (i < pos || i >= pos + test_size) rest.push_back(order[std::size_t(i)]);
        const std::size_t train_size = std::min(rest.size(), train_target);
        fold.train_subjects.assign(rest.begin(), rest.begin() + std::ptrdiff_t(train_size));
        fold.validation_subjects.assign(rest.begin() + std::ptrdiff_t(train_size), rest.end());
        m.folds.push_back(std::move(fold));
        pos += test_size;
    }
    validate_split_manifest(m);
    return m;
}

inline nlohmann::json split_manifest_to_json(const SplitManifest& m) {
    nlohmann::json folds = nlohmann::json::array();
    for (const Fold& f : m.folds)
        folds.push_back({{"fold_id", f.fold_id},
                         {"test_subjects", f.test_subjects},
                         {"validation_subjects", f.validation_subjects},
                         {"train_subjects", f.train_subjects}});
    return {{"seed", m.seed}, {"policy", m.policy}, {"subjects", m.subjects},
            {"folds", folds}};
}

inline SplitManifest split_manifest_from_json(const nlohmann::json& j) {
    SplitManifest m;
    m.seed = j.at("seed").get<std::uint64_t>();
    m.policy = j.value("policy", std::string(kSplitPolicy));
    m.subjects = j.at("subjects").get<std::vector<std::string>>();
    for (const auto& fj : j.at("folds")) {
        Fold f;
        f.fold_id = fj.at("fold_id").get<int>();
        f.test_subjects = fj.at("test_subjects").get<std::vector<std::string>>();
        f.validation_subjects = fj.at("validation_subjects").get<std::vector<std::string>>();
        f.train_subjects = fj.at("train_subjects").get<std::vector<std::string>>();
        m.folds.push_back(std::move(f));
    }
    validate_split_manifest(m);
    return m;
}

inline void save_split_manifest(const SplitManifest& m, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_split_manifest: cannot open " + path.string());
    out << split_manifest_to_json(m).dump(2) << '\n';
}

inline SplitManifest load_split_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_split_manifest: missing file: " + path.string());
    nlohmann::json j;
    in >> j;
    return split_manifest_from_json(j);
}

// ---------------------------------------------------------------------------
// Simulated datasets
// ---------------------------------------------------------------------------

/// Cartesian grid of imaging settings swept over every tissue map. Empty
/// axes fall back to the base value, so the default grid is one combination.
struct DatasetGridConfig {
    ProbeGeometry geometry;
    ImagingParams imaging;
    CompoundingConfig compounding;
    std::vector<double> frequencies_mhz;
    std::vector<double> noise_floors;
    std::vector<double> tgc_db_per_cm;
    int sweeps_per_combo = 1;
    int frame_count = 8;
    std::set<std::uint8_t> foreground_labels{1};

    void validate() const {
        geometry.validate();
        imaging.validate();
        compounding.validate();
        if (sweeps_per_combo < 1)
            throw std::invalid_argument("DatasetGridConfig: sweeps_per_combo must be >= 1");
        if (frame_count < 2)
            throw std::invalid_argument("DatasetGridConfig: frame_count must be >= 2");
        if (foreground_labels.empty())
            throw std::invalid_argument("DatasetGridConfig: foreground_labels is empty");
    }

    struct Combo {
        double frequency_mhz, noise_floor, tgc_db_per_cm;
    };
    std::vector<Combo> combos() const {
        const auto axis = [](const std::vector<double>& xs, double base) {
            return xs.empty() ? std::vector<double>{base} : xs;
        };
        std::vector<Combo> out;
        for (double f : axis(frequencies_mhz, geometry.frequency_mhz))
            for (double nf : axis(noise_floors, imaging.noise_floor))
                for (double tgc : axis(tgc_db_per_cm, imaging.tgc_db_per_cm))
                    out.push_back({f, nf, tgc});
        return out;
    }
};

inline nlohmann::json dataset_grid_to_json(const DatasetGridConfig& g) {
    return {{"geometry", probe_geometry_to_json(g.geometry)},
            {"imaging", imaging_params_to_json(g.imaging)},
            {"compounding", compounding_config_to_json(g.compounding)},
            {"frequencies_mhz", g.frequencies_mhz},
            {"noise_floors", g.noise_floors},
            {"tgc_db_per_cm", g.tgc_db_per_cm},
            {"sweeps_per_combo", g.sweeps_per_combo},
            {"frame_count", g.frame_count},
            {"foreground_labels",
             std::vector<int>(g.foreground_labels.begin(), g.foreground_labels.end())}};
}

inline DatasetGridConfig dataset_grid_from_json(const nlohmann::json& j) {
    DatasetGridConfig g;
    g.geometry = probe_geometry_from_json(j.at("geometry"));
    g.imaging = imaging_params_from_json(j.at("imaging"));
    if (j.contains("compounding"))
        g.compounding = compounding_config_from_json(j.at("compounding"));
    g.frequencies_mhz = j.value("frequencies_mhz", std::vector<double>{});
    g.noise_floors = j.value("noise_floors", std::vector<double>{});
    g.tgc_db_per_cm = j.value("tgc_db_per_cm", std::vector<double>{});
    g.sweeps_per_combo = j.value("sweeps_per_combo", 1);
    g.frame_count = j.value("frame_count", 8);
    if (j.contains("foreground_labels")) {
        g.foreground_labels.clear();
        for (int v : j.at("foreground_labels").get<std::vector<int>>()) {
            if (v < 0 || v > 255)
                throw std::invalid_argument("dataset grid: foreground label out of range");
            g.foreground_labels.insert(std::uint8_t(v));
        }
    }
    g.validate();
    return g;
}

struct DatasetItem {
    std::string id;
    std::string subject;  // the tissue map the item came from
    nlohmann::json params;
    std::uint64_t seed = 0;
    bool ok = false;
    std::string error;
    std::string image_file;  // relative to the dataset directory
    std::string label_file;
};

struct DatasetManifest {
    std::vector<DatasetItem> items;
    std::uint64_t seed = 0;
    nlohmann::json grid;
    int error_count = 0;
};

inline nlohmann::json dataset_manifest_to_json(const DatasetManifest& m) {
    nlohmann::json items = nlohmann::json::array();
    for (const DatasetItem& it : m.items)
        items.push_back({{"id", it.id},
                         {"subject", it.subject},
                         {"params", it.params},
                         {"seed", it.seed},
                         {"ok", it.ok},
                         {"error", it.error},
                         {"image_file", it.image_file},
                         {"label_file", it.label_file}});
    return {{"seed", m.seed}, {"grid", m.grid}, {"error_count", m.error_count},
            {"items", items}};
}

inline DatasetManifest dataset_manifest_from_json(const nlohmann::json& j) {
    DatasetManifest m;
    m.seed = j.at("seed").get<std::uint64_t>();
    m.grid = j.value("grid", nlohmann::json::object());
    m.error_count = j.at("error_count").get<int>();
    for (const auto& ij : j.at("items")) {
        DatasetItem it;
        it.id = ij.at("id").get<std::string>();
        it.subject = ij.at("subject").get<std::string>();
        it.params = ij.value("params", nlohmann::json::object());
        it.seed = ij.at("seed").get<std::uint64_t>();
        it.ok = ij.at("ok").get<bool>();
        it.error = ij.value("error", std::string());
        it.image_file = ij.value("image_file", std::string());
        it.label_file = ij.value("label_file", std::string());
        m.items.push_back(std::move(it));
    }
    return m;
}

inline void save_dataset_manifest(const DatasetManifest& m, const std::filesystem::path& dir) {
    std::ofstream out(dir / "manifest.json");
    if (!out)
        throw std::runtime_error("save_dataset_manifest: cannot open " +
                                 (dir / "manifest.json").string());
    out << dataset_manifest_to_json(m).dump(2) << '\n';
}

inline DatasetManifest load_dataset_manifest(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in)
        throw std::runtime_error("load_dataset_manifest: missing file: " +
                                 (dir / "manifest.json").string());
    nlohmann::json j;
    in >> j;
    return dataset_manifest_from_json(j);
}

namespace detail {

/// Linear trajectory covering the label volume: frames parallel to the
/// world x-y plane, centered laterally, stepping through the z extent.
inline std::vector<RigidTransform> default_map_trajectory(const Volume3D& labels,
                                                          int frame_count) {
    const auto d = labels.dims();
    Vec3 lo{0, 0, 0}, hi{0, 0, 0};
    bool first = true;
    for (int corner = 0; corner < 8; ++corner) {
        const Vec3 v{double((corner & 1) ? d[0] - 1 : 0), double((corner & 2) ? d[1] - 1 : 0),
                     double((corner & 4) ? d[2] - 1 : 0)};
        const Vec3 w = labels.voxel_to_world(v);
        if (first) {
            lo = hi = w;
            first = false;
        } else {
            lo = {std::min(lo.x, w.x), std::min(lo.y, w.y), std::min(lo.z, w.z)};
            hi = {std::max(hi.x, w.x), std::max(hi.y, w.y), std::max(hi.z, w.z)};
        }
    }
    const Vec3 start{(lo.x + hi.x) / 2.0, lo.y, lo.z};
    const Vec3 step{0.0, 0.0, (hi.z - lo.z) / double(frame_count - 1)};
    return make_linear_trajectory(start, step, frame_count);
}

}  // namespace detail

/// Simulates, compounds and labels one volume per (tissue map, grid
/// combination, repetition), writing .mhd pairs plus a manifest into
/// out_dir. Failures are recorded per item; the run continues.
inline DatasetManifest generate_simulated_dataset(
    const std::vector<std::pair<std::string, TissueMap>>& maps, const DatasetGridConfig& grid,
    std::uint64_t seed, const std::filesystem::path& out_dir) {
    grid.validate();
    if (maps.empty())
        throw std::invalid_argument("generate_simulated_dataset: need at least one tissue map");
    std::filesystem::create_directories(out_dir);

    DatasetManifest manifest;
    manifest.seed = seed;
    manifest.grid = dataset_grid_to_json(grid);

    const auto combos = grid.combos();
    for (const auto& [map_id, map] : maps) {
        for (std::size_t c = 0; c < combos.size(); ++c) {
            for (int rep = 0; rep < grid.sweeps_per_combo; ++rep) {
                DatasetItem item;
                item.id = map_id + "_c" + std::to_string(c) + "_r" + std::to_string(rep);
                item.subject = map_id;
                item.params = {{"frequency_mhz", combos[c].frequency_mhz},
                               {"noise_floor", combos[c].noise_floor},
                               {"tgc_db_per_cm", combos[c].tgc_db_per_cm},
                               {"combo", c},
                               {"repetition", rep}};
                item.seed = seed ^ detail::fnv1a(item.id);
                try {
                    ProbeGeometry geom = grid.geometry;
                    geom.frequency_mhz = combos[c].frequency_mhz;
                    geom.validate();
                    ImagingParams imaging = grid.imaging;
                    imaging.noise_floor = combos[c].noise_floor;
                    imaging.tgc_db_per_cm = combos[c].tgc_db_per_cm;
                    imaging.seed = item.seed;
                    imaging.validate();

                    const Sweep sweep = simulate_sweep(
                        map, detail::default_map_trajectory(map.labels(), grid.frame_count),
                        geom, imaging, map_id, "c" + std::to_string(c));
                    const Volume3D image = compound(sweep, grid.compounding);
                    const Volume3D labels =
                        resample_to_grid(map.labels(), image.dims(), image.spacing(),
                                         image.origin(), image.direction(),
                                         Interpolation::nearest);
                    const Volume3D mask = labels_to_mask(labels, grid.foreground_labels);

                    item.image_file = item.id + "_img.mhd";
                    item.label_file = item.id + "_lbl.mhd";
                    save_volume(image, out_dir / item.image_file);
                    save_volume(mask, out_dir / item.label_file);
                    item.ok = true;
                } catch (const std::exception& e) {
                    item.ok = false;
                    item.error = e.what();
                    manifest.error_count += 1;
                }
                manifest.items.push_back(std::move(item));
            }
        }
    }
    save_dataset_manifest(manifest, out_dir);
    return manifest;
}

/// Loads the successful items of a dataset as training cases, optionally
/// restricted to a subject set.
inline std::vector<TrainCase> load_dataset_cases(const std::filesystem::path& dir,
                                                 const DatasetManifest& manifest,
                                                 const std::set<std::string>* subjects =
                                                     nullptr) {
    std::vector<TrainCase> cases;
    for (const DatasetItem& item : manifest.items) {
        if (!item.ok) continue;
        if (subjects && !subjects->count(item.subject)) continue;
        cases.push_back({item.id, load_volume(dir / item.image_file),
                         load_volume(dir / item.label_file)});
    }
    return cases;
}

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

enum class ExperimentMode { scratch, finetuned };

inline std::string to_string(ExperimentMode m) {
    return m == ExperimentMode::scratch ? "scratch" : "finetuned";
}

inline ExperimentMode experiment_mode_from_string(const std::string& s) {
    if (s == "scratch") return ExperimentMode::scratch;
    if (s == "finetuned") return ExperimentMode::finetuned;
    throw std::invalid_argument("unknown experiment mode: " + s);
}

/// Dataset ids a schedule must use: the fine-tune phase always trains on
/// "real"; the pre-training phase of finetuned mode trains on "sim".
inline constexpr const char* kRealDatasetId = "real";
inline constexpr const char* kSimDatasetId = "sim";

struct ExperimentConfig {
    ExperimentMode mode = ExperimentMode::scratch;
    NetConfig net;
    TrainSchedule schedule;
    AugmentConfig augment;
    PatchConfig patch;
    double overlap = 0.25;
    double threshold = 0.5;
    std::string real_dataset_dir;
    std::string sim_dataset_dir;  // required in finetuned mode
    std::string split_manifest;
    std::string output_dir;
    std::uint64_t init_seed = 0;

    void validate() const {
        net.validate();
        schedule.validate();
        augment.validate();
        patch.validate();
        if (!(overlap >= 0.0 && overlap < 1.0))
            throw std::invalid_argument("ExperimentConfig: overlap must be in [0, 1)");
        if (!(threshold > 0.0 && threshold < 1.0))
            throw std::invalid_argument("ExperimentConfig: threshold must be in (0, 1)");
        for (int d : patch.patch_dims)
            if (d % net.dim_multiple() != 0)
                throw std::invalid_argument(
                    "ExperimentConfig: patch dims must be multiples of 2^(scales-1)");
        if (real_dataset_dir.empty() || split_manifest.empty() || output_dir.empty())
            throw std::invalid_argument(
                "ExperimentConfig: real_dataset_dir, split_manifest and output_dir are "
                "required");
        if (mode == ExperimentMode::scratch) {
            if (schedule.phases.size() != 1 || schedule.phases[0].dataset_id != kRealDatasetId)
                throw std::invalid_argument(
                    "ExperimentConfig: scratch mode needs exactly one phase on 'real'");
        } else {
            if (schedule.phases.size() != 2 ||
                schedule.phases[0].dataset_id != kSimDatasetId ||
                schedule.phases[1].dataset_id != kRealDatasetId)
                throw std::invalid_argument(
                    "ExperimentConfig: finetuned mode needs a 'sim' phase then a 'real' "
                    "phase");
            if (sim_dataset_dir.empty())
                throw std::invalid_argument(
                    "ExperimentConfig: finetuned mode needs sim_dataset_dir");
        }
    }
};

inline nlohmann::json experiment_config_to_json(const ExperimentConfig& c) {
    return {{"mode", to_string(c.mode)},
            {"net", net_config_to_json(c.net)},
            {"schedule", train_schedule_to_json(c.schedule)},
            {"augment",
             {{"max_scale_delta", c.augment.max_scale_delta},
              {"max_rotation_deg", c.augment.max_rotation_deg}}},
            {"patch",
             {{"patch_dims", c.patch.patch_dims}, {"foreground_bias", c.patch.foreground_bias}}},
            {"overlap", c.overlap},
            {"threshold", c.threshold},
            {"real_dataset_dir", c.real_dataset_dir},
            {"sim_dataset_dir", c.sim_dataset_dir},
            {"split_manifest", c.split_manifest},
            {"output_dir", c.output_dir},
            {"init_seed", c.init_seed}};
}

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    c.mode = experiment_mode_from_string(j.at("mode").get<std::string>());
    c.net = net_config_from_json(j.at("net"));
    c.schedule = train_schedule_from_json(j.at("schedule"));
    if (j.contains("augment")) {
        c.augment.max_scale_delta = j.at("augment").value("max_scale_delta", 0.1);
        c.augment.max_rotation_deg = j.at("augment").value("max_rotation_deg", 10.0);
    }
    if (j.contains("patch")) {
        c.patch.patch_dims = j.at("patch").at("patch_dims").get<std::array<int, 3>>();
        c.patch.foreground_bias = j.at("patch").value("foreground_bias", 0.5);
    }
    c.overlap = j.value("overlap", 0.25);
    c.threshold = j.value("threshold", 0.5);
    c.real_dataset_dir = j.value("real_dataset_dir", std::string());
    c.sim_dataset_dir = j.value("sim_dataset_dir", std::string());
    c.split_manifest = j.value("split_manifest", std::string());
    c.output_dir = j.value("output_dir", std::string());
    c.init_seed = j.value("init_seed", std::uint64_t(0));
    c.validate();
    return c;
}

struct RunArtifacts {
    std::filesystem::path dir;
    std::vector<CaseReport> reports;
    TrainLog log;
};

/// One cross-validation fold end to end: resolve the fold's subjects, train
/// per the schedule (pre-training on the simulated dataset in finetuned
/// mode), predict every test item, and leave a self-describing run
/// directory: run.json, checkpoint.bin, loss_curve.csv, case_reports.csv
/// and predictions/.
inline RunArtifacts run_experiment(const ExperimentConfig& cfg, int fold_id) {
    cfg.validate();
    try {
        const SplitManifest splits = load_split_manifest(cfg.split_manifest);
        const Fold* fold = nullptr;
        for (const Fold& f : splits.folds)
            if (f.fold_id == fold_id) fold = &f;
        if (!fold) throw std::invalid_argument("fold not in the split manifest");

        const DatasetManifest real_manifest = load_dataset_manifest(cfg.real_dataset_dir);
        const std::set<std::string> train_set(fold->train_subjects.begin(),
                                              fold->train_subjects.end());
        DatasetMap data;
        data[kRealDatasetId] =
            load_dataset_cases(cfg.real_dataset_dir, real_manifest, &train_set);
        if (data[kRealDatasetId].empty())
            throw std::runtime_error("no training cases for the fold's train subjects");
        if (cfg.mode == ExperimentMode::finetuned) {
            const DatasetManifest sim_manifest = load_dataset_manifest(cfg.sim_dataset_dir);
            data[kSimDatasetId] = load_dataset_cases(cfg.sim_dataset_dir, sim_manifest);
            if (data[kSimDatasetId].empty())
                throw std::runtime_error("the simulated dataset has no usable cases");
        }

        Network net = init_network(cfg.net, cfg.init_seed);
        TrainOptions opt;
        opt.patch = cfg.patch;
        opt.augment = cfg.augment;
        RunArtifacts out;
        out.log = train(net, cfg.schedule, data, opt);

        out.dir = cfg.output_dir;
        std::filesystem::create_directories(out.dir / "predictions");
        save_checkpoint(out.dir / "checkpoint.bin", net);
        {
            std::ofstream curve(out.dir / "loss_curve.csv");
            curve << train_log_to_csv(out.log);
        }

        const std::set<std::string> test_set(fold->test_subjects.begin(),
                                             fold->test_subjects.end());
        for (const DatasetItem& item : real_manifest.items) {
            if (!item.ok || !test_set.count(item.subject)) continue;
            const Volume3D image = load_volume(cfg.real_dataset_dir /
                                               std::filesystem::path(item.image_file));
            const Volume3D ref = load_volume(cfg.real_dataset_dir /
                                             std::filesystem::path(item.label_file));
            const Volume3D prob =
                predict_probabilities(net, image, cfg.patch.patch_dims, cfg.overlap);
            const Volume3D pred = binarize_probabilities(prob, cfg.threshold);
            save_volume(prob, out.dir / "predictions" / (item.id + "_prob.mhd"));
            save_volume(pred, out.dir / "predictions" / (item.id + "_pred.mhd"));
            out.reports.push_back(evaluate_case(pred, ref, item.id));
        }
        if (out.reports.empty())
            throw std::runtime_error("no test cases for the fold's test subjects");
        {
            std::ofstream csv(out.dir / "case_reports.csv");
            csv << case_reports_to_csv(out.reports);
        }
        {
            nlohmann::json run = {{"config", experiment_config_to_json(cfg)},
                                  {"fold", fold_id},
                                  {"mode", to_string(cfg.mode)},
                                  {"test_subjects", fold->test_subjects},
                                  {"validation_subjects", fold->validation_subjects},
                                  {"train_subjects", fold->train_subjects}};
            std::ofstream rj(out.dir / "run.json");
            rj << run.dump(2) << '\n';
        }
        return out;
    } catch (const std::exception& e) {
        throw std::runtime_error("run_experiment: fold " + std::to_string(fold_id) + ": " +
                                 e.what());
    }
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct RunSummary {
    std::string mode;
    int fold = 0;
    std::vector<CaseReport> reports;
};

inline RunSummary load_run_summary(const std::filesystem::path& run_dir) {
    std::ifstream rj(run_dir / "run.json");
    if (!rj)
        throw std::runtime_error("load_run_summary: missing file: " +
                                 (run_dir / "run.json").string());
    nlohmann::json j;
    rj >> j;
    RunSummary s;
    s.mode = j.at("mode").get<std::string>();
    s.fold = j.at("fold").get<int>();
    std::ifstream csv(run_dir / "case_reports.csv");
    if (!csv)
        throw std::runtime_error("load_run_summary: missing file: " +
                                 (run_dir / "case_reports.csv").string());
    std::ostringstream buf;
    buf << csv.rdbuf();
    s.reports = case_reports_from_csv(buf.str());
    return s;
}

struct ReportBundle {
    std::string per_patient_csv;
    std::map<std::string, AggregateReport> aggregates;  // keyed by mode
    std::string comparison_text;
    std::vector<std::string> flags;  // cases present in one mode only
};

namespace detail {

inline std::string format_summary(const MetricSummary& s) {
    if (s.n == 0) return "NA";
    std::ostringstream out;
    out << std::fixed << std::setprecision(4) << s.mean << " +- " << s.stddev << " (n="
        << s.n << ")";
    return out.str();
}

}  // namespace detail

/// Joins runs into the paired per-case table behind the scratch vs
/// fine-tuned comparison, plus per-mode aggregates and a plain-text summary.
/// A case present in one mode only is flagged and kept, never dropped.
inline ReportBundle make_report(const std::vector<RunSummary>& runs) {
    if (runs.empty()) throw std::invalid_argument("make_report: no runs");

    std::map<std::string, std::map<std::string, CaseReport>> by_mode;  // mode -> case -> report
    for (const RunSummary& run : runs) {
        auto& cases = by_mode[run.mode];
        for (const CaseReport& r : run.reports)
            if (!cases.emplace(r.case_id, r).second)
                throw std::invalid_argument("make_report: case " + r.case_id +
                                            " appears twice in mode " + run.mode);
    }

    std::vector<std::string> modes;
    for (const std::string& known : {std::string("scratch"), std::string("finetuned")})
        if (by_mode.count(known)) modes.push_back(known);
    for (const auto& [mode, cases] : by_mode)
        if (std::find(modes.begin(), modes.end(), mode) == modes.end()) modes.push_back(mode);

    ReportBundle bundle;
    for (const auto& [mode, cases] : by_mode) {
        std::vector<CaseReport> reports;
        reports.reserve(cases.size());
        for (const auto& [id, r] : cases) reports.push_back(r);
        bundle.aggregates[mode] = aggregate(reports);
    }

    std::set<std::string> case_ids;
    for (const auto& [mode, cases] : by_mode)
        for (const auto& [id, r] : cases) case_ids.insert(id);

    std::ostringstream csv;
    csv << "case_id";
    for (const std::string& mode : modes)
        csv << ',' << mode << "_dice" << ',' << mode << "_jaccard" << ',' << mode << "_asd_mm"
            << ',' << mode << "_hausdorff_mm";
    csv << ",flag\n";
    for (const std::string& id : case_ids) {
        csv << id;
        std::vector<std::string> missing;
        for (const std::string& mode : modes) {
            const auto& cases = by_mode.at(mode);
            const auto it = cases.find(id);
            if (it == cases.end()) {
                csv << ",NA,NA,NA,NA";
                missing.push_back("missing_" + mode);
                continue;
            }
            const CaseReport& r = it->second;
            csv << ',' << number_to_string(r.dice) << ',' << number_to_string(r.jaccard);
            csv << ',' << (r.asd_mm ? number_to_string(*r.asd_mm) : "NA");
            csv << ',' << (r.hausdorff_mm ? number_to_string(*r.hausdorff_mm) : "NA");
        }
        std::string flag;
        for (const std::string& m : missing) flag += (flag.empty() ? "" : ";") + m;
        if (!flag.empty()) bundle.flags.push_back(id + ": " + flag);
        csv << ',' << flag << '\n';
    }
    bundle.per_patient_csv = csv.str();

    std::ostringstream txt;
    txt << std::left << std::setw(14) << "metric";
    for (const std::string& mode : modes) txt << std::setw(28) << mode;
    txt << '\n';
    const auto row = [&](const std::string& name, auto pick) {
        txt << std::left << std::setw(14) << name;
        for (const std::string& mode : modes)
            txt << std::setw(28) << detail::format_summary(pick(bundle.aggregates.at(mode)));
        txt << '\n';
    };
    row("dice", [](const AggregateReport& a) { return a.dice; });
    row("jaccard", [](const AggregateReport& a) { return a.jaccard; });
    row("asd_mm", [](const AggregateReport& a) { return a.asd_mm; });
    row("hausdorff_mm", [](const AggregateReport& a) { return a.hausdorff_mm; });
    if (bundle.aggregates.count("scratch") && bundle.aggregates.count("finetuned")) {
        const double delta = bundle.aggregates.at("finetuned").dice.mean -
                             bundle.aggregates.at("scratch").dice.mean;
        txt << "dice delta (finetuned - scratch): " << number_to_string(delta) << '\n';
    }
    for (const std::string& f : bundle.flags) txt << "flagged: " << f << '\n';
    bundle.comparison_text = txt.str();
    return bundle;
}

inline void write_report(const ReportBundle& bundle, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream(dir / "per_patient.csv") << bundle.per_patient_csv;
    for (const auto& [mode, agg] : bundle.aggregates)
        std::ofstream(dir / ("aggregate_" + mode + ".json"))
            << aggregate_report_to_json(agg).dump(2) << '\n';
    std::ofstream(dir / "comparison.txt") << bundle.comparison_text;
}

}  // namespace sonoseg
