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
#include <catch2/catch_amalgamated.hpp>

#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <sonoseg/phantom.hpp>
#include <sonoseg/pipeline.hpp>

#include "test_support.hpp"

using namespace sonoseg;

namespace {

std::vector<std::string> subject_names(int n) {
    std::vector<std::string> out;
    for (int i = 0; i < n; ++i) out.push_back("s" + std::to_string(i));
    return out;
}

std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

TissuePropertyMap test_table() {
    TissuePropertyMap t;
    t[0] = {0.0004, 0.0, 0.0, 0.0, 0.0};  // background (air-like)
    t[1] = {1.62, 0.1, 0.6, 0.7, 0.1};    // bright inclusion
    t[2] = {1.6, 0.1, 0.05, 0.3, 0.05};   // surrounding medium
    return t;
}

/// Two tiny subjects: a ball and an ellipsoid inclusion in a 20 mm cube.
std::vector<std::pair<std::string, TissueMap>> test_maps() {
    const std::array<int, 3> dims{20, 20, 20};
    const Vec3 spacing{1, 1, 1};
    std::vector<std::pair<std::string, TissueMap>> maps;
    maps.emplace_back("alpha",
                      bind_tissue_map(make_ball_labels(dims, spacing, {9.5, 9.5, 9.5}, 6.0, 1, 2),
                                      test_table(), 0));
    maps.emplace_back(
        "bravo",
        bind_tissue_map(
            make_ellipsoid_labels(dims, spacing, {9.5, 9.5, 9.5}, {7.0, 5.0, 4.0}, 1, 2),
            test_table(), 0));
    return maps;
}

DatasetGridConfig test_grid() {
    DatasetGridConfig g;
    g.geometry.kind = ProbeKind::linear;
    g.geometry.scanline_count = 16;
    g.geometry.samples_per_line = 32;
    g.geometry.width_mm = 16.0;
    g.geometry.depth_mm = 18.0;
    g.geometry.frequency_mhz = 5.0;
    g.imaging.dynamic_range_db = 50.0;
    g.imaging.noise_floor = 0.01;
    g.compounding.spacing = {1.0, 1.0, 1.0};
    g.frame_count = 5;
    return g;
}

}  // namespace

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

TEST_CASE("pipeline: split laws hold for every fold count up to 30 subjects") {
    for (int n = 2; n <= 30; ++n) {
        const auto subjects = subject_names(n);
        for (int k = 2; k <= n; ++k) {
            const SplitManifest m = make_splits(subjects, k, 42);
            REQUIRE(int(m.folds.size()) == k);

            // test sets are as even as possible and partition the subjects
            std::set<std::string> tested;
            for (const Fold& f : m.folds) {
                const int size = int(f.test_subjects.size());
                CHECK((size == n / k || size == n / k + 1));
                for (const std::string& s : f.test_subjects) CHECK(tested.insert(s).second);

                // within the fold: disjoint sets covering every subject
                std::set<std::string> seen;
                for (const std::string& s : f.test_subjects) CHECK(seen.insert(s).second);
                for (const std::string& s : f.validation_subjects)
                    CHECK(seen.insert(s).second);
                for (const std::string& s : f.train_subjects) CHECK(seen.insert(s).second);
                CHECK(int(seen.size()) == n);
            }
            CHECK(int(tested.size()) == n);
        }
    }
}

TEST_CASE("pipeline: 23 subjects over 5 folds test as 5,5,5,4,4") {
    const SplitManifest m = make_splits(subject_names(23), 5, 7);
    std::vector<std::size_t> sizes;
    for (const Fold& f : m.folds) sizes.push_back(f.test_subjects.size());
    CHECK(sizes == std::vector<std::size_t>{5, 5, 5, 4, 4});

    // the remainder splits roughly 3:1 into train and validation
    for (const Fold& f : m.folds) {
        CHECK(f.train_subjects.size() == 14);
        CHECK(f.validation_subjects.size() == 23 - 14 - f.test_subjects.size());
    }
}

TEST_CASE("pipeline: splits are seeded deterministically") {
    const auto subjects = subject_names(11);
    const auto a = split_manifest_to_json(make_splits(subjects, 3, 5));
    const auto b = split_manifest_to_json(make_splits(subjects, 3, 5));
    const auto c = split_manifest_to_json(make_splits(subjects, 3, 6));
    CHECK(a == b);
    CHECK(a != c);
}

TEST_CASE("pipeline: split validation rejects bad inputs") {
    CHECK_THROWS_AS(make_splits(subject_names(5), 1, 0), std::invalid_argument);
    CHECK_THROWS_AS(make_splits(subject_names(3), 4, 0), std::invalid_argument);
    CHECK_THROWS_AS(make_splits({"a", "b", "a"}, 2, 0), std::invalid_argument);
}

TEST_CASE("pipeline: split manifest survives a file round trip") {
    testsupport::TempDir tmp("splits");
    const SplitManifest m = make_splits(subject_names(9), 4, 123);
    save_split_manifest(m, tmp.path() / "splits.json");
    const SplitManifest r = load_split_manifest(tmp.path() / "splits.json");

    CHECK(r.seed == m.seed);
    CHECK(r.policy == m.policy);
    CHECK(r.subjects == m.subjects);
    REQUIRE(r.folds.size() == m.folds.size());
    for (std::size_t i = 0; i < m.folds.size(); ++i) {
        CHECK(r.folds[i].fold_id == m.folds[i].fold_id);
        CHECK(r.folds[i].test_subjects == m.folds[i].test_subjects);
        CHECK(r.folds[i].validation_subjects == m.folds[i].validation_subjects);
        CHECK(r.folds[i].train_subjects == m.folds[i].train_subjects);
    }
}

TEST_CASE("pipeline: corrupt split manifests are rejected on load") {
    testsupport::TempDir tmp("badsplits");
    SplitManifest m = make_splits(subject_names(6), 3, 1);

    SECTION("subject in two sets of one fold") {
        m.folds[0].train_subjects.push_back(m.folds[0].test_subjects[0]);
        save_split_manifest(m, tmp.path() / "bad.json");
        CHECK_THROWS_AS(load_split_manifest(tmp.path() / "bad.json"), std::invalid_argument);
    }
    SECTION("subject tested twice") {
        m.folds[1].test_subjects = m.folds[0].test_subjects;
        m.folds[1].validation_subjects.clear();
        m.folds[1].train_subjects.clear();
        for (const std::string& s : m.subjects) {
            if (std::find(m.folds[1].test_subjects.begin(), m.folds[1].test_subjects.end(),
                          s) == m.folds[1].test_subjects.end())
                m.folds[1].train_subjects.push_back(s);
        }
        save_split_manifest(m, tmp.path() / "bad.json");
        CHECK_THROWS_AS(load_split_manifest(tmp.path() / "bad.json"), std::invalid_argument);
    }
    SECTION("missing file") {
        CHECK_THROWS_AS(load_split_manifest(tmp.path() / "absent.json"), std::runtime_error);
    }
}

// ---------------------------------------------------------------------------
// Simulated datasets
// ---------------------------------------------------------------------------

TEST_CASE("pipeline: dataset generation sweeps the parameter grid") {
    testsupport::TempDir tmp("gen");
    DatasetGridConfig grid = test_grid();
    grid.frequencies_mhz = {4.0, 6.0};

    const DatasetManifest m = generate_simulated_dataset(test_maps(), grid, 99, tmp.path());

    // 2 maps x 2 combos x 1 repetition
    REQUIRE(m.items.size() == 4);
    CHECK(m.error_count == 0);
    CHECK(m.items[0].id == "alpha_c0_r0");
    CHECK(m.items[1].id == "alpha_c1_r0");
    CHECK(m.items[2].id == "bravo_c0_r0");
    CHECK(m.items[3].id == "bravo_c1_r0");
    for (const DatasetItem& item : m.items) {
        CHECK(item.ok);
        CHECK(item.error.empty());
        CHECK(std::filesystem::exists(tmp.path() / item.image_file));
        CHECK(std::filesystem::exists(tmp.path() / item.label_file));
        CHECK(item.seed == (99 ^ sonoseg::detail::fnv1a(item.id)));
    }
    CHECK(m.items[0].params.at("frequency_mhz").get<double>() == 4.0);
    CHECK(m.items[1].params.at("frequency_mhz").get<double>() == 6.0);

    // image and labels share one grid; labels are binary masks
    const Volume3D img = load_volume(tmp.path() / m.items[0].image_file);
    const Volume3D lbl = load_volume(tmp.path() / m.items[0].label_file);
    CHECK(img.kind() == ElementKind::float32);
    CHECK(lbl.kind() == ElementKind::uint8);
    CHECK(img.dims() == lbl.dims());
    std::size_t fg = 0;
    for (std::uint8_t v : lbl.labels()) {
        CHECK((v == 0 || v == 1));
        fg += v;
    }
    CHECK(fg > 0);

    // the manifest on disk equals the returned one
    const DatasetManifest r = load_dataset_manifest(tmp.path());
    CHECK(dataset_manifest_to_json(r) == dataset_manifest_to_json(m));
}

TEST_CASE("pipeline: dataset generation is bit-exact under a rerun") {
    testsupport::TempDir tmp("gen-rerun");
    DatasetGridConfig grid = test_grid();
    const auto out_a = tmp.path() / "a";
    const auto out_b = tmp.path() / "b";

    const DatasetManifest ma = generate_simulated_dataset(test_maps(), grid, 4242, out_a);
    const DatasetManifest mb = generate_simulated_dataset(test_maps(), grid, 4242, out_b);

    CHECK(dataset_manifest_to_json(ma) == dataset_manifest_to_json(mb));
    REQUIRE(ma.items.size() == mb.items.size());
    for (std::size_t i = 0; i < ma.items.size(); ++i) {
        const Volume3D ia = load_volume(out_a / ma.items[i].image_file);
        const Volume3D ib = load_volume(out_b / mb.items[i].image_file);
        CHECK(ia.floats() == ib.floats());
        const Volume3D la = load_volume(out_a / ma.items[i].label_file);
        const Volume3D lb = load_volume(out_b / mb.items[i].label_file);
        CHECK(la.labels() == lb.labels());
    }

    // a different seed changes the images
    const auto out_c = tmp.path() / "c";
    const DatasetManifest mc = generate_simulated_dataset(test_maps(), grid, 4243, out_c);
    const Volume3D ia = load_volume(out_a / ma.items[0].image_file);
    const Volume3D ic = load_volume(out_c / mc.items[0].image_file);
    CHECK(ia.floats() != ic.floats());
}

TEST_CASE("pipeline: dataset generation records per-item failures and continues") {
    testsupport::TempDir tmp("gen-err");
    DatasetGridConfig grid = test_grid();
    grid.frequencies_mhz = {5.0, -1.0};  // the second combo cannot be simulated

    auto maps = test_maps();
    maps.erase(maps.begin() + 1, maps.end());
    const DatasetManifest m = generate_simulated_dataset(maps, grid, 7, tmp.path());

    REQUIRE(m.items.size() == 2);
    CHECK(m.error_count == 1);
    CHECK(m.items[0].ok);
    CHECK_FALSE(m.items[1].ok);
    CHECK_FALSE(m.items[1].error.empty());
    CHECK(m.items[1].image_file.empty());

    // the partial dataset still loads, skipping the failed item
    const auto cases = load_dataset_cases(tmp.path(), m);
    REQUIRE(cases.size() == 1);
    CHECK(cases[0].id == "alpha_c0_r0");

    const DatasetManifest r = load_dataset_manifest(tmp.path());
    CHECK(r.error_count == 1);
}

TEST_CASE("pipeline: dataset cases can be filtered by subject") {
    testsupport::TempDir tmp("gen-filter");
    const DatasetManifest m =
        generate_simulated_dataset(test_maps(), test_grid(), 11, tmp.path());
    REQUIRE(m.items.size() == 2);

    const std::set<std::string> only_bravo{"bravo"};
    const auto cases = load_dataset_cases(tmp.path(), m, &only_bravo);
    REQUIRE(cases.size() == 1);
    CHECK(cases[0].id == "bravo_c0_r0");

    const auto all = load_dataset_cases(tmp.path(), m);
    CHECK(all.size() == 2);
}

TEST_CASE("pipeline: dataset grid config round trips through JSON") {
    DatasetGridConfig g = test_grid();
    g.frequencies_mhz = {3.0, 5.0};
    g.noise_floors = {0.0, 0.05};
    g.sweeps_per_combo = 2;
    g.foreground_labels = {1, 3};

    const DatasetGridConfig r = dataset_grid_from_json(dataset_grid_to_json(g));
    CHECK(r.geometry == g.geometry);
    CHECK(r.imaging == g.imaging);
    CHECK(r.frequencies_mhz == g.frequencies_mhz);
    CHECK(r.noise_floors == g.noise_floors);
    CHECK(r.tgc_db_per_cm == g.tgc_db_per_cm);
    CHECK(r.sweeps_per_combo == g.sweeps_per_combo);
    CHECK(r.frame_count == g.frame_count);
    CHECK(r.foreground_labels == g.foreground_labels);
    CHECK(r.combos().size() == 4);

    CHECK_THROWS_AS(dataset_grid_from_json({{"geometry", probe_geometry_to_json(g.geometry)},
                                            {"imaging", imaging_params_to_json(g.imaging)},
                                            {"sweeps_per_combo", 0}}),
                    std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

namespace {

/// Generates a small real dataset, splits its two subjects into two folds
/// and returns a ready-to-run scratch config.
ExperimentConfig make_scratch_setup(const std::filesystem::path& root) {
    const auto data_dir = root / "real";
    generate_simulated_dataset(test_maps(), test_grid(), 31, data_dir);
    const SplitManifest splits = make_splits({"alpha", "bravo"}, 2, 5);
    save_split_manifest(splits, root / "splits.json");

    ExperimentConfig cfg;
    cfg.mode = ExperimentMode::scratch;
    cfg.net = {1, 2, 2, 1, 2};
    cfg.schedule.seed = 17;
    cfg.schedule.phases = {{"real", 4, 2, 1e-3, false}};
    cfg.patch.patch_dims = {8, 8, 8};
    cfg.real_dataset_dir = data_dir.string();
    cfg.split_manifest = (root / "splits.json").string();
    cfg.output_dir = (root / "run0").string();
    cfg.init_seed = 101;
    return cfg;
}

}  // namespace

TEST_CASE("pipeline: experiment config validation enforces the mode contract") {
    testsupport::TempDir tmp("cfg");
    ExperimentConfig cfg = make_scratch_setup(tmp.path());
    CHECK_NOTHROW(cfg.validate());

    SECTION("scratch wants exactly one phase on the real dataset") {
        cfg.schedule.phases.push_back({"real", 1, 1, 1e-4, false});
        CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
        cfg.schedule.phases = {{"sim", 4, 2, 1e-3, false}};
        CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    }
    SECTION("finetuned wants sim then real") {
        cfg.mode = ExperimentMode::finetuned;
        cfg.sim_dataset_dir = cfg.real_dataset_dir;
        CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);  // one phase only
        cfg.schedule.phases = {{"real", 2, 1, 1e-4, false}, {"sim", 2, 1, 1e-4, false}};
        CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);  // wrong order
        cfg.schedule.phases = {{"sim", 2, 1, 1e-4, false}, {"real", 2, 1, 1e-4, false}};
        CHECK_NOTHROW(cfg.validate());
        cfg.sim_dataset_dir.clear();
        CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);  // no sim dataset
    }
    SECTION("patch dims must match the net downsampling") {
        cfg.patch.patch_dims = {8, 9, 8};
        CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    }
    SECTION("overlap and threshold ranges") {
        cfg.overlap = 1.0;
        CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
        cfg.overlap = 0.25;
        cfg.threshold = 0.0;
        CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    }
    SECTION("unknown mode string") {
        CHECK_THROWS_AS(experiment_mode_from_string("warmstart"), std::invalid_argument);
    }
}

TEST_CASE("pipeline: experiment config round trips through JSON") {
    testsupport::TempDir tmp("cfg-json");
    ExperimentConfig cfg = make_scratch_setup(tmp.path());
    cfg.augment.max_scale_delta = 0.2;
    cfg.overlap = 0.5;
    cfg.threshold = 0.6;

    const ExperimentConfig r = experiment_config_from_json(experiment_config_to_json(cfg));
    CHECK(r.mode == cfg.mode);
    CHECK(r.net == cfg.net);
    CHECK(r.schedule.seed == cfg.schedule.seed);
    REQUIRE(r.schedule.phases.size() == 1);
    CHECK(r.schedule.phases[0].dataset_id == "real");
    CHECK(r.schedule.phases[0].iterations == 4);
    CHECK(r.augment.max_scale_delta == 0.2);
    CHECK(r.patch.patch_dims == cfg.patch.patch_dims);
    CHECK(r.overlap == 0.5);
    CHECK(r.threshold == 0.6);
    CHECK(r.real_dataset_dir == cfg.real_dataset_dir);
    CHECK(r.init_seed == cfg.init_seed);
}

TEST_CASE("pipeline: a scratch experiment leaves a complete run directory") {
    testsupport::TempDir tmp("run");
    const ExperimentConfig cfg = make_scratch_setup(tmp.path());
    const RunArtifacts run = run_experiment(cfg, 0);

    CHECK(std::filesystem::exists(run.dir / "run.json"));
    CHECK(std::filesystem::exists(run.dir / "checkpoint.bin"));
    CHECK(std::filesystem::exists(run.dir / "loss_curve.csv"));
    CHECK(std::filesystem::exists(run.dir / "case_reports.csv"));
    CHECK(run.log.size() == 4);

    // exactly one report per test item of the fold, with saved predictions
    const SplitManifest splits = load_split_manifest(cfg.split_manifest);
    const Fold& fold = splits.folds[0];
    REQUIRE(fold.test_subjects.size() == 1);
    REQUIRE(run.reports.size() == 1);
    CHECK(run.reports[0].case_id == fold.test_subjects[0] + "_c0_r0");
    CHECK(std::filesystem::exists(run.dir / "predictions" /
                                  (run.reports[0].case_id + "_prob.mhd")));
    CHECK(std::filesystem::exists(run.dir / "predictions" /
                                  (run.reports[0].case_id + "_pred.mhd")));

    // the saved metrics recompute identically from the saved volumes
    const DatasetManifest data = load_dataset_manifest(cfg.real_dataset_dir);
    for (const CaseReport& saved : run.reports) {
        const DatasetItem* item = nullptr;
        for (const DatasetItem& it : data.items)
            if (it.id == saved.case_id) item = &it;
        REQUIRE(item != nullptr);
        const Volume3D pred =
            load_volume(run.dir / "predictions" / (saved.case_id + "_pred.mhd"));
        const Volume3D ref =
            load_volume(std::filesystem::path(cfg.real_dataset_dir) / item->label_file);
        const CaseReport again = evaluate_case(pred, ref, saved.case_id);
        CHECK(again.dice == saved.dice);
        CHECK(again.jaccard == saved.jaccard);
        CHECK(again.asd_mm == saved.asd_mm);
        CHECK(again.hausdorff_mm == saved.hausdorff_mm);
    }

    // the prediction equals thresholding the saved probabilities
    const Volume3D prob =
        load_volume(run.dir / "predictions" / (run.reports[0].case_id + "_prob.mhd"));
    const Volume3D pred =
        load_volume(run.dir / "predictions" / (run.reports[0].case_id + "_pred.mhd"));
    const Volume3D rebin = binarize_probabilities(prob, cfg.threshold);
    CHECK(rebin.labels() == pred.labels());

    // the CSV on disk matches the returned reports
    CHECK(read_file(run.dir / "case_reports.csv") == case_reports_to_csv(run.reports));

    // run.json freezes a loadable config
    nlohmann::json rj;
    std::ifstream(run.dir / "run.json") >> rj;
    const ExperimentConfig frozen = experiment_config_from_json(rj.at("config"));
    CHECK(frozen.init_seed == cfg.init_seed);
    CHECK(rj.at("fold").get<int>() == 0);
    CHECK(rj.at("mode").get<std::string>() == "scratch");
}

TEST_CASE("pipeline: rerunning an experiment reproduces its artifacts bit for bit") {
    testsupport::TempDir tmp("rerun");
    ExperimentConfig cfg = make_scratch_setup(tmp.path());
    const RunArtifacts a = run_experiment(cfg, 0);
    cfg.output_dir = (tmp.path() / "run1").string();
    const RunArtifacts b = run_experiment(cfg, 0);

    CHECK(read_file(a.dir / "checkpoint.bin") == read_file(b.dir / "checkpoint.bin"));
    CHECK(read_file(a.dir / "case_reports.csv") == read_file(b.dir / "case_reports.csv"));
    CHECK(read_file(a.dir / "loss_curve.csv") == read_file(b.dir / "loss_curve.csv"));

    // the two folds test different subjects
    const RunArtifacts c = [&] {
        ExperimentConfig other = cfg;
        other.output_dir = (tmp.path() / "run2").string();
        return run_experiment(other, 1);
    }();
    REQUIRE(c.reports.size() == 1);
    CHECK(c.reports[0].case_id != a.reports[0].case_id);
}

TEST_CASE("pipeline: a finetuned experiment pre-trains on the simulated dataset") {
    testsupport::TempDir tmp("finetune");
    ExperimentConfig cfg = make_scratch_setup(tmp.path());

    // second dataset with different imaging settings plays the simulated role
    DatasetGridConfig sim_grid = test_grid();
    sim_grid.geometry.frequency_mhz = 6.5;
    sim_grid.imaging.noise_floor = 0.05;
    generate_simulated_dataset(test_maps(), sim_grid, 77, tmp.path() / "sim");

    cfg.mode = ExperimentMode::finetuned;
    cfg.sim_dataset_dir = (tmp.path() / "sim").string();
    cfg.schedule.phases = {{"sim", 3, 2, 1e-3, false}, {"real", 3, 2, 5e-4, false}};
    cfg.output_dir = (tmp.path() / "ft").string();

    const RunArtifacts run = run_experiment(cfg, 0);
    REQUIRE(run.log.size() == 6);
    CHECK(run.log[0].phase == "sim");
    CHECK(run.log[3].phase == "real");
    CHECK(run.reports.size() == 1);
    CHECK(std::filesystem::exists(run.dir / "checkpoint.bin"));

    // fine-tuning actually changes the outcome relative to scratch
    ExperimentConfig scratch = make_scratch_setup(tmp.path());
    scratch.output_dir = (tmp.path() / "sc").string();
    const RunArtifacts sc = run_experiment(scratch, 0);
    CHECK(read_file(run.dir / "checkpoint.bin") != read_file(sc.dir / "checkpoint.bin"));
}

TEST_CASE("pipeline: run_experiment reports missing folds and subjects clearly") {
    testsupport::TempDir tmp("run-err");
    const ExperimentConfig cfg = make_scratch_setup(tmp.path());
    CHECK_THROWS_WITH(run_experiment(cfg, 9), Catch::Matchers::ContainsSubstring("fold"));
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

namespace {

CaseReport simple_report(const std::string& id, double dice_value) {
    CaseReport r;
    r.case_id = id;
    r.dice = dice_value;
    r.jaccard = dice_value / (2.0 - dice_value);
    r.asd_mm = 1.0 - dice_value;
    r.hausdorff_mm = 2.0 * (1.0 - dice_value);
    r.pred_voxels = 100;
    r.ref_voxels = 110;
    return r;
}

}  // namespace

TEST_CASE("pipeline: report pairs cases across modes and flags unpaired ones") {
    RunSummary scratch{"scratch", 0, {simple_report("p1", 0.80), simple_report("p2", 0.70)}};
    RunSummary finetuned{"finetuned", 0, {simple_report("p1", 0.90), simple_report("p3", 0.85)}};
    const ReportBundle bundle = make_report({scratch, finetuned});

    // per-mode aggregates equal the metric module's aggregation exactly
    const AggregateReport agg_scratch = aggregate(scratch.reports);
    const AggregateReport agg_ft = aggregate(finetuned.reports);
    CHECK(bundle.aggregates.at("scratch").dice.mean == agg_scratch.dice.mean);
    CHECK(bundle.aggregates.at("scratch").dice.stddev == agg_scratch.dice.stddev);
    CHECK(bundle.aggregates.at("scratch").n_cases == 2);
    CHECK(bundle.aggregates.at("finetuned").jaccard.mean == agg_ft.jaccard.mean);
    CHECK(bundle.aggregates.at("finetuned").asd_mm.mean == agg_ft.asd_mm.mean);

    // unpaired cases stay in the table, marked instead of dropped
    std::istringstream csv(bundle.per_patient_csv);
    std::string header;
    std::getline(csv, header);
    CHECK(header ==
          "case_id,scratch_dice,scratch_jaccard,scratch_asd_mm,scratch_hausdorff_mm,"
          "finetuned_dice,finetuned_jaccard,finetuned_asd_mm,finetuned_hausdorff_mm,flag");
    std::map<std::string, std::string> rows;
    std::string line;
    while (std::getline(csv, line)) {
        if (line.empty()) continue;
        rows[line.substr(0, line.find(','))] = line;
    }
    REQUIRE(rows.size() == 3);
    CHECK(rows.at("p1").find("NA") == std::string::npos);
    CHECK(rows.at("p2").find("missing_finetuned") != std::string::npos);
    CHECK(rows.at("p3").find("missing_scratch") != std::string::npos);
    CHECK(bundle.flags.size() == 2);

    // the text comparison mentions every metric and the dice delta
    CHECK(bundle.comparison_text.find("dice") != std::string::npos);
    CHECK(bundle.comparison_text.find("hausdorff_mm") != std::string::npos);
    CHECK(bundle.comparison_text.find("dice delta") != std::string::npos);
    CHECK(bundle.comparison_text.find("flagged: p2: missing_finetuned") != std::string::npos);

    // a case duplicated within one mode is an input error
    RunSummary dupe{"scratch", 1, {simple_report("p1", 0.5)}};
    CHECK_THROWS_AS(make_report({scratch, finetuned, dupe}), std::invalid_argument);
    CHECK_THROWS_AS(make_report({}), std::invalid_argument);
}

TEST_CASE("pipeline: report files land on disk and run summaries load back") {
    testsupport::TempDir tmp("report");

    // a fabricated run directory is enough for the loader
    const std::filesystem::path run_dir = tmp.path() / "run";
    std::filesystem::create_directories(run_dir);
    {
        nlohmann::json rj = {{"mode", "scratch"}, {"fold", 2}};
        std::ofstream(run_dir / "run.json") << rj.dump(2) << '\n';
        std::ofstream(run_dir / "case_reports.csv")
            << case_reports_to_csv({simple_report("p1", 0.75)});
    }
    const RunSummary s = load_run_summary(run_dir);
    CHECK(s.mode == "scratch");
    CHECK(s.fold == 2);
    REQUIRE(s.reports.size() == 1);
    CHECK(s.reports[0].case_id == "p1");
    CHECK(s.reports[0].dice == 0.75);
    CHECK_THROWS_AS(load_run_summary(tmp.path() / "nope"), std::runtime_error);

    const ReportBundle bundle = make_report({s});
    write_report(bundle, tmp.path() / "out");
    CHECK(std::filesystem::exists(tmp.path() / "out" / "per_patient.csv"));
    CHECK(std::filesystem::exists(tmp.path() / "out" / "aggregate_scratch.json"));
    CHECK(std::filesystem::exists(tmp.path() / "out" / "comparison.txt"));
    CHECK(read_file(tmp.path() / "out" / "per_patient.csv") == bundle.per_patient_csv);

    // the aggregate JSON on disk reproduces the in-memory aggregate
    nlohmann::json aj;
    std::ifstream(tmp.path() / "out" / "aggregate_scratch.json") >> aj;
    const AggregateReport agg = aggregate_report_from_json(aj);
    CHECK(agg.dice.mean == bundle.aggregates.at("scratch").dice.mean);
    CHECK(agg.n_cases == bundle.aggregates.at("scratch").n_cases);
}
