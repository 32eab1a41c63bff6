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

// sonoseg command line: simulation, compounding, dataset generation, splits,
// training, prediction, evaluation and reporting as subcommands. Every
// command reads JSON configs, writes volumes as .mhd/.raw and tables as CSV,
// prints a one-object JSON summary to stdout on success and a one-object
// JSON error to stderr on failure. All randomness is seeded explicitly; the
// --threads flag changes wall time, never results.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include <sonoseg/compound.hpp>
#include <sonoseg/metrics.hpp>
#include <sonoseg/net.hpp>
#include <sonoseg/parallel.hpp>
#include <sonoseg/phantom.hpp>
#include <sonoseg/pipeline.hpp>
#include <sonoseg/simulate.hpp>
#include <sonoseg/tissue.hpp>
#include <sonoseg/volume.hpp>

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

struct GlobalArgs {
    std::string config;
    std::string output;
    std::optional<std::uint64_t> seed;
    int threads = 1;
};

json load_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file: " + path);
    json j;
    in >> j;
    return j;
}

json require_config(const GlobalArgs& g) {
    if (g.config.empty()) throw std::runtime_error("this command needs --config <file.json>");
    return load_json_file(g.config);
}

fs::path require_output_dir(const GlobalArgs& g) {
    if (g.output.empty()) throw std::runtime_error("this command needs --output <dir>");
    fs::create_directories(g.output);
    return g.output;
}

/// Volume-producing commands accept --output as either a .mhd file path or
/// a directory that receives default_name.
fs::path resolve_volume_output(const GlobalArgs& g, const std::string& default_name) {
    if (g.output.empty()) throw std::runtime_error("this command needs --output <dir|file.mhd>");
    fs::path out = g.output;
    if (out.extension() == ".mhd") {
        if (out.has_parent_path()) fs::create_directories(out.parent_path());
        return out;
    }
    fs::create_directories(out);
    return out / default_name;
}

sonoseg::Vec3 vec3_from_json(const json& j, const char* what) {
    const auto v = j.get<std::vector<double>>();
    if (v.size() != 3) throw std::runtime_error(std::string(what) + " needs 3 numbers");
    return {v[0], v[1], v[2]};
}

std::array<int, 3> dims_from_json(const json& j, const char* what) {
    const auto v = j.get<std::vector<int>>();
    if (v.size() != 3) throw std::runtime_error(std::string(what) + " needs 3 integers");
    return {v[0], v[1], v[2]};
}

void print_summary(const json& j) { std::cout << j.dump(2) << '\n'; }

// ---------------------------------------------------------------------------
// Subcommand implementations
// ---------------------------------------------------------------------------

// phantom: synthetic label volume (ball, ellipsoid, two_layer or filled).
int cmd_phantom(const GlobalArgs& g) {
    const json cfg = require_config(g);
    const std::string kind = cfg.at("kind").get<std::string>();
    const auto dims = dims_from_json(cfg.at("dims"), "dims");
    const sonoseg::Vec3 spacing =
        cfg.contains("spacing") ? vec3_from_json(cfg.at("spacing"), "spacing")
                                : sonoseg::Vec3{1, 1, 1};
    const auto inside = std::uint8_t(cfg.value("inside", 1));
    const auto outside = std::uint8_t(cfg.value("outside", 0));

    sonoseg::Volume3D labels = [&] {
        if (kind == "ball")
            return sonoseg::make_ball_labels(dims, spacing,
                                             vec3_from_json(cfg.at("center"), "center"),
                                             cfg.at("radius").get<double>(), inside, outside);
        if (kind == "ellipsoid")
            return sonoseg::make_ellipsoid_labels(
                dims, spacing, vec3_from_json(cfg.at("center"), "center"),
                vec3_from_json(cfg.at("semi_axes"), "semi_axes"), inside, outside);
        if (kind == "two_layer")
            return sonoseg::make_two_layer_labels(dims, spacing,
                                                  cfg.at("boundary_j").get<int>(), inside,
                                                  outside);
        if (kind == "filled")
            return sonoseg::make_filled_labels(dims, spacing,
                                               std::uint8_t(cfg.value("fill", 1)));
        throw std::runtime_error("phantom kind must be ball, ellipsoid, two_layer or filled");
    }();

    const fs::path out = resolve_volume_output(g, "labels.mhd");
    sonoseg::save_volume(labels, out);
    print_summary({{"command", "phantom"}, {"kind", kind}, {"output", out.string()}});
    return 0;
}

// simulate: tissue map -> tracked sweep directory.
int cmd_simulate(const GlobalArgs& g) {
    const json cfg = require_config(g);
    const sonoseg::Volume3D labels = sonoseg::load_volume(cfg.at("labels").get<std::string>());
    const sonoseg::TissueTable table =
        cfg.contains("tissue_table")
            ? sonoseg::load_tissue_table(cfg.at("tissue_table").get<std::string>())
            : sonoseg::default_tissue_table();
    const sonoseg::TissueMap tm =
        sonoseg::bind_tissue_map(labels, table.properties, table.background);

    const sonoseg::ProbeGeometry geom = sonoseg::probe_geometry_from_json(cfg.at("geometry"));
    sonoseg::ImagingParams imaging = sonoseg::imaging_params_from_json(cfg.at("imaging"));
    if (g.seed) imaging.seed = *g.seed;

    std::vector<sonoseg::RigidTransform> trajectory;
    if (cfg.contains("trajectory")) {
        const json& t = cfg.at("trajectory");
        trajectory = sonoseg::make_linear_trajectory(
            vec3_from_json(t.at("start"), "trajectory.start"),
            vec3_from_json(t.at("step_mm"), "trajectory.step_mm"),
            t.at("frame_count").get<int>());
    } else {
        trajectory =
            sonoseg::detail::default_map_trajectory(labels, cfg.value("frame_count", 8));
    }

    const sonoseg::Sweep sweep =
        sonoseg::simulate_sweep(tm, trajectory, geom, imaging,
                                cfg.value("id", std::string("map")), "cli");
    const fs::path out = require_output_dir(g);
    sonoseg::save_sweep(sweep, out);
    print_summary({{"command", "simulate"},
                   {"frames", sweep.frames.size()},
                   {"seed", imaging.seed},
                   {"output", out.string()}});
    return 0;
}

// compound: sweep directory -> reconstructed volume.
int cmd_compound(const GlobalArgs& g, const std::string& input) {
    sonoseg::CompoundingConfig cc;
    if (!g.config.empty()) {
        const json cfg = load_json_file(g.config);
        cc = sonoseg::compounding_config_from_json(
            cfg.contains("compounding") ? cfg.at("compounding") : cfg);
    }
    const sonoseg::Sweep sweep = sonoseg::load_sweep(input);
    const sonoseg::Volume3D vol = sonoseg::compound(sweep, cc);
    const fs::path out = resolve_volume_output(g, "volume.mhd");
    sonoseg::save_volume(vol, out);
    print_summary({{"command", "compound"},
                   {"dims", vol.dims()},
                   {"output", out.string()}});
    return 0;
}

// resample: volume -> volume at a new spacing.
int cmd_resample(const GlobalArgs& g, const std::string& input,
                 const std::vector<double>& spacing, const std::string& interp) {
    sonoseg::Vec3 target{0, 0, 0};
    if (spacing.size() == 3) {
        target = {spacing[0], spacing[1], spacing[2]};
    } else if (spacing.size() == 1) {
        target = {spacing[0], spacing[0], spacing[0]};
    } else if (!g.config.empty()) {
        target = vec3_from_json(load_json_file(g.config).at("spacing"), "spacing");
    } else {
        throw std::runtime_error("resample needs --spacing x,y,z (or a config with spacing)");
    }
    const sonoseg::Interpolation mode = [&] {
        if (interp == "nearest") return sonoseg::Interpolation::nearest;
        if (interp == "trilinear") return sonoseg::Interpolation::trilinear;
        throw std::runtime_error("interp must be nearest or trilinear");
    }();
    const sonoseg::Volume3D vol = sonoseg::load_volume(input);
    const sonoseg::Volume3D out_vol = sonoseg::resample(vol, target, mode);
    const fs::path out = resolve_volume_output(g, "resampled.mhd");
    sonoseg::save_volume(out_vol, out);
    print_summary({{"command", "resample"},
                   {"dims", out_vol.dims()},
                   {"output", out.string()}});
    return 0;
}

// gen-dataset: tissue maps x parameter grid -> image/label corpus.
int cmd_gen_dataset(const GlobalArgs& g) {
    const json cfg = require_config(g);
    const sonoseg::DatasetGridConfig grid = sonoseg::dataset_grid_from_json(cfg.at("grid"));
    const std::uint64_t seed = g.seed ? *g.seed : cfg.value("seed", std::uint64_t(0));

    std::vector<std::pair<std::string, sonoseg::TissueMap>> maps;
    for (const json& mj : cfg.at("maps")) {
        const sonoseg::Volume3D labels =
            sonoseg::load_volume(mj.at("labels").get<std::string>());
        const sonoseg::TissueTable table =
            mj.contains("tissue_table")
                ? sonoseg::load_tissue_table(mj.at("tissue_table").get<std::string>())
                : sonoseg::default_tissue_table();
        maps.emplace_back(mj.at("id").get<std::string>(),
                          sonoseg::bind_tissue_map(labels, table.properties, table.background));
    }

    const fs::path out = require_output_dir(g);
    const sonoseg::DatasetManifest manifest =
        sonoseg::generate_simulated_dataset(maps, grid, seed, out);
    print_summary({{"command", "gen-dataset"},
                   {"items", manifest.items.size()},
                   {"errors", manifest.error_count},
                   {"seed", seed},
                   {"output", out.string()}});
    return 0;
}

// split: subject list (inline or from a dataset) -> cross-validation folds.
int cmd_split(const GlobalArgs& g) {
    const json cfg = require_config(g);
    std::vector<std::string> subjects;
    if (cfg.contains("subjects")) {
        subjects = cfg.at("subjects").get<std::vector<std::string>>();
    } else if (cfg.contains("dataset")) {
        const sonoseg::DatasetManifest m =
            sonoseg::load_dataset_manifest(cfg.at("dataset").get<std::string>());
        std::set<std::string> uniq;
        for (const sonoseg::DatasetItem& it : m.items)
            if (it.ok) uniq.insert(it.subject);
        subjects.assign(uniq.begin(), uniq.end());
    } else {
        throw std::runtime_error("split config needs 'subjects' or 'dataset'");
    }
    const int n_folds = cfg.at("n_folds").get<int>();
    const std::uint64_t seed = g.seed ? *g.seed : cfg.value("seed", std::uint64_t(0));

    const sonoseg::SplitManifest m = sonoseg::make_splits(subjects, n_folds, seed);
    const fs::path out = require_output_dir(g);
    sonoseg::save_split_manifest(m, out / "splits.json");
    print_summary({{"command", "split"},
                   {"subjects", subjects.size()},
                   {"folds", n_folds},
                   {"seed", seed},
                   {"output", (out / "splits.json").string()}});
    return 0;
}

// train: one experiment fold end to end (train, predict test set, evaluate).
int cmd_train(const GlobalArgs& g, int fold) {
    sonoseg::ExperimentConfig cfg = sonoseg::experiment_config_from_json(require_config(g));
    if (g.seed) cfg.schedule.seed = *g.seed;
    if (!g.output.empty()) cfg.output_dir = g.output;
    const sonoseg::RunArtifacts run = sonoseg::run_experiment(cfg, fold);
    const sonoseg::AggregateReport agg = sonoseg::aggregate(run.reports);
    print_summary({{"command", "train"},
                   {"mode", sonoseg::to_string(cfg.mode)},
                   {"fold", fold},
                   {"cases", run.reports.size()},
                   {"dice_mean", agg.dice.mean},
                   {"output", run.dir.string()}});
    return 0;
}

// predict: checkpoint + volume -> probability and binary mask volumes.
int cmd_predict(const GlobalArgs& g, const std::string& checkpoint, const std::string& input,
                std::vector<int> patch, double overlap, double threshold,
                const std::string& id) {
    if (!g.config.empty()) {
        const json cfg = load_json_file(g.config);
        if (cfg.contains("patch_dims")) patch = cfg.at("patch_dims").get<std::vector<int>>();
        if (cfg.contains("overlap")) overlap = cfg.at("overlap").get<double>();
        if (cfg.contains("threshold")) threshold = cfg.at("threshold").get<double>();
    }
    if (patch.size() == 1) patch = {patch[0], patch[0], patch[0]};
    if (patch.size() != 3) throw std::runtime_error("predict needs a 3-entry patch size");

    const sonoseg::Checkpoint ckpt = sonoseg::load_checkpoint(checkpoint);
    const sonoseg::Volume3D image = sonoseg::load_volume(input);
    const std::array<int, 3> dims{patch[0], patch[1], patch[2]};
    const sonoseg::Volume3D prob =
        sonoseg::predict_probabilities(ckpt.net, image, dims, overlap);
    const sonoseg::Volume3D pred = sonoseg::binarize_probabilities(prob, threshold);

    const std::string stem = id.empty() ? fs::path(input).stem().string() : id;
    const fs::path out = require_output_dir(g);
    sonoseg::save_volume(prob, out / (stem + "_prob.mhd"));
    sonoseg::save_volume(pred, out / (stem + "_pred.mhd"));
    std::size_t fg = 0;
    for (std::uint8_t v : pred.labels()) fg += v;
    print_summary({{"command", "predict"},
                   {"id", stem},
                   {"foreground_voxels", fg},
                   {"output", out.string()}});
    return 0;
}

// evaluate: prediction/reference mask pairs -> CaseReport CSV + aggregate.
int cmd_evaluate(const GlobalArgs& g, const std::string& pred, const std::string& ref,
                 const std::string& id) {
    std::vector<sonoseg::CaseReport> reports;
    if (!pred.empty() || !ref.empty()) {
        if (pred.empty() || ref.empty())
            throw std::runtime_error("evaluate needs both --pred and --ref");
        reports.push_back(sonoseg::evaluate_case(sonoseg::load_volume(pred),
                                                 sonoseg::load_volume(ref),
                                                 id.empty() ? "case" : id));
    } else {
        const json cfg = require_config(g);
        for (const json& cj : cfg.at("cases"))
            reports.push_back(
                sonoseg::evaluate_case(sonoseg::load_volume(cj.at("pred").get<std::string>()),
                                       sonoseg::load_volume(cj.at("ref").get<std::string>()),
                                       cj.at("id").get<std::string>()));
    }
    const sonoseg::AggregateReport agg = sonoseg::aggregate(reports);
    const fs::path out = require_output_dir(g);
    std::ofstream(out / "case_reports.csv") << sonoseg::case_reports_to_csv(reports);
    std::ofstream(out / "aggregate.json")
        << sonoseg::aggregate_report_to_json(agg).dump(2) << '\n';
    print_summary({{"command", "evaluate"},
                   {"cases", reports.size()},
                   {"dice_mean", agg.dice.mean},
                   {"output", out.string()}});
    return 0;
}

// report: run directories -> paired per-patient CSV, aggregates, comparison.
int cmd_report(const GlobalArgs& g, const std::vector<std::string>& run_dirs) {
    std::vector<sonoseg::RunSummary> runs;
    for (const std::string& dir : run_dirs) runs.push_back(sonoseg::load_run_summary(dir));
    const sonoseg::ReportBundle bundle = sonoseg::make_report(runs);
    const fs::path out = require_output_dir(g);
    sonoseg::write_report(bundle, out);
    json modes = json::object();
    for (const auto& [mode, agg] : bundle.aggregates)
        modes[mode] = {{"dice_mean", agg.dice.mean}, {"cases", agg.n_cases}};
    print_summary({{"command", "report"},
                   {"runs", runs.size()},
                   {"modes", modes},
                   {"flags", bundle.flags},
                   {"output", out.string()}});
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"sonoseg: simulated freehand ultrasound segmentation pipeline"};
    app.require_subcommand(1);

    GlobalArgs g;
    app.add_option("--config", g.config, "JSON config file")->expected(1);
    app.add_option("--output", g.output, "output directory (or .mhd path)")->expected(1);
    app.add_option("--seed", g.seed, "seed override for the command's randomness");
    app.add_option("--threads", g.threads, "worker threads (never changes results)");
    for (auto* opt : {app.get_option("--config"), app.get_option("--output"),
                      app.get_option("--seed"), app.get_option("--threads")})
        opt->configurable(false);

    auto* phantom = app.add_subcommand("phantom", "generate a synthetic label volume");
    auto* simulate = app.add_subcommand("simulate", "tissue map to tracked sweep");
    auto* compound = app.add_subcommand("compound", "sweep to compounded volume");
    auto* resample = app.add_subcommand("resample", "volume to a new voxel spacing");
    auto* gen = app.add_subcommand("gen-dataset", "simulate an image/label corpus");
    auto* split = app.add_subcommand("split", "build cross-validation folds");
    auto* train = app.add_subcommand("train", "run one experiment fold");
    auto* predict = app.add_subcommand("predict", "segment a volume with a checkpoint");
    auto* evaluate = app.add_subcommand("evaluate", "score predictions against references");
    auto* report = app.add_subcommand("report", "combine runs into a comparison report");

    std::string compound_input;
    compound->add_option("--input", compound_input, "sweep directory")->required();

    std::string resample_input, resample_interp = "trilinear";
    std::vector<double> resample_spacing;
    resample->add_option("--input", resample_input, "volume (.mhd)")->required();
    resample->add_option("--spacing", resample_spacing, "target spacing in mm");
    resample->add_option("--interp", resample_interp, "nearest or trilinear");

    int train_fold = 0;
    train->add_option("--fold", train_fold, "fold id from the split manifest");

    std::string predict_checkpoint, predict_input, predict_id;
    std::vector<int> predict_patch{128, 128, 128};
    double predict_overlap = 0.25, predict_threshold = 0.5;
    predict->add_option("--checkpoint", predict_checkpoint, "network checkpoint")->required();
    predict->add_option("--input", predict_input, "volume (.mhd)")->required();
    predict->add_option("--patch", predict_patch, "sliding-window patch size");
    predict->add_option("--overlap", predict_overlap, "window overlap fraction");
    predict->add_option("--threshold", predict_threshold, "foreground threshold");
    predict->add_option("--id", predict_id, "case id for the output files");

    std::string eval_pred, eval_ref, eval_id;
    evaluate->add_option("--pred", eval_pred, "prediction mask (.mhd)");
    evaluate->add_option("--ref", eval_ref, "reference mask (.mhd)");
    evaluate->add_option("--id", eval_id, "case id for the report row");

    std::vector<std::string> report_runs;
    report->add_option("--runs", report_runs, "run directories")->required();

    // global flags are accepted after the subcommand name too
    for (CLI::App* sub : app.get_subcommands(nullptr)) sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        std::cerr << json({{"error", {{"type", "usage"}, {"message", e.what()}}}}).dump()
                  << '\n';
        return app.exit(e);
    }

    sonoseg::set_thread_count(g.threads);

    try {
        if (*phantom) return cmd_phantom(g);
        if (*simulate) return cmd_simulate(g);
        if (*compound) return cmd_compound(g, compound_input);
        if (*resample) return cmd_resample(g, resample_input, resample_spacing, resample_interp);
        if (*gen) return cmd_gen_dataset(g);
        if (*split) return cmd_split(g);
        if (*train) return cmd_train(g, train_fold);
        if (*predict)
            return cmd_predict(g, predict_checkpoint, predict_input, predict_patch,
                               predict_overlap, predict_threshold, predict_id);
        if (*evaluate) return cmd_evaluate(g, eval_pred, eval_ref, eval_id);
        if (*report) return cmd_report(g, report_runs);
        throw std::runtime_error("no subcommand selected");
    } catch (const std::exception& e) {
        const std::string cmd =
            app.get_subcommands().empty() ? "" : app.get_subcommands().front()->get_name();
        std::cerr << json({{"error",
                            {{"type", "runtime"}, {"command", cmd}, {"message", e.what()}}}})
                         .dump()
                  << '\n';
        return 1;
    }
}
