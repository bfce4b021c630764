// Command-line driver: split generation, task training, evaluation, report
// grids, and SVG plots. Exit codes: 0 success, 2 usage error, 3 data error,
// 4 protocol error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "owd/protocol.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

owd::SyntheticConfig synthetic_config_from_json(const json& j) {
    owd::SyntheticConfig c;
    try {
        c.num_classes = j.value("num_classes", c.num_classes);
        c.num_images = j.value("num_images", c.num_images);
        c.min_instances = j.value("min_instances", c.min_instances);
        c.max_instances = j.value("max_instances", c.max_instances);
        c.image_size = j.value("image_size", c.image_size);
        c.oriented = j.value("oriented", c.oriented);
        c.min_extent = j.value("min_extent", c.min_extent);
        c.max_extent = j.value("max_extent", c.max_extent);
        c.seed = j.value("seed", c.seed);
    } catch (const json::exception& e) {
        throw owd::data_error(std::string("synthetic config: ") + e.what());
    }
    return c;
}

std::string row_name(const std::string& path) {
    const fs::path p(path);
    // Checkpoint reports are all called report.json; the directory is the
    // distinguishing part.
    if (p.stem() == "report" && p.has_parent_path() && !p.parent_path().filename().empty())
        return p.parent_path().filename().string();
    return p.stem().string();
}

std::string format_metric(const std::optional<double>& v) {
    if (!v) return "-";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", *v * 100.0);
    return buf;
}

json metric_or_null(const std::optional<double>& v) {
    return v ? json(*v * 100.0) : json(nullptr);
}

int cmd_split(const std::string& manifest_path, const std::string& synthetic_path,
              const std::string& schedule_path, double fraction_override, std::uint64_t seed,
              const std::string& out_dir) {
    owd::DatasetManifest full;
    if (!synthetic_path.empty())
        full = owd::synthetic_shapes(
            synthetic_config_from_json(owd::detail::load_json_file(synthetic_path)));
    else
        full = owd::load_manifest(manifest_path);

    owd::TaskSchedule schedule = owd::load_schedule(schedule_path);
    if (fraction_override > 0.0)
        for (auto& t : schedule.tasks) t.fraction = fraction_override;
    schedule.validate();

    fs::create_directories(out_dir);
    owd::save_manifest(full, (fs::path(out_dir) / "full.json").string());
    owd::detail::write_json_file((fs::path(out_dir) / "schedule.json").string(),
                                 owd::schedule_to_json(schedule));

    const auto splits = owd::generate_task_splits(full, schedule);
    for (std::size_t t = 0; t < splits.size(); ++t) {
        const double fraction = schedule.tasks[t].fraction;
        const owd::DatasetManifest task = owd::partial_label_split(
            splits[t], fraction, owd::derive_seed(seed, "split" + std::to_string(t + 1)));
        const auto path = fs::path(out_dir) / ("task_" + std::to_string(t + 1) + ".json");
        owd::save_manifest(task, path.string());
        std::cout << "task " << t + 1 << ": " << task.images.size() << " images, "
                  << task.labeled_ids.size() << " labeled, " << task.unlabeled_ids.size()
                  << " unlabeled -> " << path.string() << "\n";
    }
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& schedule_path,
              const std::string& splits_dir, const std::string& eval_path, int task,
              const std::string& checkpoint_dir, bool resume) {
    const owd::RunConfig config =
        owd::run_config_from_json(owd::detail::load_json_file(config_path));
    const owd::TaskSchedule schedule = owd::load_schedule(schedule_path);

    if (resume && fs::exists(fs::path(owd::checkpoint_dir(checkpoint_dir, task)) / "state.json")) {
        std::cout << "task " << task << " checkpoint already present, skipping\n";
        return 0;
    }

    owd::TaskRunInput input;
    input.train = owd::load_manifest(
        (fs::path(splits_dir) / ("task_" + std::to_string(task) + ".json")).string());
    input.eval = owd::load_manifest(eval_path);

    std::optional<owd::DetectorState> prior;
    if (task >= 2) {
        const fs::path prev(owd::checkpoint_dir(checkpoint_dir, task - 1));
        if (!fs::exists(prev / "state.json"))
            throw owd::protocol_error("task " + std::to_string(task) + " requires the task " +
                                      std::to_string(task - 1) + " checkpoint under " +
                                      checkpoint_dir);
        prior = owd::load_task_checkpoint(checkpoint_dir, task - 1).state;
    }

    const owd::TaskResult result =
        owd::run_task(task, schedule, prior ? &*prior : nullptr, config, input);
    owd::save_task_checkpoint(checkpoint_dir, task, result, config);

    // One JSON record per optimization step, line-delimited.
    std::ofstream log(fs::path(owd::checkpoint_dir(checkpoint_dir, task)) / "log.jsonl");
    for (const auto& s : result.log)
        log << json{{"l_c", s.l_c},
                    {"l_r", s.l_r},
                    {"l_o", s.l_o},
                    {"l_cur", s.l_cur},
                    {"total", s.total}}
                   .dump()
            << "\n";

    const auto& r = result.report;
    std::cout << "task " << task << " prev " << format_metric(r.map_prev) << " cur "
              << format_metric(r.map_cur) << " both " << format_metric(r.map_both);
    if (r.u_recall_applicable) std::cout << " u-recall " << format_metric(r.u_recall);
    std::cout << "\n";
    return 0;
}

int cmd_eval(const std::string& checkpoint_root, int task, const std::string& schedule_path,
             const std::string& manifest_path, const std::string& out_path,
             const std::string& detections_path) {
    const owd::TaskCheckpoint ckpt = owd::load_task_checkpoint(checkpoint_root, task);
    const owd::DatasetManifest manifest = owd::load_manifest(manifest_path);
    const owd::TaskSchedule schedule = owd::load_schedule(schedule_path);
    const owd::KnownClassRegistry registry =
        owd::make_registry(schedule, manifest.class_names, task);

    owd::EvalOptions options;
    options.iou_threshold = ckpt.config.iou_threshold;
    options.top_k = ckpt.config.eval_top_k;
    options.fingerprint = owd::config_fingerprint(ckpt.config);
    const owd::EvaluationRun run =
        owd::evaluate_detector(ckpt.state, registry, manifest, options);

    owd::detail::write_json_file(out_path, owd::metric_report_to_json(run.report));
    if (!detections_path.empty())
        owd::detail::write_json_file(detections_path, owd::detections_to_json(run.detections));
    std::cout << "task " << task << " both " << format_metric(run.report.map_both) << " -> "
              << out_path << "\n";
    return 0;
}

int cmd_report(const std::vector<std::string>& run_paths, const std::vector<std::string>& labels,
               const std::string& out_path) {
    if (!labels.empty() && labels.size() != run_paths.size())
        throw owd::parameter_error("report: --labels must match --runs in count");
    json grid;
    grid["columns"] = {"name", "task", "prev", "cur", "both", "u_recall"};
    grid["rows"] = json::array();
    std::printf("%-28s %5s %8s %8s %8s %9s\n", "run", "task", "prev", "cur", "both", "u-recall");
    for (std::size_t i = 0; i < run_paths.size(); ++i) {
        const owd::MetricReport r =
            owd::metric_report_from_json(owd::detail::load_json_file(run_paths[i]));
        const std::string name = labels.empty() ? row_name(run_paths[i]) : labels[i];
        json row;
        row["name"] = name;
        row["task"] = r.task;
        row["prev"] = metric_or_null(r.map_prev);
        row["cur"] = metric_or_null(r.map_cur);
        row["both"] = metric_or_null(r.map_both);
        row["u_recall"] = r.u_recall_applicable ? metric_or_null(r.u_recall) : json(nullptr);
        row["fingerprint"] = r.fingerprint;
        grid["rows"].push_back(row);
        std::printf("%-28s %5d %8s %8s %8s %9s\n", name.c_str(), r.task,
                    format_metric(r.map_prev).c_str(), format_metric(r.map_cur).c_str(),
                    format_metric(r.map_both).c_str(),
                    r.u_recall_applicable ? format_metric(r.u_recall).c_str() : "-");
    }
    owd::detail::write_json_file(out_path, grid);
    return 0;
}

// ---- SVG plotting ----

struct SvgCanvas {
    std::string body;
    int width = 0, height = 0;

    void rect(double x, double y, double w, double h, const std::string& fill) {
        char buf[256];
        std::snprintf(buf, sizeof(buf),
                      "<rect x='%.1f' y='%.1f' width='%.1f' height='%.1f' fill='%s'/>\n", x, y, w,
                      h, fill.c_str());
        body += buf;
    }
    void line(double x1, double y1, double x2, double y2, const std::string& stroke) {
        char buf[256];
        std::snprintf(buf, sizeof(buf),
                      "<line x1='%.1f' y1='%.1f' x2='%.1f' y2='%.1f' stroke='%s'/>\n", x1, y1, x2,
                      y2, stroke.c_str());
        body += buf;
    }
    void text(double x, double y, const std::string& s, int size = 12) {
        char buf[384];
        std::snprintf(buf, sizeof(buf),
                      "<text x='%.1f' y='%.1f' font-size='%d' font-family='monospace'>%s</text>\n",
                      x, y, size, s.c_str());
        body += buf;
    }
    void polyline(const std::vector<std::pair<double, double>>& pts, const std::string& stroke) {
        std::string d = "<polyline fill='none' stroke='" + stroke + "' stroke-width='1.5' points='";
        char buf[64];
        for (const auto& [x, y] : pts) {
            std::snprintf(buf, sizeof(buf), "%.1f,%.1f ", x, y);
            d += buf;
        }
        d += "'/>\n";
        body += d;
    }
    std::string render() const {
        char head[160];
        std::snprintf(head, sizeof(head),
                      "<svg xmlns='http://www.w3.org/2000/svg' width='%d' height='%d' "
                      "viewBox='0 0 %d %d'>\n",
                      width, height, width, height);
        return std::string(head) + "<rect width='100%' height='100%' fill='white'/>\n" + body +
               "</svg>\n";
    }
};

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw owd::data_error("cannot write " + path);
    out << text;
}

int plot_report(const std::string& report_path, const std::string& out_path) {
    const json grid = owd::detail::load_json_file(report_path);
    if (!grid.contains("rows") || !grid.at("rows").is_array() || grid.at("rows").empty())
        throw owd::data_error("plot: report has no rows");
    const auto& rows = grid.at("rows");

    const int row_h = 64, left = 200, chart_w = 360;
    SvgCanvas svg;
    svg.width = left + chart_w + 80;
    svg.height = row_h * static_cast<int>(rows.size()) + 40;
    svg.text(left, 20, "mAP (prev / cur / both, x100)", 13);
    const char* fills[3] = {"#b7c7de", "#6d95c4", "#27548a"};
    const char* keys[3] = {"prev", "cur", "both"};
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& row = rows[i];
        const double y0 = 34.0 + static_cast<double>(i) * row_h;
        svg.text(10, y0 + 24, row.value("name", std::string("run")), 12);
        for (int k = 0; k < 3; ++k) {
            if (!row.contains(keys[k]) || row.at(keys[k]).is_null()) continue;
            const double v = row.at(keys[k]).get<double>();
            const double w = chart_w * std::min(1.0, std::max(0.0, v / 100.0));
            svg.rect(left, y0 + k * 14.0, w, 10.0, fills[k]);
            svg.text(left + w + 6, y0 + k * 14.0 + 9, format_metric(v / 100.0), 10);
        }
        if (row.contains("u_recall") && !row.at("u_recall").is_null())
            svg.text(left, y0 + 56,
                     "u-recall " + format_metric(row.at("u_recall").get<double>() / 100.0), 10);
    }
    write_text_file(out_path, svg.render());
    std::cout << "wrote " << out_path << "\n";
    return 0;
}

int plot_log(const std::string& log_path, const std::string& out_path) {
    // Accepts the checkpoint's log.json array or a log.jsonl stream.
    std::vector<json> steps;
    if (fs::path(log_path).extension() == ".jsonl") {
        std::ifstream in(log_path);
        if (!in) throw owd::data_error("cannot read " + log_path);
        std::string line;
        while (std::getline(in, line))
            if (!line.empty()) steps.push_back(json::parse(line, nullptr, true));
    } else {
        const json arr = owd::detail::load_json_file(log_path);
        if (!arr.is_array()) throw owd::data_error("plot: log must be an array of steps");
        for (const auto& s : arr) steps.push_back(s);
    }
    if (steps.empty()) throw owd::data_error("plot: log has no steps");

    const char* keys[5] = {"total", "l_c", "l_r", "l_o", "l_cur"};
    const char* strokes[5] = {"#1f1f1f", "#c23b22", "#2e7d32", "#f9a825", "#5e35b1"};
    double lo = 0.0, hi = 1e-12;
    for (const auto& s : steps)
        for (const char* k : keys)
            if (s.contains(k)) hi = std::max(hi, s.at(k).get<double>());

    const int left = 50, top = 20, w = 560, h = 260;
    SvgCanvas svg;
    svg.width = left + w + 110;
    svg.height = top + h + 40;
    svg.line(left, top, left, top + h, "#444444");
    svg.line(left, top + h, left + w, top + h, "#444444");
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.3f", hi);
    svg.text(6, top + 10, buf, 10);
    svg.text(6, top + h, "0", 10);
    std::snprintf(buf, sizeof(buf), "steps: %zu", steps.size());
    svg.text(left + w - 80, top + h + 26, buf, 10);
    for (int k = 0; k < 5; ++k) {
        std::vector<std::pair<double, double>> pts;
        for (std::size_t i = 0; i < steps.size(); ++i) {
            if (!steps[i].contains(keys[k])) continue;
            const double v = steps[i].at(keys[k]).get<double>();
            const double x = left + (steps.size() == 1
                                         ? 0.0
                                         : w * static_cast<double>(i) / (steps.size() - 1));
            const double y = top + h - h * std::min(1.0, std::max(0.0, (v - lo) / (hi - lo)));
            pts.emplace_back(x, y);
        }
        if (pts.empty()) continue;
        svg.polyline(pts, strokes[k]);
        svg.text(left + w + 8, top + 14 + 16 * k, keys[k], 11);
        svg.line(left + w + 60, top + 10 + 16 * k, left + w + 100, top + 10 + 16 * k, strokes[k]);
    }
    write_text_file(out_path, svg.render());
    std::cout << "wrote " << out_path << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale semi-supervised open-world detection lab"};
    app.require_subcommand(1);

    std::string manifest_path, synthetic_path, schedule_path, out_path;
    double fraction_override = 0.0;
    std::uint64_t seed = 0;
    auto* split = app.add_subcommand("split", "build per-task manifests from a schedule");
    auto* split_manifest = split->add_option("--manifest", manifest_path, "dataset manifest JSON");
    auto* split_synth =
        split->add_option("--synthetic", synthetic_path, "synthetic generator config JSON");
    split_manifest->excludes(split_synth);
    split->add_option("--schedule", schedule_path, "task schedule JSON")->required();
    split->add_option("--fraction", fraction_override,
                      "override every task's labeled fraction (0 keeps the schedule)");
    split->add_option("--seed", seed, "split selection seed");
    split->add_option("--out", out_path, "output directory")->required();

    std::string config_path, splits_dir, eval_path, checkpoint_root, detections_path;
    int task = 1;
    bool resume = false;
    auto* train = app.add_subcommand("train", "run one task of the protocol");
    train->add_option("--config", config_path, "run config JSON")->required();
    train->add_option("--schedule", schedule_path, "task schedule JSON")->required();
    train->add_option("--splits", splits_dir, "directory produced by split")->required();
    train->add_option("--eval", eval_path, "evaluation manifest JSON")->required();
    train->add_option("--task", task, "1-based task index")->required();
    train->add_option("--checkpoints", checkpoint_root, "checkpoint directory")->required();
    train->add_flag("--resume", resume, "skip if this task's checkpoint already exists");

    auto* eval = app.add_subcommand("eval", "re-evaluate a checkpoint");
    eval->add_option("--checkpoint", checkpoint_root, "checkpoint directory")->required();
    eval->add_option("--task", task, "task index of the checkpoint")->required();
    eval->add_option("--schedule", schedule_path, "task schedule JSON")->required();
    eval->add_option("--manifest", manifest_path, "evaluation manifest JSON")->required();
    eval->add_option("--out", out_path, "metric report output path")->required();
    eval->add_option("--detections", detections_path, "optional detections JSON output");

    std::vector<std::string> run_paths, labels;
    auto* report = app.add_subcommand("report", "merge metric reports into a grid");
    report->add_option("--runs", run_paths, "metric report JSON files")->required()->expected(-1);
    report->add_option("--labels", labels, "row names, one per run");
    report->add_option("--out", out_path, "grid JSON output path")->required();

    std::string report_path, log_path;
    auto* plot = app.add_subcommand("plot", "render a report grid or loss log as SVG");
    auto* plot_report_opt = plot->add_option("--report", report_path, "grid JSON from report");
    auto* plot_log_opt = plot->add_option("--log", log_path, "log.json or log.jsonl from train");
    plot_report_opt->excludes(plot_log_opt);
    plot->add_option("--out", out_path, "SVG output path")->required();

    try {
        app.parse(argc, argv);
        if (split->parsed()) {
            if (manifest_path.empty() && synthetic_path.empty())
                throw CLI::RequiredError("--manifest or --synthetic");
            return cmd_split(manifest_path, synthetic_path, schedule_path, fraction_override,
                             seed, out_path);
        }
        if (train->parsed())
            return cmd_train(config_path, schedule_path, splits_dir, eval_path, task,
                             checkpoint_root, resume);
        if (eval->parsed())
            return cmd_eval(checkpoint_root, task, schedule_path, manifest_path, out_path,
                            detections_path);
        if (report->parsed()) return cmd_report(run_paths, labels, out_path);
        if (plot->parsed()) {
            if (report_path.empty() && log_path.empty())
                throw CLI::RequiredError("--report or --log");
            return report_path.empty() ? plot_log(log_path, out_path)
                                       : plot_report(report_path, out_path);
        }
        return 2;
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const owd::parameter_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const owd::data_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const owd::protocol_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
