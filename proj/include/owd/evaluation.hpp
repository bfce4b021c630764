#pragma once

// Open-world detection metrics. Known classes are scored with per-class
// average precision (greedy score-descending matching, all-point
// interpolated PR curve); unknowns have no exhaustive ground truth, so they
// are scored by recall alone. The registry fixes which classes count as
// previous/current/unknown at each task.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "owd/common.hpp"
#include "owd/data.hpp"
#include "owd/geometry.hpp"

namespace owd {

// Cumulative known-class bookkeeping for a 1-based task index. Groups hold
// global dataset class ids in schedule order; the model's classifier columns
// follow the concatenated known list, with UNKNOWN as the extra last column.
struct KnownClassRegistry {
    std::vector<std::vector<int>> groups;
    int task = 1;

    void validate() const {
        if (groups.empty()) throw protocol_error("registry: no class groups");
        if (task < 1 || task > static_cast<int>(groups.size()))
            throw protocol_error("registry: task " + std::to_string(task) + " outside 1.." +
                                 std::to_string(groups.size()));
        std::set<int> seen;
        for (const auto& g : groups) {
            if (g.empty()) throw protocol_error("registry: empty class group");
            for (int c : g) {
                if (c < 0) throw protocol_error("registry: negative class id");
                if (!seen.insert(c).second)
                    throw protocol_error("registry: class " + std::to_string(c) +
                                         " appears in two groups");
            }
        }
    }

    std::vector<int> previous_classes() const {
        std::vector<int> out;
        for (int t = 0; t + 1 < task; ++t)
            out.insert(out.end(), groups[static_cast<std::size_t>(t)].begin(),
                       groups[static_cast<std::size_t>(t)].end());
        return out;
    }
    const std::vector<int>& current_classes() const {
        return groups[static_cast<std::size_t>(task - 1)];
    }
    std::vector<int> known_classes() const {
        std::vector<int> out = previous_classes();
        out.insert(out.end(), current_classes().begin(), current_classes().end());
        return out;
    }
    int num_known() const {
        int n = 0;
        for (int t = 0; t < task; ++t) n += static_cast<int>(groups[static_cast<std::size_t>(t)].size());
        return n;
    }
    bool is_final_task() const { return task == static_cast<int>(groups.size()); }
    int unknown_model_index() const { return num_known(); }

    // Group index a class id is scheduled in, or -1 if never scheduled.
    int group_of(int label) const {
        for (std::size_t t = 0; t < groups.size(); ++t)
            for (int c : groups[t])
                if (c == label) return static_cast<int>(t);
        return -1;
    }
    bool is_known(int label) const {
        const int g = group_of(label);
        return g >= 0 && g < task;
    }

    // Classifier column for a known class id, in known_classes() order.
    int model_index(int label) const {
        int i = 0;
        for (int t = 0; t < task; ++t)
            for (int c : groups[static_cast<std::size_t>(t)]) {
                if (c == label) return i;
                ++i;
            }
        throw protocol_error("registry: class " + std::to_string(label) + " is not known at task " +
                             std::to_string(task));
    }
    // Inverse: column -> class id; the last column is UNKNOWN.
    int label_at(int model_index) const {
        if (model_index == num_known()) return kUnknownLabel;
        int i = 0;
        for (int t = 0; t < task; ++t)
            for (int c : groups[static_cast<std::size_t>(t)]) {
                if (i == model_index) return c;
                ++i;
            }
        throw protocol_error("registry: model index " + std::to_string(model_index) +
                             " outside classifier");
    }
};

// Registry from a named schedule: class names resolve through `class_names`;
// scheduled names absent from the dataset are skipped, as in split building.
inline KnownClassRegistry make_registry(const TaskSchedule& schedule,
                                        const std::vector<std::string>& class_names, int task) {
    schedule.validate();
    auto index_of = [&](const std::string& name) {
        for (std::size_t i = 0; i < class_names.size(); ++i)
            if (class_names[i] == name) return static_cast<int>(i);
        return -1;
    };
    KnownClassRegistry r;
    r.task = task;
    for (const auto& t : schedule.tasks) {
        std::vector<int> ids;
        for (const auto& name : t.classes) {
            const int idx = index_of(name);
            if (idx >= 0) ids.push_back(idx);
        }
        if (ids.empty())
            throw protocol_error("registry: no scheduled class of a group exists in the dataset");
        r.groups.push_back(std::move(ids));
    }
    r.validate();
    return r;
}

// Evaluation-time label view at task t: known labels kept, labels scheduled
// for a later task become UNKNOWN, labels outside the schedule are dropped.
inline std::vector<InstanceAnnotation> remap_for_eval(const std::vector<InstanceAnnotation>& anns,
                                                      const KnownClassRegistry& registry) {
    registry.validate();
    std::vector<InstanceAnnotation> out;
    out.reserve(anns.size());
    for (const InstanceAnnotation& a : anns) {
        if (a.label == kUnknownLabel) {
            out.push_back(a);
            continue;
        }
        const int g = registry.group_of(a.label);
        if (g < 0) continue;
        InstanceAnnotation r = a;
        if (g >= registry.task) r.label = kUnknownLabel;
        out.push_back(r);
    }
    return out;
}

struct DetectionRecord {
    int image_id = 0;
    int label = 0;  // global class id, or kUnknownLabel
    double score = 0.0;
    OrientedBox box;  // theta 0 for axis-aligned use
};

namespace detail {

inline double eval_iou(const OrientedBox& a, const OrientedBox& b, bool oriented) {
    return oriented ? oriented_iou(a, b) : iou(a.axis_aligned(), b.axis_aligned());
}

inline void require_valid_threshold(double iou_threshold) {
    if (!(iou_threshold > 0.0 && iou_threshold <= 1.0))
        throw parameter_error("iou threshold must lie in (0,1], got " +
                              std::to_string(iou_threshold));
}

// Score-descending greedy one-to-one matching of `dets` against `gts`
// (both already filtered to one label). Ties break on image id, then on
// input order, so results are deterministic. Each det matches the
// highest-IoU unmatched ground truth of its image, or none.
struct GreedyOutcome {
    std::vector<bool> is_tp;  // per det, in ranked order
    int matched_gts = 0;
};

inline GreedyOutcome greedy_match(const std::vector<DetectionRecord>& dets,
                                  const std::vector<InstanceAnnotation>& gts,
                                  double iou_threshold, bool oriented) {
    for (const auto& d : dets)
        if (!std::isfinite(d.score)) throw data_error("detection score must be finite");

    std::vector<int> order(dets.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        const auto& da = dets[static_cast<std::size_t>(a)];
        const auto& db = dets[static_cast<std::size_t>(b)];
        if (da.score != db.score) return da.score > db.score;
        return da.image_id < db.image_id;
    });

    std::map<int, std::vector<int>> gts_of_image;
    for (std::size_t i = 0; i < gts.size(); ++i)
        gts_of_image[gts[i].image_id].push_back(static_cast<int>(i));
    std::vector<bool> taken(gts.size(), false);

    GreedyOutcome out;
    out.is_tp.reserve(dets.size());
    for (int di : order) {
        const DetectionRecord& d = dets[static_cast<std::size_t>(di)];
        int best = -1;
        double best_iou = 0.0;
        const auto it = gts_of_image.find(d.image_id);
        if (it != gts_of_image.end())
            for (int gi : it->second) {
                if (taken[static_cast<std::size_t>(gi)]) continue;
                const double v =
                    eval_iou(d.box, gts[static_cast<std::size_t>(gi)].box, oriented);
                if (v >= iou_threshold && v > best_iou) {
                    best_iou = v;
                    best = gi;
                }
            }
        if (best >= 0) {
            taken[static_cast<std::size_t>(best)] = true;
            out.matched_gts += 1;
        }
        out.is_tp.push_back(best >= 0);
    }
    return out;
}

}  // namespace detail

// Average precision of one class at a fixed IoU threshold. Empty ground
// truth for the class makes AP undefined (nullopt); callers exclude those
// classes from mAP means.
inline std::optional<double> average_precision(const std::vector<DetectionRecord>& dets,
                                               const std::vector<InstanceAnnotation>& gts,
                                               int class_id, double iou_threshold = 0.5,
                                               bool oriented = false) {
    detail::require_valid_threshold(iou_threshold);
    std::vector<InstanceAnnotation> gts_c;
    for (const auto& g : gts)
        if (g.label == class_id) gts_c.push_back(g);
    if (gts_c.empty()) return std::nullopt;

    std::vector<DetectionRecord> dets_c;
    for (const auto& d : dets)
        if (d.label == class_id) dets_c.push_back(d);
    if (dets_c.empty()) return 0.0;

    const detail::GreedyOutcome m = detail::greedy_match(dets_c, gts_c, iou_threshold, oriented);
    const int n = static_cast<int>(m.is_tp.size());
    const double num_gt = static_cast<double>(gts_c.size());
    std::vector<double> recall(static_cast<std::size_t>(n)), precision(static_cast<std::size_t>(n));
    int cum_tp = 0;
    for (int i = 0; i < n; ++i) {
        cum_tp += m.is_tp[static_cast<std::size_t>(i)] ? 1 : 0;
        recall[static_cast<std::size_t>(i)] = cum_tp / num_gt;
        precision[static_cast<std::size_t>(i)] = static_cast<double>(cum_tp) / (i + 1);
    }
    // Monotone (all-point) interpolation: envelope from the right, then sum
    // precision over recall increments.
    for (int i = n - 2; i >= 0; --i)
        precision[static_cast<std::size_t>(i)] =
            std::max(precision[static_cast<std::size_t>(i)], precision[static_cast<std::size_t>(i + 1)]);
    double ap = 0.0, prev_recall = 0.0;
    for (int i = 0; i < n; ++i)
        if (recall[static_cast<std::size_t>(i)] > prev_recall) {
            ap += (recall[static_cast<std::size_t>(i)] - prev_recall) * precision[static_cast<std::size_t>(i)];
            prev_recall = recall[static_cast<std::size_t>(i)];
        }
    return ap;
}

// Fraction of UNKNOWN ground truths covered by at least one UNKNOWN
// detection at the IoU threshold. Undefined when there are no unknown GTs.
inline std::optional<double> unknown_recall(const std::vector<DetectionRecord>& dets,
                                            const std::vector<InstanceAnnotation>& gts,
                                            double iou_threshold = 0.5, bool oriented = false) {
    detail::require_valid_threshold(iou_threshold);
    std::vector<InstanceAnnotation> gts_u;
    for (const auto& g : gts)
        if (g.label == kUnknownLabel) gts_u.push_back(g);
    if (gts_u.empty()) return std::nullopt;

    std::vector<DetectionRecord> dets_u;
    for (const auto& d : dets)
        if (d.label == kUnknownLabel) dets_u.push_back(d);
    if (dets_u.empty()) return 0.0;

    const detail::GreedyOutcome m = detail::greedy_match(dets_u, gts_u, iou_threshold, oriented);
    return static_cast<double>(m.matched_gts) / static_cast<double>(gts_u.size());
}

struct EvalOptions {
    double iou_threshold = 0.5;
    bool oriented = false;
    int top_k = 0;  // recorded for reproducibility; 0 means "all queries"
    std::string fingerprint;
};

struct MetricReport {
    int task = 1;
    std::string fingerprint;
    double iou_threshold = 0.5;
    bool oriented = false;
    int top_k = 0;
    std::vector<std::pair<int, std::optional<double>>> per_class_ap;  // registry order
    std::optional<double> map_prev;
    std::optional<double> map_cur;
    std::optional<double> map_both;
    bool u_recall_applicable = false;  // false on the final task
    std::optional<double> u_recall;

    bool operator==(const MetricReport&) const = default;
};

// Per-class AP plus the Prev/Cur/Both means over the registry's known
// classes. `gts` must already be remapped for evaluation at this task.
// U-Recall attaches on every task but the final one.
inline MetricReport map_report(const std::vector<DetectionRecord>& dets,
                               const std::vector<InstanceAnnotation>& gts,
                               const KnownClassRegistry& registry, const EvalOptions& options = {}) {
    registry.validate();
    MetricReport report;
    report.task = registry.task;
    report.fingerprint = options.fingerprint;
    report.iou_threshold = options.iou_threshold;
    report.oriented = options.oriented;
    report.top_k = options.top_k;

    std::map<int, std::optional<double>> ap_of;
    for (int c : registry.known_classes()) {
        const auto ap = average_precision(dets, gts, c, options.iou_threshold, options.oriented);
        report.per_class_ap.emplace_back(c, ap);
        ap_of[c] = ap;
    }
    const auto mean_over = [&](const std::vector<int>& classes) -> std::optional<double> {
        double sum = 0.0;
        int count = 0;
        for (int c : classes)
            if (ap_of[c].has_value()) {
                sum += *ap_of[c];
                count += 1;
            }
        if (count == 0) return std::nullopt;
        return sum / count;
    };
    report.map_prev = mean_over(registry.previous_classes());
    report.map_cur = mean_over(registry.current_classes());
    report.map_both = mean_over(registry.known_classes());

    report.u_recall_applicable = !registry.is_final_task();
    if (report.u_recall_applicable)
        report.u_recall = unknown_recall(dets, gts, options.iou_threshold, options.oriented);
    return report;
}

inline nlohmann::json metric_report_to_json(const MetricReport& r) {
    nlohmann::json j;
    j["task"] = r.task;
    j["fingerprint"] = r.fingerprint;
    j["iou_threshold"] = r.iou_threshold;
    j["oriented"] = r.oriented;
    j["top_k"] = r.top_k;
    j["interpolation"] = "all_point";
    j["per_class_ap"] = nlohmann::json::array();
    for (const auto& [c, ap] : r.per_class_ap) {
        nlohmann::json e;
        e["class"] = c;
        e["ap"] = ap.has_value() ? nlohmann::json(*ap) : nlohmann::json(nullptr);
        j["per_class_ap"].push_back(e);
    }
    const auto put = [&](const char* key, const std::optional<double>& v) {
        j[key] = v.has_value() ? nlohmann::json(*v) : nlohmann::json(nullptr);
    };
    put("map_prev", r.map_prev);
    put("map_cur", r.map_cur);
    put("map_both", r.map_both);
    if (r.u_recall_applicable) put("u_recall", r.u_recall);
    return j;
}

inline MetricReport metric_report_from_json(const nlohmann::json& j) {
    MetricReport r;
    try {
        r.task = j.at("task").get<int>();
        r.fingerprint = j.value("fingerprint", std::string());
        r.iou_threshold = j.at("iou_threshold").get<double>();
        r.oriented = j.value("oriented", false);
        r.top_k = j.value("top_k", 0);
        for (const auto& e : j.at("per_class_ap")) {
            std::optional<double> ap;
            if (!e.at("ap").is_null()) ap = e.at("ap").get<double>();
            r.per_class_ap.emplace_back(e.at("class").get<int>(), ap);
        }
        const auto get = [&](const char* key) -> std::optional<double> {
            if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
            return j.at(key).get<double>();
        };
        r.map_prev = get("map_prev");
        r.map_cur = get("map_cur");
        r.map_both = get("map_both");
        r.u_recall_applicable = j.contains("u_recall");
        r.u_recall = get("u_recall");
    } catch (const nlohmann::json::exception& e) {
        throw data_error(std::string("metric report JSON: ") + e.what());
    }
    return r;
}

// COCO-results-shaped export: one object per detection, normalized
// [x0, y0, w, h] corner boxes plus theta for oriented runs.
inline nlohmann::json detections_to_json(const std::vector<DetectionRecord>& dets) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& d : dets) {
        if (!std::isfinite(d.score)) throw data_error("detection score must be finite");
        nlohmann::json e;
        e["image_id"] = d.image_id;
        e["category_id"] = d.label;
        e["score"] = d.score;
        e["bbox"] = {d.box.cx - d.box.w / 2, d.box.cy - d.box.h / 2, d.box.w, d.box.h};
        e["theta"] = d.box.theta;
        arr.push_back(e);
    }
    return arr;
}

inline std::vector<DetectionRecord> detections_from_json(const nlohmann::json& arr) {
    std::vector<DetectionRecord> out;
    try {
        for (const auto& e : arr) {
            DetectionRecord d;
            d.image_id = e.at("image_id").get<int>();
            d.label = e.at("category_id").get<int>();
            d.score = e.at("score").get<double>();
            const auto& b = e.at("bbox");
            d.box.w = b.at(2).get<double>();
            d.box.h = b.at(3).get<double>();
            d.box.cx = b.at(0).get<double>() + d.box.w / 2;
            d.box.cy = b.at(1).get<double>() + d.box.h / 2;
            d.box.theta = e.value("theta", 0.0);
            if (!std::isfinite(d.score)) throw data_error("detection score must be finite");
            out.push_back(d);
        }
    } catch (const nlohmann::json::exception& e) {
        throw data_error(std::string("detections JSON: ") + e.what());
    }
    return out;
}

}  // namespace owd
