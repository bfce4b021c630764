#pragma once

// Incremental open-world task orchestration. Task 1 trains supervised on its
// class group; each later task extends the classifier, freezes a detached
// copy of the previous model, runs the semi-supervised alignment phase over
// all task data, fine-tunes on the task's labeled subset, and evaluates.
// Dataset labels are global class ids; the registry maps them to classifier
// columns, and inference maps columns back.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "owd/alignment.hpp"
#include "owd/common.hpp"
#include "owd/data.hpp"
#include "owd/evaluation.hpp"
#include "owd/model.hpp"
#include "owd/optim.hpp"

namespace owd {

struct RunConfig {
    DetectorConfig detector;  // num_known_classes is overridden by the schedule
    TrainSettings train;
    int epochs = 50;
    int alignment_epochs = 40;  // remainder of `epochs` is the fine-tune phase
    int batch_size = 4;
    int eval_top_k = 0;  // 0 resolves to the query count
    double iou_threshold = 0.5;
    std::uint64_t master_seed = 0;

    void validate() const {
        detector.validate();
        if (epochs < 0) throw parameter_error("run config: epochs must be >= 0");
        if (alignment_epochs < 0 || alignment_epochs > epochs)
            throw parameter_error("run config: alignment epochs must lie in [0, epochs]");
        if (batch_size < 1) throw parameter_error("run config: batch size must be >= 1");
        if (eval_top_k < 0) throw parameter_error("run config: eval top_k must be >= 0");
        if (!(iou_threshold > 0.0 && iou_threshold <= 1.0))
            throw parameter_error("run config: iou threshold must lie in (0,1]");
    }
    int finetune_epochs() const { return epochs - alignment_epochs; }
};

inline nlohmann::json train_settings_to_json(const TrainSettings& t) {
    nlohmann::json j;
    j["optimizer"] = {{"lr", t.optimizer.lr},
                      {"beta1", t.optimizer.beta1},
                      {"beta2", t.optimizer.beta2},
                      {"eps", t.optimizer.eps},
                      {"weight_decay", t.optimizer.weight_decay}};
    j["loss"] = {{"alpha", t.loss.alpha},
                 {"l_cur_weight", t.loss.l_cur_weight},
                 {"background_coef", t.loss.background_coef},
                 {"angle_beta", t.loss.angle_beta}};
    j["pseudo"] = {{"k", t.pseudo.k},
                   {"overlap_threshold", t.pseudo.overlap_threshold},
                   {"aggregation", to_string(t.pseudo.aggregation)},
                   {"scorer", to_string(t.pseudo.scorer)}};
    j["augmentation"] = {{"color_jitter", t.augmentation.color_jitter},
                         {"gaussian_blur", t.augmentation.gaussian_blur},
                         {"greyscale", t.augmentation.greyscale},
                         {"posterize", t.augmentation.posterize},
                         {"solarize", t.augmentation.solarize},
                         {"jitter_prob", t.augmentation.jitter_prob},
                         {"jitter_strength", t.augmentation.jitter_strength},
                         {"blur_prob", t.augmentation.blur_prob},
                         {"blur_sigma_max", t.augmentation.blur_sigma_max},
                         {"grey_prob", t.augmentation.grey_prob},
                         {"posterize_prob", t.augmentation.posterize_prob},
                         {"posterize_bits", t.augmentation.posterize_bits},
                         {"solarize_prob", t.augmentation.solarize_prob},
                         {"solarize_threshold", t.augmentation.solarize_threshold}};
    j["lambda_offdiag"] = t.lambda_offdiag;
    j["pseudo_labels_enabled"] = t.pseudo_labels_enabled;
    j["pseudo_on_unlabeled"] = t.pseudo_on_unlabeled;
    return j;
}

inline TrainSettings train_settings_from_json(const nlohmann::json& j) {
    TrainSettings t;
    try {
        const auto& o = j.at("optimizer");
        t.optimizer.lr = o.at("lr").get<double>();
        t.optimizer.beta1 = o.at("beta1").get<double>();
        t.optimizer.beta2 = o.at("beta2").get<double>();
        t.optimizer.eps = o.at("eps").get<double>();
        t.optimizer.weight_decay = o.at("weight_decay").get<double>();
        const auto& l = j.at("loss");
        t.loss.alpha = l.at("alpha").get<double>();
        t.loss.l_cur_weight = l.at("l_cur_weight").get<double>();
        t.loss.background_coef = l.at("background_coef").get<double>();
        t.loss.angle_beta = l.at("angle_beta").get<double>();
        const auto& p = j.at("pseudo");
        t.pseudo.k = p.at("k").get<int>();
        t.pseudo.overlap_threshold = p.at("overlap_threshold").get<double>();
        t.pseudo.aggregation = scale_aggregation_from_string(p.at("aggregation").get<std::string>());
        t.pseudo.scorer = pseudo_scorer_from_string(p.at("scorer").get<std::string>());
        const auto& a = j.at("augmentation");
        t.augmentation.color_jitter = a.at("color_jitter").get<bool>();
        t.augmentation.gaussian_blur = a.at("gaussian_blur").get<bool>();
        t.augmentation.greyscale = a.at("greyscale").get<bool>();
        t.augmentation.posterize = a.at("posterize").get<bool>();
        t.augmentation.solarize = a.at("solarize").get<bool>();
        t.augmentation.jitter_prob = a.at("jitter_prob").get<double>();
        t.augmentation.jitter_strength = a.at("jitter_strength").get<double>();
        t.augmentation.blur_prob = a.at("blur_prob").get<double>();
        t.augmentation.blur_sigma_max = a.at("blur_sigma_max").get<double>();
        t.augmentation.grey_prob = a.at("grey_prob").get<double>();
        t.augmentation.posterize_prob = a.at("posterize_prob").get<double>();
        t.augmentation.posterize_bits = a.at("posterize_bits").get<int>();
        t.augmentation.solarize_prob = a.at("solarize_prob").get<double>();
        t.augmentation.solarize_threshold = a.at("solarize_threshold").get<double>();
        t.lambda_offdiag = j.at("lambda_offdiag").get<double>();
        t.pseudo_labels_enabled = j.at("pseudo_labels_enabled").get<bool>();
        t.pseudo_on_unlabeled = j.at("pseudo_on_unlabeled").get<bool>();
    } catch (const nlohmann::json::exception& e) {
        throw data_error(std::string("train settings JSON: ") + e.what());
    }
    return t;
}

inline nlohmann::json run_config_to_json(const RunConfig& c) {
    nlohmann::json j;
    j["detector"] = detector_config_to_json(c.detector);
    j["train"] = train_settings_to_json(c.train);
    j["epochs"] = c.epochs;
    j["alignment_epochs"] = c.alignment_epochs;
    j["batch_size"] = c.batch_size;
    j["eval_top_k"] = c.eval_top_k;
    j["iou_threshold"] = c.iou_threshold;
    j["master_seed"] = c.master_seed;
    return j;
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
    RunConfig c;
    try {
        c.detector = detector_config_from_json(j.at("detector"));
        c.train = train_settings_from_json(j.at("train"));
        c.epochs = j.at("epochs").get<int>();
        c.alignment_epochs = j.at("alignment_epochs").get<int>();
        c.batch_size = j.at("batch_size").get<int>();
        c.eval_top_k = j.value("eval_top_k", 0);
        c.iou_threshold = j.value("iou_threshold", 0.5);
        c.master_seed = j.at("master_seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw data_error(std::string("run config JSON: ") + e.what());
    }
    c.validate();
    return c;
}

// nlohmann objects iterate in sorted key order, so the dump is canonical.
inline std::string config_fingerprint(const RunConfig& c) {
    const std::string text = run_config_to_json(c).dump();
    const std::uint64_t h = fnv1a(text.data(), text.size());
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

// Independent seed stream per named stage of a run.
inline std::uint64_t derive_seed(std::uint64_t master, const std::string& tag) {
    std::uint64_t h = fnv1a(&master, sizeof(master));
    return fnv1a(tag.data(), tag.size(), h);
}

// Top-k inference. Per query: label = argmax column (UNKNOWN is the last
// column), score = that softmax probability times the objectness. Columns
// translate to global class ids through the registry.
inline std::vector<DetectionRecord> infer(const DetectorState& state,
                                          const KnownClassRegistry& registry, const Image& image,
                                          int top_k) {
    registry.validate();
    const int m = state.config.num_queries;
    if (top_k < 1 || top_k > m)
        throw parameter_error("infer: top_k must lie in 1.." + std::to_string(m) + ", got " +
                              std::to_string(top_k));
    if (registry.num_known() != state.config.num_known_classes)
        throw protocol_error("infer: registry knows " + std::to_string(registry.num_known()) +
                             " classes but the classifier has " +
                             std::to_string(state.config.num_known_classes));

    const ForwardOutput out = forward(state, image);
    const int width = state.config.classifier_width();
    std::vector<DetectionRecord> all;
    all.reserve(static_cast<std::size_t>(m));
    for (int q = 0; q < m; ++q) {
        double maxlog = out.class_logits.at(q, 0);
        int arg = 0;
        for (int c = 1; c < width; ++c)
            if (out.class_logits.at(q, c) > maxlog) {
                maxlog = out.class_logits.at(q, c);
                arg = c;
            }
        double denom = 0.0;
        for (int c = 0; c < width; ++c) denom += std::exp(out.class_logits.at(q, c) - maxlog);
        const double prob = 1.0 / denom;
        const double obj = 1.0 / (1.0 + std::exp(-out.objectness_logits.at(q, 0)));
        DetectionRecord d;
        d.image_id = 0;
        d.label = registry.label_at(arg);
        d.score = prob * obj;
        if (state.config.oriented) {
            d.box = out.oriented_box(q);
        } else {
            const Box b = out.box(q);
            d.box = OrientedBox{b.cx, b.cy, b.w, b.h, 0.0};
        }
        all.push_back(d);
    }
    std::vector<int> order(all.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return all[static_cast<std::size_t>(a)].score >
                                                all[static_cast<std::size_t>(b)].score; });
    std::vector<DetectionRecord> top;
    top.reserve(static_cast<std::size_t>(top_k));
    for (int i = 0; i < top_k; ++i) top.push_back(all[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]);
    return top;
}

struct EvaluationRun {
    std::vector<DetectionRecord> detections;
    MetricReport report;
};

// Inference over every image of a manifest followed by map_report. The
// oriented flag and top_k come from the state; ground truth is remapped to
// the registry's task view.
inline EvaluationRun evaluate_detector(const DetectorState& state,
                                       const KnownClassRegistry& registry,
                                       const DatasetManifest& manifest, EvalOptions options) {
    manifest.validate();
    const int top_k = options.top_k == 0 ? state.config.num_queries : options.top_k;
    options.top_k = top_k;
    options.oriented = state.config.oriented;

    EvaluationRun run;
    for (const ImageRecord& im : manifest.images) {
        const Image image = load_image(manifest, im.id);
        std::vector<DetectionRecord> dets = infer(state, registry, image, top_k);
        for (auto& d : dets) d.image_id = im.id;
        run.detections.insert(run.detections.end(), dets.begin(), dets.end());
    }
    const std::vector<InstanceAnnotation> gts = remap_for_eval(manifest.annotations, registry);
    run.report = map_report(run.detections, gts, registry, options);
    return run;
}

struct TaskRunInput {
    DatasetManifest train;  // labels restricted to the task's class group
    DatasetManifest eval;   // full label space; remapped internally
};

struct TaskResult {
    DetectorState state;
    MappingNetwork g;
    MetricReport report;
    std::vector<StepStats> log;  // one record per optimization step
};

namespace detail {

// Labels arrive as global class ids; training wants classifier columns.
// Any label outside the current task's group is leakage.
inline DatasetManifest remap_train_labels(const DatasetManifest& manifest,
                                          const KnownClassRegistry& registry) {
    std::set<int> group(registry.current_classes().begin(), registry.current_classes().end());
    DatasetManifest out = manifest;
    for (auto& a : out.annotations) {
        if (!group.count(a.label))
            throw protocol_error("task " + std::to_string(registry.task) +
                                 " training data leaks label " + std::to_string(a.label));
        a.label = registry.model_index(a.label);
    }
    return out;
}

inline LabeledExample make_labeled(const DatasetManifest& manifest, int id) {
    LabeledExample ex;
    ex.image_id = id;
    ex.image = load_image(manifest, id);
    for (const InstanceAnnotation* a : manifest.annotations_for(id)) ex.gts.push_back(*a);
    return ex;
}

// Splits n items into `steps` contiguous chunks whose sizes differ by at
// most one; returns [start, end) bounds.
inline std::vector<std::pair<int, int>> chunk_bounds(int n, int steps) {
    std::vector<std::pair<int, int>> out;
    int start = 0;
    for (int s = 0; s < steps; ++s) {
        const int len = n / steps + (s < n % steps ? 1 : 0);
        out.emplace_back(start, start + len);
        start += len;
    }
    return out;
}

inline void alignment_phase(DetectorState& current, const DetectorState& detached,
                            MappingNetwork& g, const DatasetManifest& train, int epochs,
                            AdamW& optimizer, const TrainSettings& settings, int batch_size,
                            Rng& rng, std::vector<StepStats>& log) {
    const std::vector<int> labeled(train.labeled_ids.begin(), train.labeled_ids.end());
    const std::vector<int> unlabeled(train.unlabeled_ids.begin(), train.unlabeled_ids.end());
    if (labeled.empty() && unlabeled.empty()) throw data_error("alignment phase: no images");
    const int nl = static_cast<int>(labeled.size());
    const int nu = static_cast<int>(unlabeled.size());
    const int steps = std::max(1, std::max((nl + batch_size - 1) / batch_size,
                                           (nu + batch_size - 1) / batch_size));
    for (int e = 0; e < epochs; ++e) {
        std::vector<int> lorder = labeled, uorder = unlabeled;
        for (std::size_t i = lorder.size(); i > 1; --i)
            std::swap(lorder[i - 1], lorder[rng.uniform_index(i)]);
        for (std::size_t i = uorder.size(); i > 1; --i)
            std::swap(uorder[i - 1], uorder[rng.uniform_index(i)]);
        const auto lchunks = chunk_bounds(nl, steps);
        const auto uchunks = chunk_bounds(nu, steps);
        for (int s = 0; s < steps; ++s) {
            std::vector<LabeledExample> lbatch;
            for (int i = lchunks[static_cast<std::size_t>(s)].first;
                 i < lchunks[static_cast<std::size_t>(s)].second; ++i)
                lbatch.push_back(make_labeled(train, lorder[static_cast<std::size_t>(i)]));
            std::vector<UnlabeledExample> ubatch;
            for (int i = uchunks[static_cast<std::size_t>(s)].first;
                 i < uchunks[static_cast<std::size_t>(s)].second; ++i)
                ubatch.push_back(UnlabeledExample{
                    uorder[static_cast<std::size_t>(i)],
                    load_image(train, uorder[static_cast<std::size_t>(i)])});
            if (lbatch.empty() && ubatch.empty()) continue;
            log.push_back(semi_supervised_step(current, detached, g, lbatch, ubatch, optimizer,
                                               settings, rng));
        }
    }
}

}  // namespace detail

// One task of the protocol. Task 1 takes no prior state and trains
// supervised (semi-supervised from scratch when its label fraction < 1);
// tasks >= 2 require the previous task's state, which becomes the frozen
// alignment teacher.
inline TaskResult run_task(int t, const TaskSchedule& schedule, const DetectorState* prior,
                           const RunConfig& config, const TaskRunInput& input) {
    schedule.validate();
    config.validate();
    if (t < 1 || t > static_cast<int>(schedule.tasks.size()))
        throw parameter_error("run_task: task " + std::to_string(t) + " outside the schedule");
    input.train.validate();
    input.eval.validate();
    if (input.train.class_names != input.eval.class_names)
        throw data_error("run_task: train and eval manifests disagree on class names");

    const KnownClassRegistry registry = make_registry(schedule, input.train.class_names, t);
    const DatasetManifest train = detail::remap_train_labels(input.train, registry);
    const double fraction = schedule.tasks[static_cast<std::size_t>(t - 1)].fraction;

    TaskResult result;
    Rng rng(derive_seed(config.master_seed, "task" + std::to_string(t)));
    AdamW optimizer(config.train.optimizer);
    TrainSettings settings = config.train;
    result.g = init_mapping_network(config.detector.embed_dim,
                                    derive_seed(config.master_seed, "g" + std::to_string(t)));

    if (t == 1) {
        if (prior) throw protocol_error("run_task: task 1 takes no prior state");
        DetectorConfig cfg = config.detector;
        cfg.num_known_classes = registry.num_known();
        result.state = init_detector(cfg, derive_seed(config.master_seed, "init"));
        if (fraction < 1.0) {
            // Semi-supervised from the start: supervised warmup on the
            // labeled subset, then alignment against a detached snapshot.
            finetune_labeled(result.state, train, config.finetune_epochs(), optimizer, settings,
                             rng);
            const DetectorState detached = clone_detached(result.state);
            detail::alignment_phase(result.state, detached, result.g, train,
                                    config.alignment_epochs, optimizer, settings,
                                    config.batch_size, rng, result.log);
        } else {
            finetune_labeled(result.state, train, config.epochs, optimizer, settings, rng);
        }
    } else {
        if (!prior) throw protocol_error("run_task: task " + std::to_string(t) +
                                         " requires the task " + std::to_string(t - 1) +
                                         " checkpoint");
        if (prior->frozen) throw protocol_error("run_task: prior state is frozen");
        if (prior->config.embed_dim != config.detector.embed_dim)
            throw protocol_error("run_task: prior state embed dim disagrees with the config");
        KnownClassRegistry before = registry;
        before.task = t - 1;
        if (prior->config.num_known_classes != before.num_known())
            throw protocol_error("run_task: prior state knows " +
                                 std::to_string(prior->config.num_known_classes) +
                                 " classes, expected " + std::to_string(before.num_known()));

        const DetectorState detached = clone_detached(*prior);
        result.state =
            extend_known_classes(*prior, static_cast<int>(registry.current_classes().size()),
                                 derive_seed(config.master_seed, "extend" + std::to_string(t)));
        detail::alignment_phase(result.state, detached, result.g, train, config.alignment_epochs,
                                optimizer, settings, config.batch_size, rng, result.log);
        finetune_labeled(result.state, train, config.finetune_epochs(), optimizer, settings, rng);
    }

    EvalOptions options;
    options.iou_threshold = config.iou_threshold;
    options.top_k = config.eval_top_k;
    options.fingerprint = config_fingerprint(config);
    result.report = evaluate_detector(result.state, registry, input.eval, options).report;
    return result;
}

// ---- checkpoints ----

inline nlohmann::json mapping_network_to_json(const MappingNetwork& g) {
    nlohmann::json j;
    j["format_version"] = 1;
    j["dim"] = g.dim;
    j["params"] = nlohmann::json::array();
    for (const auto& [name, t] : g.params) {
        nlohmann::json p;
        p["name"] = name;
        p["shape"] = t.shape();
        p["values"] = t.values();
        j["params"].push_back(p);
    }
    return j;
}

inline MappingNetwork mapping_network_from_json(const nlohmann::json& j) {
    try {
        if (j.at("format_version").get<int>() != 1)
            throw data_error("mapping network: unsupported format version");
        MappingNetwork g;
        g.dim = j.at("dim").get<int>();
        for (const auto& p : j.at("params")) {
            const auto shape = p.at("shape").get<std::vector<int>>();
            const auto values = p.at("values").get<std::vector<double>>();
            g.params.emplace_back(p.at("name").get<std::string>(),
                                  Tensor::from(shape, values, true));
        }
        return g;
    } catch (const nlohmann::json::exception& e) {
        throw data_error(std::string("mapping network JSON: ") + e.what());
    }
}

// Directory layout: <dir>/task_<t>/{state,mapping,report,config}.json.
inline std::string checkpoint_dir(const std::string& root, int t) {
    return (std::filesystem::path(root) / ("task_" + std::to_string(t))).string();
}

inline void save_task_checkpoint(const std::string& root, int t, const TaskResult& result,
                                 const RunConfig& config) {
    const std::filesystem::path dir = checkpoint_dir(root, t);
    std::filesystem::create_directories(dir);
    detail::write_json_file((dir / "state.json").string(),
                            detector_state_to_json(result.state));
    detail::write_json_file((dir / "mapping.json").string(), mapping_network_to_json(result.g));
    detail::write_json_file((dir / "report.json").string(), metric_report_to_json(result.report));
    detail::write_json_file((dir / "config.json").string(), run_config_to_json(config));
    nlohmann::json log = nlohmann::json::array();
    for (const auto& s : result.log)
        log.push_back({{"l_c", s.l_c},
                       {"l_r", s.l_r},
                       {"l_o", s.l_o},
                       {"l_cur", s.l_cur},
                       {"total", s.total}});
    detail::write_json_file((dir / "log.json").string(), log);
}

struct TaskCheckpoint {
    DetectorState state;
    MappingNetwork g;
    MetricReport report;
    RunConfig config;
};

inline TaskCheckpoint load_task_checkpoint(const std::string& root, int t) {
    const std::filesystem::path dir = checkpoint_dir(root, t);
    if (!std::filesystem::exists(dir / "state.json"))
        throw protocol_error("no checkpoint for task " + std::to_string(t) + " under " + root);
    TaskCheckpoint c;
    c.state = detector_state_from_json(detail::load_json_file((dir / "state.json").string()));
    c.g = mapping_network_from_json(detail::load_json_file((dir / "mapping.json").string()));
    c.report = metric_report_from_json(detail::load_json_file((dir / "report.json").string()));
    c.config = run_config_from_json(detail::load_json_file((dir / "config.json").string()));
    return c;
}

}  // namespace owd
