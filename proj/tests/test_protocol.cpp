#include <cstdint>
#include <filesystem>
#include <vector>

#include <doctest.h>

#include "owd/protocol.hpp"
#include "testutil.hpp"

using namespace owd;

namespace {

// Two-task world over four synthetic classes, with the schedule naming
// classes out of id order so the column remap is nontrivial.
struct ProtocolWorld {
    DatasetManifest full;       // eval view: all classes annotated
    TaskSchedule schedule;      // {rectangle, circle} then {ring, triangle}
    std::vector<DatasetManifest> tasks;
    RunConfig config;

    ProtocolWorld() {
        SyntheticConfig scfg;
        scfg.num_classes = 4;
        scfg.num_images = 10;
        scfg.min_instances = 1;
        scfg.max_instances = 2;
        scfg.image_size = 32;
        scfg.seed = 1234;
        full = synthetic_shapes(scfg);

        schedule.tasks.push_back({{"rectangle", "circle"}, 1.0});
        schedule.tasks.push_back({{"ring", "triangle"}, 0.5});
        tasks = generate_task_splits(full, schedule);

        config.detector.num_queries = 6;
        config.detector.embed_dim = 8;
        config.detector.num_scales = 2;
        config.detector.attention_heads = 2;
        config.detector.encoder_layers = 1;
        config.detector.decoder_layers = 1;
        config.detector.input_size = 32;
        config.epochs = 2;
        config.alignment_epochs = 1;
        config.batch_size = 4;
        config.train.pseudo.k = 2;
        config.master_seed = 99;
    }
};

}  // namespace

TEST_CASE("protocol: run config validation, JSON round-trip, fingerprint") {
    RunConfig c;
    c.detector.num_known_classes = 3;
    c.train.pseudo.aggregation = ScaleAggregation::max;
    c.train.pseudo.scorer = PseudoScorer::feature_average;
    c.train.augmentation.posterize = true;
    c.epochs = 12;
    c.alignment_epochs = 7;
    c.master_seed = 424242;
    c.validate();

    const auto text = run_config_to_json(c).dump();
    const RunConfig back = run_config_from_json(nlohmann::json::parse(text));
    CHECK(run_config_to_json(back).dump() == text);
    CHECK(back.train.pseudo.aggregation == ScaleAggregation::max);
    CHECK(back.train.pseudo.scorer == PseudoScorer::feature_average);
    CHECK(back.alignment_epochs == 7);

    const std::string f = config_fingerprint(c);
    CHECK(f.size() == 16);
    CHECK(config_fingerprint(back) == f);
    RunConfig other = c;
    other.train.optimizer.lr = 3e-4;
    CHECK(config_fingerprint(other) != f);

    RunConfig bad = c;
    bad.alignment_epochs = 13;  // exceeds epochs
    CHECK_THROWS_AS(bad.validate(), const parameter_error&);
    bad = c;
    bad.batch_size = 0;
    CHECK_THROWS_AS(bad.validate(), const parameter_error&);
    bad = c;
    bad.iou_threshold = 0.0;
    CHECK_THROWS_AS(bad.validate(), const parameter_error&);

    CHECK_THROWS_AS(run_config_from_json(nlohmann::json::object()), const data_error&);
}

TEST_CASE("protocol: seed derivation separates stages and masters") {
    CHECK(derive_seed(1, "init") == derive_seed(1, "init"));
    CHECK(derive_seed(1, "init") != derive_seed(1, "g1"));
    CHECK(derive_seed(1, "init") != derive_seed(2, "init"));
}

TEST_CASE("protocol: inference returns sorted, registry-labeled detections") {
    DetectorConfig cfg;
    cfg.num_queries = 6;
    cfg.embed_dim = 8;
    cfg.num_scales = 2;
    cfg.num_known_classes = 3;
    cfg.attention_heads = 2;
    cfg.encoder_layers = 1;
    cfg.decoder_layers = 1;
    cfg.input_size = 32;
    const DetectorState state = init_detector(cfg, 5);

    KnownClassRegistry reg;
    reg.groups = {{7, 2}, {5}};
    reg.task = 2;  // three known classes, matching the classifier

    Image img(3, 32, 32);
    Rng rng(11);
    for (auto& v : img.data) v = rng.uniform();

    const auto all = infer(state, reg, img, cfg.num_queries);
    REQUIRE(static_cast<int>(all.size()) == cfg.num_queries);
    for (std::size_t i = 0; i + 1 < all.size(); ++i) CHECK(all[i].score >= all[i + 1].score);
    for (const auto& d : all) {
        CHECK((d.label == kUnknownLabel || reg.is_known(d.label)));
        CHECK(d.score > 0.0);
        CHECK(d.score < 1.0);
        CHECK(d.box.theta == 0.0);
    }

    const auto top3 = infer(state, reg, img, 3);
    REQUIRE(top3.size() == 3);
    for (int i = 0; i < 3; ++i) {
        CHECK(top3[static_cast<std::size_t>(i)].label == all[static_cast<std::size_t>(i)].label);
        CHECK(top3[static_cast<std::size_t>(i)].score == all[static_cast<std::size_t>(i)].score);
    }
    // Determinism.
    const auto again = infer(state, reg, img, 3);
    for (int i = 0; i < 3; ++i)
        CHECK(again[static_cast<std::size_t>(i)].score == top3[static_cast<std::size_t>(i)].score);

    CHECK_THROWS_AS(infer(state, reg, img, 0), const parameter_error&);
    CHECK_THROWS_AS(infer(state, reg, img, cfg.num_queries + 1), const parameter_error&);
    KnownClassRegistry small = reg;
    small.task = 1;  // two known classes vs classifier width 3
    CHECK_THROWS_AS(infer(state, small, img, 3), const protocol_error&);
}

TEST_CASE("protocol: evaluate_detector resolves top_k and tags image ids") {
    const ProtocolWorld world;
    KnownClassRegistry reg = make_registry(world.schedule, world.full.class_names, 1);
    DetectorConfig cfg = world.config.detector;
    cfg.num_known_classes = reg.num_known();
    const DetectorState state = init_detector(cfg, 3);

    EvalOptions options;
    options.fingerprint = "deadbeef00000000";
    const EvaluationRun run = evaluate_detector(state, reg, world.full, options);
    CHECK(run.report.top_k == cfg.num_queries);  // 0 resolved to all queries
    CHECK(run.report.oriented == cfg.oriented);
    CHECK(run.report.fingerprint == "deadbeef00000000");
    CHECK(static_cast<int>(run.detections.size()) ==
          static_cast<int>(world.full.images.size()) * cfg.num_queries);
    std::set<int> ids;
    for (const auto& d : run.detections) ids.insert(d.image_id);
    CHECK(ids.size() == world.full.images.size());
    CHECK(run.report.u_recall_applicable);  // task 1 of 2
}

TEST_CASE("protocol: task one trains supervised and reports a final-style view") {
    const ProtocolWorld world;
    // Single-task schedule: the degenerate protocol is plain supervised
    // detection, with no alignment log and no U-Recall. The dataset view is
    // already restricted to the scheduled classes.
    TaskSchedule solo;
    solo.tasks.push_back({{"rectangle", "circle"}, 1.0});
    const TaskRunInput input{world.tasks[0], world.tasks[0]};

    RunConfig config = world.config;
    config.epochs = 1;
    config.alignment_epochs = 0;
    const TaskResult r = run_task(1, solo, nullptr, config, input);
    CHECK(r.state.config.num_known_classes == 2);
    CHECK_FALSE(r.state.frozen);
    CHECK(r.log.empty());  // supervised phase logs no alignment steps
    CHECK_FALSE(r.report.map_prev.has_value());
    CHECK(r.report.map_cur == r.report.map_both);
    CHECK_FALSE(r.report.u_recall_applicable);
    CHECK(r.report.task == 1);
    CHECK(r.report.fingerprint == config_fingerprint(config));

    CHECK_THROWS_AS(run_task(2, solo, &r.state, config, input), const parameter_error&);
    CHECK_THROWS_AS(run_task(0, solo, nullptr, config, input), const parameter_error&);
    CHECK_THROWS_AS(run_task(1, solo, &r.state, config, input), const protocol_error&);
}

TEST_CASE("protocol: label leakage outside the task group is rejected") {
    const ProtocolWorld world;
    DatasetManifest poisoned = world.tasks[0];
    InstanceAnnotation bad;
    bad.image_id = poisoned.images.front().id;
    bad.label = 3;  // a task-2 class inside task-1 training data
    bad.box = OrientedBox{0.5, 0.5, 0.3, 0.3, 0.0};
    poisoned.annotations.push_back(bad);

    TaskRunInput input{poisoned, world.full};
    RunConfig config = world.config;
    config.epochs = 1;
    config.alignment_epochs = 0;
    CHECK_THROWS_WITH_AS(run_task(1, world.schedule, nullptr, config, input),
                         doctest::Contains("leak"), const protocol_error&);
}

TEST_CASE("protocol: two-task run extends the classifier and gates U-Recall") {
    const ProtocolWorld world;
    RunConfig config = world.config;

    const TaskRunInput input1{world.tasks[0], world.full};
    const TaskResult r1 = run_task(1, world.schedule, nullptr, config, input1);
    CHECK(r1.state.config.num_known_classes == 2);
    CHECK(r1.report.u_recall_applicable);  // unknowns exist at task 1
    REQUIRE(r1.report.u_recall.has_value());
    CHECK(*r1.report.u_recall >= 0.0);
    CHECK(*r1.report.u_recall <= 1.0);

    // Task 2: half-labeled current data, prior model as teacher.
    DatasetManifest task2 = partial_label_split(world.tasks[1], 0.5, 7);
    const TaskRunInput input2{task2, world.full};
    const TaskResult r2 = run_task(2, world.schedule, &r1.state, config, input2);
    CHECK(r2.state.config.num_known_classes == 4);
    CHECK_FALSE(r2.log.empty());  // alignment steps were taken
    CHECK(r2.report.map_prev.has_value());
    CHECK(r2.report.map_cur.has_value());
    CHECK(r2.report.map_both.has_value());
    CHECK_FALSE(r2.report.u_recall_applicable);  // final task
    CHECK(r2.report.task == 2);
    for (const auto& s : r2.log) CHECK(std::isfinite(s.total));

    // Missing or malformed priors are protocol errors.
    CHECK_THROWS_AS(run_task(2, world.schedule, nullptr, config, input2), const protocol_error&);
    DetectorConfig wrong = config.detector;
    wrong.num_known_classes = 3;
    const DetectorState bad_prior = init_detector(wrong, 1);
    CHECK_THROWS_AS(run_task(2, world.schedule, &bad_prior, config, input2),
                    const protocol_error&);
    const DetectorState frozen_prior = clone_detached(r1.state);
    CHECK_THROWS_AS(run_task(2, world.schedule, &frozen_prior, config, input2),
                    const protocol_error&);
}

TEST_CASE("protocol: task-1 semi-supervised variant completes with alignment") {
    const ProtocolWorld world;
    TaskSchedule plus = world.schedule;
    plus.tasks[0].fraction = 0.5;

    DatasetManifest train = partial_label_split(world.tasks[0], 0.5, 3);
    const TaskRunInput input{train, world.full};
    const TaskResult r = run_task(1, plus, nullptr, world.config, input);
    CHECK(r.state.config.num_known_classes == 2);
    CHECK_FALSE(r.log.empty());  // alignment ran in task 1
    CHECK(r.report.u_recall_applicable);
    for (const auto& s : r.log) CHECK(std::isfinite(s.total));
}

TEST_CASE("protocol: runs are deterministic in the master seed") {
    const ProtocolWorld world;
    RunConfig config = world.config;
    config.epochs = 1;
    config.alignment_epochs = 0;
    const TaskRunInput input{world.tasks[0], world.full};

    const TaskResult a = run_task(1, world.schedule, nullptr, config, input);
    const TaskResult b = run_task(1, world.schedule, nullptr, config, input);
    CHECK(a.state.parameter_hash() == b.state.parameter_hash());
    CHECK(metric_report_to_json(a.report).dump() == metric_report_to_json(b.report).dump());

    RunConfig reseeded = config;
    reseeded.master_seed = 100;
    const TaskResult c = run_task(1, world.schedule, nullptr, reseeded, input);
    CHECK(c.state.parameter_hash() != a.state.parameter_hash());
}

TEST_CASE("protocol: checkpoints round-trip and reproduce evaluation exactly") {
    const ProtocolWorld world;
    RunConfig config = world.config;
    config.epochs = 1;
    config.alignment_epochs = 0;
    const TaskRunInput input{world.tasks[0], world.full};
    const TaskResult r = run_task(1, world.schedule, nullptr, config, input);

    const auto root =
        (std::filesystem::temp_directory_path() / "owd_protocol_ckpt_test").string();
    std::filesystem::remove_all(root);
    save_task_checkpoint(root, 1, r, config);

    const TaskCheckpoint back = load_task_checkpoint(root, 1);
    CHECK(back.state.parameter_hash() == r.state.parameter_hash());
    CHECK(back.g.parameter_hash() == r.g.parameter_hash());
    CHECK(back.report == r.report);
    CHECK(config_fingerprint(back.config) == config_fingerprint(config));

    // Loaded state re-evaluates to the bit-identical report.
    const KnownClassRegistry reg = make_registry(world.schedule, world.full.class_names, 1);
    EvalOptions options;
    options.iou_threshold = config.iou_threshold;
    options.top_k = config.eval_top_k;
    options.fingerprint = config_fingerprint(config);
    const EvaluationRun again = evaluate_detector(back.state, reg, world.full, options);
    CHECK(again.report == r.report);

    CHECK_THROWS_AS(load_task_checkpoint(root, 2), const protocol_error&);
    std::filesystem::remove_all(root);
}
