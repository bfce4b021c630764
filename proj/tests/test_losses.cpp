#include <cmath>
#include <limits>
#include <vector>

#include <doctest.h>

#define OWD_TESTUTIL_WITH_TENSOR
#include "owd/losses.hpp"
#include "testutil.hpp"

using namespace owd;

namespace {

InstanceAnnotation make_gt(int label, double cx, double cy, double w, double h, double theta = 0.0) {
    InstanceAnnotation a;
    a.image_id = 0;
    a.label = label;
    a.box = OrientedBox{cx, cy, w, h, theta};
    return a;
}

Tensor random_boxes_tensor(int n, Rng& rng, bool requires_grad = false) {
    Tensor t = Tensor::zeros({n, 4}, requires_grad);
    for (int q = 0; q < n; ++q) {
        const Box b = testutil::random_box(rng, 0.2, 0.6);
        t.at(q, 0) = b.cx;
        t.at(q, 1) = b.cy;
        t.at(q, 2) = b.w;
        t.at(q, 3) = b.h;
    }
    return t;
}

// Minimal hand-assembled forward output; the loss only reads these fields.
ForwardOutput toy_output(Tensor logits, Tensor boxes, Tensor obj, Tensor theta = {}) {
    ForwardOutput out;
    out.class_logits = std::move(logits);
    out.boxes = std::move(boxes);
    out.objectness_logits = std::move(obj);
    out.theta = std::move(theta);
    return out;
}

}  // namespace

TEST_CASE("losses: differentiable giou agrees with the geometry oracle") {
    Rng rng(17);
    for (int trial = 0; trial < 100; ++trial) {
        const Tensor a = random_boxes_tensor(1, rng);
        const Tensor b = random_boxes_tensor(1, rng);
        const Box ba{a.at(0, 0), a.at(0, 1), a.at(0, 2), a.at(0, 3)};
        const Box bb{b.at(0, 0), b.at(0, 1), b.at(0, 2), b.at(0, 3)};
        CHECK(giou_rows(a, b).value() == doctest::Approx(giou(ba, bb)).epsilon(1e-12));
    }
    CHECK_THROWS_AS(giou_rows(Tensor::zeros({2, 4}), Tensor::zeros({3, 4})), const shape_error&);
    CHECK_THROWS_AS(giou_rows(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), const shape_error&);
}

TEST_CASE("losses: hand-built one-query fixture") {
    // Prediction (0.5, 0.5, 0.4, 0.4) vs GT (0.55, 0.5, 0.4, 0.4):
    // L1 = 0.05; the giou term comes from the geometry module.
    const Tensor logits = Tensor::from({1, 3}, {4.0, -1.0, -2.0});
    const Tensor boxes = Tensor::from({1, 4}, {0.5, 0.5, 0.4, 0.4});
    const Tensor obj = Tensor::from({1, 1}, {2.0});
    const auto gts = std::vector<InstanceAnnotation>{make_gt(0, 0.55, 0.5, 0.4, 0.4)};
    const MatchResult match = hungarian_match(logits, boxes, gts);
    REQUIRE(match.pairs.size() == 1);

    const LossBreakdown b = detection_loss(toy_output(logits, boxes, obj), gts, {}, match);
    const double expected_giou = giou(Box{0.5, 0.5, 0.4, 0.4}, Box{0.55, 0.5, 0.4, 0.4});
    CHECK(b.l_r.value() == doctest::Approx(0.05 + (1.0 - expected_giou)).epsilon(1e-12));

    // L_c is the negative log-probability of class 0 for the only query.
    const double z0 = std::exp(4.0) + std::exp(-1.0) + std::exp(-2.0);
    CHECK(b.l_c.value() == doctest::Approx(-std::log(std::exp(4.0) / z0)).epsilon(1e-12));
    // L_o: single foreground query with logit 2.
    CHECK(b.l_o.value() == doctest::Approx(std::log1p(std::exp(-2.0))).epsilon(1e-12));
    CHECK(b.l_cur.value() == 0.0);
    CHECK(b.total.value() ==
          doctest::Approx(b.l_c.value() + b.l_r.value() + b.l_o.value()).epsilon(1e-9));
}

TEST_CASE("losses: perfect predictions sit at the floor") {
    const Tensor logits = Tensor::from({2, 3}, {30.0, 0.0, 0.0, 0.0, 30.0, 0.0});
    const Tensor boxes = Tensor::from({2, 4}, {0.25, 0.25, 0.2, 0.2, 0.75, 0.75, 0.2, 0.2});
    const Tensor obj = Tensor::from({2, 1}, {30.0, 30.0});
    const auto gts = std::vector<InstanceAnnotation>{make_gt(0, 0.25, 0.25, 0.2, 0.2),
                                                     make_gt(1, 0.75, 0.75, 0.2, 0.2)};
    const MatchResult match = hungarian_match(logits, boxes, gts);
    const LossBreakdown b = detection_loss(toy_output(logits, boxes, obj), gts, {}, match);
    CHECK(b.l_r.value() == 0.0);  // exact: L1 = 0 and gIoU = 1
    CHECK(b.l_c.value() < 1e-9);
    CHECK(b.l_o.value() < 1e-9);
}

TEST_CASE("losses: ground-truth permutation leaves every term unchanged") {
    Rng rng(23);
    for (int trial = 0; trial < 20; ++trial) {
        const int m = 8;
        Tensor logits = Tensor::zeros({m, 4});
        for (std::size_t i = 0; i < logits.size(); ++i) logits.v(i) = rng.uniform(-2.0, 2.0);
        const Tensor boxes = random_boxes_tensor(m, rng);
        Tensor obj = Tensor::zeros({m, 1});
        for (int q = 0; q < m; ++q) obj.at(q, 0) = rng.uniform(-2.0, 2.0);

        std::vector<InstanceAnnotation> gts;
        for (int i = 0; i < 4; ++i) {
            const Box b = testutil::random_box(rng, 0.2, 0.6);
            gts.push_back(make_gt(rng.uniform_int(0, 2), b.cx, b.cy, b.w, b.h));
        }
        const ForwardOutput out = toy_output(logits, boxes, obj);
        const LossBreakdown before = detection_loss(out, gts, {}, hungarian_match(logits, boxes, gts));

        std::vector<InstanceAnnotation> shuffled = gts;
        for (std::size_t i = shuffled.size(); i > 1; --i)
            std::swap(shuffled[i - 1], shuffled[rng.uniform_index(i)]);
        const LossBreakdown after =
            detection_loss(out, shuffled, {}, hungarian_match(logits, boxes, shuffled));
        CHECK(after.l_c.value() == doctest::Approx(before.l_c.value()).epsilon(1e-12));
        CHECK(after.l_r.value() == doctest::Approx(before.l_r.value()).epsilon(1e-12));
        CHECK(after.l_o.value() == doctest::Approx(before.l_o.value()).epsilon(1e-12));
        CHECK(after.total.value() == doctest::Approx(before.total.value()).epsilon(1e-12));
    }
}

TEST_CASE("losses: objectness ignores class identities") {
    Rng rng(29);
    const int m = 6;
    Tensor logits = Tensor::zeros({m, 4});
    for (std::size_t i = 0; i < logits.size(); ++i) logits.v(i) = rng.uniform(-1.0, 1.0);
    const Tensor boxes = random_boxes_tensor(m, rng);
    Tensor obj = Tensor::zeros({m, 1});
    for (int q = 0; q < m; ++q) obj.at(q, 0) = rng.uniform(-2.0, 2.0);

    std::vector<InstanceAnnotation> gts{make_gt(0, 0.3, 0.3, 0.25, 0.25),
                                        make_gt(1, 0.7, 0.6, 0.3, 0.3)};
    const MatchResult match = hungarian_match(logits, boxes, gts);
    const ForwardOutput out = toy_output(logits, boxes, obj);
    REQUIRE_FALSE(match.unmatched_queries.empty());
    const std::vector<int> pseudo{match.unmatched_queries.front()};
    const LossBreakdown a = detection_loss(out, gts, pseudo, match, DetectionLossConfig{});
    // Same geometry and the same fixed match, different class labels.
    std::vector<InstanceAnnotation> relabeled = gts;
    relabeled[0].label = 2;
    relabeled[1].label = 0;
    const LossBreakdown b = detection_loss(out, relabeled, pseudo, match, DetectionLossConfig{});
    CHECK(a.l_o.value() == b.l_o.value());
    CHECK(a.l_c.value() != b.l_c.value());
}

TEST_CASE("losses: pseudo-labels act as UNKNOWN foreground") {
    const int m = 4;
    const Tensor logits = Tensor::from({m, 3}, {5.0, 0.0, 0.0,
                                                0.0, 0.0, 5.0,
                                                0.0, 0.0, -5.0,
                                                1.0, 1.0, 1.0});
    const Tensor boxes = Tensor::from({m, 4}, {0.3, 0.3, 0.3, 0.3,
                                               0.7, 0.7, 0.3, 0.3,
                                               0.5, 0.5, 0.3, 0.3,
                                               0.2, 0.8, 0.3, 0.3});
    const Tensor obj = Tensor::from({m, 1}, {3.0, 3.0, -3.0, -3.0});
    const auto gts = std::vector<InstanceAnnotation>{make_gt(0, 0.3, 0.3, 0.3, 0.3)};
    const MatchResult match = hungarian_match(logits, boxes, gts);
    REQUIRE(match.query_for_gt(0) == 0);

    // Query 1 is pseudo-labeled; its high UNKNOWN logit keeps L_c low, and
    // its positive objectness keeps L_o low.
    const LossBreakdown with_pseudo =
        detection_loss(toy_output(logits, boxes, obj), gts, {1}, match);
    const LossBreakdown without =
        detection_loss(toy_output(logits, boxes, obj), gts, {}, match);
    CHECK(with_pseudo.l_o.value() < without.l_o.value());
    CHECK(std::isfinite(with_pseudo.l_c.value()));

    // Empty ground truth: regression term is exactly zero.
    const MatchResult empty_match = hungarian_match(logits, boxes, {});
    const LossBreakdown no_gt = detection_loss(toy_output(logits, boxes, obj), {}, {2}, empty_match);
    CHECK(no_gt.l_r.value() == 0.0);
    CHECK(no_gt.total.value() ==
          doctest::Approx(no_gt.l_c.value() + no_gt.l_o.value()).epsilon(1e-9));
}

TEST_CASE("losses: validation errors") {
    const Tensor logits = Tensor::from({2, 3}, {1.0, 0.0, 0.0, 0.0, 1.0, 0.0});
    const Tensor boxes = Tensor::from({2, 4}, {0.3, 0.3, 0.2, 0.2, 0.7, 0.7, 0.2, 0.2});
    const Tensor obj = Tensor::from({2, 1}, {0.0, 0.0});
    const auto gts = std::vector<InstanceAnnotation>{make_gt(0, 0.3, 0.3, 0.2, 0.2)};
    const MatchResult match = hungarian_match(logits, boxes, gts);

    // Pseudo query duplicating the matched query.
    const int matched = match.matched_queries[0];
    CHECK_THROWS_AS(detection_loss(toy_output(logits, boxes, obj), gts, {matched}, match),
                    const parameter_error&);
    CHECK_THROWS_AS(detection_loss(toy_output(logits, boxes, obj), gts, {7}, match),
                    const parameter_error&);

    // Match built for different ground truth.
    CHECK_THROWS_AS(detection_loss(toy_output(logits, boxes, obj), {}, {}, match),
                    const shape_error&);
}

TEST_CASE("losses: total composition and NaN naming") {
    Rng rng(31);
    for (int trial = 0; trial < 20; ++trial) {
        LossBreakdown det;
        det.l_c = Tensor::scalar(rng.uniform(0.0, 3.0));
        det.l_r = Tensor::scalar(rng.uniform(0.0, 3.0));
        det.l_o = Tensor::scalar(rng.uniform(0.0, 3.0));
        det.l_cur = Tensor::scalar(0.0);
        det.total = Tensor::scalar(0.0);
        DetectionLossConfig cfg;
        cfg.alpha = rng.uniform(0.0, 2.0);
        cfg.l_cur_weight = rng.uniform(0.0, 2.0);
        const double ssl = rng.uniform(0.0, 3.0);
        const LossBreakdown t = total_loss(det, Tensor::scalar(ssl), cfg);
        CHECK(t.total.value() == doctest::Approx(det.l_c.value() + det.l_r.value() +
                                                 cfg.alpha * det.l_o.value() +
                                                 cfg.l_cur_weight * ssl)
                                     .epsilon(1e-12));
    }

    LossBreakdown det;
    det.l_c = Tensor::scalar(1.0);
    det.l_r = Tensor::scalar(1.0);
    det.l_o = Tensor::scalar(1.0);
    det.l_cur = Tensor::scalar(0.0);
    det.total = Tensor::scalar(0.0);

    // ssl = 0 keeps the supervised sum; alpha = 0 drops objectness.
    DetectionLossConfig plain;
    CHECK(total_loss(det, Tensor::scalar(0.0), plain).total.value() ==
          doctest::Approx(3.0).epsilon(1e-12));
    DetectionLossConfig no_obj;
    no_obj.alpha = 0.0;
    CHECK(total_loss(det, Tensor::scalar(0.0), no_obj).total.value() ==
          doctest::Approx(2.0).epsilon(1e-12));

    CHECK_THROWS_WITH_AS(total_loss(det, Tensor::scalar(std::nan("")), plain),
                         doctest::Contains("L_cur"), const numeric_error&);
    LossBreakdown poisoned = det;
    poisoned.l_c = Tensor::scalar(std::numeric_limits<double>::infinity());
    CHECK_THROWS_WITH_AS(total_loss(poisoned, Tensor::scalar(0.0), plain),
                         doctest::Contains("L_c"), const numeric_error&);
}

TEST_CASE("losses: gradients match finite differences on a toy head") {
    Rng rng(37);
    const int m = 6, d = 10, width = 4;  // 3 known classes + UNKNOWN

    const Tensor z = Tensor::randn({m, d}, rng, 1.0, false);
    Tensor wc = Tensor::randn({d, width}, rng, 0.3, true);
    Tensor bc = Tensor::randn({1, width}, rng, 0.1, true);
    Tensor wb = Tensor::randn({d, 4}, rng, 0.1, true);
    Tensor bb = Tensor::zeros({1, 4}, true);
    Tensor wo = Tensor::randn({d, 1}, rng, 0.3, true);
    Tensor bo = Tensor::randn({1, 1}, rng, 0.1, true);

    // Large, central ground-truth boxes guarantee overlap with the sigmoid
    // mid-range predictions, keeping the giou terms away from kinks.
    std::vector<InstanceAnnotation> gts{make_gt(0, 0.45, 0.5, 0.55, 0.6),
                                        make_gt(1, 0.55, 0.45, 0.6, 0.5),
                                        make_gt(2, 0.5, 0.55, 0.5, 0.55)};

    auto assemble = [&]() {
        ForwardOutput out;
        out.class_logits = linear(z, wc, bc);
        out.boxes = sigmoid(linear(z, wb, bb));
        out.objectness_logits = linear(z, wo, bo);
        return out;
    };
    // The assignment is discrete: freeze it once so finite differences probe
    // a smooth function.
    const ForwardOutput probe = assemble();
    const MatchResult match = hungarian_match(probe.class_logits, probe.boxes, gts);
    std::vector<int> pseudo;
    for (int q : match.unmatched_queries) {
        pseudo.push_back(q);
        break;
    }

    DetectionLossConfig cfg;
    cfg.alpha = 0.8;
    const auto build = [&]() {
        return detection_loss(assemble(), gts, pseudo, match, cfg).total;
    };
    const double err = testutil::max_grad_error(build, {wc, bc, wb, bb, wo, bo});
    CHECK(err < 1e-4);
}

TEST_CASE("losses: oriented regression gradient check") {
    Rng rng(41);
    const int m = 4, d = 8, width = 3;

    const Tensor z = Tensor::randn({m, d}, rng, 1.0, false);
    Tensor wc = Tensor::randn({d, width}, rng, 0.3, true);
    Tensor bc = Tensor::zeros({1, width}, true);
    Tensor wb = Tensor::randn({d, 4}, rng, 0.1, true);
    Tensor bb = Tensor::zeros({1, 4}, true);
    Tensor wo = Tensor::randn({d, 1}, rng, 0.3, true);
    Tensor bo = Tensor::zeros({1, 1}, true);
    Tensor wa = Tensor::randn({d, 1}, rng, 0.2, true);
    Tensor ba = Tensor::zeros({1, 1}, true);

    std::vector<InstanceAnnotation> gts{make_gt(0, 0.45, 0.5, 0.55, 0.6, 0.3),
                                        make_gt(1, 0.55, 0.45, 0.6, 0.5, -0.25)};

    auto assemble = [&]() {
        ForwardOutput out;
        out.class_logits = linear(z, wc, bc);
        out.boxes = sigmoid(linear(z, wb, bb));
        out.objectness_logits = linear(z, wo, bo);
        out.theta = add_scalar(mul_scalar(sigmoid(linear(z, wa, ba)), kPi), -kHalfPi);
        return out;
    };
    const ForwardOutput probe = assemble();
    const MatchResult match = hungarian_match(probe.class_logits, probe.boxes, gts);
    const auto build = [&]() { return detection_loss(assemble(), gts, {}, match).total; };
    const double err = testutil::max_grad_error(build, {wc, bc, wb, bb, wo, bo, wa, ba});
    CHECK(err < 1e-4);

    // The angle head influences the loss.
    const LossBreakdown b = detection_loss(assemble(), gts, {}, match);
    backward(b.total);
    double mag = 0.0;
    for (std::size_t i = 0; i < wa.size(); ++i) mag += std::abs(wa.g(i));
    CHECK(mag > 0.0);
}

TEST_CASE("losses: breakdown invariant on random scenes") {
    Rng rng(43);
    for (int trial = 0; trial < 10; ++trial) {
        const int m = 6;
        Tensor logits = Tensor::zeros({m, 4});
        for (std::size_t i = 0; i < logits.size(); ++i) logits.v(i) = rng.uniform(-2.0, 2.0);
        const Tensor boxes = random_boxes_tensor(m, rng);
        Tensor obj = Tensor::zeros({m, 1});
        for (int q = 0; q < m; ++q) obj.at(q, 0) = rng.uniform(-2.0, 2.0);
        std::vector<InstanceAnnotation> gts{make_gt(rng.uniform_int(0, 2), 0.4, 0.4, 0.4, 0.4),
                                            make_gt(rng.uniform_int(0, 2), 0.65, 0.6, 0.35, 0.35)};
        DetectionLossConfig cfg;
        cfg.alpha = rng.uniform(0.1, 2.0);
        const MatchResult match = hungarian_match(logits, boxes, gts);
        const LossBreakdown b = detection_loss(toy_output(logits, boxes, obj), gts, {}, match, cfg);
        CHECK(b.total.value() ==
              doctest::Approx(b.l_c.value() + b.l_r.value() + cfg.alpha * b.l_o.value() +
                              b.l_cur.value())
                  .epsilon(1e-9));
        CHECK(b.l_c.value() >= 0.0);
        CHECK(b.l_o.value() >= 0.0);
    }
}
