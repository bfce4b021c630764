#include <cmath>
#include <vector>

#include <doctest.h>

#include "owd/matching.hpp"
#include "testutil.hpp"

using namespace owd;

TEST_CASE("matching: pinned 2x2 assignment") {
    const std::vector<std::vector<double>> cost{{1.0, 2.0}, {2.0, 1.0}};
    const auto [cols, total] = solve_assignment(cost);
    CHECK(cols == std::vector<int>{0, 1});
    CHECK(total == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("matching: solver equals brute force on random matrices") {
    Rng rng(4242);
    for (int trial = 0; trial < 200; ++trial) {
        const int n = rng.uniform_int(1, 6);
        const int m = rng.uniform_int(n, 6);
        std::vector<std::vector<double>> cost(static_cast<std::size_t>(n));
        for (auto& row : cost) {
            row.resize(static_cast<std::size_t>(m));
            for (double& c : row) c = rng.uniform(-5.0, 5.0);
        }
        const auto [cols, total] = solve_assignment(cost);
        const double oracle = testutil::assignment_bruteforce(cost);
        CHECK(total == doctest::Approx(oracle).epsilon(1e-9));
        // The reported columns form an injection achieving the reported cost.
        std::vector<char> used(static_cast<std::size_t>(m), 0);
        double replay = 0.0;
        for (int i = 0; i < n; ++i) {
            REQUIRE(cols[static_cast<std::size_t>(i)] >= 0);
            REQUIRE(cols[static_cast<std::size_t>(i)] < m);
            CHECK_FALSE(used[static_cast<std::size_t>(cols[static_cast<std::size_t>(i)])]);
            used[static_cast<std::size_t>(cols[static_cast<std::size_t>(i)])] = 1;
            replay += cost[static_cast<std::size_t>(i)][static_cast<std::size_t>(cols[static_cast<std::size_t>(i)])];
        }
        CHECK(replay == doctest::Approx(total).epsilon(1e-12));
    }
}

TEST_CASE("matching: solver input validation") {
    CHECK(solve_assignment({}).first.empty());
    CHECK_THROWS_AS(solve_assignment({{1.0, 2.0}, {3.0}}), const shape_error&);
    CHECK_THROWS_AS(solve_assignment({{1.0}, {2.0}}), const parameter_error&);  // 2 rows, 1 col
    const double nan = std::nan("");
    CHECK_THROWS_AS(solve_assignment({{1.0, nan}}), const numeric_error&);
}

namespace {

// Two queries parked at distinct locations with confident class posteriors.
struct TwoQueryScene {
    Tensor logits = Tensor::from({2, 3}, {6.0, 0.0, 0.0,   // query 0 believes class 0
                                          0.0, 6.0, 0.0}); // query 1 believes class 1
    Tensor boxes = Tensor::from({2, 4}, {0.25, 0.25, 0.2, 0.2,
                                         0.75, 0.75, 0.2, 0.2});
};

InstanceAnnotation make_gt(int label, double cx, double cy, double w, double h, double theta = 0.0) {
    InstanceAnnotation a;
    a.image_id = 0;
    a.label = label;
    a.box = OrientedBox{cx, cy, w, h, theta};
    return a;
}

}  // namespace

TEST_CASE("matching: zero ground truth leaves every query unmatched") {
    const TwoQueryScene s;
    const MatchResult r = hungarian_match(s.logits, s.boxes, {});
    CHECK(r.pairs.empty());
    CHECK(r.matched_queries.empty());
    CHECK(r.unmatched_queries == std::vector<int>{0, 1});
    CHECK(r.total_cost == 0.0);
}

TEST_CASE("matching: end-to-end cost picks the evident assignment") {
    const TwoQueryScene s;
    const std::vector<InstanceAnnotation> gts{make_gt(0, 0.25, 0.25, 0.2, 0.2),
                                              make_gt(1, 0.75, 0.75, 0.2, 0.2)};
    const MatchResult r = hungarian_match(s.logits, s.boxes, gts);
    REQUIRE(r.pairs.size() == 2);
    CHECK(r.query_for_gt(0) == 0);
    CHECK(r.query_for_gt(1) == 1);
    CHECK(r.unmatched_queries.empty());
    CHECK(r.is_matched(0));
    CHECK(r.is_matched(1));

    // Swapped ground-truth order matches the same queries to the same boxes.
    const std::vector<InstanceAnnotation> swapped{gts[1], gts[0]};
    const MatchResult r2 = hungarian_match(s.logits, s.boxes, swapped);
    CHECK(r2.query_for_gt(0) == 1);
    CHECK(r2.query_for_gt(1) == 0);
    CHECK(r2.total_cost == doctest::Approx(r.total_cost).epsilon(1e-12));
}

TEST_CASE("matching: match result invariants on random scenes") {
    Rng rng(91);
    for (int trial = 0; trial < 50; ++trial) {
        const int m = rng.uniform_int(3, 8);
        const int n = rng.uniform_int(0, m);
        const int width = 4;  // 3 known + UNKNOWN
        Tensor logits = Tensor::zeros({m, width});
        for (std::size_t i = 0; i < logits.size(); ++i) logits.v(i) = rng.uniform(-2.0, 2.0);
        Tensor boxes = Tensor::zeros({m, 4});
        for (int q = 0; q < m; ++q) {
            const Box b = testutil::random_box(rng);
            boxes.at(q, 0) = b.cx;
            boxes.at(q, 1) = b.cy;
            boxes.at(q, 2) = b.w;
            boxes.at(q, 3) = b.h;
        }
        std::vector<InstanceAnnotation> gts;
        for (int i = 0; i < n; ++i) {
            const Box b = testutil::random_box(rng);
            gts.push_back(make_gt(rng.uniform_int(0, 2), b.cx, b.cy, b.w, b.h));
        }
        const MatchResult r = hungarian_match(logits, boxes, gts);
        CHECK(static_cast<int>(r.pairs.size()) == n);
        CHECK(static_cast<int>(r.matched_queries.size() + r.unmatched_queries.size()) == m);
        std::vector<char> q_seen(static_cast<std::size_t>(m), 0);
        for (const auto& [q, g] : r.pairs) {
            CHECK_FALSE(q_seen[static_cast<std::size_t>(q)]);
            q_seen[static_cast<std::size_t>(q)] = 1;
            CHECK(g >= 0);
            CHECK(g < n);
        }
        for (int i = 0; i < n; ++i) CHECK(r.query_for_gt(i) >= 0);
    }
}

TEST_CASE("matching: capacity and label errors") {
    const TwoQueryScene s;
    std::vector<InstanceAnnotation> three{make_gt(0, 0.3, 0.3, 0.2, 0.2),
                                          make_gt(1, 0.5, 0.5, 0.2, 0.2),
                                          make_gt(0, 0.7, 0.7, 0.2, 0.2)};
    CHECK_THROWS_AS(hungarian_match(s.logits, s.boxes, three), const parameter_error&);

    // Label 2 collides with the UNKNOWN column of a width-3 classifier.
    CHECK_THROWS_AS(hungarian_match(s.logits, s.boxes, {make_gt(2, 0.5, 0.5, 0.2, 0.2)}),
                    const data_error&);
    CHECK_THROWS_AS(hungarian_match(s.logits, s.boxes, {make_gt(-1, 0.5, 0.5, 0.2, 0.2)}),
                    const data_error&);

    Tensor bad_boxes = Tensor::zeros({3, 4});
    CHECK_THROWS_AS(hungarian_match(s.logits, bad_boxes, {}), const shape_error&);
}
