#pragma once

// Bipartite query-to-ground-truth assignment. The cost couples class
// probability, L1 box distance, and generalized IoU; the solver is the
// shortest-augmenting-path Hungarian variant on rectangular matrices.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "owd/common.hpp"
#include "owd/data.hpp"
#include "owd/geometry.hpp"
#include "owd/tensor.hpp"

namespace owd {

struct MatchWeights {
    double cls = 2.0;
    double l1 = 5.0;
    double giou = 2.0;
};

struct MatchResult {
    std::vector<std::pair<int, int>> pairs;  // (query index, ground-truth index)
    std::vector<int> matched_queries;        // size = #GT
    std::vector<int> unmatched_queries;      // size = M - #GT
    double total_cost = 0.0;

    int query_for_gt(int gt) const {
        for (const auto& [q, g] : pairs)
            if (g == gt) return q;
        throw parameter_error("match: ground truth " + std::to_string(gt) + " is unmatched");
    }
    bool is_matched(int query) const {
        for (const auto& [q, g] : pairs)
            if (q == query) return true;
        return false;
    }
};

// Minimum-cost assignment of each row to a distinct column, rows <= cols.
// Returns the chosen column per row and the achieved total cost.
inline std::pair<std::vector<int>, double> solve_assignment(
    const std::vector<std::vector<double>>& cost) {
    const int n = static_cast<int>(cost.size());
    if (n == 0) return {{}, 0.0};
    const int m = static_cast<int>(cost[0].size());
    if (n > m)
        throw parameter_error("assignment: " + std::to_string(n) + " rows exceed " +
                              std::to_string(m) + " columns");
    for (const auto& row : cost) {
        if (static_cast<int>(row.size()) != m)
            throw shape_error("assignment: ragged cost matrix");
        for (double c : row)
            if (!std::isfinite(c)) throw numeric_error("assignment: non-finite cost entry");
    }

    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0);
    std::vector<double> v(static_cast<std::size_t>(m) + 1, 0.0);
    std::vector<int> match(static_cast<std::size_t>(m) + 1, 0);  // column -> row (1-based)
    std::vector<int> way(static_cast<std::size_t>(m) + 1, 0);
    for (int i = 1; i <= n; ++i) {
        match[0] = i;
        int j0 = 0;
        std::vector<double> minv(static_cast<std::size_t>(m) + 1, inf);
        std::vector<char> used(static_cast<std::size_t>(m) + 1, 0);
        do {
            used[static_cast<std::size_t>(j0)] = 1;
            const int i0 = match[static_cast<std::size_t>(j0)];
            int j1 = -1;
            double delta = inf;
            for (int j = 1; j <= m; ++j) {
                if (used[static_cast<std::size_t>(j)]) continue;
                const double cur = cost[static_cast<std::size_t>(i0) - 1][static_cast<std::size_t>(j) - 1] -
                                   u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
                if (cur < minv[static_cast<std::size_t>(j)]) {
                    minv[static_cast<std::size_t>(j)] = cur;
                    way[static_cast<std::size_t>(j)] = j0;
                }
                if (minv[static_cast<std::size_t>(j)] < delta) {
                    delta = minv[static_cast<std::size_t>(j)];
                    j1 = j;
                }
            }
            for (int j = 0; j <= m; ++j) {
                if (used[static_cast<std::size_t>(j)]) {
                    u[static_cast<std::size_t>(match[static_cast<std::size_t>(j)])] += delta;
                    v[static_cast<std::size_t>(j)] -= delta;
                } else {
                    minv[static_cast<std::size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (match[static_cast<std::size_t>(j0)] != 0);
        // Walk the augmenting path backwards.
        do {
            const int j1 = way[static_cast<std::size_t>(j0)];
            match[static_cast<std::size_t>(j0)] = match[static_cast<std::size_t>(j1)];
            j0 = j1;
        } while (j0 != 0);
    }

    std::vector<int> col_of_row(static_cast<std::size_t>(n), -1);
    for (int j = 1; j <= m; ++j)
        if (match[static_cast<std::size_t>(j)] != 0)
            col_of_row[static_cast<std::size_t>(match[static_cast<std::size_t>(j)]) - 1] = j - 1;
    double total = 0.0;
    for (int i = 0; i < n; ++i)
        total += cost[static_cast<std::size_t>(i)][static_cast<std::size_t>(col_of_row[static_cast<std::size_t>(i)])];
    return {std::move(col_of_row), total};
}

namespace detail {

// Softmax of one logits row, computed on plain values (matching is never
// differentiated through).
inline std::vector<double> softmax_row_values(const Tensor& logits, int row) {
    const int w = logits.cols();
    double mx = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < w; ++c) mx = std::max(mx, logits.at(row, c));
    std::vector<double> p(static_cast<std::size_t>(w));
    double sum = 0.0;
    for (int c = 0; c < w; ++c) {
        p[static_cast<std::size_t>(c)] = std::exp(logits.at(row, c) - mx);
        sum += p[static_cast<std::size_t>(c)];
    }
    for (double& x : p) x /= sum;
    return p;
}

}  // namespace detail

// Assigns every ground-truth instance its best query under
// cost = cls*(-p(class)) + l1*|box - gt|_1 + giou*(1 - gIoU).
inline MatchResult hungarian_match(const Tensor& class_logits, const Tensor& boxes,
                                   const std::vector<InstanceAnnotation>& gts,
                                   const MatchWeights& weights = {}) {
    const int num_queries = class_logits.rows();
    if (boxes.rows() != num_queries || boxes.cols() != 4)
        throw shape_error("match: boxes must be [num_queries, 4]");
    const int width = class_logits.cols();
    const int n = static_cast<int>(gts.size());
    if (n > num_queries)
        throw parameter_error("match: " + std::to_string(n) + " ground-truth instances exceed " +
                              std::to_string(num_queries) + " queries");

    MatchResult result;
    if (n == 0) {
        result.unmatched_queries.resize(static_cast<std::size_t>(num_queries));
        for (int q = 0; q < num_queries; ++q) result.unmatched_queries[static_cast<std::size_t>(q)] = q;
        return result;
    }

    std::vector<std::vector<double>> prob(static_cast<std::size_t>(num_queries));
    for (int q = 0; q < num_queries; ++q) prob[static_cast<std::size_t>(q)] = detail::softmax_row_values(class_logits, q);

    std::vector<std::vector<double>> cost(static_cast<std::size_t>(n),
                                          std::vector<double>(static_cast<std::size_t>(num_queries)));
    for (int i = 0; i < n; ++i) {
        const InstanceAnnotation& gt = gts[static_cast<std::size_t>(i)];
        if (gt.label < 0 || gt.label >= width - 1)
            throw data_error("match: ground-truth label " + std::to_string(gt.label) +
                             " outside the known-class range");
        const Box gt_box = gt.box.axis_aligned();
        for (int q = 0; q < num_queries; ++q) {
            const Box pb{boxes.at(q, 0), boxes.at(q, 1), boxes.at(q, 2), boxes.at(q, 3)};
            const double l1 = std::abs(pb.cx - gt_box.cx) + std::abs(pb.cy - gt_box.cy) +
                              std::abs(pb.w - gt_box.w) + std::abs(pb.h - gt_box.h);
            cost[static_cast<std::size_t>(i)][static_cast<std::size_t>(q)] =
                weights.cls * (-prob[static_cast<std::size_t>(q)][static_cast<std::size_t>(gt.label)]) +
                weights.l1 * l1 + weights.giou * (1.0 - giou(pb, gt_box));
        }
    }

    auto [col_of_row, total] = solve_assignment(cost);
    result.total_cost = total;
    std::vector<char> taken(static_cast<std::size_t>(num_queries), 0);
    for (int i = 0; i < n; ++i) {
        const int q = col_of_row[static_cast<std::size_t>(i)];
        result.pairs.emplace_back(q, i);
        result.matched_queries.push_back(q);
        taken[static_cast<std::size_t>(q)] = 1;
    }
    for (int q = 0; q < num_queries; ++q)
        if (!taken[static_cast<std::size_t>(q)]) result.unmatched_queries.push_back(q);
    return result;
}

}  // namespace owd
