#pragma once

// Supervised loss terms: classification over known classes + UNKNOWN,
// box regression (L1 + generalized IoU, plus a wrapped angle term for
// oriented boxes), class-agnostic objectness, and the total composition
// total = L_c + L_r + alpha * L_o + L_cur.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "owd/common.hpp"
#include "owd/data.hpp"
#include "owd/matching.hpp"
#include "owd/model.hpp"
#include "owd/tensor.hpp"

namespace owd {

struct DetectionLossConfig {
    double alpha = 1.0;            // objectness weight in the total
    double l_cur_weight = 1.0;     // weight of the alignment term in the total
    double background_coef = 0.1;  // weight of unmatched queries in L_c
    double angle_beta = 1.0;       // smooth-L1 transition point for the angle term
};

struct LossBreakdown {
    Tensor l_c;
    Tensor l_r;
    Tensor l_o;
    Tensor l_cur;
    Tensor total;
    double alpha = 1.0;
};

// Differentiable generalized IoU for paired rows of [n,4] (cx, cy, w, h)
// tensors; returns [n,1].
inline Tensor giou_rows(const Tensor& pred, const Tensor& gt) {
    if (pred.rank() != 2 || pred.cols() != 4 || gt.rank() != 2 || gt.cols() != 4 ||
        pred.rows() != gt.rows())
        throw shape_error("giou_rows: expected matching [n,4] tensors");
    auto corners = [](const Tensor& b) {
        const Tensor cx = slice_cols(b, 0, 1), cy = slice_cols(b, 1, 2);
        const Tensor hw = mul_scalar(slice_cols(b, 2, 3), 0.5);
        const Tensor hh = mul_scalar(slice_cols(b, 3, 4), 0.5);
        return std::array<Tensor, 4>{sub(cx, hw), add(cx, hw), sub(cy, hh), add(cy, hh)};
    };
    const auto a = corners(pred);
    const auto b = corners(gt);
    const Tensor iw = maximum_scalar(sub(minimum(a[1], b[1]), maximum(a[0], b[0])), 0.0);
    const Tensor ih = maximum_scalar(sub(minimum(a[3], b[3]), maximum(a[2], b[2])), 0.0);
    const Tensor inter = mul(iw, ih);
    const Tensor area_a = mul(sub(a[1], a[0]), sub(a[3], a[2]));
    const Tensor area_b = mul(sub(b[1], b[0]), sub(b[3], b[2]));
    const Tensor uni = sub(add(area_a, area_b), inter);
    const Tensor hull = mul(sub(maximum(a[1], b[1]), minimum(a[0], b[0])),
                            sub(maximum(a[3], b[3]), minimum(a[2], b[2])));
    return sub(div(inter, uni), div(sub(hull, uni), hull));
}

namespace detail {

inline void require_valid_match(const MatchResult& match, int num_queries, int num_gts) {
    if (static_cast<int>(match.pairs.size()) != num_gts ||
        static_cast<int>(match.matched_queries.size()) != num_gts ||
        static_cast<int>(match.matched_queries.size() + match.unmatched_queries.size()) !=
            num_queries)
        throw shape_error("detection_loss: match result does not cover this output/GT pair");
    std::vector<char> gt_seen(static_cast<std::size_t>(num_gts), 0);
    std::vector<char> q_seen(static_cast<std::size_t>(num_queries), 0);
    for (const auto& [q, g] : match.pairs) {
        if (q < 0 || q >= num_queries || g < 0 || g >= num_gts)
            throw shape_error("detection_loss: match indices out of range");
        if (gt_seen[static_cast<std::size_t>(g)] || q_seen[static_cast<std::size_t>(q)])
            throw shape_error("detection_loss: match is not a partial injection");
        gt_seen[static_cast<std::size_t>(g)] = 1;
        q_seen[static_cast<std::size_t>(q)] = 1;
    }
}

inline void require_finite_term(const Tensor& t, const char* name) {
    if (!std::isfinite(t.value()))
        throw numeric_error(std::string("loss: ") + name + " is not finite");
}

}  // namespace detail

// Supervised losses for one image. Pseudo-labeled queries (a subset of the
// unmatched set) act as UNKNOWN-class foreground; they carry no box target.
inline LossBreakdown detection_loss(const ForwardOutput& out,
                                    const std::vector<InstanceAnnotation>& gts,
                                    const std::vector<int>& pseudo_queries,
                                    const MatchResult& match,
                                    const DetectionLossConfig& cfg = {}) {
    const int m = out.class_logits.rows();
    const int width = out.class_logits.cols();
    const int n = static_cast<int>(gts.size());
    if (out.boxes.rows() != m || out.boxes.cols() != 4 || out.objectness_logits.rows() != m)
        throw shape_error("detection_loss: output tensors disagree on query count");
    detail::require_valid_match(match, m, n);

    std::vector<char> is_fg(static_cast<std::size_t>(m), 0);
    for (int q : match.matched_queries) is_fg[static_cast<std::size_t>(q)] = 1;
    for (int q : pseudo_queries) {
        if (q < 0 || q >= m) throw parameter_error("detection_loss: pseudo query out of range");
        if (is_fg[static_cast<std::size_t>(q)])
            throw parameter_error("detection_loss: pseudo query " + std::to_string(q) +
                                  " is already matched or duplicated");
        is_fg[static_cast<std::size_t>(q)] = 1;
    }

    // L_c: cross-entropy against a per-query target distribution. Matched
    // queries aim at their class, pseudo-labeled ones at UNKNOWN, and the
    // background remainder at a down-weighted uniform distribution.
    Tensor target = Tensor::zeros({m, width});
    const int num_bg = m - n - static_cast<int>(pseudo_queries.size());
    for (int q = 0; q < m; ++q)
        if (!is_fg[static_cast<std::size_t>(q)])
            for (int c = 0; c < width; ++c)
                target.at(q, c) = cfg.background_coef / width;
    for (const auto& [q, g] : match.pairs) {
        const int label = gts[static_cast<std::size_t>(g)].label;
        if (label < 0 || label >= width - 1)
            throw data_error("detection_loss: ground-truth label " + std::to_string(label) +
                             " outside the known-class range");
        target.at(q, label) = 1.0;
    }
    for (int q : pseudo_queries) target.at(q, width - 1) = 1.0;
    const double denom = n + static_cast<double>(pseudo_queries.size()) +
                         cfg.background_coef * num_bg;
    const Tensor logp = log_softmax_rows(out.class_logits);
    LossBreakdown b;
    b.alpha = cfg.alpha;
    b.l_c = mul_scalar(neg(sum(mul(logp, target))), 1.0 / denom);

    // L_r: L1 + (1 - gIoU) over matched pairs, plus a wrapped smooth-L1
    // angle term in oriented mode.
    if (n == 0) {
        b.l_r = Tensor::scalar(0.0);
    } else {
        std::vector<int> rows;
        std::vector<double> gt_vals;
        std::vector<double> gt_angles;
        for (const auto& [q, g] : match.pairs) {
            rows.push_back(q);
            const OrientedBox& ob = gts[static_cast<std::size_t>(g)].box;
            gt_vals.insert(gt_vals.end(), {ob.cx, ob.cy, ob.w, ob.h});
            gt_angles.push_back(ob.theta);
        }
        const Tensor pred = gather_rows(out.boxes, rows);
        const Tensor gt_boxes = Tensor::from({n, 4}, std::move(gt_vals));
        const Tensor l1 = sum(abs(sub(pred, gt_boxes)));
        const Tensor giou_term = sum(sub(Tensor::full({n, 1}, 1.0), giou_rows(pred, gt_boxes)));
        Tensor reg = add(l1, giou_term);
        if (out.theta.defined()) {
            const Tensor pred_theta = gather_rows(out.theta, rows);
            const Tensor gt_theta = Tensor::from({n, 1}, std::move(gt_angles));
            reg = add(reg, sum(smooth_l1(wrap_angle(sub(pred_theta, gt_theta)), cfg.angle_beta)));
        }
        b.l_r = mul_scalar(reg, 1.0 / n);
    }

    // L_o: binary objectness, foreground = matched + pseudo-labeled.
    Tensor obj_target = Tensor::zeros({m, 1});
    for (int q = 0; q < m; ++q) obj_target.at(q, 0) = is_fg[static_cast<std::size_t>(q)] ? 1.0 : 0.0;
    b.l_o = mul_scalar(sum(bce_with_logits(out.objectness_logits, obj_target)), 1.0 / m);

    b.l_cur = Tensor::scalar(0.0);
    detail::require_finite_term(b.l_c, "L_c");
    detail::require_finite_term(b.l_r, "L_r");
    detail::require_finite_term(b.l_o, "L_o");
    b.total = add(add(b.l_c, b.l_r),
                  add(mul_scalar(b.l_o, cfg.alpha), mul_scalar(b.l_cur, cfg.l_cur_weight)));
    return b;
}

// Recomposes a breakdown with the alignment term filled in.
inline LossBreakdown total_loss(const LossBreakdown& det, const Tensor& l_cur,
                                const DetectionLossConfig& cfg = {}) {
    if (l_cur.size() != 1) throw shape_error("total_loss: L_cur must be scalar");
    LossBreakdown b = det;
    b.alpha = cfg.alpha;
    b.l_cur = l_cur;
    detail::require_finite_term(b.l_c, "L_c");
    detail::require_finite_term(b.l_r, "L_r");
    detail::require_finite_term(b.l_o, "L_o");
    detail::require_finite_term(b.l_cur, "L_cur");
    b.total = add(add(b.l_c, b.l_r),
                  add(mul_scalar(b.l_o, cfg.alpha), mul_scalar(b.l_cur, cfg.l_cur_weight)));
    detail::require_finite_term(b.total, "total");
    return b;
}

}  // namespace owd
