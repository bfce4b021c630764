#pragma once

// Object-query-guided pseudo-labeling: unmatched decoder queries modulate the
// multi-scale encoder features (a transposed matrix product per scale), the
// modulated maps are box-pooled into per-query objectness scores, and the
// top-k scorers that avoid ground-truth overlap become UNKNOWN pseudo-labels.
// Scoring runs on plain values; pseudo-labels are targets, never gradients.

#include <algorithm>
#include <string>
#include <vector>

#include "owd/common.hpp"
#include "owd/geometry.hpp"
#include "owd/matching.hpp"
#include "owd/model.hpp"
#include "owd/tensor.hpp"

namespace owd {

enum class ScaleAggregation { mean, max };

inline std::string to_string(ScaleAggregation a) {
    return a == ScaleAggregation::mean ? "mean" : "max";
}
inline ScaleAggregation scale_aggregation_from_string(const std::string& s) {
    if (s == "mean") return ScaleAggregation::mean;
    if (s == "max") return ScaleAggregation::max;
    throw parameter_error("aggregation must be 'mean' or 'max', got '" + s + "'");
}

struct QueryModulatedMaps {
    std::vector<SpatialMap> maps;  // one per scale; channel j belongs to candidate j
};

struct PseudoLabelEntry {
    int query = -1;
    Box box;
    double score = 0.0;
};

struct PseudoLabelSet {
    std::vector<PseudoLabelEntry> entries;  // scores non-increasing
    int k = 0;

    std::vector<int> query_indices() const {
        std::vector<int> out;
        out.reserve(entries.size());
        for (const auto& e : entries) out.push_back(e.query);
        return out;
    }
};

// F_i[h,w,j] = sum_d E_i[h,w,d] * Q[j,d] for every scale i.
inline QueryModulatedMaps modulate(const std::vector<SpatialMap>& features, const Tensor& queries) {
    if (queries.rank() != 2) throw shape_error("modulate: queries must be [num_candidates, D]");
    const int j_count = queries.rows();
    const int d = queries.cols();
    QueryModulatedMaps out;
    for (const SpatialMap& e : features) {
        if (e.channels != d)
            throw shape_error("modulate: feature channels " + std::to_string(e.channels) +
                              " != query dim " + std::to_string(d));
        SpatialMap f(e.height, e.width, j_count);
        for (int y = 0; y < e.height; ++y)
            for (int x = 0; x < e.width; ++x)
                for (int j = 0; j < j_count; ++j) {
                    double acc = 0.0;
                    for (int c = 0; c < d; ++c) acc += e.at(y, x, c) * queries.at(j, c);
                    f.at(y, x, j) = acc;
                }
        out.maps.push_back(std::move(f));
    }
    return out;
}

// Per-candidate score: box-pool channel j of each modulated map, then
// aggregate across scales.
inline std::vector<double> objectness_scores(const QueryModulatedMaps& maps,
                                             const std::vector<Box>& boxes,
                                             ScaleAggregation aggregation) {
    if (maps.maps.empty()) throw shape_error("objectness_scores: no scales");
    const int j_count = maps.maps.front().channels;
    for (const SpatialMap& f : maps.maps)
        if (f.channels != j_count) throw shape_error("objectness_scores: ragged channel counts");
    if (static_cast<int>(boxes.size()) != j_count)
        throw shape_error("objectness_scores: need exactly one box per candidate");

    std::vector<double> scores(boxes.size(), 0.0);
    for (int j = 0; j < j_count; ++j) {
        const Box& b = boxes[static_cast<std::size_t>(j)];
        bool first = true;
        double acc = 0.0;
        for (const SpatialMap& f : maps.maps) {
            if (!covers_cells(b, f.height, f.width))
                throw parameter_error("objectness_scores: candidate " + std::to_string(j) +
                                      " has a degenerate box (zero pooled cells at " +
                                      std::to_string(f.height) + "x" + std::to_string(f.width) + ")");
            const double pooled = pool_region(f, b, j);
            if (aggregation == ScaleAggregation::mean) {
                acc += pooled / static_cast<double>(maps.maps.size());
            } else {
                acc = first ? pooled : std::max(acc, pooled);
            }
            first = false;
        }
        scores[static_cast<std::size_t>(j)] = acc;
    }
    return scores;
}

// Ablation baseline: score a box by the channel-mean of the raw encoder
// features inside it, no query modulation involved.
inline std::vector<double> feature_average_scores(const std::vector<SpatialMap>& features,
                                                  const std::vector<Box>& boxes,
                                                  ScaleAggregation aggregation) {
    if (features.empty()) throw shape_error("feature_average_scores: no scales");
    std::vector<double> scores(boxes.size(), 0.0);
    for (std::size_t j = 0; j < boxes.size(); ++j) {
        const Box& b = boxes[j];
        bool first = true;
        double acc = 0.0;
        for (const SpatialMap& e : features) {
            if (!covers_cells(b, e.height, e.width))
                throw parameter_error("feature_average_scores: candidate " + std::to_string(j) +
                                      " has a degenerate box (zero pooled cells)");
            double channel_mean = 0.0;
            for (int c = 0; c < e.channels; ++c) channel_mean += pool_region(e, b, c);
            channel_mean /= e.channels;
            if (aggregation == ScaleAggregation::mean) {
                acc += channel_mean / static_cast<double>(features.size());
            } else {
                acc = first ? channel_mean : std::max(acc, channel_mean);
            }
            first = false;
        }
        scores[j] = acc;
    }
    return scores;
}

// Keeps the up-to-k highest-scoring candidates whose box does not overlap
// any ground-truth box beyond the threshold. Ties break to the lower query
// index.
inline PseudoLabelSet select_pseudo_labels(const std::vector<PseudoLabelEntry>& candidates,
                                           const std::vector<Box>& gt_boxes, int k,
                                           double overlap_threshold = 0.0) {
    if (k < 1) throw parameter_error("select_pseudo_labels: k must be >= 1");
    PseudoLabelSet out;
    out.k = k;
    std::vector<PseudoLabelEntry> survivors;
    for (const PseudoLabelEntry& c : candidates) {
        bool overlaps = false;
        for (const Box& g : gt_boxes)
            if (iou(c.box, g) > overlap_threshold) {
                overlaps = true;
                break;
            }
        if (!overlaps) survivors.push_back(c);
    }
    std::sort(survivors.begin(), survivors.end(), [](const PseudoLabelEntry& a, const PseudoLabelEntry& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.query < b.query;
    });
    if (static_cast<int>(survivors.size()) > k) survivors.resize(static_cast<std::size_t>(k));
    out.entries = std::move(survivors);
    return out;
}

enum class PseudoScorer { query_modulated, feature_average };

inline std::string to_string(PseudoScorer s) {
    return s == PseudoScorer::query_modulated ? "query_modulated" : "feature_average";
}
inline PseudoScorer pseudo_scorer_from_string(const std::string& s) {
    if (s == "query_modulated") return PseudoScorer::query_modulated;
    if (s == "feature_average") return PseudoScorer::feature_average;
    throw parameter_error("scorer must be 'query_modulated' or 'feature_average', got '" + s + "'");
}

struct PseudoLabelConfig {
    int k = 10;
    double overlap_threshold = 0.0;  // strict IoU > threshold rejects
    ScaleAggregation aggregation = ScaleAggregation::mean;
    PseudoScorer scorer = PseudoScorer::query_modulated;
};

// Full pipeline for one image: candidates are the unmatched queries with
// their own predicted boxes. Candidates whose box pools to zero cells at any
// scale are skipped rather than erroring; the strict contract lives in
// objectness_scores.
inline PseudoLabelSet propose_pseudo_labels(const ForwardOutput& out, const MatchResult& match,
                                            const std::vector<Box>& gt_boxes,
                                            const PseudoLabelConfig& cfg = {}) {
    std::vector<int> candidates;
    for (int q : match.unmatched_queries) {
        const Box b = out.box(q);
        bool poolable = true;
        for (const SpatialMap& e : out.encoder_features)
            if (!covers_cells(b, e.height, e.width)) {
                poolable = false;
                break;
            }
        if (poolable) candidates.push_back(q);
    }
    if (candidates.empty()) {
        PseudoLabelSet empty;
        empty.k = cfg.k;
        return empty;
    }

    std::vector<Box> boxes;
    boxes.reserve(candidates.size());
    for (int q : candidates) boxes.push_back(out.box(q));

    std::vector<double> scores;
    if (cfg.scorer == PseudoScorer::query_modulated) {
        Tensor q_embed = Tensor::zeros({static_cast<int>(candidates.size()), out.z.cols()});
        for (std::size_t r = 0; r < candidates.size(); ++r)
            for (int c = 0; c < out.z.cols(); ++c)
                q_embed.at(static_cast<int>(r), c) = out.z.at(candidates[r], c);
        scores = objectness_scores(modulate(out.encoder_features, q_embed), boxes, cfg.aggregation);
    } else {
        scores = feature_average_scores(out.encoder_features, boxes, cfg.aggregation);
    }

    std::vector<PseudoLabelEntry> entries;
    entries.reserve(candidates.size());
    for (std::size_t i = 0; i < candidates.size(); ++i)
        entries.push_back({candidates[i], boxes[i], scores[i]});
    return select_pseudo_labels(entries, gt_boxes, cfg.k, cfg.overlap_threshold);
}

}  // namespace owd
