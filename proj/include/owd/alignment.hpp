#pragma once

// Semi-supervised feature alignment: the current model sees an image and its
// augmented twin, the frozen detached model sees the augmented twin, and a
// redundancy-reduction cross-correlation loss ties the three embedding sets
// together, L_cur = L_F(z_a, z) + L_F(G(z_a), z_bar_a). The mapping network
// G projects current-model queries into the detached model's space.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "owd/common.hpp"
#include "owd/data.hpp"
#include "owd/losses.hpp"
#include "owd/matching.hpp"
#include "owd/model.hpp"
#include "owd/optim.hpp"
#include "owd/pseudolabel.hpp"
#include "owd/rng.hpp"
#include "owd/tensor.hpp"

namespace owd {

struct MappingNetwork {
    int dim = 0;
    std::vector<std::pair<std::string, Tensor>> params;

    const Tensor& param(const std::string& name) const {
        for (const auto& [n, t] : params)
            if (n == name) return t;
        throw parameter_error("mapping network: no parameter named '" + name + "'");
    }
    void zero_grads() {
        for (auto& [name, t] : params) t.node().zero_grad();
    }
    std::uint64_t parameter_hash() const {
        std::uint64_t h = 1469598103934665603ULL;
        for (const auto& [name, t] : params) {
            h = fnv1a(name.data(), name.size(), h);
            h = fnv1a(t.values().data(), t.values().size() * sizeof(double), h);
        }
        return h;
    }
};

// Two-layer projector D -> 2D -> D with a normalization between layers.
inline MappingNetwork init_mapping_network(int dim, std::uint64_t seed) {
    if (dim < 1) throw parameter_error("mapping network: dim must be >= 1");
    MappingNetwork g;
    g.dim = dim;
    Rng rng(seed);
    const int hidden = 2 * dim;
    g.params.emplace_back("g.w1", Tensor::randn({dim, hidden}, rng, 1.0 / std::sqrt(double(dim)), true));
    g.params.emplace_back("g.b1", Tensor::zeros({1, hidden}, true));
    g.params.emplace_back("g.w2",
                          Tensor::randn({hidden, dim}, rng, 1.0 / std::sqrt(double(hidden)), true));
    g.params.emplace_back("g.b2", Tensor::zeros({1, dim}, true));
    return g;
}

inline Tensor apply_mapping(const MappingNetwork& g, const Tensor& x) {
    if (x.rank() != 2 || x.cols() != g.dim)
        throw shape_error("mapping network: expected [n, " + std::to_string(g.dim) + "] input");
    const Tensor h = relu(layernorm_rows(linear(x, g.param("g.w1"), g.param("g.b1"))));
    return linear(h, g.param("g.w2"), g.param("g.b2"));
}

struct AlignmentDiagnostics {
    std::vector<int> zero_variance_dims_a;
    std::vector<int> zero_variance_dims_b;
};

// Cross-correlation alignment loss: standardize each dimension over the n
// axis, C = A_hat^T B_hat / n, then push C toward the identity. The variance
// floor eps keeps zero-variance dimensions finite (and flags them).
inline Tensor feature_alignment_loss(const Tensor& a, const Tensor& b, double lambda_offdiag,
                                     AlignmentDiagnostics* diagnostics = nullptr,
                                     double eps = 1e-12) {
    if (a.rank() != 2 || b.rank() != 2 || a.rows() != b.rows() || a.cols() != b.cols())
        throw shape_error("feature_alignment_loss: embeddings must share an [n, D] shape");
    const int n = a.rows();
    const int d = a.cols();
    if (n < 2)
        throw parameter_error("feature_alignment_loss: need n >= 2 samples, got " +
                              std::to_string(n));

    auto standardize = [&](const Tensor& x, std::vector<int>* flagged) {
        const Tensor centered = sub_rowvec(x, mean_over_rows(x));
        const Tensor var = mean_over_rows(square(centered));
        if (flagged) {
            for (int j = 0; j < d; ++j)
                if (var.at(0, j) < 1e-10) flagged->push_back(j);
        }
        return div_rowvec(centered, sqrt(maximum_scalar(var, eps)));
    };
    const Tensor a_hat = standardize(a, diagnostics ? &diagnostics->zero_variance_dims_a : nullptr);
    const Tensor b_hat = standardize(b, diagnostics ? &diagnostics->zero_variance_dims_b : nullptr);
    const Tensor c = mul_scalar(matmul(transpose(a_hat), b_hat), 1.0 / n);

    Tensor eye = Tensor::zeros({d, d});
    Tensor off = Tensor::full({d, d}, 1.0);
    for (int j = 0; j < d; ++j) {
        eye.at(j, j) = 1.0;
        off.at(j, j) = 0.0;
    }
    const Tensor diag_term = sum(mul(square(sub(c, eye)), eye));
    const Tensor off_term = sum(mul(square(c), off));
    return add(diag_term, mul_scalar(off_term, lambda_offdiag));
}

// The D x D cross-correlation itself, for inspection in tests and reports.
inline Tensor cross_correlation(const Tensor& a, const Tensor& b, double eps = 1e-12) {
    if (a.rank() != 2 || b.rank() != 2 || a.rows() != b.rows() || a.cols() != b.cols())
        throw shape_error("cross_correlation: embeddings must share an [n, D] shape");
    if (a.rows() < 2) throw parameter_error("cross_correlation: need n >= 2 samples");
    auto standardize = [&](const Tensor& x) {
        const Tensor centered = sub_rowvec(x, mean_over_rows(x));
        const Tensor var = mean_over_rows(square(centered));
        return div_rowvec(centered, sqrt(maximum_scalar(var, eps)));
    };
    return mul_scalar(matmul(transpose(standardize(a)), standardize(b)), 1.0 / a.rows());
}

struct AlignmentBatch {
    Tensor z;        // current model, original images   [n, D]
    Tensor z_a;      // current model, augmented images  [n, D]
    Tensor z_bar_a;  // detached model, augmented images [n, D], no gradient
};

// L_cur of the paired batch. Gradient flows into the current model (through
// z and z_a) and into G; never into the detached embeddings.
inline Tensor ssl_loss(const AlignmentBatch& batch, const MappingNetwork& g,
                       double lambda_offdiag, AlignmentDiagnostics* diagnostics = nullptr) {
    if (batch.z_bar_a.requires_grad())
        throw protocol_error("ssl_loss: detached embeddings must not carry gradient");
    const Tensor first = feature_alignment_loss(batch.z_a, batch.z, lambda_offdiag, diagnostics);
    const Tensor second =
        feature_alignment_loss(apply_mapping(g, batch.z_a), batch.z_bar_a, lambda_offdiag);
    return add(first, second);
}

// ---- training steps ----

struct LabeledExample {
    int image_id = 0;
    Image image;
    std::vector<InstanceAnnotation> gts;
};

struct UnlabeledExample {
    int image_id = 0;
    Image image;
};

struct TrainSettings {
    AdamWConfig optimizer;          // lr 1e-4 by default
    DetectionLossConfig loss;       // alpha, background handling, L_cur weight
    PseudoLabelConfig pseudo;       // k = 10, aggregation, scorer
    AugmentationSpec augmentation;  // applied to the alignment twin
    double lambda_offdiag = 5e-3;
    bool pseudo_labels_enabled = true;
    bool pseudo_on_unlabeled = false;  // default: pseudo-label the labeled batch only
};

struct StepStats {
    double l_c = 0.0;
    double l_r = 0.0;
    double l_o = 0.0;
    double l_cur = 0.0;
    double total = 0.0;
};

namespace detail {

struct SupervisedTerms {
    Tensor l_c;
    Tensor l_r;
    Tensor l_o;
    int count = 0;
};

// Detection losses for one labeled image, appended to the running sums.
inline void accumulate_supervised(const DetectorState& current, const LabeledExample& ex,
                                  const TrainSettings& settings, SupervisedTerms& terms,
                                  const ForwardOutput& out) {
    const MatchResult match = hungarian_match(out.class_logits, out.boxes, ex.gts);
    std::vector<int> pseudo;
    if (settings.pseudo_labels_enabled) {
        std::vector<Box> gt_boxes;
        gt_boxes.reserve(ex.gts.size());
        for (const auto& g : ex.gts) gt_boxes.push_back(g.box.axis_aligned());
        pseudo = propose_pseudo_labels(out, match, gt_boxes, settings.pseudo).query_indices();
    }
    const LossBreakdown b = detection_loss(out, ex.gts, pseudo, match, settings.loss);
    terms.l_c = terms.count == 0 ? b.l_c : add(terms.l_c, b.l_c);
    terms.l_r = terms.count == 0 ? b.l_r : add(terms.l_r, b.l_r);
    terms.l_o = terms.count == 0 ? b.l_o : add(terms.l_o, b.l_o);
    terms.count += 1;
    (void)current;
}

}  // namespace detail

// One combined update: supervised detection on the labeled batch plus the
// alignment loss over original/augmented pairs of every image. Augmentation
// seeds derive from `rng`, so a fixed seed reproduces the step exactly.
inline StepStats semi_supervised_step(DetectorState& current, const DetectorState& detached,
                                      MappingNetwork& g,
                                      const std::vector<LabeledExample>& labeled,
                                      const std::vector<UnlabeledExample>& unlabeled,
                                      AdamW& optimizer, const TrainSettings& settings, Rng& rng) {
    if (!detached.frozen)
        throw protocol_error("semi_supervised_step: the detached model must be frozen");
    if (current.frozen) throw protocol_error("semi_supervised_step: current model is frozen");
    if (detached.config.embed_dim != current.config.embed_dim)
        throw shape_error("semi_supervised_step: embed dims disagree");
    if (labeled.empty() && unlabeled.empty())
        throw data_error("semi_supervised_step: empty batch");

    current.zero_grads();
    g.zero_grads();

    const bool align = settings.loss.l_cur_weight != 0.0;
    detail::SupervisedTerms terms;
    std::vector<Tensor> z_rows, za_rows, zbar_rows;

    auto align_pair = [&](const Image& image, const ForwardOutput& out) {
        AugmentationSpec spec = settings.augmentation;
        spec.seed = rng.next_u64();
        const Image twin = augment(image, spec);
        z_rows.push_back(out.z);
        za_rows.push_back(forward(current, twin).z);
        zbar_rows.push_back(forward(detached, twin).z);
    };

    for (const LabeledExample& ex : labeled) {
        const ForwardOutput out = forward(current, ex.image);
        detail::accumulate_supervised(current, ex, settings, terms, out);
        if (align) align_pair(ex.image, out);
    }
    for (const UnlabeledExample& ex : unlabeled) {
        if (!align) break;
        const ForwardOutput out = forward(current, ex.image);
        if (settings.pseudo_on_unlabeled) {
            LabeledExample as_labeled;
            as_labeled.image_id = ex.image_id;
            as_labeled.image = ex.image;
            detail::accumulate_supervised(current, as_labeled, settings, terms, out);
        }
        align_pair(ex.image, out);
    }

    StepStats stats;
    Tensor total;
    const double inv = terms.count > 0 ? 1.0 / terms.count : 0.0;
    if (terms.count > 0) {
        const Tensor l_c = mul_scalar(terms.l_c, inv);
        const Tensor l_r = mul_scalar(terms.l_r, inv);
        const Tensor l_o = mul_scalar(terms.l_o, inv);
        stats.l_c = l_c.value();
        stats.l_r = l_r.value();
        stats.l_o = l_o.value();
        total = add(add(l_c, l_r), mul_scalar(l_o, settings.loss.alpha));
    }
    if (align && !z_rows.empty()) {
        AlignmentBatch batch;
        batch.z = z_rows.size() == 1 ? z_rows[0] : concat_rows(z_rows);
        batch.z_a = za_rows.size() == 1 ? za_rows[0] : concat_rows(za_rows);
        batch.z_bar_a = zbar_rows.size() == 1 ? zbar_rows[0] : concat_rows(zbar_rows);
        const Tensor l_cur = ssl_loss(batch, g, settings.lambda_offdiag);
        stats.l_cur = l_cur.value();
        const Tensor weighted = mul_scalar(l_cur, settings.loss.l_cur_weight);
        total = total.defined() ? add(total, weighted) : weighted;
    }
    if (!total.defined()) total = Tensor::scalar(0.0);
    stats.total = total.value();
    if (!std::isfinite(stats.total)) throw numeric_error("semi_supervised_step: loss diverged");

    backward(total);
    optimizer.step(current.params);
    optimizer.step(g.params);
    return stats;
}

// Supervised-only pass over the labeled subset of a manifest; `epochs` full
// sweeps in a seed-shuffled order, one optimizer step per image.
inline void finetune_labeled(DetectorState& current, const DatasetManifest& manifest,
                             int epochs, AdamW& optimizer, const TrainSettings& settings,
                             Rng& rng) {
    if (epochs < 0) throw parameter_error("finetune_labeled: epochs must be >= 0");
    if (manifest.labeled_ids.empty()) throw data_error("finetune_labeled: no labeled images");
    if (epochs == 0) return;
    if (current.frozen) throw protocol_error("finetune_labeled: current model is frozen");

    for (int e = 0; e < epochs; ++e) {
        std::vector<int> order(manifest.labeled_ids.begin(), manifest.labeled_ids.end());
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[rng.uniform_index(i)]);
        for (int id : order) {
            current.zero_grads();
            LabeledExample ex;
            ex.image_id = id;
            ex.image = load_image(manifest, id);
            for (const InstanceAnnotation* ann : manifest.annotations_for(id))
                ex.gts.push_back(*ann);
            const ForwardOutput out = forward(current, ex.image);
            detail::SupervisedTerms terms;
            detail::accumulate_supervised(current, ex, settings, terms, out);
            const Tensor total =
                add(add(terms.l_c, terms.l_r), mul_scalar(terms.l_o, settings.loss.alpha));
            if (!std::isfinite(total.value()))
                throw numeric_error("finetune_labeled: loss diverged");
            backward(total);
            optimizer.step(current.params);
        }
    }
}

}  // namespace owd
