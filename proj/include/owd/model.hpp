#pragma once

// Desk-scale query-based detector: strided convolutional backbone emitting
// multi-scale features, pre-LN transformer encoder over flattened tokens,
// decoder with M learnable object queries, and prediction heads
// (classification over known classes + UNKNOWN, binary objectness, box
// regression, optional angle).

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "owd/common.hpp"
#include "owd/data.hpp"
#include "owd/geometry.hpp"
#include "owd/rng.hpp"
#include "owd/tensor.hpp"

namespace owd {

struct DetectorConfig {
    int num_queries = 250;
    int embed_dim = 64;
    int num_scales = 3;       // /8, /16, /32 feature strides
    int num_known_classes = 1;
    bool oriented = false;
    int attention_heads = 4;
    int encoder_layers = 2;
    int decoder_layers = 2;
    int ffn_mult = 2;
    int input_size = 128;

    void validate() const {
        if (num_queries < 1) throw parameter_error("config: num_queries must be >= 1");
        if (embed_dim < 8 || embed_dim % 2 != 0)
            throw parameter_error("config: embed_dim must be even and >= 8");
        if (num_scales < 1 || num_scales > 3)
            throw parameter_error("config: num_scales must lie in [1,3]");
        if (num_known_classes < 1) throw parameter_error("config: need at least one known class");
        if (attention_heads < 1 || embed_dim % attention_heads != 0)
            throw parameter_error("config: attention_heads must divide embed_dim");
        if (encoder_layers < 1 || decoder_layers < 1)
            throw parameter_error("config: need at least one encoder and decoder layer");
        if (ffn_mult < 1) throw parameter_error("config: ffn_mult must be >= 1");
        const int coarsest = 8 << (num_scales - 1);
        if (input_size < coarsest || input_size % coarsest != 0)
            throw parameter_error("config: input_size must be a positive multiple of " +
                                  std::to_string(coarsest));
    }
    int scale_size(int i) const { return input_size / (8 << i); }
    int classifier_width() const { return num_known_classes + 1; }  // final column = UNKNOWN
};

inline nlohmann::json detector_config_to_json(const DetectorConfig& c) {
    return {{"num_queries", c.num_queries},
            {"embed_dim", c.embed_dim},
            {"num_scales", c.num_scales},
            {"num_known_classes", c.num_known_classes},
            {"oriented", c.oriented},
            {"attention_heads", c.attention_heads},
            {"encoder_layers", c.encoder_layers},
            {"decoder_layers", c.decoder_layers},
            {"ffn_mult", c.ffn_mult},
            {"input_size", c.input_size}};
}

inline DetectorConfig detector_config_from_json(const nlohmann::json& j) {
    DetectorConfig c;
    c.num_queries = j.value("num_queries", c.num_queries);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.num_scales = j.value("num_scales", c.num_scales);
    c.num_known_classes = j.value("num_known_classes", c.num_known_classes);
    c.oriented = j.value("oriented", c.oriented);
    c.attention_heads = j.value("attention_heads", c.attention_heads);
    c.encoder_layers = j.value("encoder_layers", c.encoder_layers);
    c.decoder_layers = j.value("decoder_layers", c.decoder_layers);
    c.ffn_mult = j.value("ffn_mult", c.ffn_mult);
    c.input_size = j.value("input_size", c.input_size);
    c.validate();
    return c;
}

struct DetectorState {
    DetectorConfig config;
    bool frozen = false;
    std::vector<std::pair<std::string, Tensor>> params;  // insertion-ordered

    Tensor& param(const std::string& name) {
        for (auto& [n, t] : params)
            if (n == name) return t;
        throw parameter_error("detector: no parameter named '" + name + "'");
    }
    const Tensor& param(const std::string& name) const {
        for (const auto& [n, t] : params)
            if (n == name) return t;
        throw parameter_error("detector: no parameter named '" + name + "'");
    }
    void add_param(const std::string& name, Tensor t) {
        for (auto& [n, unused] : params)
            if (n == name) throw parameter_error("detector: duplicate parameter '" + name + "'");
        params.emplace_back(name, std::move(t));
    }
    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : params) n += t.size();
        return n;
    }
    // Order-sensitive digest over names and raw value bytes.
    std::uint64_t parameter_hash() const {
        std::uint64_t h = 1469598103934665603ULL;
        for (const auto& [name, t] : params) {
            h = fnv1a(name.data(), name.size(), h);
            h = fnv1a(t.values().data(), t.values().size() * sizeof(double), h);
        }
        return h;
    }
    void zero_grads() {
        for (auto& [name, t] : params) t.node().zero_grad();
    }
};

namespace detail {

inline Tensor init_weight(std::vector<int> shape, int fan_in, Rng& rng, bool trainable) {
    return Tensor::randn(std::move(shape), rng, 1.0 / std::sqrt(static_cast<double>(fan_in)),
                         trainable);
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

inline void add_attention_params(DetectorState& s, const std::string& prefix, Rng& rng) {
    const int d = s.config.embed_dim;
    for (const char* leaf : {"wq", "wk", "wv", "wo"})
        s.add_param(prefix + "." + leaf, init_weight({d, d}, d, rng, true));
    for (const char* leaf : {"bq", "bk", "bv", "bo"})
        s.add_param(prefix + "." + leaf, Tensor::zeros({1, d}, true));
}

inline void add_ffn_params(DetectorState& s, const std::string& prefix, Rng& rng) {
    const int d = s.config.embed_dim;
    const int hidden = d * s.config.ffn_mult;
    s.add_param(prefix + ".w1", init_weight({d, hidden}, d, rng, true));
    s.add_param(prefix + ".b1", Tensor::zeros({1, hidden}, true));
    s.add_param(prefix + ".w2", init_weight({hidden, d}, hidden, rng, true));
    s.add_param(prefix + ".b2", Tensor::zeros({1, d}, true));
}

inline void add_classifier_params(DetectorState& s, Rng& rng) {
    const int d = s.config.embed_dim;
    const int width = s.config.classifier_width();
    s.add_param("head.class.w", init_weight({d, width}, d, rng, true));
    s.add_param("head.class.b", Tensor::zeros({1, width}, true));
}

}  // namespace detail

// Builds a freshly initialized detector; identical seeds give parameter-wise
// identical states.
inline DetectorState init_detector(const DetectorConfig& config, std::uint64_t seed) {
    config.validate();
    DetectorState s;
    s.config = config;
    Rng rng(seed);
    const int d = config.embed_dim;

    // Backbone: three stride-2 stem convs to /8, then one stride-2 conv per
    // extra scale. Channel plan 3 -> 16 -> 32 -> D -> D -> D.
    const int stem_ch[4] = {3, 16, 32, d};
    for (int i = 0; i < 3; ++i) {
        const int cin = stem_ch[i], cout = stem_ch[i + 1];
        s.add_param("backbone.conv" + std::to_string(i) + ".w",
                    detail::init_weight({cout, cin, 3, 3}, cin * 9, rng, true));
        s.add_param("backbone.conv" + std::to_string(i) + ".b", Tensor::zeros({1, cout}, true));
    }
    for (int i = 1; i < config.num_scales; ++i) {
        s.add_param("backbone.down" + std::to_string(i) + ".w",
                    detail::init_weight({d, d, 3, 3}, d * 9, rng, true));
        s.add_param("backbone.down" + std::to_string(i) + ".b", Tensor::zeros({1, d}, true));
    }

    // Learned position pieces: token position = row + col + scale embedding.
    const int h0 = config.scale_size(0);
    s.add_param("pos.row", Tensor::randn({h0, d}, rng, 0.02, true));
    s.add_param("pos.col", Tensor::randn({h0, d}, rng, 0.02, true));
    s.add_param("pos.scale", Tensor::randn({config.num_scales, d}, rng, 0.02, true));

    for (int l = 0; l < config.encoder_layers; ++l) {
        detail::add_attention_params(s, "enc" + std::to_string(l) + ".attn", rng);
        detail::add_ffn_params(s, "enc" + std::to_string(l) + ".ffn", rng);
    }
    s.add_param("query.embed", Tensor::randn({config.num_queries, d}, rng, 0.5, true));
    for (int l = 0; l < config.decoder_layers; ++l) {
        detail::add_attention_params(s, "dec" + std::to_string(l) + ".self", rng);
        detail::add_attention_params(s, "dec" + std::to_string(l) + ".cross", rng);
        detail::add_ffn_params(s, "dec" + std::to_string(l) + ".ffn", rng);
    }

    detail::add_classifier_params(s, rng);
    s.add_param("head.obj.w", detail::init_weight({d, 1}, d, rng, true));
    s.add_param("head.obj.b", Tensor::zeros({1, 1}, true));
    s.add_param("head.box.w1", detail::init_weight({d, d}, d, rng, true));
    s.add_param("head.box.b1", Tensor::zeros({1, d}, true));
    s.add_param("head.box.w2", detail::init_weight({d, 4}, d, rng, true));
    s.add_param("head.box.b2", Tensor::zeros({1, 4}, true));
    // Per-query box prior: queries start on a grid so early training has
    // spatially diverse proposals.
    {
        Tensor prior = Tensor::zeros({config.num_queries, 4}, true);
        const int gcols = static_cast<int>(std::ceil(std::sqrt(double(config.num_queries))));
        const int grows = (config.num_queries + gcols - 1) / gcols;
        for (int q = 0; q < config.num_queries; ++q) {
            const double cx = (q % gcols + 0.5) / gcols;
            const double cy = (q / gcols + 0.5) / grows;
            prior.at(q, 0) = detail::logit(std::clamp(cx, 0.05, 0.95));
            prior.at(q, 1) = detail::logit(std::clamp(cy, 0.05, 0.95));
            prior.at(q, 2) = detail::logit(0.33);
            prior.at(q, 3) = detail::logit(0.33);
        }
        s.add_param("head.box.prior", std::move(prior));
    }
    if (config.oriented) {
        s.add_param("head.angle.w", detail::init_weight({d, 1}, d, rng, true));
        s.add_param("head.angle.b", Tensor::zeros({1, 1}, true));
    }
    return s;
}

struct ForwardOutput {
    std::vector<SpatialMap> encoder_features;  // E_i, channels = D
    Tensor z;                 // [M, D] object query embeddings
    Tensor class_logits;      // [M, K+1], UNKNOWN last
    Tensor objectness_logits; // [M, 1]
    Tensor boxes;             // [M, 4] (cx, cy, w, h), sigmoid-squashed
    Tensor theta;             // [M, 1] in (-pi/2, pi/2); only when oriented

    Box box(int q) const { return Box{boxes.at(q, 0), boxes.at(q, 1), boxes.at(q, 2), boxes.at(q, 3)}; }
    OrientedBox oriented_box(int q) const {
        return OrientedBox{boxes.at(q, 0), boxes.at(q, 1), boxes.at(q, 2), boxes.at(q, 3),
                           theta.defined() ? theta.at(q, 0) : 0.0};
    }
};

namespace detail {

inline Tensor multi_head_attention(const Tensor& q_in, const Tensor& kv_in, const DetectorState& s,
                                   const std::string& prefix, int heads) {
    const int d = s.config.embed_dim;
    const int dh = d / heads;
    const Tensor q = linear(q_in, s.param(prefix + ".wq"), s.param(prefix + ".bq"));
    const Tensor k = linear(kv_in, s.param(prefix + ".wk"), s.param(prefix + ".bk"));
    const Tensor v = linear(kv_in, s.param(prefix + ".wv"), s.param(prefix + ".bv"));
    std::vector<Tensor> head_outs;
    for (int h = 0; h < heads; ++h) {
        const Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
        const Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
        const Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
        const Tensor scores = mul_scalar(matmul(qh, transpose(kh)), 1.0 / std::sqrt(double(dh)));
        head_outs.push_back(matmul(softmax_rows(scores), vh));
    }
    return linear(concat_cols(head_outs), s.param(prefix + ".wo"), s.param(prefix + ".bo"));
}

inline Tensor ffn_block(const Tensor& x, const DetectorState& s, const std::string& prefix) {
    const Tensor h = relu(linear(x, s.param(prefix + ".w1"), s.param(prefix + ".b1")));
    return linear(h, s.param(prefix + ".w2"), s.param(prefix + ".b2"));
}

}  // namespace detail

// Full forward pass. Frozen states record no tape (their parameters carry
// requires_grad = false), so teacher passes are cheap.
inline ForwardOutput forward(const DetectorState& state, const Image& image) {
    const DetectorConfig& cfg = state.config;
    if (image.channels != 3 || image.height != cfg.input_size || image.width != cfg.input_size)
        throw shape_error("forward: expected 3x" + std::to_string(cfg.input_size) + "x" +
                          std::to_string(cfg.input_size) + " image");
    Tensor x = Tensor::from({3, image.height, image.width}, image.data);

    for (int i = 0; i < 3; ++i) {
        const std::string p = "backbone.conv" + std::to_string(i);
        x = relu(conv2d(x, state.param(p + ".w"), state.param(p + ".b"), 2, 1));
    }
    std::vector<Tensor> scale_maps{x};
    for (int i = 1; i < cfg.num_scales; ++i) {
        const std::string p = "backbone.down" + std::to_string(i);
        scale_maps.push_back(
            relu(conv2d(scale_maps.back(), state.param(p + ".w"), state.param(p + ".b"), 2, 1)));
    }

    // Flatten to tokens and attach learned row/col/scale position embeddings.
    std::vector<Tensor> token_blocks;
    std::vector<int> scale_sizes;
    for (int i = 0; i < cfg.num_scales; ++i) {
        const int n = cfg.scale_size(i);
        scale_sizes.push_back(n);
        std::vector<int> rows, cols, scales;
        for (int yy = 0; yy < n; ++yy)
            for (int xx = 0; xx < n; ++xx) {
                rows.push_back(yy);
                cols.push_back(xx);
                scales.push_back(i);
            }
        Tensor pos = add(gather_rows(state.param("pos.row"), rows),
                         gather_rows(state.param("pos.col"), cols));
        pos = add(pos, gather_rows(state.param("pos.scale"), scales));
        token_blocks.push_back(add(chw_to_tokens(scale_maps[static_cast<std::size_t>(i)]), pos));
    }
    Tensor tokens = token_blocks.size() == 1 ? token_blocks[0] : concat_rows(token_blocks);

    for (int l = 0; l < cfg.encoder_layers; ++l) {
        const std::string p = "enc" + std::to_string(l);
        const Tensor h = layernorm_rows(tokens);
        tokens = add(tokens, detail::multi_head_attention(h, h, state, p + ".attn",
                                                          cfg.attention_heads));
        tokens = add(tokens, detail::ffn_block(layernorm_rows(tokens), state, p + ".ffn"));
    }

    ForwardOutput out;
    int offset = 0;
    for (int i = 0; i < cfg.num_scales; ++i) {
        const int n = scale_sizes[static_cast<std::size_t>(i)];
        SpatialMap e(n, n, cfg.embed_dim);
        for (int yy = 0; yy < n; ++yy)
            for (int xx = 0; xx < n; ++xx)
                for (int c = 0; c < cfg.embed_dim; ++c)
                    e.at(yy, xx, c) = tokens.at(offset + yy * n + xx, c);
        out.encoder_features.push_back(std::move(e));
        offset += n * n;
    }

    Tensor q = state.param("query.embed");
    for (int l = 0; l < cfg.decoder_layers; ++l) {
        const std::string p = "dec" + std::to_string(l);
        const Tensor h = layernorm_rows(q);
        q = add(q, detail::multi_head_attention(h, h, state, p + ".self", cfg.attention_heads));
        q = add(q, detail::multi_head_attention(layernorm_rows(q), tokens, state, p + ".cross",
                                                cfg.attention_heads));
        q = add(q, detail::ffn_block(layernorm_rows(q), state, p + ".ffn"));
    }
    out.z = layernorm_rows(q);

    out.class_logits = linear(out.z, state.param("head.class.w"), state.param("head.class.b"));
    out.objectness_logits = linear(out.z, state.param("head.obj.w"), state.param("head.obj.b"));
    const Tensor box_h = relu(linear(out.z, state.param("head.box.w1"), state.param("head.box.b1")));
    const Tensor box_raw = linear(box_h, state.param("head.box.w2"), state.param("head.box.b2"));
    out.boxes = sigmoid(add(box_raw, state.param("head.box.prior")));
    if (cfg.oriented) {
        const Tensor a = linear(out.z, state.param("head.angle.w"), state.param("head.angle.b"));
        out.theta = add_scalar(mul_scalar(sigmoid(a), kPi), -kHalfPi);
    }
    return out;
}

// Deep value copy with frozen = true; training the source never touches it.
inline DetectorState clone_detached(const DetectorState& state) {
    DetectorState c;
    c.config = state.config;
    c.frozen = true;
    for (const auto& [name, t] : state.params) c.add_param(name, detach(t));
    return c;
}

// Grows the classifier by new_class_count fresh classes; existing class
// logits (and the UNKNOWN column, which stays last) reproduce exactly.
inline DetectorState extend_known_classes(const DetectorState& state, int new_class_count,
                                          std::uint64_t seed) {
    if (new_class_count < 1)
        throw parameter_error("extend_known_classes: new_class_count must be >= 1");
    if (state.frozen) throw protocol_error("extend_known_classes: cannot grow a frozen state");
    DetectorState out;
    out.config = state.config;
    out.config.num_known_classes += new_class_count;
    out.frozen = false;
    Rng rng(seed);
    const int d = state.config.embed_dim;
    const int old_known = state.config.num_known_classes;
    const int new_width = out.config.classifier_width();
    for (const auto& [name, t] : state.params) {
        if (name == "head.class.w" || name == "head.class.b") continue;
        Tensor copy = Tensor::zeros(t.shape(), true);
        copy.values() = t.values();
        out.add_param(name, std::move(copy));
    }
    const Tensor& old_w = state.param("head.class.w");
    const Tensor& old_b = state.param("head.class.b");
    Tensor w = detail::init_weight({d, new_width}, d, rng, true);
    Tensor b = Tensor::zeros({1, new_width}, true);
    for (int r = 0; r < d; ++r) {
        for (int c = 0; c < old_known; ++c) w.at(r, c) = old_w.at(r, c);
        w.at(r, new_width - 1) = old_w.at(r, old_known);  // UNKNOWN stays last
    }
    for (int c = 0; c < old_known; ++c) b.at(0, c) = old_b.at(0, c);
    b.at(0, new_width - 1) = old_b.at(0, old_known);
    out.add_param("head.class.w", std::move(w));
    out.add_param("head.class.b", std::move(b));
    // Keep the original parameter ordering contract: class head params exist
    // in both states; ordering differences only affect the hash, which is
    // expected to change here anyway.
    return out;
}

// ---- state persistence ----

inline nlohmann::json detector_state_to_json(const DetectorState& s) {
    nlohmann::json j;
    j["format_version"] = 1;
    j["config"] = detector_config_to_json(s.config);
    j["frozen"] = s.frozen;
    j["params"] = nlohmann::json::array();
    for (const auto& [name, t] : s.params)
        j["params"].push_back({{"name", name}, {"shape", t.shape()}, {"values", t.values()}});
    return j;
}

inline DetectorState detector_state_from_json(const nlohmann::json& j) {
    DetectorState s;
    try {
        if (j.at("format_version").get<int>() != 1)
            throw data_error("checkpoint: unsupported format version");
        s.config = detector_config_from_json(j.at("config"));
        s.frozen = j.value("frozen", false);
        for (const auto& p : j.at("params")) {
            const auto shape = p.at("shape").get<std::vector<int>>();
            auto values = p.at("values").get<std::vector<double>>();
            s.add_param(p.at("name").get<std::string>(),
                        Tensor::from(shape, std::move(values), !s.frozen));
        }
    } catch (const nlohmann::json::exception& e) {
        throw data_error(std::string("checkpoint JSON: ") + e.what());
    }
    return s;
}

}  // namespace owd
