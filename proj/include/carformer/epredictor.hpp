#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "carformer/carformer.hpp"
#include "carformer/embeddings.hpp"
#include "carformer/errors.hpp"
#include "carformer/params.hpp"
#include "carformer/tensor.hpp"

namespace cf {

// ---------------------------------------------------------------------------
// architecture variants selectable from configs
// ---------------------------------------------------------------------------

enum class EpVariant {
    RotcrossQueryKeyCe12,
    RotcrossQueryKeyCe2,
    RotcrossQueryCe2,
    RotcrossKeyValueCe2,
    RotcrossKeyValueScaledCe2,
    RotnocrossCe12,
    CrossSpeed,
    CrossMixffn,
    TimeCrossQuery,
};

inline std::string to_string(EpVariant v) {
    switch (v) {
        case EpVariant::RotcrossQueryKeyCe12: return "rotcross-query-key-ce-1-2";
        case EpVariant::RotcrossQueryKeyCe2: return "rotcross-query-key-ce-2";
        case EpVariant::RotcrossQueryCe2: return "rotcross-query-ce-2";
        case EpVariant::RotcrossKeyValueCe2: return "rotcross-key-value-ce-2";
        case EpVariant::RotcrossKeyValueScaledCe2: return "rotcross-key-value-scaled-ce-2";
        case EpVariant::RotnocrossCe12: return "rotnocross-ce-1-2";
        case EpVariant::CrossSpeed: return "cross-speed";
        case EpVariant::CrossMixffn: return "cross-mixffn";
        case EpVariant::TimeCrossQuery: return "time-cross-query";
    }
    return "?";
}

inline EpVariant ep_variant_from_string(const std::string& s) {
    for (EpVariant v : {EpVariant::RotcrossQueryKeyCe12, EpVariant::RotcrossQueryKeyCe2,
                        EpVariant::RotcrossQueryCe2, EpVariant::RotcrossKeyValueCe2,
                        EpVariant::RotcrossKeyValueScaledCe2, EpVariant::RotnocrossCe12,
                        EpVariant::CrossSpeed, EpVariant::CrossMixffn,
                        EpVariant::TimeCrossQuery})
        if (to_string(v) == s) return v;
    throw ConfigError("unknown epredictor variant \"" + s + "\"");
}

struct EpVariantTraits {
    bool rope = false;
    bool cross_q = false, cross_k = false, cross_v = false;
    bool ce1 = false, ce2 = false;
    bool scaled = false;   // sqrt(3 d_head) at the CE layer
    bool speed = false;    // antisymmetric relative-speed score bias
    bool mixffn = false;   // mileage mix-FFN added to the decoder input
    bool time_input = false;  // decoder-side T added to the input

    bool any_cross() const { return cross_q || cross_k || cross_v; }
};

inline EpVariantTraits traits_of(EpVariant v) {
    EpVariantTraits t;
    switch (v) {
        case EpVariant::RotcrossQueryKeyCe12:
            t.rope = t.cross_q = t.cross_k = t.ce1 = t.ce2 = true;
            break;
        case EpVariant::RotcrossQueryKeyCe2:
            t.rope = t.cross_q = t.cross_k = t.ce2 = true;
            break;
        case EpVariant::RotcrossQueryCe2:
            t.rope = t.cross_q = t.ce2 = true;
            break;
        case EpVariant::RotcrossKeyValueCe2:
            t.rope = t.cross_k = t.cross_v = t.ce2 = true;
            break;
        case EpVariant::RotcrossKeyValueScaledCe2:
            t.rope = t.cross_k = t.cross_v = t.ce2 = t.scaled = true;
            break;
        case EpVariant::RotnocrossCe12:
            t.rope = t.ce1 = t.ce2 = true;
            break;
        case EpVariant::CrossSpeed:
            t.cross_k = t.cross_v = t.speed = true;
            break;
        case EpVariant::CrossMixffn:
            t.cross_k = t.cross_v = t.mixffn = true;
            break;
        case EpVariant::TimeCrossQuery:
            t.cross_q = t.time_input = true;
            break;
    }
    return t;
}

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

struct EPredictorConfig {
    int d_model = 64;  // must match the backbone
    int n_heads = 4;
    int n_labels = 12;
    int min_context = 8;  // c, the observations withheld from prediction
    double gamma = 1.0;
    double time_base = 30.0;
    double threshold = 0.7;
    int ffn_mult = 2;
    EpVariant variant = EpVariant::RotcrossKeyValueScaledCe2;

    int head_dim() const { return d_model / n_heads; }

    void validate() const {
        if (d_model % n_heads != 0)
            throw ConfigError("epredictor: d_model must divide by n_heads");
        if (head_dim() % 2 != 0)
            throw ConfigError("epredictor: head dim must be even for RoPE");
        if (threshold <= 0.0 || threshold >= 1.0)
            throw ConfigError("epredictor: threshold must be in (0,1)");
        if (min_context < 1) throw ConfigError("epredictor: min_context must be >= 1");
        if (n_labels < 1) throw ConfigError("epredictor: n_labels must be >= 1");
    }

    nlohmann::json to_json() const {
        return {{"d_model", d_model},       {"n_heads", n_heads},
                {"n_labels", n_labels},     {"min_context", min_context},
                {"gamma", gamma},           {"time_base", time_base},
                {"threshold", threshold},   {"ffn_mult", ffn_mult},
                {"variant", to_string(variant)}};
    }

    static EPredictorConfig from_json(const nlohmann::json& j) {
        EPredictorConfig c;
        c.d_model = j.value("d_model", c.d_model);
        c.n_heads = j.value("n_heads", c.n_heads);
        c.n_labels = j.value("n_labels", c.n_labels);
        c.min_context = j.value("min_context", c.min_context);
        c.gamma = j.value("gamma", c.gamma);
        c.time_base = j.value("time_base", c.time_base);
        c.threshold = j.value("threshold", c.threshold);
        c.ffn_mult = j.value("ffn_mult", c.ffn_mult);
        c.variant = ep_variant_from_string(
            j.value("variant", std::string("rotcross-key-value-scaled-ce-2")));
        c.validate();
        return c;
    }
};

// ---------------------------------------------------------------------------
// speed bias
// ---------------------------------------------------------------------------

// Antisymmetric relative-speed matrix: entry (i, j) = s_i - s_j with
// s = m / t per position and s = 0 where t = 0 (zero-peak data).
inline Tensor speed_bias(const std::vector<double>& t_hours,
                         const std::vector<double>& km) {
    const int L = static_cast<int>(t_hours.size());
    if (static_cast<int>(km.size()) != L) throw ShapeError("speed_bias: length mismatch");
    std::vector<double> s(L, 0.0);
    for (int i = 0; i < L; ++i)
        if (t_hours[i] > 0.0) s[i] = km[i] / t_hours[i];
    std::vector<double> rel(static_cast<std::size_t>(L) * L);
    for (int i = 0; i < L; ++i)
        for (int j = 0; j < L; ++j)
            rel[static_cast<std::size_t>(i) * L + j] = s[i] - s[j];
    return Tensor::from({L, L}, std::move(rel));
}

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

struct EpOutput {
    Tensor probs;      // [L x N], sigmoid outputs
    Tensor ep_logits;  // [L x N]
    Tensor dt;         // [L x 1], scaled time to EP occurrence
};

// Autoregressive decoder over CarFormer hidden states. Layer 1 is causal
// self-attention over the decoder input stream (H(S) itself, per the
// dtc2errorpattern framing); layer 2 attends with the variant's Q/K/V routing
// against the encoder states.
class EPredictor {
public:
    explicit EPredictor(EPredictorConfig cfg) : cfg_(cfg) {
        cfg_.validate();
        const int d = cfg_.d_model, h = cfg_.ffn_mult * d;
        const auto tr = traits_of(cfg_.variant);
        params_.add("time_w", {1, d}, ParamKind::Embedding);
        params_.add("time_b", {d}, ParamKind::Bias);
        params_.add("mileage_table", {kMileageTableSize, d}, ParamKind::Embedding);
        for (int l = 0; l < 2; ++l) {
            std::string p = "layer" + std::to_string(l) + ".";
            for (const char* w : {"wq", "wk", "wv", "wo"})
                params_.add(p + w, {d, d}, ParamKind::LinearWeight);
            for (const char* b : {"bq", "bk", "bv", "bo"})
                params_.add(p + b, {d}, ParamKind::Bias);
            params_.add(p + "rms1", {d}, ParamKind::Gain);
            params_.add(p + "rms2", {d}, ParamKind::Gain);
            params_.add(p + "ffn_w1", {d, h}, ParamKind::FfnIntermediate);
            params_.add(p + "ffn_b1", {h}, ParamKind::Bias);
            params_.add(p + "ffn_w2", {h, d}, ParamKind::LinearWeight);
            params_.add(p + "ffn_b2", {d}, ParamKind::Bias);
        }
        if (tr.mixffn) {
            params_.add("mix_w1", {d, d}, ParamKind::LinearWeight);
            params_.add("mix_b1", {d}, ParamKind::Bias);
            params_.add("mix_conv_k", {d, 3}, ParamKind::LinearWeight);
            params_.add("mix_conv_b", {d}, ParamKind::Bias);
            params_.add("mix_w2", {d, d}, ParamKind::LinearWeight);
            params_.add("mix_b2", {d}, ParamKind::Bias);
        }
        params_.add("cls_w1", {d, h}, ParamKind::LinearWeight);
        params_.add("cls_b1", {h}, ParamKind::Bias);
        params_.add("cls_w2", {h, cfg_.n_labels}, ParamKind::LinearWeight);
        params_.add("cls_b2", {cfg_.n_labels}, ParamKind::Bias);
        params_.add("reg_w1", {d, h}, ParamKind::LinearWeight);
        params_.add("reg_b1", {h}, ParamKind::Bias);
        params_.add("reg_w2", {h, 1}, ParamKind::LinearWeight);
        params_.add("reg_b2", {1}, ParamKind::Bias);
    }

    const EPredictorConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    EpOutput forward(const Tensor& h_enc, const ModelInput& in) const {
        const int L = in.length();
        if (h_enc->rows() != L)
            throw ShapeError("epredictor: encoder/decoder length mismatch");
        const auto tr = traits_of(cfg_.variant);
        const auto mask = causal_mask(L);
        std::vector<int> positions(L);
        for (int i = 0; i < L; ++i) positions[i] = i;

        // decoder-side scaled time (base 30) and context embedding
        std::vector<double> t_scaled(L);
        for (int i = 0; i < L; ++i) t_scaled[i] = scale_time(in.t_hours[i], cfg_.time_base);
        Tensor T = time_embed(t_scaled, params_.get("time_w"), params_.get("time_b"));
        Tensor M = mileage_embed(params_.get("mileage_table"), in.km);
        Tensor ce = add(T, M);

        Tensor x = h_enc;
        if (tr.time_input) x = add(x, T);
        if (tr.mixffn) {
            Tensor p1 = linear(M, params_.get("mix_w1"), params_.get("mix_b1"));
            Tensor cv = conv1d_depthwise(p1, params_.get("mix_conv_k"),
                                         params_.get("mix_conv_b"));
            Tensor p2 = linear(gelu(cv), params_.get("mix_w2"), params_.get("mix_b2"));
            x = add(x, p2);
        }

        Tensor bias;
        if (tr.speed) bias = speed_bias(in.t_hours, in.km);

        // layer 1: causal self-attention
        x = block(0, x, x, tr.rope, tr.ce1 ? ce : Tensor(), Tensor(),
                  /*cross_q=*/false, /*cross_k=*/false, /*cross_v=*/false,
                  /*scaled=*/false, positions, mask);
        // layer 2: variant-routed attention against the encoder states
        x = block(1, x, h_enc, tr.rope, tr.ce2 ? ce : Tensor(), bias, tr.cross_q,
                  tr.cross_k, tr.cross_v, tr.scaled || tr.speed, positions, mask);

        EpOutput out;
        out.ep_logits = mlp(x, "cls");
        out.probs = sigmoid(out.ep_logits);
        out.dt = mlp(x, "reg");
        return out;
    }

private:
    Tensor mlp(const Tensor& x, const std::string& p) const {
        return linear(gelu(linear(x, params_.get(p + "_w1"), params_.get(p + "_b1"))),
                      params_.get(p + "_w2"), params_.get(p + "_b2"));
    }

    Tensor block(int l, const Tensor& x, const Tensor& enc, bool rope, const Tensor& ce,
                 const Tensor& score_bias, bool cross_q, bool cross_k, bool cross_v,
                 bool scaled, const std::vector<int>& positions,
                 const std::vector<std::uint8_t>& mask) const {
        std::string p = "layer" + std::to_string(l) + ".";
        const int nh = cfg_.n_heads, hd = cfg_.head_dim();
        Tensor q = linear(cross_q ? enc : x, params_.get(p + "wq"), params_.get(p + "bq"));
        Tensor k = linear(cross_k ? enc : x, params_.get(p + "wk"), params_.get(p + "bk"));
        Tensor v = linear(cross_v ? enc : x, params_.get(p + "wv"), params_.get(p + "bv"));
        if (ce.defined()) {
            q = add(q, ce);
            k = add(k, ce);
        }
        int score_terms = 1;
        if (scaled) score_terms = score_bias.defined() ? 2 : 3;  // speed: sqrt(2d)
        const double inv_scale = 1.0 / std::sqrt(static_cast<double>(score_terms) * hd);
        std::vector<Tensor> heads;
        heads.reserve(nh);
        for (int h = 0; h < nh; ++h) {
            Tensor qh = col_slice(q, h * hd, hd);
            Tensor kh = col_slice(k, h * hd, hd);
            Tensor vh = col_slice(v, h * hd, hd);
            if (rope) {
                qh = rope_rotate(qh, positions, kRopeTheta0);
                kh = rope_rotate(kh, positions, kRopeTheta0);
            }
            Tensor scores = matmul_bt(qh, kh);
            if (score_bias.defined()) scores = add(scores, score_bias);
            Tensor a = softmax_rows(scale(scores, inv_scale), &mask);
            heads.push_back(matmul(a, vh));
        }
        Tensor attn = linear(concat_cols(heads), params_.get(p + "wo"), params_.get(p + "bo"));
        Tensor y = rms_norm(add(x, attn), params_.get(p + "rms1"));
        Tensor f = linear(gelu(linear(y, params_.get(p + "ffn_w1"), params_.get(p + "ffn_b1"))),
                          params_.get(p + "ffn_w2"), params_.get(p + "ffn_b2"));
        return rms_norm(add(y, f), params_.get(p + "rms2"));
    }

    EPredictorConfig cfg_;
    ParamStore params_;
};

// ---------------------------------------------------------------------------
// losses and prediction
// ---------------------------------------------------------------------------

// Evaluated steps i = c .. n_events map to model positions i (observation
// count i at position i, with <s> at position 0).
inline std::vector<int> evaluated_steps(const ModelInput& in, int min_context) {
    int n_events = in.length() - 2;  // <s> and </s>
    if (n_events < min_context)
        throw ContextError("sequence has " + std::to_string(n_events) +
                           " events, below minimum context " +
                           std::to_string(min_context));
    std::vector<int> steps;
    for (int i = min_context; i <= n_events; ++i) steps.push_back(i);
    return steps;
}

inline std::vector<double> dense_labels(const std::vector<int>& label_ids, int n_labels) {
    std::vector<double> y(n_labels, 0.0);
    for (int id : label_ids) y.at(id) = 1.0;
    return y;
}

// L^ep = (1/(L-c)) sum_{i=c..L} [ (1/N) BCE_i ]; the per-sequence label is
// identical at every step.
inline Tensor ep_classification_loss(const EpOutput& out, const ModelInput& in,
                                     const std::vector<int>& label_ids,
                                     const EPredictorConfig& cfg) {
    const int n = cfg.n_labels;
    auto steps = evaluated_steps(in, cfg.min_context);
    auto y = dense_labels(label_ids, n);
    // One flat BCE over the contiguous evaluated rows [c .. L_ev].
    std::vector<double> labels;
    labels.reserve(steps.size() * n);
    for (std::size_t s = 0; s < steps.size(); ++s)
        for (int j = 0; j < n; ++j) labels.push_back(y[j]);
    int first = steps.front(), count = static_cast<int>(steps.size());
    Tensor block = row_block(out.probs, first, count);
    Tensor bce = bce_probs(block, labels);
    int n_events = in.length() - 2;
    double denom = std::max(1, n_events - cfg.min_context);
    return scale(bce, 1.0 / (denom * n));
}

// Mean Huber over steps c..L on the scaled time-to-occurrence; target at the
// final event is 0 by definition.
inline Tensor ep_time_loss(const EpOutput& out, const ModelInput& in,
                           const EPredictorConfig& cfg) {
    auto steps = evaluated_steps(in, cfg.min_context);
    const int L = in.length();
    int n_events = L - 2;
    double tL = in.t_hours[n_events];  // position of the last real event
    std::vector<double> target(L, 0.0);
    std::vector<std::uint8_t> inc(L, 0);
    for (int i : steps) {
        target[i] = scale_time(tL, cfg.time_base) - scale_time(in.t_hours[i], cfg.time_base);
        inc[i] = 1;
    }
    Tensor h = huber_sum(out.dt, target, inc, 1.0);
    double denom = std::max(1, n_events - cfg.min_context);
    return scale(h, 1.0 / denom);
}

inline Tensor ep_total_loss(const EpOutput& out, const ModelInput& in,
                            const std::vector<int>& label_ids,
                            const EPredictorConfig& cfg) {
    return add(ep_classification_loss(out, in, label_ids, cfg),
               scale(ep_time_loss(out, in, cfg), cfg.gamma));
}

// ---------------------------------------------------------------------------
// decoded predictions
// ---------------------------------------------------------------------------

struct StepPrediction {
    int step = 0;                     // observation count i
    std::vector<double> probs;        // [N]
    std::vector<int> predicted_eps;   // ids with prob >= threshold
    double hours_to_ep = 0.0;         // f_t^{-1}(dt_hat, 30)
};

inline std::vector<StepPrediction> predict(const EpOutput& out, const ModelInput& in,
                                           const EPredictorConfig& cfg,
                                           double threshold) {
    auto steps = evaluated_steps(in, cfg.min_context);
    std::vector<StepPrediction> preds;
    for (int i : steps) {
        StepPrediction p;
        p.step = i;
        for (int j = 0; j < cfg.n_labels; ++j) {
            double q = out.probs.at(i, j);
            p.probs.push_back(q);
            if (q >= threshold) p.predicted_eps.push_back(j);
        }
        p.hours_to_ep = unscale_time(out.dt.at(i, 0), cfg.time_base);
        preds.push_back(std::move(p));
    }
    return preds;
}

}  // namespace cf
