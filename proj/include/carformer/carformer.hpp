#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "carformer/embeddings.hpp"
#include "carformer/errors.hpp"
#include "carformer/event_model.hpp"
#include "carformer/params.hpp"
#include "carformer/tensor.hpp"

namespace cf {

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

// Embedding/attention ablation variants selectable from configs.
enum class CarVariant { RotCe, Time, TimeMileage, TimeC2mM2c, TimeM2c, Gpt };

inline std::string to_string(CarVariant v) {
    switch (v) {
        case CarVariant::RotCe: return "rot-ce";
        case CarVariant::Time: return "time";
        case CarVariant::TimeMileage: return "time-mileage";
        case CarVariant::TimeC2mM2c: return "time-c2m-m2c";
        case CarVariant::TimeM2c: return "time-m2c";
        case CarVariant::Gpt: return "gpt";
    }
    return "?";
}

inline CarVariant car_variant_from_string(const std::string& s) {
    if (s == "rot-ce") return CarVariant::RotCe;
    if (s == "time") return CarVariant::Time;
    if (s == "time-mileage") return CarVariant::TimeMileage;
    if (s == "time-c2m-m2c") return CarVariant::TimeC2mM2c;
    if (s == "time-m2c") return CarVariant::TimeM2c;
    if (s == "gpt") return CarVariant::Gpt;
    throw ConfigError("unknown carformer variant \"" + s + "\"");
}

struct CarFormerConfig {
    int d_model = 64;
    int n_layers = 2;
    int n_heads = 4;
    int max_len = 64;
    int vocab_size = 200;
    CarVariant variant = CarVariant::RotCe;
    double alpha = 1.0;  // time-loss weight
    double beta = 1.0;   // random-loss weight
    double injection_p = 0.05;
    double time_base = 10.0;
    int ffn_mult = 2;
    // Supervise the random head on all positions, normalized by L. The
    // literal 1/|R| positives-only normalization is kept behind this flag.
    bool random_head_all_positions = true;

    int head_dim() const { return d_model / n_heads; }

    void validate() const {
        if (d_model % n_heads != 0)
            throw ConfigError("carformer: d_model must divide by n_heads");
        if (head_dim() % 2 != 0)
            throw ConfigError("carformer: head dim must be even for RoPE");
        if (vocab_size <= Vocabulary::kNumReserved)
            throw ConfigError("carformer: vocab too small");
    }

    nlohmann::json to_json() const {
        return {{"d_model", d_model},     {"n_layers", n_layers},
                {"n_heads", n_heads},     {"max_len", max_len},
                {"vocab_size", vocab_size}, {"variant", to_string(variant)},
                {"alpha", alpha},         {"beta", beta},
                {"injection_p", injection_p}, {"time_base", time_base},
                {"ffn_mult", ffn_mult},
                {"random_head_all_positions", random_head_all_positions}};
    }

    static CarFormerConfig from_json(const nlohmann::json& j) {
        CarFormerConfig c;
        c.d_model = j.value("d_model", c.d_model);
        c.n_layers = j.value("n_layers", c.n_layers);
        c.n_heads = j.value("n_heads", c.n_heads);
        c.max_len = j.value("max_len", c.max_len);
        c.vocab_size = j.value("vocab_size", c.vocab_size);
        c.variant = car_variant_from_string(j.value("variant", std::string("rot-ce")));
        c.alpha = j.value("alpha", c.alpha);
        c.beta = j.value("beta", c.beta);
        c.injection_p = j.value("injection_p", c.injection_p);
        c.time_base = j.value("time_base", c.time_base);
        c.ffn_mult = j.value("ffn_mult", c.ffn_mult);
        c.random_head_all_positions =
            j.value("random_head_all_positions", c.random_head_all_positions);
        c.validate();
        return c;
    }
};

// ---------------------------------------------------------------------------
// model input
// ---------------------------------------------------------------------------

// Tokenized sequence as the encoder consumes it: <s> prepended and </s>
// appended; specials take the (t, m) of the adjacent real event.
struct ModelInput {
    std::vector<int> tokens;
    std::vector<double> t_hours;
    std::vector<double> km;
    std::vector<double> t_scaled;  // f_t(t, time_base)
    std::vector<std::uint8_t> injected;

    int length() const { return static_cast<int>(tokens.size()); }
    int injected_count() const {
        int r = 0;
        for (auto f : injected) r += f;
        return r;
    }
};

inline ModelInput build_model_input(const EventSequence& seq, const CarFormerConfig& cfg,
                                    bool add_specials = true) {
    if (seq.events.empty()) throw DataError("build_model_input: empty sequence");
    ModelInput in;
    auto push = [&](int tok, double t, double m, bool inj) {
        in.tokens.push_back(tok);
        in.t_hours.push_back(t);
        in.km.push_back(m);
        in.t_scaled.push_back(scale_time(t, cfg.time_base));
        in.injected.push_back(inj ? 1 : 0);
    };
    if (add_specials) push(Vocabulary::kBos, seq.events.front().t, seq.events.front().m, false);
    for (const auto& e : seq.events) push(e.token, e.t, e.m, e.injected);
    if (add_specials) push(Vocabulary::kEos, seq.events.back().t, seq.events.back().m, false);
    if (in.length() > cfg.max_len)
        throw DataError("sequence length " + std::to_string(in.length()) +
                        " exceeds max_len " + std::to_string(cfg.max_len) +
                        "; window the input first");
    return in;
}

inline std::vector<std::uint8_t> causal_mask(int L) {
    std::vector<std::uint8_t> m(static_cast<std::size_t>(L) * L, 0);
    for (int i = 0; i < L; ++i)
        for (int j = 0; j <= i; ++j) m[static_cast<std::size_t>(i) * L + j] = 1;
    return m;
}

// ---------------------------------------------------------------------------
// encoder
// ---------------------------------------------------------------------------

struct EncoderOutput {
    Tensor hidden;             // [L x d]
    Tensor next_event_logits;  // [L x V]
    Tensor next_dt;            // [L x 1], predicted scaled inter-event time
    Tensor random_logits;      // [L x 1]
};

class CarFormer {
public:
    explicit CarFormer(CarFormerConfig cfg) : cfg_(cfg) {
        cfg_.validate();
        const int d = cfg_.d_model, h = cfg_.ffn_mult * d;
        params_.add("tok_table", {cfg_.vocab_size, d}, ParamKind::Embedding);
        params_.add("time_w", {1, d}, ParamKind::Embedding);
        params_.add("time_b", {d}, ParamKind::Bias);
        params_.add("mileage_table", {kMileageTableSize, d}, ParamKind::Embedding);
        if (cfg_.variant == CarVariant::Gpt)
            params_.add("pos_table", {cfg_.max_len, d}, ParamKind::Embedding);
        for (int l = 0; l < cfg_.n_layers; ++l) {
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
        params_.add("head_rms", {d}, ParamKind::Gain);
        params_.add("head_event_w", {d, cfg_.vocab_size}, ParamKind::LinearWeight);
        params_.add("head_event_b", {cfg_.vocab_size}, ParamKind::Bias);
        params_.add("head_dt_w", {d, 1}, ParamKind::LinearWeight);
        params_.add("head_dt_b", {1}, ParamKind::Bias);
        params_.add("head_rand_w", {d, 1}, ParamKind::LinearWeight);
        params_.add("head_rand_b", {1}, ParamKind::Bias);
    }

    const CarFormerConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    EncoderOutput forward(const ModelInput& in) const {
        const int L = in.length();
        const int d = cfg_.d_model;
        const auto mask = causal_mask(L);
        std::vector<int> positions(L);
        for (int i = 0; i < L; ++i) positions[i] = i;

        Tensor E = event_type_embed(params_.get("tok_table"), in.tokens);
        Tensor T = time_embed(in.t_scaled, params_.get("time_w"), params_.get("time_b"));
        Tensor M = mileage_embed(params_.get("mileage_table"), in.km);

        Tensor x, ce, m_for_scores;
        bool use_rope = false;
        int score_terms = 1;  // k in the sqrt(k * d_head) scaling
        switch (cfg_.variant) {
            case CarVariant::RotCe:
                x = E;
                ce = add(T, M);
                use_rope = true;
                score_terms = 3;
                break;
            case CarVariant::Time:
                x = add(E, T);
                break;
            case CarVariant::TimeMileage:
                x = add(add(E, T), M);
                break;
            case CarVariant::TimeM2c:
                x = add(E, T);
                m_for_scores = M;
                score_terms = 2;
                break;
            case CarVariant::TimeC2mM2c:
                x = add(E, T);
                m_for_scores = M;
                score_terms = 3;
                break;
            case CarVariant::Gpt: {
                x = add(E, rows_embed(params_.get("pos_table"), positions));
                break;
            }
        }

        for (int l = 0; l < cfg_.n_layers; ++l) {
            std::string p = "layer" + std::to_string(l) + ".";
            Tensor attn = attention(p, x, ce, m_for_scores, use_rope, score_terms,
                                    positions, mask,
                                    cfg_.variant == CarVariant::TimeC2mM2c);
            x = rms_norm(add(x, attn), params_.get(p + "rms1"));
            Tensor f = linear(gelu(linear(x, params_.get(p + "ffn_w1"),
                                          params_.get(p + "ffn_b1"))),
                              params_.get(p + "ffn_w2"), params_.get(p + "ffn_b2"));
            x = rms_norm(add(x, f), params_.get(p + "rms2"));
        }

        EncoderOutput out;
        out.hidden = x;
        out.next_event_logits = linear(rms_norm(x, params_.get("head_rms")),
                                       params_.get("head_event_w"),
                                       params_.get("head_event_b"));
        out.next_dt = linear(x, params_.get("head_dt_w"), params_.get("head_dt_b"));
        out.random_logits = linear(x, params_.get("head_rand_w"), params_.get("head_rand_b"));
        return out;
    }

private:
    // One multi-head attention block. ce (when defined) is added to the
    // projected Q and K; m_for_scores (when defined) contributes m2c and
    // optionally c2m score terms through the same projections, bias-free.
    Tensor attention(const std::string& prefix, const Tensor& x, const Tensor& ce,
                     const Tensor& m_emb, bool use_rope, int score_terms,
                     const std::vector<int>& positions,
                     const std::vector<std::uint8_t>& mask, bool with_c2m) const {
        const int d = cfg_.d_model, nh = cfg_.n_heads, hd = cfg_.head_dim();
        Tensor q = linear(x, params_.get(prefix + "wq"), params_.get(prefix + "bq"));
        Tensor k = linear(x, params_.get(prefix + "wk"), params_.get(prefix + "bk"));
        Tensor v = linear(x, params_.get(prefix + "wv"), params_.get(prefix + "bv"));
        if (ce.defined()) {
            q = add(q, ce);
            k = add(k, ce);
        }
        Tensor mq, mk;
        if (m_emb.defined()) {
            mq = matmul(m_emb, params_.get(prefix + "wq"));
            mk = matmul(m_emb, params_.get(prefix + "wk"));
        }
        const double inv_scale = 1.0 / std::sqrt(static_cast<double>(score_terms) * hd);
        std::vector<Tensor> heads;
        heads.reserve(nh);
        for (int h = 0; h < nh; ++h) {
            Tensor qh = col_slice(q, h * hd, hd);
            Tensor kh = col_slice(k, h * hd, hd);
            Tensor vh = col_slice(v, h * hd, hd);
            if (use_rope) {
                qh = rope_rotate(qh, positions, kRopeTheta0);
                kh = rope_rotate(kh, positions, kRopeTheta0);
            }
            Tensor scores = matmul_bt(qh, kh);  // c2c
            if (m_emb.defined()) {
                Tensor mqh = col_slice(mq, h * hd, hd);
                Tensor mkh = col_slice(mk, h * hd, hd);
                scores = add(scores, matmul_bt(mqh, kh));  // m2c
                if (with_c2m) scores = add(scores, matmul_bt(qh, mkh));  // c2m
            }
            Tensor a = softmax_rows(scale(scores, inv_scale), &mask);
            heads.push_back(matmul(a, vh));
        }
        Tensor o = concat_cols(heads);
        (void)d;
        return linear(o, params_.get(prefix + "wo"), params_.get(prefix + "bo"));
    }

    CarFormerConfig cfg_;
    ParamStore params_;
};

// ---------------------------------------------------------------------------
// pretraining losses (per sequence)
// ---------------------------------------------------------------------------

struct PretrainLoss {
    Tensor total;      // scalar graph node
    double ce = 0.0;   // summed next-event CE (value)
    double time = 0.0; // summed Huber (value)
    double rand = 0.0; // summed random-head BCE (value)
};

// Positions i with a next-event target: i not injected and i < L-1.
inline std::vector<std::uint8_t> next_target_mask(const ModelInput& in) {
    const int L = in.length();
    std::vector<std::uint8_t> inc(L, 0);
    for (int i = 0; i + 1 < L; ++i) inc[i] = in.injected[i] ? 0 : 1;
    return inc;
}

inline Tensor next_event_loss(const Tensor& logits, const ModelInput& in) {
    if (in.length() < 2) throw DataError("next_event_loss: L < 2");
    auto inc = next_target_mask(in);
    bool any = false;
    for (auto f : inc) any = any || f;
    if (!any) throw NumericError("next_event_loss: all positions injected");
    std::vector<int> targets(in.tokens.begin() + 1, in.tokens.end());
    targets.push_back(0);  // position L-1 excluded by the mask
    return cross_entropy_rows(logits, targets, inc);
}

inline Tensor next_time_loss(const Tensor& dt_pred, const ModelInput& in,
                             double time_base) {
    if (in.length() < 2) throw DataError("next_time_loss: L < 2");
    const int L = in.length();
    auto inc = next_target_mask(in);
    std::vector<double> target(L, 0.0);
    for (int i = 0; i + 1 < L; ++i)
        target[i] = scale_time(in.t_hours[i + 1], time_base) -
                    scale_time(in.t_hours[i], time_base);
    return huber_sum(dt_pred, target, inc, 1.0);
}

// BCE of the random head. Default supervises all L positions (both classes);
// the literal positives-only variant sums over injected positions.
inline Tensor random_event_loss(const Tensor& random_logits, const ModelInput& in,
                                bool all_positions) {
    const int L = in.length();
    std::vector<double> labels(L);
    std::vector<std::uint8_t> inc(L, 1);
    for (int i = 0; i < L; ++i) {
        labels[i] = in.injected[i] ? 1.0 : 0.0;
        if (!all_positions) inc[i] = in.injected[i];
    }
    return bce_logits(random_logits, labels, inc);
}

// L = (1 / (L - |R|)) (L_c + alpha L_t) + beta * L_r_norm
inline PretrainLoss total_pretrain_loss(const EncoderOutput& out, const ModelInput& in,
                                        const CarFormerConfig& cfg) {
    const int L = in.length();
    const int R = in.injected_count();
    if (L <= R) throw NumericError("total_pretrain_loss: L == |R| (degenerate)");
    PretrainLoss parts;
    Tensor lc = next_event_loss(out.next_event_logits, in);
    Tensor lt = next_time_loss(out.next_dt, in, cfg.time_base);
    parts.ce = lc.item();
    parts.time = lt.item();
    Tensor total = scale(add(lc, scale(lt, cfg.alpha)), 1.0 / (L - R));
    if (cfg.random_head_all_positions) {
        Tensor lr = random_event_loss(out.random_logits, in, true);
        parts.rand = lr.item();
        total = add(total, scale(lr, cfg.beta / L));
    } else if (R > 0) {
        Tensor lr = random_event_loss(out.random_logits, in, false);
        parts.rand = lr.item();
        total = add(total, scale(lr, cfg.beta / R));
    }
    parts.total = total;
    return parts;
}

}  // namespace cf
