#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "carformer/carformer.hpp"
#include "carformer/epredictor.hpp"
#include "carformer/training.hpp"

using namespace cf;

namespace {

CarFormerConfig tiny_backbone_config() {
    CarFormerConfig c;
    c.d_model = 16;
    c.n_layers = 1;
    c.n_heads = 2;
    c.max_len = 32;
    c.vocab_size = 24;
    return c;
}

EPredictorConfig tiny_ep_config(EpVariant v) {
    EPredictorConfig c;
    c.d_model = 16;
    c.n_heads = 2;
    c.n_labels = 3;
    c.min_context = 2;
    c.variant = v;
    return c;
}

ModelInput random_input(const CarFormerConfig& cfg, Rng& rng, int n_events) {
    EventSequence s;
    s.vehicle_id = "t";
    double t = 0.0, m = 0.0;
    for (int i = 0; i < n_events; ++i) {
        Event e;
        e.token = Vocabulary::kNumReserved +
                  static_cast<int>(rng.uniform_int(cfg.vocab_size - Vocabulary::kNumReserved));
        t += rng.uniform(0.0, 10.0);
        m += rng.uniform(0.0, 4.0);
        e.t = t;
        e.m = m;
        s.events.push_back(e);
    }
    return build_model_input(s, cfg);
}

const std::vector<EpVariant> kAllEpVariants = {
    EpVariant::RotcrossQueryKeyCe12,     EpVariant::RotcrossQueryKeyCe2,
    EpVariant::RotcrossQueryCe2,         EpVariant::RotcrossKeyValueCe2,
    EpVariant::RotcrossKeyValueScaledCe2, EpVariant::RotnocrossCe12,
    EpVariant::CrossSpeed,               EpVariant::CrossMixffn,
    EpVariant::TimeCrossQuery};

}  // namespace

TEST_CASE("decoder variant names roundtrip") {
    for (EpVariant v : kAllEpVariants)
        CHECK(ep_variant_from_string(to_string(v)) == v);
    CHECK_THROWS_AS(ep_variant_from_string("nope"), ConfigError);
}

TEST_CASE("speed matrix is antisymmetric with zero-time guard") {
    Tensor s = speed_bias({0.0, 2.0, 4.0}, {0.0, 4.0, 6.0});
    CHECK(s.at(0, 0) == 0.0);
    CHECK(s.at(1, 0) == 2.0);   // 4/2 - 0
    CHECK(s.at(0, 1) == -2.0);
    CHECK(s.at(2, 1) == -0.5);  // 1.5 - 2
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) CHECK(s.at(i, j) == -s.at(j, i));
}

TEST_CASE("every decoder variant is causal to the bit") {
    CarFormer backbone(tiny_backbone_config());
    Rng brng(71);
    init_weights(backbone.params(), 1, brng);
    for (EpVariant variant : kAllEpVariants) {
        EPredictor dec(tiny_ep_config(variant));
        Rng rng(600 + static_cast<int>(variant));
        init_weights(dec.params(), 2, rng);
        for (int trial = 0; trial < 50; ++trial) {
            ModelInput in = random_input(backbone.config(), rng, 9);
            const int L = in.length();
            EpOutput base = dec.forward(backbone.forward(in).hidden, in);
            int j = 1 + static_cast<int>(rng.uniform_int(L - 1));
            ModelInput mod = in;
            switch (rng.uniform_int(3)) {
                case 0:
                    mod.tokens[j] = Vocabulary::kNumReserved +
                                    static_cast<int>(rng.uniform_int(20));
                    break;
                case 1:
                    mod.t_hours[j] += 1.0;
                    mod.t_scaled[j] =
                        scale_time(mod.t_hours[j], backbone.config().time_base);
                    break;
                default:
                    mod.km[j] += 5.0;
                    break;
            }
            EpOutput pert = dec.forward(backbone.forward(mod).hidden, mod);
            for (int i = 0; i < j; ++i) {
                for (int c = 0; c < dec.config().n_labels; ++c)
                    REQUIRE(base.probs.at(i, c) == pert.probs.at(i, c));
                REQUIRE(base.dt.at(i, 0) == pert.dt.at(i, 0));
            }
        }
    }
}

TEST_CASE("cross-attention variants react to encoder ablation") {
    CarFormer backbone(tiny_backbone_config());
    Rng brng(72);
    init_weights(backbone.params(), 1, brng);
    Rng rng(73);
    ModelInput in = random_input(backbone.config(), rng, 8);
    Tensor h = backbone.forward(in).hidden;
    Tensor zeros = Tensor::zeros(h->shape);
    for (EpVariant variant : kAllEpVariants) {
        EPredictor dec(tiny_ep_config(variant));
        Rng drng(800 + static_cast<int>(variant));
        init_weights(dec.params(), 2, drng);
        EpOutput a = dec.forward(h, in);
        EpOutput b = dec.forward(zeros, in);
        bool differs = false;
        for (std::size_t i = 0; i < a.probs->size(); ++i)
            differs = differs || a.probs->v[i] != b.probs->v[i];
        // the decoder input stream is the encoder states, so every variant
        // depends on them; this is a liveness check, not a routing check
        CHECK(differs);
    }
}

TEST_CASE("encoder states route into layer-2 keys for cross variants") {
    // Zeroing the encoder contribution at only the layer-2 attention inputs
    // requires comparing cross and nocross routing under identical weights.
    CarFormer backbone(tiny_backbone_config());
    Rng brng(74);
    init_weights(backbone.params(), 1, brng);
    Rng rng(75);
    ModelInput in = random_input(backbone.config(), rng, 8);
    Tensor h = backbone.forward(in).hidden;
    EPredictor cross(tiny_ep_config(EpVariant::RotcrossKeyValueCe2));
    EPredictor nocross(tiny_ep_config(EpVariant::RotnocrossCe12));
    Rng drng(76);
    init_weights(cross.params(), 2, drng);
    for (const auto& name : nocross.params().names())
        nocross.params().get(name)->v = cross.params().get(name)->v;
    EpOutput a = cross.forward(h, in);
    EpOutput b = nocross.forward(h, in);
    bool differs = false;
    for (std::size_t i = 0; i < a.probs->size(); ++i)
        differs = differs || a.probs->v[i] != b.probs->v[i];
    CHECK(differs);
}

TEST_CASE("evaluated steps start at the minimum context") {
    CarFormerConfig cfg = tiny_backbone_config();
    Rng rng(5);
    ModelInput in = random_input(cfg, rng, 6);  // positions 0..7, events 1..6
    auto steps = evaluated_steps(in, 4);
    CHECK(steps == std::vector<int>{4, 5, 6});
    CHECK_THROWS_AS(evaluated_steps(in, 7), ContextError);
}

TEST_CASE("decoder losses match brute-force recomputation") {
    CarFormer backbone(tiny_backbone_config());
    Rng brng(81);
    init_weights(backbone.params(), 1, brng);
    EPredictorConfig ecfg = tiny_ep_config(EpVariant::RotcrossKeyValueScaledCe2);
    EPredictor dec(ecfg);
    Rng drng(82);
    init_weights(dec.params(), 2, drng);
    Rng rng(83);
    ModelInput in = random_input(backbone.config(), rng, 7);
    std::vector<int> labels = {0, 2};
    EpOutput out = dec.forward(backbone.forward(in).hidden, in);

    const int n_events = in.length() - 2;
    const int c = ecfg.min_context;
    double bce = 0.0, hub = 0.0;
    double tl = scale_time(in.t_hours[n_events], ecfg.time_base);
    for (int i = c; i <= n_events; ++i) {
        for (int j = 0; j < ecfg.n_labels; ++j) {
            double y = (j == 0 || j == 2) ? 1.0 : 0.0;
            double q = std::clamp(out.probs.at(i, j), 1e-7, 1.0 - 1e-7);
            bce += -(y * std::log(q) + (1.0 - y) * std::log(1.0 - q));
        }
        double target = tl - scale_time(in.t_hours[i], ecfg.time_base);
        double e = out.dt.at(i, 0) - target;
        hub += std::abs(e) < 1.0 ? 0.5 * e * e : std::abs(e) - 0.5;
    }
    double denom = n_events - c;
    double cls = bce / (denom * ecfg.n_labels);
    double tim = hub / denom;
    CHECK_THAT(ep_classification_loss(out, in, labels, ecfg).item(),
               Catch::Matchers::WithinAbs(cls, 1e-9));
    CHECK_THAT(ep_time_loss(out, in, ecfg).item(),
               Catch::Matchers::WithinAbs(tim, 1e-9));
    CHECK_THAT(ep_total_loss(out, in, labels, ecfg).item(),
               Catch::Matchers::WithinAbs(cls + ecfg.gamma * tim, 1e-9));
}

TEST_CASE("full decoder loss passes a finite-difference check") {
    CarFormerConfig bcfg = tiny_backbone_config();
    bcfg.d_model = 8;
    bcfg.n_heads = 2;
    CarFormer backbone(bcfg);
    Rng brng(91);
    init_weights(backbone.params(), 1, brng);
    for (auto& p : backbone.params().tensors()) p->requires_grad = false;
    EPredictorConfig ecfg = tiny_ep_config(EpVariant::RotcrossKeyValueScaledCe2);
    ecfg.d_model = 8;
    ecfg.n_heads = 2;
    EPredictor dec(ecfg);
    Rng drng(92);
    init_weights(dec.params(), 2, drng);
    Rng rng(93);
    ModelInput in = random_input(bcfg, rng, 5);
    Tensor h = backbone.forward(in).hidden;
    double err = grad_check(
        [&]() { return ep_total_loss(dec.forward(h, in), in, {1}, ecfg); },
        dec.params().tensors());
    CHECK(err < 1e-3);
    for (auto& p : backbone.params().tensors()) p->requires_grad = true;
}

TEST_CASE("prediction thresholding and hour decoding") {
    EPredictorConfig ecfg = tiny_ep_config(EpVariant::RotnocrossCe12);
    ModelInput in;
    for (int i = 0; i < 6; ++i) {
        in.tokens.push_back(i == 0 ? Vocabulary::kBos : i == 5 ? Vocabulary::kEos : 5);
        in.t_hours.push_back(i * 2.0);
        in.km.push_back(i * 1.0);
        in.t_scaled.push_back(scale_time(i * 2.0, 30.0));
        in.injected.push_back(0);
    }
    EpOutput out;
    out.probs = Tensor::zeros({6, 3});
    out.dt = Tensor::zeros({6, 1});
    out.probs.at(2, 0) = 0.71;
    out.probs.at(2, 1) = 0.69;
    out.probs.at(2, 2) = 0.70;  // threshold is inclusive
    out.dt.at(2, 0) = 1.0;
    auto preds = predict(out, in, ecfg, 0.7);
    REQUIRE(preds.size() == 3);  // steps 2, 3, 4
    CHECK(preds[0].step == 2);
    CHECK(preds[0].predicted_eps == std::vector<int>{0, 2});
    CHECK_THAT(preds[0].hours_to_ep, Catch::Matchers::WithinAbs(899.0, 1e-9));
}
