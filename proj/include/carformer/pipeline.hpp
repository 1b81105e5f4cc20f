#pragma once

#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "carformer/carformer.hpp"
#include "carformer/epredictor.hpp"
#include "carformer/errors.hpp"
#include "carformer/event_model.hpp"
#include "carformer/metrics.hpp"
#include "carformer/synth_data.hpp"
#include "carformer/training.hpp"

namespace cf {

// ---------------------------------------------------------------------------
// deterministic mode and artifact hashing
// ---------------------------------------------------------------------------

// CF_DETERMINISTIC=1 drops wall-clock fields from manifests so identical
// inputs reproduce byte-identical artifacts.
inline bool deterministic_mode() {
    const char* v = std::getenv("CF_DETERMINISTIC");
    return v != nullptr && std::string(v) != "0" && std::string(v) != "";
}

inline std::uint64_t fnv1a(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = 1469598103934665603ULL;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::string hash_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot hash missing file " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)),
                      std::istreambuf_iterator<char>());
    char buf[24];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a(bytes.data(), bytes.size())));
    return buf;
}

struct RunManifest {
    std::string command;
    std::string config_path;
    nlohmann::json resolved_config;
    std::uint64_t seed = 0;
    std::vector<std::pair<std::string, std::string>> inputs;   // (path, hash)
    std::vector<std::pair<std::string, std::string>> outputs;

    void add_input(const std::string& path) { inputs.emplace_back(path, hash_file(path)); }
    void add_output(const std::string& path) { outputs.emplace_back(path, hash_file(path)); }

    nlohmann::json to_json() const {
        auto list = [](const std::vector<std::pair<std::string, std::string>>& v) {
            nlohmann::json a = nlohmann::json::array();
            for (const auto& [p, h] : v) a.push_back({{"path", p}, {"hash", h}});
            return a;
        };
        nlohmann::json j = {{"command", command},
                            {"config_path", config_path},
                            {"resolved_config", resolved_config},
                            {"seed", seed},
                            {"inputs", list(inputs)},
                            {"outputs", list(outputs)},
                            {"deterministic", deterministic_mode()}};
        if (!deterministic_mode()) j["timestamp"] = static_cast<long long>(std::time(nullptr));
        return j;
    }

    void save(const std::string& path) const {
        std::ofstream f(path);
        if (!f) throw DataError("cannot write manifest " + path);
        f << to_json().dump(2) << "\n";
    }
};

inline nlohmann::json load_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot read config file " + path);
    try {
        nlohmann::json j;
        f >> j;
        return j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("malformed config file " + path + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// synthetic vocabulary
// ---------------------------------------------------------------------------

// Dense ids 4..V-1 mapped to well-formed synthetic DTC strings.
inline Vocabulary make_synthetic_vocab(int vocab_size) {
    if (vocab_size <= Vocabulary::kNumReserved)
        throw ConfigError("vocabulary size too small");
    Vocabulary v;
    for (int i = Vocabulary::kNumReserved; i < vocab_size; ++i) {
        char buf[40];
        std::snprintf(buf, sizeof(buf), "ECU%02d|DTC-%04d|FB%02d", i % 16, i, i % 256);
        v.add_dtc(buf);
    }
    return v;
}

// ---------------------------------------------------------------------------
// generator config (file form)
// ---------------------------------------------------------------------------

// Builds the chain-excitation profile from scalar knobs; arrays are derived,
// so the file only carries scalars.
inline GeneratorConfig build_generator_config(const nlohmann::json& j) {
    GeneratorConfig c;
    c.seed = j.value("seed", std::uint64_t(1));
    c.vocab_size = j.value("vocab_size", 200);
    c.n_error_patterns = j.value("n_error_patterns", 12);
    c.mean_length_target = j.value("mean_length_target", 40.0);
    c.max_events = j.value("max_events", 56);
    c.horizon_hours = j.value("horizon_hours", kWindowHours);
    c.zero_inflation_t = j.value("zero_inflation_t", 0.15);
    c.zero_inflation_m = j.value("zero_inflation_m", 0.20);
    c.labeled_fraction = j.value("labeled_fraction", 0.7);
    c.second_motif_prob = j.value("second_motif_prob", 0.15);
    const double rho = j.value("excitation_rho", 0.6);
    const double decay = j.value("excitation_decay", 1.0);

    const int r0 = Vocabulary::kNumReserved;
    const int nreal = c.vocab_size - r0;
    if (nreal < 3 * c.n_error_patterns + 3)
        throw ConfigError("generator: vocabulary too small for disjoint motifs");
    // background process over head tokens only; tail motif tokens appear
    // solely through planting
    const int nbg = nreal - 3 * c.n_error_patterns;
    c.base_intensity.assign(c.vocab_size, 0.0);
    double raw_total = 0.0;
    for (int u = 0; u < nbg; ++u) raw_total += 1.0 / (u + 10.0);
    const double mu_total = c.mean_length_target * (1.0 - rho) / c.horizon_hours;
    for (int u = 0; u < nbg; ++u)
        c.base_intensity[r0 + u] = mu_total * (1.0 / (u + 10.0)) / raw_total;
    for (int u = 0; u < nbg; ++u)
        c.excitations.push_back({r0 + u, r0 + (u + 1) % nbg, rho * decay, decay});
    for (int k = 0; k < c.n_error_patterns; ++k) {
        int base = r0 + nreal - 3 * (k + 1);
        c.motifs.push_back({{base, base + 1, base + 2}, 0.05});
    }
    c.validate();
    return c;
}

inline nlohmann::json generator_config_to_json(const GeneratorConfig& c) {
    return {{"seed", c.seed},
            {"vocab_size", c.vocab_size},
            {"n_error_patterns", c.n_error_patterns},
            {"mean_length_target", c.mean_length_target},
            {"max_events", c.max_events},
            {"horizon_hours", c.horizon_hours},
            {"zero_inflation_t", c.zero_inflation_t},
            {"zero_inflation_m", c.zero_inflation_m},
            {"labeled_fraction", c.labeled_fraction},
            {"second_motif_prob", c.second_motif_prob}};
}

// ---------------------------------------------------------------------------
// dataset directory layout
// ---------------------------------------------------------------------------

struct Dataset {
    Vocabulary vocab;
    std::vector<EventSequence> train, val, test;
    int n_labels = 0;
    nlohmann::json meta;
};

// gen-data: fleet -> split -> class-resample the training split; validation
// and test labels are remapped through the same class compaction.
inline Dataset generate_dataset(const GeneratorConfig& gcfg, int n_sequences,
                                const ResampleConfig& rcfg,
                                const std::vector<double>& fractions = {0.8, 0.05, 0.15}) {
    Dataset ds;
    ds.vocab = make_synthetic_vocab(gcfg.vocab_size);
    auto fleet = generate_fleet(gcfg, n_sequences);
    auto splits = split_dataset(fleet, fractions, gcfg.seed ^ 0x9e3779b97f4a7c15ULL);
    ResampleResult rr =
        resample_classes(splits[0], rcfg, gcfg.n_error_patterns, gcfg.vocab_size);
    ds.n_labels = rr.n_classes;

    // unlabeled training sequences still matter for pretraining
    ds.train = std::move(rr.data);
    for (const auto& s : splits[0])
        if (!s.labeled()) ds.train.push_back(s);

    auto remap = [&](std::vector<EventSequence> in) {
        for (auto& s : in) {
            std::vector<int> kept;
            for (int ep : s.ep_label_ids)
                if (rr.old_to_new.at(ep) >= 0) kept.push_back(rr.old_to_new[ep]);
            s.ep_label_ids = std::move(kept);
        }
        return in;
    };
    ds.val = remap(splits[1]);
    ds.test = remap(splits[2]);

    ds.meta = {{"n_labels", ds.n_labels},
               {"vocab_size", gcfg.vocab_size},
               {"n_sequences", n_sequences},
               {"fractions", fractions},
               {"generator", generator_config_to_json(gcfg)},
               {"resample",
                {{"theta1", rcfg.theta1},
                 {"theta2", rcfg.theta2},
                 {"min_count", rcfg.min_count},
                 {"injection_p", rcfg.injection_p},
                 {"seed", rcfg.seed}}}};
    return ds;
}

inline void save_dataset(const Dataset& ds, const std::string& dir) {
    std::filesystem::create_directories(dir);
    ds.vocab.save(dir + "/vocab.json");
    save_jsonl(ds.train, ds.vocab, dir + "/train.jsonl");
    save_jsonl(ds.val, ds.vocab, dir + "/val.jsonl");
    save_jsonl(ds.test, ds.vocab, dir + "/test.jsonl");
    std::ofstream f(dir + "/meta.json");
    if (!f) throw DataError("cannot write meta.json in " + dir);
    f << ds.meta.dump(2) << "\n";
}

inline Dataset load_dataset(const std::string& dir) {
    Dataset ds;
    ds.vocab = Vocabulary::load(dir + "/vocab.json");
    ds.meta = load_json_file(dir + "/meta.json");
    ds.n_labels = ds.meta.at("n_labels").get<int>();
    ds.train = load_jsonl(dir + "/train.jsonl", ds.vocab);
    ds.val = load_jsonl(dir + "/val.jsonl", ds.vocab);
    ds.test = load_jsonl(dir + "/test.jsonl", ds.vocab);
    return ds;
}

// ---------------------------------------------------------------------------
// checkpoint wiring
// ---------------------------------------------------------------------------

inline void save_backbone_checkpoint(const std::string& path, const CarFormer& model,
                                     nlohmann::json extra = nlohmann::json::object()) {
    Checkpoint ck;
    ck.header = std::move(extra);
    ck.header["kind"] = "pretrain";
    ck.header["backbone_config"] = model.config().to_json();
    ck.add_store("backbone.", model.params());
    ck.save(path);
}

inline CarFormer load_backbone(const Checkpoint& ck) {
    if (!ck.header.contains("backbone_config"))
        throw DataError("checkpoint lacks a backbone config");
    CarFormer m(CarFormerConfig::from_json(ck.header.at("backbone_config")));
    ck.restore_store("backbone.", m.params());
    return m;
}

inline void save_ep_checkpoint(const std::string& path, const CarFormer& backbone,
                               const EPredictor& dec,
                               nlohmann::json extra = nlohmann::json::object()) {
    Checkpoint ck;
    ck.header = std::move(extra);
    ck.header["kind"] = "ep";
    ck.header["backbone_config"] = backbone.config().to_json();
    ck.header["ep_config"] = dec.config().to_json();
    ck.add_store("backbone.", backbone.params());
    ck.add_store("decoder.", dec.params());
    ck.save(path);
}

inline EPredictor load_decoder(const Checkpoint& ck) {
    if (!ck.header.contains("ep_config"))
        throw DataError("checkpoint lacks a decoder config");
    EPredictor d(EPredictorConfig::from_json(ck.header.at("ep_config")));
    ck.restore_store("decoder.", d.params());
    return d;
}

// ---------------------------------------------------------------------------
// pretraining evaluation (next-event metrics)
// ---------------------------------------------------------------------------

struct PretrainEvalReport {
    double accuracy = 0.0;
    double majority_baseline = 0.0;
    double mape_pct = 0.0;
    int mape_skipped = 0;
    double rmse_scaled = 0.0;
    double mae_h = 0.0;
    long long positions = 0;
    int sequences = 0;
    int skipped_sequences = 0;

    nlohmann::json to_json() const {
        return {{"accuracy", accuracy},
                {"majority_baseline", majority_baseline},
                {"mape_pct", mape_pct},
                {"mape_skipped_zero_targets", mape_skipped},
                {"rmse_scaled", rmse_scaled},
                {"mae_h", mae_h},
                {"positions", positions},
                {"sequences", sequences},
                {"skipped_sequences", skipped_sequences}};
    }
};

// Pools correctness over all next-event positions of the raw (uninjected)
// sequences. The majority baseline always answers the most frequent target.
inline PretrainEvalReport eval_pretrain(const CarFormer& model,
                                        const std::vector<EventSequence>& data) {
    const auto& cfg = model.config();
    PretrainEvalReport rep;
    long long hits = 0;
    std::map<int, long long> target_freq;
    std::vector<double> dt_pred, dt_true;
    for (const auto& seq : data) {
        if (seq.events.size() < 2 ||
            static_cast<int>(seq.events.size()) + 2 > cfg.max_len) {
            ++rep.skipped_sequences;
            continue;
        }
        ModelInput in = build_model_input(seq, cfg);
        EncoderOutput out = model.forward(in);
        const int L = in.length();
        for (int i = 0; i + 1 < L; ++i) {
            const double* row = &out.next_event_logits->v[
                static_cast<std::size_t>(i) * cfg.vocab_size];
            int best = 0;
            for (int j = 1; j < cfg.vocab_size; ++j)
                if (row[j] > row[best]) best = j;
            hits += best == in.tokens[i + 1] ? 1 : 0;
            ++rep.positions;
            ++target_freq[in.tokens[i + 1]];
            dt_pred.push_back(out.next_dt.at(i, 0));
            dt_true.push_back(in.t_scaled[i + 1] - in.t_scaled[i]);
        }
        ++rep.sequences;
    }
    if (rep.positions == 0) throw DataError("eval_pretrain: no usable sequences");
    rep.accuracy = static_cast<double>(hits) / rep.positions;
    long long top = 0;
    for (const auto& [tok, n] : target_freq) top = std::max(top, n);
    rep.majority_baseline = static_cast<double>(top) / rep.positions;
    MapeResult mr = mape(dt_pred, dt_true);
    rep.mape_pct = mr.value;
    rep.mape_skipped = mr.skipped_zero_targets;
    rep.rmse_scaled = rmse(dt_pred, dt_true);
    rep.mae_h = mae_hours(dt_pred, dt_true, cfg.time_base);
    return rep;
}

// ---------------------------------------------------------------------------
// EP evaluation (micro-F1, curves, CPMW)
// ---------------------------------------------------------------------------

struct EpEvalReport {
    double micro_f1_final = 0.0;  // pooled over every evaluated step
    double mape_pct = 0.0;
    int mape_skipped = 0;
    double mae_h = 0.0;
    double mu_seq = 0.0;
    int sequences = 0;
    int skipped_sequences = 0;
    MetricCurve f1_curve;
    MetricCurve mae_curve;
    CPMWReport cpmw_f1;
    double cpmwauc_mae = 0.0;      // over the F1 window, raw
    double cpmwauc_mae_norm = 0.0;

    nlohmann::json to_json() const {
        nlohmann::json j = {{"micro_f1", micro_f1_final},
                            {"mape_pct", mape_pct},
                            {"mape_skipped_zero_targets", mape_skipped},
                            {"mae_h", mae_h},
                            {"mu_seq", mu_seq},
                            {"sequences", sequences},
                            {"skipped_sequences", skipped_sequences},
                            {"cpmw", cpmw_to_json(cpmw_f1)},
                            {"f1_curve", curve_to_json(f1_curve)},
                            {"mae_curve", curve_to_json(mae_curve)}};
        if (cpmw_f1.has_window) {
            j["cpmwauc_mae"] = cpmwauc_mae;
            j["cpmwauc_mae_normalized"] = cpmwauc_mae_norm;
        }
        return j;
    }
};

inline EpEvalReport eval_ep(const CarFormer& backbone, const EPredictor& dec,
                            const std::vector<EventSequence>& data, double theta,
                            double delta) {
    const auto& mcfg = backbone.config();
    const auto& ecfg = dec.config();
    EpEvalReport rep;
    F1Counts pooled;
    std::map<int, F1Counts> per_step;
    std::map<int, std::vector<double>> mae_records;
    std::vector<double> t_pred, t_true;
    double seq_len_sum = 0.0;
    for (const auto& seq : data) {
        if (!seq.labeled()) {
            ++rep.skipped_sequences;
            continue;
        }
        if (static_cast<int>(seq.events.size()) < ecfg.min_context ||
            static_cast<int>(seq.events.size()) + 2 > mcfg.max_len) {
            ++rep.skipped_sequences;
            continue;
        }
        ModelInput in = build_model_input(seq, mcfg);
        EncoderOutput enc = backbone.forward(in);
        EpOutput out = dec.forward(enc.hidden, in);
        auto y = dense_labels(seq.ep_label_ids, ecfg.n_labels);
        int n_events = in.length() - 2;
        double tl_scaled = scale_time(in.t_hours[n_events], ecfg.time_base);
        for (int i : evaluated_steps(in, ecfg.min_context)) {
            std::vector<double> probs(ecfg.n_labels);
            for (int j = 0; j < ecfg.n_labels; ++j) probs[j] = out.probs.at(i, j);
            F1Counts c = f1_counts(probs, y, theta);
            pooled.add(c);
            per_step[i].add(c);
            double pred = out.dt.at(i, 0);
            double truth = tl_scaled - scale_time(in.t_hours[i], ecfg.time_base);
            t_pred.push_back(pred);
            t_true.push_back(truth);
            mae_records[i].push_back(std::abs(unscale_time(pred, ecfg.time_base) -
                                              unscale_time(truth, ecfg.time_base)));
        }
        seq_len_sum += n_events;
        ++rep.sequences;
    }
    if (rep.sequences == 0) throw DataError("eval_ep: no evaluable sequences");
    rep.micro_f1_final = pooled.f1();
    rep.mu_seq = seq_len_sum / rep.sequences;
    MapeResult mr = mape(t_pred, t_true);
    rep.mape_pct = mr.value;
    rep.mape_skipped = mr.skipped_zero_targets;
    rep.mae_h = mae_hours(t_pred, t_true, ecfg.time_base);
    rep.f1_curve = build_f1_curve(per_step);
    rep.mae_curve = build_curve(mae_records, "mae_h");
    rep.cpmw_f1 = cpmw(rep.f1_curve, theta, rep.mu_seq, delta, CpmwDirection::ScoreAbove);
    if (rep.cpmw_f1.has_window && rep.cpmw_f1.window_end - rep.cpmw_f1.x_theta >= 1.0 &&
        rep.mae_curve.x.size() >= 2) {
        rep.cpmwauc_mae = cpmwauc(rep.mae_curve, rep.cpmw_f1.x_theta,
                                  rep.cpmw_f1.window_end, false);
        rep.cpmwauc_mae_norm = cpmwauc(rep.mae_curve, rep.cpmw_f1.x_theta,
                                       rep.cpmw_f1.window_end, true);
    }
    return rep;
}

inline void write_json_file(const nlohmann::json& j, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write " + path);
    f << j.dump(2) << "\n";
}

}  // namespace cf
