#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "carformer/carformer.hpp"
#include "carformer/epredictor.hpp"
#include "carformer/errors.hpp"
#include "carformer/params.hpp"
#include "carformer/rng.hpp"
#include "carformer/synth_data.hpp"

namespace cf {

// ---------------------------------------------------------------------------
// initialization
// ---------------------------------------------------------------------------

// FFN intermediate layers: W ~ N(0, 2 / (n_layers * sqrt(d_in))).
// All other linear layers: SMALLINIT, W ~ N(0, sqrt(2 / (d_in + 4 d_in))).
// Embeddings N(0, 0.02); biases zero; RMS gains one.
inline void init_weights(ParamStore& params, int n_layers, Rng& rng) {
    const auto& names = params.names();
    for (std::size_t i = 0; i < names.size(); ++i) {
        Tensor t = params.get(names[i]);
        switch (params.kind(i)) {
            case ParamKind::Embedding: {
                for (auto& v : t->v) v = rng.normal(0.0, 0.02);
                break;
            }
            case ParamKind::LinearWeight: {
                double d_in = t->rows();
                double std = std::sqrt(2.0 / (5.0 * d_in));
                for (auto& v : t->v) v = rng.normal(0.0, std);
                break;
            }
            case ParamKind::FfnIntermediate: {
                double d_in = t->rows();
                double var = 2.0 / (n_layers * std::sqrt(d_in));
                double std = std::sqrt(var);
                for (auto& v : t->v) v = rng.normal(0.0, std);
                break;
            }
            case ParamKind::Bias:
                std::fill(t->v.begin(), t->v.end(), 0.0);
                break;
            case ParamKind::Gain:
                std::fill(t->v.begin(), t->v.end(), 1.0);
                break;
        }
    }
}

// ---------------------------------------------------------------------------
// learning-rate schedule
// ---------------------------------------------------------------------------

struct TrainConfig {
    double lr = 5e-4;
    int warmup_steps = 100;
    int total_steps = 600;
    int restart_cycle = 0;  // 0: single cosine over the remaining steps
    double min_lr = 0.0;
    double weight_decay = 0.1;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    double clip_norm = 1.0;
    int batch_size = 8;
    int max_epochs = 10;  // EP phase
    int patience = 2;     // EP phase, on validation loss
    std::uint64_t seed = 42;
    int log_every = 50;

    nlohmann::json to_json() const {
        return {{"lr", lr},
                {"warmup_steps", warmup_steps},
                {"total_steps", total_steps},
                {"restart_cycle", restart_cycle},
                {"min_lr", min_lr},
                {"weight_decay", weight_decay},
                {"beta1", beta1},
                {"beta2", beta2},
                {"eps", eps},
                {"clip_norm", clip_norm},
                {"batch_size", batch_size},
                {"max_epochs", max_epochs},
                {"patience", patience},
                {"seed", seed},
                {"log_every", log_every}};
    }

    static TrainConfig from_json(const nlohmann::json& j) {
        TrainConfig c;
        c.lr = j.value("lr", c.lr);
        c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
        c.total_steps = j.value("total_steps", c.total_steps);
        c.restart_cycle = j.value("restart_cycle", c.restart_cycle);
        c.min_lr = j.value("min_lr", c.min_lr);
        c.weight_decay = j.value("weight_decay", c.weight_decay);
        c.beta1 = j.value("beta1", c.beta1);
        c.beta2 = j.value("beta2", c.beta2);
        c.eps = j.value("eps", c.eps);
        c.clip_norm = j.value("clip_norm", c.clip_norm);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.max_epochs = j.value("max_epochs", c.max_epochs);
        c.patience = j.value("patience", c.patience);
        c.seed = j.value("seed", c.seed);
        c.log_every = j.value("log_every", c.log_every);
        if (c.warmup_steps >= c.total_steps)
            throw ConfigError("train: warmup must be below total steps");
        if (c.patience < 1) throw ConfigError("train: patience must be >= 1");
        return c;
    }
};

// Linear warmup to lr, then cosine annealing; with restart_cycle > 0 the
// cosine restarts every cycle, otherwise one cosine spans the rest.
inline double lr_at(int step, const TrainConfig& cfg) {
    if (step < 0) throw ConfigError("lr_at: negative step");
    if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
        return cfg.lr * step / cfg.warmup_steps;
    int since = step - cfg.warmup_steps;
    int cycle = cfg.restart_cycle > 0 ? cfg.restart_cycle
                                      : std::max(1, cfg.total_steps - cfg.warmup_steps);
    double prog = static_cast<double>(since % cycle) / cycle;
    return cfg.min_lr + (cfg.lr - cfg.min_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * prog));
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

class AdamW {
public:
    AdamW(const ParamStore& params, const TrainConfig& cfg) : cfg_(cfg) {
        auto ts = params.tensors();
        for (std::size_t i = 0; i < ts.size(); ++i) {
            m_.emplace_back(ts[i]->size(), 0.0);
            v_.emplace_back(ts[i]->size(), 0.0);
            // decoupled decay applies to weights, not biases or gains
            decay_.push_back(params.kind(i) != ParamKind::Bias &&
                             params.kind(i) != ParamKind::Gain);
        }
    }

    void step(const ParamStore& params, double lr) {
        ++t_;
        auto ts = params.tensors();
        // global-norm clipping, fixed reduction order
        if (cfg_.clip_norm > 0.0) {
            double sq = 0.0;
            for (auto& p : ts) {
                p->ensure_grad();
                for (double g : p->g) {
                    if (!std::isfinite(g)) throw NumericError("AdamW: non-finite gradient");
                    sq += g * g;
                }
            }
            double norm = std::sqrt(sq);
            if (norm > cfg_.clip_norm) {
                double s = cfg_.clip_norm / norm;
                for (auto& p : ts)
                    for (double& g : p->g) g *= s;
            }
        }
        double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
        double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
        for (std::size_t i = 0; i < ts.size(); ++i) {
            Tensor p = ts[i];
            p->ensure_grad();
            for (std::size_t k = 0; k < p->v.size(); ++k) {
                double g = p->g[k];
                if (!std::isfinite(g)) throw NumericError("AdamW: non-finite gradient");
                m_[i][k] = cfg_.beta1 * m_[i][k] + (1.0 - cfg_.beta1) * g;
                v_[i][k] = cfg_.beta2 * v_[i][k] + (1.0 - cfg_.beta2) * g * g;
                double mhat = m_[i][k] / bc1;
                double vhat = v_[i][k] / bc2;
                if (decay_[i]) p->v[k] -= lr * cfg_.weight_decay * p->v[k];
                p->v[k] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

    std::uint64_t step_count() const { return t_; }
    void set_step_count(std::uint64_t t) { t_ = t; }
    std::vector<std::vector<double>>& moments_m() { return m_; }
    std::vector<std::vector<double>>& moments_v() { return v_; }

private:
    TrainConfig cfg_;
    std::uint64_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
    std::vector<bool> decay_;
};

// ---------------------------------------------------------------------------
// checkpoint container
// ---------------------------------------------------------------------------

// Binary layout: magic "CFCK" + u32 version, u64 header length + JSON header,
// u32 tensor count, then per tensor: u32 name length + name, u32 rank +
// dims(i32), u64 value count + raw little-endian f64 data. Documented so any
// language can read it.
struct Checkpoint {
    nlohmann::json header;  // config snapshot, step counter, rng state
    std::vector<std::pair<std::string, Tensor>> tensors;

    void add_store(const std::string& prefix, const ParamStore& params) {
        for (const auto& n : params.names())
            tensors.emplace_back(prefix + n, params.get(n));
    }

    void add_moments(const std::string& prefix, AdamW& opt) {
        auto pack = [&](const char* tag, std::vector<std::vector<double>>& mm) {
            for (std::size_t i = 0; i < mm.size(); ++i)
                tensors.emplace_back(prefix + tag + std::to_string(i),
                                     Tensor::from({static_cast<int>(mm[i].size())},
                                                  std::vector<double>(mm[i])));
        };
        pack("adam_m.", opt.moments_m());
        pack("adam_v.", opt.moments_v());
    }

    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::binary);
        if (!f) throw DataError("cannot write checkpoint " + path);
        auto w32 = [&](std::uint32_t x) { f.write(reinterpret_cast<const char*>(&x), 4); };
        auto w64 = [&](std::uint64_t x) { f.write(reinterpret_cast<const char*>(&x), 8); };
        f.write("CFCK", 4);
        w32(1);
        std::string hdr = header.dump();
        w64(hdr.size());
        f.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
        w32(static_cast<std::uint32_t>(tensors.size()));
        for (const auto& [name, t] : tensors) {
            w32(static_cast<std::uint32_t>(name.size()));
            f.write(name.data(), static_cast<std::streamsize>(name.size()));
            w32(static_cast<std::uint32_t>(t->shape.size()));
            for (int d : t->shape) {
                std::int32_t dd = d;
                f.write(reinterpret_cast<const char*>(&dd), 4);
            }
            w64(t->v.size());
            f.write(reinterpret_cast<const char*>(t->v.data()),
                    static_cast<std::streamsize>(t->v.size() * sizeof(double)));
        }
        if (!f) throw DataError("checkpoint write failed: " + path);
    }

    static Checkpoint load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw DataError("cannot read checkpoint " + path);
        auto r32 = [&]() {
            std::uint32_t x;
            f.read(reinterpret_cast<char*>(&x), 4);
            return x;
        };
        auto r64 = [&]() {
            std::uint64_t x;
            f.read(reinterpret_cast<char*>(&x), 8);
            return x;
        };
        char magic[4];
        f.read(magic, 4);
        if (std::memcmp(magic, "CFCK", 4) != 0)
            throw DataError("bad checkpoint magic in " + path);
        if (r32() != 1) throw DataError("unsupported checkpoint version in " + path);
        Checkpoint ck;
        std::uint64_t hlen = r64();
        std::string hdr(hlen, '\0');
        f.read(hdr.data(), static_cast<std::streamsize>(hlen));
        ck.header = nlohmann::json::parse(hdr);
        std::uint32_t n = r32();
        for (std::uint32_t i = 0; i < n; ++i) {
            std::uint32_t nl = r32();
            std::string name(nl, '\0');
            f.read(name.data(), nl);
            std::uint32_t rank = r32();
            std::vector<int> shape(rank);
            for (auto& d : shape) {
                std::int32_t dd;
                f.read(reinterpret_cast<char*>(&dd), 4);
                d = dd;
            }
            std::uint64_t cnt = r64();
            std::vector<double> data(cnt);
            f.read(reinterpret_cast<char*>(data.data()),
                   static_cast<std::streamsize>(cnt * sizeof(double)));
            ck.tensors.emplace_back(name, Tensor::from(shape, std::move(data)));
        }
        if (!f) throw DataError("truncated checkpoint " + path);
        return ck;
    }

    const Tensor* find(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return &t;
        return nullptr;
    }

    void restore_store(const std::string& prefix, ParamStore& params) const {
        for (const auto& n : params.names()) {
            const Tensor* src = find(prefix + n);
            if (!src) throw DataError("checkpoint missing tensor " + prefix + n);
            Tensor dst = params.get(n);
            if ((*src)->shape != dst->shape)
                throw DataError("checkpoint shape mismatch for " + prefix + n);
            dst->v = (*src)->v;
        }
    }

    void restore_moments(const std::string& prefix, AdamW& opt) const {
        auto unpack = [&](const char* tag, std::vector<std::vector<double>>& mm) {
            for (std::size_t i = 0; i < mm.size(); ++i) {
                const Tensor* src = find(prefix + tag + std::to_string(i));
                if (!src) throw DataError("checkpoint missing optimizer state");
                mm[i] = (*src)->v;
            }
        };
        unpack("adam_m.", opt.moments_m());
        unpack("adam_v.", opt.moments_v());
    }
};

// ---------------------------------------------------------------------------
// dataset splitting
// ---------------------------------------------------------------------------

// Deterministic shuffle + partition. Every sequence carries a distinct
// vehicle_id, so partitioning sequences keeps vehicles disjoint across splits.
inline std::vector<std::vector<EventSequence>> split_dataset(
    const std::vector<EventSequence>& data, const std::vector<double>& fractions,
    std::uint64_t seed) {
    double total = 0.0;
    for (double fr : fractions) total += fr;
    if (std::abs(total - 1.0) > 1e-9)
        throw ConfigError("split_dataset: fractions must sum to 1");
    std::vector<std::size_t> idx(data.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng(seed);
    for (std::size_t i = idx.size(); i > 1; --i)
        std::swap(idx[i - 1], idx[rng.uniform_int(i)]);
    std::vector<std::vector<EventSequence>> out(fractions.size());
    std::size_t pos = 0;
    for (std::size_t s = 0; s < fractions.size(); ++s) {
        std::size_t count = s + 1 == fractions.size()
                                ? data.size() - pos
                                : static_cast<std::size_t>(fractions[s] * data.size());
        for (std::size_t i = 0; i < count && pos < data.size(); ++i, ++pos)
            out[s].push_back(data[idx[pos]]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// pretraining loop
// ---------------------------------------------------------------------------

struct TrainLogEntry {
    int step = 0;
    double loss = 0.0;
    double lr = 0.0;
};

struct PretrainResult {
    std::vector<TrainLogEntry> log;
    double initial_loss = 0.0;
    double final_loss = 0.0;
};

// Step-based loop: cycles deterministically through a shuffled order,
// injects random events per sample, averages the combined loss over the batch.
inline PretrainResult run_pretrain(CarFormer& model,
                                   const std::vector<EventSequence>& train,
                                   const TrainConfig& tcfg,
                                   const std::function<void(const TrainLogEntry&)>& on_log = {}) {
    if (train.empty()) throw DataError("run_pretrain: empty training set");
    const CarFormerConfig& mcfg = model.config();
    Rng rng(tcfg.seed);
    init_weights(model.params(), mcfg.n_layers, rng);
    AdamW opt(model.params(), tcfg);

    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng = rng.split(1);
    for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[shuffle_rng.uniform_int(i)]);

    PretrainResult res;
    std::size_t cursor = 0;
    Rng inject_rng = rng.split(2);
    for (int step = 0; step < tcfg.total_steps; ++step) {
        model.params().zero_grad();
        double batch_loss = 0.0;
        int used = 0;
        std::vector<Tensor> losses;
        for (int b = 0; b < tcfg.batch_size; ++b) {
            const EventSequence& seq = train[order[cursor]];
            cursor = (cursor + 1) % order.size();
            if (seq.events.size() < 3) continue;
            EventSequence injected = inject_random_events(
                seq, mcfg.injection_p, inject_rng, mcfg.vocab_size, mcfg.max_len - 2);
            ModelInput in = build_model_input(injected, mcfg);
            EncoderOutput out = model.forward(in);
            PretrainLoss loss = total_pretrain_loss(out, in, mcfg);
            losses.push_back(loss.total);
            ++used;
        }
        if (used == 0) throw DataError("run_pretrain: batch had no usable sequences");
        Tensor total = losses[0];
        for (std::size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
        total = scale(total, 1.0 / used);
        double lv = total.item();
        if (!std::isfinite(lv)) throw NumericError("run_pretrain: NaN loss at step " +
                                                   std::to_string(step));
        backward(total);
        opt.step(model.params(), lr_at(step, tcfg));
        batch_loss = lv;
        if (step == 0) res.initial_loss = batch_loss;
        res.final_loss = batch_loss;
        if (step % tcfg.log_every == 0 || step + 1 == tcfg.total_steps) {
            TrainLogEntry e{step, batch_loss, lr_at(step, tcfg)};
            res.log.push_back(e);
            if (on_log) on_log(e);
        }
    }
    return res;
}

// ---------------------------------------------------------------------------
// EPredictor loop (early stopping on validation loss)
// ---------------------------------------------------------------------------

struct EpTrainResult {
    std::vector<double> train_loss_per_epoch;
    std::vector<double> val_loss_per_epoch;
    int best_epoch = -1;
    int stopped_epoch = -1;
};

inline double ep_eval_loss(const CarFormer& backbone, const EPredictor& dec,
                           const std::vector<EventSequence>& data) {
    const auto& mcfg = backbone.config();
    const auto& ecfg = dec.config();
    double total = 0.0;
    int n = 0;
    for (const auto& seq : data) {
        if (!seq.labeled()) continue;
        if (static_cast<int>(seq.events.size()) < ecfg.min_context) continue;
        ModelInput in = build_model_input(seq, mcfg);
        EncoderOutput enc = backbone.forward(in);
        EpOutput out = dec.forward(enc.hidden, in);
        total += ep_total_loss(out, in, seq.ep_label_ids, ecfg).item();
        ++n;
    }
    if (n == 0) throw DataError("ep_eval_loss: no evaluable sequences");
    return total / n;
}

// Epoch loop with patience on validation loss; backbone frozen by default.
// Returns with the decoder holding its best-validation parameters.
inline EpTrainResult run_ep_train(CarFormer& backbone, EPredictor& dec,
                                  const std::vector<EventSequence>& train,
                                  const std::vector<EventSequence>& val,
                                  const TrainConfig& tcfg, bool freeze_backbone = true,
                                  const std::function<void(int, double, double)>& on_epoch = {}) {
    if (train.empty()) throw DataError("run_ep_train: empty training set");
    const auto& mcfg = backbone.config();
    const auto& ecfg = dec.config();
    Rng rng(tcfg.seed ^ 0x5eede001ULL);
    init_weights(dec.params(), 2, rng);

    for (auto& p : backbone.params().tensors()) p->requires_grad = !freeze_backbone;

    AdamW opt(dec.params(), tcfg);
    std::unique_ptr<AdamW> opt_backbone;
    if (!freeze_backbone) opt_backbone = std::make_unique<AdamW>(backbone.params(), tcfg);
    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < train.size(); ++i)
        if (train[i].labeled() &&
            static_cast<int>(train[i].events.size()) >= ecfg.min_context &&
            static_cast<int>(train[i].events.size()) + 2 <= mcfg.max_len)
            order.push_back(i);
    if (order.empty()) throw DataError("run_ep_train: no trainable sequences");

    EpTrainResult res;
    double best_val = std::numeric_limits<double>::infinity();
    std::vector<std::vector<double>> best_params;
    int bad_epochs = 0;
    int step = 0;
    TrainConfig sched = tcfg;
    sched.total_steps = std::max<int>(
        2, tcfg.max_epochs * static_cast<int>((order.size() + tcfg.batch_size - 1) /
                                              tcfg.batch_size));
    if (sched.warmup_steps >= sched.total_steps) sched.warmup_steps = sched.total_steps / 10;

    for (int epoch = 0; epoch < tcfg.max_epochs; ++epoch) {
        Rng shuffle_rng = rng.split(100 + epoch);
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.uniform_int(i)]);
        double epoch_loss = 0.0;
        int batches = 0;
        for (std::size_t start = 0; start < order.size(); start += tcfg.batch_size) {
            dec.params().zero_grad();
            if (!freeze_backbone) backbone.params().zero_grad();
            std::vector<Tensor> losses;
            for (std::size_t b = start;
                 b < std::min(order.size(), start + tcfg.batch_size); ++b) {
                const EventSequence& seq = train[order[b]];
                ModelInput in = build_model_input(seq, mcfg);
                EncoderOutput enc = backbone.forward(in);
                EpOutput out = dec.forward(enc.hidden, in);
                losses.push_back(ep_total_loss(out, in, seq.ep_label_ids, ecfg));
            }
            Tensor total = losses[0];
            for (std::size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
            total = scale(total, 1.0 / losses.size());
            double lv = total.item();
            if (!std::isfinite(lv))
                throw NumericError("run_ep_train: NaN loss in epoch " + std::to_string(epoch));
            backward(total);
            opt.step(dec.params(), lr_at(step, sched));
            if (opt_backbone) opt_backbone->step(backbone.params(), lr_at(step, sched));
            ++step;
            epoch_loss += lv;
            ++batches;
        }
        epoch_loss /= std::max(1, batches);
        double val_loss = val.empty() ? epoch_loss : ep_eval_loss(backbone, dec, val);
        res.train_loss_per_epoch.push_back(epoch_loss);
        res.val_loss_per_epoch.push_back(val_loss);
        if (on_epoch) on_epoch(epoch, epoch_loss, val_loss);
        if (val_loss < best_val) {
            best_val = val_loss;
            res.best_epoch = epoch;
            best_params.clear();
            for (auto& p : dec.params().tensors()) best_params.push_back(p->v);
            bad_epochs = 0;
        } else if (++bad_epochs >= tcfg.patience) {
            res.stopped_epoch = epoch;
            break;
        }
    }
    if (res.stopped_epoch < 0)
        res.stopped_epoch = static_cast<int>(res.train_loss_per_epoch.size()) - 1;
    if (!best_params.empty()) {
        auto ts = dec.params().tensors();
        for (std::size_t i = 0; i < ts.size(); ++i) ts[i]->v = best_params[i];
    }
    for (auto& p : backbone.params().tensors()) p->requires_grad = true;
    return res;
}

}  // namespace cf
