#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "carformer/errors.hpp"
#include "carformer/event_model.hpp"
#include "carformer/rng.hpp"

namespace cf {

// ---------------------------------------------------------------------------
// generator configuration
// ---------------------------------------------------------------------------

struct ExcitationPair {
    int src = 0;
    int dst = 0;
    double weight = 0.0;  // jump of the exponential kernel at lag 0
    double decay = 1.0;   // 1/hours
};

struct MotifSpec {
    std::vector<int> tokens;       // ordered trigger motif, 3..6 real tokens
    double terminal_delay_rate = 0.05;  // Exp rate for delay to EP occurrence
};

struct GeneratorConfig {
    int vocab_size = 200;       // includes the 4 reserved ids
    int n_error_patterns = 12;
    std::vector<double> base_intensity;       // per token, events/hour
    std::vector<ExcitationPair> excitations;
    std::vector<MotifSpec> motifs;            // one per error pattern
    double mean_length_target = 40.0;
    int max_events = 56;                      // hard cap per sequence
    double horizon_hours = kWindowHours;
    double zero_inflation_t = 0.15;           // point mass at dt = 0
    double zero_inflation_m = 0.20;           // point mass at dm = 0
    double labeled_fraction = 0.7;
    double second_motif_prob = 0.15;
    std::uint64_t seed = 1;

    int n_real_tokens() const { return vocab_size - Vocabulary::kNumReserved; }

    // Largest per-event branching ratio; the exponential-kernel Hawkes
    // process is stable iff this stays below 1.
    double branching_ratio() const {
        std::vector<double> out(vocab_size, 0.0);
        for (const auto& e : excitations) out[e.src] += e.weight / e.decay;
        return *std::max_element(out.begin(), out.end());
    }

    void validate() const {
        if (vocab_size <= Vocabulary::kNumReserved)
            throw ConfigError("generator: vocab_size too small");
        if (static_cast<int>(base_intensity.size()) != vocab_size)
            throw ConfigError("generator: base_intensity size mismatch");
        for (double mu : base_intensity)
            if (mu < 0.0) throw ConfigError("generator: negative base intensity");
        for (const auto& e : excitations) {
            if (e.decay <= 0.0) throw ConfigError("generator: non-positive decay");
            if (e.weight < 0.0) throw ConfigError("generator: negative excitation weight");
        }
        if (branching_ratio() >= 1.0)
            throw ConfigError("generator: excitation branching ratio >= 1 (intensity explosion)");
        for (const auto& m : motifs)
            if (m.tokens.size() < 3 || m.tokens.size() > 6)
                throw ConfigError("generator: motif length must be in [3,6]");
    }

    // Desk-scale fleet with chain-structured excitation and disjoint motifs.
    static GeneratorConfig desk_default(std::uint64_t seed = 1) {
        GeneratorConfig c;
        c.seed = seed;
        const int r0 = Vocabulary::kNumReserved;
        const int nreal = c.vocab_size - r0;
        // Motif tokens live in the vocabulary tail and never fire on their
        // own; the background process runs over the remaining head tokens,
        // so motif occurrences always come from planting.
        const int nbg = nreal - 3 * c.n_error_patterns;
        const double rho = 0.6;  // branching ratio of the token chain
        // Base intensities: unbalanced, heavier head, calibrated so the
        // expected count over the horizon hits mean_length_target.
        c.base_intensity.assign(c.vocab_size, 0.0);
        double raw_total = 0.0;
        for (int u = 0; u < nbg; ++u) raw_total += 1.0 / (u + 10.0);
        const double mu_total =
            c.mean_length_target * (1.0 - rho) / c.horizon_hours;
        for (int u = 0; u < nbg; ++u)
            c.base_intensity[r0 + u] = mu_total * (1.0 / (u + 10.0)) / raw_total;
        // Each background token excites its chain successor.
        const double decay = 1.0;
        for (int u = 0; u < nbg; ++u) {
            ExcitationPair e;
            e.src = r0 + u;
            e.dst = r0 + (u + 1) % nbg;
            e.decay = decay;
            e.weight = rho * decay;
            c.excitations.push_back(e);
        }
        for (int k = 0; k < c.n_error_patterns; ++k) {
            MotifSpec m;
            int base = r0 + nreal - 3 * (k + 1);
            m.tokens = {base, base + 1, base + 2};
            c.motifs.push_back(m);
        }
        return c;
    }
};

// ---------------------------------------------------------------------------
// fleet generation (Ogata thinning)
// ---------------------------------------------------------------------------

namespace detail {

struct ActiveExcitation {
    int dst;
    double weight;
    double decay;
};

// Samples one background sequence over the horizon via thinning. The total
// intensity is maximal immediately after each event, so the running bound
// is exact between events.
inline std::vector<std::pair<int, double>> sample_hawkes(const GeneratorConfig& cfg,
                                                         Rng& rng) {
    const double mu_total =
        std::accumulate(cfg.base_intensity.begin(), cfg.base_intensity.end(), 0.0);
    std::vector<std::vector<ExcitationPair>> by_src(cfg.vocab_size);
    for (const auto& e : cfg.excitations) by_src[e.src].push_back(e);

    std::vector<std::pair<int, double>> events;  // (token, t_hours)
    std::vector<ActiveExcitation> active;
    double t = 0.0;
    while (static_cast<int>(events.size()) < cfg.max_events) {
        double bound = mu_total;
        for (const auto& a : active) bound += a.weight;
        if (bound <= 0.0) break;
        double dt = rng.exponential(bound);
        t += dt;
        if (t > cfg.horizon_hours) break;
        for (auto& a : active) a.weight *= std::exp(-a.decay * dt);
        double lam = mu_total;
        for (const auto& a : active) lam += a.weight;
        if (rng.uniform() * bound > lam) continue;  // thinned
        // pick token proportionally to its intensity
        double pick = rng.uniform() * lam;
        int token = -1;
        for (int u = 0; u < cfg.vocab_size && token < 0; ++u) {
            pick -= cfg.base_intensity[u];
            if (pick < 0.0) token = u;
        }
        if (token < 0) {
            for (const auto& a : active) {
                pick -= a.weight;
                if (pick < 0.0) {
                    token = a.dst;
                    break;
                }
            }
        }
        if (token < 0) token = cfg.vocab_size - 1;  // fp slack
        events.emplace_back(token, t);
        for (const auto& e : by_src[token])
            active.push_back({e.dst, e.weight, e.decay});
        // prune decayed excitations to keep the bound tight
        if (active.size() > 256) {
            std::vector<ActiveExcitation> kept;
            for (const auto& a : active)
                if (a.weight > 1e-8) kept.push_back(a);
            active.swap(kept);
        }
    }
    return events;
}

}  // namespace detail

// Generates a synthetic fleet. Sequences that receive a trigger motif carry
// the matching error-pattern label(s) and end at the pattern occurrence time.
inline std::vector<EventSequence> generate_fleet(const GeneratorConfig& cfg,
                                                 int n_sequences) {
    cfg.validate();
    std::vector<EventSequence> out;
    out.reserve(n_sequences);
    for (int s = 0; s < n_sequences; ++s) {
        // Per-sequence split stream; retry short draws on sub-streams so the
        // fleet size stays exact and reproducible.
        Rng rng = Rng(cfg.seed).split(static_cast<std::uint64_t>(s) + 1);
        auto raw = detail::sample_hawkes(cfg, rng);
        for (std::uint64_t attempt = 1; raw.size() < 4 && attempt <= 64; ++attempt) {
            rng = Rng(cfg.seed).split((static_cast<std::uint64_t>(s) + 1) * 1000 + attempt);
            raw = detail::sample_hawkes(cfg, rng);
        }
        if (raw.size() < 4)
            throw ConfigError("generator: cannot reach minimum sequence length; "
                              "base intensities too low");

        EventSequence seq;
        char buf[32];
        std::snprintf(buf, sizeof(buf), "veh-%06d", s);
        seq.vehicle_id = buf;

        // zero-inflated dt: collapse some events onto their predecessor
        for (std::size_t i = 1; i < raw.size(); ++i)
            if (rng.uniform() < cfg.zero_inflation_t) raw[i].second = raw[i - 1].second;

        // mileage: non-decreasing, zero-inflated increments, per-sequence speed
        double speed = rng.uniform(0.05, 0.35);  // km/h
        std::vector<double> kms(raw.size(), 0.0);
        for (std::size_t i = 1; i < raw.size(); ++i) {
            double dt = raw[i].second - raw[i - 1].second;
            double dm = 0.0;
            if (dt > 0.0 && rng.uniform() >= cfg.zero_inflation_m)
                dm = speed * dt * rng.uniform(0.5, 1.5);
            kms[i] = std::min(kms[i - 1] + dm, kWindowKm);
        }

        // motif planting
        std::vector<int> labels;
        if (!cfg.motifs.empty() && rng.uniform() < cfg.labeled_fraction &&
            raw.size() >= 12) {
            labels.push_back(static_cast<int>(rng.uniform_int(cfg.motifs.size())));
            if (rng.uniform() < cfg.second_motif_prob) {
                int other = static_cast<int>(rng.uniform_int(cfg.motifs.size()));
                if (other != labels[0]) labels.push_back(other);
            }
            std::sort(labels.begin(), labels.end());
            // choose strictly increasing positions per motif, disjoint overall
            std::vector<std::size_t> taken;
            double last_motif_t = 0.0;
            bool ok = true;
            for (int ep : labels) {
                const auto& motif = cfg.motifs[ep].tokens;
                std::vector<std::size_t> pos;
                int attempts = 0;
                while (pos.size() < motif.size() && attempts < 200) {
                    ++attempts;
                    std::size_t p = rng.uniform_int(raw.size());
                    if (std::find(taken.begin(), taken.end(), p) == taken.end() &&
                        std::find(pos.begin(), pos.end(), p) == pos.end())
                        pos.push_back(p);
                }
                if (pos.size() < motif.size()) {
                    ok = false;
                    break;
                }
                std::sort(pos.begin(), pos.end());
                for (std::size_t i = 0; i < motif.size(); ++i)
                    raw[pos[i]].first = motif[i];
                taken.insert(taken.end(), pos.begin(), pos.end());
                last_motif_t = std::max(last_motif_t, raw[pos.back()].second);
            }
            if (ok) {
                // terminal-time law: pattern occurs shortly after the motif
                // completes; truncate the sequence there
                double t_ep = last_motif_t +
                              rng.exponential(cfg.motifs[labels[0]].terminal_delay_rate);
                std::size_t keep = raw.size();
                for (std::size_t i = 0; i < raw.size(); ++i)
                    if (raw[i].second > t_ep) {
                        keep = i;
                        break;
                    }
                raw.resize(std::max(keep, taken.empty() ? std::size_t(0)
                                                        : *std::max_element(taken.begin(), taken.end()) + 1));
                seq.ep_label_ids = labels;
            }
        }

        for (std::size_t i = 0; i < raw.size(); ++i) {
            Event e;
            e.token = raw[i].first;
            e.t = raw[i].second - raw[0].second;
            e.m = kms[i] - kms[0];
            seq.events.push_back(e);
        }
        out.push_back(std::move(seq));
    }
    return out;
}

// ---------------------------------------------------------------------------
// random event injection
// ---------------------------------------------------------------------------

struct InjectStats {
    int injected = 0;
    bool truncated = false;
};

// Between each pair of consecutive events, injects a geometric number of
// random events: while a p-coin keeps landing, draw (u', t', m') with
// t' ~ Unif(t_i, t_{i+1}), m' ~ Unif(m_i, m_{i+1}), u' uniform over real
// tokens. Original events are untouched and keep their relative order.
// max_len <= 0 disables the length cap.
inline EventSequence inject_random_events(const EventSequence& s, double p, Rng& rng,
                                          int vocab_size, int max_len = 0,
                                          InjectStats* stats = nullptr) {
    if (p < 0.0 || p >= 1.0) throw ConfigError("inject: p must be in [0,1)");
    if (s.events.size() < 3) throw DataError("inject: sequence too short (L < 3)");
    EventSequence out;
    out.vehicle_id = s.vehicle_id;
    out.ep_label_ids = s.ep_label_ids;
    InjectStats local;
    const int nreal = vocab_size - Vocabulary::kNumReserved;
    auto full = [&]() {
        return max_len > 0 && static_cast<int>(out.events.size()) >= max_len;
    };
    for (std::size_t i = 0; i < s.events.size(); ++i) {
        if (full()) {
            local.truncated = true;
            break;
        }
        out.events.push_back(s.events[i]);
        if (i + 1 >= s.events.size()) break;
        std::vector<Event> slot;
        while (p > 0.0 && rng.uniform() < p) {
            Event e;
            e.token = Vocabulary::kNumReserved + static_cast<int>(rng.uniform_int(nreal));
            e.t = rng.uniform(s.events[i].t, s.events[i + 1].t);
            e.m = rng.uniform(s.events[i].m, s.events[i + 1].m);
            e.injected = true;
            slot.push_back(e);
        }
        std::stable_sort(slot.begin(), slot.end(),
                         [](const Event& a, const Event& b) { return a.t < b.t; });
        for (const auto& e : slot) {
            if (full()) {
                local.truncated = true;
                break;
            }
            out.events.push_back(e);
            ++local.injected;
        }
    }
    if (stats) *stats = local;
    return out;
}

// ---------------------------------------------------------------------------
// class re-sampling
// ---------------------------------------------------------------------------

struct ResampleConfig {
    int theta1 = 60;      // upsample floor
    int theta2 = 120;     // downsample ceiling
    int min_count = 5;    // drop classes rarer than this
    double injection_p = 0.05;
    std::uint64_t seed = 7;

    void validate() const {
        if (theta1 > theta2) throw ConfigError("resample: theta1 > theta2");
        if (min_count < 1) throw ConfigError("resample: min_count must be >= 1");
    }
};

struct ResampleResult {
    std::vector<EventSequence> data;
    std::vector<int> old_to_new;  // -1 for dropped classes
    int n_classes = 0;
};

// Drops classes rarer than min_count (compacting the label space), upsamples
// classes below theta1 by duplicating members through random-event injection,
// and downsamples classes above theta2.
inline ResampleResult resample_classes(const std::vector<EventSequence>& dataset,
                                       const ResampleConfig& cfg, int n_classes,
                                       int vocab_size) {
    cfg.validate();
    Rng rng(cfg.seed);

    std::vector<int> counts(n_classes, 0);
    for (const auto& s : dataset)
        for (int ep : s.ep_label_ids) counts.at(ep)++;

    ResampleResult res;
    res.old_to_new.assign(n_classes, -1);
    for (int k = 0; k < n_classes; ++k)
        if (counts[k] >= cfg.min_count) res.old_to_new[k] = res.n_classes++;
    if (res.n_classes == 0) throw DataError("resample: no class survives min_count");

    for (const auto& s : dataset) {
        if (!s.labeled()) continue;
        EventSequence t = s;
        t.ep_label_ids.clear();
        for (int ep : s.ep_label_ids)
            if (res.old_to_new[ep] >= 0) t.ep_label_ids.push_back(res.old_to_new[ep]);
        if (!t.ep_label_ids.empty()) res.data.push_back(std::move(t));
    }
    if (res.data.empty()) throw DataError("resample: empty dataset after drops");

    auto recount = [&]() {
        std::vector<int> c(res.n_classes, 0);
        for (const auto& s : res.data)
            for (int ep : s.ep_label_ids) c[ep]++;
        return c;
    };

    // upsample with injected-copy duplicates
    std::vector<int> cur = recount();
    for (int k = 0; k < res.n_classes; ++k) {
        if (cur[k] >= cfg.theta1) continue;
        std::vector<std::size_t> members;
        for (std::size_t i = 0; i < res.data.size(); ++i)
            for (int ep : res.data[i].ep_label_ids)
                if (ep == k) {
                    members.push_back(i);
                    break;
                }
        if (members.empty()) continue;
        int copy_id = 0;
        while (cur[k] < cfg.theta1) {
            const EventSequence& src = res.data[members[rng.uniform_int(members.size())]];
            EventSequence dup = inject_random_events(src, cfg.injection_p, rng, vocab_size);
            dup.vehicle_id = src.vehicle_id + "+up" + std::to_string(copy_id++);
            for (int ep : dup.ep_label_ids) cur[ep]++;
            res.data.push_back(std::move(dup));
        }
    }

    // downsample over-represented classes, preferring sequences that do not
    // support any other class
    cur = recount();
    for (int k = 0; k < res.n_classes; ++k) {
        while (cur[k] > cfg.theta2) {
            std::vector<std::size_t> removable;
            for (std::size_t i = 0; i < res.data.size(); ++i) {
                const auto& ids = res.data[i].ep_label_ids;
                if (ids.size() == 1 && ids[0] == k) removable.push_back(i);
            }
            if (removable.empty()) break;  // multi-label members only; leave them
            std::size_t victim = removable[rng.uniform_int(removable.size())];
            res.data.erase(res.data.begin() + static_cast<std::ptrdiff_t>(victim));
            cur[k]--;
        }
    }
    return res;
}

}  // namespace cf
