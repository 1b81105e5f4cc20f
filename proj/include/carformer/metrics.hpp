#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "carformer/errors.hpp"
#include "carformer/event_model.hpp"
#include "carformer/tensor.hpp"

namespace cf {

// ---------------------------------------------------------------------------
// scalar metrics
// ---------------------------------------------------------------------------

// Next-token accuracy: argmax(logits_i) == token_{i+1}, averaged over
// positions with a target; injected positions excluded unless asked for.
inline double next_event_accuracy(const Tensor& logits, const std::vector<int>& tokens,
                                  const std::vector<std::uint8_t>& injected,
                                  bool include_injected = false) {
    const int L = static_cast<int>(tokens.size());
    const int v = logits->cols();
    int hits = 0, n = 0;
    for (int i = 0; i + 1 < L; ++i) {
        if (!include_injected && injected[i]) continue;
        const double* row = &logits->v[static_cast<std::size_t>(i) * v];
        int best = 0;
        for (int j = 1; j < v; ++j)
            if (row[j] > row[best]) best = j;
        hits += best == tokens[i + 1] ? 1 : 0;
        ++n;
    }
    if (n == 0) throw DataError("next_event_accuracy: no target positions");
    return static_cast<double>(hits) / n;
}

struct MapeResult {
    double value = 0.0;  // percent
    int skipped_zero_targets = 0;
};

// Mean absolute percentage error; zero targets are skipped and counted.
inline MapeResult mape(const std::vector<double>& pred, const std::vector<double>& target) {
    if (pred.size() != target.size()) throw ShapeError("mape: length mismatch");
    MapeResult r;
    double sum = 0.0;
    int n = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (target[i] == 0.0) {
            ++r.skipped_zero_targets;
            continue;
        }
        sum += std::abs((pred[i] - target[i]) / target[i]);
        ++n;
    }
    if (n == 0) throw DataError("mape: all targets zero");
    r.value = 100.0 * sum / n;
    return r;
}

inline double rmse(const std::vector<double>& pred, const std::vector<double>& target) {
    if (pred.size() != target.size() || pred.empty()) throw ShapeError("rmse: bad input");
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        double e = pred[i] - target[i];
        s += e * e;
    }
    return std::sqrt(s / pred.size());
}

inline double mae(const std::vector<double>& pred, const std::vector<double>& target) {
    if (pred.size() != target.size() || pred.empty()) throw ShapeError("mae: bad input");
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) s += std::abs(pred[i] - target[i]);
    return s / pred.size();
}

// MAE in hours: mean |f^-1(pred') - f^-1(target')| with base b.
inline double mae_hours(const std::vector<double>& pred_scaled,
                        const std::vector<double>& target_scaled, double b = 30.0) {
    if (pred_scaled.size() != target_scaled.size() || pred_scaled.empty())
        throw ShapeError("mae_hours: bad input");
    double s = 0.0;
    for (std::size_t i = 0; i < pred_scaled.size(); ++i)
        s += std::abs(unscale_time(pred_scaled[i], b) - unscale_time(target_scaled[i], b));
    return s / pred_scaled.size();
}

// ---------------------------------------------------------------------------
// micro F1
// ---------------------------------------------------------------------------

struct F1Counts {
    long long tp = 0, fp = 0, fn = 0;

    void add(const F1Counts& o) {
        tp += o.tp;
        fp += o.fp;
        fn += o.fn;
    }

    // Degenerate empty case (nothing predicted, nothing true) is a perfect 1;
    // missing existing truths scores 0.
    double f1() const {
        if (tp + fp + fn == 0) return 1.0;
        return 2.0 * tp / static_cast<double>(2 * tp + fp + fn);
    }
};

inline F1Counts f1_counts(const std::vector<double>& probs, const std::vector<double>& y,
                          double threshold) {
    if (probs.size() != y.size()) throw ShapeError("f1_counts: length mismatch");
    F1Counts c;
    for (std::size_t j = 0; j < probs.size(); ++j) {
        bool pred = probs[j] >= threshold;
        bool truth = y[j] >= 0.5;
        if (pred && truth) ++c.tp;
        else if (pred) ++c.fp;
        else if (truth) ++c.fn;
    }
    return c;
}

// Pools TP/FP/FN over all labels and all evaluated steps.
inline double micro_f1(const std::vector<std::vector<double>>& step_probs,
                       const std::vector<double>& y, double threshold) {
    if (threshold <= 0.0 || threshold >= 1.0)
        throw ConfigError("micro_f1: threshold must be in (0,1)");
    F1Counts total;
    for (const auto& p : step_probs) total.add(f1_counts(p, y, threshold));
    return total.f1();
}

// ---------------------------------------------------------------------------
// metric curves
// ---------------------------------------------------------------------------

struct MetricCurve {
    std::string name;
    std::vector<int> x;         // observation counts, strictly increasing
    std::vector<double> value;
    std::vector<long long> count;  // aggregation count per x
};

// Aggregates per-observation-count records into a curve (mean per x).
inline MetricCurve build_curve(const std::map<int, std::vector<double>>& records,
                               const std::string& name) {
    MetricCurve c;
    c.name = name;
    for (const auto& [i, vals] : records) {
        if (vals.empty()) continue;
        double s = 0.0;
        for (double v : vals) s += v;
        c.x.push_back(i);
        c.value.push_back(s / vals.size());
        c.count.push_back(static_cast<long long>(vals.size()));
    }
    return c;
}

// Per-step micro-F1 curve: pools counts across the test set per step i.
inline MetricCurve build_f1_curve(const std::map<int, F1Counts>& per_step,
                                  const std::string& name = "micro_f1") {
    MetricCurve c;
    c.name = name;
    for (const auto& [i, cnt] : per_step) {
        c.x.push_back(i);
        c.value.push_back(cnt.f1());
        c.count.push_back(cnt.tp + cnt.fp + cnt.fn);
    }
    return c;
}

// ---------------------------------------------------------------------------
// CPMW / CPMWAUC
// ---------------------------------------------------------------------------

enum class CpmwDirection { ScoreAbove, ErrorBelow };

struct CPMWReport {
    bool has_window = false;
    int x_theta = 0;
    double window_end = 0.0;  // mu_seq + delta
    double theta = 0.0;
    double delta = 0.0;
    double cpmwauc = 0.0;
    double cpmwauc_normalized = 0.0;
    std::string metric;
};

namespace detail {

inline bool crossed(double v, double theta, CpmwDirection dir) {
    return dir == CpmwDirection::ScoreAbove ? v >= theta : v <= theta;
}

inline double curve_at(const MetricCurve& c, double x) {
    if (c.x.empty()) throw DataError("curve_at: empty curve");
    if (x <= c.x.front()) return c.value.front();
    if (x >= c.x.back()) return c.value.back();
    for (std::size_t i = 1; i < c.x.size(); ++i)
        if (x <= c.x[i]) {
            double t = (x - c.x[i - 1]) / static_cast<double>(c.x[i] - c.x[i - 1]);
            return c.value[i - 1] + t * (c.value[i] - c.value[i - 1]);
        }
    return c.value.back();
}

}  // namespace detail

// Trapezoidal integral of the piecewise-linear curve over [a, b].
inline double cpmwauc(const MetricCurve& curve, double a, double b, bool normalize) {
    if (curve.x.size() < 2) throw DataError("cpmwauc: curve too short");
    b = std::min(b, static_cast<double>(curve.x.back()));
    a = std::max(a, static_cast<double>(curve.x.front()));
    if (b - a < 1.0) throw DataError("cpmwauc: window narrower than one sample");
    double integral = 0.0;
    double prev_x = a, prev_v = detail::curve_at(curve, a);
    for (std::size_t i = 0; i < curve.x.size(); ++i) {
        double cx = curve.x[i];
        if (cx <= a) continue;
        if (cx >= b) break;
        integral += 0.5 * (prev_v + curve.value[i]) * (cx - prev_x);
        prev_x = cx;
        prev_v = curve.value[i];
    }
    double end_v = detail::curve_at(curve, b);
    integral += 0.5 * (prev_v + end_v) * (b - prev_x);
    return normalize ? integral / (b - a) : integral;
}

// Entry point x_theta = first x whose value crosses theta and stays crossed
// for the following `debounce` curve points (or all remaining points near the
// end). Window end = mu_seq + delta.
inline CPMWReport cpmw(const MetricCurve& curve, double theta, double mu_seq,
                       double delta, CpmwDirection dir, int debounce = 3) {
    if (curve.x.empty()) throw DataError("cpmw: empty curve");
    CPMWReport r;
    r.theta = theta;
    r.delta = delta;
    r.metric = curve.name;
    r.window_end = mu_seq + delta;
    const int n = static_cast<int>(curve.x.size());
    int entry = -1;
    for (int i = 0; i < n; ++i) {
        bool ok = true;
        int ahead = std::min(debounce, n - 1 - i);
        for (int k = 0; k <= ahead && ok; ++k)
            ok = detail::crossed(curve.value[i + k], theta, dir);
        if (ok) {
            entry = i;
            break;
        }
    }
    if (entry < 0 || curve.x[entry] > r.window_end) return r;  // no window
    r.has_window = true;
    r.x_theta = curve.x[entry];
    if (r.window_end - r.x_theta >= 1.0 && curve.x.size() >= 2) {
        r.cpmwauc = cpmwauc(curve, r.x_theta, r.window_end, false);
        r.cpmwauc_normalized = cpmwauc(curve, r.x_theta, r.window_end, true);
    }
    return r;
}

// ---------------------------------------------------------------------------
// emission
// ---------------------------------------------------------------------------

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

inline void save_curve_csv(const MetricCurve& c, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write curve file " + path);
    f << "metric,i,value,count\n";
    for (std::size_t i = 0; i < c.x.size(); ++i)
        f << c.name << "," << c.x[i] << "," << format_double(c.value[i]) << ","
          << c.count[i] << "\n";
}

inline nlohmann::json curve_to_json(const MetricCurve& c) {
    return {{"metric", c.name}, {"i", c.x}, {"value", c.value}, {"count", c.count}};
}

inline nlohmann::json cpmw_to_json(const CPMWReport& r) {
    nlohmann::json j = {{"metric", r.metric},
                        {"theta", r.theta},
                        {"delta", r.delta},
                        {"window_end", r.window_end},
                        {"has_window", r.has_window}};
    if (r.has_window) {
        j["x_theta"] = r.x_theta;
        j["cpmwauc"] = r.cpmwauc;
        j["cpmwauc_normalized"] = r.cpmwauc_normalized;
    }
    return j;
}

}  // namespace cf
