#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "carformer/errors.hpp"

namespace cf {

// One DTC observation, relative to the first event of its window.
struct Event {
    int token = 0;
    double t = 0.0;       // hours since first event in window
    double m = 0.0;       // km since first event in window
    bool injected = false;

    bool operator==(const Event&) const = default;
};

struct EventSequence {
    std::string vehicle_id;
    std::vector<Event> events;
    // Binary vector over N error patterns, empty when unlabeled.
    std::vector<int> ep_label_ids;

    std::size_t size() const { return events.size(); }
    bool labeled() const { return !ep_label_ids.empty(); }
};

// ---------------------------------------------------------------------------
// time transform (and inverse)
// ---------------------------------------------------------------------------

// t' = log_b(t + 1) - 1
inline double scale_time(double t, double b) {
    if (t < 0.0) throw DataError("scale_time: negative time " + std::to_string(t));
    if (b <= 1.0) throw ConfigError("scale_time: base must exceed 1");
    return std::log(t + 1.0) / std::log(b) - 1.0;
}

// t = b^(t' + 1) - 1
inline double unscale_time(double t_scaled, double b) {
    if (b <= 1.0) throw ConfigError("unscale_time: base must exceed 1");
    return std::pow(b, t_scaled + 1.0) - 1.0;
}

// ---------------------------------------------------------------------------
// vocabulary
// ---------------------------------------------------------------------------

// Bijection between DTC strings `ECU|Base-DTC|Fault-Byte` and dense ids.
// Reserved ids are fixed: <s>=0, </s>=1, <pad>=2, <unk>=3. Unknown DTCs at
// inference map to <unk>.
class Vocabulary {
public:
    static constexpr int kBos = 0;
    static constexpr int kEos = 1;
    static constexpr int kPad = 2;
    static constexpr int kUnk = 3;
    static constexpr int kNumReserved = 4;

    Vocabulary() {
        for (const char* s : {"<s>", "</s>", "<pad>", "<unk>"}) add_raw(s);
    }

    // Validates the ECU|Base-DTC|Fault-Byte form and interns the string.
    int add_dtc(const std::string& dtc) {
        validate_dtc(dtc);
        auto it = to_id_.find(dtc);
        if (it != to_id_.end()) return it->second;
        return add_raw(dtc);
    }

    // Total lookup: unseen strings resolve to <unk>.
    int encode(const std::string& dtc) const {
        validate_dtc(dtc);
        auto it = to_id_.find(dtc);
        return it == to_id_.end() ? kUnk : it->second;
    }

    const std::string& decode(int id) const {
        if (id < 0 || id >= static_cast<int>(to_string_.size()))
            throw DataError("vocabulary id " + std::to_string(id) + " out of range");
        return to_string_[id];
    }

    bool contains(const std::string& dtc) const { return to_id_.count(dtc) > 0; }
    int size() const { return static_cast<int>(to_string_.size()); }

    static void validate_dtc(const std::string& dtc) {
        int bars = 0;
        for (char c : dtc)
            if (c == '|') ++bars;
        if (bars != 2 || dtc.front() == '|' || dtc.back() == '|')
            throw DataError("malformed DTC string: \"" + dtc + "\"");
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["version"] = 1;
        j["reserved"] = {"<s>", "</s>", "<pad>", "<unk>"};
        nlohmann::json tokens = nlohmann::json::object();
        for (int i = kNumReserved; i < size(); ++i) tokens[to_string_[i]] = i;
        j["tokens"] = tokens;
        return j;
    }

    static Vocabulary from_json(const nlohmann::json& j) {
        if (!j.contains("version") || j.at("version") != 1)
            throw DataError("vocabulary file: unsupported version");
        Vocabulary v;
        // ids must be dense; rebuild in id order
        std::map<int, std::string> by_id;
        for (auto& [key, val] : j.at("tokens").items()) by_id[val.get<int>()] = key;
        int expect = kNumReserved;
        for (auto& [id, s] : by_id) {
            if (id != expect++)
                throw DataError("vocabulary file: non-dense token ids");
            v.add_dtc(s);
        }
        return v;
    }

    void save(const std::string& path) const {
        std::ofstream f(path);
        if (!f) throw DataError("cannot write vocabulary file " + path);
        f << to_json().dump(2) << "\n";
    }

    static Vocabulary load(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw DataError("cannot read vocabulary file " + path);
        nlohmann::json j;
        f >> j;
        return from_json(j);
    }

private:
    int add_raw(const std::string& s) {
        int id = size();
        to_string_.push_back(s);
        to_id_[s] = id;
        return id;
    }

    std::vector<std::string> to_string_;
    std::map<std::string, int> to_id_;
};

// ---------------------------------------------------------------------------
// windowing
// ---------------------------------------------------------------------------

struct RawEvent {
    int token = 0;
    double abs_ts_hours = 0.0;
    double abs_km = 0.0;
};

inline constexpr double kWindowHours = 720.0;  // 30 days
inline constexpr double kWindowKm = 300.0;

// Keeps events within 720h and 300km of the last event (inclusive bounds),
// then rebases time/mileage onto the first kept event. Never reorders.
inline EventSequence window_sequence(const std::vector<RawEvent>& raw,
                                     const std::string& vehicle_id = "") {
    if (raw.empty()) throw DataError("window_sequence: empty input");
    for (std::size_t i = 1; i < raw.size(); ++i)
        if (raw[i].abs_ts_hours < raw[i - 1].abs_ts_hours)
            throw DataError("window_sequence: input not sorted by timestamp");
    const RawEvent& last = raw.back();
    std::size_t first = raw.size();
    for (std::size_t i = 0; i < raw.size(); ++i) {
        if (last.abs_ts_hours - raw[i].abs_ts_hours <= kWindowHours &&
            last.abs_km - raw[i].abs_km <= kWindowKm) {
            first = i;
            break;
        }
    }
    if (first == raw.size()) throw DataError("window_sequence: empty window");
    EventSequence out;
    out.vehicle_id = vehicle_id;
    for (std::size_t i = first; i < raw.size(); ++i) {
        Event e;
        e.token = raw[i].token;
        e.t = raw[i].abs_ts_hours - raw[first].abs_ts_hours;
        e.m = raw[i].abs_km - raw[first].abs_km;
        out.events.push_back(e);
    }
    return out;
}

// ---------------------------------------------------------------------------
// JSONL dataset format
// ---------------------------------------------------------------------------

inline nlohmann::json sequence_to_json(const EventSequence& s, const Vocabulary& vocab) {
    nlohmann::json j;
    j["vehicle_id"] = s.vehicle_id;
    nlohmann::json evs = nlohmann::json::array();
    for (const auto& e : s.events) {
        evs.push_back({{"dtc", vocab.decode(e.token)},
                       {"t", e.t},
                       {"m", e.m},
                       {"injected", e.injected}});
    }
    j["events"] = std::move(evs);
    if (s.labeled())
        j["ep_labels"] = s.ep_label_ids;
    else
        j["ep_labels"] = nullptr;
    return j;
}

inline EventSequence sequence_from_json(const nlohmann::json& j, const Vocabulary& vocab) {
    EventSequence s;
    s.vehicle_id = j.at("vehicle_id").get<std::string>();
    for (const auto& je : j.at("events")) {
        Event e;
        e.token = vocab.encode(je.at("dtc").get<std::string>());
        e.t = je.at("t").get<double>();
        e.m = je.at("m").get<double>();
        e.injected = je.value("injected", false);
        if (e.t < 0 || e.m < 0 || !std::isfinite(e.t) || !std::isfinite(e.m))
            throw DataError("sequence " + s.vehicle_id + ": invalid t/m value");
        s.events.push_back(e);
    }
    if (j.contains("ep_labels") && !j.at("ep_labels").is_null())
        s.ep_label_ids = j.at("ep_labels").get<std::vector<int>>();
    return s;
}

inline void save_jsonl(const std::vector<EventSequence>& data, const Vocabulary& vocab,
                       const std::string& path) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write dataset file " + path);
    for (const auto& s : data) f << sequence_to_json(s, vocab).dump() << "\n";
}

inline std::vector<EventSequence> load_jsonl(const std::string& path, const Vocabulary& vocab) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot read dataset file " + path);
    std::vector<EventSequence> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        out.push_back(sequence_from_json(nlohmann::json::parse(line), vocab));
    }
    return out;
}

}  // namespace cf
