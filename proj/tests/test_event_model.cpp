#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "carformer/event_model.hpp"
#include "carformer/rng.hpp"

using namespace cf;

TEST_CASE("time transform anchors are exact") {
    CHECK(scale_time(9.0, 10.0) == 0.0);
    CHECK(unscale_time(1.0, 30.0) == 899.0);
    CHECK(scale_time(0.0, 10.0) == -1.0);
    CHECK(unscale_time(-1.0, 10.0) == 0.0);
}

TEST_CASE("time transform roundtrip over a wide range") {
    Rng rng(42);
    for (double b : {10.0, 30.0}) {
        for (int i = 0; i < 10000; ++i) {
            double t = rng.uniform(0.0, 720.0);
            double rt = unscale_time(scale_time(t, b), b);
            double denom = std::max(std::abs(t), 1e-12);
            CHECK(std::abs(rt - t) / denom < 1e-9);
        }
    }
}

TEST_CASE("time transform rejects invalid input") {
    CHECK_THROWS_AS(scale_time(-0.5, 10.0), DataError);
    CHECK_THROWS_AS(scale_time(1.0, 1.0), ConfigError);
    CHECK_THROWS_AS(unscale_time(0.0, 0.5), ConfigError);
}

TEST_CASE("vocabulary reserves fixed special ids") {
    Vocabulary v;
    CHECK(v.size() == 4);
    CHECK(v.decode(Vocabulary::kBos) == "<s>");
    CHECK(v.decode(Vocabulary::kEos) == "</s>");
    CHECK(v.decode(Vocabulary::kPad) == "<pad>");
    CHECK(v.decode(Vocabulary::kUnk) == "<unk>");
}

TEST_CASE("vocabulary is a bijection with total encode") {
    Vocabulary v;
    int a = v.add_dtc("ECU01|P-0420|F3");
    int b = v.add_dtc("ECU02|P-0171|F1");
    CHECK(a == 4);
    CHECK(b == 5);
    CHECK(v.add_dtc("ECU01|P-0420|F3") == a);  // idempotent
    CHECK(v.encode("ECU01|P-0420|F3") == a);
    CHECK(v.decode(b) == "ECU02|P-0171|F1");
    CHECK(v.encode("ECU09|P-9999|F9") == Vocabulary::kUnk);
}

TEST_CASE("vocabulary rejects malformed strings") {
    Vocabulary v;
    CHECK_THROWS_AS(v.add_dtc("no-separators"), DataError);
    CHECK_THROWS_AS(v.add_dtc("a|b"), DataError);
    CHECK_THROWS_AS(v.add_dtc("|a|b"), DataError);
    CHECK_THROWS_AS(v.add_dtc("a|b|c|d"), DataError);
}

TEST_CASE("vocabulary file roundtrip") {
    Vocabulary v;
    v.add_dtc("ECU01|P-0420|F3");
    v.add_dtc("ECU02|P-0171|F1");
    auto path = std::filesystem::temp_directory_path() / "cf_vocab_test.json";
    v.save(path.string());
    Vocabulary w = Vocabulary::load(path.string());
    CHECK(w.size() == v.size());
    CHECK(w.encode("ECU02|P-0171|F1") == 5);
    std::filesystem::remove(path);
}

TEST_CASE("windowing keeps the inclusive tail and rebases") {
    std::vector<RawEvent> raw = {
        {10, 0.0, 0.0},     // out: 800h before last
        {11, 80.0, 0.0},    // boundary: exactly 720h before last, kept
        {12, 100.0, 50.0},
        {13, 800.0, 120.0},
    };
    EventSequence s = window_sequence(raw, "veh");
    REQUIRE(s.events.size() == 3);
    CHECK(s.events[0].token == 11);
    CHECK(s.events[0].t == 0.0);
    CHECK(s.events[2].t == 720.0);
    CHECK(s.events[2].m == 120.0);
}

TEST_CASE("windowing applies the mileage bound too") {
    std::vector<RawEvent> raw = {
        {10, 0.0, 0.0},    // within 720h of last but 400km away
        {11, 10.0, 350.0},
        {12, 20.0, 400.0},
    };
    EventSequence s = window_sequence(raw, "veh");
    REQUIRE(s.events.size() == 2);
    CHECK(s.events[0].token == 11);
}

TEST_CASE("windowing rejects unsorted input") {
    std::vector<RawEvent> raw = {{1, 5.0, 0.0}, {2, 1.0, 0.0}};
    CHECK_THROWS_AS(window_sequence(raw), DataError);
}

TEST_CASE("jsonl roundtrip preserves sequences") {
    Vocabulary v;
    int a = v.add_dtc("ECU01|P-0420|F3");
    int b = v.add_dtc("ECU02|P-0171|F1");
    EventSequence s;
    s.vehicle_id = "veh-1";
    s.events = {{a, 0.0, 0.0, false}, {b, 1.5, 2.25, true}, {a, 700.0, 299.0, false}};
    s.ep_label_ids = {0, 3};
    EventSequence u;
    u.vehicle_id = "veh-2";
    u.events = {{b, 0.0, 0.0, false}};

    auto path = std::filesystem::temp_directory_path() / "cf_seq_test.jsonl";
    save_jsonl({s, u}, v, path.string());
    auto back = load_jsonl(path.string(), v);
    std::filesystem::remove(path);

    REQUIRE(back.size() == 2);
    CHECK(back[0].vehicle_id == "veh-1");
    CHECK(back[0].events == s.events);
    CHECK(back[0].ep_label_ids == s.ep_label_ids);
    CHECK_FALSE(back[1].labeled());
}

TEST_CASE("negative times in data files are rejected") {
    Vocabulary v;
    v.add_dtc("ECU01|P-0420|F3");
    nlohmann::json j = {{"vehicle_id", "x"},
                        {"events",
                         {{{"dtc", "ECU01|P-0420|F3"}, {"t", -1.0}, {"m", 0.0}}}},
                        {"ep_labels", nullptr}};
    CHECK_THROWS_AS(sequence_from_json(j, v), DataError);
}
