#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <map>

#include "carformer/rng.hpp"
#include "carformer/synth_data.hpp"

using namespace cf;

TEST_CASE("desk generator config is stable and valid") {
    GeneratorConfig c = GeneratorConfig::desk_default(1);
    CHECK_NOTHROW(c.validate());
    CHECK(c.branching_ratio() < 1.0);
    CHECK(c.motifs.size() == 12);
    // motifs are pairwise disjoint token sets
    std::map<int, int> uses;
    for (const auto& m : c.motifs)
        for (int t : m.tokens) uses[t]++;
    for (const auto& [tok, n] : uses) CHECK(n == 1);
}

TEST_CASE("unstable excitation is rejected") {
    GeneratorConfig c = GeneratorConfig::desk_default(1);
    c.excitations[0].weight = 2.0 * c.excitations[0].decay;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("pure Poisson limit has exponential gaps") {
    // With no excitation the gap distribution is Exp(mu); check the mean and
    // a coarse Kolmogorov-Smirnov distance against the exact CDF.
    GeneratorConfig c = GeneratorConfig::desk_default(3);
    c.excitations.clear();
    double mu = 0.0;
    for (double v : c.base_intensity) mu += v;
    c.max_events = 1000000;
    c.horizon_hours = 6.0e5;
    Rng rng(17);
    auto events = detail::sample_hawkes(c, rng);
    REQUIRE(events.size() > 8000);
    std::vector<double> gaps;
    for (std::size_t i = 1; i < events.size(); ++i)
        gaps.push_back(events[i].second - events[i - 1].second);
    double mean = 0.0;
    for (double g : gaps) mean += g;
    mean /= gaps.size();
    CHECK_THAT(mean, Catch::Matchers::WithinRel(1.0 / mu, 0.05));
    std::sort(gaps.begin(), gaps.end());
    double ks = 0.0;
    for (std::size_t i = 0; i < gaps.size(); ++i) {
        double emp = static_cast<double>(i + 1) / gaps.size();
        double cdf = 1.0 - std::exp(-mu * gaps[i]);
        ks = std::max(ks, std::abs(emp - cdf));
    }
    CHECK(ks < 0.02);
}

TEST_CASE("excitation raises the event count") {
    GeneratorConfig with = GeneratorConfig::desk_default(5);
    GeneratorConfig without = with;
    without.excitations.clear();
    with.max_events = without.max_events = 100000;
    long long n_with = 0, n_without = 0;
    for (int s = 0; s < 200; ++s) {
        Rng r1 = Rng(900 + s);
        Rng r2 = Rng(900 + s);
        n_with += static_cast<long long>(detail::sample_hawkes(with, r1).size());
        n_without += static_cast<long long>(detail::sample_hawkes(without, r2).size());
    }
    CHECK(n_with > n_without * 3 / 2);
}

TEST_CASE("fleet generation is deterministic and calibrated") {
    GeneratorConfig c = GeneratorConfig::desk_default(9);
    auto fleet1 = generate_fleet(c, 200);
    auto fleet2 = generate_fleet(c, 200);
    REQUIRE(fleet1.size() == 200);
    for (std::size_t i = 0; i < fleet1.size(); ++i) {
        CHECK(fleet1[i].vehicle_id == fleet2[i].vehicle_id);
        CHECK(fleet1[i].events == fleet2[i].events);
        CHECK(fleet1[i].ep_label_ids == fleet2[i].ep_label_ids);
    }
    double mean_len = 0.0;
    int labeled = 0;
    for (const auto& s : fleet1) {
        mean_len += static_cast<double>(s.events.size());
        labeled += s.labeled() ? 1 : 0;
        REQUIRE(s.events.size() >= 4);
        CHECK(static_cast<int>(s.events.size()) <= c.max_events);
        CHECK(s.events.front().t == 0.0);
        for (std::size_t i = 1; i < s.events.size(); ++i) {
            CHECK(s.events[i].t >= s.events[i - 1].t);
            CHECK(s.events[i].m >= s.events[i - 1].m);
        }
    }
    mean_len /= fleet1.size();
    // labeled sequences are truncated, so the mean sits below the raw target
    CHECK(mean_len > 20.0);
    CHECK(mean_len < c.mean_length_target * 1.15);
    CHECK(labeled > 60);
    CHECK(labeled < 180);
}

TEST_CASE("thinning simulator hits the length target") {
    GeneratorConfig c = GeneratorConfig::desk_default(9);
    c.max_events = 100000;  // uncapped
    double mean = 0.0;
    for (int i = 0; i < 1000; ++i) {
        Rng r(5000 + i);
        mean += static_cast<double>(detail::sample_hawkes(c, r).size());
    }
    mean /= 1000.0;
    CHECK(mean > c.mean_length_target * 0.85);
    CHECK(mean < c.mean_length_target * 1.15);
}

TEST_CASE("labeled sequences contain their motifs in order") {
    GeneratorConfig c = GeneratorConfig::desk_default(21);
    auto fleet = generate_fleet(c, 300);
    int checked = 0;
    for (const auto& s : fleet) {
        for (int ep : s.ep_label_ids) {
            const auto& motif = c.motifs[ep].tokens;
            std::size_t next = 0;
            for (const auto& e : s.events)
                if (next < motif.size() && e.token == motif[next]) ++next;
            CHECK(next == motif.size());
            ++checked;
        }
    }
    CHECK(checked > 50);
}

TEST_CASE("injection places events strictly inside their slot") {
    EventSequence s;
    s.vehicle_id = "v";
    for (int i = 0; i < 20; ++i)
        s.events.push_back({10 + i, i * 5.0, i * 2.0, false});
    Rng rng(33);
    for (int trial = 0; trial < 200; ++trial) {
        EventSequence out = inject_random_events(s, 0.3, rng, 200);
        std::size_t orig = 0;
        for (std::size_t i = 0; i < out.events.size(); ++i) {
            const Event& e = out.events[i];
            if (!e.injected) {
                CHECK(e == s.events[orig]);
                ++orig;
                continue;
            }
            REQUIRE(orig >= 1);
            REQUIRE(orig < s.events.size());
            CHECK(e.t >= s.events[orig - 1].t);
            CHECK(e.t <= s.events[orig].t);
            CHECK(e.m >= s.events[orig - 1].m);
            CHECK(e.m <= s.events[orig].m);
            CHECK(e.token >= Vocabulary::kNumReserved);
            CHECK(e.token < 200);
        }
        CHECK(orig == s.events.size());
        // non-decreasing timestamps overall
        for (std::size_t i = 1; i < out.events.size(); ++i)
            CHECK(out.events[i].t >= out.events[i - 1].t);
    }
}

TEST_CASE("injected count concentrates on the geometric slot mean") {
    // 150 observations, p = 0.05: each of the 149 slots takes Geometric(p)
    // extras with mean p/(1-p), so the long-run mean is about 7.84.
    const int L = 150;
    const double p = 0.05;
    EventSequence s;
    s.vehicle_id = "v";
    for (int i = 0; i < L; ++i) s.events.push_back({5, i * 1.0, i * 0.5, false});
    Rng rng(101);
    const int trials = 10000;
    double sum = 0.0, sumsq = 0.0;
    for (int t = 0; t < trials; ++t) {
        InjectStats st;
        inject_random_events(s, p, rng, 200, 0, &st);
        sum += st.injected;
        sumsq += static_cast<double>(st.injected) * st.injected;
    }
    double mean = sum / trials;
    double var = sumsq / trials - mean * mean;
    double se = std::sqrt(var / trials);
    double expected = (L - 1) * p / (1.0 - p);
    CHECK(mean > 7.5);
    CHECK(mean < 7.9);
    CHECK(std::abs(mean - expected) < 3.0 * se);
}

TEST_CASE("injection respects the optional length cap") {
    EventSequence s;
    for (int i = 0; i < 10; ++i) s.events.push_back({5, i * 1.0, 0.0, false});
    Rng rng(55);
    InjectStats st;
    EventSequence out = inject_random_events(s, 0.9, rng, 200, 12, &st);
    CHECK(out.events.size() <= 12);
    CHECK(st.truncated);
}

TEST_CASE("injection with p=0 is the identity") {
    EventSequence s;
    for (int i = 0; i < 6; ++i) s.events.push_back({7 + i, i * 2.0, i * 1.0, false});
    s.ep_label_ids = {1};
    Rng rng(9);
    EventSequence out = inject_random_events(s, 0.0, rng, 200);
    CHECK(out.events == s.events);
    CHECK(out.ep_label_ids == s.ep_label_ids);
}

TEST_CASE("injection rejects invalid arguments") {
    EventSequence s;
    s.events = {{1, 0, 0, false}, {2, 1, 0, false}};
    Rng rng(1);
    CHECK_THROWS_AS(inject_random_events(s, 0.05, rng, 200), DataError);  // too short
    s.events.push_back({3, 2, 0, false});
    CHECK_THROWS_AS(inject_random_events(s, 1.0, rng, 200), ConfigError);
    CHECK_THROWS_AS(inject_random_events(s, -0.1, rng, 200), ConfigError);
}

TEST_CASE("resampling enforces class count bounds") {
    // 4 classes: 0 rare (dropped), 1 small (upsampled), 2 mid, 3 large
    std::vector<EventSequence> data;
    auto mk = [&](int label, int n, const char* tag) {
        for (int i = 0; i < n; ++i) {
            EventSequence s;
            s.vehicle_id = std::string(tag) + std::to_string(i);
            for (int j = 0; j < 8; ++j) s.events.push_back({10 + j, j * 1.0, 0.0, false});
            if (label >= 0) s.ep_label_ids = {label};
            data.push_back(s);
        }
    };
    mk(0, 2, "a");    // below min_count
    mk(1, 10, "b");   // below theta1
    mk(2, 70, "c");   // inside [theta1, theta2]
    mk(3, 200, "d");  // above theta2
    ResampleConfig cfg;
    cfg.theta1 = 60;
    cfg.theta2 = 120;
    cfg.min_count = 5;
    ResampleResult r = resample_classes(data, cfg, 4, 200);
    CHECK(r.n_classes == 3);
    CHECK(r.old_to_new[0] == -1);
    CHECK(r.old_to_new[1] == 0);
    CHECK(r.old_to_new[2] == 1);
    CHECK(r.old_to_new[3] == 2);
    std::vector<int> counts(3, 0);
    for (const auto& s : r.data)
        for (int ep : s.ep_label_ids) counts.at(ep)++;
    for (int k = 0; k < 3; ++k) {
        CHECK(counts[k] >= cfg.theta1);
        CHECK(counts[k] <= cfg.theta2);
    }
    // upsampled copies carry injected events and fresh ids
    int dup = 0;
    for (const auto& s : r.data)
        if (s.vehicle_id.find("+up") != std::string::npos) {
            ++dup;
            CHECK(s.events.size() >= 8);
        }
    CHECK(dup >= 50);
}

TEST_CASE("resampling with nothing surviving throws") {
    std::vector<EventSequence> data;
    EventSequence s;
    s.vehicle_id = "x";
    for (int j = 0; j < 5; ++j) s.events.push_back({10, j * 1.0, 0.0, false});
    s.ep_label_ids = {0};
    data.push_back(s);
    ResampleConfig cfg;
    cfg.min_count = 5;
    CHECK_THROWS_AS(resample_classes(data, cfg, 1, 200), DataError);
}
