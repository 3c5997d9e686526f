// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <array>

#include "pipefill/kfac/kfac.hpp"
#include "pipefill/perfmodel.hpp"
#include "pipefill/schedule.hpp"

using namespace pipefill;

namespace {

PipelineConfig make_config(Method method, int depth, int n_micro) {
    PipelineConfig c;
    c.method = method;
    c.stages = depth;
    c.micro_batches = n_micro;
    c.replicas = method == Method::Chimera ? 2 : 1;
    return c;
}

CostTable unit_costs() {
    CostTable t;
    t.t_f = 1.0;
    t.t_b = 1.0;
    return t;
}

const WorkItem* find_item(const StaticSchedule& s, int device, WorkKind kind, int stage,
                          int micro, int step = 0) {
    for (const auto& item : s.timelines[static_cast<std::size_t>(device)])
        if (item.kind == kind && item.stage == stage && item.micro_batch == micro &&
            item.step == step)
            return &item;
    return nullptr;
}

}  // namespace

TEST_CASE("gpipe D=2 N=2 unit costs reproduces the hand simulation") {
    const auto schedule = build_schedule(make_config(Method::GPipe, 2, 2), unit_costs());
    CHECK(schedule.makespan() == doctest::Approx(6.0).epsilon(1e-12));

    const WorkItem* f00 = find_item(schedule, 0, WorkKind::Forward, 0, 0);
    const WorkItem* f01 = find_item(schedule, 0, WorkKind::Forward, 0, 1);
    const WorkItem* b00 = find_item(schedule, 0, WorkKind::Backward, 0, 0);
    const WorkItem* b01 = find_item(schedule, 0, WorkKind::Backward, 0, 1);
    REQUIRE(f00 != nullptr);
    REQUIRE(f01 != nullptr);
    REQUIRE(b00 != nullptr);
    REQUIRE(b01 != nullptr);
    CHECK(f00->start == 0.0);
    CHECK(f01->start == 1.0);
    CHECK(b00->start == 4.0);
    CHECK(b01->start == 5.0);

    const auto bubbles = extract_bubbles(schedule);
    REQUIRE(bubbles.idle[0].size() == 1);
    CHECK(bubbles.idle[0][0] == Interval{2.0, 4.0});
    REQUIRE(bubbles.idle[1].size() == 2);
    CHECK(bubbles.idle[1][0] == Interval{0.0, 1.0});
    CHECK(bubbles.idle[1][1] == Interval{5.0, 6.0});
}

TEST_CASE("single device single micro-batch has no idle") {
    const auto schedule = build_schedule(make_config(Method::GPipe, 1, 1), unit_costs());
    CHECK(schedule.makespan() == doctest::Approx(2.0));
    const auto bubbles = extract_bubbles(schedule);
    CHECK(bubbles.idle[0].empty());
    CHECK(schedule_metrics(schedule).utilization == doctest::Approx(1.0));
}

TEST_CASE("chimera D=4 N=4 unit costs hits the bidirectional critical path") {
    const auto schedule = build_schedule(make_config(Method::Chimera, 4, 4), unit_costs());
    CHECK(schedule.makespan() == doctest::Approx(10.0).epsilon(1e-12));
    CHECK(schedule_metrics(schedule).utilization == doctest::Approx(0.8).epsilon(1e-12));

    // down micro-batches 0,1 flow devices 0->3; up micro-batches 2,3 flow
    // 3->0; the middle devices interleave the two directions slot by slot
    struct Slot {
        WorkKind kind;
        int stage, micro;
        double start;
    };
    const std::vector<std::vector<Slot>> expect = {
        {{WorkKind::Forward, 0, 0, 0}, {WorkKind::Forward, 0, 1, 1},
         {WorkKind::Forward, 3, 2, 3}, {WorkKind::Backward, 3, 2, 4},
         {WorkKind::Forward, 3, 3, 5}, {WorkKind::Backward, 3, 3, 6},
         {WorkKind::Backward, 0, 0, 7}, {WorkKind::Backward, 0, 1, 9}},
        {{WorkKind::Forward, 1, 0, 1}, {WorkKind::Forward, 2, 2, 2},
         {WorkKind::Forward, 1, 1, 3}, {WorkKind::Forward, 2, 3, 4},
         {WorkKind::Backward, 2, 2, 5}, {WorkKind::Backward, 1, 0, 6},
         {WorkKind::Backward, 2, 3, 7}, {WorkKind::Backward, 1, 1, 8}},
        {{WorkKind::Forward, 2, 0, 2}, {WorkKind::Forward, 1, 2, 1},
         {WorkKind::Forward, 2, 1, 4}, {WorkKind::Forward, 1, 3, 3},
         {WorkKind::Backward, 2, 0, 5}, {WorkKind::Backward, 1, 2, 6},
         {WorkKind::Backward, 2, 1, 7}, {WorkKind::Backward, 1, 3, 8}},
        {{WorkKind::Forward, 3, 0, 3}, {WorkKind::Forward, 0, 2, 0},
         {WorkKind::Forward, 3, 1, 5}, {WorkKind::Forward, 0, 3, 1},
         {WorkKind::Backward, 3, 0, 4}, {WorkKind::Backward, 0, 2, 7},
         {WorkKind::Backward, 3, 1, 6}, {WorkKind::Backward, 0, 3, 9}},
    };
    for (int d = 0; d < 4; ++d) {
        for (const auto& slot : expect[static_cast<std::size_t>(d)]) {
            const WorkItem* item = find_item(schedule, d, slot.kind, slot.stage, slot.micro);
            REQUIRE_MESSAGE(item != nullptr, "device " << d << " stage " << slot.stage
                                                       << " micro " << slot.micro);
            CHECK_MESSAGE(item->start == doctest::Approx(slot.start),
                          "device " << d << " stage " << slot.stage << " micro "
                                    << slot.micro);
        }
    }
}

TEST_CASE("chimera D=2 N=2 has no bubbles at all") {
    const auto schedule = build_schedule(make_config(Method::Chimera, 2, 2), unit_costs());
    CHECK(schedule.makespan() == doctest::Approx(4.0));
    const auto bubbles = extract_bubbles(schedule);
    for (const auto& idle : bubbles.idle) CHECK(idle.empty());
    CHECK(schedule_metrics(schedule).utilization == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("simulated makespan equals the critical-path formula") {
    for (const Method method : {Method::GPipe, Method::OneF1B, Method::Chimera}) {
        for (const int depth : {2, 4, 8}) {
            for (const double unit : {1.0, 0.37}) {
                CostTable costs;
                costs.t_f = unit;
                costs.t_b = unit;
                const auto config = make_config(method, depth, depth);
                const auto schedule = build_schedule(config, costs, 1);
                const auto counts = critical_path_counts(method, depth, depth);
                REQUIRE(counts.has_value());
                const auto [t_pipe, t_bubble] =
                    pipe_time_and_bubble(*counts, costs, depth);
                CHECK(schedule.makespan() == doctest::Approx(t_pipe).epsilon(1e-12));

                // per-device idle equals the formula bubble
                const auto bubbles = extract_bubbles(schedule);
                for (const double idle : bubbles.total_idle)
                    CHECK(idle == doctest::Approx(t_bubble).epsilon(1e-9));
            }
        }
    }
}

TEST_CASE("gpipe and 1f1b have equal makespan at N_micro = D") {
    for (const int depth : {2, 3, 4, 8}) {
        CostTable costs;
        costs.t_f = 1.25;
        costs.t_b = 2.5;
        const auto gpipe = build_schedule(make_config(Method::GPipe, depth, depth), costs);
        const auto one_f1b = build_schedule(make_config(Method::OneF1B, depth, depth), costs);
        CHECK(gpipe.makespan() == doctest::Approx(one_f1b.makespan()).epsilon(1e-12));
    }
}

TEST_CASE("general-N gpipe and 1f1b match C = N + D - 1") {
    for (const Method method : {Method::GPipe, Method::OneF1B}) {
        for (const int depth : {2, 4}) {
            for (const int n : {1, 2, 4, 7, 12}) {
                const auto schedule =
                    build_schedule(make_config(method, depth, n), unit_costs());
                CHECK(schedule.makespan() ==
                      doctest::Approx(2.0 * (n + depth - 1)).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("generated schedules validate cleanly") {
    for (const Method method : {Method::GPipe, Method::OneF1B, Method::Chimera}) {
        for (const int depth : {2, 4}) {
            for (const int n : {2, 4, 8}) {
                CostTable costs;
                costs.t_f = 0.8;
                costs.t_b = 1.7;
                auto config = make_config(method, depth, n);
                for (const bool recompute : {false, true}) {
                    config.recompute = recompute;
                    const auto schedule = build_schedule(config, costs, 2);
                    const auto violations = validate_schedule(schedule, config);
                    CHECK_MESSAGE(violations.empty(),
                                  to_string(method) << " D=" << depth << " N=" << n
                                                    << (recompute ? " recompute" : ""));
                }
            }
        }
    }
}

TEST_CASE("validator flags dependency violations") {
    const auto config = make_config(Method::GPipe, 2, 2);
    auto schedule = build_schedule(config, unit_costs());

    SUBCASE("forward before upstream forward") {
        for (auto& item : schedule.timelines[1])
            if (item.kind == WorkKind::Forward && item.micro_batch == 0) item.start = 0.0;
        const auto violations = validate_schedule(schedule, config);
        bool found = false;
        for (const auto& v : violations)
            if (v.rule.find("upstream forward") != std::string::npos) found = true;
        CHECK(found);
    }
    SUBCASE("overlap on one device") {
        for (auto& item : schedule.timelines[0])
            if (item.kind == WorkKind::Forward && item.micro_batch == 1) item.start = 0.5;
        const auto violations = validate_schedule(schedule, config);
        bool found = false;
        for (const auto& v : violations)
            if (v.rule.find("overlap") != std::string::npos) found = true;
        CHECK(found);
    }
    SUBCASE("missing backward") {
        auto& timeline = schedule.timelines[0];
        timeline.erase(std::remove_if(timeline.begin(), timeline.end(),
                                      [](const WorkItem& w) {
                                          return w.kind == WorkKind::Backward &&
                                                 w.micro_batch == 1;
                                      }),
                       timeline.end());
        CHECK(!validate_schedule(schedule, config).empty());
    }
}

TEST_CASE("recompute inserts one extra forward-length block per backward") {
    auto config = make_config(Method::GPipe, 2, 2);
    config.recompute = true;
    CostTable costs;
    costs.t_f = 1.0;
    costs.t_b = 2.0;
    const auto schedule = build_schedule(config, costs);
    int recomputes = 0;
    for (const auto& timeline : schedule.timelines)
        for (const auto& item : timeline)
            if (item.kind == WorkKind::Recompute) {
                ++recomputes;
                CHECK(item.duration == doctest::Approx(costs.t_f));
            }
    CHECK(recomputes == 4);
    // makespan follows the effective backward time T_f + T_b
    const CostTable effective = apply_recomputation(costs);
    const auto counts = critical_path_counts(Method::GPipe, 2, 2);
    REQUIRE(counts.has_value());
    const auto [t_pipe, t_bubble] = pipe_time_and_bubble(*counts, effective, 2);
    CHECK(schedule.makespan() == doctest::Approx(t_pipe));
    (void)t_bubble;
}

TEST_CASE("multi-step unrolling repeats the pattern with a flush between steps") {
    const auto config = make_config(Method::OneF1B, 4, 4);
    CostTable costs;
    costs.t_f = 1.0;
    costs.t_b = 2.0;
    const auto schedule = build_schedule(config, costs, 3);
    CHECK(schedule.horizon_steps == 3);
    CHECK(validate_schedule(schedule, config).empty());
    const auto one_step = build_schedule(config, costs, 1);
    CHECK(schedule.period == doctest::Approx(one_step.makespan()));
    // step k items are the step-0 items shifted by k * period
    for (std::size_t d = 0; d < schedule.timelines.size(); ++d) {
        std::vector<const WorkItem*> step0, step2;
        for (const auto& item : schedule.timelines[d]) {
            if (item.step == 0) step0.push_back(&item);
            if (item.step == 2) step2.push_back(&item);
        }
        REQUIRE(step0.size() == step2.size());
        for (std::size_t i = 0; i < step0.size(); ++i)
            CHECK(step2[i]->start ==
                  doctest::Approx(step0[i]->start + 2 * schedule.period).epsilon(1e-12));
    }
}

TEST_CASE("schedules are deterministic") {
    for (const Method method : {Method::GPipe, Method::OneF1B, Method::Chimera}) {
        CostTable costs;
        costs.t_f = 0.93;
        costs.t_b = 2.21;
        const auto config = make_config(method, 4, 8);
        const auto a = build_schedule(config, costs, 2);
        const auto b = build_schedule(config, costs, 2);
        CHECK(a == b);
    }
}

TEST_CASE("bubble complement accounts for every instant") {
    kfac::SplitMix64 rng(31337);
    for (int trial = 0; trial < 30; ++trial) {
        const Method method =
            std::array{Method::GPipe, Method::OneF1B, Method::Chimera}[rng.next() % 3];
        const int depth = method == Method::Chimera ? 2 * (1 + static_cast<int>(rng.next() % 3))
                                                    : 1 + static_cast<int>(rng.next() % 6);
        const int n = method == Method::Chimera ? 2 * (1 + static_cast<int>(rng.next() % 4))
                                                : 1 + static_cast<int>(rng.next() % 8);
        CostTable costs;
        costs.t_f = 0.1 + rng.uniform() * 3;
        costs.t_b = 0.1 + rng.uniform() * 3;
        const auto config = make_config(method, depth, n);
        const auto schedule = build_schedule(config, costs);
        const auto metrics = schedule_metrics(schedule);
        const auto bubbles = extract_bubbles(schedule);
        for (std::size_t d = 0; d < schedule.timelines.size(); ++d) {
            CHECK(metrics.per_device_busy[d] + bubbles.total_idle[d] ==
                  doctest::Approx(metrics.makespan).epsilon(1e-9));
            for (std::size_t i = 1; i < bubbles.idle[d].size(); ++i)
                CHECK(bubbles.idle[d][i].begin > bubbles.idle[d][i - 1].end);
        }
    }
}

TEST_CASE("replica groups get identical timelines") {
    auto config = make_config(Method::GPipe, 3, 4);
    config.replicas = 2;
    const auto schedule = build_schedule(config, unit_costs());
    REQUIRE(schedule.device_count() == 6);
    for (int d = 0; d < 3; ++d) {
        const auto& a = schedule.timelines[static_cast<std::size_t>(d)];
        const auto& b = schedule.timelines[static_cast<std::size_t>(d + 3)];
        REQUIRE(a.size() == b.size());
        for (std::size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i].start == b[i].start);
            CHECK(a[i].kind == b[i].kind);
            CHECK(a[i].stage == b[i].stage);
        }
    }
}

TEST_CASE("p2p latency delays cross-device handoffs only") {
    CostTable costs = unit_costs();
    costs.p2p_latency = 0.5;
    const auto schedule = build_schedule(make_config(Method::GPipe, 2, 1), costs);
    // F(s0)[0,1) -> hop -> F(s1)[1.5,2.5) -> local turnaround -> B(s1)[2.5,3.5)
    // -> hop -> B(s0)[4,5)
    CHECK(schedule.makespan() == doctest::Approx(5.0));
    const WorkItem* f1 = find_item(schedule, 1, WorkKind::Forward, 1, 0);
    const WorkItem* b1 = find_item(schedule, 1, WorkKind::Backward, 1, 0);
    REQUIRE(f1 != nullptr);
    REQUIRE(b1 != nullptr);
    CHECK(f1->start == doctest::Approx(1.5));
    CHECK(b1->start == doctest::Approx(2.5));
    CHECK(validate_schedule(schedule, make_config(Method::GPipe, 2, 1)).empty());
}

TEST_CASE("chimera rejects invalid configs") {
    CHECK_THROWS_AS(build_schedule(make_config(Method::Chimera, 3, 4), unit_costs()),
                    std::invalid_argument);
    CHECK_THROWS_AS(build_schedule(make_config(Method::Chimera, 4, 3), unit_costs()),
                    std::invalid_argument);
}
