// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "pipefill/core.hpp"

namespace pipefill {

struct Interval {
    double begin = 0.0;
    double end = 0.0;
    double length() const { return end - begin; }
    bool operator==(const Interval&) const = default;
};

/// Idle intervals per device within [0, makespan], disjoint and sorted.
struct BubbleSet {
    std::vector<std::vector<Interval>> idle;  // per device
    std::vector<double> total_idle;           // per device
};

/// Build the synchronous pipeline schedule (forward/backward work only,
/// plus recompute items when config.recompute) for `horizon_steps` unrolled
/// steps. Forwards and backwards are placed as early as the stage
/// dependencies, per-device ordering discipline, and the end-of-step flush
/// allow. Throws std::invalid_argument when the config is invalid.
StaticSchedule build_schedule(const PipelineConfig& config, const CostTable& costs,
                              int horizon_steps = 1);

/// Exact complement of the work intervals per device within [0, makespan];
/// adjacent idle intervals are merged.
BubbleSet extract_bubbles(const StaticSchedule& schedule);

struct ScheduleMetrics {
    double makespan = 0.0;
    std::vector<double> per_device_busy;
    double utilization = 0.0;  // sum(busy) / (makespan * devices)
};

ScheduleMetrics schedule_metrics(const StaticSchedule& schedule);

/// Check per-device non-overlap, forward/backward stage-dependency
/// ordering, the flush between steps, and that every (stage, micro-batch)
/// pair appears exactly once per kind per step. Items other than
/// forward/backward/recompute only participate in the overlap check.
std::vector<Violation> validate_schedule(const StaticSchedule& schedule,
                                         const PipelineConfig& config);

}  // namespace pipefill
