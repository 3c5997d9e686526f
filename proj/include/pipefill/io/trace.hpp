// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>

#include "pipefill/core.hpp"

namespace pipefill::io {

/// Chrome trace event document ({"traceEvents": [...]}) for a schedule.
/// Timestamps and durations are in integer microseconds (ms * 1000, rounded
/// to nearest); byte-deterministic for identical inputs. `devices_per_group`
/// groups device ids into trace pids (0 = everything in pid 0).
std::string trace_to_json(const StaticSchedule& schedule, int devices_per_group = 0);

void emit_trace(const StaticSchedule& schedule, const std::string& path,
                int devices_per_group = 0);

/// Rebuild per-device timelines from a trace document (times come back in
/// ms). Period and horizon metadata are not part of the trace format.
StaticSchedule parse_trace(const std::string& json);

}  // namespace pipefill::io
