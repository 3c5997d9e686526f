// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace pipefill {

enum class Method { GPipe, OneF1B, Chimera };

enum class Factor { A, B };

enum class WorkKind {
    Forward,
    Backward,
    Recompute,
    Curvature,
    Inversion,
    Precondition,
    SyncGrad,
    SyncCurvature,
};

std::string to_string(Method m);
std::string to_string(Factor f);
std::string to_string(WorkKind k);
std::optional<Method> parse_method(const std::string& name);

/// Shape of one pipeline-parallel training experiment. Times and memories
/// live in CostTable; this only carries the topology.
struct PipelineConfig {
    Method method = Method::GPipe;
    int stages = 1;            // pipeline depth D
    int micro_batches = 1;     // N_micro, per device per iteration
    int micro_batch_size = 1;  // B_micro, sequences
    int replicas = 1;          // W, model replicas per stage
    int devices = 0;           // 0 = derive from stages/replicas/method
    int layers_per_stage = 1;
    int seq_len = 128;
    bool recompute = false;

    // Chimera places a down-pipeline stage and an up-pipeline stage on each
    // device; the other methods place one stage per device.
    int stages_per_device() const { return method == Method::Chimera ? 2 : 1; }
    int effective_devices() const {
        if (devices > 0) return devices;
        return stages * replicas / stages_per_device();
    }
    // Replica groups sharing a step: one group of D devices covers
    // stages_per_device() replicas of every stage.
    int groups() const { return replicas / stages_per_device(); }
    std::int64_t mini_batch_size() const {
        return std::int64_t{micro_batch_size} * micro_batches * replicas;
    }

    bool operator==(const PipelineConfig&) const = default;
};

/// Per-work durations (ms) and memory terms (bytes) feeding both the
/// schedule simulator and the closed-form model. t_curv is the duration of
/// one curvature work item (one factor, one layer, one micro-batch); t_inv
/// and t_prec are per-stage aggregates.
struct CostTable {
    double t_f = 0.0;
    double t_b = 0.0;
    double t_curv = 0.0;
    double t_inv = 0.0;
    double t_prec = 0.0;
    std::int64_t m_theta = 0;
    std::int64_t m_act = 0;
    std::int64_t m_err_peak = 0;
    std::int64_t m_err_save = 0;
    std::int64_t m_curv = 0;
    double comm_alpha = 0.0;  // collective latency, ms
    double comm_beta = std::numeric_limits<double>::infinity();  // bytes/ms
    double p2p_latency = 0.0;  // per hop between adjacent stages, ms

    // The curvature and inverse matrices have the same shape, so no
    // separate m_inv is stored.
    std::int64_t m_inv() const { return m_curv; }

    bool operator==(const CostTable&) const = default;
};

struct WorkItem {
    WorkKind kind = WorkKind::Forward;
    int stage = -1;
    std::optional<int> micro_batch;
    std::optional<int> layer;
    std::optional<Factor> factor;
    int device = -1;
    double start = 0.0;
    double duration = 0.0;
    int step = 0;

    double end() const { return start + duration; }
    bool operator==(const WorkItem&) const = default;
};

/// Per-device timelines of placed work over an unrolled horizon. The work
/// pattern of step k repeats every refresh_period steps once warmed up.
struct StaticSchedule {
    std::vector<std::vector<WorkItem>> timelines;  // per device, sorted by start
    double period = 0.0;        // one steady-state step, ms
    int horizon_steps = 1;
    int refresh_period = 1;

    int device_count() const { return static_cast<int>(timelines.size()); }
    double makespan() const;
    bool operator==(const StaticSchedule&) const = default;
};

/// Everything the closed-form model reports for one configuration.
struct PerfReport {
    int c_f = -1;  // -1 when the counts came from simulation, not a closed form
    int c_b = -1;
    double t_pipe = 0.0;
    double t_bubble = 0.0;
    std::int64_t m_pipe = 0;
    double t_kfac_plus = 0.0;
    std::int64_t m_kfac_plus = 0;
    double utilization = 0.0;
    double throughput = 0.0;  // sequences/s
    double ratio = 0.0;       // (curvature+inversion) work / bubble
    int refresh_period = 1;
    double speedup_vs_skip = 1.0;
};

struct Violation {
    std::string field;
    std::string rule;
};

/// Empty result iff every PipelineConfig invariant holds. Violations are
/// data, not failures.
std::vector<Violation> validate_config(const PipelineConfig& config);

}  // namespace pipefill
