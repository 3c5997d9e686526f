// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "pipefill/core.hpp"

namespace pipefill {

/// Transformer block widths used by the analytic cost generator.
struct ArchSpec {
    int d_model = 768;
    int d_ff = 3072;
    int heads = 12;
    int seq_len = 128;
    bool operator==(const ArchSpec&) const = default;
};

struct DeviceSpec {
    double flops = 1e10;          // FLOP per ms
    double mem_bandwidth = 0.0;   // bytes per ms, reserved
    bool operator==(const DeviceSpec&) const = default;
};

struct CriticalPathCounts {
    int c_f = 0;
    int c_b = 0;
};

/// Closed-form critical-path counts. GPipe and 1F1B generalize to
/// C_f = C_b = N_micro + D - 1 (2D-1 at N_micro = D); Chimera has a closed
/// form only at N_micro = D (C_f = D, C_b = 2D-2). Returns nullopt when the
/// caller has to fall back to schedule simulation.
std::optional<CriticalPathCounts> critical_path_counts(Method method, int depth,
                                                       int n_micro);

/// T_pipe = C_f*T_f + C_b*T_b and T_bubble = T_pipe - N_micro*(T_f + T_b).
/// Throws std::invalid_argument when the bubble comes out negative, i.e. the
/// counts are inconsistent with N_micro.
std::pair<double, double> pipe_time_and_bubble(const CriticalPathCounts& counts,
                                               const CostTable& costs, int n_micro);

/// Worst-case per-device memory: 2*(D*W/devices)*M_theta + N*M_act +
/// M_err_peak; recomputation keeps only one micro-batch of activations live.
std::int64_t pipe_memory(const PipelineConfig& config, const CostTable& costs);

struct KfacOverheads {
    double t_kfac_plus = 0.0;
    std::int64_t m_kfac_plus = 0;
    double bubbled_work = 0.0;  // N_micro*T_curv + T_inv, the part hidden in bubbles
};

KfacOverheads kfac_overheads(const PipelineConfig& config, const CostTable& costs);

struct RefreshRatio {
    double ratio = 0.0;
    int refresh_period = 1;  // max(1, ceil(ratio))
};

/// Ratio of bubbled K-FAC work to bubble time; the ceiling estimates how
/// many pipeline steps one curvature+inversion refresh needs. Throws
/// std::domain_error when there is work but no bubble.
RefreshRatio refresh_ratio(double bubbled_work, double t_bubble);

/// Modeled sequences/s: W*N_micro*B_micro per step over T_pipe
/// (+ T_prec when with_kfac).
double throughput(const PipelineConfig& config, double t_pipe, const CostTable& costs,
                  bool with_kfac);

/// Step-time ratio of K-FAC+skip over the bubble-filled schedule. The skip
/// baseline runs curvature+inversion inline once every (curv+inv)/bubble
/// iterations, i.e. at the frequency the filled schedule sustains, so its
/// amortized inline cost per step equals the bubble time.
double speedup_vs_skip(double t_pipe, double t_prec, double bubbled_work,
                       double t_bubble);

/// Coarse FLOP-count cost model per transformer block, summed over
/// layers_per_stage blocks and divided by the device rate. Forward and
/// curvature scale linearly in B_micro; inversion does not depend on it.
CostTable analytic_costs(const ArchSpec& arch, int micro_batch_size,
                         const DeviceSpec& device, int layers_per_stage);

/// Activation recomputation: one extra forward before each backward, so the
/// effective backward time becomes T_f + T_b. The memory effect lives in
/// pipe_memory.
CostTable apply_recomputation(const CostTable& costs);

/// steps * step_time, reported in minutes (step_time in ms).
double project_training_time_min(double steps, double step_time_ms);

/// Simulated (T_pipe, T_bubble) from the schedule generator, for the cases
/// without a closed form.
std::pair<double, double> simulated_pipe_times(const PipelineConfig& config,
                                               const CostTable& costs);

/// Assemble the full report for one configuration, using closed forms when
/// available and schedule simulation otherwise.
PerfReport make_report(const PipelineConfig& config, const CostTable& costs);

struct SweepGrid {
    std::vector<Method> methods;
    std::vector<int> depths;
    std::vector<int> micro_factors{1};      // N_micro = factor * D
    std::vector<int> micro_batch_sizes{32};
    std::vector<bool> recompute{false};
    ArchSpec arch;
    DeviceSpec device;
    int layers_per_stage = 1;
};

struct SweepRow {
    PipelineConfig config;
    int seq_len = 0;
    PerfReport report;
    std::string error;  // empty on success
};

/// One row per grid point, in deterministic grid order; per-point failures
/// are recorded in the row and the sweep continues.
std::vector<SweepRow> run_sweep(const SweepGrid& grid);

/// Fixed-header CSV serialization of sweep rows.
std::string sweep_to_csv(const std::vector<SweepRow>& rows);

}  // namespace pipefill
