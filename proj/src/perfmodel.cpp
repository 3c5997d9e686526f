// SPDX-License-Identifier: Apache-2.0

#include "pipefill/perfmodel.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>

#include "pipefill/schedule.hpp"

namespace pipefill {

std::optional<CriticalPathCounts> critical_path_counts(Method method, int depth,
                                                       int n_micro) {
    if (depth < 1 || n_micro < 1) throw std::invalid_argument("depth and N_micro must be >= 1");
    if (method == Method::Chimera) {
        if (n_micro != depth) return std::nullopt;  // simulate instead
        return CriticalPathCounts{depth, 2 * depth - 2};
    }
    const int c = n_micro + depth - 1;
    return CriticalPathCounts{c, c};
}

std::pair<double, double> pipe_time_and_bubble(const CriticalPathCounts& counts,
                                               const CostTable& costs, int n_micro) {
    const double t_pipe = counts.c_f * costs.t_f + counts.c_b * costs.t_b;
    const double t_bubble = t_pipe - n_micro * (costs.t_f + costs.t_b);
    if (t_bubble < -1e-9)
        throw std::invalid_argument("negative bubble: counts inconsistent with N_micro");
    return {t_pipe, std::max(0.0, t_bubble)};
}

std::int64_t pipe_memory(const PipelineConfig& config, const CostTable& costs) {
    const std::int64_t stages_per_device =
        static_cast<std::int64_t>(config.stages) * config.replicas / config.effective_devices();
    const std::int64_t act_multiplier = config.recompute ? 1 : config.micro_batches;
    return 2 * stages_per_device * costs.m_theta + act_multiplier * costs.m_act +
           costs.m_err_peak;
}

KfacOverheads kfac_overheads(const PipelineConfig& config, const CostTable& costs) {
    KfacOverheads out;
    out.bubbled_work = config.micro_batches * costs.t_curv + costs.t_inv;
    out.t_kfac_plus = out.bubbled_work + costs.t_prec;
    out.m_kfac_plus =
        costs.m_curv + costs.m_inv() + std::int64_t{config.micro_batches} * costs.m_err_save;
    return out;
}

RefreshRatio refresh_ratio(double bubbled_work, double t_bubble) {
    if (bubbled_work <= 0.0) return {0.0, 1};
    if (t_bubble <= 0.0)
        throw std::domain_error("no bubble time to hide curvature/inversion work in");
    RefreshRatio out;
    out.ratio = bubbled_work / t_bubble;
    out.refresh_period = std::max(1, static_cast<int>(std::ceil(out.ratio - 1e-12)));
    return out;
}

double throughput(const PipelineConfig& config, double t_pipe, const CostTable& costs,
                  bool with_kfac) {
    const double step_ms = t_pipe + (with_kfac ? costs.t_prec : 0.0);
    if (step_ms <= 0.0) return 0.0;
    const double sequences =
        static_cast<double>(config.replicas) * config.micro_batches * config.micro_batch_size;
    return sequences / step_ms * 1000.0;
}

double speedup_vs_skip(double t_pipe, double t_prec, double bubbled_work,
                       double t_bubble) {
    // The skip baseline runs curvature+inversion inline but only once every
    // (curv+inv)/bubble iterations, the frequency the filled schedule
    // sustains. Amortized over that interval the inline cost per step is
    // exactly the bubble time.
    const double pipefilled = t_pipe + t_prec;
    if (pipefilled <= 0.0 || bubbled_work <= 0.0) return 1.0;
    const double inline_per_step = t_bubble > 0.0 ? t_bubble : bubbled_work;
    return (pipefilled + inline_per_step) / pipefilled;
}

CostTable analytic_costs(const ArchSpec& arch, int micro_batch_size,
                         const DeviceSpec& device, int layers_per_stage) {
    if (arch.d_model <= 0 || arch.d_ff <= 0 || arch.seq_len <= 0)
        throw std::invalid_argument("arch widths must be positive");
    if (device.flops <= 0.0) throw std::invalid_argument("device flops must be positive");
    if (layers_per_stage < 1) throw std::invalid_argument("layers per stage must be >= 1");

    const double b = micro_batch_size;
    const double s = arch.seq_len;
    const double dm = arch.d_model;
    const double dff = arch.d_ff;

    // Per block: attention + feed-forward matmuls, plus the S^2 attention
    // term; backward costs twice the forward.
    const double fwd_flops = 2.0 * b * s * (8.0 * dm * dm + 2.0 * dm * dff) +
                             4.0 * b * s * s * dm;
    // One curvature factor of width d costs B*S*d^2; each block contributes
    // a d_model-sized and a d_ff-sized factor.
    const double curv_flops = b * s * (dm * dm + dff * dff);
    const double inv_flops = (2.0 / 3.0) * (dm * dm * dm + dff * dff * dff);
    const double prec_flops = 2.0 * (dm * dm * dff + dm * dff * dff);

    const double layers = layers_per_stage;
    CostTable costs;
    costs.t_f = layers * fwd_flops / device.flops;
    costs.t_b = 2.0 * costs.t_f;
    costs.t_curv = layers * curv_flops / device.flops;
    costs.t_inv = layers * inv_flops / device.flops;
    costs.t_prec = layers * prec_flops / device.flops;

    // Coarse fp32 memory terms per stage.
    const double bytes = 4.0;
    costs.m_theta = static_cast<std::int64_t>(layers * bytes * (4.0 * dm * dm + 2.0 * dm * dff));
    costs.m_act = static_cast<std::int64_t>(layers * bytes * b * s * (4.0 * dm + dff));
    costs.m_err_peak = static_cast<std::int64_t>(bytes * b * s * dff);
    costs.m_err_save = static_cast<std::int64_t>(layers * bytes * b * s * (dm + dff));
    costs.m_curv = static_cast<std::int64_t>(layers * bytes * (dm * dm + dff * dff));
    return costs;
}

CostTable apply_recomputation(const CostTable& costs) {
    CostTable out = costs;
    out.t_b = costs.t_f + costs.t_b;
    return out;
}

double project_training_time_min(double steps, double step_time_ms) {
    if (steps < 0.0 || step_time_ms < 0.0)
        throw std::invalid_argument("steps and step time must be >= 0");
    return steps * step_time_ms / 60000.0;
}

std::pair<double, double> simulated_pipe_times(const PipelineConfig& config,
                                               const CostTable& costs) {
    const StaticSchedule schedule = build_schedule(config, costs, 1);
    const double t_pipe = schedule.period;
    const double per_micro = costs.t_f + costs.t_b + (config.recompute ? costs.t_f : 0.0);
    const double t_bubble = t_pipe - config.micro_batches * per_micro;
    return {t_pipe, std::max(0.0, t_bubble)};
}

namespace {

PerfReport assemble_report(const PipelineConfig& config, const CostTable& costs, int c_f,
                           int c_b, double t_pipe, double t_bubble) {
    PerfReport report;
    report.c_f = c_f;
    report.c_b = c_b;
    report.t_pipe = t_pipe;
    report.t_bubble = t_bubble;
    report.m_pipe = pipe_memory(config, costs);

    const KfacOverheads overheads = kfac_overheads(config, costs);
    report.t_kfac_plus = overheads.t_kfac_plus;
    report.m_kfac_plus = overheads.m_kfac_plus;

    const RefreshRatio refresh = refresh_ratio(overheads.bubbled_work, t_bubble);
    report.ratio = refresh.ratio;
    report.refresh_period = refresh.refresh_period;
    report.throughput = throughput(config, t_pipe, costs, /*with_kfac=*/true);
    report.speedup_vs_skip =
        speedup_vs_skip(t_pipe, costs.t_prec, overheads.bubbled_work, t_bubble);

    // Steady-state device utilization with the bubbles filled: base work plus
    // preconditioning plus the per-step share of the hidden K-FAC work.
    const double step = t_pipe + costs.t_prec;
    if (step > 0.0) {
        const double busy = t_pipe - t_bubble + costs.t_prec +
                            overheads.bubbled_work / refresh.refresh_period;
        report.utilization = std::clamp(busy / step, 0.0, 1.0);
    } else {
        report.utilization = 1.0;
    }
    return report;
}

void require_valid(const PipelineConfig& config) {
    const auto violations = validate_config(config);
    if (violations.empty()) return;
    std::ostringstream msg;
    msg << "invalid config:";
    for (const auto& v : violations) msg << " [" << v.field << ": " << v.rule << "]";
    throw std::invalid_argument(msg.str());
}

}  // namespace

PerfReport make_report(const PipelineConfig& config, const CostTable& costs) {
    require_valid(config);
    const CostTable timing = config.recompute ? apply_recomputation(costs) : costs;
    const auto counts =
        critical_path_counts(config.method, config.stages, config.micro_batches);
    if (counts) {
        const auto [t_pipe, t_bubble] =
            pipe_time_and_bubble(*counts, timing, config.micro_batches);
        return assemble_report(config, costs, counts->c_f, counts->c_b, t_pipe, t_bubble);
    }
    const auto [t_pipe, t_bubble] = simulated_pipe_times(config, costs);
    return assemble_report(config, costs, -1, -1, t_pipe, t_bubble);
}

std::vector<SweepRow> run_sweep(const SweepGrid& grid) {
    std::vector<SweepRow> rows;
    // The schedule shape only depends on (method, D, N, recompute) and the
    // t_b:t_f ratio, so simulated points are cached in normalized time.
    std::map<std::tuple<Method, int, int, bool, long long>, std::pair<double, double>> cache;

    for (Method method : grid.methods)
        for (int depth : grid.depths)
            for (int factor : grid.micro_factors)
                for (int b_micro : grid.micro_batch_sizes)
                    for (bool recompute : grid.recompute) {
                        SweepRow row;
                        row.seq_len = grid.arch.seq_len;
                        PipelineConfig& config = row.config;
                        config.method = method;
                        config.stages = depth;
                        config.micro_batches = factor * depth;
                        config.micro_batch_size = b_micro;
                        config.replicas = method == Method::Chimera ? 2 : 1;
                        config.layers_per_stage = grid.layers_per_stage;
                        config.seq_len = grid.arch.seq_len;
                        config.recompute = recompute;
                        try {
                            require_valid(config);
                            const CostTable costs = analytic_costs(
                                grid.arch, b_micro, grid.device, grid.layers_per_stage);
                            const bool closed_form =
                                critical_path_counts(method, depth, config.micro_batches)
                                    .has_value();
                            if (!closed_form && costs.t_f > 0.0) {
                                const auto key = std::tuple(
                                    method, depth, config.micro_batches, recompute,
                                    std::llround(costs.t_b / costs.t_f * 1e9));
                                auto it = cache.find(key);
                                if (it == cache.end()) {
                                    CostTable unit;
                                    unit.t_f = 1.0;
                                    unit.t_b = costs.t_b / costs.t_f;
                                    it = cache.emplace(key,
                                                       simulated_pipe_times(config, unit))
                                             .first;
                                }
                                row.report = assemble_report(
                                    config, costs, -1, -1, it->second.first * costs.t_f,
                                    it->second.second * costs.t_f);
                            } else {
                                row.report = make_report(config, costs);
                            }
                        } catch (const std::exception& e) {
                            row.error = e.what();
                        }
                        rows.push_back(std::move(row));
                    }
    return rows;
}

std::string sweep_to_csv(const std::vector<SweepRow>& rows) {
    std::ostringstream out;
    out << "method,D,N_micro,B_micro,S,recompute,T_pipe,T_bubble,M_pipe,T_kfac_plus,"
           "M_kfac_plus,utilization,throughput,ratio,refresh_period,speedup_vs_skip\n";
    out.precision(10);
    for (const auto& row : rows) {
        out << to_string(row.config.method) << ',' << row.config.stages << ','
            << row.config.micro_batches << ',' << row.config.micro_batch_size << ','
            << row.seq_len << ',' << (row.config.recompute ? 1 : 0) << ',';
        if (!row.error.empty()) {
            out << ",,,,,,,,,error: " << row.error << '\n';
            continue;
        }
        const PerfReport& r = row.report;
        out << r.t_pipe << ',' << r.t_bubble << ',' << r.m_pipe << ',' << r.t_kfac_plus
            << ',' << r.m_kfac_plus << ',' << r.utilization << ',' << r.throughput << ','
            << r.ratio << ',' << r.refresh_period << ',' << r.speedup_vs_skip << '\n';
    }
    return out.str();
}

}  // namespace pipefill
