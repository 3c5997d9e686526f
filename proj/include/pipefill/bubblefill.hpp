// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <stdexcept>
#include <vector>

#include "pipefill/core.hpp"
#include "pipefill/schedule.hpp"

namespace pipefill {

/// One pending curvature / curvature-sync / inversion work unit, with the
/// queue indices that must complete before it becomes ready.
struct KfacWork {
    WorkKind kind = WorkKind::Curvature;
    int stage = 0;
    int layer = 0;
    Factor factor = Factor::A;
    std::optional<int> micro_batch;  // curvature only
    int device = 0;
    double duration = 0.0;
    // Curvature readiness anchors to a base forward/backward; the others
    // become ready when their predecessor queue items finish.
    std::optional<WorkKind> base_anchor;  // Forward or Backward
    std::vector<int> preds;
};

struct KfacWorkQueue {
    std::vector<KfacWork> items;
};

struct AssignOptions {
    bool inversion_parallel = false;
    int horizon_cap = 10;  // steps to search before declaring infeasibility
};

struct StalenessEntry {
    int stage = 0;
    int layer = 0;
    int staleness_steps = 0;  // steps a factor inverse stays in use
};

/// Base schedule with the K-FAC work packed into its bubbles, trimmed to one
/// refresh cycle. The pattern repeats every refresh_period steps.
struct FilledSchedule {
    StaticSchedule schedule;  // forwards/backwards, sync, preconditions, K-FAC works
    double base_period = 0.0;
    int refresh_period = 1;
    std::vector<StalenessEntry> staleness;
    // Step-0 preconditions run with inverse matrices from before this cycle.
    int preconditions_using_prior_inverses = 0;
};

class InfeasibleError : public std::runtime_error {
public:
    InfeasibleError(std::string message, std::vector<KfacWork> unplaced_items,
                    double deficit)
        : std::runtime_error(std::move(message)),
          unplaced(std::move(unplaced_items)),
          deficit_ms(deficit) {}
    std::vector<KfacWork> unplaced;
    double deficit_ms = 0.0;
};

/// All curvature, curvature-sync, and inversion works for one refresh cycle:
/// per stage replica, one curvature item per (layer, factor, local
/// micro-batch) of duration T_curv, plus 2*layers inversion items of
/// duration T_inv/layers, plus one sync item per (layer, factor) when W > 1.
KfacWorkQueue enumerate_kfac_works(const PipelineConfig& config, const CostTable& costs);

/// Ring-style collective cost: alpha + bytes/beta, independent of the
/// participant count. The default comm table (alpha 0, beta inf) returns 0.
double model_collective(double bytes, int participants, double alpha, double beta);

/// Greedily pack the queue into the bubbles of `base` unrolled over at most
/// opts.horizon_cap steps. Preconditioning (and gradient sync when W > 1) is
/// appended per stage per step, which stretches the step period by exactly
/// T_prec (plus the sync time). Throws InfeasibleError when the queue does
/// not drain within the horizon.
FilledSchedule assign_works(const StaticSchedule& base, const PipelineConfig& config,
                            const CostTable& costs, const KfacWorkQueue& queue,
                            const AssignOptions& opts = {});

/// Per (stage, layer): how many consecutive steps a factor inverse produced
/// in one refresh cycle keeps being consumed by preconditions.
std::vector<StalenessEntry> staleness_report(const FilledSchedule& filled);

}  // namespace pipefill
