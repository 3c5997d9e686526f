// SPDX-License-Identifier: Apache-2.0

#include "pipefill/bubblefill.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <tuple>

namespace pipefill {
namespace {

constexpr double kTimeEps = 1e-9;

// Devices hosting a replica of `stage`, in deterministic order. Chimera
// groups contribute the down-pipeline host and the up-pipeline host.
std::vector<int> replica_devices(const PipelineConfig& config, int stage) {
    std::vector<int> out;
    const int depth = config.stages;
    for (int g = 0; g < config.groups(); ++g) {
        out.push_back(g * depth + stage);
        if (config.method == Method::Chimera) out.push_back(g * depth + depth - 1 - stage);
    }
    return out;
}

// Micro-batches a device processes at `stage`.
std::vector<int> micros_on(const PipelineConfig& config, int stage, int device) {
    const int n = config.micro_batches;
    std::vector<int> out;
    if (config.method == Method::Chimera) {
        const bool down_host = device % config.stages == stage;
        const int begin = down_host ? 0 : n / 2;
        const int end = down_host ? n / 2 : n;
        for (int m = begin; m < end; ++m) out.push_back(m);
    } else {
        for (int m = 0; m < n; ++m) out.push_back(m);
    }
    return out;
}

int kind_rank(WorkKind k) {
    switch (k) {
        case WorkKind::Curvature: return 0;
        case WorkKind::SyncCurvature: return 1;
        case WorkKind::Inversion: return 2;
        default: return 3;
    }
}

std::tuple<int, int, int, int, int, int> priority_key(const KfacWork& w) {
    return {kind_rank(w.kind), w.layer, w.factor == Factor::A ? 0 : 1,
            w.micro_batch.value_or(-1), w.stage, w.device};
}

struct GapList {
    std::vector<Interval> gaps;  // sorted, disjoint

    // Earliest feasible start for a work of `duration` ready at `ready`.
    std::optional<double> earliest_fit(double ready, double duration, double horizon) const {
        if (duration <= 0.0) {
            return ready <= horizon + kTimeEps ? std::optional<double>(std::max(0.0, ready))
                                               : std::nullopt;
        }
        for (const auto& gap : gaps) {
            const double start = std::max(gap.begin, ready);
            if (start + duration <= gap.end + kTimeEps) return start;
        }
        return std::nullopt;
    }

    void occupy(double start, double duration) {
        if (duration <= 0.0) return;
        for (std::size_t i = 0; i < gaps.size(); ++i) {
            if (start >= gaps[i].begin - kTimeEps &&
                start + duration <= gaps[i].end + kTimeEps) {
                const Interval old = gaps[i];
                std::vector<Interval> pieces;
                if (start > old.begin + kTimeEps) pieces.push_back({old.begin, start});
                if (start + duration < old.end - kTimeEps)
                    pieces.push_back({start + duration, old.end});
                gaps.erase(gaps.begin() + static_cast<std::ptrdiff_t>(i));
                gaps.insert(gaps.begin() + static_cast<std::ptrdiff_t>(i), pieces.begin(),
                            pieces.end());
                return;
            }
        }
        throw std::logic_error("occupy() outside any gap");
    }

    double remaining() const {
        double total = 0.0;
        for (const auto& gap : gaps) total += gap.length();
        return total;
    }
};

}  // namespace

double model_collective(double bytes, int participants, double alpha, double beta) {
    if (bytes < 0.0) throw std::invalid_argument("bytes must be >= 0");
    if (participants < 2) throw std::invalid_argument("collectives need >= 2 participants");
    const double transfer = bytes > 0.0 ? bytes / beta : 0.0;
    return alpha + transfer;
}

KfacWorkQueue enumerate_kfac_works(const PipelineConfig& config, const CostTable& costs) {
    const auto violations = validate_config(config);
    if (!violations.empty()) throw std::invalid_argument("invalid config");

    const int layers = config.layers_per_stage;
    const int w = config.replicas;
    const double inv_duration = costs.t_inv / layers;
    const double sync_bytes = static_cast<double>(costs.m_curv) / (2.0 * layers);
    const double sync_duration =
        w > 1 ? model_collective(sync_bytes, w, costs.comm_alpha, costs.comm_beta) : 0.0;

    KfacWorkQueue queue;
    for (int stage = 0; stage < config.stages; ++stage) {
        const std::vector<int> devs = replica_devices(config, stage);
        std::vector<std::vector<int>> curv_of(
            static_cast<std::size_t>(layers) * 2);  // (layer, factor) -> queue indices

        for (int dev : devs) {
            for (int m : micros_on(config, stage, dev)) {
                for (int layer = 0; layer < layers; ++layer) {
                    for (Factor factor : {Factor::A, Factor::B}) {
                        KfacWork item;
                        item.kind = WorkKind::Curvature;
                        item.stage = stage;
                        item.layer = layer;
                        item.factor = factor;
                        item.micro_batch = m;
                        item.device = dev;
                        item.duration = costs.t_curv;
                        item.base_anchor =
                            factor == Factor::A ? WorkKind::Forward : WorkKind::Backward;
                        curv_of[layer * 2 + (factor == Factor::A ? 0 : 1)].push_back(
                            static_cast<int>(queue.items.size()));
                        queue.items.push_back(std::move(item));
                    }
                }
            }
        }
        for (int layer = 0; layer < layers; ++layer) {
            for (Factor factor : {Factor::A, Factor::B}) {
                const auto& curvs = curv_of[layer * 2 + (factor == Factor::A ? 0 : 1)];
                int sync_index = -1;
                if (w > 1) {
                    KfacWork sync;
                    sync.kind = WorkKind::SyncCurvature;
                    sync.stage = stage;
                    sync.layer = layer;
                    sync.factor = factor;
                    sync.device = devs.front();
                    sync.duration = sync_duration;
                    sync.preds = curvs;
                    sync_index = static_cast<int>(queue.items.size());
                    queue.items.push_back(std::move(sync));
                }
                KfacWork inv;
                inv.kind = WorkKind::Inversion;
                inv.stage = stage;
                inv.layer = layer;
                inv.factor = factor;
                inv.device = devs.front();
                inv.duration = inv_duration;
                if (sync_index >= 0)
                    inv.preds.push_back(sync_index);
                else
                    inv.preds = curvs;
                queue.items.push_back(std::move(inv));
            }
        }
    }
    return queue;
}

FilledSchedule assign_works(const StaticSchedule& base, const PipelineConfig& config,
                            const CostTable& costs, const KfacWorkQueue& queue,
                            const AssignOptions& opts) {
    if (opts.horizon_cap < 1) throw std::invalid_argument("horizon_cap must be >= 1");
    if (base.device_count() != config.effective_devices())
        throw std::invalid_argument("base schedule does not match config device count");

    const int devices = base.device_count();
    const int spd = config.stages_per_device();
    const double base_period = base.period;

    // Step-0 base items and the forward/backward completion anchors.
    std::vector<std::vector<WorkItem>> step0(devices);
    std::map<std::tuple<int, int, int, int>, double> anchor_end;  // kind,stage,micro,dev
    for (int d = 0; d < devices; ++d) {
        for (const auto& item : base.timelines[d]) {
            if (item.step != 0) continue;
            step0[d].push_back(item);
            if ((item.kind == WorkKind::Forward || item.kind == WorkKind::Backward) &&
                item.micro_batch) {
                anchor_end[{static_cast<int>(item.kind), item.stage, *item.micro_batch, d}] =
                    item.end();
            }
        }
    }

    // Gradient sync and preconditioning tail, appended after the last base
    // work of each device, per hosted stage in backward-completion order.
    const double sync_grad_dur =
        config.replicas > 1 ? model_collective(static_cast<double>(costs.m_theta),
                                               config.replicas, costs.comm_alpha,
                                               costs.comm_beta)
                            : 0.0;
    const double prec_dur = costs.t_prec / spd;

    std::vector<std::vector<WorkItem>> tail(devices);
    for (int d = 0; d < devices; ++d) {
        double last_end = 0.0;
        std::map<int, double> stage_last_backward;
        for (const auto& item : step0[d]) {
            last_end = std::max(last_end, item.end());
            if (item.kind == WorkKind::Backward)
                stage_last_backward[item.stage] =
                    std::max(stage_last_backward[item.stage], item.end());
        }
        std::vector<std::pair<double, int>> order;
        for (const auto& [stage, end] : stage_last_backward) order.push_back({end, stage});
        std::sort(order.begin(), order.end());
        double cursor = last_end;
        for (const auto& [end, stage] : order) {
            if (config.replicas > 1) {
                WorkItem sync;
                sync.kind = WorkKind::SyncGrad;
                sync.stage = stage;
                sync.device = d;
                sync.start = cursor;
                sync.duration = sync_grad_dur;
                cursor += sync_grad_dur;
                tail[d].push_back(sync);
            }
            WorkItem prec;
            prec.kind = WorkKind::Precondition;
            prec.stage = stage;
            prec.device = d;
            prec.start = cursor;
            prec.duration = prec_dur;
            cursor += prec_dur;
            tail[d].push_back(prec);
        }
    }
    // Every device hosts stages_per_device stages, so the tail is uniform
    // and the critical device stretches the step by exactly this much.
    const double period = base_period + spd * sync_grad_dur + costs.t_prec;
    const int horizon = opts.horizon_cap;
    const double horizon_end = horizon * period;

    // Idle gaps of the unrolled horizon, per device.
    std::vector<GapList> gaps(devices);
    for (int d = 0; d < devices; ++d) {
        std::vector<Interval> busy;
        for (int k = 0; k < horizon; ++k) {
            const double shift = k * period;
            for (const auto& item : step0[d]) busy.push_back({item.start + shift, item.end() + shift});
            for (const auto& item : tail[d]) busy.push_back({item.start + shift, item.end() + shift});
        }
        std::sort(busy.begin(), busy.end(),
                  [](const Interval& a, const Interval& b) { return a.begin < b.begin; });
        double cursor = 0.0;
        for (const auto& iv : busy) {
            if (iv.begin > cursor + kTimeEps) gaps[d].gaps.push_back({cursor, iv.begin});
            cursor = std::max(cursor, iv.end);
        }
        if (horizon_end > cursor + kTimeEps) gaps[d].gaps.push_back({cursor, horizon_end});
    }

    // Inversion parallelism: split each stage's inversion items round-robin
    // across its replica devices.
    std::vector<KfacWork> items = queue.items;
    if (opts.inversion_parallel && config.replicas > 1) {
        std::map<int, int> next_slot;  // stage -> rotation
        for (auto& item : items) {
            if (item.kind != WorkKind::Inversion) continue;
            const auto devs = replica_devices(config, item.stage);
            item.device = devs[next_slot[item.stage]++ % devs.size()];
        }
    }

    // Greedy packing: repeatedly place the ready item with the earliest
    // feasible start, breaking ties by queue priority.
    std::vector<double> placed_end(items.size(), -1.0);
    std::vector<char> placed(items.size(), 0);
    std::vector<WorkItem> placed_items;
    std::size_t remaining = items.size();
    while (remaining > 0) {
        int best = -1;
        double best_start = 0.0;
        for (std::size_t i = 0; i < items.size(); ++i) {
            if (placed[i]) continue;
            const KfacWork& item = items[i];
            double ready = 0.0;
            if (item.base_anchor) {
                auto it = anchor_end.find({static_cast<int>(*item.base_anchor), item.stage,
                                           item.micro_batch.value_or(-1), item.device});
                if (it == anchor_end.end())
                    throw std::invalid_argument(
                        "queue item has no matching forward/backward in the base schedule");
                ready = it->second;
            }
            bool deps_done = true;
            for (int p : item.preds) {
                if (!placed[p]) {
                    deps_done = false;
                    break;
                }
                ready = std::max(ready, placed_end[p]);
            }
            if (!deps_done) continue;
            const auto start = gaps[item.device].earliest_fit(ready, item.duration, horizon_end);
            if (!start) continue;
            if (best < 0 || *start < best_start - kTimeEps ||
                (*start < best_start + kTimeEps &&
                 priority_key(item) < priority_key(items[static_cast<std::size_t>(best)]))) {
                best = static_cast<int>(i);
                best_start = *start;
            }
        }
        if (best < 0) {
            std::vector<KfacWork> unplaced;
            double deficit = 0.0;
            for (std::size_t i = 0; i < items.size(); ++i)
                if (!placed[i]) {
                    unplaced.push_back(items[i]);
                    deficit += items[i].duration;
                }
            std::ostringstream msg;
            msg << "K-FAC queue does not drain within " << horizon << " steps: "
                << unplaced.size() << " works (" << deficit << " ms) unplaced";
            throw InfeasibleError(msg.str(), std::move(unplaced), deficit);
        }
        KfacWork& item = items[static_cast<std::size_t>(best)];
        gaps[item.device].occupy(best_start, item.duration);
        placed[static_cast<std::size_t>(best)] = 1;
        placed_end[static_cast<std::size_t>(best)] = best_start + item.duration;
        --remaining;

        WorkItem out;
        out.kind = item.kind;
        out.stage = item.stage;
        out.layer = item.layer;
        out.factor = item.factor;
        out.micro_batch = item.micro_batch;
        out.device = item.device;
        out.start = best_start;
        out.duration = item.duration;
        placed_items.push_back(out);
    }

    // Steps consumed until the queue drained.
    const double step_eps = kTimeEps * std::max(1.0, period);
    auto step_of_end = [&](double end) {
        if (period <= 0.0) return 1;
        return std::max(1, static_cast<int>(std::ceil((end - step_eps) / period)));
    };
    int refresh = 1;
    for (const auto& item : placed_items) refresh = std::max(refresh, step_of_end(item.end()));

    FilledSchedule filled;
    filled.base_period = base_period;
    filled.refresh_period = refresh;
    filled.schedule.period = period;
    filled.schedule.horizon_steps = refresh;
    filled.schedule.refresh_period = refresh;
    filled.schedule.timelines.resize(devices);
    for (int d = 0; d < devices; ++d) {
        auto& timeline = filled.schedule.timelines[d];
        for (int k = 0; k < refresh; ++k) {
            const double shift = k * period;
            for (const auto& item : step0[d]) {
                WorkItem copy = item;
                copy.start += shift;
                copy.step = k;
                timeline.push_back(copy);
            }
            for (const auto& item : tail[d]) {
                WorkItem copy = item;
                copy.start += shift;
                copy.step = k;
                timeline.push_back(copy);
            }
        }
    }
    for (const auto& item : placed_items) {
        WorkItem copy = item;
        copy.step = step_of_end(item.end()) - 1;
        filled.schedule.timelines[item.device].push_back(copy);
    }
    for (auto& timeline : filled.schedule.timelines)
        std::sort(timeline.begin(), timeline.end(), [](const WorkItem& a, const WorkItem& b) {
            return a.start < b.start ||
                   (a.start == b.start && static_cast<int>(a.kind) < static_cast<int>(b.kind));
        });

    filled.staleness = staleness_report(filled);

    // Preconditions that run before the cycle finishes some inversion of
    // their stage consume an inverse from an earlier cycle.
    std::map<int, double> last_inversion_end;
    for (const auto& timeline : filled.schedule.timelines)
        for (const auto& item : timeline)
            if (item.kind == WorkKind::Inversion) {
                auto [it, inserted] = last_inversion_end.try_emplace(item.stage, item.end());
                if (!inserted) it->second = std::max(it->second, item.end());
            }
    for (const auto& timeline : filled.schedule.timelines)
        for (const auto& item : timeline) {
            if (item.kind != WorkKind::Precondition) continue;
            const auto it = last_inversion_end.find(item.stage);
            if (it != last_inversion_end.end() && item.start < it->second - kTimeEps)
                ++filled.preconditions_using_prior_inverses;
        }
    return filled;
}

std::vector<StalenessEntry> staleness_report(const FilledSchedule& filled) {
    const int refresh = filled.refresh_period;
    const double period = filled.schedule.period;
    const double cycle = refresh * period;

    // Earliest precondition start per (stage, step); inversion end per
    // (stage, layer, factor).
    std::map<std::pair<int, int>, double> prec_start;
    std::map<std::tuple<int, int, int>, double> inv_end;
    for (const auto& timeline : filled.schedule.timelines) {
        for (const auto& item : timeline) {
            if (item.kind == WorkKind::Precondition) {
                auto key = std::pair(item.stage, item.step);
                auto [it, inserted] = prec_start.try_emplace(key, item.start);
                if (!inserted) it->second = std::min(it->second, item.start);
            } else if (item.kind == WorkKind::Inversion) {
                inv_end[{item.stage, item.layer.value_or(0),
                         item.factor == Factor::B ? 1 : 0}] = item.end();
            }
        }
    }

    std::map<std::pair<int, int>, int> per_layer;  // (stage, layer) -> staleness
    for (const auto& [key, end] : inv_end) {
        const auto [stage, layer, factor] = key;
        int uses = refresh;
        if (cycle > 0.0) {
            // A factor inverse finished at `end` is consumed from there until
            // the next cycle's copy lands, one precondition per step.
            uses = 0;
            for (int k = 0; k < 2 * refresh; ++k) {
                auto it = prec_start.find({stage, k % refresh});
                if (it == prec_start.end()) continue;
                const double start = it->second + (k / refresh) * cycle;
                if (start >= end - kTimeEps && start < end + cycle - kTimeEps) ++uses;
            }
            uses = std::max(uses, 1);
        }
        auto [it, inserted] = per_layer.try_emplace({stage, layer}, uses);
        if (!inserted) it->second = std::max(it->second, uses);
    }

    std::vector<StalenessEntry> out;
    for (const auto& [key, staleness] : per_layer)
        out.push_back({key.first, key.second, staleness});
    return out;
}

}  // namespace pipefill
