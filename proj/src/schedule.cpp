// SPDX-License-Identifier: Apache-2.0

#include "pipefill/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

namespace pipefill {
namespace {

constexpr double kTimeEps = 1e-9;

// One forward or backward unit of work inside a single replica group.
// Chimera runs two pipelines per group; the other methods use pipe 0 only.
struct Task {
    int pipe = 0;        // 0 = down, 1 = up
    int round = 0;       // micro-batch index within its pipeline
    int stage = 0;
    bool backward = false;
    int device = 0;      // local device within the group
    double start = -1.0;
    double duration = 0.0;
    bool placed() const { return start >= 0.0; }
};

struct GroupLayout {
    std::vector<Task> tasks;
    double makespan = 0.0;
};

int micro_of(const Task& t, int n_micro) {
    return t.pipe == 0 ? t.round : n_micro / 2 + t.round;
}

// GPipe and 1F1B have a predetermined per-device work order; starts follow
// from the stage dependencies. Iterate until every device drains its queue.
GroupLayout layout_fixed_order(const PipelineConfig& config, double dur_f, double dur_b,
                               double p2p) {
    const int depth = config.stages;
    const int n = config.micro_batches;
    const bool one_f1b = config.method == Method::OneF1B;

    // Per-device sequence of (backward?, micro).
    std::vector<std::vector<std::pair<bool, int>>> order(depth);
    for (int s = 0; s < depth; ++s) {
        auto& seq = order[s];
        if (one_f1b) {
            const int warmup = std::min(depth - s, n);
            for (int m = 0; m < warmup; ++m) seq.push_back({false, m});
            for (int m = warmup; m < n; ++m) {
                seq.push_back({true, m - warmup});
                seq.push_back({false, m});
            }
            for (int m = n - warmup; m < n; ++m) seq.push_back({true, m});
        } else {
            for (int m = 0; m < n; ++m) seq.push_back({false, m});
            for (int m = 0; m < n; ++m) seq.push_back({true, m});
        }
    }

    std::vector<std::vector<double>> f_end(depth, std::vector<double>(n, -1.0));
    std::vector<std::vector<double>> b_end(depth, std::vector<double>(n, -1.0));
    std::vector<double> free_at(depth, 0.0);
    std::vector<std::size_t> cursor(depth, 0);

    GroupLayout out;
    bool progressed = true;
    while (progressed) {
        progressed = false;
        for (int s = 0; s < depth; ++s) {
            while (cursor[s] < order[s].size()) {
                auto [backward, m] = order[s][cursor[s]];
                double ready;
                if (!backward) {
                    ready = s == 0 ? 0.0 : f_end[s - 1][m] + p2p;
                } else {
                    // the last stage turns around locally, no hop
                    ready = s == depth - 1 ? f_end[s][m] : b_end[s + 1][m] + p2p;
                }
                if (ready < 0.0) break;  // dependency not yet placed
                const double start = std::max(ready, free_at[s]);
                const double dur = backward ? dur_b : dur_f;
                (backward ? b_end : f_end)[s][m] = start + dur;
                free_at[s] = start + dur;
                out.tasks.push_back({0, m, s, backward, s, start, dur});
                out.makespan = std::max(out.makespan, start + dur);
                ++cursor[s];
                progressed = true;
            }
        }
    }
    for (int s = 0; s < depth; ++s)
        if (cursor[s] != order[s].size()) throw std::logic_error("pipeline layout deadlocked");
    return out;
}

// Chimera: greedy list scheduling over both pipelines. Among ready tasks,
// lower rounds go first, then backward before forward, then the down
// pipeline, which reproduces the bidirectional schedule with critical path
// D forwards + (2D-2) backwards at N_micro = D.
GroupLayout layout_chimera(const PipelineConfig& config, double dur_f, double dur_b,
                           double p2p) {
    const int depth = config.stages;
    const int n = config.micro_batches;
    const int rounds = n / 2;

    std::vector<Task> tasks;
    tasks.reserve(static_cast<std::size_t>(4) * rounds * depth);
    for (int pipe = 0; pipe < 2; ++pipe)
        for (int r = 0; r < rounds; ++r)
            for (int s = 0; s < depth; ++s) {
                const int device = pipe == 0 ? s : depth - 1 - s;
                tasks.push_back({pipe, r, s, false, device, -1.0, dur_f});
                tasks.push_back({pipe, r, s, true, device, -1.0, dur_b});
            }

    auto find = [&](int pipe, int r, int s, bool backward) -> Task& {
        const std::size_t base =
            (static_cast<std::size_t>(pipe) * rounds + r) * depth + s;
        return tasks[base * 2 + (backward ? 1 : 0)];
    };

    std::vector<double> free_at(depth, 0.0);
    GroupLayout out;
    const std::size_t total = tasks.size();
    for (std::size_t placed = 0; placed < total; ++placed) {
        Task* best = nullptr;
        double best_start = 0.0;
        for (auto& t : tasks) {
            if (t.placed()) continue;
            double ready;
            if (!t.backward) {
                if (t.stage == 0) {
                    ready = 0.0;
                } else {
                    const Task& dep = find(t.pipe, t.round, t.stage - 1, false);
                    if (!dep.placed()) continue;
                    ready = dep.start + dep.duration + p2p;
                }
            } else {
                const bool turnaround = t.stage == depth - 1;
                const Task& dep = turnaround ? find(t.pipe, t.round, t.stage, false)
                                             : find(t.pipe, t.round, t.stage + 1, true);
                if (!dep.placed()) continue;
                ready = dep.start + dep.duration + (turnaround ? 0.0 : p2p);
            }
            const double start = std::max(ready, free_at[t.device]);
            if (best == nullptr || start < best_start - kTimeEps) {
                best = &t;
                best_start = start;
            } else if (start < best_start + kTimeEps) {
                auto key = [](const Task& x) {
                    return std::tuple(x.round, x.backward ? 0 : 1, x.pipe, x.stage);
                };
                if (key(t) < key(*best)) {
                    best = &t;
                    best_start = start;
                }
            }
        }
        if (best == nullptr) throw std::logic_error("chimera layout deadlocked");
        best->start = best_start;
        free_at[best->device] = best_start + best->duration;
        out.makespan = std::max(out.makespan, best_start + best->duration);
    }
    out.tasks = std::move(tasks);
    return out;
}

}  // namespace

StaticSchedule build_schedule(const PipelineConfig& config, const CostTable& costs,
                              int horizon_steps) {
    const auto violations = validate_config(config);
    if (!violations.empty()) {
        std::ostringstream msg;
        msg << "invalid config:";
        for (const auto& v : violations) msg << " [" << v.field << ": " << v.rule << "]";
        throw std::invalid_argument(msg.str());
    }
    if (horizon_steps < 1) throw std::invalid_argument("horizon_steps must be >= 1");

    const double dur_f = costs.t_f;
    // Recompute runs glued in front of its backward on the same device.
    const double dur_b = costs.t_b + (config.recompute ? costs.t_f : 0.0);

    const GroupLayout group = config.method == Method::Chimera
                                  ? layout_chimera(config, dur_f, dur_b, costs.p2p_latency)
                                  : layout_fixed_order(config, dur_f, dur_b, costs.p2p_latency);

    const int depth = config.stages;
    const int n_groups = config.groups();
    const int devices = config.effective_devices();

    StaticSchedule schedule;
    schedule.period = group.makespan;
    schedule.horizon_steps = horizon_steps;
    schedule.refresh_period = 1;
    schedule.timelines.resize(devices);

    for (int step = 0; step < horizon_steps; ++step) {
        const double shift = step * group.makespan;
        for (int g = 0; g < n_groups; ++g) {
            const int offset = g * depth;
            for (const auto& t : group.tasks) {
                WorkItem item;
                item.stage = t.stage;
                item.micro_batch = micro_of(t, config.micro_batches);
                item.device = offset + t.device;
                item.step = step;
                if (t.backward && config.recompute) {
                    item.kind = WorkKind::Recompute;
                    item.start = shift + t.start;
                    item.duration = costs.t_f;
                    schedule.timelines[item.device].push_back(item);
                    item.kind = WorkKind::Backward;
                    item.start = shift + t.start + costs.t_f;
                    item.duration = costs.t_b;
                } else {
                    item.kind = t.backward ? WorkKind::Backward : WorkKind::Forward;
                    item.start = shift + t.start;
                    item.duration = t.duration;
                }
                schedule.timelines[item.device].push_back(item);
            }
        }
    }
    for (auto& timeline : schedule.timelines)
        std::sort(timeline.begin(), timeline.end(), [](const WorkItem& a, const WorkItem& b) {
            return a.start < b.start;
        });
    return schedule;
}

BubbleSet extract_bubbles(const StaticSchedule& schedule) {
    const double makespan = schedule.makespan();
    BubbleSet out;
    out.idle.resize(schedule.timelines.size());
    out.total_idle.resize(schedule.timelines.size(), 0.0);
    for (std::size_t d = 0; d < schedule.timelines.size(); ++d) {
        double cursor = 0.0;
        for (const auto& item : schedule.timelines[d]) {
            if (item.start > cursor + kTimeEps)
                out.idle[d].push_back({cursor, item.start});
            cursor = std::max(cursor, item.end());
        }
        if (makespan > cursor + kTimeEps) out.idle[d].push_back({cursor, makespan});
        for (const auto& gap : out.idle[d]) out.total_idle[d] += gap.length();
    }
    return out;
}

ScheduleMetrics schedule_metrics(const StaticSchedule& schedule) {
    ScheduleMetrics m;
    m.makespan = schedule.makespan();
    double busy_total = 0.0;
    for (const auto& timeline : schedule.timelines) {
        double busy = 0.0;
        for (const auto& item : timeline) busy += item.duration;
        m.per_device_busy.push_back(busy);
        busy_total += busy;
    }
    const double capacity = m.makespan * static_cast<double>(schedule.timelines.size());
    m.utilization = capacity > 0.0 ? busy_total / capacity : 1.0;
    return m;
}

std::vector<Violation> validate_schedule(const StaticSchedule& schedule,
                                         const PipelineConfig& config) {
    std::vector<Violation> out;
    auto fail = [&out](const std::string& field, std::string rule) {
        out.push_back({field, std::move(rule)});
    };
    auto label = [](int device) { return "device " + std::to_string(device); };

    const int depth = config.stages;
    const int n = config.micro_batches;

    // Non-overlap and sortedness, all work kinds.
    for (std::size_t d = 0; d < schedule.timelines.size(); ++d) {
        const auto& timeline = schedule.timelines[d];
        for (std::size_t i = 1; i < timeline.size(); ++i) {
            if (timeline[i].start < timeline[i - 1].start - kTimeEps)
                fail(label(static_cast<int>(d)), "timeline not sorted by start");
            if (timeline[i].start < timeline[i - 1].end() - kTimeEps &&
                timeline[i].duration > 0.0 && timeline[i - 1].duration > 0.0)
                fail(label(static_cast<int>(d)), "overlapping work intervals");
        }
    }

    // Collect forward/backward items keyed by (group, step, stage, micro).
    struct Cell {
        const WorkItem* f = nullptr;
        const WorkItem* b = nullptr;
        const WorkItem* rc = nullptr;
        int count_f = 0, count_b = 0;
    };
    std::map<std::tuple<int, int, int, int>, Cell> cells;
    std::map<int, double> last_backward_end_per_step;
    std::map<int, double> first_forward_start_per_step;

    for (std::size_t d = 0; d < schedule.timelines.size(); ++d) {
        const int group = depth > 0 ? static_cast<int>(d) / depth : 0;
        for (const auto& item : schedule.timelines[d]) {
            if (item.kind != WorkKind::Forward && item.kind != WorkKind::Backward &&
                item.kind != WorkKind::Recompute)
                continue;
            if (!item.micro_batch) {
                fail(label(item.device), "forward/backward item without micro-batch");
                continue;
            }
            auto key = std::tuple(group, item.step, item.stage, *item.micro_batch);
            auto& cell = cells[key];
            if (item.kind == WorkKind::Forward) {
                cell.f = &item;
                ++cell.count_f;
                auto [it, inserted] =
                    first_forward_start_per_step.try_emplace(item.step, item.start);
                if (!inserted) it->second = std::min(it->second, item.start);
            } else if (item.kind == WorkKind::Backward) {
                cell.b = &item;
                ++cell.count_b;
                auto [it, inserted] =
                    last_backward_end_per_step.try_emplace(item.step, item.end());
                if (!inserted) it->second = std::max(it->second, item.end());
            } else {
                cell.rc = &item;
            }
        }
    }

    const int n_groups = std::max(1, config.groups());
    for (int g = 0; g < n_groups; ++g) {
        for (int step = 0; step < schedule.horizon_steps; ++step) {
            for (int s = 0; s < depth; ++s) {
                for (int m = 0; m < n; ++m) {
                    auto it = cells.find(std::tuple(g, step, s, m));
                    const std::string where = "group " + std::to_string(g) + " stage " +
                                              std::to_string(s) + " micro " +
                                              std::to_string(m) + " step " +
                                              std::to_string(step);
                    if (it == cells.end()) {
                        fail(where, "missing forward/backward pair");
                        continue;
                    }
                    const Cell& cell = it->second;
                    if (cell.count_f != 1) fail(where, "forward count != 1");
                    if (cell.count_b != 1) fail(where, "backward count != 1");
                    if (!cell.f || !cell.b) continue;
                    if (s > 0) {
                        auto dep = cells.find(std::tuple(g, step, s - 1, m));
                        if (dep != cells.end() && dep->second.f &&
                            cell.f->start < dep->second.f->end() - kTimeEps)
                            fail(where, "forward starts before upstream forward ends");
                    }
                    if (s < depth - 1) {
                        auto dep = cells.find(std::tuple(g, step, s + 1, m));
                        if (dep != cells.end() && dep->second.b &&
                            cell.b->start < dep->second.b->end() - kTimeEps)
                            fail(where, "backward starts before downstream backward ends");
                    } else if (cell.b->start < cell.f->end() - kTimeEps) {
                        fail(where, "last-stage backward starts before its forward ends");
                    }
                    if (config.recompute) {
                        if (!cell.rc)
                            fail(where, "missing recompute item");
                        else if (cell.b->start < cell.rc->end() - kTimeEps)
                            fail(where, "backward starts before its recompute ends");
                    }
                }
            }
        }
    }

    for (int step = 1; step < schedule.horizon_steps; ++step) {
        auto ff = first_forward_start_per_step.find(step);
        auto lb = last_backward_end_per_step.find(step - 1);
        if (ff != first_forward_start_per_step.end() &&
            lb != last_backward_end_per_step.end() && ff->second < lb->second - kTimeEps)
            fail("step " + std::to_string(step),
                 "first forward starts before previous step's backwards finish");
    }
    return out;
}

}  // namespace pipefill
