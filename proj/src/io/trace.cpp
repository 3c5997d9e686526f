// SPDX-License-Identifier: Apache-2.0

#include "pipefill/io/trace.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace pipefill::io {
namespace {

using ordered_json = nlohmann::ordered_json;

std::string event_name(const WorkItem& item) {
    std::ostringstream name;
    name << to_string(item.kind);
    if (item.layer) name << " l" << *item.layer;
    if (item.factor) name << ' ' << to_string(*item.factor);
    if (item.micro_batch) name << " m" << *item.micro_batch;
    if (!item.layer && !item.factor && !item.micro_batch) name << " s" << item.stage;
    return name.str();
}

WorkKind kind_from_string(const std::string& s) {
    for (const WorkKind k :
         {WorkKind::Forward, WorkKind::Backward, WorkKind::Recompute, WorkKind::Curvature,
          WorkKind::Inversion, WorkKind::Precondition, WorkKind::SyncGrad,
          WorkKind::SyncCurvature}) {
        if (to_string(k) == s) return k;
    }
    throw std::invalid_argument("unknown work kind in trace: " + s);
}

}  // namespace

std::string trace_to_json(const StaticSchedule& schedule, int devices_per_group) {
    ordered_json events = ordered_json::array();
    for (int d = 0; d < schedule.device_count(); ++d) {
        for (const auto& item : schedule.timelines[static_cast<std::size_t>(d)]) {
            ordered_json ev;
            ev["name"] = event_name(item);
            ev["ph"] = "X";
            ev["ts"] = std::llround(item.start * 1000.0);
            ev["dur"] = std::llround(item.duration * 1000.0);
            ev["pid"] = devices_per_group > 0 ? d / devices_per_group : 0;
            ev["tid"] = d;
            ordered_json args;
            args["kind"] = to_string(item.kind);
            args["stage"] = item.stage;
            args["step"] = item.step;
            if (item.micro_batch) args["micro_batch"] = *item.micro_batch;
            if (item.layer) args["layer"] = *item.layer;
            if (item.factor) args["factor"] = to_string(*item.factor);
            ev["args"] = std::move(args);
            events.push_back(std::move(ev));
        }
    }
    ordered_json doc;
    doc["traceEvents"] = std::move(events);
    return doc.dump(2) + "\n";
}

void emit_trace(const StaticSchedule& schedule, const std::string& path,
                int devices_per_group) {
    std::ofstream file(path, std::ios::binary);
    if (!file) throw std::runtime_error("cannot open trace output file: " + path);
    file << trace_to_json(schedule, devices_per_group);
    if (!file) throw std::runtime_error("failed writing trace file: " + path);
}

StaticSchedule parse_trace(const std::string& json) {
    const auto doc = nlohmann::json::parse(json);
    StaticSchedule schedule;
    int max_device = -1;
    std::vector<WorkItem> items;
    for (const auto& ev : doc.at("traceEvents")) {
        WorkItem item;
        item.device = ev.at("tid").get<int>();
        item.start = ev.at("ts").get<long long>() / 1000.0;
        item.duration = ev.at("dur").get<long long>() / 1000.0;
        const auto& args = ev.at("args");
        item.kind = kind_from_string(args.at("kind").get<std::string>());
        item.stage = args.at("stage").get<int>();
        item.step = args.at("step").get<int>();
        if (args.contains("micro_batch")) item.micro_batch = args.at("micro_batch").get<int>();
        if (args.contains("layer")) item.layer = args.at("layer").get<int>();
        if (args.contains("factor"))
            item.factor = args.at("factor").get<std::string>() == "A" ? Factor::A : Factor::B;
        max_device = std::max(max_device, item.device);
        items.push_back(std::move(item));
    }
    schedule.timelines.resize(static_cast<std::size_t>(max_device + 1));
    for (auto& item : items)
        schedule.timelines[static_cast<std::size_t>(item.device)].push_back(item);
    schedule.horizon_steps = 1;
    for (const auto& timeline : schedule.timelines)
        for (const auto& item : timeline)
            schedule.horizon_steps = std::max(schedule.horizon_steps, item.step + 1);
    return schedule;
}

}  // namespace pipefill::io
