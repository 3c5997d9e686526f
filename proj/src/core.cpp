// SPDX-License-Identifier: Apache-2.0

#include "pipefill/core.hpp"

#include <algorithm>

namespace pipefill {

std::string to_string(Method m) {
    switch (m) {
        case Method::GPipe: return "gpipe";
        case Method::OneF1B: return "1f1b";
        case Method::Chimera: return "chimera";
    }
    return "?";
}

std::string to_string(Factor f) { return f == Factor::A ? "A" : "B"; }

std::string to_string(WorkKind k) {
    switch (k) {
        case WorkKind::Forward: return "forward";
        case WorkKind::Backward: return "backward";
        case WorkKind::Recompute: return "recompute";
        case WorkKind::Curvature: return "curvature";
        case WorkKind::Inversion: return "inversion";
        case WorkKind::Precondition: return "precondition";
        case WorkKind::SyncGrad: return "sync-grad";
        case WorkKind::SyncCurvature: return "sync-curvature";
    }
    return "?";
}

std::optional<Method> parse_method(const std::string& name) {
    if (name == "gpipe") return Method::GPipe;
    if (name == "1f1b" || name == "onef1b") return Method::OneF1B;
    if (name == "chimera") return Method::Chimera;
    return std::nullopt;
}

double StaticSchedule::makespan() const {
    double end = 0.0;
    for (const auto& timeline : timelines)
        for (const auto& item : timeline) end = std::max(end, item.end());
    return end;
}

std::vector<Violation> validate_config(const PipelineConfig& c) {
    std::vector<Violation> out;
    auto fail = [&out](std::string field, std::string rule) {
        out.push_back({std::move(field), std::move(rule)});
    };

    if (c.stages < 1) fail("stages", "D must be >= 1");
    if (c.micro_batches < 1) fail("micro_batches", "N_micro must be >= 1");
    if (c.micro_batch_size < 1) fail("micro_batch_size", "B_micro must be >= 1");
    if (c.replicas < 1) fail("replicas", "W must be >= 1");
    if (c.layers_per_stage < 1) fail("layers_per_stage", "layers per stage must be >= 1");
    if (c.seq_len < 1) fail("seq_len", "S must be >= 1");

    if (c.method == Method::Chimera) {
        if (c.stages % 2 != 0) fail("stages", "Chimera requires D even");
        if (c.micro_batches % 2 != 0)
            fail("micro_batches", "Chimera requires N_micro a multiple of 2");
        // Each bidirectional group supplies two replicas of every stage.
        if (c.replicas % 2 != 0) fail("replicas", "Chimera requires W even");
    }

    if (c.stages >= 1 && c.replicas >= 1) {
        const int spd = c.stages_per_device();
        if ((c.stages * c.replicas) % spd != 0) {
            fail("devices", "D*W must be divisible by stages per device");
        } else if (c.devices > 0 && c.devices != c.stages * c.replicas / spd) {
            fail("devices", "devices must equal D*W / stages per device");
        }
    }
    return out;
}

}  // namespace pipefill
