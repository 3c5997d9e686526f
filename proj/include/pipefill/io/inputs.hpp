// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <stdexcept>
#include <string>

#include "pipefill/core.hpp"
#include "pipefill/perfmodel.hpp"

namespace pipefill::io {

class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& message, int line, int col)
        : std::runtime_error("line " + std::to_string(line) + ", col " +
                             std::to_string(col) + ": " + message),
          line(line),
          col(col) {}
    int line = 0;
    int col = 0;
};

class ValidationError : public std::runtime_error {
public:
    explicit ValidationError(std::vector<Violation> violations);
    std::vector<Violation> violations;
};

struct Inputs {
    PipelineConfig config;
    CostTable costs;
    std::optional<ArchSpec> arch;
    std::optional<DeviceSpec> device;
};

/// Parse the key/value input format (sections: config, costs, comm, arch,
/// device). Unknown keys and sections are rejected with their paths; missing
/// values keep their defaults (comm defaults to {0, inf}).
Inputs parse_inputs(const std::string& text);

/// parse_inputs plus config validation; throws ValidationError listing every
/// violation at once.
Inputs load_inputs(const std::string& path);

/// Canonical serialization; parse_inputs(write_inputs(x)) round-trips all
/// values bit-identically.
std::string write_inputs(const Inputs& inputs);

/// Built-in architecture presets (bert-base, bert-large, t5-base, t5-large,
/// opt-125m, opt-350m).
std::optional<ArchSpec> arch_preset(const std::string& name);

}  // namespace pipefill::io
