// SPDX-License-Identifier: Apache-2.0

#include "pipefill/io/inputs.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace pipefill::io {
namespace {

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r");
    return s.substr(begin, end - begin + 1);
}

double parse_double(const std::string& value, int line) {
    try {
        std::size_t used = 0;
        const double v = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw ParseError("expected a number, got '" + value + "'", line, 1);
    }
}

std::int64_t parse_int(const std::string& value, int line) {
    try {
        std::size_t used = 0;
        const long long v = std::stoll(value, &used);
        if (used != value.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw ParseError("expected an integer, got '" + value + "'", line, 1);
    }
}

bool parse_bool(const std::string& value, int line) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw ParseError("expected true/false, got '" + value + "'", line, 1);
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

ValidationError::ValidationError(std::vector<Violation> violations_in)
    : std::runtime_error([&violations_in] {
          std::ostringstream msg;
          msg << "config validation failed:";
          for (const auto& v : violations_in) msg << "\n  " << v.field << ": " << v.rule;
          return msg.str();
      }()),
      violations(std::move(violations_in)) {}

std::optional<ArchSpec> arch_preset(const std::string& name) {
    if (name == "bert-base") return ArchSpec{768, 3072, 12, 128};
    if (name == "bert-large") return ArchSpec{1024, 4096, 16, 128};
    if (name == "t5-base") return ArchSpec{768, 3072, 12, 512};
    if (name == "t5-large") return ArchSpec{1024, 4096, 16, 512};
    if (name == "opt-125m") return ArchSpec{768, 3072, 12, 2048};
    if (name == "opt-350m") return ArchSpec{1024, 4096, 16, 2048};
    return std::nullopt;
}

Inputs parse_inputs(const std::string& text) {
    Inputs inputs;
    std::istringstream stream(text);
    std::string raw;
    std::string section;
    int line_no = 0;
    bool saw_arch = false, saw_device = false;

    while (std::getline(stream, raw)) {
        ++line_no;
        std::string line = trim(raw);
        if (const auto hash = line.find('#'); hash != std::string::npos)
            line = trim(line.substr(0, hash));
        if (line.empty()) continue;

        if (line.front() == '[') {
            if (line.back() != ']')
                throw ParseError("unterminated section header", line_no,
                                 static_cast<int>(raw.size()));
            section = trim(line.substr(1, line.size() - 2));
            if (section != "config" && section != "costs" && section != "comm" &&
                section != "arch" && section != "device")
                throw ParseError("unknown section [" + section + "]", line_no, 1);
            if (section == "arch") saw_arch = true;
            if (section == "device") saw_device = true;
            continue;
        }

        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ParseError("expected key = value", line_no,
                             static_cast<int>(raw.find(line.front())) + 1);
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (section.empty())
            throw ParseError("key '" + key + "' outside any section", line_no, 1);
        if (key.empty() || value.empty())
            throw ParseError("empty key or value", line_no, 1);

        auto unknown = [&] {
            return ParseError("unknown key '" + section + "." + key + "'", line_no, 1);
        };

        if (section == "config") {
            auto& c = inputs.config;
            if (key == "method") {
                const auto m = parse_method(value);
                if (!m) throw ParseError("unknown method '" + value + "'", line_no, 1);
                c.method = *m;
            } else if (key == "stages" || key == "depth") {
                c.stages = static_cast<int>(parse_int(value, line_no));
            } else if (key == "micro_batches") {
                c.micro_batches = static_cast<int>(parse_int(value, line_no));
            } else if (key == "micro_batch_size") {
                c.micro_batch_size = static_cast<int>(parse_int(value, line_no));
            } else if (key == "replicas") {
                c.replicas = static_cast<int>(parse_int(value, line_no));
            } else if (key == "devices") {
                c.devices = static_cast<int>(parse_int(value, line_no));
            } else if (key == "layers_per_stage") {
                c.layers_per_stage = static_cast<int>(parse_int(value, line_no));
            } else if (key == "seq_len") {
                c.seq_len = static_cast<int>(parse_int(value, line_no));
            } else if (key == "recompute") {
                c.recompute = parse_bool(value, line_no);
            } else {
                throw unknown();
            }
        } else if (section == "costs") {
            auto& t = inputs.costs;
            if (key == "t_f") t.t_f = parse_double(value, line_no);
            else if (key == "t_b") t.t_b = parse_double(value, line_no);
            else if (key == "t_curv") t.t_curv = parse_double(value, line_no);
            else if (key == "t_inv") t.t_inv = parse_double(value, line_no);
            else if (key == "t_prec") t.t_prec = parse_double(value, line_no);
            else if (key == "m_theta") t.m_theta = parse_int(value, line_no);
            else if (key == "m_act") t.m_act = parse_int(value, line_no);
            else if (key == "m_err_peak") t.m_err_peak = parse_int(value, line_no);
            else if (key == "m_err_save") t.m_err_save = parse_int(value, line_no);
            else if (key == "m_curv") t.m_curv = parse_int(value, line_no);
            else throw unknown();
        } else if (section == "comm") {
            if (key == "alpha") inputs.costs.comm_alpha = parse_double(value, line_no);
            else if (key == "beta") inputs.costs.comm_beta = parse_double(value, line_no);
            else if (key == "p2p_latency") inputs.costs.p2p_latency = parse_double(value, line_no);
            else throw unknown();
        } else if (section == "arch") {
            if (!inputs.arch) inputs.arch = ArchSpec{};
            auto& a = *inputs.arch;
            if (key == "preset") {
                const auto preset = arch_preset(value);
                if (!preset) throw ParseError("unknown arch preset '" + value + "'", line_no, 1);
                a = *preset;
            } else if (key == "d_model") a.d_model = static_cast<int>(parse_int(value, line_no));
            else if (key == "d_ff") a.d_ff = static_cast<int>(parse_int(value, line_no));
            else if (key == "heads") a.heads = static_cast<int>(parse_int(value, line_no));
            else if (key == "seq_len") a.seq_len = static_cast<int>(parse_int(value, line_no));
            else throw unknown();
        } else {  // device
            if (!inputs.device) inputs.device = DeviceSpec{};
            auto& d = *inputs.device;
            if (key == "flops") d.flops = parse_double(value, line_no);
            else if (key == "mem_bandwidth") d.mem_bandwidth = parse_double(value, line_no);
            else throw unknown();
        }
    }
    if (saw_arch && !inputs.arch) inputs.arch = ArchSpec{};
    if (saw_device && !inputs.device) inputs.device = DeviceSpec{};
    return inputs;
}

Inputs load_inputs(const std::string& path) {
    std::ifstream file(path);
    if (!file) throw std::runtime_error("cannot open input file: " + path);
    std::ostringstream content;
    content << file.rdbuf();
    Inputs inputs = parse_inputs(content.str());
    const auto violations = validate_config(inputs.config);
    if (!violations.empty()) throw ValidationError(violations);
    return inputs;
}

std::string write_inputs(const Inputs& inputs) {
    std::ostringstream out;
    const auto& c = inputs.config;
    out << "[config]\n";
    out << "method = " << to_string(c.method) << "\n";
    out << "stages = " << c.stages << "\n";
    out << "micro_batches = " << c.micro_batches << "\n";
    out << "micro_batch_size = " << c.micro_batch_size << "\n";
    out << "replicas = " << c.replicas << "\n";
    if (c.devices > 0) out << "devices = " << c.devices << "\n";
    out << "layers_per_stage = " << c.layers_per_stage << "\n";
    out << "seq_len = " << c.seq_len << "\n";
    out << "recompute = " << (c.recompute ? "true" : "false") << "\n";

    const auto& t = inputs.costs;
    out << "\n[costs]\n";
    out << "t_f = " << format_double(t.t_f) << "\n";
    out << "t_b = " << format_double(t.t_b) << "\n";
    out << "t_curv = " << format_double(t.t_curv) << "\n";
    out << "t_inv = " << format_double(t.t_inv) << "\n";
    out << "t_prec = " << format_double(t.t_prec) << "\n";
    out << "m_theta = " << t.m_theta << "\n";
    out << "m_act = " << t.m_act << "\n";
    out << "m_err_peak = " << t.m_err_peak << "\n";
    out << "m_err_save = " << t.m_err_save << "\n";
    out << "m_curv = " << t.m_curv << "\n";

    out << "\n[comm]\n";
    out << "alpha = " << format_double(t.comm_alpha) << "\n";
    out << "beta = " << format_double(t.comm_beta) << "\n";
    out << "p2p_latency = " << format_double(t.p2p_latency) << "\n";

    if (inputs.arch) {
        out << "\n[arch]\n";
        out << "d_model = " << inputs.arch->d_model << "\n";
        out << "d_ff = " << inputs.arch->d_ff << "\n";
        out << "heads = " << inputs.arch->heads << "\n";
        out << "seq_len = " << inputs.arch->seq_len << "\n";
    }
    if (inputs.device) {
        out << "\n[device]\n";
        out << "flops = " << format_double(inputs.device->flops) << "\n";
        out << "mem_bandwidth = " << format_double(inputs.device->mem_bandwidth) << "\n";
    }
    return out.str();
}

}  // namespace pipefill::io
