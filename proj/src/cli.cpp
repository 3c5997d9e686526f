// SPDX-License-Identifier: Apache-2.0

#include "pipefill/cli.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "pipefill/bubblefill.hpp"
#include "pipefill/core.hpp"
#include "pipefill/io/inputs.hpp"
#include "pipefill/io/trace.hpp"
#include "pipefill/kfac/kfac.hpp"
#include "pipefill/perfmodel.hpp"
#include "pipefill/schedule.hpp"

namespace pipefill::cli {
namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 2;
constexpr int kExitInfeasible = 3;

std::string num(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

struct CommonFlags {
    std::string method;
    int depth = 0;
    int micro = 0;
    int micro_batch_size = 0;
    int replicas = 0;
    int layers = 0;
    int seq = 0;
    bool recompute = false;
    std::string costs_path;
    std::string arch;
    std::string device_path;
    double flops = 0.0;
    std::string trace_path;
    std::string out_path;

    CLI::Option* method_opt = nullptr;
    CLI::Option* depth_opt = nullptr;
    CLI::Option* micro_opt = nullptr;
    CLI::Option* mbs_opt = nullptr;
    CLI::Option* replicas_opt = nullptr;
    CLI::Option* layers_opt = nullptr;
    CLI::Option* seq_opt = nullptr;
    CLI::Option* recompute_opt = nullptr;

    void attach(CLI::App* app, bool with_trace) {
        method_opt = app->add_option("--method", method, "pipeline method: gpipe, 1f1b, chimera");
        depth_opt = app->add_option("--depth", depth, "pipeline stages D");
        micro_opt = app->add_option("--micro", micro, "micro-batches per device N_micro");
        mbs_opt = app->add_option("--micro-batch-size", micro_batch_size, "micro-batch size B_micro");
        replicas_opt = app->add_option("--replicas", replicas, "model replicas per stage W");
        layers_opt = app->add_option("--layers", layers, "layers per stage");
        seq_opt = app->add_option("--seq", seq, "sequence length S");
        recompute_opt = app->add_flag("--recompute", recompute, "enable activation recomputation");
        app->add_option("--costs", costs_path, "config/cost input file");
        app->add_option("--arch", arch, "architecture preset name or input file");
        app->add_option("--device", device_path, "device spec input file");
        app->add_option("--flops", flops, "device FLOP/ms (overrides --device)");
        if (with_trace) app->add_option("--trace", trace_path, "write a Chrome trace file");
        app->add_option("--out", out_path, "write output to a file instead of stdout");
    }
};

// flag > file > default
io::Inputs merge_inputs(const CommonFlags& flags) {
    io::Inputs inputs;
    if (!flags.costs_path.empty()) {
        std::ifstream file(flags.costs_path);
        if (!file) throw std::runtime_error("cannot open input file: " + flags.costs_path);
        std::ostringstream content;
        content << file.rdbuf();
        inputs = io::parse_inputs(content.str());
    }
    if (!flags.arch.empty()) {
        if (const auto preset = io::arch_preset(flags.arch)) {
            inputs.arch = *preset;
        } else {
            std::ifstream file(flags.arch);
            if (!file)
                throw std::runtime_error("--arch is neither a preset nor a readable file: " +
                                         flags.arch);
            std::ostringstream content;
            content << file.rdbuf();
            const io::Inputs arch_inputs = io::parse_inputs(content.str());
            if (!arch_inputs.arch)
                throw std::runtime_error("no [arch] section in " + flags.arch);
            inputs.arch = arch_inputs.arch;
        }
    }
    if (!flags.device_path.empty()) {
        std::ifstream file(flags.device_path);
        if (!file) throw std::runtime_error("cannot open device file: " + flags.device_path);
        std::ostringstream content;
        content << file.rdbuf();
        const io::Inputs device_inputs = io::parse_inputs(content.str());
        if (!device_inputs.device)
            throw std::runtime_error("no [device] section in " + flags.device_path);
        inputs.device = device_inputs.device;
    }
    if (flags.flops > 0.0) {
        if (!inputs.device) inputs.device = DeviceSpec{};
        inputs.device->flops = flags.flops;
    }

    auto& c = inputs.config;
    if (flags.method_opt && flags.method_opt->count()) {
        const auto m = parse_method(flags.method);
        if (!m) throw std::runtime_error("unknown method '" + flags.method + "'");
        c.method = *m;
    }
    if (flags.depth_opt && flags.depth_opt->count()) c.stages = flags.depth;
    if (flags.micro_opt && flags.micro_opt->count()) c.micro_batches = flags.micro;
    if (flags.mbs_opt && flags.mbs_opt->count()) c.micro_batch_size = flags.micro_batch_size;
    if (flags.replicas_opt && flags.replicas_opt->count()) c.replicas = flags.replicas;
    if (flags.layers_opt && flags.layers_opt->count()) c.layers_per_stage = flags.layers;
    if (flags.seq_opt && flags.seq_opt->count()) c.seq_len = flags.seq;
    if (flags.recompute_opt && flags.recompute_opt->count()) c.recompute = flags.recompute;

    // Chimera needs two replicas per stage even without data parallelism.
    if ((!flags.replicas_opt || !flags.replicas_opt->count()) &&
        c.method == Method::Chimera && c.replicas == 1)
        c.replicas = 2;
    if (inputs.arch) {
        if (flags.seq_opt && flags.seq_opt->count())
            inputs.arch->seq_len = flags.seq;
        else
            c.seq_len = inputs.arch->seq_len;
    }
    return inputs;
}

int check_config(const PipelineConfig& config, std::ostream& err) {
    const auto violations = validate_config(config);
    if (violations.empty()) return kExitOk;
    err << "configuration invalid:\n";
    for (const auto& v : violations) err << "  " << v.field << ": " << v.rule << "\n";
    return kExitValidation;
}

CostTable resolve_costs(const io::Inputs& inputs) {
    if (inputs.arch) {
        const DeviceSpec device = inputs.device.value_or(DeviceSpec{});
        CostTable costs = analytic_costs(*inputs.arch, inputs.config.micro_batch_size, device,
                                         inputs.config.layers_per_stage);
        costs.comm_alpha = inputs.costs.comm_alpha;
        costs.comm_beta = inputs.costs.comm_beta;
        return costs;
    }
    return inputs.costs;
}

std::ostream& open_out(const std::string& path, std::ofstream& file) {
    if (path.empty()) return std::cout;
    file.open(path, std::ios::binary);
    if (!file) throw std::runtime_error("cannot open output file: " + path);
    return file;
}

int cmd_schedule(const CommonFlags& flags, int horizon) {
    const io::Inputs inputs = merge_inputs(flags);
    if (const int rc = check_config(inputs.config, std::cerr)) return rc;
    const CostTable costs = resolve_costs(inputs);

    const StaticSchedule schedule = build_schedule(inputs.config, costs, horizon);
    const ScheduleMetrics metrics = schedule_metrics(schedule);
    const BubbleSet bubbles = extract_bubbles(schedule);

    std::ofstream file;
    std::ostream& out = open_out(flags.out_path, file);
    out << "method: " << to_string(inputs.config.method) << "\n";
    out << "makespan: " << num(metrics.makespan) << " ms\n";
    out << "period: " << num(schedule.period) << " ms\n";
    out << "utilization: " << num(metrics.utilization) << "\n";
    for (int d = 0; d < schedule.device_count(); ++d) {
        out << "device " << d << ": busy " << num(metrics.per_device_busy[d]) << " ms, idle "
            << num(bubbles.total_idle[d]) << " ms, bubbles " << bubbles.idle[d].size()
            << "\n";
    }
    if (!flags.trace_path.empty())
        io::emit_trace(schedule, flags.trace_path, inputs.config.stages);
    return kExitOk;
}

int cmd_assign(const CommonFlags& flags, bool inversion_parallel, int horizon_cap) {
    const io::Inputs inputs = merge_inputs(flags);
    if (const int rc = check_config(inputs.config, std::cerr)) return rc;
    const CostTable costs = resolve_costs(inputs);

    const StaticSchedule base = build_schedule(inputs.config, costs, 1);
    const KfacWorkQueue queue = enumerate_kfac_works(inputs.config, costs);
    AssignOptions opts;
    opts.inversion_parallel = inversion_parallel;
    opts.horizon_cap = horizon_cap;

    FilledSchedule filled;
    try {
        filled = assign_works(base, inputs.config, costs, queue, opts);
    } catch (const InfeasibleError& e) {
        std::cerr << "infeasible: " << e.what() << "\n";
        for (const auto& w : e.unplaced)
            std::cerr << "  unplaced: " << to_string(w.kind) << " stage " << w.stage
                      << " layer " << w.layer << " " << to_string(w.factor) << "\n";
        return kExitInfeasible;
    }

    const ScheduleMetrics before = schedule_metrics(base);
    const ScheduleMetrics after = schedule_metrics(filled.schedule);
    std::ofstream file;
    std::ostream& out = open_out(flags.out_path, file);
    out << "queue: " << queue.items.size() << " works\n";
    out << "period: " << num(filled.schedule.period) << " ms (base "
        << num(filled.base_period) << " ms)\n";
    out << "refresh_period: " << filled.refresh_period << " steps\n";
    out << "utilization: " << num(before.utilization) << " -> " << num(after.utilization)
        << "\n";
    for (const auto& entry : filled.staleness)
        out << "staleness: stage " << entry.stage << " layer " << entry.layer << ": "
            << entry.staleness_steps << " steps\n";
    out << "preconditions using prior inverses: " << filled.preconditions_using_prior_inverses
        << "\n";
    if (!flags.trace_path.empty())
        io::emit_trace(filled.schedule, flags.trace_path, inputs.config.stages);
    return kExitOk;
}

int cmd_model(const CommonFlags& flags) {
    const io::Inputs inputs = merge_inputs(flags);
    if (const int rc = check_config(inputs.config, std::cerr)) return rc;
    const CostTable costs = resolve_costs(inputs);
    const PerfReport report = make_report(inputs.config, costs);

    std::ofstream file;
    std::ostream& out = open_out(flags.out_path, file);
    out << "C_f: " << report.c_f << "\n";
    out << "C_b: " << report.c_b << "\n";
    out << "T_pipe: " << num(report.t_pipe) << " ms\n";
    out << "T_bubble: " << num(report.t_bubble) << " ms\n";
    out << "M_pipe: " << report.m_pipe << " bytes\n";
    out << "T_kfac_plus: " << num(report.t_kfac_plus) << " ms\n";
    out << "M_kfac_plus: " << report.m_kfac_plus << " bytes\n";
    out << "utilization: " << num(report.utilization) << "\n";
    out << "throughput: " << num(report.throughput) << " seq/s\n";
    out << "ratio: " << num(report.ratio) << "\n";
    out << "refresh_period: " << report.refresh_period << "\n";
    out << "speedup_vs_skip: " << num(report.speedup_vs_skip) << "\n";
    return kExitOk;
}

int cmd_sweep(const CommonFlags& flags, const std::vector<std::string>& methods,
              const std::vector<int>& depths, const std::vector<int>& factors,
              const std::vector<int>& batch_sizes, bool with_recompute) {
    const io::Inputs inputs = merge_inputs(flags);
    SweepGrid grid;
    for (const auto& name : methods) {
        const auto m = parse_method(name);
        if (!m) throw std::runtime_error("unknown method '" + name + "'");
        grid.methods.push_back(*m);
    }
    grid.depths = depths;
    grid.micro_factors = factors;
    grid.micro_batch_sizes = batch_sizes;
    if (with_recompute) grid.recompute = {false, true};
    grid.arch = inputs.arch.value_or(ArchSpec{});
    grid.device = inputs.device.value_or(DeviceSpec{});
    grid.layers_per_stage = inputs.config.layers_per_stage;

    const auto rows = run_sweep(grid);
    std::ofstream file;
    std::ostream& out = open_out(flags.out_path, file);
    out << sweep_to_csv(rows);
    return kExitOk;
}

// ---- kfac verify --------------------------------------------------------

kfac::Matrix random_matrix(int rows, int cols, kfac::SplitMix64& rng) {
    kfac::Matrix m(rows, cols);
    for (auto& v : m.data()) v = rng.symmetric();
    return m;
}

kfac::Matrix random_spd(int dim, kfac::SplitMix64& rng) {
    const kfac::Matrix r = random_matrix(dim, dim, rng);
    kfac::Matrix m = kfac::matmul(r, r.transposed());
    for (int i = 0; i < dim; ++i) m(i, i) += 1.0;
    return m;
}

double relative_error(const kfac::Matrix& got, const kfac::Matrix& want) {
    const double scale = std::max(want.max_abs(), 1e-300);
    return kfac::max_abs_diff(got, want) / scale;
}

int cmd_kfac_verify() {
    using namespace pipefill::kfac;
    int failures = 0;
    auto report = [&failures](const char* name, bool ok, double value, double bound) {
        std::cout << (ok ? "[ok]   " : "[FAIL] ") << name << ": " << num(value)
                  << " (bound " << num(bound) << ")\n";
        if (!ok) ++failures;
    };

    SplitMix64 rng(20240817);

    {  // rank-1 exactness: |B| = 1 makes the Kronecker factorization exact
        TinyMlp mlp{{random_matrix(3, 4, rng), random_matrix(2, 3, rng)},
                    {Activation::Tanh, Activation::Identity},
                    LossKind::MeanSquaredError};
        Batch batch{random_matrix(4, 1, rng), random_matrix(2, 1, rng)};
        const auto fb = forward_backward(mlp, batch);
        double worst = 0.0;
        for (int l = 0; l < 2; ++l) {
            const auto [a, b] = curvature_factors(fb.tape, l);
            worst = std::max(worst,
                             max_abs_diff(empirical_fisher_block(fb.tape, l), kron(a, b)));
        }
        report("rank-1 fisher == kron(A,B), max abs err", worst < 1e-12, worst, 1e-12);
    }
    {  // vec trick against the dense Kronecker solve
        double worst = 0.0;
        for (int trial = 0; trial < 5; ++trial) {
            const int d_in = 2 + static_cast<int>(rng.next() % 5);
            const int d_out = 2 + static_cast<int>(rng.next() % 5);
            const Matrix a = random_spd(d_in, rng);
            const Matrix b = random_spd(d_out, rng);
            const Matrix g = random_matrix(d_out, d_in, rng);
            const Matrix direct = precondition(g, cholesky_spd_inverse(a, 0.0),
                                               cholesky_spd_inverse(b, 0.0));
            const auto dense = solve_spd(kron(a, b), vec(g));
            const double scale = std::max(direct.max_abs(), 1e-300);
            worst = std::max(worst,
                             max_abs_diff(direct, unvec(dense, d_out, d_in)) / scale);
        }
        report("vec trick vs dense kron solve, rel err", worst < 1e-10, worst, 1e-10);
    }
    {  // kron(A,B)^-1 == kron(A^-1, B^-1)
        const Matrix a = random_spd(3, rng);
        const Matrix b = random_spd(4, rng);
        const Matrix lhs = cholesky_spd_inverse(kron(a, b), 0.0);
        const Matrix rhs = kron(cholesky_spd_inverse(a, 0.0), cholesky_spd_inverse(b, 0.0));
        const double err = relative_error(lhs, rhs);
        report("kron inverse property, rel err", err < 1e-10, err, 1e-10);
    }
    {  // Cholesky inverse residual
        const Matrix m = random_spd(8, rng);
        const double damping = 0.1;
        const Matrix inv = cholesky_spd_inverse(m, damping);
        Matrix damped = m;
        for (int i = 0; i < 8; ++i) damped(i, i) += damping;
        const double residual = max_abs_diff(matmul(damped, inv), Matrix::identity(8));
        report("cholesky inverse residual", residual < 1e-10, residual, 1e-10);
    }
    {  // gradients against central finite differences
        TinyMlp mlp{{random_matrix(4, 3, rng), random_matrix(2, 4, rng)},
                    {Activation::Tanh, Activation::Identity},
                    LossKind::MeanSquaredError};
        Batch batch{random_matrix(3, 5, rng), random_matrix(2, 5, rng)};
        const auto fb = forward_backward(mlp, batch);
        const double eps = 1e-4;
        double worst = 0.0;
        for (std::size_t l = 0; l < mlp.weights.size(); ++l) {
            for (int r = 0; r < mlp.weights[l].rows(); ++r)
                for (int c = 0; c < mlp.weights[l].cols(); ++c) {
                    TinyMlp probe = mlp;
                    probe.weights[l](r, c) += eps;
                    const double up = forward_backward(probe, batch).loss;
                    probe.weights[l](r, c) -= 2 * eps;
                    const double down = forward_backward(probe, batch).loss;
                    const double fd = (up - down) / (2 * eps);
                    const double got = fb.gradients[l](r, c);
                    worst = std::max(worst, std::abs(fd - got) /
                                                std::max({std::abs(fd), std::abs(got), 1e-8}));
                }
        }
        report("gradients vs finite differences, rel err", worst < 1e-5, worst, 1e-5);
    }
    {  // gradient reconstruction from the tape
        TinyMlp mlp{{random_matrix(3, 4, rng)}, {Activation::Identity},
                    LossKind::MeanSquaredError};
        Batch batch{random_matrix(4, 6, rng), random_matrix(3, 6, rng)};
        const auto fb = forward_backward(mlp, batch);
        const Matrix rebuilt =
            matmul(fb.tape.layer_errors[0], fb.tape.layer_inputs[0].transposed());
        const double err = max_abs_diff(rebuilt, fb.gradients[0]);
        report("tape/gradient consistency, max abs err", err < 1e-12, err, 1e-12);
    }
    return failures == 0 ? kExitOk : 1;
}

int cmd_kfac_demo(const kfac::ToyConfig& config, const std::string& out_path) {
    const auto result = kfac::train_toy(config);
    std::ofstream file;
    std::ostream& out = open_out(out_path, file);
    out << "step,loss,staleness\n";
    for (std::size_t i = 0; i < result.losses.size(); ++i) {
        const int staleness =
            i < result.max_staleness.size() ? result.max_staleness[i] : 0;
        out << i << ',' << num(result.losses[i]) << ',' << staleness << '\n';
    }
    if (result.diverged)
        out << "# diverged at step " << result.divergence_step << "\n";
    return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args) {
    CLI::App app{"pipeline schedule simulator, bubble-filling scheduler, and cost model"};
    app.require_subcommand(1);

    CommonFlags sched_flags, assign_flags, model_flags, sweep_flags;
    int horizon = 1;
    bool inversion_parallel = false;
    int horizon_cap = 10;

    auto* sched = app.add_subcommand("schedule", "build a pipeline schedule and report metrics");
    sched_flags.attach(sched, true);
    sched->add_option("--horizon", horizon, "steps to unroll");

    auto* assign = app.add_subcommand("assign", "pack K-FAC work into the pipeline bubbles");
    assign_flags.attach(assign, true);
    assign->add_flag("--inv-parallel", inversion_parallel,
                     "split inversion work across stage replicas");
    assign->add_option("--horizon-cap", horizon_cap, "max steps before infeasibility");

    auto* model = app.add_subcommand("model", "closed-form performance report for one point");
    model_flags.attach(model, false);

    auto* sweep = app.add_subcommand("sweep", "grid sweep, CSV output");
    sweep_flags.attach(sweep, false);
    std::vector<std::string> sweep_methods{"chimera"};
    std::vector<int> sweep_depths{4, 8, 16, 32};
    std::vector<int> sweep_factors{1};
    std::vector<int> sweep_batches{1, 2, 4, 8, 16, 32, 64};
    bool sweep_recompute = false;
    sweep->add_option("--methods", sweep_methods, "methods to sweep")->delimiter(',');
    sweep->add_option("--depths", sweep_depths, "pipeline depths")->delimiter(',');
    sweep->add_option("--micro-factors", sweep_factors, "N_micro = factor * D")->delimiter(',');
    sweep->add_option("--batch-sizes", sweep_batches, "micro-batch sizes")->delimiter(',');
    sweep->add_flag("--with-recompute", sweep_recompute, "sweep recomputation on and off");

    auto* kfac_cmd = app.add_subcommand("kfac", "numeric K-FAC utilities");
    kfac_cmd->require_subcommand(1);
    auto* verify = kfac_cmd->add_subcommand("verify", "run the oracle equivalence suite");
    (void)verify;
    auto* demo = kfac_cmd->add_subcommand("demo", "toy training run, CSV trajectory");
    kfac::ToyConfig toy;
    std::string demo_out;
    std::string demo_optimizer = "kfac";
    demo->add_option("--steps", toy.steps, "training steps");
    demo->add_option("--eta", toy.learning_rate, "learning rate");
    demo->add_option("--damping", toy.damping, "factor damping lambda");
    demo->add_option("--refresh", toy.refresh_period, "steps between factor refreshes");
    demo->add_option("--seed", toy.data_seed, "data seed");
    demo->add_option("--samples", toy.samples, "training samples");
    demo->add_option("--condition", toy.condition_number, "input condition number");
    demo->add_option("--optimizer", demo_optimizer, "kfac or gd");
    demo->add_option("--out", demo_out, "output file");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitValidation;
    }

    try {
        if (sched->parsed()) return cmd_schedule(sched_flags, horizon);
        if (assign->parsed()) return cmd_assign(assign_flags, inversion_parallel, horizon_cap);
        if (model->parsed()) return cmd_model(model_flags);
        if (sweep->parsed())
            return cmd_sweep(sweep_flags, sweep_methods, sweep_depths, sweep_factors,
                             sweep_batches, sweep_recompute);
        if (kfac_cmd->parsed()) {
            if (verify->parsed()) return cmd_kfac_verify();
            if (demo->parsed()) {
                if (demo_optimizer == "gd")
                    toy.optimizer = kfac::ToyOptimizer::GradientDescent;
                else if (demo_optimizer != "kfac")
                    throw std::runtime_error("unknown optimizer '" + demo_optimizer + "'");
                return cmd_kfac_demo(toy, demo_out);
            }
        }
    } catch (const io::ValidationError& e) {
        std::cerr << e.what() << "\n";
        return kExitValidation;
    } catch (const io::ParseError& e) {
        std::cerr << "parse error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const InfeasibleError& e) {
        std::cerr << "infeasible: " << e.what() << "\n";
        return kExitInfeasible;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    }
    return kExitValidation;
}

int run(int argc, const char* const* argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run(args);
}

}  // namespace pipefill::cli
