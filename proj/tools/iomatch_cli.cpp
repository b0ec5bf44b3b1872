// Batch front-end. Verbs:
//   run --config <path> [--out <dir>] [--seeds a,b,c]
//   report --out <dir>
//   gradcheck
// Exit codes: 0 success, 1 config error, 2 training abort, 3 gradcheck
// failure. The IOMATCH_OUT environment variable overrides the configured
// output directory; --out overrides both.

#include <cstdlib>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "iomatch/experiment.hpp"
#include "iomatch/gradcheck.hpp"

namespace {

int run_command(const std::string& config_path, const std::string& out_override,
                const std::string& seeds_override) {
    iomatch::ExperimentSpec spec = iomatch::parse_config(config_path);
    if (const char* env = std::getenv("IOMATCH_OUT"); env && *env) spec.out_dir = env;
    if (!out_override.empty()) spec.out_dir = out_override;
    if (!seeds_override.empty()) spec.seeds = iomatch::parse_seed_list(seeds_override);
    const int status = iomatch::run_experiment(spec);
    if (status == 0) {
        std::cout << "wrote " << spec.out_dir << "/summary.json" << std::endl;
        iomatch::emit_report(spec.out_dir);
    }
    return status;
}

int gradcheck_command() {
    const auto results = iomatch::run_gradient_suite();
    bool ok = true;
    for (const auto& c : results) {
        const bool pass = c.max_rel_error < iomatch::kGradCheckTolerance;
        ok = ok && pass;
        std::cout << (pass ? "ok   " : "FAIL ") << c.name << "  max_rel_error=" << c.max_rel_error
                  << std::endl;
    }
    std::cout << (ok ? "gradcheck passed" : "gradcheck FAILED") << std::endl;
    return ok ? 0 : 3;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"open-set semi-supervised learning harness"};
    app.require_subcommand(1);

    std::string config_path, out_dir, seeds;
    auto* run = app.add_subcommand("run", "train the configured experiment");
    run->add_option("--config", config_path, "experiment configuration file")->required();
    run->add_option("--out", out_dir, "output directory override");
    run->add_option("--seeds", seeds, "comma-separated seed list override");

    std::string report_dir;
    auto* report = app.add_subcommand("report", "print the summary table for an output directory");
    report->add_option("--out", report_dir, "output directory containing summary.json")->required();

    auto* gradcheck = app.add_subcommand("gradcheck", "verify loss gradients by finite differences");

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) return run_command(config_path, out_dir, seeds);
        if (report->parsed()) return iomatch::emit_report(report_dir);
        if (gradcheck->parsed()) return gradcheck_command();
    } catch (const iomatch::TrainingAbort& e) {
        std::cerr << "training aborted: " << e.what() << std::endl;
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    }
    return 0;
}
