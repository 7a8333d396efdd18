// flute-sim: run or validate an experiment configuration.
//
//   flute-sim run <config> [--out DIR] [--threads N]
//   flute-sim validate <config>
//
// Thread count: --threads, else $FLUTE_SIM_THREADS, else hardware concurrency.
// Exit codes: 0 ok, 1 configuration error, 2 runtime error.

#include "flute/runner.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

namespace {

std::string read_text(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw flute::ConfigError("", "cannot read config file " + path);
    }
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

unsigned default_threads() {
    if (const char* env = std::getenv("FLUTE_SIM_THREADS")) {
        try {
            const int n = std::stoi(env);
            if (n >= 1) {
                return static_cast<unsigned>(n);
            }
        } catch (const std::exception&) {
        }
        std::cerr << "flute-sim: ignoring invalid FLUTE_SIM_THREADS='" << env << "'\n";
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Federated representation learning simulator"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir;
    unsigned threads = 0;
    auto* run = app.add_subcommand("run", "Run an experiment and write traces plus summary.json");
    run->add_option("config", config_path, "Configuration file")->required();
    run->add_option("--out", out_dir, "Output directory (overrides the config's `output`)");
    run->add_option("--threads", threads, "Worker threads for per-client work")->check(CLI::PositiveNumber);

    auto* validate = app.add_subcommand("validate", "Check a configuration without running it");
    validate->add_option("config", config_path, "Configuration file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    flute::ExperimentConfig cfg;
    try {
        cfg = flute::parse_config(read_text(config_path));
    } catch (const flute::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    }
    for (const auto& w : cfg.warnings) {
        std::cerr << "warning: " << w << "\n";
    }

    if (*validate) {
        std::cout << "ok: method=" << flute::method_name(cfg.method) << " seeds=" << cfg.seeds.size() << "\n";
        return 0;
    }

    flute::RunOptions opts;
    if (!out_dir.empty()) {
        opts.output_dir = out_dir;
    }
    opts.exec.threads = threads > 0 ? threads : default_threads();
    const auto report = flute::run_experiment(cfg, opts);
    for (const auto& f : report.files) {
        std::cout << f.string() << "\n";
    }
    if (report.exit_code != 0) {
        std::cerr << "error: " << report.message << "\n";
    }
    return report.exit_code;
}
