// Recipe-driven pipeline runner. Exit codes: 0 success, 1 configuration
// error, 2 runtime failure.

#include <CLI11.hpp>

#include <iostream>
#include <optional>

#include "tadlab/runner.hpp"

int main(int argc, char** argv) {
    CLI::App app{"tadlab: adapter supply-chain attack and defense laboratory"};
    std::string config_path;
    std::optional<uint64_t> seed_override;
    std::optional<std::string> out_override;
    app.add_option("--config", config_path, "recipe file (see recipes/)")->required();
    app.add_option("--seed", seed_override, "override [run] seed");
    app.add_option("--out", out_override, "override [run] out directory");
    CLI11_PARSE(app, argc, argv);

    try {
        auto config = tadlab::ExperimentConfig::parse_file(config_path, seed_override, out_override);
        return tadlab::run_experiment(config);
    } catch (const tadlab::ValidationError& e) {
        std::cerr << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
