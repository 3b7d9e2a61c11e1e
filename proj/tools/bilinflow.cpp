/*
 * bilinflow - bilinear identity/expression face models with normalizing flows.
 *
 * File: tools/bilinflow.cpp
 *
 * Copyright 2026 The bilinflow authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#include "bilinflow/pipeline/config.hpp"
#include "bilinflow/pipeline/stages.hpp"

#include "CLI11.hpp"

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

} // namespace

int main(int argc, char** argv)
{
    using namespace bilinflow;

    CLI::App app{"Bilinear infant face model pipeline with normalizing-flow latent spaces"};
    app.fallthrough();
    app.require_subcommand(1, 1);

    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> stage_dir;
    app.add_option("--config", config_path, "INI configuration file")->check(CLI::ExistingFile);
    app.add_option("--seed", seed, "Override the run seed");
    app.add_option("--stage-dir", stage_dir, "Directory holding stage artifacts (default ./stages)");

    const std::vector<std::pair<std::string, std::string>> stages = {
        {"synth", "Generate the synthetic infant family, expression bank and AU data"},
        {"build-map", "Build the barycentric map from the bank topology to the infant topology"},
        {"detect-aus", "Train spectral AU detectors and detect AUs of the source expressions"},
        {"transfer", "Transfer detected expressions onto the neutral infant meshes"},
        {"assemble", "Assemble the identity x expression shape tensor"},
        {"hosvd", "Fit the bilinear model by truncated HOSVD"},
        {"train-flows", "Train identity and expression normalizing flows"},
        {"sample", "Draw latent samples from the fitted Gaussian priors"},
        {"interpolate", "Interpolate between training expressions in flow space"},
        {"project", "Project samples onto the chi-squared hyperellipsoid and decode them"},
        {"fit", "Fit the model to the held-out targets"},
        {"report", "Aggregate fit errors and export meshes"}};
    for (const auto& [name, help] : stages)
        app.add_subcommand(name, help);

    try
    {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e)
    {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }
    const std::string stage = app.get_subcommands().front()->get_name();

    try
    {
        pipeline::PipelineConfig cfg = config_path.empty() ? pipeline::PipelineConfig{} : pipeline::load_config(config_path);
        if (seed)
            cfg.seed = *seed;
        if (stage_dir)
            cfg.stage_dir = *stage_dir;
        const auto results = pipeline::run_stage(cfg, stage);
        std::cout << stage << ": " << results.dump() << '\n';
        return kExitOk;
    } catch (const pipeline::ConfigError& e)
    {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const pipeline::MissingArtifact& e)
    {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e)
    {
        std::cerr << "error: " << stage << " failed: " << e.what() << '\n';
        return kExitRuntime;
    }
}
