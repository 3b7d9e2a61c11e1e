/*
 * bilinflow - bilinear identity/expression face models with normalizing flows.
 *
 * File: include/bilinflow/pipeline/config.hpp
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
#pragma once

#ifndef BILINFLOW_PIPELINE_CONFIG_HPP
#define BILINFLOW_PIPELINE_CONFIG_HPP

#include "bilinflow/core/error.hpp"
#include "bilinflow/fitting/fit.hpp"
#include "bilinflow/flow/train.hpp"
#include "bilinflow/latent/latent_code.hpp"
#include "bilinflow/pipeline/synth.hpp"

#include "boost/property_tree/ini_parser.hpp"
#include "boost/property_tree/ptree.hpp"
#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

namespace bilinflow {
namespace pipeline {

/// Thrown for unreadable or invalid configuration; the CLI maps it to exit code 1.
class ConfigError : public Error
{
public:
    using Error::Error;
};

struct PipelineConfig
{
    std::uint64_t seed = 1;
    std::filesystem::path stage_dir = "stages";

    SyntheticFamilySpec synth;

    double map_max_distance_fraction = 0.05;

    int au_tau = 12;
    double au_svm_c = 1.0;

    int transfer_ensemble = 40; ///< kappa
    double transfer_intensity = 1.0; ///< delta

    bool augment = true;
    std::string assemble_source = "transfer"; ///< transfer | family

    std::string rank_selection = "variance"; ///< variance | parallel | fixed
    double variance_fraction = 0.95;
    int d_id = 0; ///< Used when rank_selection = fixed.
    int d_ex = 0;
    int parallel_permutations = 200;

    int flow_layers = 6;
    int flow_hidden = 64;
    double flow_scale_bound = 3.0;
    flow::TrainConfig flow_train;

    int sample_count = 10;
    latent::SamplingPreset preset;

    int interpolation_steps = 4; ///< nu increments of 1 / steps.

    fitting::FitConfig fit;
};

namespace detail {

inline flow::FrobeniusMode parse_frobenius_mode(const std::string& s, std::vector<std::string>& problems)
{
    if (s == "composed")
        return flow::FrobeniusMode::composed;
    if (s == "per_layer")
        return flow::FrobeniusMode::per_layer;
    problems.push_back("flow.frobenius_mode must be 'composed' or 'per_layer', got '" + s + "'");
    return flow::FrobeniusMode::composed;
}

inline const char* to_string(flow::FrobeniusMode m)
{
    return m == flow::FrobeniusMode::composed ? "composed" : "per_layer";
}

} // namespace detail

namespace detail {

inline void throw_problems(const std::vector<std::string>& problems)
{
    if (problems.empty())
        return;
    std::string msg = "invalid configuration (" + std::to_string(problems.size()) + " problem" +
                      (problems.size() == 1 ? "" : "s") + "):";
    for (const auto& p : problems)
        msg += "\n  - " + p;
    throw ConfigError(msg);
}

} // namespace detail

/// Every violated constraint of `c`, one message each.
inline std::vector<std::string> validation_problems(const PipelineConfig& c)
{
    std::vector<std::string> problems;
    try
    {
        validate(c.synth);
    } catch (const InvalidArgument& e)
    {
        problems.push_back(e.what());
    }
    try
    {
        fitting::validate(c.fit);
    } catch (const InvalidArgument& e)
    {
        problems.push_back(e.what());
    }
    if (c.synth.n_targets < 1)
        problems.push_back("synth.n_targets must be positive");
    if (!(c.map_max_distance_fraction > 0.0))
        problems.push_back("map.max_distance_fraction must be positive");
    if (c.au_tau < 1 || !(c.au_svm_c > 0.0))
        problems.push_back("aus.tau and aus.svm_c must be positive");
    if (c.transfer_ensemble < 1 || c.transfer_ensemble > c.synth.bank_subjects)
        problems.push_back("transfer.ensemble must lie in [1, synth.bank_subjects]");
    if (!(c.transfer_intensity >= 0.0))
        problems.push_back("transfer.intensity must be non-negative");
    if (c.assemble_source != "transfer" && c.assemble_source != "family")
        problems.push_back("assemble.source must be 'transfer' or 'family'");
    if (c.rank_selection != "variance" && c.rank_selection != "parallel" && c.rank_selection != "fixed")
        problems.push_back("hosvd.rank_selection must be 'variance', 'parallel' or 'fixed'");
    if (!(c.variance_fraction > 0.0 && c.variance_fraction <= 1.0))
        problems.push_back("hosvd.variance_fraction must lie in (0, 1]");
    if (c.rank_selection == "fixed" && (c.d_id < 2 || c.d_ex < 2))
        problems.push_back("hosvd.d_id and hosvd.d_ex must be at least 2 with fixed rank selection");
    if (c.parallel_permutations < 1)
        problems.push_back("hosvd.permutations must be positive");
    if (c.flow_layers < 1 || c.flow_hidden < 1 || !(c.flow_scale_bound > 0.0))
        problems.push_back("flow.layers, flow.hidden and flow.scale_bound must be positive");
    if (c.flow_train.epochs < 1 || c.flow_train.batch_size < 1 || !(c.flow_train.learning_rate > 0.0) ||
        !(c.flow_train.frobenius_weight >= 0.0))
        problems.push_back("flow.epochs, flow.batch_size and flow.learning_rate must be positive");
    if (c.sample_count < 1)
        problems.push_back("sample.count must be positive");
    if (!(c.preset.rho > 0.0 && c.preset.rho < 1.0) || c.preset.zeta_ex < 1 || c.preset.zeta_id < 1 ||
        !(c.preset.beta_ex > 0.0) || !(c.preset.beta_id > 0.0))
        problems.push_back("sample preset needs rho in (0, 1), zeta >= 1 and beta > 0");
    if (c.interpolation_steps < 1)
        problems.push_back("interpolate.steps must be positive");
    return problems;
}

/// Lists every problem at once; throws ConfigError when there is any.
inline void validate(const PipelineConfig& c) { detail::throw_problems(validation_problems(c)); }

/**
 * Reads an INI file with sections [run], [synth], [map], [aus], [transfer],
 * [assemble], [hosvd], [flow], [sample], [interpolate] and [fit]. Missing
 * keys keep their defaults; unknown keys, malformed values and invalid
 * settings are reported together.
 */
inline PipelineConfig config_from_ptree(const boost::property_tree::ptree& tree)
{
    PipelineConfig c;
    std::vector<std::string> problems;
    std::set<std::string> known;

    auto get = [&](const std::string& key, auto& target) {
        known.insert(key);
        using T = std::decay_t<decltype(target)>;
        const auto node = tree.get_child_optional(boost::property_tree::ptree::path_type(key, '.'));
        if (!node)
            return;
        const std::string text = node->get_value<std::string>();
        if constexpr (std::is_same_v<T, bool>)
        {
            if (text == "true" || text == "1" || text == "yes")
                target = true;
            else if (text == "false" || text == "0" || text == "no")
                target = false;
            else
                problems.push_back(key + ": expected a boolean, got '" + text + "'");
        } else if constexpr (std::is_same_v<T, std::string> || std::is_same_v<T, std::filesystem::path>)
        {
            target = text;
        } else
        {
            const auto value = node->get_value_optional<T>();
            if (!value)
                problems.push_back(key + ": cannot parse '" + text + "'");
            else
                target = *value;
        }
    };

    get("run.seed", c.seed);
    get("run.stage_dir", c.stage_dir);

    get("synth.n_id", c.synth.n_id);
    get("synth.n_ex", c.synth.n_ex);
    get("synth.n_vertices", c.synth.n_vertices);
    get("synth.identity_amplitude", c.synth.identity_amplitude);
    get("synth.expression_amplitude", c.synth.expression_amplitude);
    get("synth.au_width", c.synth.au_width);
    get("synth.noise", c.synth.noise);
    get("synth.separable", c.synth.separable);
    get("synth.num_aus", c.synth.num_aus);
    get("synth.bank_subjects", c.synth.bank_subjects);
    get("synth.bank_vertices", c.synth.bank_vertices);
    get("synth.au_train", c.synth.au_train);
    get("synth.au_test", c.synth.au_test);
    get("synth.n_targets", c.synth.n_targets);

    get("map.max_distance_fraction", c.map_max_distance_fraction);
    get("aus.tau", c.au_tau);
    get("aus.svm_c", c.au_svm_c);
    get("transfer.ensemble", c.transfer_ensemble);
    get("transfer.intensity", c.transfer_intensity);
    get("assemble.augment", c.augment);
    get("assemble.source", c.assemble_source);

    get("hosvd.rank_selection", c.rank_selection);
    get("hosvd.variance_fraction", c.variance_fraction);
    get("hosvd.d_id", c.d_id);
    get("hosvd.d_ex", c.d_ex);
    get("hosvd.permutations", c.parallel_permutations);

    get("flow.layers", c.flow_layers);
    get("flow.hidden", c.flow_hidden);
    get("flow.scale_bound", c.flow_scale_bound);
    get("flow.epochs", c.flow_train.epochs);
    get("flow.batch_size", c.flow_train.batch_size);
    get("flow.learning_rate", c.flow_train.learning_rate);
    get("flow.dequantize", c.flow_train.dequantize);
    get("flow.frobenius_weight", c.flow_train.frobenius_weight);
    std::string mode = detail::to_string(c.flow_train.frobenius_mode);
    get("flow.frobenius_mode", mode);
    c.flow_train.frobenius_mode = detail::parse_frobenius_mode(mode, problems);

    get("sample.count", c.sample_count);
    get("sample.rho", c.preset.rho);
    get("sample.zeta_ex", c.preset.zeta_ex);
    get("sample.beta_ex", c.preset.beta_ex);
    get("sample.zeta_id", c.preset.zeta_id);
    get("sample.beta_id", c.preset.beta_id);
    get("interpolate.steps", c.interpolation_steps);

    get("fit.gamma1", c.fit.gamma1);
    get("fit.gamma2", c.fit.gamma2);
    get("fit.max_outer_iterations", c.fit.max_outer_iterations);
    get("fit.inner_iterations", c.fit.inner_iterations);
    get("fit.tolerance", c.fit.tolerance);
    get("fit.align", c.fit.align);

    for (const auto& [section, body] : tree)
    {
        for (const auto& [key, value] : body)
        {
            const std::string full = section + "." + key;
            if (!known.count(full))
                problems.push_back("unknown key '" + full + "'");
        }
        if (body.empty() && !body.data().empty())
            problems.push_back("key '" + section + "' outside any section");
    }
    for (auto& p : validation_problems(c))
        problems.push_back(std::move(p));
    detail::throw_problems(problems);
    return c;
}

inline PipelineConfig load_config(const std::filesystem::path& path)
{
    boost::property_tree::ptree tree;
    try
    {
        boost::property_tree::read_ini(path.string(), tree);
    } catch (const boost::property_tree::ini_parser_error& e)
    {
        throw ConfigError("cannot read config: " + std::string(e.what()));
    }
    return config_from_ptree(tree);
}

/// Makes every stochastic setting derive from the single run seed.
inline void propagate_seed(PipelineConfig& c)
{
    c.synth.seed = c.seed;
    c.flow_train.seed = c.seed;
}

/// Full effective configuration, echoed into every stage manifest.
inline nlohmann::ordered_json config_to_json(const PipelineConfig& c)
{
    nlohmann::ordered_json j;
    j["run"] = {{"seed", c.seed}};
    j["synth"] = {{"n_id", c.synth.n_id},
                  {"n_ex", c.synth.n_ex},
                  {"n_vertices", c.synth.n_vertices},
                  {"identity_amplitude", c.synth.identity_amplitude},
                  {"expression_amplitude", c.synth.expression_amplitude},
                  {"au_width", c.synth.au_width},
                  {"noise", c.synth.noise},
                  {"separable", c.synth.separable},
                  {"num_aus", c.synth.num_aus},
                  {"bank_subjects", c.synth.bank_subjects},
                  {"bank_vertices", c.synth.bank_vertices},
                  {"au_train", c.synth.au_train},
                  {"au_test", c.synth.au_test},
                  {"n_targets", c.synth.n_targets}};
    j["map"] = {{"max_distance_fraction", c.map_max_distance_fraction}};
    j["aus"] = {{"tau", c.au_tau}, {"svm_c", c.au_svm_c}};
    j["transfer"] = {{"ensemble", c.transfer_ensemble}, {"intensity", c.transfer_intensity}};
    j["assemble"] = {{"augment", c.augment}, {"source", c.assemble_source}};
    j["hosvd"] = {{"rank_selection", c.rank_selection},
                  {"variance_fraction", c.variance_fraction},
                  {"d_id", c.d_id},
                  {"d_ex", c.d_ex},
                  {"permutations", c.parallel_permutations}};
    j["flow"] = {{"layers", c.flow_layers},
                 {"hidden", c.flow_hidden},
                 {"scale_bound", c.flow_scale_bound},
                 {"epochs", c.flow_train.epochs},
                 {"batch_size", c.flow_train.batch_size},
                 {"learning_rate", c.flow_train.learning_rate},
                 {"dequantize", c.flow_train.dequantize},
                 {"frobenius_weight", c.flow_train.frobenius_weight},
                 {"frobenius_mode", detail::to_string(c.flow_train.frobenius_mode)}};
    j["sample"] = {{"count", c.sample_count},     {"rho", c.preset.rho},         {"zeta_ex", c.preset.zeta_ex},
                   {"beta_ex", c.preset.beta_ex}, {"zeta_id", c.preset.zeta_id}, {"beta_id", c.preset.beta_id}};
    j["interpolate"] = {{"steps", c.interpolation_steps}};
    j["fit"] = {{"gamma1", c.fit.gamma1},
                {"gamma2", c.fit.gamma2},
                {"max_outer_iterations", c.fit.max_outer_iterations},
                {"inner_iterations", c.fit.inner_iterations},
                {"tolerance", c.fit.tolerance},
                {"align", c.fit.align}};
    return j;
}

} // namespace pipeline
} // namespace bilinflow

#endif /* BILINFLOW_PIPELINE_CONFIG_HPP */
