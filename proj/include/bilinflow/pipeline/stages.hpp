/*
 * bilinflow - bilinear identity/expression face models with normalizing flows.
 *
 * File: include/bilinflow/pipeline/stages.hpp
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

#ifndef BILINFLOW_PIPELINE_STAGES_HPP
#define BILINFLOW_PIPELINE_STAGES_HPP

#include "bilinflow/bilinear/bilinear_model.hpp"
#include "bilinflow/bilinear/parallel_analysis.hpp"
#include "bilinflow/bilinear/shape_tensor.hpp"
#include "bilinflow/core/error.hpp"
#include "bilinflow/correspondence/barycentric_map.hpp"
#include "bilinflow/fitting/fit.hpp"
#include "bilinflow/fitting/report.hpp"
#include "bilinflow/flow/real_nvp.hpp"
#include "bilinflow/flow/train.hpp"
#include "bilinflow/geometry/mesh_io.hpp"
#include "bilinflow/geometry/symmetry.hpp"
#include "bilinflow/latent/chi2.hpp"
#include "bilinflow/latent/latent_code.hpp"
#include "bilinflow/latent/prior.hpp"
#include "bilinflow/pipeline/artifacts.hpp"
#include "bilinflow/pipeline/config.hpp"
#include "bilinflow/pipeline/synth.hpp"
#include "bilinflow/spectral/au_detection.hpp"
#include "bilinflow/spectral/patch.hpp"
#include "bilinflow/transfer/expression_bank.hpp"
#include "bilinflow/transfer/expression_transfer.hpp"

#include "Eigen/Core"
#include "json.hpp"

#include <algorithm>
#include <array>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

namespace bilinflow {
namespace pipeline {

/// Stage names in dependency order.
inline const std::vector<std::string>& stage_names()
{
    static const std::vector<std::string> names = {"synth",  "build-map",   "detect-aus", "transfer",
                                                   "assemble", "hosvd",     "train-flows", "sample",
                                                   "interpolate", "project", "fit",        "report"};
    return names;
}

namespace detail {

using Json = nlohmann::ordered_json;

inline std::string expression_name(int e) { return "E" + std::to_string(e); }
inline std::string family_file(int i, int e) { return "family/id" + std::to_string(i) + "_" + expression_name(e) + ".obj"; }
inline std::string target_name(int t) { return "target_" + std::to_string(t); }

inline geometry::Mesh mesh_with(const std::vector<geometry::Triangle>& faces, Eigen::Matrix3Xd vertices)
{
    geometry::Mesh m;
    m.faces = faces;
    m.vertices = std::move(vertices);
    return m;
}

inline Json vector_json(const Eigen::VectorXd& v) { return Json(std::vector<double>(v.data(), v.data() + v.size())); }

/// Whitespace-token lines of a text file, comments and blanks skipped.
inline std::vector<std::vector<std::string>> read_table(const std::filesystem::path& path)
{
    std::vector<std::vector<std::string>> rows;
    geometry::detail::for_each_line(read_file(path), [&](std::string_view line, std::size_t) {
        const auto tokens = geometry::detail::split_ws(line);
        if (!tokens.empty() && tokens[0].front() != '#')
            rows.emplace_back(tokens.begin(), tokens.end());
        return true;
    });
    return rows;
}

inline Eigen::VectorXd read_column(const std::filesystem::path& path)
{
    std::vector<double> values;
    geometry::detail::for_each_line(read_file(path), [&](std::string_view line, std::size_t line_no) {
        const auto tokens = geometry::detail::split_ws(line);
        if (!tokens.empty())
            values.push_back(geometry::detail::parse_double(tokens[0], line_no));
        return true;
    });
    return Eigen::Map<const Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size()));
}

inline std::string prior_to_text(const latent::GaussianPrior& p)
{
    std::ostringstream out;
    out.precision(17);
    out << "mean " << p.dim();
    for (Eigen::Index i = 0; i < p.dim(); ++i)
        out << ' ' << p.mean(i);
    out << "\ncovariance " << p.dim() << ' ' << p.dim();
    for (Eigen::Index j = 0; j < p.dim(); ++j)
        for (Eigen::Index i = 0; i < p.dim(); ++i)
            out << ' ' << p.covariance(i, j);
    out << '\n';
    return out.str();
}

inline int clamp_rank(int d, Eigen::Index n) { return std::clamp(d, 2, static_cast<int>(n)); }

struct Trained
{
    bilinear::BilinearModel model;
    flow::Flow identity;
    flow::Flow expression;
};

inline Trained load_trained(StageRun& run)
{
    Trained t;
    t.model = bilinear::load_model(run.input("hosvd", "model.bin", "model"));
    t.identity = flow::load_flow(run.input("train-flows", "flow_identity.bin", "identity flow"));
    t.expression = flow::load_flow(run.input("train-flows", "flow_expression.bin", "expression flow"));
    return t;
}

/// Post-flow codes of the training identities / expressions (columns).
inline Eigen::MatrixXd training_codes(const flow::Flow& f, const Eigen::MatrixXd& u)
{
    return flow::forward(f, u.transpose()).z;
}

/// Shell radius: the configured beta when its dof matches the latent dimension, otherwise the chi-squared value.
inline std::pair<double, std::string> shell_radius(int zeta, double beta, double rho, Eigen::Index dim)
{
    if (zeta == static_cast<int>(dim))
        return {beta, "preset"};
    return {latent::chi2_critical(static_cast<double>(dim), rho), "chi2"};
}

inline std::vector<latent::LatentCode> pool_of(const Eigen::MatrixXd& u, latent::Space space)
{
    std::vector<latent::LatentCode> pool;
    for (Eigen::Index r = 0; r < u.rows(); ++r)
        pool.push_back({u.row(r).transpose(), space, latent::Coords::pre_flow});
    return pool;
}

} // namespace detail

// ---------------------------------------------------------------------------

inline detail::Json stage_synth(const PipelineConfig& cfg, StageRun& run)
{
    const SyntheticFamily f = synth_family(cfg.synth);
    geometry::save_mesh(f.base, run.output("infant/base.obj"));
    geometry::save_landmarks(f.base.landmarks, run.output("infant/base.lmk"));
    geometry::save_symmetry(f.symmetry, run.output("infant/base.sym"));
    geometry::save_mesh(f.infant_fitted, run.output("infant/fitted.obj"));
    for (int i = 0; i < cfg.synth.n_id; ++i)
        for (int e = 0; e < cfg.synth.n_ex; ++e)
            geometry::save_mesh(f.meshes[static_cast<std::size_t>(i)][static_cast<std::size_t>(e)],
                                run.output(detail::family_file(i, e)));

    transfer::save_bank(f.bank, run.output("bank/bank.txt").parent_path());
    geometry::save_mesh(f.bank_template, run.output("bank_template/template.obj"));
    geometry::save_landmarks(f.bank_template.landmarks, run.output("bank_template/template.lmk"), f.bank.aus);

    std::ostringstream labels;
    labels << "# sample split au_0 ... au_" << cfg.synth.num_aus - 1 << '\n';
    for (std::size_t k = 0; k < f.au_meshes.size(); ++k)
    {
        const std::string name = "sample_" + std::to_string(k);
        geometry::save_mesh(detail::mesh_with(f.bank.faces, f.au_meshes[k]), run.output("au/" + name + ".obj"));
        labels << name << (static_cast<int>(k) < cfg.synth.au_train ? " train" : " test");
        for (int l : f.au_labels[k])
            labels << ' ' << l;
        labels << '\n';
    }
    write_file_atomic(run.output("au/labels.txt"), labels.str());
    for (int e = 1; e < cfg.synth.n_ex; ++e)
        geometry::save_mesh(detail::mesh_with(f.bank.faces, f.exemplars[static_cast<std::size_t>(e - 1)]),
                            run.output("au/exemplar_" + detail::expression_name(e) + ".obj"));

    std::ostringstream target_labels;
    target_labels << "# target expression\n";
    for (std::size_t t = 0; t < f.targets.size(); ++t)
    {
        const std::string name = detail::target_name(static_cast<int>(t));
        geometry::save_mesh(f.targets[t], run.output("targets/" + name + ".obj"));
        target_labels << name << ' ' << detail::expression_name(f.target_expression[t]) << '\n';
    }
    write_file_atomic(run.output("targets/labels.txt"), target_labels.str());

    detail::Json truth;
    truth["head_radii_mm"] = detail::vector_json(f.head_radii);
    detail::Json aus = detail::Json::array();
    for (const auto& au : f.aus)
        aus.push_back({{"centre", detail::vector_json(au.centre)}, {"width", au.width}, {"amplitude", au.amplitude}});
    truth["action_units"] = aus;
    detail::Json expressions = detail::Json::array();
    for (int e = 0; e < cfg.synth.n_ex; ++e)
        expressions.push_back({{"label", detail::expression_name(e)},
                               {"aus", f.expression_aus[static_cast<std::size_t>(e)]}});
    truth["expressions"] = expressions;
    detail::Json identities = detail::Json::array();
    for (int i = 0; i < cfg.synth.n_id; ++i)
    {
        const auto& s = f.identities[static_cast<std::size_t>(i)];
        identities.push_back({{"label", "id" + std::to_string(i)},
                              {"axis_scale", detail::vector_json(s.axis_scale)},
                              {"radial_coefficients", detail::vector_json(s.coefficients)}});
    }
    truth["identities"] = identities;
    detail::Json grid = detail::Json::array();
    for (int i = 0; i < cfg.synth.n_id; ++i)
        for (int e = 0; e < cfg.synth.n_ex; ++e)
            grid.push_back({{"file", detail::family_file(i, e)}, {"identity", i}, {"expression", e}});
    truth["family"] = grid;
    write_file_atomic(run.output("ground_truth.json"), truth.dump(2) + "\n");

    return {{"infant_vertices", f.base.num_vertices()},
            {"bank_vertices", f.bank_template.num_vertices()},
            {"family_meshes", cfg.synth.n_id * cfg.synth.n_ex},
            {"au_samples", f.au_meshes.size()},
            {"targets", f.targets.size()}};
}

inline detail::Json stage_build_map(const PipelineConfig& cfg, StageRun& run)
{
    const geometry::Mesh source = geometry::load_mesh(run.input("synth", "bank_template/template.obj", "bank template"));
    const geometry::Mesh fitted = geometry::load_mesh(run.input("synth", "infant/fitted.obj", "fitted infant"));
    correspondence::MapOptions options;
    options.max_distance_fraction = cfg.map_max_distance_fraction;
    const correspondence::BarycentricMap map = correspondence::build_map(source, fitted, options);
    correspondence::save_map(map, run.output("map.bin"));
    const Eigen::Matrix3Xd mapped = correspondence::apply_map(map, source.vertices);
    const double residual = (mapped - fitted.vertices).colwise().norm().maxCoeff();
    return {{"source_vertices", map.source_vertex_count},
            {"target_vertices", map.target_vertex_count},
            {"max_residual_mm", residual}};
}

inline detail::Json stage_detect_aus(const PipelineConfig& cfg, StageRun& run)
{
    geometry::Mesh tmpl = geometry::load_mesh(run.input("synth", "bank_template/template.obj", "bank template"));
    tmpl.landmarks = geometry::load_landmarks(run.input("synth", "bank_template/template.lmk", "landmark"));
    const auto rows = detail::read_table(run.input("synth", "au/labels.txt", "AU label"));
    const auto spectra = spectral::patch_spectra(tmpl, tmpl.landmarks, cfg.au_tau);
    const int num_aus = static_cast<int>(tmpl.landmarks.size());

    std::vector<Eigen::VectorXd> train_x, test_x;
    std::vector<std::vector<int>> train_y, test_y;
    for (const auto& row : rows)
    {
        if (row.size() != static_cast<std::size_t>(2 + num_aus))
            throw ParseError("AU labels: row '" + row[0] + "' needs " + std::to_string(num_aus) + " labels");
        const geometry::Mesh m = geometry::load_mesh(run.input("synth", "au/" + row[0] + ".obj", "AU sample"));
        std::vector<int> y;
        for (int a = 0; a < num_aus; ++a)
            y.push_back(row[static_cast<std::size_t>(2 + a)] == "1" ? 1 : -1);
        (row[1] == "train" ? train_x : test_x).push_back(spectral::au_features(spectra, m.vertices));
        (row[1] == "train" ? train_y : test_y).push_back(y);
    }
    if (train_x.size() < 2 || test_x.empty())
        throw InvalidArgument("AU detection needs at least 2 training and 1 test samples");

    spectral::ClassifierBank bank{cfg.au_tau, tmpl.landmarks, {}};
    Eigen::MatrixXd x(bank.feature_dimension(), static_cast<Eigen::Index>(train_x.size()));
    for (std::size_t k = 0; k < train_x.size(); ++k)
        x.col(static_cast<Eigen::Index>(k)) = train_x[k];
    std::ostringstream accuracy;
    accuracy.precision(10);
    accuracy << "au,train_accuracy,test_accuracy\n";
    detail::Json per_au = detail::Json::array();
    double worst = 1.0;
    for (int a = 0; a < num_aus; ++a)
    {
        std::vector<int> y;
        for (const auto& labels : train_y)
            y.push_back(labels[static_cast<std::size_t>(a)]);
        bank.classifiers.push_back(spectral::train_au_svm("AU" + std::to_string(a), x, y, cfg.au_svm_c));
        const auto& c = bank.classifiers.back();
        auto score = [&](const std::vector<Eigen::VectorXd>& xs, const std::vector<std::vector<int>>& ys) {
            int ok = 0;
            for (std::size_t k = 0; k < xs.size(); ++k)
                ok += ((c.decision(xs[k]) > 0.0) == (ys[k][static_cast<std::size_t>(a)] > 0)) ? 1 : 0;
            return static_cast<double>(ok) / static_cast<double>(xs.size());
        };
        const double train_acc = score(train_x, train_y);
        const double test_acc = score(test_x, test_y);
        worst = std::min(worst, test_acc);
        accuracy << c.au_id << ',' << train_acc << ',' << test_acc << '\n';
        per_au.push_back({{"au", c.au_id}, {"test_accuracy", test_acc}});
    }
    spectral::save_bank(bank, run.output("classifiers.txt"));
    write_file_atomic(run.output("accuracy.csv"), accuracy.str());

    std::ostringstream combos;
    detail::Json detected = detail::Json::array();
    for (int e = 1; e < cfg.synth.n_ex; ++e)
    {
        const std::string name = detail::expression_name(e);
        const geometry::Mesh m = geometry::load_mesh(run.input("synth", "au/exemplar_" + name + ".obj", "AU exemplar"));
        const auto on = spectral::detect_aus(m.vertices, spectra, bank);
        std::vector<int> aus;
        for (int a = 0; a < num_aus; ++a)
            if (on[static_cast<std::size_t>(a)])
                aus.push_back(a);
        combos << name;
        for (int a : aus)
            combos << ' ' << a;
        combos << '\n';
        detected.push_back({{"expression", name}, {"aus", aus}});
    }
    write_file_atomic(run.output("combinations.txt"), combos.str());
    return {{"per_au", per_au}, {"min_test_accuracy", worst}, {"detected", detected}};
}

inline detail::Json stage_transfer(const PipelineConfig& cfg, StageRun& run)
{
    const transfer::ExpressionBank bank = transfer::load_bank(run.input_directory("synth", "bank", "expression bank"));
    const correspondence::BarycentricMap map = correspondence::load_map(run.input("build-map", "map.bin", "map"));
    const auto combos = detail::read_table(run.input("detect-aus", "combinations.txt", "detected AU"));
    std::ostringstream subjects;
    int flipped = 0;
    int transferred = 0;
    for (const auto& row : combos)
    {
        const int e = std::stoi(row[0].substr(1));
        std::vector<int> aus(static_cast<std::size_t>(bank.num_aus()), 0);
        for (std::size_t k = 1; k < row.size(); ++k)
            aus.at(static_cast<std::size_t>(std::stoi(row[k]))) = 1;
        const std::vector<int> neutral(aus.size(), 0);
        transfer::TransferOptions options;
        options.ensemble = cfg.transfer_ensemble;
        options.intensity = cfg.transfer_intensity;
        // Same ensemble for every identity of one expression.
        options.seed = cfg.seed * 1000003ULL + static_cast<std::uint64_t>(e);
        for (int i = 0; i < cfg.synth.n_id; ++i)
        {
            const geometry::Mesh infant = geometry::load_mesh(run.input("synth", detail::family_file(i, 0), "neutral infant"));
            const transfer::TransferResult r = transfer::transfer_expression(infant, neutral, aus, bank, map, options);
            flipped += transfer::count_flipped_faces(infant, r.mesh.vertices);
            geometry::save_mesh(r.mesh, run.output("id" + std::to_string(i) + "_" + row[0] + ".obj"));
            if (i == 0)
            {
                subjects << row[0];
                for (int s : r.subjects)
                    subjects << ' ' << bank.subjects[static_cast<std::size_t>(s)];
                subjects << '\n';
            }
            ++transferred;
        }
    }
    write_file_atomic(run.output("subjects.txt"), subjects.str());
    return {{"transferred_meshes", transferred}, {"flipped_faces", flipped}};
}

inline detail::Json stage_assemble(const PipelineConfig& cfg, StageRun& run)
{
    std::vector<std::vector<geometry::Mesh>> grid(static_cast<std::size_t>(cfg.synth.n_id));
    std::vector<std::string> labels;
    for (int e = 0; e < cfg.synth.n_ex; ++e)
        labels.push_back(detail::expression_name(e));
    for (int i = 0; i < cfg.synth.n_id; ++i)
    {
        auto& row = grid[static_cast<std::size_t>(i)];
        for (int e = 0; e < cfg.synth.n_ex; ++e)
        {
            if (e == 0 || cfg.assemble_source == "family")
                row.push_back(geometry::load_mesh(run.input("synth", detail::family_file(i, e), "family mesh")));
            else
                row.push_back(geometry::load_mesh(run.input(
                    "transfer", "id" + std::to_string(i) + "_" + detail::expression_name(e) + ".obj", "transferred expression")));
        }
    }
    geometry::SymmetryMap symmetry;
    if (cfg.augment)
        symmetry = geometry::load_symmetry(run.input("synth", "infant/base.sym", "symmetry"), grid[0][0].num_vertices());
    const bilinear::ShapeTensor tensor = bilinear::assemble_tensor(grid, cfg.augment ? &symmetry : nullptr, cfg.augment, labels);
    bilinear::save_tensor(tensor, run.output("tensor.bin"));
    geometry::save_mesh(geometry::with_vertices(grid[0][0], grid[0][0].vertices), run.output("topology.obj"));
    return {{"vertex_rows", tensor.rows()}, {"n_id", tensor.n_id}, {"n_ex", tensor.n_ex}, {"source", cfg.assemble_source}};
}

inline detail::Json stage_hosvd(const PipelineConfig& cfg, StageRun& run)
{
    const bilinear::ShapeTensor tensor = bilinear::load_tensor(run.input("assemble", "tensor.bin", "tensor"));
    const geometry::Mesh topology = geometry::load_mesh(run.input("assemble", "topology.obj", "topology"));
    const bilinear::BilinearModel full = bilinear::hosvd(tensor, tensor.n_id, tensor.n_ex);
    int d_id = cfg.d_id;
    int d_ex = cfg.d_ex;
    if (cfg.rank_selection == "variance")
    {
        d_id = bilinear::variance_truncation(full.sigma_id, cfg.variance_fraction);
        d_ex = bilinear::variance_truncation(full.sigma_ex, cfg.variance_fraction);
    } else if (cfg.rank_selection == "parallel")
    {
        d_id = bilinear::parallel_analysis(bilinear::unfold_identity(tensor), cfg.parallel_permutations, cfg.seed).components;
        d_ex = bilinear::parallel_analysis(bilinear::unfold_expression(tensor), cfg.parallel_permutations, cfg.seed + 1)
                   .components;
    }
    // Coupling layers need at least two dimensions.
    d_id = detail::clamp_rank(d_id, tensor.n_id);
    d_ex = detail::clamp_rank(d_ex, tensor.n_ex);
    bilinear::BilinearModel model = bilinear::hosvd(tensor, d_id, d_ex);
    model.faces = topology.faces;
    model.seed = cfg.seed;
    model.augmented = cfg.augment;
    bilinear::save_model(model, run.output("model.bin"));

    std::ostringstream spectrum;
    spectrum.precision(17);
    spectrum << "mode,index,sigma,cumulative_fraction\n";
    for (const auto& [mode, sigma] : {std::pair<const char*, const Eigen::VectorXd*>{"identity", &full.sigma_id},
                                      std::pair<const char*, const Eigen::VectorXd*>{"expression", &full.sigma_ex}})
    {
        const double total = sigma->squaredNorm();
        double acc = 0.0;
        for (Eigen::Index k = 0; k < sigma->size(); ++k)
        {
            acc += (*sigma)(k) * (*sigma)(k);
            spectrum << mode << ',' << k << ',' << (*sigma)(k) << ',' << (total > 0 ? acc / total : 1.0) << '\n';
        }
    }
    write_file_atomic(run.output("spectrum.csv"), spectrum.str());
    return {{"d_id", d_id}, {"d_ex", d_ex}, {"rank_selection", cfg.rank_selection}};
}

inline detail::Json stage_train_flows(const PipelineConfig& cfg, StageRun& run)
{
    const bilinear::BilinearModel model = bilinear::load_model(run.input("hosvd", "model.bin", "model"));
    detail::Json out;
    const std::array<std::pair<const char*, const Eigen::MatrixXd*>, 2> spaces{
        {{"identity", &model.u_id}, {"expression", &model.u_ex}}};
    std::uint64_t offset = 0;
    for (const auto& [name, u] : spaces)
    {
        flow::TrainConfig tc = cfg.flow_train;
        tc.seed = cfg.seed + offset;
        const flow::Flow init =
            flow::make_flow(static_cast<int>(u->cols()), cfg.flow_layers, cfg.flow_hidden, tc.seed, cfg.flow_scale_bound);
        const flow::TrainResult r = flow::train(init, u->transpose(), tc);
        flow::save_flow(r.flow, run.output(std::string("flow_") + name + ".bin"));
        flow::save_history(r.history, run.output(std::string("loss_") + name + ".csv"));
        out[name] = {{"dim", u->cols()},
                     {"samples", u->rows()},
                     {"final_nll", r.history.back().nll},
                     {"final_frobenius", r.history.back().frobenius}};
        ++offset;
    }
    return out;
}

inline detail::Json stage_sample(const PipelineConfig& cfg, StageRun& run)
{
    const detail::Trained t = detail::load_trained(run);
    detail::Json out;
    std::uint64_t offset = 0;
    for (const auto space : {latent::Space::identity, latent::Space::expression})
    {
        const bool id = space == latent::Space::identity;
        const flow::Flow& f = id ? t.identity : t.expression;
        const latent::GaussianPrior prior = latent::fit_prior(detail::training_codes(f, id ? t.model.u_id : t.model.u_ex));
        const std::string name = latent::to_string(space);
        write_file_atomic(run.output("prior_" + name + ".txt"), detail::prior_to_text(prior));
        const Eigen::MatrixXd draws = latent::sample_prior(prior, cfg.sample_count, cfg.seed * 7919ULL + offset);
        for (Eigen::Index k = 0; k < draws.cols(); ++k)
            latent::save_code({draws.col(k), space, latent::Coords::post_flow},
                              run.output(name + "_" + std::to_string(k) + ".txt"));
        out[name] = {{"dim", prior.dim()}, {"samples", draws.cols()}};
        ++offset;
    }
    return out;
}

inline detail::Json stage_project(const PipelineConfig& cfg, StageRun& run)
{
    const detail::Trained t = detail::load_trained(run);
    const latent::GaussianPrior prior_id = latent::fit_prior(detail::training_codes(t.identity, t.model.u_id));
    const latent::GaussianPrior prior_ex = latent::fit_prior(detail::training_codes(t.expression, t.model.u_ex));
    const auto [beta_id, source_id] = detail::shell_radius(cfg.preset.zeta_id, cfg.preset.beta_id, cfg.preset.rho, prior_id.dim());
    const auto [beta_ex, source_ex] = detail::shell_radius(cfg.preset.zeta_ex, cfg.preset.beta_ex, cfg.preset.rho, prior_ex.dim());
    const auto pool_id = detail::pool_of(t.model.u_id, latent::Space::identity);
    const auto pool_ex = detail::pool_of(t.model.u_ex, latent::Space::expression);

    std::ostringstream table;
    table.precision(17);
    table << "sample,id_mahalanobis,ex_mahalanobis,id_nearest,id_distance,ex_nearest,ex_distance\n";
    for (int k = 0; k < cfg.sample_count; ++k)
    {
        const std::string suffix = std::to_string(k) + ".txt";
        const latent::LatentCode raw_id = latent::load_code(run.input("sample", "identity_" + suffix, "identity sample"));
        const latent::LatentCode raw_ex = latent::load_code(run.input("sample", "expression_" + suffix, "expression sample"));
        const latent::LatentCode z_id{latent::project_to_hyperellipsoid(raw_id.values, prior_id, beta_id),
                                      latent::Space::identity, latent::Coords::post_flow};
        const latent::LatentCode z_ex{latent::project_to_hyperellipsoid(raw_ex.values, prior_ex, beta_ex),
                                      latent::Space::expression, latent::Coords::post_flow};
        const latent::LatentCode w_id{fitting::detail::to_w(&t.identity, z_id.values), latent::Space::identity,
                                      latent::Coords::pre_flow};
        const latent::LatentCode w_ex{fitting::detail::to_w(&t.expression, z_ex.values), latent::Space::expression,
                                      latent::Coords::pre_flow};
        latent::save_code(z_id, run.output("identity_" + suffix));
        latent::save_code(z_ex, run.output("expression_" + suffix));
        geometry::save_mesh(detail::mesh_with(t.model.faces, geometry::as_points(bilinear::reconstruct(t.model, w_id.values, w_ex.values))),
                            run.output("sample_" + std::to_string(k) + ".obj"));
        const auto [nn_id, d_id] = latent::nearest_neighbor(w_id, pool_id);
        const auto [nn_ex, d_ex] = latent::nearest_neighbor(w_ex, pool_ex);
        table << k << ',' << latent::mahalanobis(prior_id, z_id.values) << ',' << latent::mahalanobis(prior_ex, z_ex.values)
              << ',' << t.model.identity_labels[nn_id] << ',' << d_id << ',' << t.model.expression_labels[nn_ex] << ','
              << d_ex << '\n';
    }
    write_file_atomic(run.output("projection.csv"), table.str());
    return {{"beta_identity", beta_id},
            {"beta_identity_source", source_id},
            {"beta_expression", beta_ex},
            {"beta_expression_source", source_ex},
            {"rho", cfg.preset.rho}};
}

/// Max over vertices of the displacement between consecutive meshes of a path, and the bound it must stay under.
struct PathSmoothness
{
    double max_step = 0.0;
    double average_step = 0.0; ///< Endpoint displacement divided by the number of steps.
    bool smooth = false;
};

inline PathSmoothness path_smoothness(const std::vector<Eigen::VectorXd>& path)
{
    auto max_disp = [](const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
        return geometry::as_points(a - b).colwise().norm().maxCoeff();
    };
    PathSmoothness s;
    for (std::size_t k = 1; k < path.size(); ++k)
        s.max_step = std::max(s.max_step, max_disp(path[k], path[k - 1]));
    s.average_step = max_disp(path.back(), path.front()) / static_cast<double>(path.size() - 1);
    s.smooth = s.max_step < 4.0 * s.average_step;
    return s;
}

inline detail::Json stage_interpolate(const PipelineConfig& cfg, StageRun& run)
{
    const detail::Trained t = detail::load_trained(run);
    const Eigen::MatrixXd z_ex = detail::training_codes(t.expression, t.model.u_ex);
    const Eigen::VectorXd w_id = t.model.u_id.row(0).transpose();
    detail::Json pairs = detail::Json::array();
    bool all_smooth = true;
    for (Eigen::Index a = 0; a + 1 < t.model.u_ex.rows(); ++a)
    {
        const latent::LatentCode from{z_ex.col(a), latent::Space::expression, latent::Coords::post_flow};
        const latent::LatentCode to{z_ex.col(a + 1), latent::Space::expression, latent::Coords::post_flow};
        const std::string pair = t.model.expression_labels[static_cast<std::size_t>(a)] + "_" +
                                 t.model.expression_labels[static_cast<std::size_t>(a + 1)];
        std::vector<Eigen::VectorXd> path;
        for (int k = 0; k <= cfg.interpolation_steps; ++k)
        {
            const double nu = static_cast<double>(k) / cfg.interpolation_steps;
            const latent::LatentCode code = latent::interpolate(from, to, nu);
            path.push_back(bilinear::reconstruct(t.model, w_id, fitting::detail::to_w(&t.expression, code.values)));
            const std::string stem = pair + "_step" + std::to_string(k);
            latent::save_code(code, run.output(stem + ".txt"));
            geometry::save_mesh(detail::mesh_with(t.model.faces, geometry::as_points(path.back())), run.output(stem + ".obj"));
        }
        const PathSmoothness s = path_smoothness(path);
        all_smooth = all_smooth && s.smooth;
        pairs.push_back({{"pair", pair}, {"max_step_mm", s.max_step}, {"average_step_mm", s.average_step}, {"smooth", s.smooth}});
    }
    return {{"pairs", pairs}, {"all_smooth", all_smooth}};
}

inline detail::Json stage_fit(const PipelineConfig& cfg, StageRun& run)
{
    const detail::Trained t = detail::load_trained(run);
    const auto labels = detail::read_table(run.input("synth", "targets/labels.txt", "target label"));
    const fitting::FlowPair flows{&t.identity, &t.expression};
    detail::Json per_target = detail::Json::array();
    int converged = 0;
    for (const auto& row : labels)
    {
        const std::string& name = row[0];
        const geometry::Mesh target = geometry::load_mesh(run.input("synth", "targets/" + name + ".obj", "fit target"));
        const fitting::FitResult r = fitting::fit(t.model, flows, target, cfg.fit);
        write_file_atomic(run.output(name + "_report.txt"), fitting::fit_report(name, r));
        write_file_atomic(run.output(name + "_errors.txt"), fitting::per_vertex_error_text(r.per_vertex_error));
        geometry::save_mesh(r.reconstruction, run.output(name + "_reconstruction.obj"));
        latent::save_code(r.z_id, run.output(name + "_identity.txt"));
        latent::save_code(r.z_ex, run.output(name + "_expression.txt"));
        const fitting::ErrorSummary s = fitting::summarize(r.per_vertex_error);
        converged += r.converged ? 1 : 0;
        per_target.push_back({{"target", name}, {"mean_mm", s.mean}, {"max_mm", s.max}, {"converged", r.converged}});
    }
    return {{"targets", per_target}, {"converged", converged}};
}

inline detail::Json stage_report(const PipelineConfig&, StageRun& run)
{
    const auto labels = detail::read_table(run.input("synth", "targets/labels.txt", "target label"));
    std::vector<fitting::TargetErrors> errors;
    for (const auto& row : labels)
    {
        const std::string& name = row[0];
        const auto path = run.input("fit", name + "_errors.txt", "fit result");
        errors.push_back({name, detail::read_column(path)});
        write_file_atomic(run.output("per_vertex/" + name + ".txt"), read_file(path));
        write_file_atomic(run.output("meshes/" + name + "_reconstruction.obj"),
                          read_file(run.input("fit", name + "_reconstruction.obj", "fit result")));
    }
    const std::string csv = fitting::aggregate_csv(errors);
    write_file_atomic(run.output("aggregate.csv"), csv);

    int exported = 0;
    for (const char* producer : {"project", "interpolate"})
    {
        if (!run.has_stage(producer))
            continue;
        const auto outputs = hashes_from_json(load_manifest(run.root() / producer / "manifest.json").at("outputs"));
        for (const auto& [file, sha] : outputs)
        {
            if (std::filesystem::path(file).extension() != ".obj")
                continue;
            const std::string rel = file.substr(std::string(producer).size() + 1);
            write_file_atomic(run.output(std::string("meshes/") + producer + "/" + rel),
                              read_file(run.input(producer, rel, producer)));
            ++exported;
        }
    }
    std::vector<double> means;
    for (const auto& e : errors)
        means.push_back(fitting::summarize(e.errors).mean);
    const fitting::ErrorSummary all = fitting::summarize(Eigen::Map<const Eigen::VectorXd>(means.data(), static_cast<Eigen::Index>(means.size())));
    return {{"targets", errors.size()}, {"mean_of_means_mm", all.mean}, {"std_of_means_mm", all.stddev}, {"exported_meshes", exported}};
}

/**
 * Runs one stage against `cfg.stage_dir`. Validates the configuration first,
 * propagates the run seed, and returns the stage's summary (also stored in
 * its manifest).
 */
inline nlohmann::ordered_json run_stage(PipelineConfig cfg, const std::string& stage)
{
    propagate_seed(cfg);
    validate(cfg);
    using Fn = std::function<detail::Json(const PipelineConfig&, StageRun&)>;
    static const std::vector<std::pair<std::string, Fn>> table = {
        {"synth", stage_synth},         {"build-map", stage_build_map}, {"detect-aus", stage_detect_aus},
        {"transfer", stage_transfer},   {"assemble", stage_assemble},   {"hosvd", stage_hosvd},
        {"train-flows", stage_train_flows}, {"sample", stage_sample},   {"interpolate", stage_interpolate},
        {"project", stage_project},     {"fit", stage_fit},             {"report", stage_report}};
    const auto it = std::find_if(table.begin(), table.end(), [&](const auto& p) { return p.first == stage; });
    if (it == table.end())
        throw ConfigError("unknown stage '" + stage + "'");
    std::filesystem::create_directories(cfg.stage_dir);
    StageRun run(cfg.stage_dir, stage, cfg.seed, config_to_json(cfg));
    run.results() = it->second(cfg, run);
    run.commit();
    return run.results();
}

} // namespace pipeline
} // namespace bilinflow

#endif /* BILINFLOW_PIPELINE_STAGES_HPP */
