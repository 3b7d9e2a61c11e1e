/*
 * bilinflow - bilinear identity/expression face models with normalizing flows.
 *
 * File: include/bilinflow/pipeline/synth.hpp
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

#ifndef BILINFLOW_PIPELINE_SYNTH_HPP
#define BILINFLOW_PIPELINE_SYNTH_HPP

#include "bilinflow/core/error.hpp"
#include "bilinflow/geometry/mesh.hpp"
#include "bilinflow/geometry/primitives.hpp"
#include "bilinflow/geometry/symmetry.hpp"
#include "bilinflow/transfer/expression_bank.hpp"

#include "Eigen/Core"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <set>
#include <string>
#include <vector>

namespace bilinflow {
namespace pipeline {

/// Parameters of the synthetic head family used in place of scan data.
struct SyntheticFamilySpec
{
    int n_id = 5;
    int n_ex = 6;                      ///< Expression 0 is neutral.
    int n_vertices = 500;              ///< Minimum vertex count of the infant topology.
    double identity_amplitude = 0.06;  ///< Relative size of the per-identity shape warps.
    double expression_amplitude = 0.12; ///< Relative size of an action-unit bump.
    double au_width = 0.18;            ///< Gaussian width of an action unit in direction space.
    double noise = 0.0;                ///< Vertex noise, relative to the mean head radius.
    bool separable = false;            ///< Expression offsets independent of identity (exactly additive family).
    int num_aus = 8;
    int bank_subjects = 40;
    int bank_vertices = 400;
    int au_train = 40;
    int au_test = 20;
    int n_targets = 20;                ///< Held-out identities for fitting.
    std::uint64_t seed = 1;
};

inline void validate(const SyntheticFamilySpec& s)
{
    std::vector<std::string> problems;
    if (s.n_id < 1 || s.n_ex < 1)
        problems.push_back("n_id and n_ex must be positive");
    if (s.n_vertices < 50 || s.bank_vertices < 50)
        problems.push_back("vertex counts must be at least 50");
    if (s.num_aus < 1 || s.bank_subjects < 1 || s.au_train < 2 || s.au_test < 1 || s.n_targets < 0)
        problems.push_back("AU, subject and sample counts must be positive");
    if (!(s.identity_amplitude >= 0.0) || !(s.expression_amplitude >= 0.0) || !(s.noise >= 0.0) || !(s.au_width > 0.0))
        problems.push_back("amplitudes and noise must be non-negative");
    if (s.n_ex - 1 > (1 << std::min(s.num_aus, 20)) - 1)
        problems.push_back("too many expressions for the number of AUs");
    if (!problems.empty())
    {
        std::string msg = "invalid synthetic family spec:";
        for (const auto& p : problems)
            msg += " " + p + ";";
        throw InvalidArgument(msg);
    }
}

/// Localised radial bump on the unit sphere of directions.
struct ActionUnit
{
    Eigen::Vector3d centre; ///< Unit direction.
    double width = 0.18;    ///< Gaussian width in direction space.
    double amplitude = 0.0; ///< Signed, relative to the mean head radius.

    double weight(const Eigen::Vector3d& dir) const
    {
        return std::exp(-(dir - centre).squaredNorm() / (2.0 * width * width));
    }
};

/// Smooth multiplicative radial warp plus per-axis scaling of the base head.
struct IdentityShape
{
    Eigen::Vector3d axis_scale = Eigen::Vector3d::Ones();
    Eigen::VectorXd coefficients; ///< Over shape_basis().

    static Eigen::VectorXd shape_basis(const Eigen::Vector3d& d)
    {
        Eigen::VectorXd b(9);
        b << d.x(), d.y(), d.z(), d.x() * d.y(), d.y() * d.z(), d.x() * d.z(), d.x() * d.x() - d.y() * d.y(),
            3.0 * d.z() * d.z() - 1.0, d.x() * d.x() * d.z();
        return b;
    }

    double radial_factor(const Eigen::Vector3d& dir) const { return 1.0 + shape_basis(dir).dot(coefficients); }
};

struct SyntheticFamily
{
    SyntheticFamilySpec spec;
    Eigen::Vector3d head_radii{62.0, 78.0, 70.0}; ///< Millimetres.
    double mean_radius = 70.0;
    std::vector<ActionUnit> aus;
    std::vector<std::vector<int>> expression_aus; ///< [e]; empty for the neutral expression.
    std::vector<IdentityShape> identities;

    geometry::EllipsoidGrid grid;
    geometry::Mesh base;            ///< Infant topology at the base head shape, landmarks set.
    geometry::SymmetryMap symmetry;
    std::vector<std::vector<geometry::Mesh>> meshes; ///< [i][e].
    std::vector<int> expression_region; ///< Infant vertices where some used AU has weight > 0.05.

    geometry::EllipsoidGrid bank_grid;
    geometry::Mesh bank_template;   ///< Bank topology at the base head shape.
    geometry::Mesh infant_fitted;   ///< Infant base mesh pre-aligned to the bank template surface.
    transfer::ExpressionBank bank;

    std::vector<Eigen::Matrix3Xd> au_meshes; ///< Bank topology; first au_train are training samples.
    std::vector<std::vector<int>> au_labels; ///< [sample][au] in {0, 1}.
    std::vector<Eigen::Matrix3Xd> exemplars; ///< Bank topology, one unseen subject per expression e >= 1.

    std::vector<geometry::Mesh> targets;     ///< Infant topology, unseen identities.
    std::vector<int> target_expression;      ///< Expression index of each target.
};

namespace detail {

/// Fixed facial layout for the first eight AUs (x, y on the face plane).
inline Eigen::Vector3d au_centre(int a, std::mt19937_64& rng)
{
    static const double layout[8][2] = {{-0.35, 0.45}, {0.35, 0.45},   {0.0, 0.05},  {0.0, -0.35},
                                        {-0.25, -0.35}, {0.25, -0.35}, {-0.45, -0.05}, {0.45, -0.05}};
    double x, y;
    if (a < 8)
    {
        x = layout[a][0];
        y = layout[a][1];
    } else
    {
        std::uniform_real_distribution<double> u(-0.5, 0.5);
        x = u(rng);
        y = u(rng);
    }
    return Eigen::Vector3d(x, y, std::sqrt(std::max(0.0, 1.0 - x * x - y * y))).normalized();
}

inline IdentityShape random_identity(std::mt19937_64& rng, double amplitude)
{
    std::normal_distribution<double> n(0.0, 1.0);
    IdentityShape s;
    for (int k = 0; k < 3; ++k)
        s.axis_scale(k) = 1.0 + amplitude * n(rng);
    s.coefficients.resize(9);
    for (int k = 0; k < 9; ++k)
        s.coefficients(k) = amplitude / 3.0 * n(rng);
    return s;
}

/// Vertices of identity `s` (and optional AU activations) on a grid of directions.
inline Eigen::Matrix3Xd head_vertices(const SyntheticFamily& f, const geometry::EllipsoidGrid& grid,
                                      const IdentityShape& s, const std::vector<double>& activation)
{
    Eigen::Matrix3Xd v(3, grid.num_vertices());
    for (int i = 0; i < grid.num_vertices(); ++i)
    {
        const Eigen::Vector3d d = geometry::ellipsoid_direction(grid, i);
        const double radial = s.radial_factor(d);
        v.col(i) = radial * s.axis_scale.cwiseProduct(f.head_radii).cwiseProduct(d);
        double bump = 0.0;
        for (std::size_t a = 0; a < activation.size(); ++a)
        {
            if (activation[a] != 0.0)
                bump += activation[a] * f.aus[a].amplitude * f.aus[a].weight(d);
        }
        if (bump != 0.0)
        {
            v.col(i) += (f.spec.separable ? 1.0 : radial) * bump * f.mean_radius * d;
        }
    }
    return v;
}

inline std::vector<double> activation_of(const std::vector<int>& aus, int num_aus)
{
    std::vector<double> act(static_cast<std::size_t>(num_aus), 0.0);
    for (int a : aus)
        act[static_cast<std::size_t>(a)] = 1.0;
    return act;
}

inline std::vector<int> nearest_vertices(const geometry::EllipsoidGrid& grid, const std::vector<ActionUnit>& aus)
{
    std::vector<int> out;
    for (const auto& au : aus)
    {
        int best = 0;
        double best_d = 1e300;
        for (int i = 0; i < grid.num_vertices(); ++i)
        {
            const double d = (geometry::ellipsoid_direction(grid, i) - au.centre).squaredNorm();
            if (d < best_d)
            {
                best_d = d;
                best = i;
            }
        }
        out.push_back(best);
    }
    return out;
}

} // namespace detail

/**
 * Deterministic synthetic data set:
 *  - an infant-topology identity x expression mesh grid (expression 0 neutral,
 *    expression e > 0 a fixed set of AU bumps shared by all identities);
 *  - an expression bank on a second, coarser topology with one blendshape per AU;
 *  - AU-labelled bank-topology meshes for training and testing AU detectors.
 */
inline SyntheticFamily synth_family(const SyntheticFamilySpec& spec)
{
    validate(spec);
    SyntheticFamily f;
    f.spec = spec;
    f.mean_radius = f.head_radii.mean();
    // Independent streams so that changing one count does not reshuffle the others.
    std::mt19937_64 au_rng(spec.seed * 0x9E3779B97F4A7C15ULL + 1);
    std::mt19937_64 id_rng(spec.seed * 0x9E3779B97F4A7C15ULL + 2);
    std::mt19937_64 bank_rng(spec.seed * 0x9E3779B97F4A7C15ULL + 3);
    std::mt19937_64 sample_rng(spec.seed * 0x9E3779B97F4A7C15ULL + 4);
    std::mt19937_64 noise_rng(spec.seed * 0x9E3779B97F4A7C15ULL + 5);
    std::mt19937_64 target_rng(spec.seed * 0x9E3779B97F4A7C15ULL + 6);

    std::uniform_real_distribution<double> amp(0.5, 1.0);
    std::bernoulli_distribution sign(0.7);
    for (int a = 0; a < spec.num_aus; ++a)
    {
        ActionUnit au;
        au.centre = detail::au_centre(a, au_rng);
        au.width = spec.au_width;
        au.amplitude = (sign(au_rng) ? 1.0 : -1.0) * amp(au_rng) * spec.expression_amplitude;
        f.aus.push_back(au);
    }
    // Distinct AU sets of size 1..3 for the non-neutral expressions.
    f.expression_aus.push_back({});
    std::set<std::vector<int>> used;
    std::uniform_int_distribution<int> pick(0, spec.num_aus - 1);
    std::uniform_int_distribution<int> size(1, std::min(3, spec.num_aus));
    while (static_cast<int>(f.expression_aus.size()) < spec.n_ex)
    {
        std::set<int> s;
        const int k = size(au_rng);
        while (static_cast<int>(s.size()) < k)
            s.insert(pick(au_rng));
        std::vector<int> v(s.begin(), s.end());
        if (used.insert(v).second)
            f.expression_aus.push_back(v);
    }

    f.grid = geometry::EllipsoidGrid::for_vertex_count(spec.n_vertices);
    f.base = geometry::make_ellipsoid(f.grid, f.head_radii);
    f.base.landmarks = detail::nearest_vertices(f.grid, f.aus);
    f.symmetry = geometry::ellipsoid_symmetry(f.grid);
    std::normal_distribution<double> noise(0.0, spec.noise * f.mean_radius);
    for (int i = 0; i < spec.n_id; ++i)
    {
        f.identities.push_back(detail::random_identity(id_rng, spec.identity_amplitude));
        std::vector<geometry::Mesh> row;
        for (int e = 0; e < spec.n_ex; ++e)
        {
            geometry::Mesh m = f.base;
            m.vertices = detail::head_vertices(f, f.grid, f.identities.back(),
                                               detail::activation_of(f.expression_aus[static_cast<std::size_t>(e)],
                                                                     spec.num_aus));
            if (spec.noise > 0.0)
            {
                for (Eigen::Index k = 0; k < m.vertices.size(); ++k)
                    m.vertices(k) += noise(noise_rng);
            }
            row.push_back(std::move(m));
        }
        f.meshes.push_back(std::move(row));
    }
    std::set<int> used_aus;
    for (const auto& s : f.expression_aus)
        used_aus.insert(s.begin(), s.end());
    for (int v = 0; v < f.grid.num_vertices(); ++v)
    {
        const Eigen::Vector3d d = geometry::ellipsoid_direction(f.grid, v);
        for (int a : used_aus)
        {
            if (f.aus[static_cast<std::size_t>(a)].weight(d) > 0.05)
            {
                f.expression_region.push_back(v);
                break;
            }
        }
    }

    f.bank_grid = geometry::EllipsoidGrid::for_vertex_count(spec.bank_vertices);
    f.bank_template = geometry::make_ellipsoid(f.bank_grid, f.head_radii);
    f.bank_template.landmarks = detail::nearest_vertices(f.bank_grid, f.aus);
    f.infant_fitted = f.base;
    f.bank.faces = f.bank_template.faces;
    for (int a = 0; a < spec.num_aus; ++a)
        f.bank.aus.push_back("AU" + std::to_string(a));
    for (int s = 0; s < spec.bank_subjects; ++s)
    {
        const IdentityShape shape = detail::random_identity(bank_rng, spec.identity_amplitude);
        f.bank.subjects.push_back("S" + std::to_string(s));
        f.bank.neutral.push_back(detail::head_vertices(f, f.bank_grid, shape, {}));
        std::vector<Eigen::Matrix3Xd> shapes;
        for (int a = 0; a < spec.num_aus; ++a)
            shapes.push_back(detail::head_vertices(f, f.bank_grid, shape, detail::activation_of({a}, spec.num_aus)));
        f.bank.blendshapes.push_back(std::move(shapes));
    }
    for (int e = 1; e < spec.n_ex; ++e)
        f.bank.combinations.push_back({"E" + std::to_string(e), f.expression_aus[static_cast<std::size_t>(e)]});

    std::bernoulli_distribution coin(0.5);
    std::normal_distribution<double> au_noise(0.0, 0.002 * f.mean_radius);
    for (int k = 0; k < spec.au_train + spec.au_test; ++k)
    {
        const IdentityShape shape = detail::random_identity(sample_rng, spec.identity_amplitude);
        std::vector<double> act(static_cast<std::size_t>(spec.num_aus), 0.0);
        std::vector<int> labels(static_cast<std::size_t>(spec.num_aus), 0);
        for (int a = 0; a < spec.num_aus; ++a)
        {
            if (coin(sample_rng))
            {
                labels[static_cast<std::size_t>(a)] = 1;
                act[static_cast<std::size_t>(a)] = 1.0;
            }
        }
        Eigen::Matrix3Xd v = detail::head_vertices(f, f.bank_grid, shape, act);
        for (Eigen::Index i = 0; i < v.size(); ++i)
            v(i) += au_noise(sample_rng);
        f.au_meshes.push_back(std::move(v));
        f.au_labels.push_back(std::move(labels));
    }
    const IdentityShape exemplar_subject = detail::random_identity(target_rng, spec.identity_amplitude);
    for (int e = 1; e < spec.n_ex; ++e)
    {
        f.exemplars.push_back(detail::head_vertices(
            f, f.bank_grid, exemplar_subject,
            detail::activation_of(f.expression_aus[static_cast<std::size_t>(e)], spec.num_aus)));
    }

    std::normal_distribution<double> target_noise(0.0, spec.noise * f.mean_radius);
    for (int t = 0; t < spec.n_targets; ++t)
    {
        const IdentityShape shape = detail::random_identity(target_rng, spec.identity_amplitude);
        const int e = t % spec.n_ex;
        geometry::Mesh m = f.base;
        m.vertices = detail::head_vertices(
            f, f.grid, shape, detail::activation_of(f.expression_aus[static_cast<std::size_t>(e)], spec.num_aus));
        if (spec.noise > 0.0)
        {
            for (Eigen::Index k = 0; k < m.vertices.size(); ++k)
                m.vertices(k) += target_noise(target_rng);
        }
        f.targets.push_back(std::move(m));
        f.target_expression.push_back(e);
    }
    return f;
}

} // namespace pipeline
} // namespace bilinflow

#endif /* BILINFLOW_PIPELINE_SYNTH_HPP */
