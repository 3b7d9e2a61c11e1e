/*
 * bilinflow - bilinear identity/expression face models with normalizing flows.
 *
 * File: include/bilinflow/latent/latent_code.hpp
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

#ifndef BILINFLOW_LATENT_LATENT_CODE_HPP
#define BILINFLOW_LATENT_LATENT_CODE_HPP

#include "bilinflow/core/binary_io.hpp"
#include "bilinflow/core/error.hpp"
#include "bilinflow/geometry/mesh_io.hpp"

#include "Eigen/Core"

#include <cmath>
#include <filesystem>
#include <limits>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace bilinflow {
namespace latent {

enum class Space
{
    identity,
    expression
};

enum class Coords
{
    pre_flow, ///< w: bilinear coefficients.
    post_flow ///< z: flow latent.
};

inline const char* to_string(Space s) { return s == Space::identity ? "identity" : "expression"; }
inline const char* to_string(Coords c) { return c == Coords::pre_flow ? "w" : "z"; }

struct LatentCode
{
    Eigen::VectorXd values;
    Space space = Space::identity;
    Coords coords = Coords::pre_flow;
};

namespace detail {

inline void check_same_tags(const LatentCode& a, const LatentCode& b, const char* op)
{
    if (a.space != b.space || a.coords != b.coords)
    {
        throw InvalidArgument(std::string(op) + ": latent codes differ in tags (" + to_string(a.space) + "/" +
                              to_string(a.coords) + " vs " + to_string(b.space) + "/" + to_string(b.coords) + ")");
    }
    if (a.values.size() != b.values.size())
    {
        throw InvalidArgument(std::string(op) + ": latent codes differ in dimension");
    }
}

} // namespace detail

/// (1 - nu) a + nu b; nu = 0 and nu = 1 return the endpoints exactly.
inline LatentCode interpolate(const LatentCode& a, const LatentCode& b, double nu)
{
    detail::check_same_tags(a, b, "interpolate");
    if (!(nu >= 0.0 && nu <= 1.0))
    {
        throw InvalidArgument("interpolate: nu must lie in [0, 1]");
    }
    LatentCode out = a;
    if (nu == 0.0)
        return out;
    if (nu == 1.0)
        return b;
    out.values = (1.0 - nu) * a.values + nu * b.values;
    return out;
}

/// Euclidean nearest code in `pool`; ties resolve to the lowest index.
inline std::pair<std::size_t, double> nearest_neighbor(const LatentCode& query, const std::vector<LatentCode>& pool)
{
    if (pool.empty())
    {
        throw InvalidArgument("nearest_neighbor: empty pool");
    }
    std::size_t best = 0;
    double best_d2 = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < pool.size(); ++i)
    {
        detail::check_same_tags(query, pool[i], "nearest_neighbor");
        const double d2 = (pool[i].values - query.values).squaredNorm();
        if (d2 < best_d2)
        {
            best_d2 = d2;
            best = i;
        }
    }
    return {best, std::sqrt(best_d2)};
}

/// Confidence level and (dof, beta) pairs used when sampling on hyperellipsoid shells.
struct SamplingPreset
{
    double rho = 0.99;
    int zeta_ex = 7;
    double beta_ex = 4.07;
    int zeta_id = 26;
    double beta_id = 6.01;
};

// ---------------------------------------------------------------------------
// Text IO:
//     space identity|expression
//     coords w|z
//     values <d> v_1 ... v_d

inline std::string code_to_text(const LatentCode& code)
{
    std::ostringstream out;
    out.precision(17);
    out << "space " << to_string(code.space) << "\ncoords " << to_string(code.coords) << "\nvalues "
        << code.values.size();
    for (Eigen::Index i = 0; i < code.values.size(); ++i)
        out << ' ' << code.values(i);
    out << '\n';
    return out.str();
}

inline LatentCode code_from_text(const std::string& text)
{
    LatentCode code;
    bool has_space = false, has_coords = false, has_values = false;
    geometry::detail::for_each_line(text, [&](std::string_view line, std::size_t line_no) {
        const auto tok = geometry::detail::split_ws(line);
        if (tok.empty() || tok[0].front() == '#')
            return true;
        auto fail = [&](const std::string& why) {
            throw ParseError("latent code line " + std::to_string(line_no) + ": " + why);
        };
        if (tok[0] == "space" && tok.size() == 2)
        {
            if (tok[1] == "identity")
                code.space = Space::identity;
            else if (tok[1] == "expression")
                code.space = Space::expression;
            else
                fail("unknown space '" + std::string(tok[1]) + "'");
            has_space = true;
        } else if (tok[0] == "coords" && tok.size() == 2)
        {
            if (tok[1] == "w")
                code.coords = Coords::pre_flow;
            else if (tok[1] == "z")
                code.coords = Coords::post_flow;
            else
                fail("unknown coords '" + std::string(tok[1]) + "'");
            has_coords = true;
        } else if (tok[0] == "values" && tok.size() >= 2)
        {
            const long d = geometry::detail::parse_long(tok[1], line_no);
            if (d < 0 || static_cast<std::size_t>(d) + 2 != tok.size())
                fail("value count does not match the declared dimension");
            code.values.resize(d);
            for (long i = 0; i < d; ++i)
                code.values(i) = geometry::detail::parse_double(tok[static_cast<std::size_t>(i) + 2], line_no);
            has_values = true;
        } else
        {
            fail("unrecognised record '" + std::string(tok[0]) + "'");
        }
        return true;
    });
    if (!has_space || !has_coords || !has_values)
    {
        throw ParseError("latent code: missing space, coords or values record");
    }
    return code;
}

inline void save_code(const LatentCode& code, const std::filesystem::path& path)
{
    write_file_atomic(path, code_to_text(code));
}

inline LatentCode load_code(const std::filesystem::path& path) { return code_from_text(read_file(path)); }

} // namespace latent
} // namespace bilinflow

#endif /* BILINFLOW_LATENT_LATENT_CODE_HPP */
