/*
 * bilinflow - bilinear identity/expression face models with normalizing flows.
 *
 * File: include/bilinflow/correspondence/barycentric_map.hpp
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

#ifndef BILINFLOW_CORRESPONDENCE_BARYCENTRIC_MAP_HPP
#define BILINFLOW_CORRESPONDENCE_BARYCENTRIC_MAP_HPP

#include "bilinflow/core/binary_io.hpp"
#include "bilinflow/core/error.hpp"
#include "bilinflow/correspondence/closest_point.hpp"
#include "bilinflow/geometry/mesh.hpp"
#include "bilinflow/geometry/mesh_io.hpp"

#include "Eigen/Core"

#include <array>
#include <cmath>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace bilinflow {
namespace correspondence {

/**
 * Sparse column-stochastic map from a source topology (M vertices) to a
 * target topology (N vertices). Each target vertex is an affine combination
 * of the three vertices of one source triangle:
 *
 *     target_i = w_i0 * source[q_i] + w_i1 * source[r_i] + w_i2 * source[l_i]
 *
 * Weights lie in [0, 1] and sum to one, so the map commutes with
 * translations.
 */
struct BarycentricMap
{
    int source_vertex_count = 0;
    int target_vertex_count = 0;
    std::vector<std::array<int, 3>> indices;    ///< (q, r, l) per target vertex.
    std::vector<std::array<double, 3>> weights; ///< (alpha_q, alpha_r, alpha_l) per target vertex.
};

/// Options for build_map().
struct MapOptions
{
    /// Maximum allowed distance of a target vertex from the source surface,
    /// as a fraction of the source bounding-box diagonal.
    double max_distance_fraction = 0.05;
    /// Use the uniform grid (true) or the exhaustive O(N*F) scan (false).
    bool accelerate = true;
};

/**
 * Expresses every vertex of `fitted_target` by barycentric weights of its
 * closest point on the surface of `source`.
 *
 * `fitted_target` must already be non-rigidly aligned to the source surface.
 * Vertices farther than the configured distance are reported all at once.
 */
inline BarycentricMap build_map(const geometry::Mesh& source, const geometry::Mesh& fitted_target,
                                const MapOptions& options = {})
{
    if (source.num_vertices() == 0 || source.num_faces() == 0)
    {
        throw InvalidArgument("build_map: source mesh is empty");
    }
    geometry::validate(source);
    geometry::validate(fitted_target);

    const double max_distance = options.max_distance_fraction * geometry::bounding_box_diagonal(source.vertices);
    const TriangleGrid grid(source);

    BarycentricMap map;
    map.source_vertex_count = source.num_vertices();
    map.target_vertex_count = fitted_target.num_vertices();
    map.indices.resize(static_cast<std::size_t>(map.target_vertex_count));
    map.weights.resize(static_cast<std::size_t>(map.target_vertex_count));

    std::vector<int> too_far;
    for (int i = 0; i < fitted_target.num_vertices(); ++i)
    {
        const Eigen::Vector3d p = fitted_target.vertices.col(i);
        const SurfaceHit hit =
            options.accelerate ? grid.closest(p) : exhaustive_closest_face(source, p, grid.tie_tolerance());
        if (std::sqrt(hit.projection.squared_distance) > max_distance)
        {
            too_far.push_back(i);
        }
        map.indices[static_cast<std::size_t>(i)] = source.faces[static_cast<std::size_t>(hit.face)];
        map.weights[static_cast<std::size_t>(i)] = {hit.projection.weights[0], hit.projection.weights[1],
                                                    hit.projection.weights[2]};
    }
    if (!too_far.empty())
    {
        std::ostringstream msg;
        msg << "build_map: " << too_far.size() << " target vertices are farther than " << max_distance
            << " from the source surface:";
        for (std::size_t k = 0; k < too_far.size() && k < 50; ++k)
        {
            msg << ' ' << too_far[k];
        }
        if (too_far.size() > 50)
        {
            msg << " ...";
        }
        throw InvalidArgument(msg.str());
    }
    return map;
}

/// Evaluates the map on source geometry (M points) to give N target points. Linear in the input.
inline Eigen::Matrix3Xd apply_map(const BarycentricMap& map, const Eigen::Matrix3Xd& source_geometry)
{
    if (source_geometry.cols() != map.source_vertex_count)
    {
        throw InvalidArgument("apply_map: geometry has " + std::to_string(source_geometry.cols()) +
                              " points, map expects " + std::to_string(map.source_vertex_count));
    }
    Eigen::Matrix3Xd out(3, map.target_vertex_count);
    for (int i = 0; i < map.target_vertex_count; ++i)
    {
        const auto& idx = map.indices[static_cast<std::size_t>(i)];
        const auto& w = map.weights[static_cast<std::size_t>(i)];
        out.col(i) = w[0] * source_geometry.col(idx[0]) + w[1] * source_geometry.col(idx[1]) +
                     w[2] * source_geometry.col(idx[2]);
    }
    return out;
}

/// Checks the map invariants (index ranges, weights in [0,1], rows sum to one within 1e-12).
inline void validate(const BarycentricMap& map)
{
    if (static_cast<int>(map.indices.size()) != map.target_vertex_count ||
        static_cast<int>(map.weights.size()) != map.target_vertex_count)
    {
        throw InvalidArgument("barycentric map row count does not match its header");
    }
    for (int i = 0; i < map.target_vertex_count; ++i)
    {
        double sum = 0.0;
        for (int k = 0; k < 3; ++k)
        {
            const int q = map.indices[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
            const double w = map.weights[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
            if (q < 0 || q >= map.source_vertex_count)
            {
                throw InvalidArgument("barycentric map row " + std::to_string(i) + " has source index out of range");
            }
            if (!(w >= -1e-15 && w <= 1.0 + 1e-15))
            {
                throw InvalidArgument("barycentric map row " + std::to_string(i) + " has weight outside [0, 1]");
            }
            sum += w;
        }
        if (std::abs(sum - 1.0) > 1e-12)
        {
            throw InvalidArgument("barycentric map row " + std::to_string(i) + " weights do not sum to one");
        }
    }
}

/**
 * Text table: header "M N", then N rows "i q r l alpha_q alpha_r alpha_l"
 * with 17 significant digits.
 */
inline std::string map_to_text(const BarycentricMap& map)
{
    std::ostringstream out;
    out.precision(17);
    out << map.source_vertex_count << ' ' << map.target_vertex_count << '\n';
    for (int i = 0; i < map.target_vertex_count; ++i)
    {
        const auto& idx = map.indices[static_cast<std::size_t>(i)];
        const auto& w = map.weights[static_cast<std::size_t>(i)];
        out << i << ' ' << idx[0] << ' ' << idx[1] << ' ' << idx[2] << ' ' << w[0] << ' ' << w[1] << ' ' << w[2]
            << '\n';
    }
    return out.str();
}

inline BarycentricMap map_from_text(const std::string& text)
{
    BarycentricMap map;
    bool header = false;
    geometry::detail::for_each_line(text, [&](std::string_view line, std::size_t line_no) {
        const auto tok = geometry::detail::split_ws(line);
        if (tok.empty() || tok[0].front() == '#')
        {
            return true;
        }
        using geometry::detail::parse_double;
        using geometry::detail::parse_long;
        if (!header)
        {
            if (tok.size() != 2)
            {
                throw ParseError("map header must be 'M N' (line " + std::to_string(line_no) + ")");
            }
            map.source_vertex_count = static_cast<int>(parse_long(tok[0], line_no));
            map.target_vertex_count = static_cast<int>(parse_long(tok[1], line_no));
            map.indices.assign(static_cast<std::size_t>(map.target_vertex_count), {-1, -1, -1});
            map.weights.assign(static_cast<std::size_t>(map.target_vertex_count), {0, 0, 0});
            header = true;
            return true;
        }
        if (tok.size() != 7)
        {
            throw ParseError("map row must have 7 columns (line " + std::to_string(line_no) + ")");
        }
        const long i = parse_long(tok[0], line_no);
        if (i < 0 || i >= map.target_vertex_count)
        {
            throw ParseError("map row index out of range at line " + std::to_string(line_no));
        }
        for (int k = 0; k < 3; ++k)
        {
            map.indices[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] =
                static_cast<int>(parse_long(tok[static_cast<std::size_t>(1 + k)], line_no));
            map.weights[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] =
                parse_double(tok[static_cast<std::size_t>(4 + k)], line_no);
        }
        return true;
    });
    if (!header)
    {
        throw ParseError("empty barycentric map file");
    }
    try
    {
        validate(map);
    } catch (const InvalidArgument& e)
    {
        throw ParseError(e.what());
    }
    return map;
}

inline constexpr std::string_view kMapMagic = "BFBARYMP";
inline constexpr std::uint32_t kMapVersion = 1;

/// Binary form; reload is bit-exact.
inline std::string map_to_binary(const BarycentricMap& map)
{
    BinaryWriter w(kMapMagic, kMapVersion);
    w.u64(static_cast<std::uint64_t>(map.source_vertex_count));
    w.u64(static_cast<std::uint64_t>(map.target_vertex_count));
    for (int i = 0; i < map.target_vertex_count; ++i)
    {
        for (int k = 0; k < 3; ++k)
        {
            w.u64(static_cast<std::uint64_t>(map.indices[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)]));
        }
        for (int k = 0; k < 3; ++k)
        {
            w.f64(map.weights[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)]);
        }
    }
    return w.bytes();
}

inline BarycentricMap map_from_binary(std::string bytes)
{
    BinaryReader r(std::move(bytes), kMapMagic, kMapVersion);
    BarycentricMap map;
    map.source_vertex_count = static_cast<int>(r.u64());
    map.target_vertex_count = static_cast<int>(r.u64());
    map.indices.resize(static_cast<std::size_t>(map.target_vertex_count));
    map.weights.resize(static_cast<std::size_t>(map.target_vertex_count));
    for (int i = 0; i < map.target_vertex_count; ++i)
    {
        for (int k = 0; k < 3; ++k)
        {
            map.indices[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] = static_cast<int>(r.u64());
        }
        for (int k = 0; k < 3; ++k)
        {
            map.weights[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] = r.f64();
        }
    }
    if (!r.at_end())
    {
        throw ParseError("trailing bytes in barycentric map container");
    }
    return map;
}

/// Saves as binary when the extension is ".bin", text otherwise.
inline void save_map(const BarycentricMap& map, const std::filesystem::path& path)
{
    write_file_atomic(path, path.extension() == ".bin" ? map_to_binary(map) : map_to_text(map));
}

inline BarycentricMap load_map(const std::filesystem::path& path)
{
    return path.extension() == ".bin" ? map_from_binary(read_file(path)) : map_from_text(read_file(path));
}

} // namespace correspondence
} // namespace bilinflow

#endif /* BILINFLOW_CORRESPONDENCE_BARYCENTRIC_MAP_HPP */
