/*
 * bilinflow - bilinear identity/expression face models with normalizing flows.
 *
 * File: include/bilinflow/geometry/primitives.hpp
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

#ifndef BILINFLOW_GEOMETRY_PRIMITIVES_HPP
#define BILINFLOW_GEOMETRY_PRIMITIVES_HPP

#include "bilinflow/core/error.hpp"
#include "bilinflow/geometry/mesh.hpp"
#include "bilinflow/geometry/symmetry.hpp"

#include "Eigen/Core"

#include <cmath>
#include <utility>
#include <vector>

namespace bilinflow {
namespace geometry {

/**
 * Latitude/longitude tessellation of an ellipsoid centred at the origin.
 *
 * Poles lie on the y axis; longitude 0 faces +z and increases towards +x.
 * Vertex 0 is the north pole, then `rings` rings of `segments` vertices from
 * north to south, then the south pole. `segments` must be even so that the
 * tessellation is mirror-symmetric about the x = 0 plane.
 */
struct EllipsoidGrid
{
    int rings = 0;
    int segments = 0;

    int num_vertices() const { return 2 + rings * segments; }
    int ring_vertex(int ring, int segment) const { return 1 + ring * segments + segment; }
    int south_pole() const { return 1 + rings * segments; }

    /// Smallest even-segment grid with at least `min_vertices` vertices and rings ~ segments / 2.
    static EllipsoidGrid for_vertex_count(int min_vertices)
    {
        if (min_vertices < 8)
        {
            throw InvalidArgument("ellipsoid grid needs at least 8 vertices");
        }
        int segments = static_cast<int>(std::lround(std::sqrt(2.0 * min_vertices)));
        segments += segments % 2;
        segments = std::max(segments, 4);
        const int rings = std::max(2, (min_vertices - 2 + segments - 1) / segments);
        return {rings, segments};
    }
};

/// Unit direction of grid vertex i (poles included).
inline Eigen::Vector3d ellipsoid_direction(const EllipsoidGrid& grid, int vertex)
{
    if (vertex == 0)
    {
        return Eigen::Vector3d::UnitY();
    }
    if (vertex == grid.south_pole())
    {
        return -Eigen::Vector3d::UnitY();
    }
    const int ring = (vertex - 1) / grid.segments;
    const int seg = (vertex - 1) % grid.segments;
    const double theta = M_PI * (ring + 1) / (grid.rings + 1);
    const double phi = 2.0 * M_PI * seg / grid.segments;
    return {std::sin(theta) * std::sin(phi), std::cos(theta), std::sin(theta) * std::cos(phi)};
}

/// Closed, outward-oriented ellipsoid mesh with the given semi-axes (x, y, z).
inline Mesh make_ellipsoid(const EllipsoidGrid& grid, const Eigen::Vector3d& radii)
{
    Mesh mesh;
    mesh.vertices.resize(3, grid.num_vertices());
    for (int v = 0; v < grid.num_vertices(); ++v)
    {
        mesh.vertices.col(v) = radii.cwiseProduct(ellipsoid_direction(grid, v));
    }
    auto add = [&](int a, int b, int c) {
        Triangle t{a, b, c};
        const Eigen::Vector3d centroid =
            (mesh.vertices.col(a) + mesh.vertices.col(b) + mesh.vertices.col(c)) / 3.0;
        if (face_normal(mesh.vertices, t).dot(centroid) < 0.0)
        {
            std::swap(t[1], t[2]);
        }
        mesh.faces.push_back(t);
    };
    const int s = grid.segments;
    for (int j = 0; j < s; ++j)
    {
        add(0, grid.ring_vertex(0, j), grid.ring_vertex(0, (j + 1) % s));
    }
    for (int r = 0; r + 1 < grid.rings; ++r)
    {
        for (int j = 0; j < s; ++j)
        {
            const int a = grid.ring_vertex(r, j);
            const int b = grid.ring_vertex(r, (j + 1) % s);
            const int c = grid.ring_vertex(r + 1, (j + 1) % s);
            const int d = grid.ring_vertex(r + 1, j);
            // Diagonal direction mirrors across x = 0 so the triangulation is symmetric.
            if (j < s / 2)
            {
                add(a, d, c);
                add(a, c, b);
            } else
            {
                add(a, d, b);
                add(b, d, c);
            }
        }
    }
    for (int j = 0; j < s; ++j)
    {
        add(grid.south_pole(), grid.ring_vertex(grid.rings - 1, (j + 1) % s), grid.ring_vertex(grid.rings - 1, j));
    }
    return mesh;
}

/// Left/right pairing of an ellipsoid grid across x = 0.
inline SymmetryMap ellipsoid_symmetry(const EllipsoidGrid& grid)
{
    std::vector<std::pair<int, int>> pairs;
    pairs.emplace_back(0, 0);
    pairs.emplace_back(grid.south_pole(), grid.south_pole());
    for (int r = 0; r < grid.rings; ++r)
    {
        for (int j = 0; j <= grid.segments / 2; ++j)
        {
            pairs.emplace_back(grid.ring_vertex(r, j), grid.ring_vertex(r, (grid.segments - j) % grid.segments));
        }
    }
    return SymmetryMap::from_pairs(grid.num_vertices(), pairs, Eigen::Vector3d::UnitX(), 0.0);
}

} // namespace geometry
} // namespace bilinflow

#endif /* BILINFLOW_GEOMETRY_PRIMITIVES_HPP */
