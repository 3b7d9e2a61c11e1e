/*
 * bilinflow - bilinear identity/expression face models with normalizing flows.
 *
 * File: include/bilinflow/correspondence/closest_point.hpp
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

#ifndef BILINFLOW_CORRESPONDENCE_CLOSEST_POINT_HPP
#define BILINFLOW_CORRESPONDENCE_CLOSEST_POINT_HPP

#include "bilinflow/core/error.hpp"
#include "bilinflow/geometry/mesh.hpp"

#include "Eigen/Core"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

namespace bilinflow {
namespace correspondence {

/// Closest point on a triangle with its barycentric weights w.r.t. (a, b, c).
struct TriangleProjection
{
    Eigen::Vector3d point;
    Eigen::Vector3d weights; ///< Non-negative, sums to one.
    double squared_distance = 0.0;
};

/**
 * Exact closest point on triangle (a, b, c) to p by Voronoi-region
 * classification (vertex, edge and face regions, Ericson 2005, 5.1.5).
 */
inline TriangleProjection closest_point_on_triangle(const Eigen::Vector3d& p, const Eigen::Vector3d& a,
                                                    const Eigen::Vector3d& b, const Eigen::Vector3d& c)
{
    auto result = [&](double u, double v, double w) {
        TriangleProjection r;
        r.weights = {u, v, w};
        r.point = u * a + v * b + w * c;
        r.squared_distance = (p - r.point).squaredNorm();
        return r;
    };

    const Eigen::Vector3d ab = b - a;
    const Eigen::Vector3d ac = c - a;
    const Eigen::Vector3d ap = p - a;
    const double d1 = ab.dot(ap);
    const double d2 = ac.dot(ap);
    if (d1 <= 0.0 && d2 <= 0.0)
    {
        return result(1.0, 0.0, 0.0);
    }

    const Eigen::Vector3d bp = p - b;
    const double d3 = ab.dot(bp);
    const double d4 = ac.dot(bp);
    if (d3 >= 0.0 && d4 <= d3)
    {
        return result(0.0, 1.0, 0.0);
    }

    const double vc = d1 * d4 - d3 * d2;
    if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0)
    {
        const double v = d1 / (d1 - d3);
        return result(1.0 - v, v, 0.0);
    }

    const Eigen::Vector3d cp = p - c;
    const double d5 = ab.dot(cp);
    const double d6 = ac.dot(cp);
    if (d6 >= 0.0 && d5 <= d6)
    {
        return result(0.0, 0.0, 1.0);
    }

    const double vb = d5 * d2 - d1 * d6;
    if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0)
    {
        const double w = d2 / (d2 - d6);
        return result(1.0 - w, 0.0, w);
    }

    const double va = d3 * d6 - d5 * d4;
    if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0)
    {
        const double w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return result(0.0, 1.0 - w, w);
    }

    const double denom = 1.0 / (va + vb + vc);
    const double v = vb * denom;
    const double w = vc * denom;
    return result(1.0 - v - w, v, w);
}

/// Result of a closest-face query against a mesh.
struct SurfaceHit
{
    int face = -1;
    TriangleProjection projection;
};

namespace detail {

/// Squared-distance comparison with lowest-face-index tie break.
inline bool better_hit(double d2, int face, double best_d2, int best_face, double tie_tolerance)
{
    if (d2 < best_d2 - tie_tolerance)
    {
        return true;
    }
    return d2 <= best_d2 + tie_tolerance && face < best_face;
}

} // namespace detail

/**
 * Uniform-grid acceleration structure over the triangles of a mesh for
 * closest-point queries. Each triangle is registered in every cell its
 * bounding box overlaps; a query visits cells in growing Chebyshev shells
 * around the query cell and stops once no unvisited cell can hold a closer
 * point.
 *
 * Results are identical to exhaustive_closest_face(), including the
 * tie-break towards the lowest face index.
 */
class TriangleGrid
{
public:
    explicit TriangleGrid(const geometry::Mesh& mesh) : mesh_(&mesh)
    {
        if (mesh.num_faces() == 0)
        {
            throw InvalidArgument("closest-point grid: source mesh has no faces");
        }
        lo_ = mesh.vertices.rowwise().minCoeff();
        hi_ = mesh.vertices.rowwise().maxCoeff();
        const Eigen::Vector3d extent = (hi_ - lo_).cwiseMax(1e-9);
        const double diag = extent.norm();
        tie_tolerance_ = 1e-24 * diag * diag;
        // Roughly one triangle per cell, spread in proportion to the box extent.
        const double volume = extent.prod();
        double cell = std::cbrt(volume / std::max(1, mesh.num_faces()));
        cell = std::max(cell, diag * 1e-3);
        for (int a = 0; a < 3; ++a)
        {
            dims_[a] = std::clamp(static_cast<int>(std::ceil(extent[a] / cell)), 1, 256);
            cell_size_[a] = extent[a] / dims_[a];
        }
        cells_.assign(static_cast<std::size_t>(dims_[0]) * dims_[1] * dims_[2], {});
        for (int f = 0; f < mesh.num_faces(); ++f)
        {
            const auto& t = mesh.faces[static_cast<std::size_t>(f)];
            Eigen::Vector3d bmin = mesh.vertices.col(t[0]);
            Eigen::Vector3d bmax = bmin;
            for (int k = 1; k < 3; ++k)
            {
                bmin = bmin.cwiseMin(mesh.vertices.col(t[k]));
                bmax = bmax.cwiseMax(mesh.vertices.col(t[k]));
            }
            const auto c0 = cell_of(bmin);
            const auto c1 = cell_of(bmax);
            for (int z = c0[2]; z <= c1[2]; ++z)
                for (int y = c0[1]; y <= c1[1]; ++y)
                    for (int x = c0[0]; x <= c1[0]; ++x)
                        cells_[index(x, y, z)].push_back(f);
        }
        stamp_.assign(static_cast<std::size_t>(mesh.num_faces()), 0);
    }

    /// Closest face to p. Not thread-safe (uses an internal visit stamp).
    SurfaceHit closest(const Eigen::Vector3d& p) const
    {
        if (++query_id_ == 0)
        {
            std::fill(stamp_.begin(), stamp_.end(), 0);
            query_id_ = 1;
        }
        const auto c = cell_of(p);
        SurfaceHit best;
        double best_d2 = std::numeric_limits<double>::infinity();
        const int max_ring = std::max({dims_[0], dims_[1], dims_[2]});
        for (int r = 0; r <= max_ring; ++r)
        {
            std::array<int, 3> lo{}, hi{};
            for (int a = 0; a < 3; ++a)
            {
                lo[a] = std::max(c[a] - r, 0);
                hi[a] = std::min(c[a] + r, dims_[a] - 1);
            }
            for (int z = lo[2]; z <= hi[2]; ++z)
                for (int y = lo[1]; y <= hi[1]; ++y)
                    for (int x = lo[0]; x <= hi[0]; ++x)
                    {
                        const bool on_shell = std::abs(x - c[0]) == r || std::abs(y - c[1]) == r ||
                                              std::abs(z - c[2]) == r;
                        if (!on_shell)
                        {
                            continue;
                        }
                        for (int f : cells_[index(x, y, z)])
                        {
                            if (stamp_[static_cast<std::size_t>(f)] == query_id_)
                            {
                                continue;
                            }
                            stamp_[static_cast<std::size_t>(f)] = query_id_;
                            const auto& t = mesh_->faces[static_cast<std::size_t>(f)];
                            auto proj = closest_point_on_triangle(p, mesh_->vertices.col(t[0]),
                                                                  mesh_->vertices.col(t[1]),
                                                                  mesh_->vertices.col(t[2]));
                            if (detail::better_hit(proj.squared_distance, f, best_d2, best.face, tie_tolerance_) ||
                                best.face < 0)
                            {
                                best_d2 = proj.squared_distance;
                                best.face = f;
                                best.projection = proj;
                            }
                        }
                    }
            // Lower bound on the distance to any cell outside the visited block.
            double bound = std::numeric_limits<double>::infinity();
            bool covered = true;
            for (int a = 0; a < 3; ++a)
            {
                if (lo[a] > 0)
                {
                    covered = false;
                    bound = std::min(bound, p[a] - (lo_[a] + lo[a] * cell_size_[a]));
                }
                if (hi[a] < dims_[a] - 1)
                {
                    covered = false;
                    bound = std::min(bound, (lo_[a] + (hi[a] + 1) * cell_size_[a]) - p[a]);
                }
            }
            if (covered)
            {
                break;
            }
            if (best.face >= 0 && bound > 0.0 && best_d2 + tie_tolerance_ < bound * bound)
            {
                break;
            }
        }
        return best;
    }

    double tie_tolerance() const { return tie_tolerance_; }

private:
    std::array<int, 3> cell_of(const Eigen::Vector3d& p) const
    {
        std::array<int, 3> c{};
        for (int a = 0; a < 3; ++a)
        {
            const double t = (p[a] - lo_[a]) / cell_size_[a];
            c[a] = std::clamp(static_cast<int>(std::floor(t)), 0, dims_[a] - 1);
        }
        return c;
    }

    std::size_t index(int x, int y, int z) const
    {
        return (static_cast<std::size_t>(z) * dims_[1] + y) * dims_[0] + x;
    }

    const geometry::Mesh* mesh_;
    Eigen::Vector3d lo_, hi_;
    std::array<int, 3> dims_{};
    Eigen::Vector3d cell_size_;
    double tie_tolerance_ = 0.0;
    std::vector<std::vector<int>> cells_;
    mutable std::vector<std::uint32_t> stamp_;
    mutable std::uint32_t query_id_ = 0;
};

/**
 * O(F) scan over every face; the reference the grid is checked against.
 * Uses the same tie tolerance as TriangleGrid for the given mesh.
 */
inline SurfaceHit exhaustive_closest_face(const geometry::Mesh& mesh, const Eigen::Vector3d& p, double tie_tolerance)
{
    SurfaceHit best;
    double best_d2 = std::numeric_limits<double>::infinity();
    for (int f = 0; f < mesh.num_faces(); ++f)
    {
        const auto& t = mesh.faces[static_cast<std::size_t>(f)];
        auto proj = closest_point_on_triangle(p, mesh.vertices.col(t[0]), mesh.vertices.col(t[1]),
                                              mesh.vertices.col(t[2]));
        if (best.face < 0 || detail::better_hit(proj.squared_distance, f, best_d2, best.face, tie_tolerance))
        {
            best_d2 = proj.squared_distance;
            best.face = f;
            best.projection = proj;
        }
    }
    return best;
}

} // namespace correspondence
} // namespace bilinflow

#endif /* BILINFLOW_CORRESPONDENCE_CLOSEST_POINT_HPP */
