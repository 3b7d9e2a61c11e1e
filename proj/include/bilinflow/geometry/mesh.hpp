/*
 * bilinflow - bilinear identity/expression face models with normalizing flows.
 *
 * File: include/bilinflow/geometry/mesh.hpp
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

#ifndef BILINFLOW_GEOMETRY_MESH_HPP
#define BILINFLOW_GEOMETRY_MESH_HPP

#include "bilinflow/core/error.hpp"

#include "Eigen/Core"
#include "Eigen/Geometry"

#include <algorithm>
#include <array>
#include <string>
#include <vector>

namespace bilinflow {
namespace geometry {

using Triangle = std::array<int, 3>;

/**
 * Triangle mesh with a fixed vertex order.
 *
 * Vertices are the columns of a 3 x N matrix (millimetres). Because Eigen
 * stores column-major, the flattened geometry is laid out as
 * (x1, y1, z1, x2, y2, z2, ...), which is the layout used for every 3N-vector
 * in the library (see as_vector()).
 */
struct Mesh
{
    Eigen::Matrix3Xd vertices;
    std::vector<Triangle> faces;
    std::vector<int> landmarks; ///< Optional anatomical landmark vertex indices.

    int num_vertices() const { return static_cast<int>(vertices.cols()); }
    int num_faces() const { return static_cast<int>(faces.size()); }

    Eigen::Vector3d vertex(int i) const { return vertices.col(i); }
};

/// Flattened (x1, y1, z1, ...) copy of the vertex coordinates.
inline Eigen::VectorXd as_vector(const Eigen::Matrix3Xd& vertices)
{
    return Eigen::Map<const Eigen::VectorXd>(vertices.data(), vertices.size());
}

inline Eigen::VectorXd as_vector(const Mesh& mesh) { return as_vector(mesh.vertices); }

/// Inverse of as_vector(). Throws if the length is not a multiple of 3.
inline Eigen::Matrix3Xd as_points(const Eigen::VectorXd& flat)
{
    if (flat.size() % 3 != 0)
    {
        throw InvalidArgument("flattened geometry length " + std::to_string(flat.size()) +
                              " is not a multiple of 3");
    }
    return Eigen::Map<const Eigen::Matrix3Xd>(flat.data(), 3, flat.size() / 3);
}

/// Copy of `topology` with its vertex positions replaced.
inline Mesh with_vertices(const Mesh& topology, Eigen::Matrix3Xd vertices)
{
    if (vertices.cols() != topology.vertices.cols())
    {
        throw InvalidArgument("vertex count mismatch: " + std::to_string(vertices.cols()) + " vs " +
                              std::to_string(topology.vertices.cols()));
    }
    Mesh out = topology;
    out.vertices = std::move(vertices);
    return out;
}

/**
 * Checks the mesh invariants: face indices in range, no triangle with a
 * repeated index, landmark indices in range, finite coordinates.
 */
inline void validate(const Mesh& mesh)
{
    const int n = mesh.num_vertices();
    if (!mesh.vertices.allFinite())
    {
        throw InvalidArgument("mesh has non-finite vertex coordinates");
    }
    for (std::size_t f = 0; f < mesh.faces.size(); ++f)
    {
        const auto& t = mesh.faces[f];
        for (int idx : t)
        {
            if (idx < 0 || idx >= n)
            {
                throw InvalidArgument("face " + std::to_string(f) + " references vertex " + std::to_string(idx) +
                                      " outside [0, " + std::to_string(n) + ")");
            }
        }
        if (t[0] == t[1] || t[1] == t[2] || t[0] == t[2])
        {
            throw InvalidArgument("face " + std::to_string(f) + " is degenerate (repeated vertex index)");
        }
    }
    for (int l : mesh.landmarks)
    {
        if (l < 0 || l >= n)
        {
            throw InvalidArgument("landmark index " + std::to_string(l) + " outside [0, " + std::to_string(n) +
                                  ")");
        }
    }
}

/// Axis-aligned bounding-box diagonal length.
inline double bounding_box_diagonal(const Eigen::Matrix3Xd& vertices)
{
    if (vertices.cols() == 0)
    {
        return 0.0;
    }
    return (vertices.rowwise().maxCoeff() - vertices.rowwise().minCoeff()).norm();
}

/// Unnormalised face normal (twice the triangle area times the unit normal).
inline Eigen::Vector3d face_normal(const Eigen::Matrix3Xd& vertices, const Triangle& t)
{
    const Eigen::Vector3d a = vertices.col(t[0]);
    return (vertices.col(t[1]) - a).cross(vertices.col(t[2]) - a);
}

/// Per-vertex adjacency lists (sorted, no duplicates) derived from the faces.
inline std::vector<std::vector<int>> vertex_adjacency(const Mesh& mesh)
{
    std::vector<std::vector<int>> adj(static_cast<std::size_t>(mesh.num_vertices()));
    for (const auto& t : mesh.faces)
    {
        for (int k = 0; k < 3; ++k)
        {
            const int a = t[k];
            const int b = t[(k + 1) % 3];
            adj[a].push_back(b);
            adj[b].push_back(a);
        }
    }
    for (auto& list : adj)
    {
        std::sort(list.begin(), list.end());
        list.erase(std::unique(list.begin(), list.end()), list.end());
    }
    return adj;
}

} // namespace geometry
} // namespace bilinflow

#endif /* BILINFLOW_GEOMETRY_MESH_HPP */
