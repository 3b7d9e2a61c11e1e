/*
 * bilinflow - bilinear identity/expression face models with normalizing flows.
 *
 * File: include/bilinflow/geometry/symmetry.hpp
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

#ifndef BILINFLOW_GEOMETRY_SYMMETRY_HPP
#define BILINFLOW_GEOMETRY_SYMMETRY_HPP

#include "bilinflow/core/binary_io.hpp"
#include "bilinflow/core/error.hpp"
#include "bilinflow/geometry/mesh.hpp"
#include "bilinflow/geometry/mesh_io.hpp"

#include "Eigen/Core"

#include <filesystem>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace bilinflow {
namespace geometry {

/**
 * Left/right vertex correspondence of a near-symmetric template plus the
 * reflection plane {p : normal . p = offset}.
 *
 * partner[i] is the mirror vertex of i; midline vertices are their own
 * partner. The pairing is an involution covering every vertex once.
 */
class SymmetryMap
{
public:
    SymmetryMap() = default;

    SymmetryMap(std::vector<int> partner, Eigen::Vector3d normal, double offset)
        : partner_(std::move(partner)), normal_(normal), offset_(offset)
    {
        if (normal_.norm() < 1e-12)
        {
            throw InvalidArgument("symmetry plane normal must be non-zero");
        }
        normal_.normalize();
        for (std::size_t i = 0; i < partner_.size(); ++i)
        {
            const int p = partner_[i];
            if (p < 0 || static_cast<std::size_t>(p) >= partner_.size())
            {
                throw InvalidArgument("symmetry map is incomplete: vertex " + std::to_string(i) + " has no partner");
            }
            if (partner_[static_cast<std::size_t>(p)] != static_cast<int>(i))
            {
                throw InvalidArgument("symmetry pairing is not an involution at vertex " + std::to_string(i));
            }
        }
    }

    /// Builds the map from explicit (left, right) pairs; self pairs mark the midline.
    static SymmetryMap from_pairs(int num_vertices, const std::vector<std::pair<int, int>>& pairs,
                                  Eigen::Vector3d normal = Eigen::Vector3d::UnitX(), double offset = 0.0)
    {
        std::vector<int> partner(static_cast<std::size_t>(num_vertices), -1);
        for (const auto& [a, b] : pairs)
        {
            if (a < 0 || b < 0 || a >= num_vertices || b >= num_vertices)
            {
                throw InvalidArgument("symmetry pair (" + std::to_string(a) + ", " + std::to_string(b) +
                                      ") out of range");
            }
            if (partner[a] != -1 || partner[b] != -1)
            {
                throw InvalidArgument("vertex listed twice in symmetry pairs: " + std::to_string(a) + " / " +
                                      std::to_string(b));
            }
            partner[a] = b;
            partner[b] = a;
        }
        return SymmetryMap(std::move(partner), normal, offset);
    }

    int size() const { return static_cast<int>(partner_.size()); }
    int partner(int i) const { return partner_[static_cast<std::size_t>(i)]; }
    const std::vector<int>& partners() const { return partner_; }
    const Eigen::Vector3d& normal() const { return normal_; }
    double offset() const { return offset_; }

    Eigen::Vector3d reflect(const Eigen::Vector3d& p) const
    {
        return p - 2.0 * (normal_.dot(p) - offset_) * normal_;
    }

private:
    std::vector<int> partner_;
    Eigen::Vector3d normal_ = Eigen::Vector3d::UnitX();
    double offset_ = 0.0;
};

/**
 * Sidecar format: one "i j" line per pair (each pair listed once), "i i" for
 * midline vertices. An optional "# plane nx ny nz offset" line sets the
 * reflection plane (default x = 0); other '#' lines are comments.
 */
inline SymmetryMap load_symmetry(const std::filesystem::path& path, int num_vertices)
{
    std::vector<std::pair<int, int>> pairs;
    Eigen::Vector3d normal = Eigen::Vector3d::UnitX();
    double offset = 0.0;
    detail::for_each_line(read_file(path), [&](std::string_view line, std::size_t line_no) {
        const auto tokens = detail::split_ws(line);
        if (tokens.empty())
        {
            return true;
        }
        if (tokens[0].front() == '#')
        {
            if (tokens.size() == 6 && tokens[1] == "plane")
            {
                normal = {detail::parse_double(tokens[2], line_no), detail::parse_double(tokens[3], line_no),
                          detail::parse_double(tokens[4], line_no)};
                offset = detail::parse_double(tokens[5], line_no);
            }
            return true;
        }
        if (tokens.size() != 2)
        {
            throw ParseError("expected 'i j' at line " + std::to_string(line_no));
        }
        pairs.emplace_back(static_cast<int>(detail::parse_long(tokens[0], line_no)),
                           static_cast<int>(detail::parse_long(tokens[1], line_no)));
        return true;
    });
    return SymmetryMap::from_pairs(num_vertices, pairs, normal, offset);
}

inline void save_symmetry(const SymmetryMap& sym, const std::filesystem::path& path)
{
    std::ostringstream out;
    out.precision(17);
    out << "# plane " << sym.normal().x() << ' ' << sym.normal().y() << ' ' << sym.normal().z() << ' '
        << sym.offset() << '\n';
    for (int i = 0; i < sym.size(); ++i)
    {
        if (sym.partner(i) >= i)
        {
            out << i << ' ' << sym.partner(i) << '\n';
        }
    }
    write_file_atomic(path, out.str());
}

/**
 * Reflected copy of the mesh: output vertex i is the reflection of input
 * vertex partner(i). Faces and landmarks are unchanged.
 */
inline Mesh mirror(const Mesh& mesh, const SymmetryMap& sym)
{
    if (sym.size() != mesh.num_vertices())
    {
        throw InvalidArgument("symmetry map covers " + std::to_string(sym.size()) + " vertices, mesh has " +
                              std::to_string(mesh.num_vertices()));
    }
    Mesh out = mesh;
    for (int i = 0; i < mesh.num_vertices(); ++i)
    {
        out.vertices.col(i) = sym.reflect(mesh.vertices.col(sym.partner(i)));
    }
    return out;
}

/// Per-vertex average of the mesh and its mirror; the result is exactly plane-symmetric.
inline Mesh symmetrize(const Mesh& mesh, const SymmetryMap& sym)
{
    Mesh out = mirror(mesh, sym);
    out.vertices = 0.5 * (mesh.vertices + out.vertices);
    return out;
}

} // namespace geometry
} // namespace bilinflow

#endif /* BILINFLOW_GEOMETRY_SYMMETRY_HPP */
