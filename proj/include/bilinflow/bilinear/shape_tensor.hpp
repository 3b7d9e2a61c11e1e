/*
 * bilinflow - bilinear identity/expression face models with normalizing flows.
 *
 * File: include/bilinflow/bilinear/shape_tensor.hpp
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

#ifndef BILINFLOW_BILINEAR_SHAPE_TENSOR_HPP
#define BILINFLOW_BILINEAR_SHAPE_TENSOR_HPP

#include "bilinflow/core/binary_io.hpp"
#include "bilinflow/core/error.hpp"
#include "bilinflow/geometry/mesh.hpp"
#include "bilinflow/geometry/symmetry.hpp"

#include "Eigen/Core"

#include <algorithm>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

namespace bilinflow {
namespace bilinear {

/**
 * Third-order data tensor T of size (3N, n_id, n_ex), stored as its mode-1
 * unfolding: a 3N x (n_id * n_ex) matrix whose column i + n_id * e is the
 * flattened face (x_1, y_1, z_1, x_2, ...) of identity i with expression e.
 *
 * Worked example for a 2 x 2 x 2 tensor (rows v, identity i, expression e):
 *
 *     mode-1 unfolding, columns (i,e) = (0,0) (1,0) (0,1) (1,1):
 *         [ T000 T010 T001 T011 ]
 *         [ T100 T110 T101 T111 ]
 *     mode-2 unfolding, rows i, columns (v,e) = (0,0) (1,0) (0,1) (1,1):
 *         [ T000 T100 T001 T101 ]
 *         [ T010 T110 T011 T111 ]
 *     mode-3 unfolding, rows e, columns (v,i) = (0,0) (1,0) (0,1) (1,1):
 *         [ T000 T100 T010 T110 ]
 *         [ T001 T101 T011 T111 ]
 *
 * with Tvie the entry at vertex-row v, identity i, expression e. The first
 * index always varies fastest.
 */
struct ShapeTensor
{
    Eigen::MatrixXd data;
    int n_id = 0;
    int n_ex = 0;
    std::vector<std::string> identity_labels;   ///< e.g. "3/original", "3/mirrored", "3/symmetrized".
    std::vector<std::string> expression_labels;

    Eigen::Index rows() const { return data.rows(); }
    Eigen::Index column(int identity, int expression) const
    {
        return static_cast<Eigen::Index>(identity) + static_cast<Eigen::Index>(n_id) * expression;
    }
    double operator()(Eigen::Index v, int identity, int expression) const
    {
        return data(v, column(identity, expression));
    }
};

/// Mode-2 (identity) unfolding: n_id x (3N * n_ex), column v + 3N * e.
inline Eigen::MatrixXd unfold_identity(const ShapeTensor& t)
{
    Eigen::MatrixXd out(t.n_id, t.rows() * t.n_ex);
    for (int e = 0; e < t.n_ex; ++e)
        for (int i = 0; i < t.n_id; ++i)
            out.block(i, t.rows() * e, 1, t.rows()) = t.data.col(t.column(i, e)).transpose();
    return out;
}

/// Mode-3 (expression) unfolding: n_ex x (3N * n_id), column v + 3N * i.
inline Eigen::MatrixXd unfold_expression(const ShapeTensor& t)
{
    Eigen::MatrixXd out(t.n_ex, t.rows() * t.n_id);
    for (int i = 0; i < t.n_id; ++i)
        for (int e = 0; e < t.n_ex; ++e)
            out.block(e, t.rows() * i, 1, t.rows()) = t.data.col(t.column(i, e)).transpose();
    return out;
}

/**
 * Stacks a complete identity x expression grid of meshes (grid[i][e]) into a
 * tensor. A mesh with zero vertices marks a missing cell; all missing cells
 * are reported in one error.
 *
 * With `augment`, each identity additionally contributes its mirrored and its
 * symmetrized version: identities 0..n-1 are the originals, n..2n-1 the
 * mirrored copies, 2n..3n-1 the symmetrized ones.
 */
inline ShapeTensor assemble_tensor(const std::vector<std::vector<geometry::Mesh>>& grid,
                                   const geometry::SymmetryMap* symmetry, bool augment,
                                   std::vector<std::string> expression_labels = {})
{
    const int n_id = static_cast<int>(grid.size());
    if (n_id == 0)
    {
        throw InvalidArgument("assemble_tensor: empty identity grid");
    }
    int n_ex = 0;
    for (const auto& row : grid)
    {
        n_ex = std::max(n_ex, static_cast<int>(row.size()));
    }
    int n_vertices = -1;
    std::ostringstream missing;
    int missing_count = 0;
    for (int i = 0; i < n_id; ++i)
    {
        for (int e = 0; e < n_ex; ++e)
        {
            const auto& row = grid[static_cast<std::size_t>(i)];
            if (e >= static_cast<int>(row.size()) || row[static_cast<std::size_t>(e)].num_vertices() == 0)
            {
                missing << " (" << i << ',' << e << ')';
                ++missing_count;
                continue;
            }
            const int n = row[static_cast<std::size_t>(e)].num_vertices();
            if (n_vertices >= 0 && n != n_vertices)
            {
                throw InvalidArgument("assemble_tensor: mesh (" + std::to_string(i) + "," + std::to_string(e) +
                                      ") has " + std::to_string(n) + " vertices, expected " +
                                      std::to_string(n_vertices));
            }
            n_vertices = n;
        }
    }
    if (missing_count > 0)
    {
        throw InvalidArgument("assemble_tensor: " + std::to_string(missing_count) +
                              " missing (identity, expression) cells:" + missing.str());
    }
    if (augment && (symmetry == nullptr || symmetry->size() != n_vertices))
    {
        throw InvalidArgument("assemble_tensor: augmentation needs a symmetry map covering all vertices");
    }

    const int copies = augment ? 3 : 1;
    ShapeTensor t;
    t.n_id = n_id * copies;
    t.n_ex = n_ex;
    t.data.resize(3 * static_cast<Eigen::Index>(n_vertices), static_cast<Eigen::Index>(t.n_id) * n_ex);
    static const char* kinds[] = {"original", "mirrored", "symmetrized"};
    for (int c = 0; c < copies; ++c)
    {
        for (int i = 0; i < n_id; ++i)
        {
            t.identity_labels.push_back(std::to_string(i) + "/" + kinds[c]);
            for (int e = 0; e < n_ex; ++e)
            {
                const geometry::Mesh& m = grid[static_cast<std::size_t>(i)][static_cast<std::size_t>(e)];
                Eigen::Matrix3Xd v;
                if (c == 0)
                {
                    v = m.vertices;
                } else if (c == 1)
                {
                    v = geometry::mirror(m, *symmetry).vertices;
                } else
                {
                    v = geometry::symmetrize(m, *symmetry).vertices;
                }
                t.data.col(t.column(c * n_id + i, e)) = geometry::as_vector(v);
            }
        }
    }
    if (expression_labels.empty())
    {
        for (int e = 0; e < n_ex; ++e)
        {
            expression_labels.push_back(std::to_string(e));
        }
    }
    if (static_cast<int>(expression_labels.size()) != n_ex)
    {
        throw InvalidArgument("assemble_tensor: expression label count mismatch");
    }
    t.expression_labels = std::move(expression_labels);
    return t;
}

inline constexpr std::string_view kTensorMagic = "BFTENSOR";
inline constexpr std::uint32_t kTensorVersion = 1;

inline std::string tensor_to_binary(const ShapeTensor& t)
{
    BinaryWriter w(kTensorMagic, kTensorVersion);
    w.u64(static_cast<std::uint64_t>(t.n_id));
    w.u64(static_cast<std::uint64_t>(t.n_ex));
    w.matrix(t.data);
    for (const auto* labels : {&t.identity_labels, &t.expression_labels})
    {
        w.u64(labels->size());
        for (const auto& s : *labels)
        {
            w.string(s);
        }
    }
    return w.bytes();
}

inline ShapeTensor tensor_from_binary(std::string bytes)
{
    BinaryReader r(std::move(bytes), kTensorMagic, kTensorVersion);
    ShapeTensor t;
    t.n_id = static_cast<int>(r.u64());
    t.n_ex = static_cast<int>(r.u64());
    t.data = r.matrix();
    for (auto* labels : {&t.identity_labels, &t.expression_labels})
    {
        const auto n = r.u64();
        for (std::uint64_t k = 0; k < n; ++k)
        {
            labels->push_back(r.string());
        }
    }
    if (!r.at_end())
    {
        throw ParseError("trailing bytes in tensor file");
    }
    if (t.data.cols() != static_cast<Eigen::Index>(t.n_id) * t.n_ex ||
        t.identity_labels.size() != static_cast<std::size_t>(t.n_id) ||
        t.expression_labels.size() != static_cast<std::size_t>(t.n_ex))
    {
        throw ParseError("tensor file: inconsistent dimensions");
    }
    return t;
}

inline void save_tensor(const ShapeTensor& t, const std::filesystem::path& path)
{
    write_file_atomic(path, tensor_to_binary(t));
}

inline ShapeTensor load_tensor(const std::filesystem::path& path) { return tensor_from_binary(read_file(path)); }

} // namespace bilinear
} // namespace bilinflow

#endif /* BILINFLOW_BILINEAR_SHAPE_TENSOR_HPP */
