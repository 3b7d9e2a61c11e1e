/*
 * bilinflow - bilinear identity/expression face models with normalizing flows.
 *
 * File: include/bilinflow/transfer/expression_transfer.hpp
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

#ifndef BILINFLOW_TRANSFER_EXPRESSION_TRANSFER_HPP
#define BILINFLOW_TRANSFER_EXPRESSION_TRANSFER_HPP

#include "bilinflow/core/error.hpp"
#include "bilinflow/correspondence/barycentric_map.hpp"
#include "bilinflow/geometry/mesh.hpp"
#include "bilinflow/transfer/expression_bank.hpp"

#include "Eigen/Core"

#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

namespace bilinflow {
namespace transfer {

struct TransferOptions
{
    double intensity = 1.0; ///< delta
    int ensemble = 40;      ///< kappa; must not exceed the number of bank subjects.
    std::uint64_t seed = 1;
};

struct TransferResult
{
    geometry::Mesh mesh;
    std::vector<int> subjects; ///< Bank subject indices used, in sampling order.
};

/// First `count` entries of a seeded Fisher-Yates shuffle of 0..n-1.
inline std::vector<int> sample_without_replacement(int n, int count, std::uint64_t seed)
{
    if (count < 1 || count > n)
    {
        throw InvalidArgument("cannot sample " + std::to_string(count) + " of " + std::to_string(n) + " subjects");
    }
    std::vector<int> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(seed);
    for (int i = 0; i < count; ++i)
    {
        std::uniform_int_distribution<int> pick(i, n - 1);
        std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick(rng))]);
    }
    idx.resize(static_cast<std::size_t>(count));
    return idx;
}

/**
 * Transfers the change from expression `source_aus` to `target_aus` onto an
 * infant mesh for a fixed list of bank subjects:
 *
 *     X_e = X_s + delta * mean_k map(D_k),   D_k = Y_{k,e} - Y_{k,s}
 *
 * Members are summed in list order.
 */
inline geometry::Mesh transfer_with_subjects(const geometry::Mesh& infant, const std::vector<int>& source_aus,
                                             const std::vector<int>& target_aus, const ExpressionBank& bank,
                                             const correspondence::BarycentricMap& map, double intensity,
                                             const std::vector<int>& subjects)
{
    if (bank.num_subjects() == 0)
    {
        throw InvalidArgument("transfer: expression bank is empty");
    }
    if (map.target_vertex_count != infant.num_vertices() || map.source_vertex_count != bank.num_vertices())
    {
        throw InvalidArgument("transfer: map is " + std::to_string(map.source_vertex_count) + " -> " +
                              std::to_string(map.target_vertex_count) + " vertices, need " +
                              std::to_string(bank.num_vertices()) + " -> " + std::to_string(infant.num_vertices()));
    }
    if (!(intensity >= 0.0))
    {
        throw InvalidArgument("transfer: intensity must be non-negative");
    }
    if (subjects.empty())
    {
        throw InvalidArgument("transfer: empty subject ensemble");
    }
    Eigen::Matrix3Xd sum = Eigen::Matrix3Xd::Zero(3, infant.num_vertices());
    for (int s : subjects)
    {
        sum += correspondence::apply_map(map, deformation(bank, s, source_aus, target_aus));
    }
    geometry::Mesh out = infant;
    if (intensity != 0.0)
    {
        out.vertices += (intensity / static_cast<double>(subjects.size())) * sum;
    }
    return out;
}

/// Samples `options.ensemble` subjects without replacement (seeded) and transfers.
inline TransferResult transfer_expression(const geometry::Mesh& infant, const std::vector<int>& source_aus,
                                          const std::vector<int>& target_aus, const ExpressionBank& bank,
                                          const correspondence::BarycentricMap& map, const TransferOptions& options)
{
    if (bank.num_subjects() == 0)
    {
        throw InvalidArgument("transfer: expression bank is empty");
    }
    TransferResult r;
    r.subjects = sample_without_replacement(bank.num_subjects(), options.ensemble, options.seed);
    r.mesh = transfer_with_subjects(infant, source_aus, target_aus, bank, map, options.intensity, r.subjects);
    return r;
}

/**
 * Number of faces whose orientation flips (normal reverses) or that collapse
 * to zero area between `before` and `after`. A transfer is accepted when this
 * is zero.
 */
inline int count_flipped_faces(const geometry::Mesh& before, const Eigen::Matrix3Xd& after)
{
    if (after.cols() != before.num_vertices())
    {
        throw InvalidArgument("count_flipped_faces: vertex count mismatch");
    }
    int flipped = 0;
    for (const auto& f : before.faces)
    {
        const Eigen::Vector3d n0 = geometry::face_normal(before.vertices, f);
        const Eigen::Vector3d n1 = geometry::face_normal(after, f);
        if (n0.dot(n1) <= 0.0)
        {
            ++flipped;
        }
    }
    return flipped;
}

} // namespace transfer
} // namespace bilinflow

#endif /* BILINFLOW_TRANSFER_EXPRESSION_TRANSFER_HPP */
