/*
 * bilinflow - bilinear identity/expression face models with normalizing flows.
 *
 * File: include/bilinflow/spectral/patch.hpp
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

#ifndef BILINFLOW_SPECTRAL_PATCH_HPP
#define BILINFLOW_SPECTRAL_PATCH_HPP

#include "bilinflow/core/error.hpp"
#include "bilinflow/geometry/mesh.hpp"
#include "bilinflow/spectral/jacobi.hpp"

#include "Eigen/Core"

#include <algorithm>
#include <string>
#include <unordered_map>
#include <vector>

namespace bilinflow {
namespace spectral {

/**
 * Vertex neighbourhood of a landmark: all vertices within `rings` edge hops,
 * in breadth-first order (landmark first, then by ring, ascending index
 * within a ring).
 */
struct Patch
{
    int landmark = -1;
    int rings = 0;
    std::vector<int> vertices;
    Eigen::MatrixXd laplacian; ///< n x n, rows/cols in the order of `vertices`.
};

namespace detail {

inline std::vector<int> ring_neighbourhood(const std::vector<std::vector<int>>& adjacency, int landmark, int rings)
{
    std::vector<int> order{landmark};
    std::unordered_map<int, int> seen{{landmark, 0}};
    std::size_t ring_begin = 0;
    for (int r = 0; r < rings; ++r)
    {
        const std::size_t ring_end = order.size();
        std::vector<int> next;
        for (std::size_t k = ring_begin; k < ring_end; ++k)
        {
            for (int nb : adjacency[static_cast<std::size_t>(order[k])])
            {
                if (seen.emplace(nb, 0).second)
                {
                    next.push_back(nb);
                }
            }
        }
        std::sort(next.begin(), next.end());
        order.insert(order.end(), next.begin(), next.end());
        ring_begin = ring_end;
        if (next.empty())
        {
            break;
        }
    }
    return order;
}

inline Eigen::MatrixXd induced_laplacian(const std::vector<std::vector<int>>& adjacency, const std::vector<int>& vertices)
{
    std::unordered_map<int, int> local;
    for (std::size_t i = 0; i < vertices.size(); ++i)
    {
        local.emplace(vertices[i], static_cast<int>(i));
    }
    const auto n = static_cast<Eigen::Index>(vertices.size());
    Eigen::MatrixXd L = Eigen::MatrixXd::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
    {
        for (int nb : adjacency[static_cast<std::size_t>(vertices[static_cast<std::size_t>(i)])])
        {
            const auto it = local.find(nb);
            if (it != local.end())
            {
                L(i, it->second) = -1.0;
                L(i, i) += 1.0;
            }
        }
    }
    return L;
}

inline void check_landmark(const geometry::Mesh& mesh, const std::vector<std::vector<int>>& adjacency, int landmark)
{
    if (landmark < 0 || landmark >= mesh.num_vertices())
    {
        throw InvalidArgument("landmark " + std::to_string(landmark) + " is not a vertex of the mesh");
    }
    if (adjacency[static_cast<std::size_t>(landmark)].empty())
    {
        throw InvalidArgument("landmark " + std::to_string(landmark) + " is isolated (no incident edges)");
    }
}

} // namespace detail

/**
 * Combinatorial graph Laplacian L = Degree - Adjacency of the `rings`-hop
 * patch around `landmark`. Only edges with both endpoints inside the patch
 * count, so every row sums to zero.
 */
inline Patch patch_laplacian(const geometry::Mesh& mesh, int landmark, int rings)
{
    const auto adjacency = geometry::vertex_adjacency(mesh);
    detail::check_landmark(mesh, adjacency, landmark);
    if (rings < 1)
    {
        throw InvalidArgument("patch_laplacian: rings must be at least 1");
    }
    Patch patch;
    patch.landmark = landmark;
    patch.rings = rings;
    patch.vertices = detail::ring_neighbourhood(adjacency, landmark, rings);
    if (patch.vertices.size() < 3)
    {
        throw InvalidArgument("patch around landmark " + std::to_string(landmark) + " has fewer than 3 vertices");
    }
    patch.laplacian = detail::induced_laplacian(adjacency, patch.vertices);
    return patch;
}

/// Eigenpairs of a patch Laplacian restricted to the tau smallest eigenvalues.
struct SpectralBasis
{
    Eigen::VectorXd eigenvalues; ///< tau values, ascending.
    Eigen::MatrixXd basis;       ///< n x tau, orthonormal columns.
};

inline SpectralBasis spectral_embedding(const Eigen::MatrixXd& laplacian, int tau)
{
    if (tau < 1 || tau > laplacian.rows())
    {
        throw InvalidArgument("spectral_embedding: tau = " + std::to_string(tau) + " outside [1, " +
                              std::to_string(laplacian.rows()) + "]");
    }
    const SymmetricEigen eig = jacobi_eigen(laplacian);
    return {eig.values.head(tau), eig.vectors.leftCols(tau)};
}

/// Patch, its rings count and its truncated spectral basis.
struct PatchSpectrum
{
    int landmark = -1;
    int rings = 0;
    std::vector<int> vertices;
    Eigen::VectorXd eigenvalues;
    Eigen::MatrixXd basis;

    int tau() const { return static_cast<int>(basis.cols()); }
};

/**
 * Grows the ring count around `landmark` until the patch holds at least
 * tau + 5 vertices, then embeds it. Throws when the connected component of
 * the landmark is too small.
 */
inline PatchSpectrum patch_spectrum(const geometry::Mesh& mesh, const std::vector<std::vector<int>>& adjacency,
                                    int landmark, int tau)
{
    detail::check_landmark(mesh, adjacency, landmark);
    const std::size_t wanted = static_cast<std::size_t>(tau) + 5;
    std::vector<int> vertices;
    int rings = 0;
    while (vertices.size() < wanted)
    {
        ++rings;
        auto grown = detail::ring_neighbourhood(adjacency, landmark, rings);
        if (grown.size() == vertices.size())
        {
            throw InvalidArgument("component around landmark " + std::to_string(landmark) + " has only " +
                                  std::to_string(grown.size()) + " vertices, need " + std::to_string(wanted));
        }
        vertices = std::move(grown);
    }
    const SpectralBasis sb = spectral_embedding(detail::induced_laplacian(adjacency, vertices), tau);
    return {landmark, rings, std::move(vertices), sb.eigenvalues, sb.basis};
}

inline std::vector<PatchSpectrum> patch_spectra(const geometry::Mesh& mesh, const std::vector<int>& landmarks, int tau)
{
    const auto adjacency = geometry::vertex_adjacency(mesh);
    std::vector<PatchSpectrum> out;
    out.reserve(landmarks.size());
    for (int lm : landmarks)
    {
        out.push_back(patch_spectrum(mesh, adjacency, lm, tau));
    }
    return out;
}

/**
 * Spectral coefficients of per-vertex patch signals: Omega = Phi^T v for
 * each column of `patch_signal` (n x channels). Output is channel-major:
 * tau coefficients of channel 0, then channel 1, ...
 */
inline Eigen::VectorXd project_patch(const Eigen::MatrixXd& basis, const Eigen::MatrixXd& patch_signal)
{
    if (patch_signal.rows() != basis.rows())
    {
        throw InvalidArgument("project_patch: signal has " + std::to_string(patch_signal.rows()) +
                              " rows, patch has " + std::to_string(basis.rows()) + " vertices");
    }
    const Eigen::MatrixXd omega = basis.transpose() * patch_signal;
    return Eigen::Map<const Eigen::VectorXd>(omega.data(), omega.size());
}

/// Projects the x, y, z coordinates of the patch vertices of `mesh_vertices`: a 3*tau vector (x block, y, z).
inline Eigen::VectorXd project_patch(const PatchSpectrum& spectrum, const Eigen::Matrix3Xd& mesh_vertices)
{
    Eigen::MatrixXd signal(static_cast<Eigen::Index>(spectrum.vertices.size()), 3);
    for (std::size_t i = 0; i < spectrum.vertices.size(); ++i)
    {
        const int v = spectrum.vertices[i];
        if (v < 0 || v >= mesh_vertices.cols())
        {
            throw InvalidArgument("project_patch: mesh has no vertex " + std::to_string(v));
        }
        signal.row(static_cast<Eigen::Index>(i)) = mesh_vertices.col(v).transpose();
    }
    return project_patch(spectrum.basis, signal);
}

/// Layout identifier of the stacked feature vector produced by au_features().
inline constexpr const char* kFeatureLayout = "landmark-major/xyz-channel/tau-coefficient/v1";

/**
 * Stacked descriptor of a mesh: for each spectrum in order, the 3*tau vector
 * of project_patch(). Length 3 * tau * landmarks.
 */
inline Eigen::VectorXd au_features(const std::vector<PatchSpectrum>& spectra, const Eigen::Matrix3Xd& mesh_vertices)
{
    Eigen::Index total = 0;
    for (const auto& s : spectra)
    {
        total += 3 * s.tau();
    }
    Eigen::VectorXd out(total);
    Eigen::Index offset = 0;
    for (const auto& s : spectra)
    {
        const Eigen::VectorXd omega = project_patch(s, mesh_vertices);
        out.segment(offset, omega.size()) = omega;
        offset += omega.size();
    }
    return out;
}

} // namespace spectral
} // namespace bilinflow

#endif /* BILINFLOW_SPECTRAL_PATCH_HPP */
