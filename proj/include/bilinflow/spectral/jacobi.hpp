/*
 * bilinflow - bilinear identity/expression face models with normalizing flows.
 *
 * File: include/bilinflow/spectral/jacobi.hpp
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

#ifndef BILINFLOW_SPECTRAL_JACOBI_HPP
#define BILINFLOW_SPECTRAL_JACOBI_HPP

#include "bilinflow/core/error.hpp"

#include "Eigen/Core"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace bilinflow {
namespace spectral {

struct SymmetricEigen
{
    Eigen::VectorXd values;  ///< Ascending.
    Eigen::MatrixXd vectors; ///< Orthonormal columns, matching `values`.
};

/**
 * Eigen-decomposition of a dense symmetric matrix by cyclic Jacobi rotations.
 *
 * Sweeps over all off-diagonal pairs until the off-diagonal Frobenius norm
 * drops below 1e-15 times the matrix norm (or 100 sweeps). Eigenvalues are
 * returned ascending; each eigenvector's sign is fixed so that its
 * largest-magnitude component (first such index on ties) is positive.
 */
inline SymmetricEigen jacobi_eigen(const Eigen::MatrixXd& input, double symmetry_tolerance = 1e-12)
{
    const Eigen::Index n = input.rows();
    if (input.cols() != n)
    {
        throw InvalidArgument("jacobi_eigen: matrix is not square");
    }
    const double scale = std::max(input.cwiseAbs().maxCoeff(), 1e-300);
    if ((input - input.transpose()).cwiseAbs().maxCoeff() > symmetry_tolerance * scale)
    {
        throw InvalidArgument("jacobi_eigen: matrix is not symmetric");
    }

    Eigen::MatrixXd a = 0.5 * (input + input.transpose());
    Eigen::MatrixXd v = Eigen::MatrixXd::Identity(n, n);
    const double total = a.norm();

    for (int sweep = 0; sweep < 100; ++sweep)
    {
        double off = 0.0;
        for (Eigen::Index p = 0; p < n; ++p)
            for (Eigen::Index q = p + 1; q < n; ++q)
                off += a(p, q) * a(p, q);
        if (std::sqrt(2.0 * off) <= 1e-15 * total || off == 0.0)
        {
            break;
        }
        for (Eigen::Index p = 0; p < n; ++p)
        {
            for (Eigen::Index q = p + 1; q < n; ++q)
            {
                const double apq = a(p, q);
                if (apq == 0.0)
                {
                    continue;
                }
                const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                // A <- J^T A J with the rotation acting on rows/cols p and q.
                for (Eigen::Index k = 0; k < n; ++k)
                {
                    const double akp = a(k, p);
                    const double akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (Eigen::Index k = 0; k < n; ++k)
                {
                    const double apk = a(p, k);
                    const double aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
                a(p, q) = 0.0;
                a(q, p) = 0.0;
                for (Eigen::Index k = 0; k < n; ++k)
                {
                    const double vkp = v(k, p);
                    const double vkq = v(k, q);
                    v(k, p) = c * vkp - s * vkq;
                    v(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }

    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::stable_sort(order.begin(), order.end(), [&](Eigen::Index i, Eigen::Index j) { return a(i, i) < a(j, j); });

    SymmetricEigen out;
    out.values.resize(n);
    out.vectors.resize(n, n);
    for (Eigen::Index k = 0; k < n; ++k)
    {
        const Eigen::Index src = order[static_cast<std::size_t>(k)];
        out.values(k) = a(src, src);
        Eigen::VectorXd col = v.col(src);
        Eigen::Index arg = 0;
        double best = -1.0;
        for (Eigen::Index i = 0; i < n; ++i)
        {
            if (std::abs(col(i)) > best + 1e-12)
            {
                best = std::abs(col(i));
                arg = i;
            }
        }
        if (col(arg) < 0.0)
        {
            col = -col;
        }
        out.vectors.col(k) = col;
    }
    return out;
}

} // namespace spectral
} // namespace bilinflow

#endif /* BILINFLOW_SPECTRAL_JACOBI_HPP */
