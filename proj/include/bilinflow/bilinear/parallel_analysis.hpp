/*
 * bilinflow - bilinear identity/expression face models with normalizing flows.
 *
 * File: include/bilinflow/bilinear/parallel_analysis.hpp
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

#ifndef BILINFLOW_BILINEAR_PARALLEL_ANALYSIS_HPP
#define BILINFLOW_BILINEAR_PARALLEL_ANALYSIS_HPP

#include "bilinflow/core/error.hpp"

#include "Eigen/Core"
#include "Eigen/Eigenvalues"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace bilinflow {
namespace bilinear {

struct ParallelAnalysisResult
{
    int components = 0;
    Eigen::VectorXd eigenvalues; ///< Sample covariance eigenvalues, descending.
    Eigen::VectorXd thresholds;  ///< Per-index percentile over permuted surrogates.
};

namespace detail {

/// Covariance spectrum of column-centred data, descending, length min(n, d).
inline Eigen::VectorXd covariance_spectrum(const Eigen::MatrixXd& centred)
{
    const Eigen::Index n = centred.rows();
    const Eigen::MatrixXd gram =
        centred.cols() <= n ? Eigen::MatrixXd(centred.transpose() * centred) : Eigen::MatrixXd(centred * centred.transpose());
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram, Eigen::EigenvaluesOnly);
    Eigen::VectorXd values = eig.eigenvalues().reverse().cwiseMax(0.0) / static_cast<double>(n - 1);
    return values;
}

} // namespace detail

/**
 * Horn's parallel analysis on a samples x dims matrix. Every surrogate
 * permutes each column independently (destroying cross-column correlation
 * but keeping marginals). A component is significant while its sample
 * eigenvalue exceeds the `percentile` (nearest-rank) of the surrogate
 * eigenvalues at the same index; counting stops at the first failure.
 */
inline ParallelAnalysisResult parallel_analysis(const Eigen::MatrixXd& data, int permutations, std::uint64_t seed,
                                                double percentile = 0.95)
{
    const Eigen::Index n = data.rows();
    if (n < 3)
    {
        throw InvalidArgument("parallel_analysis: need at least 3 samples");
    }
    if (permutations < 1)
    {
        throw InvalidArgument("parallel_analysis: need at least one permutation");
    }
    const Eigen::RowVectorXd mean = data.colwise().mean();
    const Eigen::MatrixXd centred = data.rowwise() - mean;

    ParallelAnalysisResult r;
    r.eigenvalues = detail::covariance_spectrum(centred);
    const Eigen::Index k = r.eigenvalues.size();

    std::mt19937_64 rng(seed);
    Eigen::MatrixXd surrogate_values(k, permutations);
    Eigen::MatrixXd shuffled = centred;
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    for (int p = 0; p < permutations; ++p)
    {
        for (Eigen::Index c = 0; c < data.cols(); ++c)
        {
            for (Eigen::Index i = 0; i < n; ++i)
            {
                order[static_cast<std::size_t>(i)] = i;
            }
            std::shuffle(order.begin(), order.end(), rng);
            for (Eigen::Index i = 0; i < n; ++i)
            {
                shuffled(i, c) = centred(order[static_cast<std::size_t>(i)], c);
            }
        }
        surrogate_values.col(p) = detail::covariance_spectrum(shuffled);
    }

    r.thresholds.resize(k);
    const auto rank = static_cast<Eigen::Index>(std::ceil(percentile * permutations)) - 1;
    std::vector<double> row(static_cast<std::size_t>(permutations));
    for (Eigen::Index j = 0; j < k; ++j)
    {
        for (int p = 0; p < permutations; ++p)
        {
            row[static_cast<std::size_t>(p)] = surrogate_values(j, p);
        }
        std::sort(row.begin(), row.end());
        r.thresholds(j) = row[static_cast<std::size_t>(std::clamp<Eigen::Index>(rank, 0, permutations - 1))];
    }
    while (r.components < k && r.eigenvalues(r.components) > r.thresholds(r.components))
    {
        ++r.components;
    }
    return r;
}

} // namespace bilinear
} // namespace bilinflow

#endif /* BILINFLOW_BILINEAR_PARALLEL_ANALYSIS_HPP */
