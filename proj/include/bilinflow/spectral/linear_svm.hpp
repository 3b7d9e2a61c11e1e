/*
 * bilinflow - bilinear identity/expression face models with normalizing flows.
 *
 * File: include/bilinflow/spectral/linear_svm.hpp
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

#ifndef BILINFLOW_SPECTRAL_LINEAR_SVM_HPP
#define BILINFLOW_SPECTRAL_LINEAR_SVM_HPP

#include "bilinflow/core/error.hpp"

#include "Eigen/Core"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

namespace bilinflow {
namespace spectral {

struct SvmOptions
{
    std::uint64_t seed = 1;
    int max_epochs = 2000;
    /// Stop once the spread of projected dual gradients in an epoch falls below this.
    double tolerance = 1e-8;
};

/**
 * Soft-margin linear SVM, decision f(x) = w^T x + b. The bias is learned as
 * the weight of a constant feature 1 and is therefore regularised:
 *
 *     min 0.5 (|w|^2 + b^2) + C sum_i max(0, 1 - y_i f(x_i))
 */
struct LinearSvm
{
    Eigen::VectorXd weights;
    double bias = 0.0;
    double C = 1.0;
    int epochs = 0;
    /// Dual objective 0.5 |w_aug|^2 - sum(alpha) after each epoch (minimised, nonincreasing).
    std::vector<double> dual_objective;

    double decision(const Eigen::VectorXd& x) const { return weights.dot(x) + bias; }
};

/// Primal objective of (w, b) on examples stored as columns of `X`.
inline double svm_primal_objective(const Eigen::MatrixXd& X, const std::vector<int>& labels, double C,
                                   const Eigen::VectorXd& w, double b)
{
    double hinge = 0.0;
    for (Eigen::Index i = 0; i < X.cols(); ++i)
    {
        hinge += std::max(0.0, 1.0 - labels[static_cast<std::size_t>(i)] * (w.dot(X.col(i)) + b));
    }
    return 0.5 * (w.squaredNorm() + b * b) + C * hinge;
}

namespace detail {

inline void check_svm_inputs(const Eigen::MatrixXd& X, const std::vector<int>& labels, double C)
{
    if (static_cast<std::size_t>(X.cols()) != labels.size())
    {
        throw InvalidArgument("svm: " + std::to_string(X.cols()) + " examples but " + std::to_string(labels.size()) +
                              " labels");
    }
    if (!(C > 0.0) || !std::isfinite(C))
    {
        throw InvalidArgument("svm: regularisation constant C must be positive");
    }
    bool pos = false;
    bool neg = false;
    for (int y : labels)
    {
        if (y != 1 && y != -1)
        {
            throw InvalidArgument("svm: labels must be +1 or -1");
        }
        (y > 0 ? pos : neg) = true;
    }
    if (!pos || !neg)
    {
        throw InvalidArgument("svm: training data contains a single class");
    }
}

} // namespace detail

/**
 * Dual coordinate descent (Hsieh et al. 2008, L1-loss) over examples stored
 * as columns of `X`. Each epoch visits the examples in a seeded random order
 * and minimises the dual exactly along each coordinate, so the recorded dual
 * objective never increases.
 */
inline LinearSvm train_linear_svm(const Eigen::MatrixXd& X, const std::vector<int>& labels, double C,
                                  const SvmOptions& options = {})
{
    detail::check_svm_inputs(X, labels, C);
    const Eigen::Index n = X.cols();
    const Eigen::Index d = X.rows();

    Eigen::VectorXd w = Eigen::VectorXd::Zero(d);
    double b = 0.0;
    Eigen::VectorXd alpha = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd qii(n);
    for (Eigen::Index i = 0; i < n; ++i)
    {
        qii(i) = X.col(i).squaredNorm() + 1.0;
    }

    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::mt19937_64 rng(options.seed);

    LinearSvm out;
    out.C = C;
    for (int epoch = 0; epoch < options.max_epochs; ++epoch)
    {
        std::shuffle(order.begin(), order.end(), rng);
        double pg_max = -std::numeric_limits<double>::infinity();
        double pg_min = std::numeric_limits<double>::infinity();
        for (Eigen::Index i : order)
        {
            const double y = labels[static_cast<std::size_t>(i)];
            const double g = y * (w.dot(X.col(i)) + b) - 1.0;
            double pg = g;
            if (alpha(i) == 0.0)
            {
                pg = std::min(g, 0.0);
            } else if (alpha(i) == C)
            {
                pg = std::max(g, 0.0);
            }
            pg_max = std::max(pg_max, pg);
            pg_min = std::min(pg_min, pg);
            if (pg != 0.0)
            {
                const double old = alpha(i);
                alpha(i) = std::clamp(old - g / qii(i), 0.0, C);
                const double delta = (alpha(i) - old) * y;
                w += delta * X.col(i);
                b += delta;
            }
        }
        out.epochs = epoch + 1;
        out.dual_objective.push_back(0.5 * (w.squaredNorm() + b * b) - alpha.sum());
        if (pg_max - pg_min < options.tolerance)
        {
            break;
        }
    }
    out.weights = w;
    out.bias = b;
    return out;
}

} // namespace spectral
} // namespace bilinflow

#endif /* BILINFLOW_SPECTRAL_LINEAR_SVM_HPP */
