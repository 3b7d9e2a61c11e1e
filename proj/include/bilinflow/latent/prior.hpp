/*
 * bilinflow - bilinear identity/expression face models with normalizing flows.
 *
 * File: include/bilinflow/latent/prior.hpp
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

#ifndef BILINFLOW_LATENT_PRIOR_HPP
#define BILINFLOW_LATENT_PRIOR_HPP

#include "bilinflow/core/error.hpp"

#include "Eigen/Core"
#include "Eigen/Eigenvalues"

#include <cmath>
#include <random>
#include <string>

namespace bilinflow {
namespace latent {

/// Gaussian N(mean, covariance) with a precomputed symmetric inverse square root.
struct GaussianPrior
{
    Eigen::VectorXd mean;
    Eigen::MatrixXd covariance;
    Eigen::MatrixXd whitener; ///< Sigma^{-1/2}, symmetric.

    Eigen::Index dim() const { return mean.size(); }
};

/**
 * Builds a prior from a mean and covariance. Eigenvalues below zero are
 * clipped to zero; the whitener uses a floor of 1e-12 * trace / d so that
 * rank-deficient covariances remain usable.
 */
inline GaussianPrior make_prior(Eigen::VectorXd mean, const Eigen::MatrixXd& covariance)
{
    const Eigen::Index d = mean.size();
    if (d == 0 || covariance.rows() != d || covariance.cols() != d)
    {
        throw InvalidArgument("make_prior: covariance must be " + std::to_string(d) + " x " + std::to_string(d));
    }
    const double scale = std::max(1.0, covariance.cwiseAbs().maxCoeff());
    if ((covariance - covariance.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale)
    {
        throw InvalidArgument("make_prior: covariance is not symmetric");
    }
    const Eigen::MatrixXd sym = 0.5 * (covariance + covariance.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sym);
    Eigen::VectorXd values = eig.eigenvalues();
    if (values.minCoeff() < -1e-10 * scale)
    {
        throw InvalidArgument("make_prior: covariance is not positive semi-definite");
    }
    values = values.cwiseMax(0.0);
    const double floor = std::max(1e-12 * values.sum() / static_cast<double>(d), 1e-300);
    GaussianPrior p;
    p.mean = std::move(mean);
    p.covariance = eig.eigenvectors() * values.asDiagonal() * eig.eigenvectors().transpose();
    p.whitener = eig.eigenvectors() * values.cwiseMax(floor).cwiseSqrt().cwiseInverse().asDiagonal() *
                 eig.eigenvectors().transpose();
    return p;
}

/// Unbiased sample mean and covariance of the columns of `samples`.
inline GaussianPrior fit_prior(const Eigen::MatrixXd& samples)
{
    if (samples.cols() < 2)
    {
        throw InvalidArgument("fit_prior: need at least 2 samples, got " + std::to_string(samples.cols()));
    }
    const Eigen::VectorXd mean = samples.rowwise().mean();
    const Eigen::MatrixXd c = samples.colwise() - mean;
    return make_prior(mean, c * c.transpose() / static_cast<double>(samples.cols() - 1));
}

/// |Sigma^{-1/2} (b - mean)|.
inline double mahalanobis(const GaussianPrior& prior, const Eigen::VectorXd& b)
{
    if (b.size() != prior.dim())
    {
        throw InvalidArgument("mahalanobis: dimension mismatch");
    }
    return (prior.whitener * (b - prior.mean)).norm();
}

/// Rescales b - mean so that the Mahalanobis distance of the result is beta.
inline Eigen::VectorXd project_to_hyperellipsoid(const Eigen::VectorXd& b, const GaussianPrior& prior, double beta)
{
    if (!(beta > 0.0))
    {
        throw InvalidArgument("project_to_hyperellipsoid: beta must be positive");
    }
    const double distance = mahalanobis(prior, b);
    if (!(distance > 0.0))
    {
        throw InvalidArgument("project_to_hyperellipsoid: point coincides with the mean, direction undefined");
    }
    return (b - prior.mean) * (beta / distance) + prior.mean;
}

/// `count` draws from the prior (columns), using the symmetric square root of the covariance.
inline Eigen::MatrixXd sample_prior(const GaussianPrior& prior, int count, std::uint64_t seed)
{
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(prior.covariance);
    const Eigen::MatrixXd root =
        eig.eigenvectors() * eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() * eig.eigenvectors().transpose();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    Eigen::MatrixXd z(prior.dim(), count);
    for (Eigen::Index j = 0; j < z.cols(); ++j)
        for (Eigen::Index i = 0; i < z.rows(); ++i)
            z(i, j) = n(rng);
    return (root * z).colwise() + prior.mean;
}

} // namespace latent
} // namespace bilinflow

#endif /* BILINFLOW_LATENT_PRIOR_HPP */
