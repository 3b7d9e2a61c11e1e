/*
 * bilinflow - bilinear identity/expression face models with normalizing flows.
 *
 * File: tests/test_latent.cpp
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
#include "bilinflow/latent/chi2.hpp"
#include "bilinflow/latent/latent_code.hpp"
#include "bilinflow/latent/prior.hpp"

#include "test_util.hpp"

#include "Eigen/Cholesky"
#include "boost/math/distributions/chi_squared.hpp"
#include "gtest/gtest.h"

#include <cmath>
#include <random>

using namespace bilinflow;
using namespace bilinflow::latent;

namespace {

/// Mahalanobis distance through a Cholesky solve, independent of the prior's whitener.
double cholesky_mahalanobis(const Eigen::MatrixXd& cov, const Eigen::VectorXd& mean, const Eigen::VectorXd& b)
{
    const Eigen::LLT<Eigen::MatrixXd> llt(cov);
    return llt.matrixL().solve(b - mean).norm();
}

Eigen::MatrixXd random_spd(std::mt19937_64& rng, int d)
{
    const Eigen::MatrixXd a = test::random_matrix(rng, d, d);
    Eigen::VectorXd scales(d);
    for (int k = 0; k < d; ++k)
        scales(k) = std::pow(10.0, -1.0 + 2.0 * k / std::max(1, d - 1));
    return a * scales.asDiagonal() * a.transpose() + 1e-3 * Eigen::MatrixXd::Identity(d, d);
}

LatentCode code(std::initializer_list<double> v, Space s = Space::expression, Coords c = Coords::post_flow)
{
    LatentCode out;
    out.values = Eigen::Map<const Eigen::VectorXd>(v.begin(), static_cast<Eigen::Index>(v.size()));
    out.space = s;
    out.coords = c;
    return out;
}

} // namespace

// ---------------------------------------------------------------------------
// Prior

TEST(Prior, TwoSamplesByHand)
{
    Eigen::MatrixXd x(2, 2);
    x << 0, 2, 0, 0;
    const GaussianPrior p = fit_prior(x);
    EXPECT_TRUE(p.mean.isApprox(Eigen::Vector2d(1.0, 0.0)));
    EXPECT_NEAR((p.covariance - Eigen::Vector2d(2.0, 0.0).asDiagonal().toDenseMatrix()).norm(), 0.0, 1e-14);
    EXPECT_THROW(fit_prior(x.leftCols(1)), InvalidArgument);
}

TEST(Prior, StandardGaussianCovariance)
{
    std::mt19937_64 rng(1);
    const GaussianPrior p = fit_prior(test::random_matrix(rng, 3, 10000));
    EXPECT_LT((p.covariance - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff(), 0.1);
}

TEST(Prior, AffinePushForward)
{
    std::mt19937_64 rng(2);
    const int n = 20000;
    const Eigen::MatrixXd x = test::random_matrix(rng, 3, n);
    const Eigen::MatrixXd a = test::random_matrix(rng, 3, 3);
    const Eigen::Vector3d b(1.0, -2.0, 5.0);
    const GaussianPrior p = fit_prior((a * x).colwise() + b);
    const GaussianPrior q = fit_prior(x);
    // Sample moments transform exactly; compare against the push-forward of the source moments.
    EXPECT_LT((p.mean - (a * q.mean + b)).norm(), 1e-10);
    EXPECT_LT((p.covariance - a * q.covariance * a.transpose()).norm(), 1e-9 * p.covariance.norm());
    // And the population values within sampling error.
    EXPECT_LT((p.covariance - a * a.transpose()).norm(), 0.05 * (a * a.transpose()).norm());
}

TEST(Prior, WhitenerInvertsCovariance)
{
    std::mt19937_64 rng(3);
    const Eigen::MatrixXd cov = random_spd(rng, 6);
    const GaussianPrior p = make_prior(Eigen::VectorXd::Zero(6), cov);
    EXPECT_LT((p.whitener * cov * p.whitener - Eigen::MatrixXd::Identity(6, 6)).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_LT((p.whitener - p.whitener.transpose()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Prior, RejectsAsymmetricOrIndefinite)
{
    Eigen::Matrix2d bad;
    bad << 1, 0.5, 0, 1;
    EXPECT_THROW(make_prior(Eigen::Vector2d::Zero(), bad), InvalidArgument);
    EXPECT_THROW(make_prior(Eigen::Vector2d::Zero(), -Eigen::Matrix2d::Identity()), InvalidArgument);
    EXPECT_THROW(make_prior(Eigen::Vector2d::Zero(), Eigen::Matrix3d::Identity()), InvalidArgument);
}

TEST(Prior, SamplesMatchCovariance)
{
    std::mt19937_64 rng(4);
    const Eigen::MatrixXd cov = random_spd(rng, 3);
    const GaussianPrior p = make_prior(Eigen::Vector3d(1, 2, 3), cov);
    const GaussianPrior q = fit_prior(sample_prior(p, 40000, 5));
    EXPECT_LT((q.covariance - cov).norm(), 0.05 * cov.norm());
    EXPECT_EQ(sample_prior(p, 10, 6), sample_prior(p, 10, 6));
}

// ---------------------------------------------------------------------------
// Chi-squared

TEST(Chi2, TableValue)
{
    EXPECT_NEAR(chi2_quantile(1, 0.99), 6.6349, 1e-4);
}

TEST(Chi2, TwoDofClosedForm)
{
    EXPECT_NEAR(chi2_quantile(2, 1.0 - std::exp(-1.0)), 2.0, 1e-10);
    for (double rho : {0.1, 0.5, 0.9, 0.999})
        EXPECT_NEAR(chi2_quantile(2, rho), -2.0 * std::log(1.0 - rho), 1e-9);
}

TEST(Chi2, MatchesBoostQuantile)
{
    for (int dof : {1, 2, 3, 7, 12, 26, 60, 136})
    {
        for (double rho : {0.01, 0.3, 0.5, 0.9, 0.95, 0.99, 0.9999})
        {
            const double oracle = boost::math::quantile(boost::math::chi_squared(dof), rho);
            EXPECT_NEAR(chi2_quantile(dof, rho), oracle, 1e-6 * std::max(1.0, oracle)) << dof << " " << rho;
        }
    }
}

TEST(Chi2, CdfInvertsQuantile)
{
    for (int dof : {1, 4, 26})
        for (double rho : {0.05, 0.5, 0.99})
            EXPECT_NEAR(chi2_cdf(chi2_quantile(dof, rho), dof), rho, 1e-6);
}

TEST(Chi2, MonotoneInDofAndConfidence)
{
    for (int dof = 1; dof <= 40; ++dof)
    {
        double previous = 0.0;
        for (int k = 1; k <= 19; ++k)
        {
            const double beta = chi2_critical(dof, k / 20.0);
            EXPECT_GT(beta, previous);
            EXPECT_GT(chi2_critical(dof + 1, k / 20.0), beta);
            previous = beta;
        }
    }
}

TEST(Chi2, ReferenceTriplesDifferFromQuantiles)
{
    // The preset betas are carried verbatim; the standard quantiles at rho = 0.99 are larger.
    const SamplingPreset preset;
    EXPECT_NEAR(chi2_critical(preset.zeta_ex, preset.rho), 4.30, 0.01);
    EXPECT_NEAR(chi2_critical(preset.zeta_id, preset.rho), 6.76, 0.01);
}

TEST(Chi2, RejectsBadArguments)
{
    EXPECT_THROW(chi2_critical(0, 0.5), InvalidArgument);
    EXPECT_THROW(chi2_critical(3, 1.0), InvalidArgument);
    EXPECT_THROW(chi2_critical(3, 0.0), InvalidArgument);
}

// ---------------------------------------------------------------------------
// Projection

TEST(Projection, IsotropicScaling)
{
    const GaussianPrior p = make_prior(Eigen::Vector2d::Zero(), Eigen::Matrix2d::Identity());
    EXPECT_TRUE(project_to_hyperellipsoid(Eigen::Vector2d(2, 0), p, 3.0).isApprox(Eigen::Vector2d(3, 0)));
    EXPECT_THROW(project_to_hyperellipsoid(Eigen::Vector2d::Zero(), p, 3.0), InvalidArgument);
    EXPECT_THROW(project_to_hyperellipsoid(Eigen::Vector2d(1, 0), p, 0.0), InvalidArgument);
}

TEST(Projection, AnisotropicShellAgainstCholeskyOracle)
{
    std::mt19937_64 rng(7);
    const int d = 7;
    const Eigen::MatrixXd cov = random_spd(rng, d);
    const Eigen::VectorXd mean = test::random_vector(rng, d);
    const GaussianPrior p = make_prior(mean, cov);
    const double beta = 4.07;
    const Eigen::MatrixXd b = sample_prior(p, 10000, 8);
    double worst = 0.0, worst_cos = 0.0, worst_idem = 0.0;
    for (Eigen::Index j = 0; j < b.cols(); ++j)
    {
        const Eigen::VectorXd t = project_to_hyperellipsoid(b.col(j), p, beta);
        worst = std::max(worst, std::abs(cholesky_mahalanobis(cov, mean, t) - beta));
        const Eigen::VectorXd u = b.col(j) - mean, v = t - mean;
        worst_cos = std::max(worst_cos, std::abs(u.dot(v) / (u.norm() * v.norm()) - 1.0));
        worst_idem = std::max(worst_idem, (project_to_hyperellipsoid(t, p, beta) - t).cwiseAbs().maxCoeff());
    }
    EXPECT_LT(worst, 1e-8);
    EXPECT_LT(worst_cos, 1e-12);
    EXPECT_LT(worst_idem, 1e-10);
}

TEST(Projection, PointOnShellIsFixed)
{
    std::mt19937_64 rng(9);
    const GaussianPrior p = make_prior(Eigen::VectorXd::Zero(3), random_spd(rng, 3));
    const Eigen::Vector3d b(0.3, -1.0, 2.0);
    const double beta = mahalanobis(p, b);
    EXPECT_LT((project_to_hyperellipsoid(b, p, beta) - b).cwiseAbs().maxCoeff(), 1e-10);
}

// ---------------------------------------------------------------------------
// Codes

TEST(Interpolate, EndpointsAndMidpoint)
{
    const LatentCode a = code({0.1, 0.7}), b = code({2.0, 4.0});
    EXPECT_EQ(interpolate(a, b, 0.0).values, a.values);
    EXPECT_EQ(interpolate(a, b, 1.0).values, b.values);
    EXPECT_TRUE(interpolate(code({0, 0}), b, 0.5).values.isApprox(Eigen::Vector2d(1, 2)));
    EXPECT_THROW(interpolate(a, code({1, 1}, Space::identity), 0.5), InvalidArgument);
    EXPECT_THROW(interpolate(a, code({1, 1}, Space::expression, Coords::pre_flow), 0.5), InvalidArgument);
    EXPECT_THROW(interpolate(a, b, 1.5), InvalidArgument);
}

TEST(NearestNeighbor, SmallCases)
{
    const std::vector<LatentCode> pool = {code({0.0}), code({10.0})};
    EXPECT_EQ(nearest_neighbor(code({4.0}), pool).first, 0u);
    EXPECT_EQ(nearest_neighbor(code({10.0}), pool).first, 1u);
    EXPECT_EQ(nearest_neighbor(code({10.0}), pool).second, 0.0);
    EXPECT_EQ(nearest_neighbor(code({5.0}), pool).first, 0u);
    EXPECT_THROW(nearest_neighbor(code({1.0}), {}), InvalidArgument);
}

TEST(NearestNeighbor, MatchesLinearScan)
{
    std::mt19937_64 rng(10);
    for (int trial = 0; trial < 20; ++trial)
    {
        std::vector<LatentCode> pool(50);
        for (auto& c : pool)
        {
            c.values = test::random_vector(rng, 4);
        }
        LatentCode q;
        q.values = test::random_vector(rng, 4);
        std::size_t oracle = 0;
        for (std::size_t i = 1; i < pool.size(); ++i)
            if ((pool[i].values - q.values).norm() < (pool[oracle].values - q.values).norm())
                oracle = i;
        const auto [index, distance] = nearest_neighbor(q, pool);
        EXPECT_EQ(index, oracle);
        EXPECT_NEAR(distance, (pool[oracle].values - q.values).norm(), 1e-14);
    }
}

TEST(LatentIo, RoundTrip)
{
    test::TempDir dir("latent");
    const LatentCode c = code({1.0 / 3.0, -2e-17, 5.0}, Space::identity, Coords::post_flow);
    save_code(c, dir / "c.txt");
    const LatentCode d = load_code(dir / "c.txt");
    EXPECT_EQ(d.values, c.values);
    EXPECT_EQ(d.space, c.space);
    EXPECT_EQ(d.coords, c.coords);
    EXPECT_THROW(code_from_text("space identity\ncoords q\nvalues 1 0\n"), ParseError);
    EXPECT_THROW(code_from_text("space identity\ncoords w\nvalues 2 0\n"), ParseError);
    EXPECT_THROW(code_from_text("space identity\nvalues 1 0\n"), ParseError);
}
