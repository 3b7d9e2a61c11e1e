/*
 * bilinflow - bilinear identity/expression face models with normalizing flows.
 *
 * File: tests/test_fitting.cpp
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
#include "bilinflow/bilinear/bilinear_model.hpp"
#include "bilinflow/bilinear/shape_tensor.hpp"
#include "bilinflow/fitting/fit.hpp"
#include "bilinflow/fitting/report.hpp"
#include "bilinflow/latent/latent_code.hpp"
#include "bilinflow/latent/prior.hpp"
#include "bilinflow/pipeline/synth.hpp"

#include "test_util.hpp"

#include "Eigen/Cholesky"
#include "Eigen/Geometry"
#include "Eigen/LU"
#include "gtest/gtest.h"

#include <algorithm>
#include <random>

using namespace bilinflow;
using namespace bilinflow::fitting;

namespace {

struct Fixture
{
    pipeline::SyntheticFamily family;
    bilinear::BilinearModel model;
};

const Fixture& fixture()
{
    static const Fixture f = [] {
        Fixture out;
        pipeline::SyntheticFamilySpec spec;
        spec.n_vertices = 200;
        spec.bank_subjects = 2;
        out.family = pipeline::synth_family(spec);
        const auto tensor = bilinear::assemble_tensor(out.family.meshes, nullptr, false);
        out.model = bilinear::hosvd(tensor, 4, 5);
        out.model.faces = out.family.base.faces;
        return out;
    }();
    return f;
}

flow::Flow small_flow(int dim, std::uint64_t seed, double scale = 0.1)
{
    flow::Flow f = flow::make_flow(dim, 4, 8, seed);
    std::mt19937_64 rng(seed + 77);
    flow::set_parameters(f, test::random_vector(rng, flow::parameter_count(f), scale));
    f.mean = test::random_vector(rng, dim, 0.2);
    f.stddev = Eigen::VectorXd::Constant(dim, 0.5);
    return f;
}

geometry::Mesh mesh_from(const bilinear::BilinearModel& m, const Eigen::VectorXd& flat)
{
    geometry::Mesh mesh;
    mesh.faces = m.faces;
    mesh.vertices = geometry::as_points(flat);
    return mesh;
}

/// Alternating least squares on the normal equations, written independently of fit().
double als_energy(const bilinear::BilinearModel& m, const Eigen::VectorXd& target, Eigen::VectorXd w_ex)
{
    const Eigen::VectorXd r = target - m.mean;
    Eigen::VectorXd w_id = Eigen::VectorXd::Zero(m.d_id());
    for (int it = 0; it < 500; ++it)
    {
        Eigen::MatrixXd a = Eigen::MatrixXd::Zero(r.size(), m.d_id());
        for (int b = 0; b < m.d_ex(); ++b)
            for (int k = 0; k < m.d_id(); ++k)
                a.col(k) += w_ex(b) * m.core.col(k + m.d_id() * b);
        w_id = (a.transpose() * a).ldlt().solve(a.transpose() * r);
        Eigen::MatrixXd c(r.size(), m.d_ex());
        for (int b = 0; b < m.d_ex(); ++b)
        {
            c.col(b).setZero();
            for (int k = 0; k < m.d_id(); ++k)
                c.col(b) += w_id(k) * m.core.col(k + m.d_id() * b);
        }
        w_ex = (c.transpose() * c).ldlt().solve(c.transpose() * r);
    }
    Eigen::VectorXd x = m.mean;
    for (int b = 0; b < m.d_ex(); ++b)
        for (int k = 0; k < m.d_id(); ++k)
            x += w_id(k) * w_ex(b) * m.core.col(k + m.d_id() * b);
    return (x - target).squaredNorm();
}

double rms(const Eigen::VectorXd& e) { return std::sqrt(e.squaredNorm() / static_cast<double>(e.size())); }

} // namespace

// ---------------------------------------------------------------------------
// Energy

TEST(Energy, ZeroAtMeanWithIdentityFlows)
{
    const auto& m = fixture().model;
    const EnergyTerms e = energy(m, {}, Eigen::VectorXd::Zero(m.d_id()), Eigen::VectorXd::Zero(m.d_ex()), m.mean, {});
    EXPECT_EQ(e.verts, 0.0);
    EXPECT_EQ(e.prior, 0.0);
    EXPECT_EQ(e.total, 0.0);
}

TEST(Energy, MatchesDenseFormula)
{
    const auto& m = fixture().model;
    std::mt19937_64 rng(1);
    const Eigen::VectorXd z_id = test::random_vector(rng, m.d_id(), 0.3);
    const Eigen::VectorXd z_ex = test::random_vector(rng, m.d_ex(), 0.3);
    const Eigen::VectorXd target = m.mean + test::random_vector(rng, m.dimension());
    FitConfig cfg;
    cfg.gamma1 = 0.7;
    cfg.gamma2 = 0.3;
    Eigen::VectorXd x = Eigen::VectorXd::Zero(m.dimension());
    for (int b = 0; b < m.d_ex(); ++b)
        for (int a = 0; a < m.d_id(); ++a)
            x += z_id(a) * z_ex(b) * m.core.col(a + m.d_id() * b);
    const double verts = (x - (target - m.mean)).squaredNorm();
    double prior = 0.0;
    for (int a = 0; a < m.d_id(); ++a)
        prior += z_id(a) * z_id(a) / std::max(m.lambda_id(a), 1e-10 * m.lambda_id.maxCoeff());
    for (int b = 0; b < m.d_ex(); ++b)
        prior += z_ex(b) * z_ex(b) / std::max(m.lambda_ex(b), 1e-10 * m.lambda_ex.maxCoeff());
    const EnergyTerms e = energy(m, {}, z_id, z_ex, target, cfg);
    EXPECT_NEAR(e.verts, verts, 1e-10 * verts);
    EXPECT_NEAR(e.prior, prior, 1e-10 * prior);
    EXPECT_NEAR(e.total, 0.7 * verts + 0.3 * prior, 1e-10 * e.total);

    cfg.gamma1 = 1.0;
    cfg.gamma2 = 0.0;
    const EnergyTerms only_verts = energy(m, {}, z_id, z_ex, target, cfg);
    EXPECT_EQ(only_verts.total, only_verts.verts);
}

TEST(Energy, GradientMatchesFiniteDifferencesAndChainRule)
{
    const auto& m = fixture().model;
    const flow::Flow f_id = small_flow(m.d_id(), 3);
    const flow::Flow f_ex = small_flow(m.d_ex(), 4);
    const FlowPair flows{&f_id, &f_ex};
    std::mt19937_64 rng(2);
    const Eigen::VectorXd z_id = test::random_vector(rng, m.d_id(), 0.5);
    const Eigen::VectorXd z_ex = test::random_vector(rng, m.d_ex(), 0.5);
    const Eigen::VectorXd target = m.mean + test::random_vector(rng, m.dimension());
    FitConfig cfg;
    cfg.gamma1 = 0.6;
    cfg.gamma2 = 0.4;
    const auto [g_id, g_ex] = energy_gradient(m, flows, z_id, z_ex, target, cfg);

    const double h = 1e-6;
    auto check = [&](const Eigen::VectorXd& analytic, bool id_block) {
        for (Eigen::Index k = 0; k < analytic.size(); ++k)
        {
            Eigen::VectorXd up_id = z_id, dn_id = z_id, up_ex = z_ex, dn_ex = z_ex;
            (id_block ? up_id : up_ex)(k) += h;
            (id_block ? dn_id : dn_ex)(k) -= h;
            const double fd = (energy(m, flows, up_id, up_ex, target, cfg).total -
                               energy(m, flows, dn_id, dn_ex, target, cfg).total) /
                              (2 * h);
            EXPECT_LT(std::abs(fd - analytic(k)), 1e-4 * std::max(1.0, std::abs(fd)));
        }
    };
    check(g_id, true);
    check(g_ex, false);

    // Chain rule through the dense flow Jacobian: dE/dz = J_f(w)^{-T} dE/dw.
    const Eigen::VectorXd w_id = flow::inverse(f_id, z_id);
    const Eigen::VectorXd w_ex = flow::inverse(f_ex, z_ex);
    const Eigen::VectorXd resid = bilinear::reconstruct(m, w_id, w_ex) - target;
    const Eigen::VectorXd dw_id = 2 * cfg.gamma1 * bilinear::identity_operator(m, w_ex).transpose() * resid;
    const Eigen::VectorXd prior_id = 2 * cfg.gamma2 * z_id.cwiseQuotient(m.lambda_id.cwiseMax(1e-10 * m.lambda_id.maxCoeff()));
    const Eigen::VectorXd chain = flow::jacobian(f_id, w_id).transpose().partialPivLu().solve(dw_id) + prior_id;
    EXPECT_LT((chain - g_id).norm(), 1e-8 * chain.norm());
}

// ---------------------------------------------------------------------------
// Fit

TEST(Fit, MeanTargetGivesZeroCode)
{
    const auto& m = fixture().model;
    const FitResult r = fit(m, {}, mesh_from(m, m.mean), {});
    EXPECT_LT(r.final_energy.verts, 1e-8);
    EXPECT_LT(r.z_id.values.norm(), 1e-6);
    EXPECT_EQ(r.z_id.space, latent::Space::identity);
    EXPECT_EQ(r.z_ex.coords, latent::Coords::pre_flow);
}

TEST(Fit, SelfConsistencyWithFlows)
{
    const auto& m = fixture().model;
    const flow::Flow f_id = small_flow(m.d_id(), 5);
    const flow::Flow f_ex = small_flow(m.d_ex(), 6);
    const FlowPair flows{&f_id, &f_ex};
    FitConfig cfg;
    cfg.gamma1 = 1.0 - 1e-6;
    cfg.gamma2 = 1e-6;
    cfg.neutral_w_ex = m.u_ex.row(0).transpose();
    std::mt19937_64 rng(7);
    int good = 0;
    for (int t = 0; t < 10; ++t)
    {
        // Known coefficients near the training set.
        const Eigen::VectorXd w_id = m.u_id.row(t % 5).transpose() + test::random_vector(rng, m.d_id(), 0.1);
        const Eigen::VectorXd w_ex = m.u_ex.row(t % 6).transpose() + test::random_vector(rng, m.d_ex(), 0.1);
        const geometry::Mesh target = mesh_from(m, bilinear::reconstruct(m, w_id, w_ex));
        const FitResult r = fit(m, flows, target, cfg);
        const double diag = geometry::bounding_box_diagonal(target.vertices);
        good += rms(r.per_vertex_error) < 1e-3 * diag ? 1 : 0;
        for (std::size_t k = 1; k < r.energy_trace.size(); ++k)
            EXPECT_LE(r.energy_trace[k], r.energy_trace[k - 1] + 1e-12);
    }
    EXPECT_GE(good, 9);
}

TEST(Fit, RecoversRigidlyMovedTarget)
{
    const auto& m = fixture().model;
    const Eigen::VectorXd flat = bilinear::reconstruct(m, m.u_id.row(1).transpose(), m.u_ex.row(3).transpose());
    geometry::Mesh target = mesh_from(m, flat);
    const Eigen::Matrix3d rot = Eigen::AngleAxisd(0.3, Eigen::Vector3d(0.2, 1.0, 0.1).normalized()).toRotationMatrix();
    target.vertices = (rot * target.vertices).colwise() + Eigen::Vector3d(5.0, -2.0, 1.0);
    FitConfig cfg;
    cfg.gamma1 = 1.0 - 1e-6;
    cfg.gamma2 = 1e-6;
    const FitResult r = fit(m, {}, target, cfg);
    EXPECT_LT(rms(r.per_vertex_error), 1e-3 * geometry::bounding_box_diagonal(target.vertices));
}

TEST(Fit, NoiseFloor)
{
    const auto& m = fixture().model;
    std::mt19937_64 rng(8);
    const double sigma = 0.2;
    FitConfig cfg;
    cfg.gamma1 = 1.0 - 1e-6;
    cfg.gamma2 = 1e-6;
    for (int t = 0; t < 3; ++t)
    {
        const Eigen::VectorXd clean = bilinear::reconstruct(m, m.u_id.row(t).transpose(), m.u_ex.row(t + 1).transpose());
        const Eigen::VectorXd noisy = clean + test::random_vector(rng, clean.size(), sigma);
        const FitResult r = fit(m, {}, mesh_from(m, noisy), cfg);
        // Compare with the clean shape in the fitted frame.
        const geometry::Mesh truth = mesh_from(m, geometry::as_vector(r.alignment.apply(geometry::as_points(clean))));
        EXPECT_LE(rms(per_vertex_error(r.reconstruction, truth)), 1.5 * sigma);
    }
}

TEST(Fit, IdentityFlowsMatchAlternatingLeastSquares)
{
    const auto& m = fixture().model;
    std::mt19937_64 rng(9);
    FitConfig cfg;
    cfg.gamma1 = 1.0;
    cfg.gamma2 = 0.0;
    cfg.align = false;
    cfg.max_outer_iterations = 200;
    cfg.neutral_w_ex = m.u_ex.row(0).transpose();
    for (int t = 0; t < 3; ++t)
    {
        const Eigen::VectorXd target = bilinear::reconstruct(m, m.u_id.row(t).transpose(), m.u_ex.row(2).transpose()) +
                                       test::random_vector(rng, m.dimension(), 0.5);
        const FitResult r = fit(m, {}, mesh_from(m, target), cfg);
        const double oracle = als_energy(m, target, *cfg.neutral_w_ex);
        EXPECT_LT(std::abs(r.final_energy.verts - oracle), 1e-4 * oracle);
    }
}

TEST(Fit, PriorTermFiniteAndInsideShell)
{
    const auto& m = fixture().model;
    const FitResult r = fit(m, {}, fixture().family.meshes[2][3], {});
    EXPECT_TRUE(std::isfinite(r.final_energy.prior));
    const latent::GaussianPrior prior = latent::make_prior(Eigen::VectorXd::Zero(m.d_id()),
                                                           m.lambda_id.asDiagonal().toDenseMatrix());
    const latent::SamplingPreset preset;
    EXPECT_LE(latent::mahalanobis(prior, r.z_id.values), preset.beta_id);
}

TEST(Fit, FrozenExpressionKeepsNeutral)
{
    const auto& m = fixture().model;
    FitConfig cfg;
    cfg.freeze_expression = true;
    cfg.neutral_w_ex = m.u_ex.row(0).transpose();
    const FitResult r = fit(m, {}, fixture().family.meshes[1][4], cfg);
    EXPECT_EQ(r.w_ex, *cfg.neutral_w_ex);
}

TEST(Fit, RejectsBadInput)
{
    const auto& m = fixture().model;
    FitConfig cfg;
    cfg.gamma1 = 0.5;
    EXPECT_THROW(fit(m, {}, fixture().family.meshes[0][0], cfg), InvalidArgument);
    EXPECT_THROW(fit(m, {}, test::octahedron(), {}), InvalidArgument);
    const flow::Flow wrong = flow::make_flow(m.d_id() + 1, 2, 4, 1);
    EXPECT_THROW(fit(m, {&wrong, nullptr}, fixture().family.meshes[0][0], {}), InvalidArgument);
}

// ---------------------------------------------------------------------------
// Per-vertex error

TEST(PerVertexError, Cases)
{
    const geometry::Mesh a = test::octahedron();
    EXPECT_EQ(per_vertex_error(a, a), Eigen::VectorXd::Zero(a.num_vertices()));
    geometry::Mesh b = a;
    b.vertices.row(0).array() += 1.0;
    EXPECT_TRUE(per_vertex_error(a, b).isApprox(Eigen::VectorXd::Ones(a.num_vertices())));

    std::mt19937_64 rng(10);
    geometry::Mesh c = a;
    c.vertices += test::random_matrix(rng, 3, a.num_vertices(), 0.1);
    const Eigen::VectorXd e = per_vertex_error(a, c);
    for (int v = 0; v < a.num_vertices(); ++v)
    {
        const Eigen::Vector3d d = a.vertices.col(v) - c.vertices.col(v);
        EXPECT_NEAR(e(v), std::sqrt(d.x() * d.x() + d.y() * d.y() + d.z() * d.z()), 1e-15);
    }
    EXPECT_THROW(per_vertex_error(a, test::grid_mesh(3, 3)), InvalidArgument);
}

TEST(PerVertexError, Summary)
{
    Eigen::Vector4d e(1.0, 2.0, 3.0, 6.0);
    const ErrorSummary s = summarize(e);
    EXPECT_DOUBLE_EQ(s.mean, 3.0);
    EXPECT_DOUBLE_EQ(s.stddev, std::sqrt((4.0 + 1.0 + 0.0 + 9.0) / 4.0));
    EXPECT_DOUBLE_EQ(s.max, 6.0);
    EXPECT_THROW(summarize(Eigen::VectorXd()), InvalidArgument);
}

// ---------------------------------------------------------------------------
// Reports

TEST(Report, AggregateMatchesHandComputation)
{
    const std::string csv = aggregate_csv({{"a", Eigen::Vector3d(1.0, 2.0, 3.0)}, {"b", Eigen::Vector3d(3.0, 4.0, 5.0)}});
    // Per-target means 2 and 4: overall mean 3, population std 1.
    EXPECT_NE(csv.find("a,2,"), std::string::npos);
    EXPECT_NE(csv.find("b,4,"), std::string::npos);
    EXPECT_NE(csv.find("\nall,3,1,5\n"), std::string::npos);
    EXPECT_THROW(aggregate_csv({}), InvalidArgument);
}

TEST(Report, PerfectFitHasZeroMeanRow)
{
    const std::string csv = aggregate_csv({{"t", Eigen::VectorXd::Zero(10)}});
    EXPECT_NE(csv.find("\nt,0,0,0\n"), std::string::npos);
    EXPECT_NE(csv.find("\nall,0,0,0\n"), std::string::npos);
}

TEST(Report, FitReportContainsTrace)
{
    const auto& m = fixture().model;
    const FitResult r = fit(m, {}, fixture().family.meshes[0][1], {});
    const std::string text = fit_report("x", r);
    EXPECT_NE(text.find("energy_trace"), std::string::npos);
    EXPECT_NE(text.find("error_mean_mm"), std::string::npos);
    const std::string errors = per_vertex_error_text(r.per_vertex_error);
    EXPECT_EQ(std::count(errors.begin(), errors.end(), '\n'), r.per_vertex_error.size());
}
