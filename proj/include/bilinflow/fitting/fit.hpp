/*
 * bilinflow - bilinear identity/expression face models with normalizing flows.
 *
 * File: include/bilinflow/fitting/fit.hpp
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

#ifndef BILINFLOW_FITTING_FIT_HPP
#define BILINFLOW_FITTING_FIT_HPP

#include "bilinflow/bilinear/bilinear_model.hpp"
#include "bilinflow/core/error.hpp"
#include "bilinflow/flow/real_nvp.hpp"
#include "bilinflow/flow/tape.hpp"
#include "bilinflow/geometry/mesh.hpp"
#include "bilinflow/geometry/procrustes.hpp"
#include "bilinflow/latent/latent_code.hpp"

#include "Eigen/Cholesky"
#include "Eigen/Core"
#include "Eigen/LU"

#include <cmath>
#include <optional>
#include <string>
#include <vector>

namespace bilinflow {
namespace fitting {

/// Flows mapping w to z per mode; a null pointer stands for the identity map (z = w).
struct FlowPair
{
    const flow::Flow* identity = nullptr;
    const flow::Flow* expression = nullptr;
};

struct FitConfig
{
    double gamma1 = 0.98; ///< Weight of E_verts.
    double gamma2 = 0.02; ///< Weight of E_prior.
    int max_outer_iterations = 50;
    int inner_iterations = 20;         ///< Line-search steps per block and outer iteration.
    double tolerance = 1e-12;          ///< Relative energy decrease that stops the alternation.
    bool align = true;                 ///< Rigidly align the target to the model (initially and each iteration).
    bool freeze_expression = false;    ///< Only optimise z_id (identity-only ablation).
    std::optional<Eigen::VectorXd> neutral_w_ex; ///< Neutral expression coefficients; default row 0 of U_ex.
    double lambda_floor = 1e-10;       ///< Relative floor on lambda entries in E_prior.
};

inline void validate(const FitConfig& c)
{
    std::vector<std::string> problems;
    if (!(c.gamma1 >= 0.0) || !(c.gamma2 >= 0.0) || std::abs(c.gamma1 + c.gamma2 - 1.0) > 1e-12)
        problems.push_back("gamma1 and gamma2 must be non-negative and sum to 1");
    if (c.max_outer_iterations < 1 || c.inner_iterations < 1)
        problems.push_back("iteration counts must be positive");
    if (!(c.tolerance >= 0.0))
        problems.push_back("tolerance must be non-negative");
    if (!problems.empty())
    {
        std::string msg = "invalid fit configuration:";
        for (const auto& p : problems)
            msg += " " + p + ";";
        throw InvalidArgument(msg);
    }
}

struct EnergyTerms
{
    double total = 0.0;
    double verts = 0.0;
    double prior = 0.0;
};

namespace detail {

inline Eigen::VectorXd to_w(const flow::Flow* f, const Eigen::VectorXd& z)
{
    return f == nullptr ? z : Eigen::VectorXd(flow::inverse(*f, z));
}

inline Eigen::VectorXd to_z(const flow::Flow* f, const Eigen::VectorXd& w)
{
    return f == nullptr ? w : Eigen::VectorXd(flow::forward(*f, w).z);
}

/// 1 / max(lambda, floor * max(lambda)).
inline Eigen::VectorXd inverse_lambda(const Eigen::VectorXd& lambda, double floor)
{
    const double m = lambda.size() > 0 ? lambda.maxCoeff() : 0.0;
    const double f = std::max(floor * m, 1e-300);
    return lambda.cwiseMax(f).cwiseInverse();
}

inline void check_dims(const bilinear::BilinearModel& model, const FlowPair& flows, const Eigen::VectorXd& z_id,
                       const Eigen::VectorXd& z_ex, const Eigen::VectorXd& target)
{
    bilinear::check_coefficients(model, z_id, z_ex);
    if (target.size() != model.dimension())
    {
        throw InvalidArgument("fit: target has " + std::to_string(target.size() / 3) + " vertices, model has " +
                              std::to_string(model.dimension() / 3));
    }
    if ((flows.identity != nullptr && flows.identity->dim != model.d_id()) ||
        (flows.expression != nullptr && flows.expression->dim != model.d_ex()))
    {
        throw InvalidArgument("fit: flow dimensions do not match the model ranks");
    }
}

} // namespace detail

/**
 * E = gamma1 * |C x_2 w_id x_3 w_ex - (x - mu)|^2 + gamma2 * (sum z_id^2 / lambda_id + sum z_ex^2 / lambda_ex)
 * with w = f^{-1}(z) per mode. `target` is the flattened (aligned) target x.
 */
inline EnergyTerms energy(const bilinear::BilinearModel& model, const FlowPair& flows, const Eigen::VectorXd& z_id,
                          const Eigen::VectorXd& z_ex, const Eigen::VectorXd& target, const FitConfig& config)
{
    detail::check_dims(model, flows, z_id, z_ex, target);
    const Eigen::VectorXd w_id = detail::to_w(flows.identity, z_id);
    const Eigen::VectorXd w_ex = detail::to_w(flows.expression, z_ex);
    EnergyTerms e;
    e.verts = (bilinear::reconstruct(model, w_id, w_ex) - target).squaredNorm();
    e.prior = z_id.cwiseAbs2().dot(detail::inverse_lambda(model.lambda_id, config.lambda_floor)) +
              z_ex.cwiseAbs2().dot(detail::inverse_lambda(model.lambda_ex, config.lambda_floor));
    e.total = config.gamma1 * e.verts + config.gamma2 * e.prior;
    return e;
}

enum class Block
{
    identity,
    expression
};

namespace detail {

/// Block energy and gradient on the tape, with the other block's w held fixed.
inline double block_gradient(const bilinear::BilinearModel& model, const flow::Flow* f, Block block,
                             const Eigen::VectorXd& z, const Eigen::VectorXd& other_w, const Eigen::VectorXd& residual,
                             const FitConfig& config, Eigen::VectorXd& gradient)
{
    const Eigen::MatrixXd op = block == Block::identity ? bilinear::identity_operator(model, other_w)
                                                        : bilinear::expression_operator(model, other_w);
    const Eigen::VectorXd inv_lambda = inverse_lambda(
        block == Block::identity ? model.lambda_id : model.lambda_ex, config.lambda_floor);
    flow::Tape tape;
    const flow::Var zv = tape.variable(z);
    const flow::Var w = f == nullptr ? zv : flow::inverse_on_tape(tape, *f, zv);
    const flow::Var e = tape.sub(tape.matmul(tape.constant(op), w), tape.constant(residual));
    const flow::Var verts = tape.affine(tape.sum(tape.square(e)), config.gamma1, 0.0);
    const flow::Var prior =
        tape.affine(tape.sum(tape.cmul(tape.square(zv), tape.constant(inv_lambda))), config.gamma2, 0.0);
    const flow::Var total = tape.add(verts, prior);
    tape.backward(total);
    gradient = tape.grad(zv).col(0);
    return tape.value(total)(0, 0);
}

/// dw/dz at z: the inverse of the flow Jacobian at w = f^{-1}(z).
inline Eigen::MatrixXd inverse_jacobian(const flow::Flow* f, const Eigen::VectorXd& z)
{
    if (f == nullptr)
    {
        return Eigen::MatrixXd::Identity(z.size(), z.size());
    }
    return flow::jacobian(*f, flow::inverse(*f, z)).partialPivLu().inverse();
}

} // namespace detail

/// Gradients of energy() with respect to z_id and z_ex, via the tape.
inline std::pair<Eigen::VectorXd, Eigen::VectorXd> energy_gradient(const bilinear::BilinearModel& model,
                                                                   const FlowPair& flows, const Eigen::VectorXd& z_id,
                                                                   const Eigen::VectorXd& z_ex,
                                                                   const Eigen::VectorXd& target,
                                                                   const FitConfig& config)
{
    detail::check_dims(model, flows, z_id, z_ex, target);
    const Eigen::VectorXd residual = target - model.mean;
    const Eigen::VectorXd w_id = detail::to_w(flows.identity, z_id);
    const Eigen::VectorXd w_ex = detail::to_w(flows.expression, z_ex);
    std::pair<Eigen::VectorXd, Eigen::VectorXd> g;
    detail::block_gradient(model, flows.identity, Block::identity, z_id, w_ex, residual, config, g.first);
    detail::block_gradient(model, flows.expression, Block::expression, z_ex, w_id, residual, config, g.second);
    return g;
}

struct ErrorSummary
{
    double mean = 0.0;
    double stddev = 0.0; ///< Population standard deviation.
    double max = 0.0;
};

/// Euclidean distance between corresponding vertices.
inline Eigen::VectorXd per_vertex_error(const geometry::Mesh& reconstruction, const geometry::Mesh& target)
{
    if (reconstruction.num_vertices() != target.num_vertices())
    {
        throw InvalidArgument("per_vertex_error: vertex count mismatch (" +
                              std::to_string(reconstruction.num_vertices()) + " vs " +
                              std::to_string(target.num_vertices()) + ")");
    }
    return (reconstruction.vertices - target.vertices).colwise().norm().transpose();
}

inline ErrorSummary summarize(const Eigen::VectorXd& errors)
{
    if (errors.size() == 0)
    {
        throw InvalidArgument("summarize: empty error vector");
    }
    ErrorSummary s;
    s.mean = errors.mean();
    s.stddev = std::sqrt((errors.array() - s.mean).square().mean());
    s.max = errors.maxCoeff();
    return s;
}

struct FitResult
{
    latent::LatentCode z_id;
    latent::LatentCode z_ex;
    Eigen::VectorXd w_id;
    Eigen::VectorXd w_ex;
    geometry::Mesh reconstruction;
    geometry::Mesh aligned_target; ///< Target after the final rigid alignment.
    geometry::RigidTransform alignment;
    Eigen::VectorXd per_vertex_error;
    std::vector<double> energy_trace; ///< Initial energy, then one entry per outer iteration.
    EnergyTerms final_energy;
    bool converged = false;
    int iterations = 0;
};

namespace detail {

/**
 * Up to `steps` preconditioned descent steps on one block with Armijo
 * backtracking. The direction solves (2 g1 J^T A^T A J + 2 g2 diag(1/lambda)) d = -grad,
 * J = dw/dz, which is a Gauss-Newton model of the block energy.
 */
inline void descend_block(const bilinear::BilinearModel& model, const FlowPair& flows, Block block,
                          Eigen::VectorXd& z_id, Eigen::VectorXd& z_ex, const Eigen::VectorXd& target,
                          const FitConfig& config)
{
    const flow::Flow* f = block == Block::identity ? flows.identity : flows.expression;
    Eigen::VectorXd& z = block == Block::identity ? z_id : z_ex;
    const Eigen::VectorXd residual = target - model.mean;
    const Eigen::VectorXd inv_lambda =
        inverse_lambda(block == Block::identity ? model.lambda_id : model.lambda_ex, config.lambda_floor);
    for (int step = 0; step < config.inner_iterations; ++step)
    {
        const Eigen::VectorXd other_w =
            block == Block::identity ? to_w(flows.expression, z_ex) : to_w(flows.identity, z_id);
        Eigen::VectorXd grad;
        const double e0 = block_gradient(model, f, block, z, other_w, residual, config, grad);
        const Eigen::MatrixXd op = block == Block::identity ? bilinear::identity_operator(model, other_w)
                                                            : bilinear::expression_operator(model, other_w);
        const Eigen::MatrixXd aj = op * inverse_jacobian(f, z);
        Eigen::MatrixXd h = 2.0 * config.gamma1 * aj.transpose() * aj;
        h.diagonal() += 2.0 * config.gamma2 * inv_lambda;
        h.diagonal().array() += 1e-12 * std::max(h.trace() / static_cast<double>(h.rows()), 1e-300);
        Eigen::VectorXd dir = -h.ldlt().solve(grad);
        double slope = grad.dot(dir);
        if (!dir.allFinite() || !(slope < 0.0))
        {
            dir = -grad;
            slope = -grad.squaredNorm();
        }
        if (slope == 0.0)
        {
            return;
        }
        bool accepted = false;
        double e1 = e0;
        for (double alpha = 1.0; alpha > 1e-12; alpha *= 0.5)
        {
            Eigen::VectorXd candidate = z + alpha * dir;
            try
            {
                Eigen::VectorXd cz_id = block == Block::identity ? candidate : z_id;
                Eigen::VectorXd cz_ex = block == Block::expression ? candidate : z_ex;
                e1 = energy(model, flows, cz_id, cz_ex, target, config).total;
            } catch (const NumericalError&)
            {
                continue;
            }
            if (e1 <= e0 + 1e-4 * alpha * slope)
            {
                z = std::move(candidate);
                accepted = true;
                break;
            }
        }
        if (!accepted || e0 - e1 <= config.tolerance * e0)
        {
            return;
        }
    }
}

} // namespace detail

/**
 * Alternating fit of (z_id, z_ex) to `target`. z_id starts at 0 (the mean
 * identity); z_ex starts at f_ex(neutral_w_ex), where the default neutral is
 * the first training expression (row 0 of U_ex). With `align`, the target is first
 * rigidly aligned to the model mean and re-aligned to the current
 * reconstruction after every outer iteration; each such re-alignment cannot
 * increase the energy.
 */
inline FitResult fit(const bilinear::BilinearModel& model, const FlowPair& flows, const geometry::Mesh& target,
                     const FitConfig& config)
{
    validate(config);
    if (3 * static_cast<Eigen::Index>(target.num_vertices()) != model.dimension())
    {
        throw InvalidArgument("fit: target has " + std::to_string(target.num_vertices()) + " vertices, model has " +
                              std::to_string(model.dimension() / 3));
    }
    Eigen::VectorXd z_id = Eigen::VectorXd::Zero(model.d_id());
    const Eigen::VectorXd neutral =
        config.neutral_w_ex ? *config.neutral_w_ex : Eigen::VectorXd(model.u_ex.row(0).transpose());
    if (neutral.size() != model.d_ex())
    {
        throw InvalidArgument("fit: neutral expression coefficients have the wrong dimension");
    }
    Eigen::VectorXd z_ex = detail::to_z(flows.expression, neutral);

    FitResult r;
    Eigen::Matrix3Xd aligned = target.vertices;
    if (config.align)
    {
        r.alignment = geometry::procrustes_transform(target.vertices, geometry::as_points(model.mean), false);
        aligned = r.alignment.apply(target.vertices);
    }
    EnergyTerms current = energy(model, flows, z_id, z_ex, geometry::as_vector(aligned), config);
    r.energy_trace.push_back(current.total);
    const double scale = std::max(1.0, geometry::as_vector(aligned).squaredNorm());

    for (int it = 1; it <= config.max_outer_iterations; ++it)
    {
        const double before = current.total;
        const Eigen::VectorXd flat = geometry::as_vector(aligned);
        detail::descend_block(model, flows, Block::identity, z_id, z_ex, flat, config);
        if (!config.freeze_expression)
        {
            detail::descend_block(model, flows, Block::expression, z_id, z_ex, flat, config);
        }
        current = energy(model, flows, z_id, z_ex, flat, config);
        if (config.align)
        {
            const Eigen::VectorXd recon =
                bilinear::reconstruct(model, detail::to_w(flows.identity, z_id), detail::to_w(flows.expression, z_ex));
            const geometry::RigidTransform tf =
                geometry::procrustes_transform(target.vertices, geometry::as_points(recon), false);
            const Eigen::Matrix3Xd realigned = tf.apply(target.vertices);
            const EnergyTerms e = energy(model, flows, z_id, z_ex, geometry::as_vector(realigned), config);
            if (e.total <= current.total)
            {
                aligned = realigned;
                r.alignment = tf;
                current = e;
            }
        }
        r.energy_trace.push_back(current.total);
        r.iterations = it;
        if (before - current.total <= config.tolerance * before || current.total <= 1e-28 * scale)
        {
            r.converged = true;
            break;
        }
    }

    r.w_id = detail::to_w(flows.identity, z_id);
    r.w_ex = detail::to_w(flows.expression, z_ex);
    r.z_id = {z_id, latent::Space::identity,
              flows.identity != nullptr ? latent::Coords::post_flow : latent::Coords::pre_flow};
    r.z_ex = {z_ex, latent::Space::expression,
              flows.expression != nullptr ? latent::Coords::post_flow : latent::Coords::pre_flow};
    geometry::Mesh topology = target;
    r.reconstruction = geometry::with_vertices(topology, geometry::as_points(bilinear::reconstruct(model, r.w_id, r.w_ex)));
    r.aligned_target = geometry::with_vertices(topology, aligned);
    r.per_vertex_error = per_vertex_error(r.reconstruction, r.aligned_target);
    r.final_energy = current;
    return r;
}

} // namespace fitting
} // namespace bilinflow

#endif /* BILINFLOW_FITTING_FIT_HPP */
