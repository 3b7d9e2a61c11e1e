/*
 * bilinflow - bilinear identity/expression face models with normalizing flows.
 *
 * File: include/bilinflow/flow/real_nvp.hpp
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

#ifndef BILINFLOW_FLOW_REAL_NVP_HPP
#define BILINFLOW_FLOW_REAL_NVP_HPP

#include "bilinflow/core/binary_io.hpp"
#include "bilinflow/core/error.hpp"
#include "bilinflow/flow/tape.hpp"

#include "Eigen/Core"

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace bilinflow {
namespace flow {

/// Two-hidden-layer tanh perceptron: out = W3 tanh(W2 tanh(W1 x + b1) + b2) + b3.
struct Mlp
{
    /// W1, b1, W2, b2, W3, b3 (biases are column vectors).
    std::array<Eigen::MatrixXd, 6> p;

    Eigen::Index inputs() const { return p[0].cols(); }
    Eigen::Index outputs() const { return p[4].rows(); }

    /// Columns of `x` are independent inputs.
    Eigen::MatrixXd operator()(const Eigen::MatrixXd& x) const
    {
        const Eigen::MatrixXd h1 = ((p[0] * x).colwise() + p[1].col(0)).array().tanh().matrix();
        const Eigen::MatrixXd h2 = ((p[2] * h1).colwise() + p[3].col(0)).array().tanh().matrix();
        return (p[4] * h2).colwise() + p[5].col(0);
    }

    /// Jacobian of the output with respect to a single input vector.
    Eigen::MatrixXd input_jacobian(const Eigen::VectorXd& x) const
    {
        const Eigen::VectorXd h1 = (p[0] * x + p[1].col(0)).array().tanh().matrix();
        const Eigen::VectorXd h2 = (p[2] * h1 + p[3].col(0)).array().tanh().matrix();
        const Eigen::VectorXd d1 = 1.0 - h1.array().square();
        const Eigen::VectorXd d2 = 1.0 - h2.array().square();
        return p[4] * d2.asDiagonal() * p[2] * d1.asDiagonal() * p[0];
    }
};

/// LeCun-normal hidden layers, zero output layer (the network starts as the zero function).
inline Mlp make_mlp(Eigen::Index inputs, Eigen::Index hidden, Eigen::Index outputs, std::mt19937_64& rng)
{
    auto normal = [&](Eigen::Index rows, Eigen::Index cols) {
        std::normal_distribution<double> n(0.0, 1.0 / std::sqrt(static_cast<double>(cols)));
        Eigen::MatrixXd m(rows, cols);
        for (Eigen::Index j = 0; j < cols; ++j)
            for (Eigen::Index i = 0; i < rows; ++i)
                m(i, j) = n(rng);
        return m;
    };
    Mlp m;
    m.p[0] = normal(hidden, inputs);
    m.p[1] = Eigen::MatrixXd::Zero(hidden, 1);
    m.p[2] = normal(hidden, hidden);
    m.p[3] = Eigen::MatrixXd::Zero(hidden, 1);
    m.p[4] = Eigen::MatrixXd::Zero(outputs, hidden);
    m.p[5] = Eigen::MatrixXd::Zero(outputs, 1);
    return m;
}

/**
 * Affine coupling layer on a contiguous half split. With h = floor(D / 2),
 * a layer with `pass_first` keeps x[0, h) and transforms x[h, D); otherwise
 * it keeps x[h, D) and transforms x[0, h). For pass-through part a and
 * transformed part b:
 *
 *     s = B tanh(s_net(a) / B),   b' = b * exp(s) + t_net(a),   log|det| = sum(s)
 */
struct CouplingLayer
{
    int dim = 0;
    bool pass_first = true;
    Mlp s_net;
    Mlp t_net;

    int half() const { return dim / 2; }
    int pass_begin() const { return pass_first ? 0 : half(); }
    int pass_count() const { return pass_first ? half() : dim - half(); }
    int transform_begin() const { return pass_first ? half() : 0; }
    int transform_count() const { return dim - pass_count(); }
};

/**
 * Real-NVP flow f = f_K o ... o f_1 o f_0 from data space w to latent z,
 * where f_0 is the fixed standardisation (w - mean) / stddev.
 */
struct Flow
{
    int dim = 0;
    double scale_bound = 3.0; ///< B: each coupling scale lies in [-B, B].
    Eigen::VectorXd mean;
    Eigen::VectorXd stddev;
    std::vector<CouplingLayer> layers;

    int num_layers() const { return static_cast<int>(layers.size()); }
};

/// Identity-initialised flow: K layers with alternating masks, unit standardisation.
inline Flow make_flow(int dim, int num_layers, int hidden, std::uint64_t seed, double scale_bound = 3.0)
{
    if (dim < 2)
    {
        throw InvalidArgument("flow dimension must be at least 2, got " + std::to_string(dim));
    }
    if (num_layers < 1 || hidden < 1 || !(scale_bound > 0.0))
    {
        throw InvalidArgument("flow needs at least one layer, a positive width and a positive scale bound");
    }
    std::mt19937_64 rng(seed);
    Flow f;
    f.dim = dim;
    f.scale_bound = scale_bound;
    f.mean = Eigen::VectorXd::Zero(dim);
    f.stddev = Eigen::VectorXd::Ones(dim);
    for (int k = 0; k < num_layers; ++k)
    {
        CouplingLayer l;
        l.dim = dim;
        l.pass_first = (k % 2 == 0);
        l.s_net = make_mlp(l.pass_count(), hidden, l.transform_count(), rng);
        l.t_net = make_mlp(l.pass_count(), hidden, l.transform_count(), rng);
        f.layers.push_back(std::move(l));
    }
    return f;
}

/// Sets layer 0 to the per-dimension mean and (population) standard deviation of the columns of `data`.
inline void set_standardization(Flow& flow, const Eigen::MatrixXd& data)
{
    if (data.rows() != flow.dim || data.cols() < 2)
    {
        throw InvalidArgument("set_standardization: need at least 2 samples of dimension " + std::to_string(flow.dim));
    }
    flow.mean = data.rowwise().mean();
    const Eigen::MatrixXd centred = data.colwise() - flow.mean;
    flow.stddev = (centred.rowwise().squaredNorm() / static_cast<double>(data.cols())).cwiseSqrt();
    const double floor = 1e-12 * std::max(flow.stddev.maxCoeff(), 1e-300);
    for (Eigen::Index k = 0; k < flow.stddev.size(); ++k)
    {
        if (!(flow.stddev(k) > floor))
        {
            flow.stddev(k) = 1.0;
        }
    }
}

/// Log-determinant of the standardisation layer.
inline double standardization_logdet(const Flow& flow) { return -flow.stddev.array().log().sum(); }

/// Pointers to every trainable matrix, in serialisation and gradient order.
inline std::vector<Eigen::MatrixXd*> parameter_blocks(Flow& flow)
{
    std::vector<Eigen::MatrixXd*> out;
    for (auto& l : flow.layers)
    {
        for (auto& m : l.s_net.p)
            out.push_back(&m);
        for (auto& m : l.t_net.p)
            out.push_back(&m);
    }
    return out;
}

inline Eigen::Index parameter_count(const Flow& flow)
{
    Eigen::Index n = 0;
    for (auto* m : parameter_blocks(const_cast<Flow&>(flow)))
        n += m->size();
    return n;
}

inline Eigen::VectorXd get_parameters(const Flow& flow)
{
    Eigen::VectorXd out(parameter_count(flow));
    Eigen::Index k = 0;
    for (auto* m : parameter_blocks(const_cast<Flow&>(flow)))
    {
        out.segment(k, m->size()) = Eigen::Map<const Eigen::VectorXd>(m->data(), m->size());
        k += m->size();
    }
    return out;
}

inline void set_parameters(Flow& flow, const Eigen::VectorXd& values)
{
    if (values.size() != parameter_count(flow))
    {
        throw InvalidArgument("set_parameters: wrong parameter count");
    }
    Eigen::Index k = 0;
    for (auto* m : parameter_blocks(flow))
    {
        Eigen::Map<Eigen::VectorXd>(m->data(), m->size()) = values.segment(k, m->size());
        k += m->size();
    }
}

namespace detail {

inline void check_finite(const Eigen::MatrixXd& m, int layer, const char* direction)
{
    if (!m.allFinite())
    {
        throw NumericalError(std::string("flow ") + direction + ": non-finite values after layer " +
                             std::to_string(layer));
    }
}

inline Eigen::MatrixXd bounded_scale(const Flow& flow, const CouplingLayer& l, const Eigen::MatrixXd& pass)
{
    const double b = flow.scale_bound;
    return (b * (l.s_net(pass).array() / b).tanh()).matrix();
}

inline void check_input(const Flow& flow, const Eigen::MatrixXd& x)
{
    if (x.rows() != flow.dim)
    {
        throw InvalidArgument("flow of dimension " + std::to_string(flow.dim) + " applied to " +
                              std::to_string(x.rows()) + "-dimensional input");
    }
    if (!x.allFinite())
    {
        throw InvalidArgument("flow input contains non-finite values");
    }
}

} // namespace detail

struct ForwardResult
{
    Eigen::MatrixXd z;      ///< D x n
    Eigen::VectorXd logdet; ///< n, log|det df/dw| per column.
};

/// z = f(w) and log|det J_f(w)| for every column of `w`.
inline ForwardResult forward(const Flow& flow, const Eigen::MatrixXd& w)
{
    detail::check_input(flow, w);
    ForwardResult r;
    r.z = flow.stddev.cwiseInverse().asDiagonal() * (w.colwise() - flow.mean);
    r.logdet = Eigen::VectorXd::Constant(w.cols(), standardization_logdet(flow));
    for (int k = 0; k < flow.num_layers(); ++k)
    {
        const CouplingLayer& l = flow.layers[static_cast<std::size_t>(k)];
        const Eigen::MatrixXd pass = r.z.middleRows(l.pass_begin(), l.pass_count());
        const Eigen::MatrixXd s = detail::bounded_scale(flow, l, pass);
        const Eigen::MatrixXd t = l.t_net(pass);
        auto b = r.z.middleRows(l.transform_begin(), l.transform_count());
        b = (b.array() * s.array().exp() + t.array()).matrix();
        r.logdet += s.colwise().sum().transpose();
        detail::check_finite(r.z, k + 1, "forward");
    }
    return r;
}

/// w = f^{-1}(z): layers in reverse order, then de-standardisation.
inline Eigen::MatrixXd inverse(const Flow& flow, const Eigen::MatrixXd& z)
{
    detail::check_input(flow, z);
    Eigen::MatrixXd x = z;
    for (int k = flow.num_layers() - 1; k >= 0; --k)
    {
        const CouplingLayer& l = flow.layers[static_cast<std::size_t>(k)];
        const Eigen::MatrixXd pass = x.middleRows(l.pass_begin(), l.pass_count());
        const Eigen::MatrixXd s = detail::bounded_scale(flow, l, pass);
        const Eigen::MatrixXd t = l.t_net(pass);
        auto b = x.middleRows(l.transform_begin(), l.transform_count());
        b = ((b.array() - t.array()) * (-s.array()).exp()).matrix();
        detail::check_finite(x, k + 1, "inverse");
    }
    return (flow.stddev.asDiagonal() * x).colwise() + flow.mean;
}

/// -log p_W(w) = 0.5 |z|^2 + 0.5 D log(2 pi) - log|det J_f(w)| per column.
inline Eigen::VectorXd nll(const Flow& flow, const Eigen::MatrixXd& w)
{
    const ForwardResult r = forward(flow, w);
    const double c = 0.5 * flow.dim * std::log(2.0 * M_PI);
    return (0.5 * r.z.colwise().squaredNorm().transpose().array() + c).matrix() - r.logdet;
}

/// Dense Jacobian of one coupling layer at a single input.
inline Eigen::MatrixXd layer_jacobian(const Flow& flow, const CouplingLayer& l, const Eigen::VectorXd& x)
{
    const Eigen::VectorXd a = x.segment(l.pass_begin(), l.pass_count());
    const Eigen::VectorXd b = x.segment(l.transform_begin(), l.transform_count());
    const double bound = flow.scale_bound;
    const Eigen::VectorXd r = l.s_net(a);
    const Eigen::VectorXd u = (r.array() / bound).tanh().matrix();
    const Eigen::VectorXd e = (bound * u).array().exp().matrix();
    const Eigen::MatrixXd ds = (1.0 - u.array().square()).matrix().asDiagonal() * l.s_net.input_jacobian(a);
    const Eigen::MatrixXd dt = l.t_net.input_jacobian(a);

    Eigen::MatrixXd j = Eigen::MatrixXd::Zero(flow.dim, flow.dim);
    j.block(l.pass_begin(), l.pass_begin(), l.pass_count(), l.pass_count()).setIdentity();
    j.block(l.transform_begin(), l.transform_begin(), l.transform_count(), l.transform_count()) = e.asDiagonal();
    j.block(l.transform_begin(), l.pass_begin(), l.transform_count(), l.pass_count()) =
        b.cwiseProduct(e).asDiagonal() * ds + dt;
    return j;
}

/// Dense composed Jacobian J_f(w) = J_K ... J_1 diag(1 / stddev) at a single point.
inline Eigen::MatrixXd jacobian(const Flow& flow, const Eigen::VectorXd& w)
{
    detail::check_input(flow, w);
    Eigen::VectorXd x = (w - flow.mean).cwiseQuotient(flow.stddev);
    Eigen::MatrixXd j = flow.stddev.cwiseInverse().asDiagonal();
    for (const auto& l : flow.layers)
    {
        j = layer_jacobian(flow, l, x) * j;
        const Eigen::VectorXd a = x.segment(l.pass_begin(), l.pass_count());
        const Eigen::VectorXd s = detail::bounded_scale(flow, l, a);
        auto b = x.segment(l.transform_begin(), l.transform_count());
        b = (b.array() * s.array().exp() + l.t_net(a).array()).matrix();
    }
    return j;
}

inline double jacobian_frobenius(const Flow& flow, const Eigen::VectorXd& w) { return jacobian(flow, w).norm(); }

/// Sum over layers (standardisation included) of each layer's own Jacobian Frobenius norm.
inline double layerwise_jacobian_frobenius(const Flow& flow, const Eigen::VectorXd& w)
{
    detail::check_input(flow, w);
    Eigen::VectorXd x = (w - flow.mean).cwiseQuotient(flow.stddev);
    double total = flow.stddev.cwiseInverse().norm();
    for (const auto& l : flow.layers)
    {
        total += layer_jacobian(flow, l, x).norm();
        const Eigen::VectorXd a = x.segment(l.pass_begin(), l.pass_count());
        const Eigen::VectorXd s = detail::bounded_scale(flow, l, a);
        auto b = x.segment(l.transform_begin(), l.transform_count());
        b = (b.array() * s.array().exp() + l.t_net(a).array()).matrix();
    }
    return total;
}

/// w + sqrt(variance) * U(0, 1) per entry; `variance` is per dimension (rows of `w`).
inline Eigen::MatrixXd dequantize(const Eigen::MatrixXd& w, const Eigen::VectorXd& variance, std::mt19937_64& rng)
{
    if (variance.size() != w.rows())
    {
        throw InvalidArgument("dequantize: variance has " + std::to_string(variance.size()) + " entries, data has " +
                              std::to_string(w.rows()) + " dimensions");
    }
    if ((variance.array() < 0.0).any())
    {
        throw InvalidArgument("dequantize: negative variance");
    }
    const Eigen::VectorXd amplitude = variance.cwiseSqrt();
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Eigen::MatrixXd out = w;
    for (Eigen::Index j = 0; j < w.cols(); ++j)
        for (Eigen::Index i = 0; i < w.rows(); ++i)
            out(i, j) += amplitude(i) * u(rng);
    return out;
}

/// `count` draws z ~ N(0, I) mapped through the inverse flow; columns are samples.
inline Eigen::MatrixXd sample(const Flow& flow, int count, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    Eigen::MatrixXd z(flow.dim, count);
    for (Eigen::Index j = 0; j < z.cols(); ++j)
        for (Eigen::Index i = 0; i < z.rows(); ++i)
            z(i, j) = n(rng);
    return inverse(flow, z);
}

// ---------------------------------------------------------------------------
// Differentiable loss on the tape.

enum class FrobeniusMode
{
    composed,  ///< |J_f|_F of the full composed Jacobian.
    per_layer  ///< sum_k |J_{f_k}|_F over the coupling layers and the standardisation.
};

/// Tape handles of every trainable matrix, in parameter_blocks() order.
struct TapeParameters
{
    std::vector<Var> vars;
};

inline TapeParameters register_parameters(Tape& tape, const Flow& flow)
{
    TapeParameters p;
    for (auto* m : parameter_blocks(const_cast<Flow&>(flow)))
    {
        p.vars.push_back(tape.variable(*m));
    }
    return p;
}

struct LossTerms
{
    Var total; ///< 1 x 1: mean over the batch of nll + weight * frobenius.
    Var nll;   ///< 1 x 1 batch mean.
    Var frobenius; ///< 1 x 1 batch mean.
};

namespace detail {

inline Var mlp_on_tape(Tape& tape, const std::vector<Var>& p, std::size_t first, Var x, Var tangent, Eigen::Index k,
                       Var* tangent_out)
{
    const Var a1 = tape.add_bias(tape.matmul(p[first], x), p[first + 1]);
    const Var h1 = tape.tanh(a1);
    const Var a2 = tape.add_bias(tape.matmul(p[first + 2], h1), p[first + 3]);
    const Var h2 = tape.tanh(a2);
    const Var out = tape.add_bias(tape.matmul(p[first + 4], h2), p[first + 5]);
    if (tangent_out != nullptr)
    {
        // Directional derivatives of the network along each tangent column.
        const Var d1 = tape.repeat_cols(tape.affine(tape.square(h1), -1.0, 1.0), k);
        const Var t1 = tape.cmul(d1, tape.matmul(p[first], tangent));
        const Var d2 = tape.repeat_cols(tape.affine(tape.square(h2), -1.0, 1.0), k);
        const Var t2 = tape.cmul(d2, tape.matmul(p[first + 2], t1));
        *tangent_out = tape.matmul(p[first + 4], t2);
    }
    return out;
}

/// One coupling layer on the tape. With a tangent (D x n*D), also propagates it.
inline Var coupling_on_tape(Tape& tape, const Flow& flow, const CouplingLayer& l, const std::vector<Var>& p,
                            std::size_t first, Var x, Var* tangent, Var* logdet_rows)
{
    const Eigen::Index d = flow.dim;
    const Var a = tape.rows(x, l.pass_begin(), l.pass_count());
    const Var b = tape.rows(x, l.transform_begin(), l.transform_count());
    Var ta{}, tb{}, tr{}, tt{};
    if (tangent != nullptr)
    {
        ta = tape.rows(*tangent, l.pass_begin(), l.pass_count());
        tb = tape.rows(*tangent, l.transform_begin(), l.transform_count());
    }
    const Var r = mlp_on_tape(tape, p, first, a, ta, d, tangent != nullptr ? &tr : nullptr);
    const Var t = mlp_on_tape(tape, p, first + 6, a, ta, d, tangent != nullptr ? &tt : nullptr);
    const double bound = flow.scale_bound;
    const Var u = tape.tanh(tape.affine(r, 1.0 / bound, 0.0));
    const Var s = tape.affine(u, bound, 0.0);
    const Var e = tape.exp(s);
    const Var be = tape.cmul(b, e);
    const Var b_new = tape.add(be, t);
    *logdet_rows = tape.col_sum(s);

    if (tangent != nullptr)
    {
        const Var ds = tape.cmul(tape.repeat_cols(tape.affine(tape.square(u), -1.0, 1.0), d), tr);
        const Var tb_new = tape.add(tape.add(tape.cmul(tape.repeat_cols(e, d), tb), tape.cmul(tape.repeat_cols(be, d), ds)), tt);
        *tangent = l.pass_first ? tape.vconcat(ta, tb_new) : tape.vconcat(tb_new, ta);
    }
    return l.pass_first ? tape.vconcat(a, b_new) : tape.vconcat(b_new, a);
}

/// Constant D x (n * D) block row of identity matrices.
inline Eigen::MatrixXd identity_tangent(Eigen::Index d, Eigen::Index n, const Eigen::VectorXd& diagonal)
{
    Eigen::MatrixXd t = Eigen::MatrixXd::Zero(d, n * d);
    for (Eigen::Index j = 0; j < n; ++j)
    {
        t.middleCols(j * d, d).diagonal() = diagonal;
    }
    return t;
}

} // namespace detail

/**
 * Builds the training loss for a batch (columns of `w`) on `tape`:
 *
 *     L = mean_n [ nll(w_n) + weight * |J_f(w_n)|_F ]
 *
 * The Jacobian is carried exactly as a tangent matrix through every layer,
 * so its norm is differentiable with respect to all parameters.
 */
inline LossTerms build_loss(Tape& tape, const Flow& flow, const TapeParameters& params, const Eigen::MatrixXd& w,
                            double frobenius_weight, FrobeniusMode mode = FrobeniusMode::composed)
{
    detail::check_input(flow, w);
    const Eigen::Index d = flow.dim;
    const Eigen::Index n = w.cols();
    const Eigen::VectorXd inv_std = flow.stddev.cwiseInverse();
    Var x = tape.constant(inv_std.asDiagonal() * (w.colwise() - flow.mean));
    const bool composed = mode == FrobeniusMode::composed && frobenius_weight != 0.0;
    Var tangent = tape.constant(detail::identity_tangent(d, n, inv_std));
    Var logdet = tape.constant(Eigen::MatrixXd::Constant(1, n, standardization_logdet(flow)));
    Var per_layer_frob = tape.constant(Eigen::MatrixXd::Constant(1, n, inv_std.norm()));
    const Var identity = tape.constant(detail::identity_tangent(d, n, Eigen::VectorXd::Ones(d)));

    for (std::size_t k = 0; k < flow.layers.size(); ++k)
    {
        const CouplingLayer& l = flow.layers[k];
        Var rows{};
        if (mode == FrobeniusMode::per_layer && frobenius_weight != 0.0)
        {
            Var local = identity;
            Var unused{};
            detail::coupling_on_tape(tape, flow, l, params.vars, 12 * k, x, &local, &unused);
            const Var norms = tape.sqrt(tape.group_sum_cols(tape.col_sum(tape.square(local)), d));
            per_layer_frob = tape.add(per_layer_frob, norms);
        }
        x = detail::coupling_on_tape(tape, flow, l, params.vars, 12 * k, x, composed ? &tangent : nullptr, &rows);
        logdet = tape.add(logdet, rows);
    }

    const double c = 0.5 * static_cast<double>(d) * std::log(2.0 * M_PI);
    const Var nll_rows = tape.sub(tape.affine(tape.col_sum(tape.square(x)), 0.5, c), logdet);
    const double inv_n = 1.0 / static_cast<double>(n);
    LossTerms out;
    out.nll = tape.affine(tape.sum(nll_rows), inv_n, 0.0);
    Var frob_rows;
    if (composed)
    {
        frob_rows = tape.sqrt(tape.group_sum_cols(tape.col_sum(tape.square(tangent)), d));
    } else if (mode == FrobeniusMode::per_layer && frobenius_weight != 0.0)
    {
        frob_rows = per_layer_frob;
    } else
    {
        frob_rows = tape.constant(Eigen::MatrixXd::Zero(1, n));
    }
    out.frobenius = tape.affine(tape.sum(frob_rows), inv_n, 0.0);
    out.total = tape.add(out.nll, tape.affine(out.frobenius, frobenius_weight, 0.0));
    return out;
}

/**
 * w = f^{-1}(z) for the columns of `z` on the tape, with the flow parameters
 * held constant. Used to differentiate functions of w with respect to z.
 */
inline Var inverse_on_tape(Tape& tape, const Flow& flow, Var z)
{
    if (tape.value(z).rows() != flow.dim)
    {
        throw InvalidArgument("inverse_on_tape: dimension mismatch");
    }
    Var x = z;
    for (int k = flow.num_layers() - 1; k >= 0; --k)
    {
        const CouplingLayer& l = flow.layers[static_cast<std::size_t>(k)];
        std::vector<Var> p;
        for (const auto& m : l.s_net.p)
            p.push_back(tape.constant(m));
        for (const auto& m : l.t_net.p)
            p.push_back(tape.constant(m));
        const Var a = tape.rows(x, l.pass_begin(), l.pass_count());
        const Var b = tape.rows(x, l.transform_begin(), l.transform_count());
        const Var r = detail::mlp_on_tape(tape, p, 0, a, Var{}, 0, nullptr);
        const Var t = detail::mlp_on_tape(tape, p, 6, a, Var{}, 0, nullptr);
        const double bound = flow.scale_bound;
        const Var s = tape.affine(tape.tanh(tape.affine(r, 1.0 / bound, 0.0)), bound, 0.0);
        const Var b_old = tape.cmul(tape.sub(b, t), tape.exp(tape.affine(s, -1.0, 0.0)));
        x = l.pass_first ? tape.vconcat(a, b_old) : tape.vconcat(b_old, a);
    }
    const Eigen::MatrixXd scale = flow.stddev.asDiagonal();
    return tape.add_bias(tape.matmul(tape.constant(scale), x), tape.constant(flow.mean));
}

/// Loss value and gradient with respect to get_parameters(flow).
inline double loss_and_gradient(const Flow& flow, const Eigen::MatrixXd& w, double frobenius_weight,
                                FrobeniusMode mode, Eigen::VectorXd& gradient, double* nll_out = nullptr,
                                double* frobenius_out = nullptr)
{
    Tape tape;
    const TapeParameters params = register_parameters(tape, flow);
    const LossTerms terms = build_loss(tape, flow, params, w, frobenius_weight, mode);
    tape.backward(terms.total);
    gradient.resize(parameter_count(flow));
    Eigen::Index k = 0;
    for (const Var& v : params.vars)
    {
        const Eigen::MatrixXd g = tape.grad(v);
        gradient.segment(k, g.size()) = Eigen::Map<const Eigen::VectorXd>(g.data(), g.size());
        k += g.size();
    }
    if (nll_out != nullptr)
        *nll_out = tape.value(terms.nll)(0, 0);
    if (frobenius_out != nullptr)
        *frobenius_out = tape.value(terms.frobenius)(0, 0);
    return tape.value(terms.total)(0, 0);
}

/// Same loss evaluated without the tape (forward() and jacobian()).
inline double loss_value(const Flow& flow, const Eigen::MatrixXd& w, double frobenius_weight,
                         FrobeniusMode mode = FrobeniusMode::composed)
{
    double frob = 0.0;
    if (frobenius_weight != 0.0)
    {
        for (Eigen::Index j = 0; j < w.cols(); ++j)
        {
            frob += mode == FrobeniusMode::composed ? jacobian_frobenius(flow, w.col(j))
                                                    : layerwise_jacobian_frobenius(flow, w.col(j));
        }
    }
    return (nll(flow, w).sum() + frobenius_weight * frob) / static_cast<double>(w.cols());
}

// ---------------------------------------------------------------------------
// Serialisation.

inline constexpr std::string_view kFlowMagic = "BFRNVPFL";
inline constexpr std::uint32_t kFlowVersion = 1;

inline std::string flow_to_binary(const Flow& flow)
{
    BinaryWriter w(kFlowMagic, kFlowVersion);
    w.u64(static_cast<std::uint64_t>(flow.dim));
    w.u64(static_cast<std::uint64_t>(flow.num_layers()));
    w.f64(flow.scale_bound);
    w.vector(flow.mean);
    w.vector(flow.stddev);
    for (const auto& l : flow.layers)
    {
        w.u64(l.pass_first ? 1 : 0);
        for (const auto& m : l.s_net.p)
            w.matrix(m);
        for (const auto& m : l.t_net.p)
            w.matrix(m);
    }
    return w.bytes();
}

inline Flow flow_from_binary(std::string bytes)
{
    BinaryReader r(std::move(bytes), kFlowMagic, kFlowVersion);
    Flow f;
    f.dim = static_cast<int>(r.u64());
    const auto k = r.u64();
    f.scale_bound = r.f64();
    f.mean = r.vector();
    f.stddev = r.vector();
    if (f.dim < 2 || f.mean.size() != f.dim || f.stddev.size() != f.dim || k > 10000)
    {
        throw ParseError("flow file: inconsistent header");
    }
    for (std::uint64_t i = 0; i < k; ++i)
    {
        CouplingLayer l;
        l.dim = f.dim;
        l.pass_first = r.u64() != 0;
        for (auto& m : l.s_net.p)
            m = r.matrix();
        for (auto& m : l.t_net.p)
            m = r.matrix();
        if (l.s_net.inputs() != l.pass_count() || l.s_net.outputs() != l.transform_count() ||
            l.t_net.inputs() != l.pass_count() || l.t_net.outputs() != l.transform_count())
        {
            throw ParseError("flow file: layer " + std::to_string(i + 1) + " has inconsistent shapes");
        }
        f.layers.push_back(std::move(l));
    }
    if (!r.at_end())
    {
        throw ParseError("trailing bytes in flow file");
    }
    return f;
}

inline void save_flow(const Flow& flow, const std::filesystem::path& path)
{
    write_file_atomic(path, flow_to_binary(flow));
}

inline Flow load_flow(const std::filesystem::path& path) { return flow_from_binary(read_file(path)); }

} // namespace flow
} // namespace bilinflow

#endif /* BILINFLOW_FLOW_REAL_NVP_HPP */
