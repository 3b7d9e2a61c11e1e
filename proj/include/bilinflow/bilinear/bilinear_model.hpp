/*
 * bilinflow - bilinear identity/expression face models with normalizing flows.
 *
 * File: include/bilinflow/bilinear/bilinear_model.hpp
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

#ifndef BILINFLOW_BILINEAR_BILINEAR_MODEL_HPP
#define BILINFLOW_BILINEAR_BILINEAR_MODEL_HPP

#include "bilinflow/bilinear/shape_tensor.hpp"
#include "bilinflow/core/binary_io.hpp"
#include "bilinflow/core/error.hpp"
#include "bilinflow/geometry/mesh.hpp"
#include "bilinflow/spectral/jacobi.hpp"

#include "Eigen/Core"
#include "Eigen/QR"

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

namespace bilinflow {
namespace bilinear {

/**
 * Bilinear face model
 *
 *     x = mu + C x_2 w_id x_3 w_ex
 *
 * The core keeps the vertex mode uncompressed and is stored as a
 * 3N x (d_id * d_ex) matrix with column a + d_id * b for identity component a
 * and expression component b.
 */
struct BilinearModel
{
    Eigen::VectorXd mean;   ///< 3N
    Eigen::MatrixXd core;   ///< 3N x (d_id * d_ex)
    Eigen::MatrixXd u_id;   ///< n_id x d_id, orthonormal columns.
    Eigen::MatrixXd u_ex;   ///< n_ex x d_ex, orthonormal columns.
    Eigen::VectorXd sigma_id; ///< All n_id mode-2 singular values, descending.
    Eigen::VectorXd sigma_ex; ///< All n_ex mode-3 singular values, descending.
    Eigen::VectorXd lambda_id; ///< d_id leading sigma_id^2 / (n_id - 1).
    Eigen::VectorXd lambda_ex; ///< d_ex leading sigma_ex^2 / (n_ex - 1).

    // Provenance.
    std::vector<geometry::Triangle> faces;
    std::vector<std::string> identity_labels;
    std::vector<std::string> expression_labels;
    bool augmented = false;
    std::uint64_t seed = 0;

    int d_id() const { return static_cast<int>(u_id.cols()); }
    int d_ex() const { return static_cast<int>(u_ex.cols()); }
    Eigen::Index dimension() const { return mean.size(); }
};

namespace detail {

/// Eigenvectors of a symmetric PSD Gram matrix, eigenvalues descending (clamped at zero).
inline void descending_eigen(const Eigen::MatrixXd& gram, Eigen::MatrixXd& vectors, Eigen::VectorXd& values)
{
    const spectral::SymmetricEigen eig = spectral::jacobi_eigen(gram, 1e-10);
    const Eigen::Index n = gram.rows();
    vectors.resize(n, n);
    values.resize(n);
    for (Eigen::Index k = 0; k < n; ++k)
    {
        values(k) = std::max(0.0, eig.values(n - 1 - k));
        vectors.col(k) = eig.vectors.col(n - 1 - k);
    }
}

/// Kronecker product of column-stacked factors: entry (i + rows(a) * e, p + cols(a) * q) = a(i,p) b(e,q).
inline Eigen::MatrixXd kron(const Eigen::MatrixXd& b, const Eigen::MatrixXd& a)
{
    Eigen::MatrixXd out(a.rows() * b.rows(), a.cols() * b.cols());
    for (Eigen::Index e = 0; e < b.rows(); ++e)
        for (Eigen::Index q = 0; q < b.cols(); ++q)
            out.block(a.rows() * e, a.cols() * q, a.rows(), a.cols()) = b(e, q) * a;
    return out;
}

} // namespace detail

/**
 * Higher-order SVD of the grand-mean-centred tensor. U_id and U_ex are the
 * leading left singular vectors of the mode-2 and mode-3 unfoldings,
 * obtained from the eigenvectors of their (small) Gram matrices. Each basis
 * vector's largest-magnitude entry is positive.
 */
inline BilinearModel hosvd(const ShapeTensor& tensor, int d_id, int d_ex)
{
    if (d_id < 1 || d_id > tensor.n_id || d_ex < 1 || d_ex > tensor.n_ex)
    {
        throw InvalidArgument("hosvd: ranks (" + std::to_string(d_id) + ", " + std::to_string(d_ex) +
                              ") outside [1, " + std::to_string(tensor.n_id) + "] x [1, " +
                              std::to_string(tensor.n_ex) + "]");
    }
    BilinearModel model;
    model.mean = tensor.data.rowwise().mean();
    const Eigen::MatrixXd centred = tensor.data.colwise() - model.mean;

    // Gram matrices of the mode-2 / mode-3 unfoldings, accumulated from slices.
    Eigen::MatrixXd g_id = Eigen::MatrixXd::Zero(tensor.n_id, tensor.n_id);
    for (int e = 0; e < tensor.n_ex; ++e)
    {
        const auto block = centred.middleCols(static_cast<Eigen::Index>(tensor.n_id) * e, tensor.n_id);
        g_id.noalias() += block.transpose() * block;
    }
    Eigen::MatrixXd g_ex = Eigen::MatrixXd::Zero(tensor.n_ex, tensor.n_ex);
    Eigen::MatrixXd slice(centred.rows(), tensor.n_ex);
    for (int i = 0; i < tensor.n_id; ++i)
    {
        for (int e = 0; e < tensor.n_ex; ++e)
        {
            slice.col(e) = centred.col(tensor.column(i, e));
        }
        g_ex.noalias() += slice.transpose() * slice;
    }
    g_id = 0.5 * (g_id + g_id.transpose());
    g_ex = 0.5 * (g_ex + g_ex.transpose());

    Eigen::MatrixXd v_id, v_ex;
    Eigen::VectorXd s2_id, s2_ex;
    detail::descending_eigen(g_id, v_id, s2_id);
    detail::descending_eigen(g_ex, v_ex, s2_ex);

    model.u_id = v_id.leftCols(d_id);
    model.u_ex = v_ex.leftCols(d_ex);
    model.sigma_id = s2_id.cwiseSqrt();
    model.sigma_ex = s2_ex.cwiseSqrt();
    const double nid1 = std::max(1, tensor.n_id - 1);
    const double nex1 = std::max(1, tensor.n_ex - 1);
    model.lambda_id = s2_id.head(d_id) / nid1;
    model.lambda_ex = s2_ex.head(d_ex) / nex1;
    model.core = centred * detail::kron(model.u_ex, model.u_id);
    model.identity_labels = tensor.identity_labels;
    model.expression_labels = tensor.expression_labels;
    return model;
}

/// Vector kron(w_ex, w_id): entry a + d_id * b = w_id(a) * w_ex(b).
inline Eigen::VectorXd coefficient_product(const Eigen::VectorXd& w_id, const Eigen::VectorXd& w_ex)
{
    Eigen::VectorXd out(w_id.size() * w_ex.size());
    for (Eigen::Index b = 0; b < w_ex.size(); ++b)
    {
        out.segment(w_id.size() * b, w_id.size()) = w_ex(b) * w_id;
    }
    return out;
}

inline void check_coefficients(const BilinearModel& model, const Eigen::VectorXd& w_id, const Eigen::VectorXd& w_ex)
{
    if (w_id.size() != model.d_id() || w_ex.size() != model.d_ex())
    {
        throw InvalidArgument("bilinear model expects (" + std::to_string(model.d_id()) + ", " +
                              std::to_string(model.d_ex()) + ") coefficients, got (" + std::to_string(w_id.size()) +
                              ", " + std::to_string(w_ex.size()) + ")");
    }
}

/// mu + C x_2 w_id x_3 w_ex as a flattened 3N vector.
inline Eigen::VectorXd reconstruct(const BilinearModel& model, const Eigen::VectorXd& w_id, const Eigen::VectorXd& w_ex)
{
    check_coefficients(model, w_id, w_ex);
    return model.mean + model.core * coefficient_product(w_id, w_ex);
}

/// 3N x d_id matrix A with reconstruct(w_id, w_ex) = mu + A w_id.
inline Eigen::MatrixXd identity_operator(const BilinearModel& model, const Eigen::VectorXd& w_ex)
{
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(model.dimension(), model.d_id());
    for (int b = 0; b < model.d_ex(); ++b)
    {
        a += w_ex(b) * model.core.middleCols(static_cast<Eigen::Index>(model.d_id()) * b, model.d_id());
    }
    return a;
}

/// 3N x d_ex matrix B with reconstruct(w_id, w_ex) = mu + B w_ex.
inline Eigen::MatrixXd expression_operator(const BilinearModel& model, const Eigen::VectorXd& w_id)
{
    Eigen::MatrixXd out(model.dimension(), model.d_ex());
    for (int b = 0; b < model.d_ex(); ++b)
    {
        out.col(b) = model.core.middleCols(static_cast<Eigen::Index>(model.d_id()) * b, model.d_id()) * w_id;
    }
    return out;
}

enum class EncodeMode
{
    fix_expression, ///< Solve for w_id with w_ex given.
    fix_identity,   ///< Solve for w_ex with w_id given.
    alternate       ///< Alternate both solves starting from the given w_ex.
};

struct EncodeOptions
{
    EncodeMode mode = EncodeMode::alternate;
    Eigen::VectorXd w_id; ///< Fixed identity (fix_identity).
    Eigen::VectorXd w_ex; ///< Fixed expression (fix_expression) or starting point (alternate).
    int max_iterations = 100;
    double tolerance = 1e-12; ///< Relative residual decrease that ends the alternation.
};

struct EncodeResult
{
    Eigen::VectorXd w_id;
    Eigen::VectorXd w_ex;
    /// Squared residual |reconstruct - face|^2 after each half-step (one entry for single solves).
    std::vector<double> residuals;
};

namespace detail {

inline Eigen::VectorXd least_squares(const Eigen::MatrixXd& a, const Eigen::VectorXd& rhs, const char* what)
{
    const Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(a);
    if (qr.rank() < a.cols())
    {
        throw InvalidArgument(std::string("encode: singular system solving for ") + what +
                              " (fixed factor is zero or degenerate)");
    }
    return qr.solve(rhs);
}

} // namespace detail

/// Least-squares coefficients of a flattened face under the model.
inline EncodeResult encode(const BilinearModel& model, const Eigen::VectorXd& face, const EncodeOptions& options)
{
    if (face.size() != model.dimension())
    {
        throw InvalidArgument("encode: face has " + std::to_string(face.size()) + " entries, model has " +
                              std::to_string(model.dimension()));
    }
    const Eigen::VectorXd rhs = face - model.mean;
    EncodeResult r;
    auto residual = [&] { return (reconstruct(model, r.w_id, r.w_ex) - face).squaredNorm(); };
    switch (options.mode)
    {
    case EncodeMode::fix_expression:
        check_coefficients(model, Eigen::VectorXd::Zero(model.d_id()), options.w_ex);
        r.w_ex = options.w_ex;
        r.w_id = detail::least_squares(identity_operator(model, r.w_ex), rhs, "w_id");
        r.residuals.push_back(residual());
        return r;
    case EncodeMode::fix_identity:
        check_coefficients(model, options.w_id, Eigen::VectorXd::Zero(model.d_ex()));
        r.w_id = options.w_id;
        r.w_ex = detail::least_squares(expression_operator(model, r.w_id), rhs, "w_ex");
        r.residuals.push_back(residual());
        return r;
    case EncodeMode::alternate:
        break;
    }
    check_coefficients(model, Eigen::VectorXd::Zero(model.d_id()), options.w_ex);
    r.w_ex = options.w_ex;
    double previous = std::numeric_limits<double>::infinity();
    for (int it = 0; it < options.max_iterations; ++it)
    {
        r.w_id = detail::least_squares(identity_operator(model, r.w_ex), rhs, "w_id");
        r.residuals.push_back(residual());
        r.w_ex = detail::least_squares(expression_operator(model, r.w_id), rhs, "w_ex");
        const double current = residual();
        r.residuals.push_back(current);
        if (previous - current <= options.tolerance * std::max(previous, 1e-300) || current == 0.0)
        {
            break;
        }
        previous = current;
    }
    return r;
}

/// Smallest d with sum_{k<d} sigma_k^2 >= fraction * sum sigma_k^2 (sigma sorted descending).
inline int variance_truncation(const Eigen::VectorXd& singular_values, double fraction)
{
    if (singular_values.size() == 0)
    {
        throw InvalidArgument("variance_truncation: empty spectrum");
    }
    if (!(fraction > 0.0 && fraction <= 1.0))
    {
        throw InvalidArgument("variance_truncation: fraction must lie in (0, 1]");
    }
    const double total = singular_values.squaredNorm();
    if (total == 0.0)
    {
        return 1;
    }
    double acc = 0.0;
    for (Eigen::Index k = 0; k < singular_values.size(); ++k)
    {
        acc += singular_values(k) * singular_values(k);
        if (acc >= fraction * total * (1.0 - 1e-12))
        {
            return static_cast<int>(k + 1);
        }
    }
    return static_cast<int>(singular_values.size());
}

inline constexpr std::string_view kModelMagic = "BFBILINM";
inline constexpr std::uint32_t kModelVersion = 1;

inline std::string model_to_binary(const BilinearModel& m)
{
    BinaryWriter w(kModelMagic, kModelVersion);
    w.vector(m.mean);
    w.matrix(m.core);
    w.matrix(m.u_id);
    w.matrix(m.u_ex);
    w.vector(m.sigma_id);
    w.vector(m.sigma_ex);
    w.vector(m.lambda_id);
    w.vector(m.lambda_ex);
    w.u64(m.faces.size());
    for (const auto& f : m.faces)
    {
        w.indices({f[0], f[1], f[2]});
    }
    w.u64(m.identity_labels.size());
    for (const auto& s : m.identity_labels)
    {
        w.string(s);
    }
    w.u64(m.expression_labels.size());
    for (const auto& s : m.expression_labels)
    {
        w.string(s);
    }
    w.u64(m.augmented ? 1 : 0);
    w.u64(m.seed);
    return w.bytes();
}

inline BilinearModel model_from_binary(std::string bytes)
{
    BinaryReader r(std::move(bytes), kModelMagic, kModelVersion);
    BilinearModel m;
    m.mean = r.vector();
    m.core = r.matrix();
    m.u_id = r.matrix();
    m.u_ex = r.matrix();
    m.sigma_id = r.vector();
    m.sigma_ex = r.vector();
    m.lambda_id = r.vector();
    m.lambda_ex = r.vector();
    const auto nf = r.u64();
    for (std::uint64_t k = 0; k < nf; ++k)
    {
        const auto idx = r.indices();
        if (idx.size() != 3)
        {
            throw ParseError("model file: malformed face record");
        }
        m.faces.push_back({idx[0], idx[1], idx[2]});
    }
    const auto ni = r.u64();
    for (std::uint64_t k = 0; k < ni; ++k)
    {
        m.identity_labels.push_back(r.string());
    }
    const auto ne = r.u64();
    for (std::uint64_t k = 0; k < ne; ++k)
    {
        m.expression_labels.push_back(r.string());
    }
    m.augmented = r.u64() != 0;
    m.seed = r.u64();
    if (!r.at_end())
    {
        throw ParseError("trailing bytes in model file");
    }
    if (m.core.rows() != m.mean.size() || m.core.cols() != m.u_id.cols() * m.u_ex.cols() ||
        m.lambda_id.size() != m.u_id.cols() || m.lambda_ex.size() != m.u_ex.cols())
    {
        throw ParseError("model file: inconsistent dimensions");
    }
    return m;
}

inline void save_model(const BilinearModel& model, const std::filesystem::path& path)
{
    write_file_atomic(path, model_to_binary(model));
}

inline BilinearModel load_model(const std::filesystem::path& path) { return model_from_binary(read_file(path)); }

} // namespace bilinear
} // namespace bilinflow

#endif /* BILINFLOW_BILINEAR_BILINEAR_MODEL_HPP */
