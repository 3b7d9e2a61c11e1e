/*
 * bilinflow - bilinear identity/expression face models with normalizing flows.
 *
 * File: include/bilinflow/geometry/procrustes.hpp
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

#ifndef BILINFLOW_GEOMETRY_PROCRUSTES_HPP
#define BILINFLOW_GEOMETRY_PROCRUSTES_HPP

#include "bilinflow/core/error.hpp"
#include "bilinflow/geometry/mesh.hpp"

#include "Eigen/Core"
#include "Eigen/SVD"

#include <cmath>
#include <utility>

namespace bilinflow {
namespace geometry {

/// p -> scale * rotation * p + translation
struct RigidTransform
{
    Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
    Eigen::Vector3d translation = Eigen::Vector3d::Zero();
    double scale = 1.0;

    Eigen::Matrix3Xd apply(const Eigen::Matrix3Xd& points) const
    {
        return (scale * rotation * points).colwise() + translation;
    }
};

/**
 * Closed-form least-squares similarity (or rigid) alignment of corresponding
 * point sets (Umeyama). The sign of the smallest singular direction is
 * corrected so the result is always a proper rotation.
 *
 * Throws InvalidArgument on a count mismatch and NumericalError when the
 * source points are collinear (rotation not determined).
 */
inline RigidTransform procrustes_transform(const Eigen::Matrix3Xd& source, const Eigen::Matrix3Xd& target,
                                           bool allow_scale)
{
    if (source.cols() != target.cols())
    {
        throw InvalidArgument("procrustes: vertex count mismatch (" + std::to_string(source.cols()) + " vs " +
                              std::to_string(target.cols()) + ")");
    }
    if (source.cols() < 3)
    {
        throw InvalidArgument("procrustes: need at least 3 points");
    }
    const Eigen::Vector3d mu_s = source.rowwise().mean();
    const Eigen::Vector3d mu_t = target.rowwise().mean();
    const Eigen::Matrix3Xd cs = source.colwise() - mu_s;
    const Eigen::Matrix3Xd ct = target.colwise() - mu_t;

    const Eigen::JacobiSVD<Eigen::Matrix3d> spread(cs * cs.transpose());
    const auto sv = spread.singularValues();
    if (sv(0) <= 0.0 || sv(1) <= 1e-12 * sv(0))
    {
        throw NumericalError("procrustes: source points are degenerate (collinear or coincident)");
    }

    const Eigen::Matrix3d cov = ct * cs.transpose();
    const Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Eigen::Matrix3d d = Eigen::Matrix3d::Identity();
    if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0)
    {
        d(2, 2) = -1.0;
    }
    RigidTransform tf;
    tf.rotation = svd.matrixU() * d * svd.matrixV().transpose();
    if (allow_scale)
    {
        const double var_s = cs.squaredNorm();
        tf.scale = (svd.singularValues().asDiagonal() * d).trace() / var_s;
    }
    tf.translation = mu_t - tf.scale * tf.rotation * mu_s;
    return tf;
}

/// Aligns `source` onto `target` (same vertex order); returns the moved mesh and the transform.
inline std::pair<Mesh, RigidTransform> procrustes_align(const Mesh& source, const Mesh& target, bool allow_scale)
{
    const RigidTransform tf = procrustes_transform(source.vertices, target.vertices, allow_scale);
    Mesh aligned = source;
    aligned.vertices = tf.apply(source.vertices);
    return {std::move(aligned), tf};
}

/// Root-mean-square per-vertex distance between corresponding points.
inline double rms_distance(const Eigen::Matrix3Xd& a, const Eigen::Matrix3Xd& b)
{
    if (a.cols() != b.cols())
    {
        throw InvalidArgument("rms_distance: vertex count mismatch");
    }
    if (a.cols() == 0)
    {
        return 0.0;
    }
    return std::sqrt((a - b).squaredNorm() / static_cast<double>(a.cols()));
}

} // namespace geometry
} // namespace bilinflow

#endif /* BILINFLOW_GEOMETRY_PROCRUSTES_HPP */
