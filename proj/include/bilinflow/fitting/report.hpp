/*
 * bilinflow - bilinear identity/expression face models with normalizing flows.
 *
 * File: include/bilinflow/fitting/report.hpp
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

#ifndef BILINFLOW_FITTING_REPORT_HPP
#define BILINFLOW_FITTING_REPORT_HPP

#include "bilinflow/core/binary_io.hpp"
#include "bilinflow/core/error.hpp"
#include "bilinflow/fitting/fit.hpp"

#include "Eigen/Core"

#include <cmath>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

namespace bilinflow {
namespace fitting {

/// Plain-text report of one fit: summary statistics, codes and the energy trace.
inline std::string fit_report(const std::string& target_name, const FitResult& r)
{
    const ErrorSummary s = summarize(r.per_vertex_error);
    std::ostringstream out;
    out.precision(10);
    out << "target " << target_name << '\n'
        << "converged " << (r.converged ? "yes" : "no") << '\n'
        << "iterations " << r.iterations << '\n'
        << "error_mean_mm " << s.mean << '\n'
        << "error_std_mm " << s.stddev << '\n'
        << "error_max_mm " << s.max << '\n'
        << "energy_total " << r.final_energy.total << '\n'
        << "energy_verts " << r.final_energy.verts << '\n'
        << "energy_prior " << r.final_energy.prior << '\n';
    auto vec = [&](const char* name, const Eigen::VectorXd& v) {
        out << name;
        for (Eigen::Index i = 0; i < v.size(); ++i)
            out << ' ' << v(i);
        out << '\n';
    };
    vec("z_id", r.z_id.values);
    vec("z_ex", r.z_ex.values);
    out << "energy_trace";
    for (double e : r.energy_trace)
        out << ' ' << e;
    out << '\n';
    return out.str();
}

/// One error per line, in vertex order.
inline std::string per_vertex_error_text(const Eigen::VectorXd& errors)
{
    std::ostringstream out;
    out.precision(10);
    for (Eigen::Index i = 0; i < errors.size(); ++i)
        out << errors(i) << '\n';
    return out.str();
}

struct TargetErrors
{
    std::string name;
    Eigen::VectorXd errors;
};

/**
 * CSV with one row per target (mean, std, max of its per-vertex errors) and a
 * final "all" row: mean and population std of the per-target means, and the
 * overall maximum.
 */
inline std::string aggregate_csv(const std::vector<TargetErrors>& targets)
{
    if (targets.empty())
    {
        throw InvalidArgument("aggregate report: no fit results");
    }
    std::ostringstream out;
    out.precision(10);
    out << "target,mean_mm,std_mm,max_mm\n";
    Eigen::VectorXd means(static_cast<Eigen::Index>(targets.size()));
    double overall_max = 0.0;
    for (std::size_t k = 0; k < targets.size(); ++k)
    {
        const ErrorSummary s = summarize(targets[k].errors);
        out << targets[k].name << ',' << s.mean << ',' << s.stddev << ',' << s.max << '\n';
        means(static_cast<Eigen::Index>(k)) = s.mean;
        overall_max = std::max(overall_max, s.max);
    }
    const ErrorSummary all = summarize(means);
    out << "all," << all.mean << ',' << all.stddev << ',' << overall_max << '\n';
    return out.str();
}

} // namespace fitting
} // namespace bilinflow

#endif /* BILINFLOW_FITTING_REPORT_HPP */
