/*
 * bilinflow - bilinear identity/expression face models with normalizing flows.
 *
 * File: include/bilinflow/latent/chi2.hpp
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

#ifndef BILINFLOW_LATENT_CHI2_HPP
#define BILINFLOW_LATENT_CHI2_HPP

#include "bilinflow/core/error.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace bilinflow {
namespace latent {

namespace detail {

/// P(a, x) by its power series; converges quickly for x < a + 1.
inline double gamma_p_series(double a, double x)
{
    double term = 1.0 / a;
    double sum = term;
    for (int n = 1; n < 10000; ++n)
    {
        term *= x / (a + n);
        sum += term;
        if (std::abs(term) < std::abs(sum) * 1e-17)
        {
            break;
        }
    }
    return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

/// Q(a, x) by its continued fraction (modified Lentz); used for x >= a + 1.
inline double gamma_q_fraction(double a, double x)
{
    constexpr double tiny = 1e-300;
    double b = x + 1.0 - a;
    double c = 1.0 / tiny;
    double d = 1.0 / b;
    double h = d;
    for (int i = 1; i < 10000; ++i)
    {
        const double an = -i * (i - a);
        b += 2.0;
        d = an * d + b;
        if (std::abs(d) < tiny)
            d = tiny;
        c = b + an / c;
        if (std::abs(c) < tiny)
            c = tiny;
        d = 1.0 / d;
        const double delta = d * c;
        h *= delta;
        if (std::abs(delta - 1.0) < 1e-17)
        {
            break;
        }
    }
    return std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
}

} // namespace detail

/// Regularised lower incomplete gamma function P(a, x).
inline double regularized_gamma_p(double a, double x)
{
    if (!(a > 0.0) || !(x >= 0.0))
    {
        throw InvalidArgument("regularized_gamma_p: need a > 0 and x >= 0");
    }
    if (x == 0.0)
    {
        return 0.0;
    }
    return x < a + 1.0 ? detail::gamma_p_series(a, x) : 1.0 - detail::gamma_q_fraction(a, x);
}

/// CDF of the chi-squared distribution with `dof` degrees of freedom.
inline double chi2_cdf(double x, double dof)
{
    if (!(dof > 0.0))
    {
        throw InvalidArgument("chi2_cdf: degrees of freedom must be positive");
    }
    return x <= 0.0 ? 0.0 : regularized_gamma_p(0.5 * dof, 0.5 * x);
}

/// Chi-squared quantile by bracketing and bisection on chi2_cdf.
inline double chi2_quantile(double dof, double rho)
{
    if (!(dof >= 1.0))
    {
        throw InvalidArgument("chi2 quantile: degrees of freedom must be >= 1, got " + std::to_string(dof));
    }
    if (!(rho > 0.0 && rho < 1.0))
    {
        throw InvalidArgument("chi2 quantile: confidence must lie in (0, 1), got " + std::to_string(rho));
    }
    double lo = 0.0;
    double hi = dof + 10.0;
    while (chi2_cdf(hi, dof) < rho)
    {
        lo = hi;
        hi *= 2.0;
    }
    for (int i = 0; i < 200 && hi - lo > 1e-15 * hi; ++i)
    {
        const double mid = 0.5 * (lo + hi);
        (chi2_cdf(mid, dof) < rho ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

/// beta with beta^2 the rho-quantile of chi-squared with `dof` degrees of freedom.
inline double chi2_critical(double dof, double rho) { return std::sqrt(chi2_quantile(dof, rho)); }

} // namespace latent
} // namespace bilinflow

#endif /* BILINFLOW_LATENT_CHI2_HPP */
