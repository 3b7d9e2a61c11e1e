/*
 * bilinflow - bilinear identity/expression face models with normalizing flows.
 *
 * File: include/bilinflow/spectral/au_detection.hpp
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

#ifndef BILINFLOW_SPECTRAL_AU_DETECTION_HPP
#define BILINFLOW_SPECTRAL_AU_DETECTION_HPP

#include "bilinflow/core/binary_io.hpp"
#include "bilinflow/core/error.hpp"
#include "bilinflow/geometry/mesh_io.hpp"
#include "bilinflow/spectral/linear_svm.hpp"
#include "bilinflow/spectral/patch.hpp"

#include "Eigen/Core"

#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

namespace bilinflow {
namespace spectral {

/// Linear detector for one action unit over the stacked feature vector of au_features().
struct AuClassifier
{
    std::string au_id;
    Eigen::VectorXd weights;
    double bias = 0.0;
    double C = 1.0;

    double decision(const Eigen::VectorXd& features) const { return weights.dot(features) + bias; }
};

/// A set of classifiers sharing one feature layout (landmarks and tau).
struct ClassifierBank
{
    int tau = 0;
    std::vector<int> landmarks;
    std::vector<AuClassifier> classifiers;

    Eigen::Index feature_dimension() const { return 3 * static_cast<Eigen::Index>(tau) * landmarks.size(); }
};

/**
 * Trains one AU classifier on raw feature vectors (columns of `features`).
 * Features are standardised per dimension before the SVM solve; the scaling
 * is folded back so the returned weights apply to raw features.
 */
inline AuClassifier train_au_svm(const std::string& au_id, const Eigen::MatrixXd& features,
                                 const std::vector<int>& labels, double C, const SvmOptions& options = {})
{
    detail::check_svm_inputs(features, labels, C);
    const Eigen::VectorXd mean = features.rowwise().mean();
    const Eigen::MatrixXd centred = features.colwise() - mean;
    Eigen::VectorXd scale = (centred.rowwise().squaredNorm() / static_cast<double>(features.cols())).cwiseSqrt();
    const double floor = 1e-12 * std::max(scale.maxCoeff(), 1e-300);
    for (Eigen::Index k = 0; k < scale.size(); ++k)
    {
        if (scale(k) <= floor)
        {
            scale(k) = 1.0;
        }
    }
    const Eigen::MatrixXd standardised = scale.cwiseInverse().asDiagonal() * centred;
    const LinearSvm svm = train_linear_svm(standardised, labels, C, options);

    AuClassifier out;
    out.au_id = au_id;
    out.C = C;
    out.weights = svm.weights.cwiseQuotient(scale);
    out.bias = svm.bias - out.weights.dot(mean);
    return out;
}

/// Checks that `spectra` produce the feature layout the bank was trained on.
inline void check_layout(const std::vector<PatchSpectrum>& spectra, const ClassifierBank& bank)
{
    if (spectra.size() != bank.landmarks.size())
    {
        throw InvalidArgument("AU detection: " + std::to_string(spectra.size()) + " patch spectra but bank uses " +
                              std::to_string(bank.landmarks.size()) + " landmarks");
    }
    for (std::size_t k = 0; k < spectra.size(); ++k)
    {
        if (spectra[k].landmark != bank.landmarks[k])
        {
            throw InvalidArgument("AU detection: spectrum " + std::to_string(k) + " is for landmark " +
                                  std::to_string(spectra[k].landmark) + ", bank expects " +
                                  std::to_string(bank.landmarks[k]));
        }
        if (spectra[k].tau() != bank.tau)
        {
            throw InvalidArgument("AU detection: spectrum tau " + std::to_string(spectra[k].tau()) +
                                  " differs from bank tau " + std::to_string(bank.tau));
        }
    }
    for (const auto& c : bank.classifiers)
    {
        if (c.weights.size() != bank.feature_dimension())
        {
            throw InvalidArgument("AU detection: classifier '" + c.au_id + "' has " +
                                  std::to_string(c.weights.size()) + " weights, layout needs " +
                                  std::to_string(bank.feature_dimension()));
        }
    }
}

/// Binary AU vector of a mesh: entry k is 1 iff classifier k's decision value is positive.
inline std::vector<int> detect_aus(const Eigen::Matrix3Xd& mesh_vertices, const std::vector<PatchSpectrum>& spectra,
                                   const ClassifierBank& bank)
{
    check_layout(spectra, bank);
    const Eigen::VectorXd features = au_features(spectra, mesh_vertices);
    std::vector<int> out;
    out.reserve(bank.classifiers.size());
    for (const auto& c : bank.classifiers)
    {
        out.push_back(c.decision(features) > 0.0 ? 1 : 0);
    }
    return out;
}

/**
 * Text table:
 *
 *     layout <kFeatureLayout>
 *     tau <tau>
 *     landmarks <l_0> ... <l_L-1>
 *     au <id> <bias> <C> <w_0> ... <w_{3 tau L - 1}>     (one line per classifier)
 *
 * AU ids must not contain whitespace.
 */
inline std::string bank_to_text(const ClassifierBank& bank)
{
    std::ostringstream out;
    out.precision(17);
    out << "layout " << kFeatureLayout << '\n' << "tau " << bank.tau << '\n' << "landmarks";
    for (int l : bank.landmarks)
    {
        out << ' ' << l;
    }
    out << '\n';
    for (const auto& c : bank.classifiers)
    {
        if (c.au_id.empty() || c.au_id.find_first_of(" \t\r\n") != std::string::npos)
        {
            throw InvalidArgument("AU id '" + c.au_id + "' is empty or contains whitespace");
        }
        out << "au " << c.au_id << ' ' << c.bias << ' ' << c.C;
        for (Eigen::Index k = 0; k < c.weights.size(); ++k)
        {
            out << ' ' << c.weights(k);
        }
        out << '\n';
    }
    return out.str();
}

inline ClassifierBank bank_from_text(const std::string& text)
{
    using geometry::detail::parse_double;
    using geometry::detail::parse_long;
    ClassifierBank bank;
    bool has_layout = false;
    bool has_tau = false;
    bool has_landmarks = false;
    geometry::detail::for_each_line(text, [&](std::string_view line, std::size_t line_no) {
        const auto tok = geometry::detail::split_ws(line);
        if (tok.empty() || tok[0].front() == '#')
        {
            return true;
        }
        const auto where = " (line " + std::to_string(line_no) + ")";
        if (tok[0] == "layout")
        {
            if (tok.size() != 2 || tok[1] != kFeatureLayout)
            {
                throw ParseError("unsupported AU feature layout" + where);
            }
            has_layout = true;
        } else if (tok[0] == "tau")
        {
            if (tok.size() != 2)
            {
                throw ParseError("malformed tau line" + where);
            }
            bank.tau = static_cast<int>(parse_long(tok[1], line_no));
            has_tau = true;
        } else if (tok[0] == "landmarks")
        {
            for (std::size_t k = 1; k < tok.size(); ++k)
            {
                bank.landmarks.push_back(static_cast<int>(parse_long(tok[k], line_no)));
            }
            has_landmarks = true;
        } else if (tok[0] == "au")
        {
            if (!has_layout || !has_tau || !has_landmarks)
            {
                throw ParseError("classifier row before layout/tau/landmarks header" + where);
            }
            const auto dim = static_cast<std::size_t>(bank.feature_dimension());
            if (tok.size() != 4 + dim)
            {
                throw ParseError("classifier row has " + std::to_string(tok.size() - 4) + " weights, expected " +
                                 std::to_string(dim) + where);
            }
            AuClassifier c;
            c.au_id = std::string(tok[1]);
            c.bias = parse_double(tok[2], line_no);
            c.C = parse_double(tok[3], line_no);
            c.weights.resize(static_cast<Eigen::Index>(dim));
            for (std::size_t k = 0; k < dim; ++k)
            {
                c.weights(static_cast<Eigen::Index>(k)) = parse_double(tok[4 + k], line_no);
            }
            bank.classifiers.push_back(std::move(c));
        } else
        {
            throw ParseError("unknown record '" + std::string(tok[0]) + "'" + where);
        }
        return true;
    });
    if (!has_layout || !has_tau || !has_landmarks)
    {
        throw ParseError("AU bank is missing its layout, tau or landmarks header");
    }
    return bank;
}

inline void save_bank(const ClassifierBank& bank, const std::filesystem::path& path)
{
    write_file_atomic(path, bank_to_text(bank));
}

inline ClassifierBank load_bank(const std::filesystem::path& path) { return bank_from_text(read_file(path)); }

} // namespace spectral
} // namespace bilinflow

#endif /* BILINFLOW_SPECTRAL_AU_DETECTION_HPP */
