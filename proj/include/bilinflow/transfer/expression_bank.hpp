/*
 * bilinflow - bilinear identity/expression face models with normalizing flows.
 *
 * File: include/bilinflow/transfer/expression_bank.hpp
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

#ifndef BILINFLOW_TRANSFER_EXPRESSION_BANK_HPP
#define BILINFLOW_TRANSFER_EXPRESSION_BANK_HPP

#include "bilinflow/core/binary_io.hpp"
#include "bilinflow/core/error.hpp"
#include "bilinflow/geometry/mesh.hpp"
#include "bilinflow/geometry/mesh_io.hpp"

#include "Eigen/Core"

#include <algorithm>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

namespace bilinflow {
namespace transfer {

/// A named expression defined as a set of active action units (indices into ExpressionBank::aus).
struct ExpressionCombination
{
    std::string id;
    std::vector<int> aus;
};

/**
 * Per-subject neutral faces and one blendshape per action unit, all in a
 * shared source topology of M vertices. Expressions are additive
 * combinations of blendshape offsets from the subject's neutral face.
 */
struct ExpressionBank
{
    std::vector<geometry::Triangle> faces;
    std::vector<std::string> subjects;
    std::vector<std::string> aus;
    std::vector<Eigen::Matrix3Xd> neutral;                  ///< [subject], 3 x M.
    std::vector<std::vector<Eigen::Matrix3Xd>> blendshapes; ///< [subject][au], 3 x M.
    std::vector<ExpressionCombination> combinations;

    int num_vertices() const { return neutral.empty() ? 0 : static_cast<int>(neutral.front().cols()); }
    int num_subjects() const { return static_cast<int>(subjects.size()); }
    int num_aus() const { return static_cast<int>(aus.size()); }

    int subject_index(const std::string& name) const
    {
        const auto it = std::find(subjects.begin(), subjects.end(), name);
        if (it == subjects.end())
        {
            throw InvalidArgument("expression bank has no subject '" + name + "'");
        }
        return static_cast<int>(it - subjects.begin());
    }
};

/// Checks shapes and the combination table; throws InvalidArgument describing the first problem.
inline void validate(const ExpressionBank& bank)
{
    if (bank.subjects.empty())
    {
        throw InvalidArgument("expression bank is empty");
    }
    if (bank.neutral.size() != bank.subjects.size() || bank.blendshapes.size() != bank.subjects.size())
    {
        throw InvalidArgument("expression bank: subject count does not match geometry count");
    }
    const int m = bank.num_vertices();
    for (int s = 0; s < bank.num_subjects(); ++s)
    {
        const auto su = static_cast<std::size_t>(s);
        if (bank.neutral[su].cols() != m)
        {
            throw InvalidArgument("expression bank: subject '" + bank.subjects[su] + "' neutral has wrong vertex count");
        }
        if (static_cast<int>(bank.blendshapes[su].size()) != bank.num_aus())
        {
            throw InvalidArgument("expression bank: subject '" + bank.subjects[su] + "' lacks blendshapes");
        }
        for (const auto& b : bank.blendshapes[su])
        {
            if (b.cols() != m)
            {
                throw InvalidArgument("expression bank: subject '" + bank.subjects[su] +
                                      "' blendshape has wrong vertex count");
            }
        }
    }
    for (const auto& c : bank.combinations)
    {
        for (int a : c.aus)
        {
            if (a < 0 || a >= bank.num_aus())
            {
                throw InvalidArgument("expression '" + c.id + "' references AU index " + std::to_string(a));
            }
        }
    }
}

/// Binary AU vector of a named expression from the combination table.
inline std::vector<int> au_vector(const ExpressionBank& bank, const std::string& expression_id)
{
    for (const auto& c : bank.combinations)
    {
        if (c.id == expression_id)
        {
            std::vector<int> v(static_cast<std::size_t>(bank.num_aus()), 0);
            for (int a : c.aus)
            {
                v[static_cast<std::size_t>(a)] = 1;
            }
            return v;
        }
    }
    throw InvalidArgument("expression bank has no expression '" + expression_id + "'");
}

/// neutral + sum over active AUs of (blendshape_a - neutral).
inline Eigen::Matrix3Xd synthesize_expression(const ExpressionBank& bank, int subject, const std::vector<int>& aus)
{
    if (subject < 0 || subject >= bank.num_subjects())
    {
        throw InvalidArgument("expression bank has no subject index " + std::to_string(subject));
    }
    if (static_cast<int>(aus.size()) != bank.num_aus())
    {
        throw InvalidArgument("AU vector has length " + std::to_string(aus.size()) + ", bank has " +
                              std::to_string(bank.num_aus()) + " AUs");
    }
    const auto& neutral = bank.neutral[static_cast<std::size_t>(subject)];
    Eigen::Matrix3Xd out = neutral;
    for (std::size_t a = 0; a < aus.size(); ++a)
    {
        if (aus[a] != 0)
        {
            out += bank.blendshapes[static_cast<std::size_t>(subject)][a] - neutral;
        }
    }
    return out;
}

/// D = Y_e - Y_s for one subject, in source topology.
inline Eigen::Matrix3Xd deformation(const ExpressionBank& bank, int subject, const std::vector<int>& source_aus,
                                    const std::vector<int>& target_aus)
{
    return synthesize_expression(bank, subject, target_aus) - synthesize_expression(bank, subject, source_aus);
}

/**
 * On-disk layout of a bank directory:
 *
 *     bank.txt            "aus <id>..." and "subjects <id>..." lines
 *     combinations.txt    one "<expression-id> <au-index>..." line per expression
 *     <subject>_neutral.obj, <subject>_<au>.obj
 */
inline void save_bank(const ExpressionBank& bank, const std::filesystem::path& dir)
{
    validate(bank);
    std::filesystem::create_directories(dir);
    std::ostringstream index;
    index << "aus";
    for (const auto& a : bank.aus)
    {
        index << ' ' << a;
    }
    index << "\nsubjects";
    for (const auto& s : bank.subjects)
    {
        index << ' ' << s;
    }
    index << '\n';
    write_file_atomic(dir / "bank.txt", index.str());

    std::ostringstream combos;
    for (const auto& c : bank.combinations)
    {
        combos << c.id;
        for (int a : c.aus)
        {
            combos << ' ' << a;
        }
        combos << '\n';
    }
    write_file_atomic(dir / "combinations.txt", combos.str());

    geometry::Mesh mesh;
    mesh.faces = bank.faces;
    for (int s = 0; s < bank.num_subjects(); ++s)
    {
        const auto su = static_cast<std::size_t>(s);
        mesh.vertices = bank.neutral[su];
        geometry::save_mesh(mesh, dir / (bank.subjects[su] + "_neutral.obj"));
        for (int a = 0; a < bank.num_aus(); ++a)
        {
            mesh.vertices = bank.blendshapes[su][static_cast<std::size_t>(a)];
            geometry::save_mesh(mesh, dir / (bank.subjects[su] + "_" + bank.aus[static_cast<std::size_t>(a)] + ".obj"));
        }
    }
}

inline ExpressionBank load_bank(const std::filesystem::path& dir)
{
    ExpressionBank bank;
    const std::string index = read_file(dir / "bank.txt");
    geometry::detail::for_each_line(index, [&](std::string_view line, std::size_t line_no) {
        const auto tok = geometry::detail::split_ws(line);
        if (tok.empty() || tok[0].front() == '#')
        {
            return true;
        }
        auto& target = tok[0] == "aus" ? bank.aus : bank.subjects;
        if (tok[0] != "aus" && tok[0] != "subjects")
        {
            throw ParseError("bank.txt: unknown record at line " + std::to_string(line_no));
        }
        for (std::size_t k = 1; k < tok.size(); ++k)
        {
            target.emplace_back(tok[k]);
        }
        return true;
    });
    const std::string combos = read_file(dir / "combinations.txt");
    geometry::detail::for_each_line(combos, [&](std::string_view line, std::size_t line_no) {
        const auto tok = geometry::detail::split_ws(line);
        if (tok.empty() || tok[0].front() == '#')
        {
            return true;
        }
        ExpressionCombination c;
        c.id = std::string(tok[0]);
        for (std::size_t k = 1; k < tok.size(); ++k)
        {
            c.aus.push_back(static_cast<int>(geometry::detail::parse_long(tok[k], line_no)));
        }
        bank.combinations.push_back(std::move(c));
        return true;
    });
    for (const auto& s : bank.subjects)
    {
        geometry::Mesh neutral = geometry::load_mesh(dir / (s + "_neutral.obj"));
        if (bank.faces.empty())
        {
            bank.faces = neutral.faces;
        } else if (neutral.faces != bank.faces)
        {
            throw ParseError("expression bank: subject '" + s + "' has a different topology");
        }
        bank.neutral.push_back(std::move(neutral.vertices));
        bank.blendshapes.emplace_back();
        for (const auto& a : bank.aus)
        {
            bank.blendshapes.back().push_back(geometry::load_mesh(dir / (s + "_" + a + ".obj")).vertices);
        }
    }
    try
    {
        validate(bank);
    } catch (const InvalidArgument& e)
    {
        throw ParseError(e.what());
    }
    return bank;
}

} // namespace transfer
} // namespace bilinflow

#endif /* BILINFLOW_TRANSFER_EXPRESSION_BANK_HPP */
