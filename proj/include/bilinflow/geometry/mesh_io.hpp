/*
 * bilinflow - bilinear identity/expression face models with normalizing flows.
 *
 * File: include/bilinflow/geometry/mesh_io.hpp
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

#ifndef BILINFLOW_GEOMETRY_MESH_IO_HPP
#define BILINFLOW_GEOMETRY_MESH_IO_HPP

#include "bilinflow/core/binary_io.hpp"
#include "bilinflow/core/error.hpp"
#include "bilinflow/geometry/mesh.hpp"

#include <charconv>
#include <filesystem>
#include <iomanip>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace bilinflow {
namespace geometry {

enum class MeshFormat { obj, ply };

/// Picks the format from the file extension (.obj / .ply, case sensitive).
inline MeshFormat format_from_path(const std::filesystem::path& path)
{
    const auto ext = path.extension().string();
    if (ext == ".obj")
    {
        return MeshFormat::obj;
    }
    if (ext == ".ply")
    {
        return MeshFormat::ply;
    }
    throw InvalidArgument("cannot infer mesh format from extension '" + ext + "'");
}

namespace detail {

inline std::vector<std::string_view> split_ws(std::string_view line)
{
    std::vector<std::string_view> tokens;
    std::size_t i = 0;
    while (i < line.size())
    {
        while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r'))
        {
            ++i;
        }
        const std::size_t start = i;
        while (i < line.size() && line[i] != ' ' && line[i] != '\t' && line[i] != '\r')
        {
            ++i;
        }
        if (i > start)
        {
            tokens.push_back(line.substr(start, i - start));
        }
    }
    return tokens;
}

inline double parse_double(std::string_view token, std::size_t line_no)
{
    double value = 0.0;
    const auto* end = token.data() + token.size();
    auto [ptr, ec] = std::from_chars(token.data(), end, value);
    if (ec != std::errc() || ptr != end)
    {
        throw ParseError("invalid number '" + std::string(token) + "' at line " + std::to_string(line_no));
    }
    return value;
}

inline long parse_long(std::string_view token, std::size_t line_no)
{
    long value = 0;
    const auto* end = token.data() + token.size();
    auto [ptr, ec] = std::from_chars(token.data(), end, value);
    if (ec != std::errc() || ptr != end)
    {
        throw ParseError("invalid integer '" + std::string(token) + "' at line " + std::to_string(line_no));
    }
    return value;
}

template <typename Fn>
void for_each_line(const std::string& text, Fn&& fn)
{
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size())
    {
        const std::size_t nl = text.find('\n', pos);
        const std::size_t end = nl == std::string::npos ? text.size() : nl;
        ++line_no;
        if (!fn(std::string_view(text).substr(pos, end - pos), line_no))
        {
            return;
        }
        if (nl == std::string::npos)
        {
            break;
        }
        pos = nl + 1;
    }
}

inline Mesh parse_obj(const std::string& text)
{
    std::vector<Eigen::Vector3d> points;
    std::vector<Triangle> faces;
    for_each_line(text, [&](std::string_view line, std::size_t line_no) {
        const auto tokens = split_ws(line);
        if (tokens.empty() || tokens[0].front() == '#')
        {
            return true;
        }
        if (tokens[0] == "v")
        {
            if (tokens.size() < 4)
            {
                throw ParseError("vertex with fewer than 3 coordinates at line " + std::to_string(line_no));
            }
            points.emplace_back(parse_double(tokens[1], line_no), parse_double(tokens[2], line_no),
                                parse_double(tokens[3], line_no));
        }
        else if (tokens[0] == "f")
        {
            if (tokens.size() != 4)
            {
                throw ParseError("non-triangular face at line " + std::to_string(line_no));
            }
            Triangle t{};
            for (int k = 0; k < 3; ++k)
            {
                auto tok = tokens[static_cast<std::size_t>(k) + 1];
                tok = tok.substr(0, tok.find('/'));
                const long idx = parse_long(tok, line_no);
                const long resolved = idx < 0 ? static_cast<long>(points.size()) + idx : idx - 1;
                if (idx == 0 || resolved < 0)
                {
                    throw ParseError("invalid face index at line " + std::to_string(line_no));
                }
                t[static_cast<std::size_t>(k)] = static_cast<int>(resolved);
            }
            faces.push_back(t);
        }
        return true;
    });
    Mesh mesh;
    mesh.vertices.resize(3, static_cast<Eigen::Index>(points.size()));
    for (std::size_t i = 0; i < points.size(); ++i)
    {
        mesh.vertices.col(static_cast<Eigen::Index>(i)) = points[i];
    }
    mesh.faces = std::move(faces);
    return mesh;
}

inline Mesh parse_ply(const std::string& text)
{
    enum class Section { header, vertices, faces, skip };
    struct Element
    {
        std::string name;
        long count = 0;
        std::vector<std::string> properties;
    };
    std::vector<Element> elements;
    bool header_done = false;
    std::size_t body_start_line = 0;
    for_each_line(text, [&](std::string_view line, std::size_t line_no) {
        const auto tokens = split_ws(line);
        if (line_no == 1)
        {
            if (tokens.empty() || tokens[0] != "ply")
            {
                throw ParseError("missing 'ply' magic at line 1");
            }
            return true;
        }
        if (tokens.empty())
        {
            return true;
        }
        if (tokens[0] == "format")
        {
            if (tokens.size() < 2 || tokens[1] != "ascii")
            {
                throw ParseError("binary PLY is not supported (line " + std::to_string(line_no) + ")");
            }
        }
        else if (tokens[0] == "element")
        {
            if (tokens.size() != 3)
            {
                throw ParseError("malformed element line " + std::to_string(line_no));
            }
            elements.push_back({std::string(tokens[1]), parse_long(tokens[2], line_no), {}});
        }
        else if (tokens[0] == "property")
        {
            if (elements.empty())
            {
                throw ParseError("property before element at line " + std::to_string(line_no));
            }
            elements.back().properties.emplace_back(tokens.back());
        }
        else if (tokens[0] == "end_header")
        {
            header_done = true;
            body_start_line = line_no + 1;
            return false;
        }
        return true;
    });
    if (!header_done)
    {
        throw ParseError("PLY header has no end_header");
    }

    std::vector<Eigen::Vector3d> points;
    std::vector<Triangle> faces;
    std::size_t element_index = 0;
    long remaining = elements.empty() ? 0 : elements[0].count;
    while (element_index < elements.size() && remaining == 0)
    {
        ++element_index;
        remaining = element_index < elements.size() ? elements[element_index].count : 0;
    }
    for_each_line(text, [&](std::string_view line, std::size_t line_no) {
        if (line_no < body_start_line)
        {
            return true;
        }
        const auto tokens = split_ws(line);
        if (tokens.empty())
        {
            return true;
        }
        if (element_index >= elements.size())
        {
            throw ParseError("unexpected data after last element at line " + std::to_string(line_no));
        }
        const Element& el = elements[element_index];
        if (el.name == "vertex")
        {
            Eigen::Vector3d p = Eigen::Vector3d::Zero();
            int found = 0;
            for (std::size_t k = 0; k < el.properties.size(); ++k)
            {
                if (k >= tokens.size())
                {
                    throw ParseError("short vertex row at line " + std::to_string(line_no));
                }
                const auto& prop = el.properties[k];
                if (prop == "x" || prop == "y" || prop == "z")
                {
                    p[prop[0] - 'x'] = parse_double(tokens[k], line_no);
                    ++found;
                }
            }
            if (found != 3)
            {
                throw ParseError("vertex element lacks x/y/z properties");
            }
            points.push_back(p);
        }
        else if (el.name == "face")
        {
            const long n = parse_long(tokens[0], line_no);
            if (n != 3)
            {
                throw ParseError("non-triangular face at line " + std::to_string(line_no));
            }
            if (tokens.size() < 4)
            {
                throw ParseError("short face row at line " + std::to_string(line_no));
            }
            faces.push_back({static_cast<int>(parse_long(tokens[1], line_no)),
                             static_cast<int>(parse_long(tokens[2], line_no)),
                             static_cast<int>(parse_long(tokens[3], line_no))});
        }
        if (--remaining == 0)
        {
            do
            {
                ++element_index;
                remaining = element_index < elements.size() ? elements[element_index].count : 0;
            } while (element_index < elements.size() && remaining == 0);
        }
        return true;
    });
    if (element_index < elements.size())
    {
        throw ParseError("PLY body ended before all elements were read");
    }
    Mesh mesh;
    mesh.vertices.resize(3, static_cast<Eigen::Index>(points.size()));
    for (std::size_t i = 0; i < points.size(); ++i)
    {
        mesh.vertices.col(static_cast<Eigen::Index>(i)) = points[i];
    }
    mesh.faces = std::move(faces);
    return mesh;
}

} // namespace detail

/**
 * Loads an ASCII OBJ or PLY mesh. Vertex order is preserved exactly as in the
 * file. Faces with more than three vertices are rejected rather than
 * triangulated.
 */
inline Mesh load_mesh(const std::filesystem::path& path, MeshFormat format)
{
    const std::string text = read_file(path);
    Mesh mesh = format == MeshFormat::obj ? detail::parse_obj(text) : detail::parse_ply(text);
    try
    {
        validate(mesh);
    } catch (const InvalidArgument& e)
    {
        throw ParseError(path.string() + ": " + e.what());
    }
    return mesh;
}

inline Mesh load_mesh(const std::filesystem::path& path) { return load_mesh(path, format_from_path(path)); }

/// Text serialisation of a mesh; coordinates use 17 significant digits.
inline std::string mesh_to_string(const Mesh& mesh, MeshFormat format)
{
    std::ostringstream out;
    out << std::setprecision(17);
    if (format == MeshFormat::obj)
    {
        for (Eigen::Index i = 0; i < mesh.vertices.cols(); ++i)
        {
            out << "v " << mesh.vertices(0, i) << ' ' << mesh.vertices(1, i) << ' ' << mesh.vertices(2, i) << '\n';
        }
        for (const auto& t : mesh.faces)
        {
            out << "f " << t[0] + 1 << ' ' << t[1] + 1 << ' ' << t[2] + 1 << '\n';
        }
    } else
    {
        out << "ply\nformat ascii 1.0\n";
        out << "element vertex " << mesh.vertices.cols() << "\nproperty double x\nproperty double y\nproperty double z\n";
        out << "element face " << mesh.faces.size() << "\nproperty list uchar int vertex_indices\nend_header\n";
        for (Eigen::Index i = 0; i < mesh.vertices.cols(); ++i)
        {
            out << mesh.vertices(0, i) << ' ' << mesh.vertices(1, i) << ' ' << mesh.vertices(2, i) << '\n';
        }
        for (const auto& t : mesh.faces)
        {
            out << "3 " << t[0] << ' ' << t[1] << ' ' << t[2] << '\n';
        }
    }
    return out.str();
}

inline void save_mesh(const Mesh& mesh, const std::filesystem::path& path, MeshFormat format)
{
    validate(mesh);
    write_file_atomic(path, mesh_to_string(mesh, format));
}

inline void save_mesh(const Mesh& mesh, const std::filesystem::path& path)
{
    save_mesh(mesh, path, format_from_path(path));
}

/**
 * Landmark sidecar: one vertex index per line, in landmark order. Lines
 * starting with '#' are comments.
 */
inline std::vector<int> load_landmarks(const std::filesystem::path& path)
{
    std::vector<int> out;
    detail::for_each_line(read_file(path), [&](std::string_view line, std::size_t line_no) {
        const auto tokens = detail::split_ws(line);
        if (!tokens.empty() && tokens[0].front() != '#')
        {
            out.push_back(static_cast<int>(detail::parse_long(tokens[0], line_no)));
        }
        return true;
    });
    return out;
}

inline void save_landmarks(const std::vector<int>& landmarks, const std::filesystem::path& path,
                           const std::vector<std::string>& names = {})
{
    std::ostringstream out;
    for (std::size_t i = 0; i < landmarks.size(); ++i)
    {
        out << landmarks[i];
        if (i < names.size())
        {
            out << "  # " << names[i];
        }
        out << '\n';
    }
    write_file_atomic(path, out.str());
}

} // namespace geometry
} // namespace bilinflow

#endif /* BILINFLOW_GEOMETRY_MESH_IO_HPP */
