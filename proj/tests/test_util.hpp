/*
 * bilinflow - bilinear identity/expression face models with normalizing flows.
 *
 * File: tests/test_util.hpp
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

#include "bilinflow/geometry/mesh.hpp"

#include "Eigen/Core"

#include <filesystem>
#include <random>
#include <string>

#include <unistd.h>

namespace bilinflow::test {

/// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir
{
public:
    explicit TempDir(const std::string& tag)
    {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("bilinflow_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() { std::filesystem::remove_all(path_); }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline Eigen::MatrixXd random_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0)
{
    std::normal_distribution<double> n(0.0, scale);
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i)
    {
        m.data()[i] = n(rng);
    }
    return m;
}

inline Eigen::VectorXd random_vector(std::mt19937_64& rng, Eigen::Index n, double scale = 1.0)
{
    return random_matrix(rng, n, 1, scale);
}

/// Small closed octahedron (6 vertices, 8 faces) centred at the origin.
inline geometry::Mesh octahedron(double r = 1.0)
{
    geometry::Mesh m;
    m.vertices.resize(3, 6);
    m.vertices << r, -r, 0, 0, 0, 0, //
        0, 0, r, -r, 0, 0,           //
        0, 0, 0, 0, r, -r;
    m.faces = {{0, 2, 4}, {2, 1, 4}, {1, 3, 4}, {3, 0, 4}, {2, 0, 5}, {1, 2, 5}, {3, 1, 5}, {0, 3, 5}};
    return m;
}

/// Regular grid in the z=0 plane, nx * ny vertices, two triangles per cell.
inline geometry::Mesh grid_mesh(int nx, int ny, double spacing = 1.0)
{
    geometry::Mesh m;
    m.vertices.resize(3, nx * ny);
    for (int j = 0; j < ny; ++j)
    {
        for (int i = 0; i < nx; ++i)
        {
            m.vertices.col(j * nx + i) = Eigen::Vector3d(i * spacing, j * spacing, 0.0);
        }
    }
    for (int j = 0; j + 1 < ny; ++j)
    {
        for (int i = 0; i + 1 < nx; ++i)
        {
            const int a = j * nx + i;
            m.faces.push_back({a, a + 1, a + nx + 1});
            m.faces.push_back({a, a + nx + 1, a + nx});
        }
    }
    return m;
}

} // namespace bilinflow::test
