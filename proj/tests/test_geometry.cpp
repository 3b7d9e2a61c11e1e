/*
 * bilinflow - bilinear identity/expression face models with normalizing flows.
 *
 * File: tests/test_geometry.cpp
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
#include "bilinflow/geometry/mesh.hpp"
#include "bilinflow/geometry/mesh_io.hpp"
#include "bilinflow/geometry/procrustes.hpp"
#include "bilinflow/geometry/symmetry.hpp"

#include "test_util.hpp"

#include "Eigen/Eigenvalues"
#include "Eigen/Geometry"

#include <gtest/gtest.h>

#include <fstream>

using namespace bilinflow;
using namespace bilinflow::geometry;
using bilinflow::test::TempDir;

namespace {

void write_text(const std::filesystem::path& p, const std::string& s)
{
    std::ofstream(p) << s;
}

const char* kQuadObj = "# two triangles\n"
                       "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\n"
                       "f 1 2 3\nf 1/1/1 3/3/3 4/4/4\n";

Mesh random_mesh(std::mt19937_64& rng, int n)
{
    Mesh m;
    m.vertices = test::random_matrix(rng, 3, n, 50.0);
    for (int i = 0; i + 2 < n; ++i)
    {
        m.faces.push_back({i, i + 1, i + 2});
    }
    return m;
}

// Horn's closed-form quaternion solution: the optimal rotation is the top
// eigenvector of a symmetric 4x4 matrix built from the cross-covariance.
// Used as an independent route against the SVD-based implementation.
Eigen::Matrix3d horn_rotation(const Eigen::Matrix3Xd& src, const Eigen::Matrix3Xd& dst)
{
    const Eigen::Matrix3Xd a = src.colwise() - src.rowwise().mean();
    const Eigen::Matrix3Xd b = dst.colwise() - dst.rowwise().mean();
    const Eigen::Matrix3d s = a * b.transpose();
    const double sxx = s(0, 0), sxy = s(0, 1), sxz = s(0, 2);
    const double syx = s(1, 0), syy = s(1, 1), syz = s(1, 2);
    const double szx = s(2, 0), szy = s(2, 1), szz = s(2, 2);
    Eigen::Matrix4d n;
    n << sxx + syy + szz, syz - szy, szx - sxz, sxy - syx, //
        syz - szy, sxx - syy - szz, sxy + syx, szx + sxz,  //
        szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy, //
        sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz;
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix4d> eig(n);
    const Eigen::Vector4d q = eig.eigenvectors().col(3);
    return Eigen::Quaterniond(q(0), q(1), q(2), q(3)).toRotationMatrix();
}

} // namespace

TEST(MeshIo, LoadsObjFixture)
{
    TempDir dir("geom");
    write_text(dir / "quad.obj", kQuadObj);
    const Mesh m = load_mesh(dir / "quad.obj");
    EXPECT_EQ(m.num_vertices(), 4);
    EXPECT_EQ(m.num_faces(), 2);
    EXPECT_EQ(m.faces[1], (Triangle{0, 2, 3}));
    EXPECT_DOUBLE_EQ(m.vertices(1, 2), 1.0);
}

TEST(MeshIo, PlyMatchesObj)
{
    TempDir dir("geom");
    write_text(dir / "quad.obj", kQuadObj);
    const Mesh obj = load_mesh(dir / "quad.obj");
    save_mesh(obj, dir / "quad.ply");
    const Mesh ply = load_mesh(dir / "quad.ply");
    EXPECT_EQ(ply.vertices, obj.vertices);
    EXPECT_EQ(ply.faces, obj.faces);
}

TEST(MeshIo, RejectsQuadFaceWithLineNumber)
{
    TempDir dir("geom");
    write_text(dir / "bad.obj", "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n");
    try
    {
        load_mesh(dir / "bad.obj");
        FAIL() << "expected ParseError";
    } catch (const ParseError& e)
    {
        EXPECT_NE(std::string(e.what()).find("non-triangular face at line 5"), std::string::npos) << e.what();
    }
}

TEST(MeshIo, RejectsBinaryPly)
{
    TempDir dir("geom");
    write_text(dir / "bin.ply", "ply\nformat binary_little_endian 1.0\nelement vertex 0\nend_header\n");
    EXPECT_THROW(load_mesh(dir / "bin.ply"), ParseError);
}

TEST(MeshIo, RejectsOutOfRangeFace)
{
    TempDir dir("geom");
    write_text(dir / "bad.obj", "v 0 0 0\nv 1 0 0\nv 1 1 0\nf 1 2 7\n");
    EXPECT_THROW(load_mesh(dir / "bad.obj"), ParseError);
}

TEST(MeshIo, RoundTripRandomMeshBothFormats)
{
    std::mt19937_64 rng(3);
    TempDir dir("geom");
    const Mesh m = random_mesh(rng, 100);
    for (const char* name : {"r.obj", "r.ply"})
    {
        save_mesh(m, dir / name);
        const Mesh back = load_mesh(dir / name);
        ASSERT_EQ(back.num_vertices(), 100);
        EXPECT_LT((back.vertices - m.vertices).cwiseAbs().maxCoeff(), 1e-7);
        EXPECT_EQ(back.faces, m.faces);
    }
}

TEST(MeshIo, UnwritablePathThrowsIoError)
{
    const Mesh m = test::octahedron();
    EXPECT_THROW(save_mesh(m, "/nonexistent_dir_xyz/sub/m.obj"), IoError);
}

TEST(MeshIo, LandmarkSidecarRoundTrip)
{
    TempDir dir("geom");
    const std::vector<int> lm{4, 0, 17, 3};
    save_landmarks(lm, dir / "l.txt", {"nose", "chin"});
    EXPECT_EQ(load_landmarks(dir / "l.txt"), lm);
}

TEST(MeshValidation, RejectsDegenerateTriangle)
{
    Mesh m = test::octahedron();
    m.faces.push_back({1, 1, 2});
    EXPECT_THROW(validate(m), InvalidArgument);
}

TEST(Procrustes, RecoversExactRigidMotion)
{
    std::mt19937_64 rng(11);
    Mesh src = random_mesh(rng, 40);
    const Eigen::Matrix3d rot = Eigen::AngleAxisd(M_PI / 6.0, Eigen::Vector3d(0.3, 1.0, -0.2).normalized())
                                    .toRotationMatrix();
    Mesh dst = src;
    dst.vertices = (rot * src.vertices).colwise() + Eigen::Vector3d(5, 0, 0);
    const auto [aligned, tf] = procrustes_align(src, dst, false);
    EXPECT_LT(rms_distance(aligned.vertices, dst.vertices), 1e-9);
    EXPECT_LT((tf.rotation - rot).norm(), 1e-9);
    EXPECT_DOUBLE_EQ(tf.scale, 1.0);
}

TEST(Procrustes, IdentityWhenEqual)
{
    std::mt19937_64 rng(12);
    const Mesh src = random_mesh(rng, 20);
    const auto [aligned, tf] = procrustes_align(src, src, true);
    EXPECT_LT((tf.rotation - Eigen::Matrix3d::Identity()).norm(), 1e-12);
    EXPECT_LT(tf.translation.norm(), 1e-10);
    EXPECT_NEAR(tf.scale, 1.0, 1e-12);
}

TEST(Procrustes, RecoversScaleWhenAllowed)
{
    std::mt19937_64 rng(13);
    const Mesh src = random_mesh(rng, 30);
    Mesh dst = src;
    dst.vertices = 1.7 * dst.vertices;
    const auto [aligned, tf] = procrustes_align(src, dst, true);
    EXPECT_NEAR(tf.scale, 1.7, 1e-12);
    EXPECT_LT(rms_distance(aligned.vertices, dst.vertices), 1e-9);
}

TEST(Procrustes, NoisyTargetMatchesQuaternionOracle)
{
    std::mt19937_64 rng(14);
    for (int trial = 0; trial < 20; ++trial)
    {
        const Mesh src = random_mesh(rng, 60);
        const Eigen::Matrix3d rot =
            Eigen::AngleAxisd(0.1 * trial + 0.2, test::random_vector(rng, 3).normalized()).toRotationMatrix();
        const Eigen::Matrix3Xd noise = test::random_matrix(rng, 3, 60, 0.5);
        Mesh dst = src;
        dst.vertices = ((rot * src.vertices).colwise() + Eigen::Vector3d(1, -2, 3)) + noise;

        const auto [aligned, tf] = procrustes_align(src, dst, false);
        const Eigen::Matrix3d oracle = horn_rotation(src.vertices, dst.vertices);
        EXPECT_LT((tf.rotation - oracle).norm(), 1e-8);

        const double noise_rms = std::sqrt(noise.squaredNorm() / 60.0);
        EXPECT_LE(rms_distance(aligned.vertices, dst.vertices), noise_rms);
    }
}

TEST(Procrustes, ResidualInvariantToPreappliedMotion)
{
    std::mt19937_64 rng(15);
    const Mesh src = random_mesh(rng, 50);
    Mesh dst = src;
    dst.vertices += test::random_matrix(rng, 3, 50, 2.0);
    const double r0 = rms_distance(procrustes_align(src, dst, false).first.vertices, dst.vertices);
    for (int k = 0; k < 5; ++k)
    {
        Mesh moved = src;
        const Eigen::Matrix3d rot =
            Eigen::AngleAxisd(1.0 + k, test::random_vector(rng, 3).normalized()).toRotationMatrix();
        moved.vertices = (rot * src.vertices).colwise() + Eigen::Vector3d(test::random_vector(rng, 3) * 10.0);
        const double r = rms_distance(procrustes_align(moved, dst, false).first.vertices, dst.vertices);
        EXPECT_NEAR(r, r0, 1e-9);
    }
}

TEST(Procrustes, Errors)
{
    Mesh line;
    line.vertices.resize(3, 5);
    for (int i = 0; i < 5; ++i)
    {
        line.vertices.col(i) = Eigen::Vector3d(i, 2.0 * i, -i);
    }
    EXPECT_THROW(procrustes_align(line, line, false), NumericalError);
    const Mesh oct = test::octahedron();
    EXPECT_THROW(procrustes_align(oct, line, false), InvalidArgument);
}

namespace {

// Two off-plane vertices paired across x = 0 plus a midline vertex.
Mesh three_points(const Eigen::Vector3d& a, const Eigen::Vector3d& b)
{
    Mesh m;
    m.vertices.resize(3, 3);
    m.vertices.col(0) = a;
    m.vertices.col(1) = b;
    m.vertices.col(2) = Eigen::Vector3d(0, 5, 1);
    m.faces = {{0, 1, 2}};
    return m;
}

SymmetryMap three_point_sym() { return SymmetryMap::from_pairs(3, {{0, 1}, {2, 2}}); }

} // namespace

TEST(Symmetry, MirrorSwapsPairedVertices)
{
    const Mesh m = three_points({1, 2, 3}, {-1, 2, 3});
    const Mesh out = mirror(m, three_point_sym());
    EXPECT_EQ(out.vertices, m.vertices);

    const Mesh skew = three_points({1, 2, 3}, {-4, 0, 1});
    const Mesh mir = mirror(skew, three_point_sym());
    EXPECT_EQ(Eigen::Vector3d(mir.vertices.col(0)), Eigen::Vector3d(4, 0, 1));
    EXPECT_EQ(Eigen::Vector3d(mir.vertices.col(1)), Eigen::Vector3d(-1, 2, 3));
    EXPECT_EQ(mirror(mir, three_point_sym()).vertices, skew.vertices);
    EXPECT_EQ(mir.faces, skew.faces);
}

TEST(Symmetry, SymmetrizeAveragesReflections)
{
    const Mesh m = three_points({1, 0, 0}, {-3, 0, 0});
    const Mesh s = symmetrize(m, three_point_sym());
    EXPECT_EQ(Eigen::Vector3d(s.vertices.col(0)), Eigen::Vector3d(2, 0, 0));
    EXPECT_EQ(Eigen::Vector3d(s.vertices.col(1)), Eigen::Vector3d(-2, 0, 0));
}

TEST(Symmetry, RandomMeshInvariants)
{
    std::mt19937_64 rng(21);
    const int n = 41;
    std::vector<std::pair<int, int>> pairs;
    for (int i = 0; i < 20; ++i)
    {
        pairs.emplace_back(i, 40 - i);
    }
    pairs.emplace_back(20, 20);
    const Eigen::Vector3d normal = Eigen::Vector3d(1.0, 0.3, -0.2).normalized();
    const SymmetryMap sym = SymmetryMap::from_pairs(n, pairs, normal, 0.7);
    Mesh m;
    m.vertices = test::random_matrix(rng, 3, n, 10.0);
    m.faces = {{0, 1, 2}, {3, 4, 5}};

    const Mesh twice = mirror(mirror(m, sym), sym);
    EXPECT_LT((twice.vertices - m.vertices).cwiseAbs().maxCoeff(), 1e-12);

    const Mesh s1 = symmetrize(m, sym);
    EXPECT_LT((mirror(s1, sym).vertices - s1.vertices).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((symmetrize(s1, sym).vertices - s1.vertices).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((mirror(s1, sym).vertices - s1.vertices).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_EQ(s1.faces, m.faces);
}

TEST(Symmetry, IncompleteMapRejected)
{
    EXPECT_THROW(SymmetryMap::from_pairs(3, {{0, 1}}), InvalidArgument);
    EXPECT_THROW(SymmetryMap::from_pairs(3, {{0, 1}, {1, 2}}), InvalidArgument);
    const Mesh m = test::octahedron();
    EXPECT_THROW(mirror(m, three_point_sym()), InvalidArgument);
}

TEST(Symmetry, SidecarRoundTrip)
{
    TempDir dir("geom");
    const SymmetryMap sym =
        SymmetryMap::from_pairs(5, {{0, 4}, {1, 3}, {2, 2}}, Eigen::Vector3d(0, 0, 2), 1.5);
    save_symmetry(sym, dir / "s.sym");
    const SymmetryMap back = load_symmetry(dir / "s.sym", 5);
    EXPECT_EQ(back.partners(), sym.partners());
    EXPECT_EQ(back.normal(), Eigen::Vector3d(0, 0, 1));
    EXPECT_EQ(back.offset(), 1.5);
}
