/*
 * bilinflow - bilinear identity/expression face models with normalizing flows.
 *
 * File: tests/acceptance.cpp
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
// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include "bilinflow/bilinear/bilinear_model.hpp"
#include "bilinflow/bilinear/shape_tensor.hpp"
#include "bilinflow/correspondence/barycentric_map.hpp"
#include "bilinflow/correspondence/closest_point.hpp"
#include "bilinflow/fitting/fit.hpp"
#include "bilinflow/flow/real_nvp.hpp"
#include "bilinflow/flow/train.hpp"
#include "bilinflow/geometry/primitives.hpp"
#include "bilinflow/latent/latent_code.hpp"
#include "bilinflow/latent/prior.hpp"
#include "bilinflow/pipeline/artifacts.hpp"
#include "bilinflow/pipeline/config.hpp"
#include "bilinflow/pipeline/stages.hpp"
#include "bilinflow/pipeline/synth.hpp"
#include "bilinflow/transfer/expression_bank.hpp"
#include "bilinflow/transfer/expression_transfer.hpp"

#include "Eigen/Cholesky"
#include "Eigen/LU"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

using namespace bilinflow;
namespace fs = std::filesystem;

namespace {

struct Outcome
{
    bool pass = false;
    std::string detail;
};

std::string fmt(double v)
{
    std::ostringstream s;
    s.precision(3);
    s << v;
    return s.str();
}

Eigen::MatrixXd normal_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0)
{
    std::normal_distribution<double> n(0.0, scale);
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i)
        m.data()[i] = n(rng);
    return m;
}

Eigen::VectorXd normal_vector(std::mt19937_64& rng, Eigen::Index n, double scale = 1.0)
{
    return normal_matrix(rng, n, 1, scale);
}

flow::Flow random_flow(int dim, int layers, int hidden, std::uint64_t seed, double scale)
{
    flow::Flow f = flow::make_flow(dim, layers, hidden, seed);
    std::mt19937_64 rng(seed + 1000);
    flow::set_parameters(f, normal_vector(rng, flow::parameter_count(f), scale));
    f.mean = normal_vector(rng, dim);
    f.stddev = normal_vector(rng, dim, 0.3).array().exp().matrix();
    return f;
}

// ---------------------------------------------------------------------------
// Shared pipeline run with the default configuration.

class ScratchDir
{
public:
    explicit ScratchDir(const std::string& tag)
        : path_(fs::temp_directory_path() / ("bilinflow_acceptance_" + tag + "_" + std::to_string(::getpid())))
    {
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~ScratchDir() { fs::remove_all(path_); }
    const fs::path& path() const { return path_; }

private:
    fs::path path_;
};

pipeline::PipelineConfig default_config(const fs::path& root)
{
    pipeline::PipelineConfig cfg;
    cfg.stage_dir = root;
    pipeline::propagate_seed(cfg);
    return cfg;
}

/// Every file below `root`, manifests included, keyed by relative path.
std::map<std::string, std::string> hash_everything(const fs::path& root)
{
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file())
            out[fs::relative(e.path(), root).generic_string()] = pipeline::file_sha256(e.path());
    return out;
}

void run_all(const pipeline::PipelineConfig& cfg)
{
    for (const auto& stage : pipeline::stage_names())
        pipeline::run_stage(cfg, stage);
}

const ScratchDir& pipeline_dir()
{
    static const ScratchDir dir("pipeline");
    return dir;
}

bool pipeline_ready = false;

void ensure_pipeline()
{
    if (!pipeline_ready)
    {
        fs::remove_all(pipeline_dir().path());
        run_all(default_config(pipeline_dir().path()));
        pipeline_ready = true;
    }
}

// ---------------------------------------------------------------------------
// Criteria

Outcome flow_exactness()
{
    const int dim = 5;
    const flow::Flow f = random_flow(dim, 6, 16, 101, 0.3);
    std::mt19937_64 rng(3);
    double worst_logdet = 0.0;
    bool logdet_ok = true;
    for (int trial = 0; trial < 100; ++trial)
    {
        const Eigen::VectorXd w = f.mean + normal_vector(rng, dim);
        const double analytic = flow::forward(f, w).logdet(0);
        Eigen::MatrixXd j(dim, dim);
        const double h = 1e-6;
        for (int k = 0; k < dim; ++k)
        {
            Eigen::VectorXd a = w, b = w;
            a(k) += h;
            b(k) -= h;
            j.col(k) = (flow::forward(f, a).z - flow::forward(f, b).z) / (2.0 * h);
        }
        const double numeric = std::log(std::abs(j.partialPivLu().determinant()));
        const double err = std::abs(analytic - numeric);
        worst_logdet = std::max(worst_logdet, err);
        logdet_ok = logdet_ok && err < 1e-4 * std::max(1.0, std::abs(numeric));
    }
    const Eigen::MatrixXd w = (3.0 * normal_matrix(rng, dim, 1000)).colwise() + f.mean;
    const double rt_w = (flow::inverse(f, flow::forward(f, w).z) - w).cwiseAbs().maxCoeff();
    const Eigen::MatrixXd z = normal_matrix(rng, dim, 1000);
    const double rt_z = (flow::forward(f, flow::inverse(f, z)).z - z).cwiseAbs().maxCoeff();
    return {logdet_ok && rt_w < 1e-9 && rt_z < 1e-9,
            "max |logdet - fd| = " + fmt(worst_logdet) + ", round trip " + fmt(std::max(rt_w, rt_z))};
}

Outcome gradient_oracle()
{
    double worst = 0.0;
    for (flow::FrobeniusMode mode : {flow::FrobeniusMode::composed, flow::FrobeniusMode::per_layer})
    {
        flow::Flow f = random_flow(4, 2, 8, 202, 0.3);
        std::mt19937_64 rng(4);
        const Eigen::MatrixXd w = normal_matrix(rng, 4, 5).colwise() + f.mean;
        Eigen::VectorXd grad;
        flow::loss_and_gradient(f, w, 1.0, mode, grad);
        const Eigen::VectorXd p0 = flow::get_parameters(f);
        const double h = 1e-5;
        for (Eigen::Index k = 0; k < p0.size(); ++k)
        {
            Eigen::VectorXd p = p0;
            p(k) = p0(k) + h;
            flow::set_parameters(f, p);
            const double up = flow::loss_value(f, w, 1.0, mode);
            p(k) = p0(k) - h;
            flow::set_parameters(f, p);
            const double down = flow::loss_value(f, w, 1.0, mode);
            const double fd = (up - down) / (2.0 * h);
            worst = std::max(worst, std::abs(fd - grad(k)) / std::max(1e-3, std::abs(fd)));
        }
    }
    return {worst < 1e-4, "worst relative gradient error " + fmt(worst)};
}

double skewness(const Eigen::VectorXd& x)
{
    const double m = x.mean();
    const double v = (x.array() - m).square().mean();
    return (x.array() - m).cube().mean() / std::pow(v, 1.5);
}

double excess_kurtosis(const Eigen::VectorXd& x)
{
    const double m = x.mean();
    const double v = (x.array() - m).square().mean();
    return (x.array() - m).pow(4).mean() / (v * v) - 3.0;
}

Outcome bimodal_gaussianization()
{
    std::mt19937_64 rng(15);
    std::uniform_real_distribution<double> u(0.0, M_PI);
    std::normal_distribution<double> noise(0.0, 0.1);
    Eigen::MatrixXd data(2, 2000);
    for (int j = 0; j < data.cols(); ++j)
    {
        const double t = u(rng);
        if (j % 2 == 0)
            data.col(j) << std::cos(t) + noise(rng), std::sin(t) + noise(rng);
        else
            data.col(j) << 1.0 - std::cos(t) + noise(rng), 0.5 - std::sin(t) + noise(rng);
    }
    flow::TrainConfig cfg{.epochs = 150, .batch_size = 200, .learning_rate = 3e-3, .dequantize = false,
                          .frobenius_weight = 0.0};
    const flow::TrainResult r = flow::train(flow::make_flow(2, 6, 32, 3), data, cfg);
    const Eigen::MatrixXd z = flow::forward(r.flow, data).z;
    bool ok = true;
    std::string detail;
    for (int k = 0; k < 2; ++k)
    {
        const double s = skewness(z.row(k).transpose());
        const double ku = excess_kurtosis(z.row(k).transpose());
        ok = ok && std::abs(s) < 0.3 && std::abs(ku) < 0.5;
        detail += (k ? ", " : "") + std::string("z") + std::to_string(k) + " skew " + fmt(s) + " kurt " + fmt(ku);
    }
    return {ok, detail};
}

Eigen::MatrixXd rebuild(const bilinear::BilinearModel& m, int n_id, int n_ex)
{
    Eigen::MatrixXd out(m.dimension(), static_cast<Eigen::Index>(n_id) * n_ex);
    for (int e = 0; e < n_ex; ++e)
        for (int i = 0; i < n_id; ++i)
            out.col(i + n_id * e) = bilinear::reconstruct(m, m.u_id.row(i).transpose(), m.u_ex.row(e).transpose());
    return out;
}

Outcome hosvd_exactness()
{
    std::mt19937_64 rng(4);
    bilinear::ShapeTensor t;
    t.n_id = 6;
    t.n_ex = 5;
    t.data = normal_matrix(rng, 300, 30);
    const double full = (rebuild(bilinear::hosvd(t, 6, 5), 6, 5) - t.data).norm() / t.data.norm();
    bool bound_ok = true;
    for (int d_id = 1; d_id <= 6; ++d_id)
    {
        for (int d_ex = 1; d_ex <= 5; ++d_ex)
        {
            const bilinear::BilinearModel m = bilinear::hosvd(t, d_id, d_ex);
            const double err2 = (rebuild(m, 6, 5) - t.data).squaredNorm();
            const double bound = m.sigma_id.tail(6 - d_id).squaredNorm() + m.sigma_ex.tail(5 - d_ex).squaredNorm();
            bound_ok = bound_ok && err2 <= bound * (1.0 + 1e-10) + 1e-20;
        }
    }
    return {full < 1e-8 && bound_ok,
            "full-rank relative error " + fmt(full) + (bound_ok ? ", truncation bound holds" : ", truncation bound violated")};
}

Outcome fitting_self_consistency()
{
    ensure_pipeline();
    const fs::path root = pipeline_dir().path();
    pipeline::PipelineConfig cfg = default_config(root);
    const bilinear::BilinearModel model = bilinear::load_model(root / "hosvd/model.bin");
    const flow::Flow f_id = flow::load_flow(root / "train-flows/flow_identity.bin");
    const flow::Flow f_ex = flow::load_flow(root / "train-flows/flow_expression.bin");
    const pipeline::SyntheticFamily family = pipeline::synth_family(cfg.synth);
    const Eigen::MatrixXd z_id = flow::forward(f_id, model.u_id.transpose()).z;
    const Eigen::MatrixXd z_ex = flow::forward(f_ex, model.u_ex.transpose()).z;

    fitting::FitConfig fc = cfg.fit;
    fc.gamma1 = 1.0 - 1e-6;
    fc.gamma2 = 1e-6;
    fc.neutral_w_ex = model.u_ex.row(0).transpose();
    fitting::FitConfig frozen = fc;
    frozen.freeze_expression = true;

    std::vector<char> in_region(static_cast<std::size_t>(model.dimension() / 3), 0);
    for (int v : family.expression_region)
        in_region[static_cast<std::size_t>(v)] = 1;

    std::mt19937_64 rng(cfg.seed + 55);
    int good = 0;
    double gain_in = 0.0, gain_out = 0.0;
    long n_in = 0, n_out = 0;
    for (int t = 0; t < 20; ++t)
    {
        const Eigen::VectorXd zi = z_id.col(t % z_id.cols()) + normal_vector(rng, z_id.rows(), 0.1);
        // Skip the neutral column so every target carries an expression.
        const Eigen::VectorXd ze = z_ex.col(1 + t % (z_ex.cols() - 1)) + normal_vector(rng, z_ex.rows(), 0.1);
        geometry::Mesh target;
        target.faces = model.faces;
        target.vertices = geometry::as_points(
            bilinear::reconstruct(model, fitting::detail::to_w(&f_id, zi), fitting::detail::to_w(&f_ex, ze)));
        const double diag = geometry::bounding_box_diagonal(target.vertices);
        const fitting::FitResult full = fitting::fit(model, {&f_id, &f_ex}, target, fc);
        const double rms = std::sqrt(full.per_vertex_error.squaredNorm() / static_cast<double>(full.per_vertex_error.size()));
        good += rms < 1e-3 * diag ? 1 : 0;
        const fitting::FitResult ablation = fitting::fit(model, {&f_id, &f_ex}, target, frozen);
        for (Eigen::Index v = 0; v < full.per_vertex_error.size(); ++v)
        {
            const double gain = ablation.per_vertex_error(v) - full.per_vertex_error(v);
            if (in_region[static_cast<std::size_t>(v)])
            {
                gain_in += gain;
                ++n_in;
            } else
            {
                gain_out += gain;
                ++n_out;
            }
        }
    }
    gain_in /= static_cast<double>(std::max(1L, n_in));
    gain_out /= static_cast<double>(std::max(1L, n_out));
    return {good >= 19 && gain_in > gain_out,
            std::to_string(good) + "/20 below 1e-3 diag, expression gain " + fmt(gain_in) + " mm in region vs " +
                fmt(gain_out) + " mm outside"};
}

double cholesky_mahalanobis(const Eigen::MatrixXd& cov, const Eigen::VectorXd& mean, const Eigen::VectorXd& b)
{
    const Eigen::LLT<Eigen::MatrixXd> llt(cov);
    return llt.matrixL().solve(b - mean).norm();
}

Outcome projection_shell()
{
    const pipeline::PipelineConfig cfg = pipeline::load_config(fs::path(BILINFLOW_SOURCE_DIR) / "tools/bilinflow.ini");
    const latent::SamplingPreset& p = cfg.preset;
    const bool verbatim = p.rho == 0.99 && p.zeta_ex == 7 && p.beta_ex == 4.07 && p.zeta_id == 26 && p.beta_id == 6.01;
    std::mt19937_64 rng(7);
    double worst = 0.0;
    for (const auto& [dim, beta] : {std::pair<int, double>{p.zeta_ex, p.beta_ex}, {p.zeta_id, p.beta_id}})
    {
        const Eigen::MatrixXd a = normal_matrix(rng, dim, dim);
        Eigen::VectorXd scales(dim);
        for (int k = 0; k < dim; ++k)
            scales(k) = std::pow(10.0, -1.0 + 2.0 * k / std::max(1, dim - 1));
        const Eigen::MatrixXd cov = a * scales.asDiagonal() * a.transpose() + 1e-3 * Eigen::MatrixXd::Identity(dim, dim);
        const Eigen::VectorXd mean = normal_vector(rng, dim);
        const latent::GaussianPrior prior = latent::make_prior(mean, cov);
        const Eigen::MatrixXd b = latent::sample_prior(prior, 10000, 8);
        for (Eigen::Index j = 0; j < b.cols(); ++j)
        {
            const Eigen::VectorXd t = latent::project_to_hyperellipsoid(b.col(j), prior, beta);
            worst = std::max(worst, std::abs(cholesky_mahalanobis(cov, mean, t) - beta));
        }
    }
    return {verbatim && worst < 1e-8,
            std::string(verbatim ? "presets read verbatim" : "presets differ") + ", worst |d_M - beta| " + fmt(worst)};
}

transfer::ExpressionBank make_bank(int subjects, int aus, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    const geometry::Mesh base = geometry::make_ellipsoid(geometry::EllipsoidGrid::for_vertex_count(80), {1.0, 1.2, 0.9});
    transfer::ExpressionBank bank;
    bank.faces = base.faces;
    for (int a = 0; a < aus; ++a)
        bank.aus.push_back("AU" + std::to_string(a + 1));
    for (int s = 0; s < subjects; ++s)
    {
        bank.subjects.push_back("s" + std::to_string(s));
        const Eigen::Matrix3Xd neutral = base.vertices + 0.01 * normal_matrix(rng, 3, base.num_vertices());
        bank.neutral.push_back(neutral);
        bank.blendshapes.emplace_back();
        for (int a = 0; a < aus; ++a)
            bank.blendshapes.back().push_back(neutral + 0.02 * normal_matrix(rng, 3, base.num_vertices()));
    }
    return bank;
}

geometry::Mesh subject_mesh(const transfer::ExpressionBank& bank, int s)
{
    geometry::Mesh m;
    m.vertices = bank.neutral[static_cast<std::size_t>(s)];
    m.faces = bank.faces;
    return m;
}

Outcome transfer_identities()
{
    // Zero intensity and identical source/target expression.
    const transfer::ExpressionBank bank = make_bank(8, 3, 5);
    const geometry::Mesh infant = subject_mesh(bank, 0);
    const auto map = correspondence::build_map(infant, infant);
    const auto zero = transfer::transfer_expression(infant, {0, 0, 0}, {1, 1, 0}, bank, map,
                                                    {.intensity = 0.0, .ensemble = 3, .seed = 9});
    const auto same = transfer::transfer_expression(infant, {1, 0, 1}, {1, 0, 1}, bank, map,
                                                    {.intensity = 2.0, .ensemble = 5, .seed = 1});
    const bool identities = zero.mesh.vertices == infant.vertices && same.mesh.vertices == infant.vertices;

    // Single subject: infant + (expression - source) computed by hand.
    const transfer::ExpressionBank one = make_bank(1, 3, 7);
    geometry::Mesh other = subject_mesh(one, 0);
    const auto one_map = correspondence::build_map(other, other);
    std::mt19937_64 rng(70);
    other.vertices += 0.005 * normal_matrix(rng, 3, other.num_vertices());
    const auto r = transfer::transfer_expression(other, {0, 1, 0}, {1, 0, 1}, one, one_map,
                                                 {.intensity = 1.0, .ensemble = 1, .seed = 3});
    const Eigen::Matrix3Xd& n = one.neutral[0];
    const auto& b = one.blendshapes[0];
    const Eigen::Matrix3Xd expected = other.vertices + ((b[0] - n) + (b[2] - n)) - (b[1] - n);
    const double arithmetic = (r.mesh.vertices - expected).cwiseAbs().maxCoeff();

    // Ensemble result against the mean of single-member transfers.
    const auto ens = transfer::transfer_expression(infant, {0, 0, 0}, {1, 1, 0}, bank, map,
                                                   {.intensity = 1.0, .ensemble = 5, .seed = 42});
    Eigen::Matrix3Xd mean = Eigen::Matrix3Xd::Zero(3, infant.num_vertices());
    for (int k : ens.subjects)
        mean += transfer::transfer_with_subjects(infant, {0, 0, 0}, {1, 1, 0}, bank, map, 1.0, {k}).vertices;
    mean /= static_cast<double>(ens.subjects.size());
    const double ensemble = (ens.mesh.vertices - mean).cwiseAbs().maxCoeff();
    return {identities && arithmetic < 1e-12 && ensemble < 1e-10 && ens.subjects.size() == 5,
            std::string(identities ? "identities exact" : "identities broken") + ", arithmetic " + fmt(arithmetic) +
                ", ensemble " + fmt(ensemble)};
}

Outcome barycentric_map()
{
    using geometry::Mesh;
    const Mesh self = geometry::make_ellipsoid(geometry::EllipsoidGrid::for_vertex_count(300), {60, 75, 65});
    const auto id_map = correspondence::build_map(self, self);
    const double identity = (correspondence::apply_map(id_map, self.vertices) - self.vertices).cwiseAbs().maxCoeff();

    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0.02, 1.0);
    const Mesh src = geometry::make_ellipsoid(geometry::EllipsoidGrid::for_vertex_count(250), {60, 75, 65});
    std::uniform_int_distribution<int> pick(0, src.num_faces() - 1);
    const int n = 400;
    Mesh target;
    target.vertices.resize(3, n);
    std::vector<Eigen::Vector3d> weights(n);
    std::vector<int> faces(n);
    for (int i = 0; i < n; ++i)
    {
        faces[static_cast<std::size_t>(i)] = pick(rng);
        Eigen::Vector3d w(u(rng), u(rng), u(rng));
        w /= w.sum();
        weights[static_cast<std::size_t>(i)] = w;
        const auto& t = src.faces[static_cast<std::size_t>(faces[static_cast<std::size_t>(i)])];
        target.vertices.col(i) = w[0] * src.vertices.col(t[0]) + w[1] * src.vertices.col(t[1]) + w[2] * src.vertices.col(t[2]);
    }
    const auto map = correspondence::build_map(src, target);
    double weight_err = 0.0;
    bool faces_ok = true;
    for (int i = 0; i < n; ++i)
    {
        faces_ok = faces_ok && map.indices[static_cast<std::size_t>(i)] ==
                                   src.faces[static_cast<std::size_t>(faces[static_cast<std::size_t>(i)])];
        for (int k = 0; k < 3; ++k)
            weight_err = std::max(weight_err, std::abs(map.weights[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] -
                                                       weights[static_cast<std::size_t>(i)][k]));
    }

    const Mesh small = geometry::make_ellipsoid(geometry::EllipsoidGrid::for_vertex_count(240), {40, 80, 55});
    const correspondence::TriangleGrid grid(small);
    int mismatches = 0;
    for (int i = 0; i < 3000; ++i)
    {
        const double scale = (i % 3 == 0) ? 30.0 : (i % 3 == 1 ? 80.0 : 200.0);
        const Eigen::Vector3d p = normal_vector(rng, 3, scale);
        mismatches += grid.closest(p).face != correspondence::exhaustive_closest_face(small, p, grid.tie_tolerance()).face;
    }
    return {identity < 1e-12 && faces_ok && weight_err < 1e-9 && mismatches == 0 && small.num_faces() <= 500,
            "self-map " + fmt(identity) + ", weights " + fmt(weight_err) + ", " + std::to_string(mismatches) +
                " grid/exhaustive mismatches on F=" + std::to_string(small.num_faces())};
}

Outcome au_detection()
{
    ensure_pipeline();
    const auto m = pipeline::load_manifest(pipeline_dir().path() / "detect-aus/manifest.json");
    const auto& per_au = m.at("results").at("per_au");
    bool ok = per_au.size() == 8;
    double worst = 1.0;
    for (const auto& a : per_au)
    {
        const double acc = a.at("test_accuracy").get<double>();
        worst = std::min(worst, acc);
        ok = ok && acc >= 0.95;
    }
    return {ok, std::to_string(per_au.size()) + " AUs, minimum held-out accuracy " + fmt(worst)};
}

Outcome interpolation()
{
    ensure_pipeline();
    const fs::path root = pipeline_dir().path();
    const bilinear::BilinearModel model = bilinear::load_model(root / "hosvd/model.bin");
    const flow::Flow f_ex = flow::load_flow(root / "train-flows/flow_expression.bin");
    const Eigen::MatrixXd z = flow::forward(f_ex, model.u_ex.transpose()).z;
    bool endpoints = true;
    for (Eigen::Index a = 0; a + 1 < z.cols(); ++a)
    {
        const latent::LatentCode from{z.col(a), latent::Space::expression, latent::Coords::post_flow};
        const latent::LatentCode to{z.col(a + 1), latent::Space::expression, latent::Coords::post_flow};
        endpoints = endpoints && latent::interpolate(from, to, 0.0).values == from.values &&
                    latent::interpolate(from, to, 1.0).values == to.values;
    }
    const auto m = pipeline::load_manifest(root / "interpolate/manifest.json");
    const auto& results = m.at("results");
    const bool steps = m.at("config").at("interpolate").at("steps").get<int>() == 4;
    const bool smooth = results.at("all_smooth").get<bool>();
    double worst_ratio = 0.0;
    for (const auto& p : results.at("pairs"))
        worst_ratio = std::max(worst_ratio, p.at("max_step_mm").get<double>() / p.at("average_step_mm").get<double>());
    return {endpoints && steps && smooth,
            std::string(endpoints ? "endpoints exact" : "endpoints differ") + ", worst step/average " + fmt(worst_ratio)};
}

Outcome determinism()
{
    const fs::path root = pipeline_dir().path();
    fs::remove_all(root);
    run_all(default_config(root));
    const auto first = hash_everything(root);
    fs::remove_all(root);
    run_all(default_config(root));
    const auto second = hash_everything(root);
    pipeline_ready = true;
    const auto problems = pipeline::verify_manifests(root);
    return {first == second && !first.empty() && problems.empty(),
            std::to_string(first.size()) + " files, " + (first == second ? "identical" : "different") + " hashes, " +
                std::to_string(problems.size()) + " manifest problems"};
}

struct Criterion
{
    std::string name;
    double time_limit_s;
    std::function<Outcome()> run;
};

} // namespace

int main()
{
    const std::vector<Criterion> criteria = {
        {"flow log-determinant and inverse exactness", 10, flow_exactness},
        {"flow gradient against central differences", 30, gradient_oracle},
        {"flow gaussianises bimodal data", 120, bimodal_gaussianization},
        {"HOSVD full-rank exactness and truncation bound", 60, hosvd_exactness},
        {"end-to-end determinism (two full runs)", 600, determinism},
        {"fitting self-consistency and expression ablation", 300, fitting_self_consistency},
        {"hyperellipsoid projection against Cholesky oracle", 60, projection_shell},
        {"expression transfer identities and ensemble mean", 60, transfer_identities},
        {"barycentric map recovery and grid search", 60, barycentric_map},
        {"AU detection held-out accuracy", 120, au_detection},
        {"latent interpolation endpoints and smoothness", 60, interpolation},
    };
    int failures = 0;
    for (const auto& c : criteria)
    {
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try
        {
            o = c.run();
        } catch (const std::exception& e)
        {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (secs > c.time_limit_s)
        {
            o.pass = false;
            o.detail += ", exceeded " + fmt(c.time_limit_s) + " s";
        }
        failures += o.pass ? 0 : 1;
        std::printf("%s  %s: %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", c.name.c_str(), o.detail.c_str(), secs);
        std::fflush(stdout);
    }
    std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
    return failures == 0 ? 0 : 1;
}
