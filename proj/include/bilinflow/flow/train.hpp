/*
 * bilinflow - bilinear identity/expression face models with normalizing flows.
 *
 * File: include/bilinflow/flow/train.hpp
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

#ifndef BILINFLOW_FLOW_TRAIN_HPP
#define BILINFLOW_FLOW_TRAIN_HPP

#include "bilinflow/core/binary_io.hpp"
#include "bilinflow/core/error.hpp"
#include "bilinflow/flow/real_nvp.hpp"

#include "Eigen/Core"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace bilinflow {
namespace flow {

struct TrainConfig
{
    int epochs = 200;
    int batch_size = 64;
    double learning_rate = 1e-3; ///< Initial Adam step, decayed by a half cosine to zero over all steps.
    bool dequantize = true;      ///< Adds sqrt(var) * U(0, 1) noise per dimension to every batch.
    double frobenius_weight = 1.0;
    FrobeniusMode frobenius_mode = FrobeniusMode::composed;
    bool standardize = true;     ///< Fits layer 0 to the clean training data before training.
    std::uint64_t seed = 1;
};

struct EpochLoss
{
    int epoch = 0;
    double nll = 0.0;
    double frobenius = 0.0;
    double total = 0.0;
};

struct TrainResult
{
    Flow flow;
    std::vector<EpochLoss> history;
};

/// Adam state over a flat parameter vector.
struct Adam
{
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    Eigen::VectorXd m;
    Eigen::VectorXd v;
    long long t = 0;

    void step(Eigen::VectorXd& params, const Eigen::VectorXd& grad, double lr)
    {
        if (m.size() != params.size())
        {
            m = Eigen::VectorXd::Zero(params.size());
            v = Eigen::VectorXd::Zero(params.size());
        }
        ++t;
        m = beta1 * m + (1.0 - beta1) * grad;
        v = beta2 * v + (1.0 - beta2) * grad.cwiseAbs2();
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        params.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + epsilon);
    }
};

/// Half-cosine decay from `base` at step 0 to 0 at step `total`.
inline double cosine_lr(double base, long long step, long long total)
{
    if (total <= 0)
    {
        return base;
    }
    const double progress = std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
    return 0.5 * base * (1.0 + std::cos(M_PI * progress));
}

/// Per-dimension population variance of the columns of `data`.
inline Eigen::VectorXd sample_variance(const Eigen::MatrixXd& data)
{
    const Eigen::VectorXd mean = data.rowwise().mean();
    return (data.colwise() - mean).rowwise().squaredNorm() / static_cast<double>(data.cols());
}

/**
 * Minimises mean(nll + weight * |J_f|_F) over shuffled mini-batches with
 * Adam. `data` holds one sample per column. The returned flow is checked for
 * invertibility on the training data before it is returned.
 */
inline TrainResult train(Flow flow, const Eigen::MatrixXd& data, const TrainConfig& config)
{
    if (data.rows() != flow.dim)
    {
        throw InvalidArgument("train: data dimension " + std::to_string(data.rows()) + " does not match flow " +
                              std::to_string(flow.dim));
    }
    if (data.cols() < 2)
    {
        throw InvalidArgument("train: need at least 2 samples");
    }
    if (config.epochs < 1 || config.batch_size < 1 || !(config.learning_rate > 0.0) ||
        !(config.frobenius_weight >= 0.0))
    {
        throw InvalidArgument("train: epochs, batch size and learning rate must be positive");
    }
    if (!data.allFinite())
    {
        throw InvalidArgument("train: data contains non-finite values");
    }
    if (config.standardize)
    {
        set_standardization(flow, data);
    }

    std::mt19937_64 rng(config.seed);
    const Eigen::VectorXd variance = sample_variance(data);
    const Eigen::Index n = data.cols();
    const Eigen::Index batch = std::min<Eigen::Index>(config.batch_size, n);
    const Eigen::Index batches = (n + batch - 1) / batch;
    const long long total_steps = static_cast<long long>(batches) * config.epochs;

    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    Adam adam;
    Eigen::VectorXd params = get_parameters(flow);
    Eigen::VectorXd grad;
    TrainResult result;
    long long step = 0;
    for (int epoch = 1; epoch <= config.epochs; ++epoch)
    {
        std::shuffle(order.begin(), order.end(), rng);
        EpochLoss e;
        e.epoch = epoch;
        for (Eigen::Index b = 0; b < batches; ++b)
        {
            const Eigen::Index begin = b * batch;
            const Eigen::Index count = std::min(batch, n - begin);
            Eigen::MatrixXd x(flow.dim, count);
            for (Eigen::Index j = 0; j < count; ++j)
            {
                x.col(j) = data.col(order[static_cast<std::size_t>(begin + j)]);
            }
            if (config.dequantize)
            {
                x = dequantize(x, variance, rng);
            }
            double batch_nll = 0.0;
            double batch_frob = 0.0;
            double loss = 0.0;
            try
            {
                loss = loss_and_gradient(flow, x, config.frobenius_weight, config.frobenius_mode, grad, &batch_nll,
                                         &batch_frob);
            } catch (const NumericalError& err)
            {
                throw NumericalError("training diverged at epoch " + std::to_string(epoch) + ": " + err.what());
            }
            if (!std::isfinite(loss) || !grad.allFinite())
            {
                throw NumericalError("training diverged at epoch " + std::to_string(epoch) + ": non-finite loss");
            }
            adam.step(params, grad, cosine_lr(config.learning_rate, step, total_steps));
            ++step;
            set_parameters(flow, params);
            const double weight = static_cast<double>(count) / static_cast<double>(n);
            e.nll += weight * batch_nll;
            e.frobenius += weight * batch_frob;
            e.total += weight * loss;
        }
        result.history.push_back(e);
    }

    const ForwardResult fwd = forward(flow, data);
    const double roundtrip = (inverse(flow, fwd.z) - data).cwiseAbs().maxCoeff();
    const double scale = std::max(1.0, data.cwiseAbs().maxCoeff());
    if (!(roundtrip <= 1e-9 * scale))
    {
        throw NumericalError("trained flow fails the round-trip check (error " + std::to_string(roundtrip) + ")");
    }
    result.flow = std::move(flow);
    return result;
}

inline std::string history_to_csv(const std::vector<EpochLoss>& history)
{
    std::ostringstream out;
    out.precision(17);
    out << "epoch,nll,frobenius,total\n";
    for (const auto& e : history)
    {
        out << e.epoch << ',' << e.nll << ',' << e.frobenius << ',' << e.total << '\n';
    }
    return out.str();
}

inline void save_history(const std::vector<EpochLoss>& history, const std::filesystem::path& path)
{
    write_file_atomic(path, history_to_csv(history));
}

} // namespace flow
} // namespace bilinflow

#endif /* BILINFLOW_FLOW_TRAIN_HPP */
