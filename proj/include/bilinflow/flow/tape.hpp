/*
 * bilinflow - bilinear identity/expression face models with normalizing flows.
 *
 * File: include/bilinflow/flow/tape.hpp
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

#ifndef BILINFLOW_FLOW_TAPE_HPP
#define BILINFLOW_FLOW_TAPE_HPP

#include "bilinflow/core/error.hpp"

#include "Eigen/Core"

#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace bilinflow {
namespace flow {

/// Handle to a node on a Tape.
struct Var
{
    int id = -1;
};

/**
 * Minimal reverse-mode automatic differentiation over dense matrices.
 *
 * Every operation appends a node holding its value and a closure that
 * propagates the node's adjoint to its inputs. backward() seeds one output
 * and sweeps the nodes in reverse creation order, which is a valid
 * topological order. Broadcasting is explicit: add_bias() adds a column
 * vector to every column, repeat_cols() and group_sum_cols() move between
 * per-sample and per-(sample, tangent-direction) layouts.
 */
class Tape
{
public:
    Var constant(Eigen::MatrixXd value) { return push(std::move(value), nullptr); }

    /// Leaf whose gradient is kept after backward().
    Var variable(Eigen::MatrixXd value) { return push(std::move(value), nullptr); }

    const Eigen::MatrixXd& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }

    /// Adjoint of `v` after backward(); zero matrix of the value's shape when unreached.
    Eigen::MatrixXd grad(Var v) const
    {
        const Node& n = nodes_[static_cast<std::size_t>(v.id)];
        if (n.grad.size() == 0)
        {
            return Eigen::MatrixXd::Zero(n.value.rows(), n.value.cols());
        }
        return n.grad;
    }

    std::size_t size() const { return nodes_.size(); }

    void backward(Var output, const Eigen::MatrixXd& seed)
    {
        if (seed.rows() != value(output).rows() || seed.cols() != value(output).cols())
        {
            throw InvalidArgument("Tape::backward: seed shape does not match output");
        }
        for (auto& n : nodes_)
        {
            n.grad.resize(0, 0);
        }
        nodes_[static_cast<std::size_t>(output.id)].grad = seed;
        for (int i = output.id; i >= 0; --i)
        {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (n.backward && n.grad.size() != 0)
            {
                n.backward(n.grad);
            }
        }
    }

    void backward(Var scalar_output) { backward(scalar_output, Eigen::MatrixXd::Ones(1, 1)); }

    // Operations.

    Var matmul(Var a, Var b)
    {
        check(value(a).cols() == value(b).rows(), "matmul");
        return push(value(a) * value(b), [this, a, b](const Eigen::MatrixXd& g) {
            accumulate(a, g * value(b).transpose());
            accumulate(b, value(a).transpose() * g);
        });
    }

    Var add(Var a, Var b)
    {
        check(same_shape(a, b), "add");
        return push(value(a) + value(b), [this, a, b](const Eigen::MatrixXd& g) {
            accumulate(a, g);
            accumulate(b, g);
        });
    }

    Var sub(Var a, Var b)
    {
        check(same_shape(a, b), "sub");
        return push(value(a) - value(b), [this, a, b](const Eigen::MatrixXd& g) {
            accumulate(a, g);
            accumulate(b, -g);
        });
    }

    /// Elementwise product.
    Var cmul(Var a, Var b)
    {
        check(same_shape(a, b), "cmul");
        return push(value(a).cwiseProduct(value(b)), [this, a, b](const Eigen::MatrixXd& g) {
            accumulate(a, g.cwiseProduct(value(b)));
            accumulate(b, g.cwiseProduct(value(a)));
        });
    }

    /// a + bias * 1^T for a column vector `bias` with a.rows() entries.
    Var add_bias(Var a, Var bias)
    {
        check(value(bias).cols() == 1 && value(bias).rows() == value(a).rows(), "add_bias");
        return push(value(a).colwise() + value(bias).col(0), [this, a, bias](const Eigen::MatrixXd& g) {
            accumulate(a, g);
            accumulate(bias, g.rowwise().sum());
        });
    }

    /// alpha * a + beta elementwise.
    Var affine(Var a, double alpha, double beta)
    {
        Eigen::MatrixXd v = (alpha * value(a).array() + beta).matrix();
        return push(std::move(v), [this, a, alpha](const Eigen::MatrixXd& g) { accumulate(a, alpha * g); });
    }

    Var tanh(Var a)
    {
        Eigen::MatrixXd v = value(a).array().tanh().matrix();
        const int out = static_cast<int>(nodes_.size());
        return push(std::move(v), [this, a, out](const Eigen::MatrixXd& g) {
            const Eigen::MatrixXd& y = nodes_[static_cast<std::size_t>(out)].value;
            accumulate(a, (g.array() * (1.0 - y.array().square())).matrix());
        });
    }

    Var exp(Var a)
    {
        Eigen::MatrixXd v = value(a).array().exp().matrix();
        const int out = static_cast<int>(nodes_.size());
        return push(std::move(v), [this, a, out](const Eigen::MatrixXd& g) {
            accumulate(a, g.cwiseProduct(nodes_[static_cast<std::size_t>(out)].value));
        });
    }

    Var square(Var a)
    {
        return push(value(a).array().square().matrix(),
                    [this, a](const Eigen::MatrixXd& g) { accumulate(a, 2.0 * g.cwiseProduct(value(a))); });
    }

    Var sqrt(Var a)
    {
        Eigen::MatrixXd v = value(a).array().sqrt().matrix();
        const int out = static_cast<int>(nodes_.size());
        return push(std::move(v), [this, a, out](const Eigen::MatrixXd& g) {
            accumulate(a, (0.5 * g.array() / nodes_[static_cast<std::size_t>(out)].value.array()).matrix());
        });
    }

    /// r x c -> r x (c * k): column j * k + m is column j of `a`.
    Var repeat_cols(Var a, Eigen::Index k)
    {
        const Eigen::MatrixXd& x = value(a);
        Eigen::MatrixXd v(x.rows(), x.cols() * k);
        for (Eigen::Index j = 0; j < x.cols(); ++j)
        {
            v.middleCols(j * k, k) = x.col(j).replicate(1, k);
        }
        return push(std::move(v), [this, a, k](const Eigen::MatrixXd& g) { accumulate(a, group_sum(g, k)); });
    }

    /// r x (c * k) -> r x c: sums each run of k consecutive columns.
    Var group_sum_cols(Var a, Eigen::Index k)
    {
        check(value(a).cols() % k == 0, "group_sum_cols");
        return push(group_sum(value(a), k), [this, a, k](const Eigen::MatrixXd& g) {
            Eigen::MatrixXd out(g.rows(), g.cols() * k);
            for (Eigen::Index j = 0; j < g.cols(); ++j)
            {
                out.middleCols(j * k, k) = g.col(j).replicate(1, k);
            }
            accumulate(a, out);
        });
    }

    Var rows(Var a, Eigen::Index start, Eigen::Index count)
    {
        check(start >= 0 && start + count <= value(a).rows(), "rows");
        return push(value(a).middleRows(start, count), [this, a, start, count](const Eigen::MatrixXd& g) {
            Eigen::MatrixXd full = Eigen::MatrixXd::Zero(value(a).rows(), value(a).cols());
            full.middleRows(start, count) = g;
            accumulate(a, full);
        });
    }

    /// Stacks `top` above `bottom`.
    Var vconcat(Var top, Var bottom)
    {
        check(value(top).cols() == value(bottom).cols(), "vconcat");
        Eigen::MatrixXd v(value(top).rows() + value(bottom).rows(), value(top).cols());
        v << value(top), value(bottom);
        const Eigen::Index split = value(top).rows();
        return push(std::move(v), [this, top, bottom, split](const Eigen::MatrixXd& g) {
            accumulate(top, g.topRows(split));
            accumulate(bottom, g.bottomRows(g.rows() - split));
        });
    }

    /// r x c -> 1 x c column sums.
    Var col_sum(Var a)
    {
        return push(value(a).colwise().sum(), [this, a](const Eigen::MatrixXd& g) {
            accumulate(a, g.replicate(value(a).rows(), 1));
        });
    }

    /// Sum of all entries as a 1 x 1 matrix.
    Var sum(Var a)
    {
        Eigen::MatrixXd v(1, 1);
        v(0, 0) = value(a).sum();
        return push(std::move(v), [this, a](const Eigen::MatrixXd& g) {
            accumulate(a, Eigen::MatrixXd::Constant(value(a).rows(), value(a).cols(), g(0, 0)));
        });
    }

private:
    struct Node
    {
        Eigen::MatrixXd value;
        Eigen::MatrixXd grad;
        std::function<void(const Eigen::MatrixXd&)> backward;
    };

    Var push(Eigen::MatrixXd value, std::function<void(const Eigen::MatrixXd&)> backward)
    {
        nodes_.push_back({std::move(value), Eigen::MatrixXd(), std::move(backward)});
        return {static_cast<int>(nodes_.size()) - 1};
    }

    void accumulate(Var v, const Eigen::MatrixXd& g)
    {
        Eigen::MatrixXd& dst = nodes_[static_cast<std::size_t>(v.id)].grad;
        if (dst.size() == 0)
        {
            dst = g;
        } else
        {
            dst += g;
        }
    }

    static Eigen::MatrixXd group_sum(const Eigen::MatrixXd& x, Eigen::Index k)
    {
        Eigen::MatrixXd out(x.rows(), x.cols() / k);
        for (Eigen::Index j = 0; j < out.cols(); ++j)
        {
            out.col(j) = x.middleCols(j * k, k).rowwise().sum();
        }
        return out;
    }

    bool same_shape(Var a, Var b) const
    {
        return value(a).rows() == value(b).rows() && value(a).cols() == value(b).cols();
    }

    static void check(bool ok, const char* op)
    {
        if (!ok)
        {
            throw InvalidArgument(std::string("Tape::") + op + ": shape mismatch");
        }
    }

    std::vector<Node> nodes_;
};

} // namespace flow
} // namespace bilinflow

#endif /* BILINFLOW_FLOW_TAPE_HPP */
