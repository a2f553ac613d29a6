#pragma once

// Central finite-difference gradient checker, 64-bit only. Perturbs every
// element of every leaf, so keep the instances small.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "strokekit/tensor.hpp"

namespace gradcheck {

struct Result {
    bool ok = true;
    double worst = 0.0;
    std::string where;
};

// fn must rebuild the whole graph from the current leaf values and return a
// scalar loss tensor recorded on the active tape.
inline Result check(std::vector<strokekit::Tensor<double>> leaves,
                    const std::function<strokekit::Tensor<double>()>& fn, double tol = 1e-5,
                    double h = 1e-6) {
    using strokekit::Tape;
    Result res;

    std::vector<std::vector<double>> analytic;
    {
        Tape<double> tape;
        for (auto& l : leaves) l.set_requires_grad(true);
        auto loss = fn();
        tape.backward(loss);
        for (auto& l : leaves) {
            if (l.has_grad())
                analytic.emplace_back(l.grad().begin(), l.grad().end());
            else
                analytic.emplace_back(l.numel(), 0.0);
            l.drop_grad();
        }
    }

    auto eval = [&]() {
        Tape<double> tape;
        return fn().item();
    };

    for (size_t li = 0; li < leaves.size(); ++li) {
        auto vals = leaves[li].raw();
        for (int64_t i = 0; i < leaves[li].numel(); ++i) {
            double keep = vals[i];
            vals[i] = keep + h;
            double fp = eval();
            vals[i] = keep - h;
            double fm = eval();
            vals[i] = keep;
            double num = (fp - fm) / (2 * h);
            double ana = analytic[li][static_cast<size_t>(i)];
            if (std::abs(num) < 1e-9 && std::abs(ana) < 1e-9) continue;
            double rel = std::abs(num - ana) / std::max({std::abs(num), std::abs(ana), 1e-3});
            if (rel > res.worst) {
                res.worst = rel;
                res.where = "leaf " + std::to_string(li) + " elem " + std::to_string(i) +
                            " analytic " + std::to_string(ana) + " numeric " +
                            std::to_string(num);
            }
            if (rel > tol) res.ok = false;
        }
    }
    return res;
}

} // namespace gradcheck
