#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "copelab/autograd.hpp"

namespace copelab {

// Central-difference check of reverse-mode gradients.
//
// `fn` rebuilds the scalar loss graph from the current leaf values each
// time it is called. Returns the worst relative error over all coordinates
// of all leaves; when both the analytic and numeric value of a coordinate
// are below 1e-8 the absolute difference is used instead.
inline double finite_difference_check(const std::function<VarPtr()>& fn,
                                      const std::vector<VarPtr>& leaves, double eps = 1e-4) {
    if (eps <= 0.0) {
        throw std::invalid_argument("finite_difference_check: eps must be positive");
    }
    for (const auto& leaf : leaves) leaf->val.zero_grad();
    VarPtr loss = fn();
    backward(loss);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(leaves.size());
    for (const auto& leaf : leaves) {
        leaf->val.ensure_grad();
        analytic.push_back(leaf->val.grad);
    }

    double worst = 0.0;
    NoGradGuard ng;
    for (size_t li = 0; li < leaves.size(); ++li) {
        auto& data = leaves[li]->val.data;
        for (size_t j = 0; j < data.size(); ++j) {
            double saved = data[j];
            data[j] = saved + eps;
            double fp = fn()->val.data[0];
            data[j] = saved - eps;
            double fm = fn()->val.data[0];
            data[j] = saved;
            if (!std::isfinite(fp) || !std::isfinite(fm)) {
                throw std::runtime_error("finite_difference_check: non-finite value at leaf " +
                                         std::to_string(li) + " coordinate " + std::to_string(j));
            }
            double numeric = (fp - fm) / (2.0 * eps);
            double a = analytic[li][j];
            double err;
            if (std::abs(a) < 1e-8 && std::abs(numeric) < 1e-8) {
                err = std::abs(a - numeric);
            } else {
                err = std::abs(a - numeric) / std::max(std::abs(a), std::abs(numeric));
            }
            worst = std::max(worst, err);
        }
    }
    return worst;
}

}  // namespace copelab
