#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "copelab/autograd.hpp"

namespace copelab {

struct AdamWConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// AdamW with bias correction; weight decay is decoupled and applied
// multiplicatively before the adaptive update.
class AdamW {
  public:
    AdamW() = default;
    explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

    int64_t step_count() const { return step_; }
    AdamWConfig& config() { return cfg_; }
    const AdamWConfig& config() const { return cfg_; }

    // moments are keyed by position in `params`, which must be stable
    void step(const std::vector<VarPtr>& params, double lr_scale = 1.0) {
        if (m_.empty()) {
            m_.resize(params.size());
            v_.resize(params.size());
            for (size_t i = 0; i < params.size(); ++i) {
                m_[i].assign(params[i]->numel(), 0.0);
                v_[i].assign(params[i]->numel(), 0.0);
            }
        }
        if (m_.size() != params.size()) {
            throw std::invalid_argument("adamw: parameter count changed mid-run");
        }
        // validate before mutating anything so an aborted step leaves
        // params, moments and the step counter untouched
        for (size_t i = 0; i < params.size(); ++i) {
            const auto& g = params[i]->val.grad;
            if (g.size() != params[i]->numel()) {
                throw std::invalid_argument("adamw: parameter " + std::to_string(i) + " has no gradient");
            }
            for (double gv : g) {
                if (!std::isfinite(gv)) {
                    throw std::runtime_error("adamw: non-finite gradient in parameter " + std::to_string(i) +
                                             ", step aborted");
                }
            }
        }
        step_ += 1;
        double lr = cfg_.lr * lr_scale;
        double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        for (size_t i = 0; i < params.size(); ++i) {
            auto& p = params[i]->val.data;
            const auto& g = params[i]->val.grad;
            auto& m = m_[i];
            auto& v = v_[i];
            for (size_t j = 0; j < p.size(); ++j) {
                p[j] *= 1.0 - lr * cfg_.weight_decay;
                m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
                v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
                double mhat = m[j] / bc1;
                double vhat = v[j] / bc2;
                p[j] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

    // persistence hooks for checkpoints
    std::vector<std::vector<double>>& moments_m() { return m_; }
    std::vector<std::vector<double>>& moments_v() { return v_; }
    void set_step_count(int64_t s) { step_ = s; }

  private:
    AdamWConfig cfg_;
    int64_t step_ = 0;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
};

// Scales gradients in place so their global L2 norm is at most `max_norm`.
// Returns the pre-clip norm.
inline double clip_grad_norm(const std::vector<VarPtr>& params, double max_norm) {
    double sq = 0.0;
    for (const auto& p : params) {
        for (double g : p->val.grad) sq += g * g;
    }
    double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        double s = max_norm / norm;
        for (const auto& p : params) {
            for (double& g : p->val.grad) g *= s;
        }
    }
    return norm;
}

}  // namespace copelab
