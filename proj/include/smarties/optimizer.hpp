#pragma once

#include <cmath>
#include <vector>

#include "smarties/common.hpp"
#include "smarties/tensor.hpp"

namespace smarties {

struct OptimConfig {
    double base_lr = 1.5e-4;
    double min_lr = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double weight_decay = 0.05;
    double eps = 1e-8;
    int warmup_steps = 0;
    int total_steps = 0;  // for the cosine schedule; 0 disables decay
};

// Linear warmup then half-cosine decay to min_lr.
inline double lr_at_step(const OptimConfig& cfg, int step) {
    if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
        return cfg.base_lr * double(step + 1) / double(cfg.warmup_steps);
    if (cfg.total_steps <= cfg.warmup_steps) return cfg.base_lr;
    const double t = double(step - cfg.warmup_steps) / double(cfg.total_steps - cfg.warmup_steps);
    const double clamped = std::min(1.0, std::max(0.0, t));
    return cfg.min_lr + (cfg.base_lr - cfg.min_lr) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * clamped));
}

// Decoupled AdamW. Weight decay is applied to matrices only; biases, norm
// scales and the 1-D embeddings are exempt.
template <class T>
class AdamWT {
  public:
    AdamWT() = default;
    AdamWT(std::vector<TensorT<T>> params, OptimConfig cfg)
        : params_(std::move(params)), cfg_(cfg) {
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (size_t i = 0; i < params_.size(); ++i) {
            m_[i].assign(params_[i].size(), T(0));
            v_[i].assign(params_[i].size(), T(0));
        }
    }

    const OptimConfig& config() const { return cfg_; }
    int step_count() const { return step_; }
    const std::vector<TensorT<T>>& params() const { return params_; }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    double current_lr() const { return lr_at_step(cfg_, step_); }

    void step() {
        const double lr = current_lr();
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, double(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, double(step_));
        for (size_t i = 0; i < params_.size(); ++i) {
            TensorT<T>& p = params_[i];
            const std::vector<T>& g = p.grad();
            const bool decay = p.ndim() > 1;
            for (size_t j = 0; j < p.size(); ++j) {
                m_[i][j] = T(cfg_.beta1) * m_[i][j] + T(1.0 - cfg_.beta1) * g[j];
                v_[i][j] = T(cfg_.beta2) * v_[i][j] + T(1.0 - cfg_.beta2) * g[j] * g[j];
                const double mhat = double(m_[i][j]) / bc1;
                const double vhat = double(v_[i][j]) / bc2;
                double upd = mhat / (std::sqrt(vhat) + cfg_.eps);
                if (decay) upd += cfg_.weight_decay * double(p.data()[j]);
                p.data()[j] = T(double(p.data()[j]) - lr * upd);
            }
        }
    }

    // Moment buffers in parameter order, for checkpointing.
    std::vector<std::vector<T>>& first_moments() { return m_; }
    std::vector<std::vector<T>>& second_moments() { return v_; }
    void set_step_count(int s) { step_ = s; }

  private:
    std::vector<TensorT<T>> params_;
    OptimConfig cfg_;
    std::vector<std::vector<T>> m_;
    std::vector<std::vector<T>> v_;
    int step_ = 0;
};

using AdamW = AdamWT<double>;

}  // namespace smarties
