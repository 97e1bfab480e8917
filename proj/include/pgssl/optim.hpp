#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "pgssl/tensor.hpp"

namespace pgssl {

enum class OptMode { sgd_momentum, adam, lars };

struct OptimizerConfig {
    OptMode mode = OptMode::sgd_momentum;
    double momentum = 0.9;      // sgd_momentum and lars
    double beta1 = 0.9;         // adam
    double beta2 = 0.999;       // adam
    double eps = 1e-8;
    double weight_decay = 0.0;  // applied to lars-adapted tensors only
    double trust = 0.001;       // lars trust coefficient
};

// Updates a named parameter list in place. Each named tensor is one "layer
// group" for LARS; rank<=1 tensors (biases, batch-norm scale/shift) are
// excluded from LARS adaptation and from weight decay, and take the plain
// momentum path instead.
template <typename T>
class Optimizer {
public:
    explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) {}

    const OptimizerConfig& config() const { return cfg_; }
    std::uint64_t step_count() const { return step_; }

    void step(std::vector<std::pair<std::string, Tensor<T>>>& params, double lr) {
        ++step_;
        for (auto& [name, p] : params) {
            if (!p.requires_grad()) continue;
            auto g = p.grad();
            for (std::size_t i = 0; i < g.size(); ++i)
                if (!std::isfinite(static_cast<double>(g[i])))
                    throw ValueError("optimizer: non-finite gradient in parameter '" + name +
                                     "' at flat index " + std::to_string(i));
            switch (cfg_.mode) {
                case OptMode::sgd_momentum: sgd_step(name, p, lr); break;
                case OptMode::adam: adam_step(name, p, lr); break;
                case OptMode::lars: lars_step(name, p, lr); break;
            }
        }
    }

private:
    struct Slot {
        std::vector<double> m;  // momentum buffer / first moment
        std::vector<double> v;  // second moment (adam only)
    };

    Slot& slot(const std::string& name, std::size_t n, bool want_v) {
        Slot& s = slots_[name];
        if (s.m.size() != n) s.m.assign(n, 0.0);
        if (want_v && s.v.size() != n) s.v.assign(n, 0.0);
        return s;
    }

    void sgd_step(const std::string& name, Tensor<T>& p, double lr) {
        Slot& s = slot(name, p.numel(), false);
        auto pv = p.values();
        auto g = p.grad();
        for (std::size_t i = 0; i < pv.size(); ++i) {
            s.m[i] = cfg_.momentum * s.m[i] + static_cast<double>(g[i]);
            pv[i] = static_cast<T>(static_cast<double>(pv[i]) - lr * s.m[i]);
        }
    }

    void adam_step(const std::string& name, Tensor<T>& p, double lr) {
        Slot& s = slot(name, p.numel(), true);
        auto pv = p.values();
        auto g = p.grad();
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        for (std::size_t i = 0; i < pv.size(); ++i) {
            const double gi = static_cast<double>(g[i]);
            s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * gi;
            s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * gi * gi;
            const double mhat = s.m[i] / bc1;
            const double vhat = s.v[i] / bc2;
            pv[i] = static_cast<T>(static_cast<double>(pv[i]) - lr * mhat / (std::sqrt(vhat) + cfg_.eps));
        }
    }

    void lars_step(const std::string& name, Tensor<T>& p, double lr) {
        Slot& s = slot(name, p.numel(), false);
        auto pv = p.values();
        auto g = p.grad();
        const bool adapted = p.rank() > 1;
        double local_lr = 1.0;
        double wd = 0.0;
        if (adapted) {
            wd = cfg_.weight_decay;
            double pn = 0.0, gn = 0.0;
            for (std::size_t i = 0; i < pv.size(); ++i) {
                pn += static_cast<double>(pv[i]) * static_cast<double>(pv[i]);
                gn += static_cast<double>(g[i]) * static_cast<double>(g[i]);
            }
            pn = std::sqrt(pn);
            gn = std::sqrt(gn);
            local_lr = cfg_.trust * pn / (gn + wd * pn + cfg_.eps);
        }
        for (std::size_t i = 0; i < pv.size(); ++i) {
            const double gi = static_cast<double>(g[i]) + wd * static_cast<double>(pv[i]);
            s.m[i] = cfg_.momentum * s.m[i] + gi;
            pv[i] = static_cast<T>(static_cast<double>(pv[i]) - lr * local_lr * s.m[i]);
        }
    }

    OptimizerConfig cfg_;
    std::map<std::string, Slot> slots_;
    std::uint64_t step_ = 0;
};

// Linear warmup to base_lr over warmup_steps, then cosine decay to zero.
inline double warmup_cosine_lr(std::uint64_t step, std::uint64_t total_steps,
                               std::uint64_t warmup_steps, double base_lr) {
    if (total_steps == 0) return base_lr;
    if (step >= total_steps) return 0.0;
    if (warmup_steps > 0 && step < warmup_steps)
        return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    const double t = static_cast<double>(step - warmup_steps) /
                     static_cast<double>(total_steps - warmup_steps);
    return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

// lr(t) = base * (1 - t/T)^power
inline double polynomial_lr(std::uint64_t step, std::uint64_t total_steps, double base_lr,
                            double power = 0.9) {
    if (total_steps == 0 || step >= total_steps) return 0.0;
    const double t = static_cast<double>(step) / static_cast<double>(total_steps);
    return base_lr * std::pow(1.0 - t, power);
}

}  // namespace pgssl
