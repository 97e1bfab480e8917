#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "pgssl/tape.hpp"
#include "pgssl/tensor.hpp"

namespace pgssl {

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
    std::size_t worst_index = 0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;

    double worst() const {
        double w = 0.0;
        for (const auto& e : entries) w = std::max(w, e.max_rel_err);
        return w;
    }
    bool all_below(double tol) const { return worst() < tol; }
};

// Central finite-difference verification of reverse-mode gradients.
//
// `forward` must rebuild the model fragment's graph from the tensors in
// `wrt` on every call and return the scalar loss. It must be deterministic
// (dropout inactive or a fixed mask); that is checked by evaluating twice
// before any differencing. Tensors with requires_grad == false are skipped
// and do not appear in the report.
//
// Batch-norm running buffers may drift across evaluations; training-mode
// outputs do not read them, so the check is unaffected.
template <typename T>
GradCheckReport check_gradients(const std::function<Tensor<T>(Tape<T>*)>& forward,
                                std::vector<std::pair<std::string, Tensor<T>>> wrt,
                                double step_scale = 0.0) {
    if (step_scale <= 0.0)
        step_scale = std::is_same_v<T, double> ? 1e-6 : 1e-2;

    const double f0 = static_cast<double>(forward(nullptr).item());
    const double f1 = static_cast<double>(forward(nullptr).item());
    if (f0 != f1)
        throw Error("check_gradients: forward is non-deterministic (" + std::to_string(f0) +
                    " vs " + std::to_string(f1) + ")");

    // Analytic pass.
    for (auto& [name, t] : wrt)
        if (t.requires_grad()) t.zero_grad();
    Tape<T> tape;
    Tensor<T> loss = forward(&tape);
    if (loss.numel() != 1)
        throw ShapeError("check_gradients: fragment loss must be scalar");
    tape.backward(loss);

    GradCheckReport report;
    for (auto& [name, t] : wrt) {
        if (!t.requires_grad()) continue;
        std::vector<double> analytic(t.numel());
        auto gsp = t.grad();
        for (std::size_t i = 0; i < analytic.size(); ++i)
            analytic[i] = static_cast<double>(gsp[i]);

        GradCheckEntry entry{name, 0.0, 0};
        auto vals = t.values();
        for (std::size_t i = 0; i < t.numel(); ++i) {
            const T orig = vals[i];
            const double h = step_scale * std::max(1.0, std::abs(static_cast<double>(orig)));
            vals[i] = static_cast<T>(static_cast<double>(orig) + h);
            const double fp = static_cast<double>(forward(nullptr).item());
            vals[i] = static_cast<T>(static_cast<double>(orig) - h);
            const double fm = static_cast<double>(forward(nullptr).item());
            vals[i] = orig;
            const double numeric = (fp - fm) / (2.0 * h);
            const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
            const double rel = std::abs(analytic[i] - numeric) / denom;
            if (rel > entry.max_rel_err) {
                entry.max_rel_err = rel;
                entry.worst_index = i;
            }
        }
        report.entries.push_back(std::move(entry));
    }
    return report;
}

}  // namespace pgssl
