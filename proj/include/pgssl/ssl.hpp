#pragma once

#include <cmath>
#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include "pgssl/augment.hpp"
#include "pgssl/backbone.hpp"
#include "pgssl/tape.hpp"
#include "pgssl/tensor.hpp"

namespace pgssl {

// Epsilon inside every logarithm of the consistency losses.
constexpr double kLogEps = 1e-12;

// Per-step loss record emitted to the trace CSV.
struct LossBreakdown {
    double global = 0.0;
    double local = 0.0;
    double total = 0.0;
    std::size_t matched_pixel_count = 0;
    double mean_uncertainty = 0.0;
};

// Teacher decay schedule: lambda rises from lambda_start to 1 on a cosine,
// lambda(t) = 1 - (1 - lambda_start) * (cos(pi t/T) + 1) / 2.
inline double lambda_schedule(std::uint64_t step, std::uint64_t total_steps,
                              double lambda_start = 0.996) {
    if (total_steps == 0) return 1.0;
    if (step >= total_steps) return 1.0;
    const double t = static_cast<double>(step) / static_cast<double>(total_steps);
    const double c = (std::cos(3.14159265358979323846 * t) + 1.0) / 2.0;
    return 1.0 - (1.0 - lambda_start) * c;
}

struct EmaSchedule {
    double lambda_start = 0.996;
    std::uint64_t total_steps = 1;

    double at(std::uint64_t step) const { return lambda_schedule(step, total_steps, lambda_start); }
};

// theta_t <- lambda * theta_t + (1 - lambda) * theta_s, elementwise over
// every named tensor (running statistics included).
template <typename T>
void ema_update(ParamSet<T>& teacher, const ParamSet<T>& student, double lambda) {
    if (!teacher.schema_matches(student))
        throw ShapeError("ema_update: teacher/student schemas differ");
    for (std::size_t k = 0; k < teacher.items().size(); ++k) {
        auto tv = teacher.items()[k].second.values();
        auto sv = student.items()[k].second.values();
        for (std::size_t i = 0; i < tv.size(); ++i)
            tv[i] = static_cast<T>(lambda * static_cast<double>(tv[i]) +
                                   (1.0 - lambda) * static_cast<double>(sv[i]));
    }
}

namespace detail {

template <typename T>
void check_probability_rows(const Tensor<T>& p, const char* who) {
    const std::size_t k = p.rank() == 1 ? p.dim(0) : p.dim(1);
    const std::size_t n = p.rank() == 1 ? 1 : p.dim(0);
    auto pv = p.values();
    for (std::size_t r = 0; r < n; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < k; ++c) {
            const double v = pv[r * k + c];
            if (v < 0.0)
                throw ValueError(std::string(who) + ": negative probability " + std::to_string(v) +
                                 " in row " + std::to_string(r));
            s += v;
        }
        if (std::abs(s - 1.0) > 1e-5)
            throw ValueError(std::string(who) + ": row " + std::to_string(r) +
                             " sums to " + std::to_string(s) + ", expected 1");
    }
}

}  // namespace detail

// Global consistency (cross-entropy of the student's distribution against
// the teacher's, teacher held constant): -sum_k t_k ln(s_k + eps), averaged
// over the batch. Accepts [K] or [N,K].
template <typename T>
Tensor<T> global_loss(Tape<T>* tape, const Tensor<T>& teacher_probs,
                      const Tensor<T>& student_probs) {
    if (!same_shape(teacher_probs.shape(), student_probs.shape()))
        throw ShapeError("global_loss: shape mismatch " + shape_str(teacher_probs.shape()) +
                         " vs " + shape_str(student_probs.shape()));
    if (teacher_probs.rank() != 1 && teacher_probs.rank() != 2)
        throw ShapeError("global_loss: expected [K] or [N,K]");
    detail::check_probability_rows(teacher_probs, "global_loss(teacher)");
    detail::check_probability_rows(student_probs, "global_loss(student)");
    const std::size_t n = teacher_probs.rank() == 1 ? 1 : teacher_probs.dim(0);
    const std::size_t total = teacher_probs.numel();

    auto tv = teacher_probs.values();
    auto sv = student_probs.values();
    double acc = 0.0;
    for (std::size_t i = 0; i < total; ++i)
        acc -= static_cast<double>(tv[i]) * std::log(static_cast<double>(sv[i]) + kLogEps);
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n)));

    if (tracking(tape, student_probs.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> ts = student_probs, tt = teacher_probs, to = out;
        tape->record([ts, tt, to, n]() mutable {
            const double g = to.grad()[0];
            auto sv2 = ts.values();
            auto tv2 = tt.values();
            auto gs = ts.grad();
            const double inv = 1.0 / static_cast<double>(n);
            for (std::size_t i = 0; i < sv2.size(); ++i)
                gs[i] -= static_cast<T>(g * inv * static_cast<double>(tv2[i]) /
                                        (static_cast<double>(sv2[i]) + kLogEps));
        });
    }
    return out;
}

namespace detail {

template <typename T>
void check_local_shapes(const Tensor<T>& y_t, const Tensor<T>& y_s,
                        const std::vector<PriorDictionary>& dicts, const char* who) {
    if (y_t.rank() != 4 || y_s.rank() != 4)
        throw ShapeError(std::string(who) + ": probability maps must be [N,K,H,W]");
    if (y_t.dim(0) != y_s.dim(0) || y_t.dim(1) != y_s.dim(1))
        throw ShapeError(std::string(who) + ": batch/channel mismatch " + shape_str(y_t.shape()) +
                         " vs " + shape_str(y_s.shape()));
    if (dicts.size() != y_s.dim(0))
        throw ShapeError(std::string(who) + ": expected one dictionary per sample");
    for (const auto& d : dicts) {
        if (d.view1_h != y_s.dim(2) || d.view1_w != y_s.dim(3))
            throw ShapeError(std::string(who) + ": dictionary view-1 size " +
                             std::to_string(d.view1_h) + "x" + std::to_string(d.view1_w) +
                             " does not match student map " + shape_str(y_s.shape()));
        if (d.view2_h != y_t.dim(2) || d.view2_w != y_t.dim(3))
            throw ShapeError(std::string(who) + ": dictionary view-2 size does not match teacher map");
    }
}

template <typename T>
std::size_t total_matches(const std::vector<PriorDictionary>& dicts) {
    std::size_t m = 0;
    for (const auto& d : dicts) m += d.matched_count();
    return m;
}

}  // namespace detail

// Pixel-level consistency in its plain form: per matched pair (i -> j),
// cross-entropy of the student's pixel distribution at i against the
// teacher's at j, averaged over matched pairs across the batch. Unmatched
// pixels contribute nothing.
template <typename T>
Tensor<T> local_loss_plain(Tape<T>* tape, const Tensor<T>& y_t, const Tensor<T>& y_s,
                           const std::vector<PriorDictionary>& dicts) {
    detail::check_local_shapes(y_t, y_s, dicts, "local_loss_plain");
    const std::size_t m = detail::total_matches<T>(dicts);
    if (m == 0) {
        std::cerr << "[pgssl] warning: local_loss_plain has zero matched pixels\n";
        return Tensor<T>::scalar(T{0});
    }
    const std::size_t n = y_s.dim(0), k = y_s.dim(1);
    const std::size_t hw1 = y_s.dim(2) * y_s.dim(3), hw2 = y_t.dim(2) * y_t.dim(3);
    auto tv = y_t.values();
    auto sv = y_s.values();
    double acc = 0.0;
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < hw1; ++i) {
            const std::int32_t j = dicts[b].match[i];
            if (j == PriorDictionary::kNoMatch) continue;
            for (std::size_t c = 0; c < k; ++c)
                acc -= static_cast<double>(tv[(b * k + c) * hw2 + j]) *
                       std::log(static_cast<double>(sv[(b * k + c) * hw1 + i]) + kLogEps);
        }
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(m)));

    if (tracking(tape, y_s.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> ts = y_s, tt = y_t, to = out;
        tape->record([ts, tt, to, dicts, n, k, hw1, hw2, m]() mutable {
            const double g = to.grad()[0] / static_cast<double>(m);
            auto sv2 = ts.values();
            auto tv2 = tt.values();
            auto gs = ts.grad();
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t i = 0; i < hw1; ++i) {
                    const std::int32_t j = dicts[b].match[i];
                    if (j == PriorDictionary::kNoMatch) continue;
                    for (std::size_t c = 0; c < k; ++c)
                        gs[(b * k + c) * hw1 + i] -= static_cast<T>(
                            g * static_cast<double>(tv2[(b * k + c) * hw2 + j]) /
                            (static_cast<double>(sv2[(b * k + c) * hw1 + i]) + kLogEps));
                }
        });
    }
    return out;
}

// Stabilizer cross-entropies s_i for one sample: [K,H,W] maps, one value per
// matched pair in view-1 row-major order. Diagnostic/oracle surface; the
// fused loss below recomputes these internally.
template <typename T>
std::vector<double> stabilizer_terms(const Tensor<T>& delta_t, const Tensor<T>& delta_s,
                                     const PriorDictionary& dict) {
    if (delta_t.rank() != 3 || delta_s.rank() != 3 || delta_t.dim(0) != delta_s.dim(0))
        throw ShapeError("stabilizer_terms: expected [K,H,W] maps with matching K");
    if (dict.view1_h != delta_s.dim(1) || dict.view1_w != delta_s.dim(2) ||
        dict.view2_h != delta_t.dim(1) || dict.view2_w != delta_t.dim(2))
        throw ShapeError("stabilizer_terms: dictionary does not match map sizes");
    const std::size_t k = delta_t.dim(0);
    const std::size_t hw1 = delta_s.dim(1) * delta_s.dim(2);
    const std::size_t hw2 = delta_t.dim(1) * delta_t.dim(2);
    auto tv = delta_t.values();
    auto sv = delta_s.values();
    std::vector<double> out;
    out.reserve(dict.matched_count());
    for (std::size_t i = 0; i < hw1; ++i) {
        const std::int32_t j = dict.match[i];
        if (j == PriorDictionary::kNoMatch) continue;
        double s = 0.0;
        for (std::size_t c = 0; c < k; ++c)
            s -= static_cast<double>(tv[c * hw2 + j]) *
                 std::log(static_cast<double>(sv[c * hw1 + i]) + kLogEps);
        out.push_back(s);
    }
    return out;
}

// Complete local consistency loss: mean over matched pairs (i -> j) of
// (1 - U_j) * |c_i - s_i|, where c_i is the plain pixel cross-entropy and
// s_i the stabilizer term from the second image pushed through the same two
// augmentations. Teacher maps and U are constants. With outer_abs the
// absolute value instead wraps the weighted mean (the paper's intermediate
// form, kept for ablation study).
template <typename T>
Tensor<T> local_loss_full(Tape<T>* tape, const Tensor<T>& y_t, const Tensor<T>& y_s,
                          const Tensor<T>& delta_t, const Tensor<T>& delta_s, const Tensor<T>& u,
                          const std::vector<PriorDictionary>& dicts, bool outer_abs = false) {
    detail::check_local_shapes(y_t, y_s, dicts, "local_loss_full");
    if (!same_shape(y_t.shape(), delta_t.shape()) || !same_shape(y_s.shape(), delta_s.shape()))
        throw ShapeError("local_loss_full: stabilizer map shapes must match view maps");
    if (u.rank() != 4 || u.dim(0) != y_t.dim(0) || u.dim(1) != 1 || u.dim(2) != y_t.dim(2) ||
        u.dim(3) != y_t.dim(3))
        throw ShapeError("local_loss_full: uncertainty map must be [N,1,H2,W2], got " +
                         shape_str(u.shape()));
    for (const auto v : u.values())
        if (static_cast<double>(v) < 0.0 || static_cast<double>(v) > 1.0)
            throw ValueError("local_loss_full: uncertainty outside [0,1]: " +
                             std::to_string(static_cast<double>(v)));

    const std::size_t m = detail::total_matches<T>(dicts);
    if (m == 0) {
        std::cerr << "[pgssl] warning: local_loss_full has zero matched pixels\n";
        return Tensor<T>::scalar(T{0});
    }
    const std::size_t n = y_s.dim(0), k = y_s.dim(1);
    const std::size_t hw1 = y_s.dim(2) * y_s.dim(3), hw2 = y_t.dim(2) * y_t.dim(3);

    auto ytv = y_t.values();
    auto ysv = y_s.values();
    auto dtv = delta_t.values();
    auto dsv = delta_s.values();
    auto uv = u.values();

    double acc = 0.0;
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < hw1; ++i) {
            const std::int32_t j = dicts[b].match[i];
            if (j == PriorDictionary::kNoMatch) continue;
            double c_i = 0.0, s_i = 0.0;
            for (std::size_t c = 0; c < k; ++c) {
                c_i -= static_cast<double>(ytv[(b * k + c) * hw2 + j]) *
                       std::log(static_cast<double>(ysv[(b * k + c) * hw1 + i]) + kLogEps);
                s_i -= static_cast<double>(dtv[(b * k + c) * hw2 + j]) *
                       std::log(static_cast<double>(dsv[(b * k + c) * hw1 + i]) + kLogEps);
            }
            const double w = 1.0 - static_cast<double>(uv[b * hw2 + j]);
            acc += outer_abs ? w * (c_i - s_i) : w * std::abs(c_i - s_i);
        }
    acc /= static_cast<double>(m);
    if (outer_abs) acc = std::abs(acc);
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc));

    if (tracking(tape, y_s.requires_grad() || delta_s.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> tys = y_s, tyt = y_t, tds = delta_s, tdt = delta_t, tu = u, to = out;
        const double outer_sign = acc == 0.0 ? 0.0 : 1.0;  // d|x|/dx at the summed value
        tape->record([tys, tyt, tds, tdt, tu, to, dicts, n, k, hw1, hw2, m, outer_abs,
                      sum_before_abs = outer_abs ? (acc == 0.0 ? 0.0 : 0.0) : 0.0, outer_sign]() mutable {
            (void)sum_before_abs;
            const double gout = to.grad()[0] / static_cast<double>(m);
            auto ysv2 = tys.values();
            auto ytv2 = tyt.values();
            auto dsv2 = tds.values();
            auto dtv2 = tdt.values();
            auto uv2 = tu.values();
            const bool want_y = tys.requires_grad();
            const bool want_d = tds.requires_grad();
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t i = 0; i < hw1; ++i) {
                    const std::int32_t j = dicts[b].match[i];
                    if (j == PriorDictionary::kNoMatch) continue;
                    double c_i = 0.0, s_i = 0.0;
                    for (std::size_t c = 0; c < k; ++c) {
                        c_i -= static_cast<double>(ytv2[(b * k + c) * hw2 + j]) *
                               std::log(static_cast<double>(ysv2[(b * k + c) * hw1 + i]) + kLogEps);
                        s_i -= static_cast<double>(dtv2[(b * k + c) * hw2 + j]) *
                               std::log(static_cast<double>(dsv2[(b * k + c) * hw1 + i]) + kLogEps);
                    }
                    const double w = 1.0 - static_cast<double>(uv2[b * hw2 + j]);
                    double sgn;
                    if (outer_abs) {
                        sgn = outer_sign;  // sign of the outer sum; 0 at the kink
                    } else {
                        sgn = c_i > s_i ? 1.0 : (c_i < s_i ? -1.0 : 0.0);
                    }
                    const double coeff = gout * w * sgn;
                    if (coeff == 0.0) continue;
                    for (std::size_t c = 0; c < k; ++c) {
                        // d c_i / d y_s = -y_t / (y_s + eps); d s_i / d d_s analogous,
                        // entering with opposite sign through (c_i - s_i).
                        if (want_y)
                            tys.grad()[(b * k + c) * hw1 + i] -= static_cast<T>(
                                coeff * static_cast<double>(ytv2[(b * k + c) * hw2 + j]) /
                                (static_cast<double>(ysv2[(b * k + c) * hw1 + i]) + kLogEps));
                        if (want_d)
                            tds.grad()[(b * k + c) * hw1 + i] += static_cast<T>(
                                coeff * static_cast<double>(dtv2[(b * k + c) * hw2 + j]) /
                                (static_cast<double>(dsv2[(b * k + c) * hw1 + i]) + kLogEps));
                    }
                }
        });
    }
    return out;
}

// Total pretraining loss is the unweighted sum of the two terms.
template <typename T>
Tensor<T> total_loss(Tape<T>* tape, const Tensor<T>& global, const Tensor<T>& local) {
    return ops::add(tape, global, local);
}

// Normalized Shannon entropy of per-pixel distributions: U = H(p)/ln(K),
// clamped to [0,1]. Zero-probability terms contribute exactly zero.
template <typename T>
Tensor<T> normalized_entropy(const Tensor<T>& probs) {
    if (probs.rank() != 4) throw ShapeError("normalized_entropy: expected [N,K,H,W]");
    const std::size_t n = probs.dim(0), k = probs.dim(1), hw = probs.dim(2) * probs.dim(3);
    if (k < 2) throw ShapeError("normalized_entropy: need at least 2 classes");
    Tensor<T> u(Shape{n, 1, probs.dim(2), probs.dim(3)});
    auto pv = probs.values();
    auto uv = u.values();
    const double inv_ln_k = 1.0 / std::log(static_cast<double>(k));
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t s = 0; s < hw; ++s) {
            double h = 0.0;
            for (std::size_t c = 0; c < k; ++c) {
                const double p = pv[(b * k + c) * hw + s];
                if (p > 0.0) h -= p * std::log(p + kLogEps);
            }
            uv[b * hw + s] = static_cast<T>(std::clamp(h * inv_ln_k, 0.0, 1.0));
        }
    return u;
}

// Teacher uncertainty via MC dropout: `passes` stochastic forwards with
// dropout active, pixel-projected probability maps averaged, then the
// normalized entropy of the averaged prediction. Teacher batch-norm
// running buffers are snapshotted and restored, so probing leaves no trace.
template <typename T>
Tensor<T> uncertainty_map(const Backbone<T>& net, ParamSet<T>& teacher, const Tensor<T>& x,
                          int passes, double rate, Rng& rng) {
    if (passes < 1)
        throw ValueError("uncertainty_map: passes must be >= 1, got " + std::to_string(passes));

    std::vector<std::pair<std::string, std::vector<T>>> saved;
    for (auto& [name, t] : teacher.items())
        if (ParamSet<T>::is_buffer(name))
            saved.emplace_back(name, std::vector<T>(t.values().begin(), t.values().end()));

    std::vector<double> acc;
    Shape map_shape;
    for (int pass = 0; pass < passes; ++pass) {
        Rng pass_rng = rng.child();
        FwdCtx<T> ctx{nullptr, /*training=*/true, /*stochastic=*/true, &pass_rng, rate};
        auto feats = net.encode(ctx, teacher, x);
        Tensor<T> y = net.decode(ctx, teacher, feats);
        Tensor<T> p = net.project_pixel(ctx, teacher, y);
        if (acc.empty()) {
            acc.assign(p.numel(), 0.0);
            map_shape = p.shape();
        }
        auto pv = p.values();
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += static_cast<double>(pv[i]);
    }
    for (auto& [name, vals] : saved) {
        auto tv = teacher.at(name).values();
        std::copy(vals.begin(), vals.end(), tv.begin());
    }

    Tensor<T> mean_probs(map_shape);
    auto mv = mean_probs.values();
    const double inv = 1.0 / static_cast<double>(passes);
    for (std::size_t i = 0; i < mv.size(); ++i) mv[i] = static_cast<T>(acc[i] * inv);
    return normalized_entropy(mean_probs);
}

}  // namespace pgssl
