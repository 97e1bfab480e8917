#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "pgssl/conv.hpp"
#include "pgssl/ops.hpp"
#include "pgssl/rng.hpp"

namespace pgssl {

// Encoder-decoder backbone at desk scale: conv-bn-relu blocks with stride-2
// downsampling and one residual block per stage, nearest-neighbor upsampling
// with additive skips on the way back up. Stands in for a ResUnet-style
// network; every dimension is configurable.
struct BackboneConfig {
    std::size_t in_channels = 1;
    std::size_t base_width = 16;
    std::size_t depth = 2;
    std::size_t proj_dim_global = 64;  // global projector classes
    std::size_t proj_dim_pixel = 16;   // pixel projector classes
    double dropout_rate = 0.1;
    std::size_t seg_classes = 2;
    double proj_temperature = 1.0;

    void validate() const {
        if (in_channels == 0 || base_width == 0) throw ConfigError("backbone: zero width");
        if (depth < 2) throw ConfigError("backbone: depth must be >= 2");
        if (proj_dim_global < 2 || proj_dim_pixel < 2)
            throw ConfigError("backbone: projector dims must be >= 2");
        if (dropout_rate < 0.0 || dropout_rate >= 1.0)
            throw ConfigError("backbone: dropout rate must lie in [0,1)");
        if (seg_classes < 2) throw ConfigError("backbone: seg_classes must be >= 2");
        if (proj_temperature <= 0.0) throw ConfigError("backbone: temperature must be positive");
    }

    std::size_t stage_channels(std::size_t d) const { return base_width << d; }
    std::size_t bottleneck_channels() const { return stage_channels(depth); }
    std::size_t proj_hidden() const { return 2 * bottleneck_channels(); }
};

// Insertion-ordered named tensors; iteration order is deterministic, which
// keeps checkpoints and optimizer traversal reproducible.
template <typename T>
class ParamSet {
public:
    void add(std::string name, Tensor<T> t) {
        if (has(name)) throw ValueError("params: duplicate name '" + name + "'");
        items_.emplace_back(std::move(name), std::move(t));
    }

    bool has(const std::string& name) const {
        for (const auto& [n, t] : items_)
            if (n == name) return true;
        return false;
    }

    Tensor<T>& at(const std::string& name) {
        for (auto& [n, t] : items_)
            if (n == name) return t;
        throw ValueError("params: unknown name '" + name + "'");
    }
    const Tensor<T>& at(const std::string& name) const {
        for (const auto& [n, t] : items_)
            if (n == name) return t;
        throw ValueError("params: unknown name '" + name + "'");
    }

    std::vector<std::pair<std::string, Tensor<T>>>& items() { return items_; }
    const std::vector<std::pair<std::string, Tensor<T>>>& items() const { return items_; }
    std::size_t size() const { return items_.size(); }

    // Running statistics are state, not parameters: no gradients, no
    // optimizer updates.
    static bool is_buffer(const std::string& name) {
        return name.ends_with(".rmean") || name.ends_with(".rvar");
    }

    std::vector<std::pair<std::string, Tensor<T>>> trainable() {
        std::vector<std::pair<std::string, Tensor<T>>> out;
        for (auto& [n, t] : items_)
            if (!is_buffer(n)) out.emplace_back(n, t);
        return out;
    }

    void zero_grads() {
        for (auto& [n, t] : items_)
            if (t.requires_grad()) t.zero_grad();
    }

    void set_requires_grad(bool on) {
        for (auto& [n, t] : items_) t.set_requires_grad(!is_buffer(n) && on);
    }

    ParamSet clone() const {
        ParamSet out;
        for (const auto& [n, t] : items_) out.add(n, t.clone());
        return out;
    }

    bool schema_matches(const ParamSet& other) const {
        if (items_.size() != other.items_.size()) return false;
        for (std::size_t i = 0; i < items_.size(); ++i)
            if (items_[i].first != other.items_[i].first ||
                !same_shape(items_[i].second.shape(), other.items_[i].second.shape()))
                return false;
        return true;
    }
};

// Forward-pass context: autodiff tape (null disables recording), batch-norm
// mode, and dropout activity. Dropout layers sit after every encoder and
// decoder stage; they fire only when `stochastic` is set (MC-dropout passes
// and supervised fine-tuning). A non-negative dropout_rate overrides the
// backbone's configured rate.
template <typename T>
struct FwdCtx {
    Tape<T>* tape = nullptr;
    bool training = false;
    bool stochastic = false;
    Rng* rng = nullptr;
    double dropout_rate = -1.0;
};

template <typename T>
class Backbone {
public:
    explicit Backbone(BackboneConfig cfg) : cfg_(cfg) { cfg_.validate(); }

    const BackboneConfig& config() const { return cfg_; }

    // He-style centered uniform init, fan-in scaled. Draw order follows
    // schema order, so a fixed seed pins every weight.
    ParamSet<T> init_params(Rng& rng, bool with_projectors, bool with_seg_head) const {
        ParamSet<T> p;
        auto conv_w = [&](const std::string& name, std::size_t co, std::size_t ci, std::size_t k) {
            Tensor<T> w(Shape{co, ci, k, k}, true);
            const double limit = std::sqrt(6.0 / static_cast<double>(ci * k * k));
            auto wv = w.values();
            for (std::size_t i = 0; i < wv.size(); ++i)
                wv[i] = static_cast<T>(rng.uniform(-limit, limit));
            p.add(name, std::move(w));
        };
        auto fc_w = [&](const std::string& name, std::size_t o, std::size_t i) {
            Tensor<T> w(Shape{o, i}, true);
            const double limit = std::sqrt(6.0 / static_cast<double>(i));
            auto wv = w.values();
            for (std::size_t j = 0; j < wv.size(); ++j)
                wv[j] = static_cast<T>(rng.uniform(-limit, limit));
            p.add(name, std::move(w));
        };
        auto bias = [&](const std::string& name, std::size_t n) {
            p.add(name, Tensor<T>(Shape{n}, true));
        };
        auto bn = [&](const std::string& prefix, std::size_t c) {
            Tensor<T> g(Shape{c}, true);
            std::fill(g.values().begin(), g.values().end(), T{1});
            p.add(prefix + ".g", std::move(g));
            p.add(prefix + ".b", Tensor<T>(Shape{c}, true));
            p.add(prefix + ".rmean", Tensor<T>(Shape{c}, false));
            Tensor<T> rv(Shape{c}, false);
            std::fill(rv.values().begin(), rv.values().end(), T{1});
            p.add(prefix + ".rvar", std::move(rv));
        };

        conv_w("enc.stem.conv.w", cfg_.base_width, cfg_.in_channels, 3);
        bn("enc.stem.bn", cfg_.base_width);
        for (std::size_t d = 1; d <= cfg_.depth; ++d) {
            const std::string sd = std::to_string(d);
            conv_w("enc.down" + sd + ".conv.w", cfg_.stage_channels(d), cfg_.stage_channels(d - 1), 3);
            bn("enc.down" + sd + ".bn", cfg_.stage_channels(d));
            conv_w("enc.res" + sd + ".conv.w", cfg_.stage_channels(d), cfg_.stage_channels(d), 3);
            bn("enc.res" + sd + ".bn", cfg_.stage_channels(d));
        }
        for (std::size_t d = cfg_.depth; d >= 1; --d) {
            const std::string sd = std::to_string(d);
            conv_w("dec.up" + sd + ".proj.w", cfg_.stage_channels(d - 1), cfg_.stage_channels(d), 1);
            conv_w("dec.up" + sd + ".conv.w", cfg_.stage_channels(d - 1), cfg_.stage_channels(d - 1), 3);
            bn("dec.up" + sd + ".bn", cfg_.stage_channels(d - 1));
        }
        if (with_projectors) {
            fc_w("projg.fc1.w", cfg_.proj_hidden(), cfg_.bottleneck_channels());
            bn("projg.bn", cfg_.proj_hidden());
            fc_w("projg.fc2.w", cfg_.proj_dim_global, cfg_.proj_hidden());
            bias("projg.fc2.b", cfg_.proj_dim_global);
            conv_w("projp.conv1.w", cfg_.base_width, cfg_.base_width, 1);
            bn("projp.bn", cfg_.base_width);
            conv_w("projp.conv2.w", cfg_.proj_dim_pixel, cfg_.base_width, 1);
            bias("projp.conv2.b", cfg_.proj_dim_pixel);
        }
        if (with_seg_head) {
            conv_w("seg.conv.w", cfg_.seg_classes, cfg_.base_width, 1);
            bias("seg.conv.b", cfg_.seg_classes);
        }
        return p;
    }

    struct Features {
        Tensor<T> z;
        std::vector<Tensor<T>> skips;  // per stage, full resolution first
    };

    Features encode(const FwdCtx<T>& ctx, ParamSet<T>& p, const Tensor<T>& x) const {
        if (x.rank() != 4)
            throw ShapeError("encode: input must be [N,C,H,W], got " + shape_str(x.shape()));
        const std::size_t div = std::size_t{1} << cfg_.depth;
        if (x.dim(2) % div != 0 || x.dim(3) % div != 0)
            throw ShapeError("encode: spatial size " + std::to_string(x.dim(2)) + "x" +
                             std::to_string(x.dim(3)) + " not divisible by 2^depth = " +
                             std::to_string(div));
        Features f;
        Tensor<T> h = block(ctx, p, "enc.stem", x, 1);
        f.skips.push_back(h);
        for (std::size_t d = 1; d <= cfg_.depth; ++d) {
            const std::string sd = std::to_string(d);
            h = block(ctx, p, "enc.down" + sd, h, 2);
            // residual: relu(h + bn(conv(h)))
            Tensor<T> r = ops::conv2d(ctx.tape, h, p.at("enc.res" + sd + ".conv.w"), nullptr, 1, 1);
            r = bn_layer(ctx, p, "enc.res" + sd + ".bn", r);
            h = ops::relu(ctx.tape, ops::add(ctx.tape, h, r));
            h = drop(ctx, h);
            if (d < cfg_.depth) f.skips.push_back(h);
        }
        f.z = h;
        return f;
    }

    Tensor<T> decode(const FwdCtx<T>& ctx, ParamSet<T>& p, const Features& f) const {
        if (f.skips.size() != cfg_.depth)
            throw ShapeError("decode: expected " + std::to_string(cfg_.depth) + " skip maps, got " +
                             std::to_string(f.skips.size()));
        Tensor<T> h = f.z;
        for (std::size_t d = cfg_.depth; d >= 1; --d) {
            const std::string sd = std::to_string(d);
            Tensor<T> u = ops::conv2d(ctx.tape, h, p.at("dec.up" + sd + ".proj.w"), nullptr, 1, 0);
            u = ops::upsample_nearest2(ctx.tape, u);
            const Tensor<T>& skip = f.skips[d - 1];
            if (!same_shape(u.shape(), skip.shape()))
                throw ShapeError("decode: skip shape " + shape_str(skip.shape()) +
                                 " does not match upsampled " + shape_str(u.shape()));
            Tensor<T> m = ops::add(ctx.tape, u, skip);
            m = ops::conv2d(ctx.tape, m, p.at("dec.up" + sd + ".conv.w"), nullptr, 1, 1);
            m = bn_layer(ctx, p, "dec.up" + sd + ".bn", m);
            h = drop(ctx, ops::relu(ctx.tape, m));
        }
        return h;
    }

    // Global average pool -> 2-layer MLP with batch-norm -> softmax.
    Tensor<T> project_global(const FwdCtx<T>& ctx, ParamSet<T>& p, const Tensor<T>& z) const {
        Tensor<T> g = ops::global_avg_pool(ctx.tape, z);
        g = ops::linear(ctx.tape, g, p.at("projg.fc1.w"), nullptr);
        g = bn_layer(ctx, p, "projg.bn", g);
        g = ops::relu(ctx.tape, g);
        const Tensor<T>& b = p.at("projg.fc2.b");
        g = ops::linear(ctx.tape, g, p.at("projg.fc2.w"), &b);
        if (cfg_.proj_temperature != 1.0)
            g = ops::scale(ctx.tape, g, static_cast<T>(1.0 / cfg_.proj_temperature));
        return ops::softmax(ctx.tape, g, 1);
    }

    // 1x1 conv head with a per-pixel softmax over proj_dim_pixel channels.
    Tensor<T> project_pixel(const FwdCtx<T>& ctx, ParamSet<T>& p, const Tensor<T>& y) const {
        Tensor<T> h = ops::conv2d(ctx.tape, y, p.at("projp.conv1.w"), nullptr, 1, 0);
        h = bn_layer(ctx, p, "projp.bn", h);
        h = ops::relu(ctx.tape, h);
        const Tensor<T>& b = p.at("projp.conv2.b");
        h = ops::conv2d(ctx.tape, h, p.at("projp.conv2.w"), &b, 1, 0);
        if (cfg_.proj_temperature != 1.0)
            h = ops::scale(ctx.tape, h, static_cast<T>(1.0 / cfg_.proj_temperature));
        return ops::softmax(ctx.tape, h, 1);
    }

    Tensor<T> segment(Tape<T>* tape, ParamSet<T>& p, const Tensor<T>& y) const {
        const Tensor<T>& b = p.at("seg.conv.b");
        return ops::conv2d(tape, y, p.at("seg.conv.w"), &b, 1, 0);
    }

private:
    Tensor<T> block(const FwdCtx<T>& ctx, ParamSet<T>& p, const std::string& prefix,
                    const Tensor<T>& x, int stride) const {
        Tensor<T> h = ops::conv2d(ctx.tape, x, p.at(prefix + ".conv.w"), nullptr, stride, 1);
        h = bn_layer(ctx, p, prefix + ".bn", h);
        return ops::relu(ctx.tape, h);
    }

    Tensor<T> bn_layer(const FwdCtx<T>& ctx, ParamSet<T>& p, const std::string& prefix,
                       const Tensor<T>& x) const {
        return ops::batchnorm(ctx.tape, x, p.at(prefix + ".g"), p.at(prefix + ".b"),
                              p.at(prefix + ".rmean"), p.at(prefix + ".rvar"), ctx.training);
    }

    Tensor<T> drop(const FwdCtx<T>& ctx, const Tensor<T>& x) const {
        if (!ctx.stochastic) return x;
        const double rate = ctx.dropout_rate >= 0.0 ? ctx.dropout_rate : cfg_.dropout_rate;
        if (rate == 0.0) return x;
        if (ctx.rng == nullptr) throw ValueError("backbone: stochastic forward needs an rng");
        return ops::dropout(ctx.tape, x, rate, *ctx.rng, true);
    }

    BackboneConfig cfg_;
};

// Student/teacher pair sharing one schema. The teacher starts as an exact
// copy and never tracks gradients; only the EMA update may write it.
template <typename T>
struct DualNetworkState {
    ParamSet<T> student;
    ParamSet<T> teacher;

    static DualNetworkState init(const Backbone<T>& net, Rng& rng) {
        DualNetworkState s;
        s.student = net.init_params(rng, /*with_projectors=*/true, /*with_seg_head=*/false);
        s.teacher = s.student.clone();
        s.teacher.set_requires_grad(false);
        return s;
    }
};

}  // namespace pgssl
