#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "pgssl/rng.hpp"
#include "pgssl/tensor.hpp"

namespace pgssl {

// Ranges the sampler draws from. Crop scale must sit inside (0,1];
// photometric ranges must be positive.
struct AugConfig {
    double crop_scale_lo = 0.6;
    double crop_scale_hi = 1.0;
    std::size_t out_size = 32;  // square view side
    bool rot90 = true;
    double hflip_prob = 0.5;
    double vflip_prob = 0.5;
    double contrast_lo = 0.9;
    double contrast_hi = 1.1;
    double gamma_lo = 0.8;
    double gamma_hi = 1.25;

    void validate() const {
        if (!(crop_scale_lo > 0.0 && crop_scale_lo <= crop_scale_hi && crop_scale_hi <= 1.0))
            throw ConfigError("aug.crop_scale must satisfy 0 < lo <= hi <= 1");
        if (out_size == 0) throw ConfigError("aug.out_size must be positive");
        if (hflip_prob < 0.0 || hflip_prob > 1.0 || vflip_prob < 0.0 || vflip_prob > 1.0)
            throw ConfigError("aug flip probabilities must lie in [0,1]");
        if (!(contrast_lo > 0.0 && contrast_lo <= contrast_hi))
            throw ConfigError("aug.contrast must satisfy 0 < lo <= hi");
        if (!(gamma_lo > 0.0 && gamma_lo <= gamma_hi))
            throw ConfigError("aug.gamma must satisfy 0 < lo <= hi");
    }
};

// One sampled augmentation, fully parametric and replayable from `seed`.
// Application order is fixed: crop -> nearest-neighbor rescale to
// (out_h,out_w) -> rotation (CCW multiples of 90) -> hflip -> vflip ->
// contrast -> gamma. The geometric half is exactly invertible on the
// integer grid; the photometric half never moves coordinates.
struct AugmentationParams {
    std::size_t src_h = 0, src_w = 0;
    std::size_t crop_top = 0, crop_left = 0, crop_h = 0, crop_w = 0;
    std::size_t out_h = 0, out_w = 0;
    int rotation = 0;  // degrees CCW: 0, 90, 180, 270
    bool hflip = false;
    bool vflip = false;
    double contrast = 1.0;
    double gamma = 1.0;
    std::uint64_t seed = 0;

    static AugmentationParams identity(std::size_t h, std::size_t w) {
        AugmentationParams p;
        p.src_h = h;
        p.src_w = w;
        p.crop_h = h;
        p.crop_w = w;
        p.out_h = h;
        p.out_w = w;
        return p;
    }

    void validate() const {
        if (crop_h == 0 || crop_w == 0 || out_h == 0 || out_w == 0)
            throw ValueError("augmentation: empty crop or view");
        if (crop_top + crop_h > src_h || crop_left + crop_w > src_w)
            throw ValueError("augmentation: crop rectangle exceeds source bounds");
        if (rotation != 0 && rotation != 90 && rotation != 180 && rotation != 270)
            throw ValueError("augmentation: rotation must be a multiple of 90 in [0,270]");
        if ((rotation == 90 || rotation == 270) && out_h != out_w)
            throw ValueError("augmentation: 90/270 degree rotation requires a square view");
        if (contrast <= 0.0 || gamma <= 0.0)
            throw ValueError("augmentation: contrast and gamma must be positive");
    }

    bool geometric_equal(const AugmentationParams& o) const {
        return src_h == o.src_h && src_w == o.src_w && crop_top == o.crop_top &&
               crop_left == o.crop_left && crop_h == o.crop_h && crop_w == o.crop_w &&
               out_h == o.out_h && out_w == o.out_w && rotation == o.rotation &&
               hflip == o.hflip && vflip == o.vflip;
    }

    bool operator==(const AugmentationParams& o) const {
        return geometric_equal(o) && contrast == o.contrast && gamma == o.gamma && seed == o.seed;
    }
};

// Deterministic field draws for one record. Draw order is part of the
// record's replay contract; do not reorder.
inline AugmentationParams augmentation_from_seed(std::uint64_t seed, const AugConfig& cfg,
                                                 std::size_t src_h, std::size_t src_w) {
    cfg.validate();
    if (src_h == 0 || src_w == 0) throw ValueError("augmentation: empty source image");
    Rng rng(seed);
    AugmentationParams p;
    p.seed = seed;
    p.src_h = src_h;
    p.src_w = src_w;
    const double s = rng.uniform(cfg.crop_scale_lo, cfg.crop_scale_hi);
    p.crop_h = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::lround(s * static_cast<double>(src_h))), 1, src_h);
    p.crop_w = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::lround(s * static_cast<double>(src_w))), 1, src_w);
    p.crop_top = static_cast<std::size_t>(rng.uniform_int(src_h - p.crop_h + 1));
    p.crop_left = static_cast<std::size_t>(rng.uniform_int(src_w - p.crop_w + 1));
    p.out_h = cfg.out_size;
    p.out_w = cfg.out_size;
    if (cfg.rot90)
        p.rotation = 90 * static_cast<int>(rng.uniform_int(4));
    p.hflip = rng.bernoulli(cfg.hflip_prob);
    p.vflip = rng.bernoulli(cfg.vflip_prob);
    p.contrast = rng.uniform(cfg.contrast_lo, cfg.contrast_hi);
    p.gamma = rng.uniform(cfg.gamma_lo, cfg.gamma_hi);
    p.validate();
    return p;
}

inline AugmentationParams sample_augmentation(Rng& rng, const AugConfig& cfg, std::size_t src_h,
                                              std::size_t src_w) {
    return augmentation_from_seed(rng.next_u64(), cfg, src_h, src_w);
}

namespace detail {

// Position map of k CCW quarter-turns: where does pre-rotation pixel (r,c)
// land? k odd requires a square grid (validated upstream).
inline std::pair<std::size_t, std::size_t> rotate_pos(std::size_t r, std::size_t c, int rotation,
                                                      std::size_t h, std::size_t w) {
    switch (rotation) {
        case 0: return {r, c};
        case 90: return {w - 1 - c, r};
        case 180: return {h - 1 - r, w - 1 - c};
        case 270: return {c, h - 1 - r};
        default: throw ValueError("augmentation: bad rotation");
    }
}

inline std::pair<std::size_t, std::size_t> unrotate_pos(std::size_t r, std::size_t c, int rotation,
                                                        std::size_t h, std::size_t w) {
    // Inverse of rotate_pos on the final grid of size (h,w) == pre-rotation
    // size for even rotations and the transpose for odd (square anyway).
    switch (rotation) {
        case 0: return {r, c};
        case 90: return {c, w - 1 - r};
        case 180: return {h - 1 - r, w - 1 - c};
        case 270: return {h - 1 - c, r};
        default: throw ValueError("augmentation: bad rotation");
    }
}

}  // namespace detail

// Source pixel whose value lands at view pixel (r,c): inverts the flips,
// the rotation, and the floor-based nearest-neighbor rescale, in that
// order. Never misses for in-bounds coordinates because the crop lies
// inside the source.
inline std::pair<std::size_t, std::size_t> map_coordinate(const AugmentationParams& p,
                                                          std::size_t r, std::size_t c) {
    p.validate();
    if (r >= p.out_h || c >= p.out_w)
        throw ValueError("map_coordinate: view pixel (" + std::to_string(r) + "," +
                         std::to_string(c) + ") outside view " + std::to_string(p.out_h) + "x" +
                         std::to_string(p.out_w));
    std::size_t rr = p.vflip ? p.out_h - 1 - r : r;
    std::size_t cc = p.hflip ? p.out_w - 1 - c : c;
    auto [pr, pc] = detail::unrotate_pos(rr, cc, p.rotation, p.out_h, p.out_w);
    const std::size_t src_r = p.crop_top + pr * p.crop_h / p.out_h;
    const std::size_t src_c = p.crop_left + pc * p.crop_w / p.out_w;
    return {src_r, src_c};
}

// Forward image of a source pixel under the augmentation, or nullopt when
// the pixel is cropped away or skipped by downscaling. When upscaling
// duplicates a source pixel, the canonical representative is the smallest
// pre-rotation index that floor-maps back to it.
inline std::optional<std::pair<std::size_t, std::size_t>> forward_coordinate(
    const AugmentationParams& p, std::size_t src_r, std::size_t src_c) {
    p.validate();
    if (src_r < p.crop_top || src_r >= p.crop_top + p.crop_h || src_c < p.crop_left ||
        src_c >= p.crop_left + p.crop_w)
        return std::nullopt;
    const std::size_t dr = src_r - p.crop_top;
    const std::size_t dc = src_c - p.crop_left;
    const std::size_t vr = (dr * p.out_h + p.crop_h - 1) / p.crop_h;  // ceil
    const std::size_t vc = (dc * p.out_w + p.crop_w - 1) / p.crop_w;
    if (vr >= p.out_h || vr * p.crop_h >= (dr + 1) * p.out_h) return std::nullopt;
    if (vc >= p.out_w || vc * p.crop_w >= (dc + 1) * p.out_w) return std::nullopt;
    auto [rr, cc] = detail::rotate_pos(vr, vc, p.rotation, p.out_h, p.out_w);
    if (p.hflip) cc = p.out_w - 1 - cc;
    if (p.vflip) rr = p.out_h - 1 - rr;
    return std::make_pair(rr, cc);
}

// Geometric part only: crop, rescale, rotate, flip. Used on masks and by
// oracles; values move but are never altered.
template <typename T>
Tensor<T> apply_geometric(const Tensor<T>& image, const AugmentationParams& p) {
    p.validate();
    if (image.rank() != 3)
        throw ShapeError("apply_augmentation: image must be [C,H,W], got " + shape_str(image.shape()));
    if (image.dim(1) != p.src_h || image.dim(2) != p.src_w)
        throw ValueError("apply_augmentation: params were sampled for a " + std::to_string(p.src_h) +
                         "x" + std::to_string(p.src_w) + " source, image is " +
                         std::to_string(image.dim(1)) + "x" + std::to_string(image.dim(2)));
    const std::size_t c = image.dim(0);
    Tensor<T> out(Shape{c, p.out_h, p.out_w});
    auto iv = image.values();
    auto ov = out.values();
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t r = 0; r < p.out_h; ++r)
            for (std::size_t col = 0; col < p.out_w; ++col) {
                auto [sr, sc] = map_coordinate(p, r, col);
                ov[(ch * p.out_h + r) * p.out_w + col] = iv[(ch * p.src_h + sr) * p.src_w + sc];
            }
    return out;
}

// Full augmentation. Contrast multiplies deviations about the view mean;
// gamma acts on min-max normalized values and restores the original range.
template <typename T>
Tensor<T> apply_augmentation(const Tensor<T>& image, const AugmentationParams& p) {
    Tensor<T> out = apply_geometric(image, p);
    auto ov = out.values();
    if (p.contrast != 1.0) {
        double mean = 0.0;
        for (std::size_t i = 0; i < ov.size(); ++i) mean += static_cast<double>(ov[i]);
        mean /= static_cast<double>(ov.size());
        for (std::size_t i = 0; i < ov.size(); ++i)
            ov[i] = static_cast<T>(mean + p.contrast * (static_cast<double>(ov[i]) - mean));
    }
    if (p.gamma != 1.0) {
        double lo = ov[0], hi = ov[0];
        for (std::size_t i = 1; i < ov.size(); ++i) {
            lo = std::min(lo, static_cast<double>(ov[i]));
            hi = std::max(hi, static_cast<double>(ov[i]));
        }
        if (hi > lo) {
            const double range = hi - lo;
            for (std::size_t i = 0; i < ov.size(); ++i)
                ov[i] = static_cast<T>(
                    lo + range * std::pow((static_cast<double>(ov[i]) - lo) / range, p.gamma));
        }
    }
    return out;
}

// Pixel correspondence between two views of the same source image:
// entry i (view-1 linear index) holds the view-2 linear index showing the
// same source pixel, or kNoMatch. Construction is O(view pixels), lookup
// O(1). Cropping and down-scaling legitimately leave pixels unmatched.
struct PriorDictionary {
    static constexpr std::int32_t kNoMatch = -1;

    std::size_t view1_h = 0, view1_w = 0;
    std::size_t view2_h = 0, view2_w = 0;
    std::vector<std::int32_t> match;

    std::int32_t at(std::size_t r, std::size_t c) const { return match[r * view1_w + c]; }

    std::size_t matched_count() const {
        std::size_t n = 0;
        for (std::int32_t m : match)
            if (m != kNoMatch) ++n;
        return n;
    }
};

inline PriorDictionary build_correspondence(const AugmentationParams& p1,
                                            const AugmentationParams& p2) {
    p1.validate();
    p2.validate();
    if (p1.src_h != p2.src_h || p1.src_w != p2.src_w)
        throw ValueError("build_correspondence: params reference different source sizes");
    PriorDictionary d;
    d.view1_h = p1.out_h;
    d.view1_w = p1.out_w;
    d.view2_h = p2.out_h;
    d.view2_w = p2.out_w;
    d.match.assign(p1.out_h * p1.out_w, PriorDictionary::kNoMatch);
    for (std::size_t r = 0; r < p1.out_h; ++r)
        for (std::size_t c = 0; c < p1.out_w; ++c) {
            auto [sr, sc] = map_coordinate(p1, r, c);
            if (auto j = forward_coordinate(p2, sr, sc))
                d.match[r * p1.out_w + c] =
                    static_cast<std::int32_t>(j->first * p2.out_w + j->second);
        }
    return d;
}

}  // namespace pgssl
