#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "coopgen/rng.hpp"
#include "coopgen/tensor.hpp"

namespace coopgen {

// Aligned (target, condition) pairs. Targets are normalized to [-1, 1].
template <typename T>
struct CondDataset {
    TensorT<T> targets;     // [N, ...]
    TensorT<T> conditions;  // [N, ...]
    bool cond_onehot = true;
    int num_classes = 0;

    std::int64_t size() const { return targets.empty() ? 0 : targets.dim(0); }

    std::pair<TensorT<T>, TensorT<T>> slice(std::span<const std::int64_t> idx) const {
        const std::int64_t yrow = targets.numel() / targets.dim(0);
        const std::int64_t crow = conditions.numel() / conditions.dim(0);
        Shape ys = targets.shape(), cs = conditions.shape();
        ys[0] = static_cast<std::int64_t>(idx.size());
        cs[0] = static_cast<std::int64_t>(idx.size());
        TensorT<T> y(ys), c(cs);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            std::copy_n(targets.data() + idx[i] * yrow, yrow, y.data() + static_cast<std::int64_t>(i) * yrow);
            std::copy_n(conditions.data() + idx[i] * crow, crow, c.data() + static_cast<std::int64_t>(i) * crow);
        }
        return {std::move(y), std::move(c)};
    }
};

// Synthetic conditional families with exact density oracles.
struct ToySpec {
    std::string family = "gauss_mix";  // gauss_mix | ring | glyphs
    int k = 3;                         // number of classes
    int dim = 2;                       // gauss_mix / ring target dimension (2 for ring)
    std::vector<std::vector<double>> means;  // gauss_mix per-class means
    double class_std = 0.1;

    double ring_radius0 = 0.35;  // ring: class k sits on radius r0 + k*step
    double ring_radius_step = 0.25;
    double ring_std = 0.04;
    int ring_modes = 8;  // Gaussian bumps forming each ring

    int glyph_size = 8;     // glyphs: K=4 binary templates, scaled
    int glyph_max_shift = -1;  // -1: size/16

    std::uint64_t seed = 0;

    void validate() const {
        if (family != "gauss_mix" && family != "ring" && family != "glyphs")
            throw ConfigError("toy: unknown family '" + family + "'");
        if (k < 1) throw ConfigError("toy: k must be >= 1");
        if (family == "gauss_mix") {
            if (static_cast<int>(means.size()) != k) throw ConfigError("toy: need one mean per class");
            for (const auto& m : means)
                if (static_cast<int>(m.size()) != dim) throw ConfigError("toy: mean dimension mismatch");
            if (class_std <= 0) throw ConfigError("toy: class_std must be positive");
        }
        if (family == "ring" && dim != 2) throw ConfigError("toy: ring family is 2-d");
        if (family == "glyphs") {
            if (k != 4) throw ConfigError("toy: glyph family has exactly 4 classes");
            if (glyph_size < 8 || glyph_size % 8 != 0) throw ConfigError("toy: glyph_size must be a multiple of 8");
        }
    }
};

template <typename T>
struct ToyData {
    CondDataset<T> data;
    // exact log density (gauss_mix, ring) or log mass (glyphs) of y given class
    std::function<double(std::span<const double>, int)> log_density;
};

namespace detail {

inline double log_gauss_iso(std::span<const double> y, std::span<const double> mu, double std_dev) {
    const double d = static_cast<double>(y.size());
    double q = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double r = y[i] - (mu.empty() ? 0.0 : mu[i]);
        q += r * r;
    }
    return -0.5 * q / (std_dev * std_dev) - 0.5 * d * std::log(2.0 * 3.14159265358979323846 * std_dev * std_dev);
}

// 8x8 binary glyph templates: box, bar, seven, ell
inline const std::array<std::array<const char*, 8>, 4>& glyph_templates() {
    static const std::array<std::array<const char*, 8>, 4> t = {{
        {{"........", ".######.", ".#....#.", ".#....#.", ".#....#.", ".#....#.", ".######.", "........"}},
        {{"...##...", "..###...", "...##...", "...##...", "...##...", "...##...", "..####..", "........"}},
        {{".######.", ".....#..", "....#...", "...#....", "...#....", "..#.....", "..#.....", "........"}},
        {{"..#.....", "..#.....", "..#.....", "..#.....", "..#.....", "..#####.", "........", "........"}},
    }};
    return t;
}

// glyph class k at integer offset (dy, dx), values in {-1, +1}
inline void render_glyph(double* out, int size, int cls, int dy, int dx) {
    const auto& tpl = glyph_templates()[static_cast<std::size_t>(cls)];
    const int scale = size / 8;
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            int sy = y - dy, sx = x - dx;
            bool on = false;
            if (sy >= 0 && sy < size && sx >= 0 && sx < size) on = tpl[static_cast<std::size_t>(sy / scale)][static_cast<std::size_t>(sx / scale)] == '#';
            out[y * size + x] = on ? 1.0 : -1.0;
        }
}

}  // namespace detail

inline int glyph_shift_range(const ToySpec& spec) {
    return spec.glyph_max_shift < 0 ? spec.glyph_size / 16 : spec.glyph_max_shift;
}

// Draws n i.i.d. pairs with uniformly sampled class labels and returns the
// exact conditional density of the generating process.
template <typename T>
ToyData<T> generate_toy(const ToySpec& spec, std::int64_t n) {
    spec.validate();
    if (n < 1) throw ConfigError("generate_toy: n must be >= 1");
    RngStream rng(spec.seed);
    ToyData<T> out;
    out.data.cond_onehot = true;
    out.data.num_classes = spec.k;
    out.data.conditions = TensorT<T>({n, spec.k});

    if (spec.family == "gauss_mix") {
        out.data.targets = TensorT<T>({n, spec.dim});
        for (std::int64_t i = 0; i < n; ++i) {
            const int cls = static_cast<int>(rng.uniform_int(spec.k));
            out.data.conditions.at2(i, cls) = T(1);
            for (int d = 0; d < spec.dim; ++d)
                out.data.targets.at2(i, d) =
                    static_cast<T>(spec.means[static_cast<std::size_t>(cls)][static_cast<std::size_t>(d)] +
                                   spec.class_std * rng.normal());
        }
        auto means = spec.means;
        auto sd = spec.class_std;
        out.log_density = [means, sd](std::span<const double> y, int cls) {
            const auto& mu = means[static_cast<std::size_t>(cls)];
            return detail::log_gauss_iso(y, {mu.data(), mu.size()}, sd);
        };
    } else if (spec.family == "ring") {
        out.data.targets = TensorT<T>({n, 2});
        const int m = spec.ring_modes;
        for (std::int64_t i = 0; i < n; ++i) {
            const int cls = static_cast<int>(rng.uniform_int(spec.k));
            out.data.conditions.at2(i, cls) = T(1);
            const double r = spec.ring_radius0 + cls * spec.ring_radius_step;
            const int j = static_cast<int>(rng.uniform_int(m));
            const double ang = 2.0 * 3.14159265358979323846 * j / m;
            out.data.targets.at2(i, 0) = static_cast<T>(r * std::cos(ang) + spec.ring_std * rng.normal());
            out.data.targets.at2(i, 1) = static_cast<T>(r * std::sin(ang) + spec.ring_std * rng.normal());
        }
        const double r0 = spec.ring_radius0, rs = spec.ring_radius_step, sd = spec.ring_std;
        out.log_density = [r0, rs, sd, m](std::span<const double> y, int cls) {
            const double r = r0 + cls * rs;
            double mx = -1e300;
            std::vector<double> terms(static_cast<std::size_t>(m));
            for (int j = 0; j < m; ++j) {
                const double ang = 2.0 * 3.14159265358979323846 * j / m;
                const double mu[2] = {r * std::cos(ang), r * std::sin(ang)};
                terms[static_cast<std::size_t>(j)] = detail::log_gauss_iso(y, {mu, 2}, sd);
                mx = std::max(mx, terms[static_cast<std::size_t>(j)]);
            }
            double s = 0;
            for (double t : terms) s += std::exp(t - mx);
            return mx + std::log(s / m);
        };
    } else {  // glyphs
        const int size = spec.glyph_size;
        const int shift = glyph_shift_range(spec);
        out.data.targets = TensorT<T>({n, 1, size, size});
        std::vector<double> buf(static_cast<std::size_t>(size) * size);
        for (std::int64_t i = 0; i < n; ++i) {
            const int cls = static_cast<int>(rng.uniform_int(spec.k));
            out.data.conditions.at2(i, cls) = T(1);
            const int dy = static_cast<int>(rng.uniform_int(2 * shift + 1)) - shift;
            const int dx = static_cast<int>(rng.uniform_int(2 * shift + 1)) - shift;
            detail::render_glyph(buf.data(), size, cls, dy, dx);
            for (std::int64_t p = 0; p < size * size; ++p)
                out.data.targets[i * size * size + p] = static_cast<T>(buf[static_cast<std::size_t>(p)]);
        }
        out.log_density = [size, shift](std::span<const double> y, int cls) {
            // discrete family: uniform mass over the shift grid
            std::vector<double> buf(static_cast<std::size_t>(size) * size);
            const double mass = 1.0 / ((2 * shift + 1) * (2 * shift + 1));
            for (int dy = -shift; dy <= shift; ++dy)
                for (int dx = -shift; dx <= shift; ++dx) {
                    detail::render_glyph(buf.data(), size, cls, dy, dx);
                    bool match = true;
                    for (std::size_t p = 0; p < buf.size() && match; ++p)
                        if (std::abs(y[p] - buf[p]) > 1e-9) match = false;
                    if (match) return std::log(mass);
                }
            return -1e300;
        };
    }
    return out;
}

// ---- occlusion -------------------------------------------------------------

template <typename T>
struct OccludeResult {
    TensorT<T> condition;      // image with the hole zeroed
    TensorT<double> mask;      // 1 inside the hole (free to update)
};

// Zeroes the rectangle [top, top+hh) x [left, left+ww) of every image in the
// batch [n,c,h,w]; the mask marks the hole.
template <typename T>
OccludeResult<T> occlude(const TensorT<T>& y, std::int64_t top, std::int64_t left, std::int64_t hh, std::int64_t ww) {
    if (y.rank() != 4) throw ShapeError("occlude: expected [n,c,h,w]");
    const std::int64_t h = y.dim(2), w = y.dim(3);
    if (top < 0 || left < 0 || hh < 0 || ww < 0 || top + hh > h || left + ww > w)
        throw ShapeError("occlude: mask rectangle out of bounds");
    OccludeResult<T> r;
    r.condition = y;
    r.mask = TensorT<double>(y.shape());
    for (std::int64_t n = 0; n < y.dim(0); ++n)
        for (std::int64_t c = 0; c < y.dim(1); ++c)
            for (std::int64_t i = top; i < top + hh; ++i)
                for (std::int64_t j = left; j < left + ww; ++j) {
                    r.condition.at4(n, c, i, j) = T(0);
                    r.mask.at4(n, c, i, j) = 1.0;
                }
    return r;
}

// Centrally placed square hole (the recovery-task geometry: hole side is half
// the image side by default).
template <typename T>
OccludeResult<T> occlude_center(const TensorT<T>& y, std::int64_t hole) {
    if (y.rank() != 4) throw ShapeError("occlude_center: expected [n,c,h,w]");
    const std::int64_t h = y.dim(2), w = y.dim(3);
    return occlude(y, (h - hole) / 2, (w - hole) / 2, hole, hole);
}

// ---- augmentation ----------------------------------------------------------

template <typename T>
TensorT<T> resize_image(const TensorT<T>& img, std::int64_t nh, std::int64_t nw, bool nearest) {
    if (img.rank() != 3) throw ShapeError("resize_image: expected [c,h,w]");
    const std::int64_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
    TensorT<T> out({c, nh, nw});
    for (std::int64_t ci = 0; ci < c; ++ci)
        for (std::int64_t i = 0; i < nh; ++i)
            for (std::int64_t j = 0; j < nw; ++j) {
                const double sy = (i + 0.5) * h / nh - 0.5;
                const double sx = (j + 0.5) * w / nw - 0.5;
                if (nearest) {
                    auto yy = std::clamp<std::int64_t>(std::llround(sy), 0, h - 1);
                    auto xx = std::clamp<std::int64_t>(std::llround(sx), 0, w - 1);
                    out[(ci * nh + i) * nw + j] = img[(ci * h + yy) * w + xx];
                } else {
                    const auto y0 = std::clamp<std::int64_t>(static_cast<std::int64_t>(std::floor(sy)), 0, h - 1);
                    const auto x0 = std::clamp<std::int64_t>(static_cast<std::int64_t>(std::floor(sx)), 0, w - 1);
                    const auto y1 = std::min<std::int64_t>(y0 + 1, h - 1);
                    const auto x1 = std::min<std::int64_t>(x0 + 1, w - 1);
                    const double fy = std::clamp(sy - y0, 0.0, 1.0), fx = std::clamp(sx - x0, 0.0, 1.0);
                    const double v = (1 - fy) * ((1 - fx) * img[(ci * h + y0) * w + x0] + fx * img[(ci * h + y0) * w + x1]) +
                                     fy * ((1 - fx) * img[(ci * h + y1) * w + x0] + fx * img[(ci * h + y1) * w + x1]);
                    out[(ci * nh + i) * nw + j] = static_cast<T>(v);
                }
            }
    return out;
}

template <typename T>
TensorT<T> crop_image(const TensorT<T>& img, std::int64_t top, std::int64_t left, std::int64_t h, std::int64_t w) {
    const std::int64_t c = img.dim(0);
    if (top < 0 || left < 0 || top + h > img.dim(1) || left + w > img.dim(2))
        throw ShapeError("crop_image: rectangle out of bounds");
    TensorT<T> out({c, h, w});
    for (std::int64_t ci = 0; ci < c; ++ci)
        for (std::int64_t i = 0; i < h; ++i)
            std::copy_n(&img[(ci * img.dim(1) + top + i) * img.dim(2) + left], w, &out[(ci * h + i) * w]);
    return out;
}

template <typename T>
TensorT<T> mirror_image(const TensorT<T>& img) {
    const std::int64_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
    TensorT<T> out(img.shape());
    for (std::int64_t ci = 0; ci < c; ++ci)
        for (std::int64_t i = 0; i < h; ++i)
            for (std::int64_t j = 0; j < w; ++j) out[(ci * h + i) * w + j] = img[(ci * h + i) * w + (w - 1 - j)];
    return out;
}

struct AugmentDraw {
    std::int64_t oy = 0, ox = 0;
    bool flip = false;
};

inline AugmentDraw draw_augment(RngStream& rng, std::int64_t range) {
    AugmentDraw d;
    d.oy = range > 0 ? rng.uniform_int(range + 1) : 0;
    d.ox = range > 0 ? rng.uniform_int(range + 1) : 0;
    d.flip = rng.bernoulli(0.5);
    return d;
}

inline std::int64_t jitter_extent(std::int64_t side) {
    // the classic 256 -> 286 enlargement, applied proportionally
    return (side * 286 + 128) / 256;
}

// Random jitter (enlarge then crop back) and mirroring, with the identical
// geometric transform applied to the target and the condition.
template <typename T>
std::pair<TensorT<T>, TensorT<T>> augment_pair(const TensorT<T>& y, const TensorT<T>& c, RngStream& rng,
                                               bool nearest_target = false, bool nearest_cond = true) {
    if (y.rank() != 3 || c.rank() != 3) throw ShapeError("augment_pair: expected [c,h,w] images");
    if (y.dim(1) != c.dim(1) || y.dim(2) != c.dim(2)) throw ShapeError("augment_pair: spatial extents differ");
    const std::int64_t h = y.dim(1), w = y.dim(2);
    const std::int64_t nh = jitter_extent(h), nw = jitter_extent(w);
    AugmentDraw d;
    d.oy = rng.uniform_int(nh - h + 1);
    d.ox = rng.uniform_int(nw - w + 1);
    d.flip = rng.bernoulli(0.5);

    auto ry = crop_image(resize_image(y, nh, nw, nearest_target), d.oy, d.ox, h, w);
    auto rc = crop_image(resize_image(c, nh, nw, nearest_cond), d.oy, d.ox, h, w);
    if (d.flip) {
        ry = mirror_image(ry);
        rc = mirror_image(rc);
    }
    return {std::move(ry), std::move(rc)};
}

// ---- normalization ---------------------------------------------------------

template <typename T>
T normalize_u8(std::uint8_t v) {
    return static_cast<T>(v / 127.5 - 1.0);
}

template <typename T>
std::uint8_t denormalize_u8(T v) {
    double d = (static_cast<double>(v) + 1.0) * 127.5;
    return static_cast<std::uint8_t>(std::clamp(std::llround(d), 0ll, 255ll));
}

}  // namespace coopgen
