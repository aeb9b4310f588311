#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "coopgen/tensor.hpp"

namespace coopgen {

// ---- Parzen-window log-likelihood -------------------------------------------

template <typename T>
struct ParzenEstimator {
    TensorT<T> reference;  // [m, ...]: equal-weight isotropic Gaussian centers
    double bandwidth = 0.1;
};

struct ParzenResult {
    double mean_loglik = 0;
    double std_error = 0;
    std::int64_t n_test = 0;
};

// Mean over test points of log[(1/m) sum_j N(y; y_j, s^2 I)], evaluated with
// a log-sum-exp; the standard error is over test points.
template <typename T>
ParzenResult parzen_loglik(const ParzenEstimator<T>& est, const TensorT<T>& test) {
    if (est.reference.empty() || test.empty()) throw Error("parzen_loglik: empty reference or test set");
    if (est.bandwidth <= 0) throw Error("parzen_loglik: bandwidth must be positive");
    const std::int64_t m = est.reference.dim(0), n = test.dim(0);
    const std::int64_t d = est.reference.numel() / m;
    if (test.numel() / n != d) throw ShapeError("parzen_loglik: dimension mismatch");

    const double s2 = est.bandwidth * est.bandwidth;
    const double log_norm =
        -0.5 * static_cast<double>(d) * std::log(2.0 * 3.14159265358979323846 * s2) - std::log(static_cast<double>(m));

    std::vector<double> ll(static_cast<std::size_t>(n));
    std::vector<double> q(static_cast<std::size_t>(m));
    for (std::int64_t i = 0; i < n; ++i) {
        const T* y = test.data() + i * d;
        double mx = -1e300;
        for (std::int64_t j = 0; j < m; ++j) {
            const T* r = est.reference.data() + j * d;
            double dist = 0;
            for (std::int64_t k = 0; k < d; ++k) {
                const double diff = static_cast<double>(y[k]) - static_cast<double>(r[k]);
                dist += diff * diff;
            }
            q[static_cast<std::size_t>(j)] = -dist / (2.0 * s2);
            mx = std::max(mx, q[static_cast<std::size_t>(j)]);
        }
        double acc = 0;
        for (std::int64_t j = 0; j < m; ++j) acc += std::exp(q[static_cast<std::size_t>(j)] - mx);
        ll[static_cast<std::size_t>(i)] = log_norm + mx + std::log(acc);
    }

    ParzenResult r;
    r.n_test = n;
    for (double v : ll) r.mean_loglik += v;
    r.mean_loglik /= static_cast<double>(n);
    double var = 0;
    for (double v : ll) var += (v - r.mean_loglik) * (v - r.mean_loglik);
    r.std_error = n > 1 ? std::sqrt(var / static_cast<double>(n - 1) / static_cast<double>(n)) : 0.0;
    return r;
}

// Grid value maximizing the validation mean log-likelihood; ties go to the
// smaller bandwidth.
template <typename T>
double select_bandwidth(const TensorT<T>& reference, const TensorT<T>& validation, std::vector<double> grid) {
    if (grid.empty()) throw Error("select_bandwidth: empty grid");
    std::sort(grid.begin(), grid.end());
    double best = grid.front(), best_ll = -1e300;
    for (double bw : grid) {
        ParzenEstimator<T> est{reference, bw};
        const double ll = parzen_loglik(est, validation).mean_loglik;
        if (ll > best_ll) {
            best_ll = ll;
            best = bw;
        }
    }
    return best;
}

inline std::vector<double> default_bandwidth_grid(int count = 20, double lo = 0.01, double hi = 1.0) {
    std::vector<double> g(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i)
        g[static_cast<std::size_t>(i)] = lo * std::pow(hi / lo, count == 1 ? 0.0 : static_cast<double>(i) / (count - 1));
    return g;
}

// ---- PSNR -------------------------------------------------------------------

// 10 log10(peak^2 / MSE) over the (optionally masked) region; identical
// inputs return the documented cap instead of infinity.
template <typename T>
double psnr(const TensorT<T>& a, const TensorT<T>& b, double peak, const TensorT<double>* region = nullptr,
            double cap_db = 99.0) {
    if (!a.same_shape(b)) throw ShapeError("psnr: shape mismatch");
    if (peak <= 0) throw Error("psnr: peak must be positive");
    if (region && region->shape() != a.shape()) throw ShapeError("psnr: region mask shape mismatch");
    double mse = 0;
    std::int64_t count = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        if (region && (*region)[i] == 0.0) continue;
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        mse += d * d;
        ++count;
    }
    if (count == 0) throw Error("psnr: empty region");
    mse /= static_cast<double>(count);
    if (mse == 0.0) return cap_db;
    return std::min(cap_db, 10.0 * std::log10(peak * peak / mse));
}

// ---- SSIM -------------------------------------------------------------------

struct SsimOptions {
    int window = 8;
    double k1 = 0.01;
    double k2 = 0.03;
    double peak = 2.0;  // dynamic range; data normalized to [-1,1] spans 2
};

// Mean over uniformly-weighted sliding windows (and channels) of the
// standard stabilized similarity; ssim(a, a) is exactly 1.
template <typename T>
double ssim(const TensorT<T>& a, const TensorT<T>& b, const SsimOptions& opt = {}) {
    if (!a.same_shape(b)) throw ShapeError("ssim: shape mismatch");
    Shape s = a.shape();
    std::int64_t c = 1, h = 0, w = 0;
    if (s.size() == 2) {
        h = s[0];
        w = s[1];
    } else if (s.size() == 3) {
        c = s[0];
        h = s[1];
        w = s[2];
    } else if (s.size() == 4 && s[0] == 1) {
        c = s[1];
        h = s[2];
        w = s[3];
    } else {
        throw ShapeError("ssim: expected [h,w], [c,h,w] or [1,c,h,w]");
    }
    const int win = opt.window;
    if (win < 1 || win > h || win > w) throw ShapeError("ssim: window does not fit the image");
    const double c1 = opt.k1 * opt.peak * opt.k1 * opt.peak;
    const double c2 = opt.k2 * opt.peak * opt.k2 * opt.peak;
    const double nw = static_cast<double>(win) * win;

    double acc = 0;
    std::int64_t windows = 0;
    for (std::int64_t ci = 0; ci < c; ++ci) {
        const T* pa = a.data() + ci * h * w;
        const T* pb = b.data() + ci * h * w;
        for (std::int64_t i = 0; i + win <= h; ++i)
            for (std::int64_t j = 0; j + win <= w; ++j) {
                double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
                for (int u = 0; u < win; ++u)
                    for (int v = 0; v < win; ++v) {
                        const double x = pa[(i + u) * w + j + v];
                        const double y = pb[(i + u) * w + j + v];
                        sx += x;
                        sy += y;
                        sxx += x * x;
                        syy += y * y;
                        sxy += x * y;
                    }
                const double mx = sx / nw, my = sy / nw;
                const double vx = sxx / nw - mx * mx;
                const double vy = syy / nw - my * my;
                const double cov = sxy / nw - mx * my;
                acc += ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                ++windows;
            }
    }
    return acc / static_cast<double>(windows);
}

}  // namespace coopgen
