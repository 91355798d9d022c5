#pragma once

#include <cmath>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "uvga/gradcheck.hpp"
#include "uvga/graph.hpp"
#include "uvga/tensor.hpp"

namespace uvga::loss {

/// Training objective weights; defaults are the production values
/// (l1 1, ssim 0.1, perceptual 0.2, mouth 10, xyz 0.01, scale 1).
struct LossWeights {
    double l1 = 1.0;
    double ssim = 0.1;
    double lpips = 0.2;
    double mouth = 10.0;
    double xyz = 0.01;
    double scale = 1.0;

    void validate() const {
        for (double w : {l1, ssim, lpips, mouth, xyz, scale})
            if (w < 0.0 || !std::isfinite(w)) throw std::invalid_argument("loss weights must be nonnegative");
    }
};

/// Mean absolute error (subgradient 0 at zero residual).
template <class T>
typename Graph<T>::Id l1(Graph<T>& g, typename Graph<T>::Id pred, typename Graph<T>::Id gt) {
    if (g.value(pred).shape != g.value(gt).shape) throw std::invalid_argument("l1: shape mismatch");
    return g.reduce_mean(g.abs(g.sub(pred, gt)));
}

namespace detail {
template <class T>
Tensor<T> gaussian_window(int size, double sigma, int channels) {
    Tensor<T> w({channels, 1, size, size});
    std::vector<double> k(static_cast<size_t>(size));
    double sum = 0;
    for (int i = 0; i < size; ++i) {
        const double d = i - (size - 1) / 2.0;
        k[static_cast<size_t>(i)] = std::exp(-d * d / (2 * sigma * sigma));
        sum += k[static_cast<size_t>(i)];
    }
    for (auto& v : k) v /= sum;
    for (int c = 0; c < channels; ++c)
        for (int i = 0; i < size; ++i)
            for (int j = 0; j < size; ++j)
                w.v[((static_cast<size_t>(c) * 1 + 0) * size + i) * size + j] =
                    static_cast<T>(k[static_cast<size_t>(i)] * k[static_cast<size_t>(j)]);
    return w;
}
}  // namespace detail

/// 1 - mean SSIM with the standard 11x11 Gaussian window (sigma 1.5),
/// C1=(0.01)^2, C2=(0.03)^2 on unit range, 'valid' windows only.
template <class T>
typename Graph<T>::Id ssim_loss(Graph<T>& g, typename Graph<T>::Id pred, typename Graph<T>::Id gt) {
    const auto& s = g.value(pred).shape;
    if (s != g.value(gt).shape) throw std::invalid_argument("ssim: shape mismatch");
    if (s.size() != 3 || s[1] < 11 || s[2] < 11)
        throw std::invalid_argument("ssim: images must be [C,H,W] with H,W >= 11");
    typename Graph<T>::Scope scope(g, "ssim");
    const int C = s[0];
    const auto win = g.constant(detail::gaussian_window<T>(11, 1.5, C), "win");
    auto filt = [&](typename Graph<T>::Id x) { return g.conv2d(x, win, -1, 1, 0, C); };
    const T c1 = T(0.01 * 0.01), c2 = T(0.03 * 0.03);
    const auto mx = filt(pred), my = filt(gt);
    const auto mx2 = g.mul(mx, mx), my2 = g.mul(my, my), mxy = g.mul(mx, my);
    const auto sx = g.sub(filt(g.mul(pred, pred)), mx2);
    const auto sy = g.sub(filt(g.mul(gt, gt)), my2);
    const auto sxy = g.sub(filt(g.mul(pred, gt)), mxy);
    const auto num = g.mul(g.add_scalar(g.mul_scalar(mxy, T(2)), c1), g.add_scalar(g.mul_scalar(sxy, T(2)), c2));
    const auto den = g.mul(g.add_scalar(g.add(mx2, my2), c1), g.add_scalar(g.add(sx, sy), c2));
    return g.add_scalar(g.mul_scalar(g.reduce_mean(g.div(num, den)), T(-1)), T(1));
}

// ---------------------------------------------------------------------------
// Pluggable perceptual metric. The default is a handcrafted multi-scale
// gradient-magnitude distance (3 pyramid levels); external differentiable
// feature extractors register under a name and are used verbatim.
// ---------------------------------------------------------------------------

template <class T>
using MetricFn = std::function<typename Graph<T>::Id(Graph<T>&, typename Graph<T>::Id, typename Graph<T>::Id)>;

template <class T>
class MetricRegistry {
public:
    static MetricRegistry& instance() {
        static MetricRegistry reg;
        return reg;
    }

    void add(const std::string& name, MetricFn<T> fn) { metrics_[name] = std::move(fn); }

    bool contains(const std::string& name) const { return metrics_.count(name) != 0; }

    const MetricFn<T>& get(const std::string& name) const {
        auto it = metrics_.find(name);
        if (it == metrics_.end()) throw std::invalid_argument("perceptual: unregistered metric '" + name + "'");
        return it->second;
    }

private:
    MetricRegistry() = default;
    std::map<std::string, MetricFn<T>> metrics_;
};

namespace detail {
template <class T>
Tensor<T> sobel_kernel(bool horizontal, int channels) {
    const double kx[9] = {-1, 0, 1, -2, 0, 2, -1, 0, 1};
    const double ky[9] = {-1, -2, -1, 0, 0, 0, 1, 2, 1};
    Tensor<T> w({channels, 1, 3, 3});
    for (int c = 0; c < channels; ++c)
        for (int i = 0; i < 9; ++i)
            w.v[static_cast<size_t>(c) * 9 + static_cast<size_t>(i)] =
                static_cast<T>((horizontal ? kx[i] : ky[i]) / 8.0);
    return w;
}

template <class T>
Tensor<T> avgpool_kernel(int channels) {
    Tensor<T> w({channels, 1, 2, 2}, T(0.25));
    return w;
}

/// Per-scale edge features: squared gradient magnitude gx^2 + gy^2 (kept
/// polynomial so the metric grad-checks tightly).
template <class T>
typename Graph<T>::Id gradmag(Graph<T>& g, typename Graph<T>::Id x) {
    const int C = g.value(x).dim(0);
    const auto gx = g.conv2d(x, g.constant(sobel_kernel<T>(true, C), "sobel_x"), -1, 1, 1, C);
    const auto gy = g.conv2d(x, g.constant(sobel_kernel<T>(false, C), "sobel_y"), -1, 1, 1, C);
    return g.add(g.mul(gx, gx), g.mul(gy, gy));
}

template <class T>
typename Graph<T>::Id gradmag3_metric(Graph<T>& g, typename Graph<T>::Id a, typename Graph<T>::Id b) {
    typename Graph<T>::Scope scope(g, "gradmag3");
    const int C = g.value(a).dim(0);
    typename Graph<T>::Id acc = -1;
    for (int s = 0; s < 3; ++s) {
        const auto da = gradmag(g, a), db = gradmag(g, b);
        const auto d = g.sub(da, db);
        const auto dist = g.reduce_mean(g.mul(d, d));
        acc = (s == 0) ? dist : g.add(acc, dist);
        if (s < 2) {
            const auto pool = g.constant(avgpool_kernel<T>(C), "pool");
            a = g.conv2d(a, pool, -1, 2, 0, C);
            b = g.conv2d(b, pool, -1, 2, 0, C);
        }
    }
    return g.mul_scalar(acc, T(1.0 / 3.0));
}
}  // namespace detail

template <class T>
void ensure_default_metrics() {
    auto& reg = MetricRegistry<T>::instance();
    if (!reg.contains("gradmag3"))
        reg.add("gradmag3", [](Graph<T>& g, typename Graph<T>::Id a, typename Graph<T>::Id b) {
            return detail::gradmag3_metric(g, a, b);
        });
}

/// Perceptual distance under a registered metric (0 exactly on identical
/// inputs for the default metric).
template <class T>
typename Graph<T>::Id perceptual(Graph<T>& g, typename Graph<T>::Id pred, typename Graph<T>::Id gt,
                                 const std::string& metric = "gradmag3") {
    if (g.value(pred).shape != g.value(gt).shape) throw std::invalid_argument("perceptual: shape mismatch");
    ensure_default_metrics<T>();
    return MetricRegistry<T>::instance().get(metric)(g, pred, gt);
}

/// Perceptual distance restricted to an image-space mask [H,W] (rasterized
/// from the mouth-region geometry). An empty mask contributes exactly 0 and
/// warns once per call site.
template <class T>
typename Graph<T>::Id mouth_perceptual(Graph<T>& g, typename Graph<T>::Id pred, typename Graph<T>::Id gt,
                                       const Tensor<T>& mask, const std::string& metric = "gradmag3") {
    const auto& s = g.value(pred).shape;
    if (s.size() != 3 || mask.shape != Shape{s[1], s[2]})
        throw std::invalid_argument("mouth_perceptual: mask must be [H,W]");
    bool any = false;
    for (const T& v : mask.v)
        if (v != T(0)) {
            any = true;
            break;
        }
    if (!any) {
        std::cerr << "warning=empty_mouth_mask detail=\"mouth loss contributes 0\"\n";
        return g.constant(Tensor<T>::scalar(T(0)), "empty_mouth");
    }
    const auto m = g.constant(mask, "mouth_mask");
    return perceptual(g, g.mul(pred, m), g.mul(gt, m), metric);
}

/// L2 anchors: mean squared per-texel deviation of positions and scales from
/// their initial values, over valid texels only.
template <class T>
struct RegularizerNodes {
    typename Graph<T>::Id xyz;
    typename Graph<T>::Id scale;
};

template <class T>
RegularizerNodes<T> regularizers(Graph<T>& g, typename Graph<T>::Id position, typename Graph<T>::Id scale,
                                 const Tensor<T>& p_init, const Tensor<T>& s_init, const Tensor<T>& validity) {
    if (g.value(position).shape != p_init.shape || g.value(scale).shape != s_init.shape)
        throw std::invalid_argument("regularizers: anchor shape mismatch");
    T n_valid = T(0);
    for (const T& v : validity.v) n_valid += v;
    if (n_valid == T(0)) throw std::invalid_argument("regularizers: empty validity mask");
    const auto mask = g.constant(validity, "validity");
    auto masked_mse = [&](typename Graph<T>::Id x, const Tensor<T>& anchor) {
        const auto d = g.sub(x, g.constant(anchor, "anchor"));
        const auto sq = g.mul(g.mul(d, d), mask);  // mask broadcasts over channels
        return g.mul_scalar(g.reduce_sum(sq), T(1) / n_valid);
    };
    return {masked_mse(position, p_init), masked_mse(scale, s_init)};
}

/// Weighted combination of the six components.
template <class T>
typename Graph<T>::Id total(Graph<T>& g, typename Graph<T>::Id l1_c, typename Graph<T>::Id ssim_c,
                            typename Graph<T>::Id lpips_c, typename Graph<T>::Id mouth_c,
                            typename Graph<T>::Id xyz_c, typename Graph<T>::Id scale_c,
                            const LossWeights& w) {
    w.validate();
    auto acc = g.mul_scalar(l1_c, static_cast<T>(w.l1));
    acc = g.add(acc, g.mul_scalar(ssim_c, static_cast<T>(w.ssim)));
    acc = g.add(acc, g.mul_scalar(lpips_c, static_cast<T>(w.lpips)));
    acc = g.add(acc, g.mul_scalar(mouth_c, static_cast<T>(w.mouth)));
    acc = g.add(acc, g.mul_scalar(xyz_c, static_cast<T>(w.xyz)));
    acc = g.add(acc, g.mul_scalar(scale_c, static_cast<T>(w.scale)));
    return acc;
}

/// Loss-level grad-check scenarios on 16x16 inputs (used by tests and the
/// acceptance gradient suite).
inline std::vector<GradCheckCase> loss_gradcheck_cases() {
    std::vector<GradCheckCase> cases;
    auto img = [](Rng& r, double lo = 0.05, double hi = 0.95) {
        return r.uniform_tensor<double>({3, 16, 16}, lo, hi);
    };
    cases.push_back({"loss_l1",
                     [img](Rng& r) { return std::vector<Tensor<double>>{img(r), img(r)}; },
                     [](Graph<double>& g, const std::vector<Graph<double>::Id>& in) {
                         return l1(g, in[0], in[1]);
                     }});
    cases.push_back({"loss_ssim",
                     [img](Rng& r) { return std::vector<Tensor<double>>{img(r), img(r)}; },
                     [](Graph<double>& g, const std::vector<Graph<double>::Id>& in) {
                         return ssim_loss(g, in[0], in[1]);
                     }});
    cases.push_back({"loss_perceptual",
                     [img](Rng& r) { return std::vector<Tensor<double>>{img(r), img(r)}; },
                     [](Graph<double>& g, const std::vector<Graph<double>::Id>& in) {
                         return perceptual(g, in[0], in[1]);
                     }});
    cases.push_back({"loss_mouth_perceptual",
                     [img](Rng& r) { return std::vector<Tensor<double>>{img(r), img(r)}; },
                     [](Graph<double>& g, const std::vector<Graph<double>::Id>& in) {
                         Tensor<double> mask({16, 16});
                         for (int y = 5; y < 12; ++y)
                             for (int x = 4; x < 13; ++x) mask.at(y, x) = 1.0;
                         return mouth_perceptual(g, in[0], in[1], mask);
                     }});
    cases.push_back({"loss_regularizers",
                     [](Rng& r) {
                         return std::vector<Tensor<double>>{r.uniform_tensor<double>({3, 16, 16}, -1, 1),
                                                            r.uniform_tensor<double>({3, 16, 16}, 0.001, 0.01)};
                     },
                     [](Graph<double>& g, const std::vector<Graph<double>::Id>& in) {
                         Tensor<double> p_init({3, 16, 16}, 0.05);
                         Tensor<double> s_init({3, 16, 16}, 0.004);
                         Tensor<double> validity({16, 16}, 1.0);
                         const auto reg = regularizers(g, in[0], in[1], p_init, s_init, validity);
                         return g.add(reg.xyz, reg.scale);
                     }});
    cases.push_back({"loss_total",
                     [img](Rng& r) { return std::vector<Tensor<double>>{img(r), img(r)}; },
                     [](Graph<double>& g, const std::vector<Graph<double>::Id>& in) {
                         Tensor<double> mask({16, 16});
                         for (int y = 6; y < 11; ++y)
                             for (int x = 6; x < 11; ++x) mask.at(y, x) = 1.0;
                         const auto z = g.constant(Tensor<double>::scalar(0.0));
                         return total(g, l1(g, in[0], in[1]), ssim_loss(g, in[0], in[1]),
                                      perceptual(g, in[0], in[1]),
                                      mouth_perceptual(g, in[0], in[1], mask), z, z, LossWeights{});
                     }});
    return cases;
}

}  // namespace uvga::loss
