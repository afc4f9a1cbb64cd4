#include "pmg/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "pmg/autodiff.hpp"
#include "pmg/errors.hpp"

namespace pmg {

std::vector<double> gaussian_window(std::size_t size, double sigma) {
    std::vector<double> w(size);
    const double mid = (static_cast<double>(size) - 1.0) / 2.0;
    double total = 0.0;
    for (std::size_t i = 0; i < size; ++i) {
        const double u = static_cast<double>(i) - mid;
        w[i] = std::exp(-u * u / (2.0 * sigma * sigma));
        total += w[i];
    }
    for (auto& v : w) v /= total;
    return w;
}

namespace {

// Valid-mode separable filtering of one channel plane.
std::vector<double> filter_valid(const double* plane, std::size_t H, std::size_t W, const std::vector<double>& w) {
    const std::size_t K = w.size(), oh = H - K + 1, ow = W - K + 1;
    std::vector<double> rows(H * ow, 0.0);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
            double s = 0.0;
            for (std::size_t k = 0; k < K; ++k) s += w[k] * plane[y * W + x + k];
            rows[y * ow + x] = s;
        }
    std::vector<double> out(oh * ow, 0.0);
    for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
            double s = 0.0;
            for (std::size_t k = 0; k < K; ++k) s += w[k] * rows[(y + k) * ow + x];
            out[y * ow + x] = s;
        }
    return out;
}

}  // namespace

double ssim(const Image& a, const Image& b, const SsimOptions& options) {
    if (!a.same_shape(b))
        throw InputError("ssim: shape mismatch " + shape_string(a.pixels.shape) + " vs " +
                         shape_string(b.pixels.shape));
    const std::size_t C = a.channels(), H = a.height(), W = a.width();
    std::size_t K = std::min({options.window, H, W});
    if (K % 2 == 0) --K;
    if (K == 0) throw InputError("ssim: empty image");
    const auto w = gaussian_window(K, options.sigma);
    const double c1 = std::pow(options.k1 * options.dynamic_range, 2);
    const double c2 = std::pow(options.k2 * options.dynamic_range, 2);

    double total = 0.0;
    std::size_t count = 0;
    std::vector<double> xx(H * W), yy(H * W), xy(H * W);
    for (std::size_t c = 0; c < C; ++c) {
        const double* x = a.pixels.data.data() + c * H * W;
        const double* y = b.pixels.data.data() + c * H * W;
        for (std::size_t i = 0; i < H * W; ++i) {
            xx[i] = x[i] * x[i];
            yy[i] = y[i] * y[i];
            xy[i] = x[i] * y[i];
        }
        const auto mx = filter_valid(x, H, W, w), my = filter_valid(y, H, W, w);
        const auto sxx = filter_valid(xx.data(), H, W, w), syy = filter_valid(yy.data(), H, W, w),
                   sxy = filter_valid(xy.data(), H, W, w);
        for (std::size_t i = 0; i < mx.size(); ++i) {
            const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cov = sxy[i] - mx[i] * my[i];
            total += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2)) /
                     ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
            ++count;
        }
    }
    return total / static_cast<double>(count);
}

ToyLpipsFeatures::ToyLpipsFeatures(std::uint64_t seed, std::size_t channels, std::size_t width) {
    std::mt19937_64 rng(seed);
    std::size_t in = channels;
    for (int l = 0; l < 3; ++l) {
        weights_.push_back(random_normal({width, in, 3, 3}, rng, 1.0 / std::sqrt(static_cast<double>(in * 9))));
        biases_.push_back(random_normal({width}, rng, 0.1));
        in = width;
    }
}

std::vector<Tensor> ToyLpipsFeatures::features(const Image& image) const {
    Tensor centred = image.pixels;
    for (auto& v : centred.data) v = 2.0 * v - 1.0;
    ad::Var x = ad::constant(std::move(centred));
    std::vector<Tensor> out;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
        if (l > 0) {
            if (x.shape()[1] % 2 || x.shape()[2] % 2) break;
            x = ad::avg_pool2(x);
        }
        x = ad::tanh(ad::conv2d(x, ad::constant(weights_[l]), ad::constant(biases_[l])));
        out.push_back(x.value());
    }
    return out;
}

double perceptual_distance(const Image& a, const Image& b, const FeatureBackend& backend) {
    if (!a.same_shape(b))
        throw InputError("perceptual_distance: shape mismatch " + shape_string(a.pixels.shape) + " vs " +
                         shape_string(b.pixels.shape));
    const auto fa = backend.features(a), fb = backend.features(b);
    double total = 0.0;
    for (std::size_t l = 0; l < fa.size(); ++l) {
        const std::size_t C = fa[l].dim(0), HW = fa[l].dim(1) * fa[l].dim(2);
        double layer = 0.0;
        for (std::size_t p = 0; p < HW; ++p) {
            double na = 0.0, nb = 0.0;
            for (std::size_t c = 0; c < C; ++c) {
                na += fa[l][c * HW + p] * fa[l][c * HW + p];
                nb += fb[l][c * HW + p] * fb[l][c * HW + p];
            }
            na = std::sqrt(na) + 1e-10;
            nb = std::sqrt(nb) + 1e-10;
            for (std::size_t c = 0; c < C; ++c) {
                const double d = fa[l][c * HW + p] / na - fb[l][c * HW + p] / nb;
                layer += d * d;
            }
        }
        total += layer / static_cast<double>(HW);
    }
    return total;
}

}  // namespace pmg
