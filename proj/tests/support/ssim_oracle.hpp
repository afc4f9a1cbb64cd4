#pragma once

#include <cmath>

#include "pmg/image.hpp"

namespace pmg::test {

// Direct per-window SSIM: 2-D Gaussian weights built from exp(), and
// two-pass weighted means, variances and covariance.
inline double brute_force_ssim(const Image& a, const Image& b) {
    constexpr std::size_t K = 7;
    const double sigma = 1.5, c1 = 1e-4, c2 = 9e-4;
    double wsum = 0.0;
    double w[K][K];
    for (int i = 0; i < 7; ++i)
        for (int j = 0; j < 7; ++j)
            wsum += w[i][j] = std::exp(-((i - 3) * (i - 3) + (j - 3) * (j - 3)) / (2 * sigma * sigma));
    double total = 0.0;
    int count = 0;
    const std::size_t H = a.height(), W = a.width();
    for (std::size_t c = 0; c < a.channels(); ++c) {
        for (std::size_t top = 0; top + K <= H; ++top) {
            for (std::size_t left = 0; left + K <= W; ++left) {
                auto x = [&](std::size_t i, std::size_t j) { return a.pixels[(c * H + top + i) * W + left + j]; };
                auto y = [&](std::size_t i, std::size_t j) { return b.pixels[(c * H + top + i) * W + left + j]; };
                double mx = 0, my = 0;
                for (std::size_t i = 0; i < K; ++i)
                    for (std::size_t j = 0; j < K; ++j) {
                        mx += w[i][j] / wsum * x(i, j);
                        my += w[i][j] / wsum * y(i, j);
                    }
                double vx = 0, vy = 0, cov = 0;
                for (std::size_t i = 0; i < K; ++i)
                    for (std::size_t j = 0; j < K; ++j) {
                        const double p = w[i][j] / wsum;
                        vx += p * (x(i, j) - mx) * (x(i, j) - mx);
                        vy += p * (y(i, j) - my) * (y(i, j) - my);
                        cov += p * (x(i, j) - mx) * (y(i, j) - my);
                    }
                total += (2 * mx * my + c1) * (2 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                ++count;
            }
        }
    }
    return total / count;
}

}  // namespace pmg::test
