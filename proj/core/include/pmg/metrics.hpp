#pragma once

// Image similarity metrics: SSIM and a perceptual feature distance.

#include <memory>
#include <vector>

#include "pmg/image.hpp"

namespace pmg {

struct SsimOptions {
    std::size_t window = 7;  // shrunk to the largest odd size that fits
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
    double dynamic_range = 1.0;
};

// Mean SSIM over all valid windows and channels. Throws InputError on a
// shape mismatch.
double ssim(const Image& a, const Image& b, const SsimOptions& options = {});

// Normalised 1-D Gaussian taps, as used by ssim().
std::vector<double> gaussian_window(std::size_t size, double sigma);

// Multi-layer feature extractor for perceptual distances.
class FeatureBackend {
public:
    virtual ~FeatureBackend() = default;
    // One [C, H, W] tensor per layer.
    virtual std::vector<Tensor> features(const Image& image) const = 0;
};

// Fixed, seeded three-stage conv/tanh pyramid (full, 1/2 and 1/4 resolution).
class ToyLpipsFeatures final : public FeatureBackend {
public:
    explicit ToyLpipsFeatures(std::uint64_t seed = 3, std::size_t channels = 3, std::size_t width = 8);
    std::vector<Tensor> features(const Image& image) const override;

private:
    std::vector<Tensor> weights_, biases_;
};

// Sum over layers of the spatial mean of squared differences between
// channel-normalised features. Throws InputError on a shape mismatch.
double perceptual_distance(const Image& a, const Image& b, const FeatureBackend& features);

}  // namespace pmg
