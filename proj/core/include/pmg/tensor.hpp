#pragma once

#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pmg {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           std::multiplies<>());
}

std::string shape_string(const Shape& shape);

// Dense row-major float64 array. Model parameters, activations and images
// all live in this type; the autodiff tape wraps copies of it.
struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(Shape s, double fill = 0.0)
        : shape(std::move(s)), data(numel(shape), fill) {}
    Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
        if (data.size() != numel(shape)) {
            throw std::invalid_argument("tensor data size " + std::to_string(data.size()) +
                                        " does not match shape " + shape_string(shape));
        }
    }

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t dim(std::size_t i) const { return shape.at(i); }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    // 2-D access; callers guarantee rank 2.
    double& at(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * shape[1], shape[1]}; }
    std::span<const double> row(std::size_t r) const {
        return {data.data() + r * shape[1], shape[1]};
    }

    bool operator==(const Tensor&) const = default;
};

bool all_finite(const Tensor& t);

// Fills with N(0, stddev^2) draws from the given engine.
void fill_normal(Tensor& t, std::mt19937_64& rng, double stddev);
void fill_uniform(Tensor& t, std::mt19937_64& rng, double lo, double hi);

Tensor random_normal(Shape shape, std::mt19937_64& rng, double stddev);

double l2_norm(std::span<const double> v);
double dot(std::span<const double> a, std::span<const double> b);

// Stable 64-bit FNV-1a, used wherever a string has to map to a seed or bucket.
std::uint64_t fnv1a(std::string_view text);

}  // namespace pmg
