#pragma once

// Weighted preference / target conditioning, generation over a weight grid
// and selection by the log-score objective z.

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "pmg/generator.hpp"

namespace pmg {

struct WeightPair {
    double w_p = 1.0;
    double w_t = 1.0;

    bool operator==(const WeightPair&) const = default;
};

std::vector<WeightPair> default_weight_grid();

struct WeightedCandidate {
    WeightPair weights;
    Image image;
    double d_p = 0.0;
    double d_t = 0.0;
    double z = 0.0;
};

// Rows [w_p * E_p ; w_t * E_t]. When the total exceeds token_limit the
// trailing preference rows are dropped first. Throws InputError when both
// weights are zero, either is negative, or E_t alone overflows.
ConditionSequence combine_conditions(const ConditionSequence& preference, const ConditionSequence& target,
                                     WeightPair weights, std::size_t token_limit);

inline constexpr double kScoreFloor = 1e-6;

// alpha * log d_p + (1 - alpha) * log d_t with both scores clamped to [1e-6, 1].
double z_score(double d_p, double d_t, double alpha);

// Supplies (d_p, d_t) for a generated image. The default implementation
// scores against the preference and target keywords with a ScorerBackend.
using CandidateScorer = std::function<std::pair<double, double>(std::size_t grid_index, const Image& image)>;

CandidateScorer keyword_scorer(const ScorerBackend& scorer, std::vector<std::string> preference_keywords,
                               std::vector<std::string> target_keywords);

struct Selection {
    std::size_t best = 0;
    std::vector<WeightedCandidate> candidates;  // in grid order

    const WeightedCandidate& chosen() const { return candidates.at(best); }
};

// Generates every grid point in parallel with the same seed, scores it, and
// returns the argmax of z (lowest grid index on ties). A failure at a grid
// point is rethrown with "grid point <i>" attached.
Selection select_best(const GeneratorModels& models, const ConditionSequence& preference,
                      const ConditionSequence& target, const std::vector<WeightPair>& grid,
                      const CandidateScorer& scorer, double alpha, std::uint64_t seed);

// Argmax of z over precomputed scores, lowest index on ties.
std::size_t argmax_z(const std::vector<std::pair<double, double>>& scores, double alpha);

// JSON: {"chosen": i, "alpha": a, "candidates": [{w_p, w_t, d_p, d_t, z, image_path}]}
void write_candidate_report(const std::filesystem::path& path, const Selection& selection, double alpha,
                            const std::vector<std::string>& image_paths);

}  // namespace pmg
