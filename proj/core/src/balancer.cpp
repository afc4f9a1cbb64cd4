#include "pmg/balancer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <future>

#include <json.hpp>

#include "pmg/errors.hpp"

namespace pmg {

std::vector<WeightPair> default_weight_grid() { return {{0, 4}, {1, 3}, {2, 2}, {3, 1}, {4, 0}}; }

ConditionSequence combine_conditions(const ConditionSequence& preference, const ConditionSequence& target,
                                     WeightPair w, std::size_t token_limit) {
    if (w.w_p < 0.0 || w.w_t < 0.0) throw InputError("combine_conditions: weights must be non-negative");
    if (w.w_p == 0.0 && w.w_t == 0.0) throw InputError("combine_conditions: both weights are zero");
    const std::size_t P = preference.vectors.shape.empty() ? 0 : preference.rows();
    const std::size_t T = target.vectors.shape.empty() ? 0 : target.rows();
    if (T > token_limit) {
        throw InputError("combine_conditions: target condition alone has " + std::to_string(T) +
                         " rows, limit is " + std::to_string(token_limit));
    }
    if (P + T == 0) throw InputError("combine_conditions: both conditions are empty");
    if (P && T && preference.dim() != target.dim())
        throw InputError("combine_conditions: preference/target width mismatch");
    const std::size_t keep = std::min(P, token_limit - T);
    const std::size_t d = P ? preference.dim() : target.dim();

    Tensor out({keep + T, d});
    for (std::size_t r = 0; r < keep; ++r)
        for (std::size_t c = 0; c < d; ++c) out.at(r, c) = w.w_p * preference.vectors.at(r, c);
    for (std::size_t r = 0; r < T; ++r)
        for (std::size_t c = 0; c < d; ++c) out.at(keep + r, c) = w.w_t * target.vectors.at(r, c);
    return ConditionSequence(std::move(out));
}

double z_score(double d_p, double d_t, double alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw InputError("z_score: alpha must lie in [0, 1]");
    auto clamp = [](double v) { return std::isnan(v) ? kScoreFloor : std::clamp(v, kScoreFloor, 1.0); };
    return alpha * std::log(clamp(d_p)) + (1.0 - alpha) * std::log(clamp(d_t));
}

CandidateScorer keyword_scorer(const ScorerBackend& scorer, std::vector<std::string> preference_keywords,
                               std::vector<std::string> target_keywords) {
    return [&scorer, kp = std::move(preference_keywords), kt = std::move(target_keywords)](std::size_t,
                                                                                          const Image& image) {
        return std::pair{score(scorer, image, kp), score(scorer, image, kt)};
    };
}

std::size_t argmax_z(const std::vector<std::pair<double, double>>& scores, double alpha) {
    if (scores.empty()) throw InputError("argmax_z: empty grid");
    std::size_t best = 0;
    double best_z = z_score(scores[0].first, scores[0].second, alpha);
    for (std::size_t i = 1; i < scores.size(); ++i) {
        const double z = z_score(scores[i].first, scores[i].second, alpha);
        if (z > best_z) {
            best = i;
            best_z = z;
        }
    }
    return best;
}

Selection select_best(const GeneratorModels& models, const ConditionSequence& preference,
                      const ConditionSequence& target, const std::vector<WeightPair>& grid,
                      const CandidateScorer& scorer, double alpha, std::uint64_t seed) {
    if (grid.empty()) throw InputError("select_best: weight grid is empty");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw InputError("select_best: alpha must lie in [0, 1]");

    std::vector<std::future<WeightedCandidate>> jobs;
    jobs.reserve(grid.size());
    for (std::size_t i = 0; i < grid.size(); ++i) {
        jobs.push_back(std::async(std::launch::async, [&, i] {
            WeightedCandidate c;
            c.weights = grid[i];
            const ConditionSequence cond =
                combine_conditions(preference, target, grid[i], models.config.token_limit);
            c.image = generate(models, cond, seed);
            std::tie(c.d_p, c.d_t) = scorer(i, c.image);
            c.z = z_score(c.d_p, c.d_t, alpha);
            return c;
        }));
    }

    Selection sel;
    sel.candidates.reserve(grid.size());
    for (std::size_t i = 0; i < jobs.size(); ++i) {
        try {
            sel.candidates.push_back(jobs[i].get());
        } catch (const BackendError& e) {
            for (std::size_t j = i + 1; j < jobs.size(); ++j) jobs[j].wait();
            throw BackendError(e.what(), e.retryable(), "grid point " + std::to_string(i));
        } catch (const InputError& e) {
            for (std::size_t j = i + 1; j < jobs.size(); ++j) jobs[j].wait();
            throw InputError(std::string(e.what()) + " [grid point " + std::to_string(i) + "]");
        }
    }
    std::vector<std::pair<double, double>> scores;
    for (const auto& c : sel.candidates) scores.emplace_back(c.d_p, c.d_t);
    sel.best = argmax_z(scores, alpha);
    return sel;
}

void write_candidate_report(const std::filesystem::path& path, const Selection& selection, double alpha,
                            const std::vector<std::string>& image_paths) {
    nlohmann::json j;
    j["chosen"] = selection.best;
    j["alpha"] = alpha;
    j["candidates"] = nlohmann::json::array();
    for (std::size_t i = 0; i < selection.candidates.size(); ++i) {
        const auto& c = selection.candidates[i];
        j["candidates"].push_back({{"w_p", c.weights.w_p},
                                   {"w_t", c.weights.w_t},
                                   {"d_p", c.d_p},
                                   {"d_t", c.d_t},
                                   {"z", c.z},
                                   {"image_path", i < image_paths.size() ? image_paths[i] : ""}});
    }
    std::ofstream os(path);
    if (!os) throw InputError("cannot write candidate report '" + path.string() + "'");
    os << j.dump(2) << '\n';
}

}  // namespace pmg
