#pragma once

// Training of the soft preference embeddings (multimodal tokens, per-layer
// prefixes, mapper) against multimodal denoising supervision.

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "pmg/behavior.hpp"
#include "pmg/generator.hpp"
#include "pmg/llm.hpp"
#include "pmg/prompt.hpp"

namespace pmg {

struct TrainingExample {
    std::string user_id;
    SummarizedBehavior input_behavior;  // every history item except the last
    Image supervision;                  // the last history item's image
    KeywordSet preference_keywords;     // extracted from input_behavior
};

struct TrainConfig {
    double learning_rate = 1e-5;
    std::size_t steps = 200;
    std::uint64_t seed = 0;
    bool grad_check = false;
    bool train_denoiser = false;
    double divergence_factor = 10.0;
    std::size_t divergence_patience = 50;
    std::size_t smoothing_window = 20;
};

// Prompt fed to the frozen LM: principle plus the behavior summaries, with
// the attribute and output-format example left out.
std::string build_embedding_prompt(const PromptTemplate& tmpl, const SummarizedBehavior& behavior);

// E^p = [E_m rows ; E_k rows]. Either part may be empty but not both.
// Throws InputError when the combined length exceeds token_limit.
ad::Var build_condition(const ad::Var& soft, const ConditionSequence& hard, std::size_t token_limit);
ConditionSequence build_condition(const Tensor& soft, const ConditionSequence& hard, std::size_t token_limit);

// Everything train_step needs that does not change between steps.
struct PreparedExample {
    std::string user_id;
    std::vector<std::size_t> prompt_tokens;
    ConditionSequence hard;  // E_k
    Image supervision;
};

PreparedExample prepare_example(const TrainingExample& example, const PromptTemplate& tmpl,
                                const ToyLanguageModel& lm, const TextEncoder& encoder);

// MSE(M_s, denoise(E^p, M_s + noise)) as a graph over the given variables.
ad::Var example_loss(const PreparedExample& example, const TrainableVars& vars, const ToyLanguageModel& lm,
                     const GeneratorModels& generator, const std::vector<ad::Var>& denoiser_vars,
                     const Tensor& noise);

// Noise draw for the visit-th pass over an example; independent of the
// order in which examples are visited.
Tensor example_noise(const PreparedExample& example, std::uint64_t seed, std::size_t visit, const Shape& shape);

// One SGD update of `state` (and of the denoiser when config.train_denoiser).
// Returns the pre-update loss. Throws DivergenceError on a non-finite loss.
double train_step(const PreparedExample& example, TrainableState& state, const ToyLanguageModel& lm,
                  GeneratorModels& generator, const TrainConfig& config, const Tensor& noise);

struct GradCheckGroup {
    std::string name;
    std::size_t sampled = 0;
    std::size_t passed = 0;
    double max_rel_error = 0.0;

    double pass_fraction() const { return sampled ? static_cast<double>(passed) / sampled : 0.0; }
};

// Central differences (step 1e-5) on `samples` random coordinates of each of
// the multimodal tokens, prefixes and mapper.
std::vector<GradCheckGroup> gradient_check(const PreparedExample& example, const TrainableState& state,
                                           const ToyLanguageModel& lm, const GeneratorModels& generator,
                                           std::uint64_t seed, std::size_t samples = 64, double step = 1e-5,
                                           double tolerance = 1e-4);

// Mean loss over the dataset with each example's first noise draw; no update.
double dataset_loss(const std::vector<PreparedExample>& dataset, const TrainableState& state,
                    const ToyLanguageModel& lm, const GeneratorModels& generator, std::uint64_t seed);

struct TrainResult {
    TrainableState state;
    std::vector<double> losses;  // per step, before each update
    double initial_eval = 0.0;   // dataset_loss before training
    double final_eval = 0.0;     // dataset_loss after training
    std::vector<GradCheckGroup> grad_check;
};

// Epoch-shuffled single-example SGD. Aborts with DivergenceError when the
// loss stays above divergence_factor x the first loss for
// divergence_patience consecutive steps.
TrainResult train(const std::vector<TrainingExample>& dataset, TrainableState initial, const ToyLanguageModel& lm,
                  GeneratorModels& generator, const PromptTemplate& tmpl, const TrainConfig& config);

// Mean of the first / last `window` losses.
double initial_loss(const std::vector<double>& losses, std::size_t window);
double final_loss(const std::vector<double>& losses, std::size_t window);

void write_loss_csv(const std::filesystem::path& path, const std::vector<double>& losses);

}  // namespace pmg
