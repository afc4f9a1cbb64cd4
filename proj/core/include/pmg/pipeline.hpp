#pragma once

// End-to-end wiring: run configuration, run directories, per-user
// preparation (summaries, keywords, embeddings), ablation evaluation,
// feature export, and the command implementations behind the CLI.

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "pmg/balancer.hpp"
#include "pmg/corpus.hpp"
#include "pmg/generator.hpp"
#include "pmg/llm.hpp"
#include "pmg/metrics.hpp"
#include "pmg/prompt.hpp"
#include "pmg/trainer.hpp"

namespace pmg {

enum class BackendKind { mock, http };

struct RunConfig {
    Scene scene = Scene::costume;
    BackendKind llm_backend = BackendKind::mock;
    BackendKind caption_backend = BackendKind::mock;
    HttpEndpointConfig http;

    std::size_t n = 10;
    std::size_t m = 1;
    std::size_t preference_cap = kPreferenceKeywordCap;
    std::size_t target_cap = kTargetKeywordCap;
    std::size_t max_summary_tokens = 40;
    std::size_t L = 4;
    std::size_t S = 4;
    double alpha = 0.5;
    std::vector<WeightPair> grid = default_weight_grid();
    std::size_t token_limit = 77;

    std::uint64_t seed = 0;  // generation and training seed
    std::uint64_t state_seed = 1;
    CorpusConfig corpus;
    ToyLmConfig lm;
    GeneratorConfig generator;
    GeneratorTrainConfig generator_training;
    TrainConfig training;
    TrainableStateConfig state;

    std::filesystem::path runs_dir = "runs";
    std::filesystem::path corpus_dir;
    std::filesystem::path template_path;
    std::filesystem::path checkpoint;            // trainable state
    std::filesystem::path generator_checkpoint;  // toy generator weights
};

// Tuned for the synthetic costume corpus at desk scale.
RunConfig default_run_config();

GeneratorConfig generator_config(const RunConfig& config);
TrainableStateConfig state_config(const RunConfig& config);

std::string config_to_json(const RunConfig& config);
// Unknown keys are rejected; missing keys keep their defaults.
RunConfig config_from_json(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

// Throws InputError for inconsistent values or referenced paths that do not exist.
void validate(const RunConfig& config);

// runs/<UTC timestamp>-<config hash>[-k]/ with a config.json snapshot.
std::filesystem::path create_run_dir(const RunConfig& config);

PromptTemplate resolve_template(const RunConfig& config);

// Owns the backends selected by the config.
struct Backends {
    std::unique_ptr<LlmBackend> llm;
    std::unique_ptr<CaptionBackend> captioner;
};
Backends make_backends(const RunConfig& config);

// Everything about one user that does not depend on trained state.
struct PreparedUser {
    std::string user_id;
    SummarizedBehavior behavior;  // input history (target excluded)
    std::string target_summary;
    KeywordSet preference;
    KeywordSet target;
    std::vector<Image> history_images;
    Image target_image;
};

// The held-out target is `target_item` (default: the last history item);
// the input history is every other item, truncated to the n most recent.
PreparedUser prepare_user(const Corpus& corpus, const std::string& user_id, const RunConfig& config,
                          const PromptTemplate& tmpl, const Backends& backends,
                          const std::string& target_item = {});

TrainingExample to_training_example(const PreparedUser& user);

enum class AblationVariant { full, no_embeddings, no_keywords, no_both };
std::string_view to_string(AblationVariant v);
const std::vector<AblationVariant>& all_variants();

struct ConditionBundle {
    Tensor soft;               // E_m, [L, d_gen] or empty
    ConditionSequence hard;    // E_k, possibly empty
    ConditionSequence target;  // E^t

    // E^p = [E_m ; E_k] without a length check; combine_conditions trims it.
    ConditionSequence preference() const;
};

// Models shared by generation, evaluation and export.
struct ModelSet {
    ToyLanguageModel lm;
    GeneratorModels generator;
    std::optional<TrainableState> state;
};

ConditionBundle build_conditions(const PreparedUser& user, const ModelSet& models, const PromptTemplate& tmpl,
                                 AblationVariant variant);

Selection generate_for_user(const PreparedUser& user, const ModelSet& models, const PromptTemplate& tmpl,
                            const RunConfig& config, AblationVariant variant);

struct SimilarityRow {
    std::string user_id;
    double lpips_history = 0.0;
    double lpips_target = 0.0;
    double ssim_history = 0.0;
    double ssim_target = 0.0;
};

struct SimilarityReport {
    AblationVariant variant = AblationVariant::full;
    std::vector<SimilarityRow> rows;
    SimilarityRow mean;  // user_id "mean"
};

SimilarityRow similarity(const std::string& user_id, const Image& generated, const PreparedUser& user,
                         const FeatureBackend& features);

// Throws InputError when the variant needs embeddings and no state is loaded.
SimilarityReport run_ablation(const std::vector<PreparedUser>& users, AblationVariant variant,
                              const ModelSet& models, const PromptTemplate& tmpl, const RunConfig& config,
                              const FeatureBackend& features);

// variant,lpips_history,lpips_target,ssim_history,ssim_target
void write_ablation_csv(const std::filesystem::path& path, const std::vector<SimilarityReport>& reports);

enum class ExportMode { averaged, generated };
ExportMode export_mode_from_string(std::string_view name);

std::vector<double> export_user_features(const PreparedUser& user, ExportMode mode, const ModelSet& models,
                                         const PromptTemplate& tmpl, const RunConfig& config);

// Tensor "features" [users, d_s]; metadata "index" maps user_id -> row as JSON.
void write_feature_export(const std::filesystem::path& path, const std::vector<std::string>& user_ids,
                          const std::vector<std::vector<double>>& features, ExportMode mode);

// Generator weights from config.generator_checkpoint, or pretrained on the
// training users' items when no checkpoint is configured.
GeneratorModels obtain_generator(const RunConfig& config, const Corpus& corpus);
std::vector<CaptionedImage> generator_training_data(const Corpus& corpus);

// --- commands ------------------------------------------------------------------
// Each returns the run directory it wrote.

struct CommandOptions {
    std::vector<std::string> users;  // empty = every user the command applies to
    std::string target;
    bool no_embeddings = false;
    bool no_keywords = false;
    ExportMode mode = ExportMode::averaged;
};

std::filesystem::path cmd_make_corpus(const RunConfig& config);
std::filesystem::path cmd_extract(const RunConfig& config, const CommandOptions& options);
std::filesystem::path cmd_train(const RunConfig& config);
std::filesystem::path cmd_generate(const RunConfig& config, const CommandOptions& options);
std::filesystem::path cmd_evaluate(const RunConfig& config);
std::filesystem::path cmd_export_features(const RunConfig& config, const CommandOptions& options);

}  // namespace pmg
