#pragma once

// Language-model side of the pipeline.
//
//  * Text generation backends: a deterministic rule-table mock and an
//    OpenAI-compatible HTTP client.
//  * A small frozen causal transformer used for the forward pass that
//    produces soft preference embeddings. Only the multimodal token
//    embeddings, the per-layer attention prefixes and the output mapper are
//    trainable; they live in TrainableState.

#include <chrono>
#include <filesystem>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include "pmg/autodiff.hpp"
#include "pmg/backends.hpp"
#include "pmg/tensor.hpp"
#include "pmg/tokenizer.hpp"

namespace pmg {

// ---------------------------------------------------------------------------
// Generation backends

// Rule table keyed on (scene, attribute, bag of lexicon words in the prompt).
// Replies always use the "The keywords are: 1. a; 2. b" format.
class MockLlm final : public LlmBackend {
public:
    std::string generate(const std::string& prompt) const override;
};

// Image captions looked up by image_ref; unknown refs caption to "".
class MockCaptioner final : public CaptionBackend {
public:
    MockCaptioner() = default;
    explicit MockCaptioner(std::map<std::string, std::string> table) : table_(std::move(table)) {}
    std::string caption(const std::string& image_ref) const override;

private:
    std::map<std::string, std::string> table_;
};

// Captions through a (multimodal) LLM using the poster-caption prompt.
class PromptCaptioner final : public CaptionBackend {
public:
    explicit PromptCaptioner(const LlmBackend& llm) : llm_(llm) {}
    std::string caption(const std::string& image_ref) const override;
    static std::string build_prompt(const std::string& image_ref);

private:
    const LlmBackend& llm_;
};

struct HttpEndpointConfig {
    std::string base_url = "http://127.0.0.1:8000";
    std::string path = "/v1/chat/completions";
    std::string model = "llama-2-7b-chat";
    std::string api_key_env = "PMG_LLM_API_KEY";
    double temperature = 0.0;
    int max_tokens = 256;
    int max_attempts = 3;
    std::chrono::milliseconds initial_backoff{200};
    double backoff_factor = 2.0;
    std::chrono::seconds timeout{30};
};

// Single chat completion per call. Network errors, 429 and 5xx are retried
// with exponential backoff up to max_attempts; other statuses fail at once.
class HttpLlm final : public LlmBackend {
public:
    explicit HttpLlm(HttpEndpointConfig config) : config_(std::move(config)) {}
    std::string generate(const std::string& prompt) const override;
    const HttpEndpointConfig& config() const { return config_; }

private:
    HttpEndpointConfig config_;
    mutable std::mutex mutex_;
};

// ---------------------------------------------------------------------------
// Frozen toy language model

struct ToyLmConfig {
    std::size_t vocab_size = 1024;
    std::size_t d_model = 16;
    std::size_t heads = 4;
    std::size_t layers = 2;
    std::size_t mlp_hidden = 32;
    std::size_t context_limit = 512;
    std::uint64_t seed = 7;
};

// Prompt words use ids below vocab_size (see tokenize()); the multimodal
// tokens sit in the reserved range vocab_size .. vocab_size + L - 1 and are
// embedded from TrainableState rather than the frozen table.

struct ForwardOutput {
    ad::Var prompt_embeddings;      // [prompt_len, d_model]
    ad::Var multimodal_embeddings;  // [L, d_model]
    std::size_t attention_context = 0;  // keys visible per layer: S + prompt_len + L
};

class ToyLanguageModel {
public:
    explicit ToyLanguageModel(ToyLmConfig config = {});

    const ToyLmConfig& config() const { return config_; }
    std::size_t embedding_dim() const { return config_.d_model; }

    // prefixes: one [S, d_model] var per layer; multimodal: [L, d_model].
    ForwardOutput forward(std::span<const ad::Var> prefixes, std::span<const std::size_t> prompt_tokens,
                          const ad::Var& multimodal) const;

    // Every frozen weight, for bit-identity checks.
    std::vector<const Tensor*> parameters() const;

private:
    struct Layer {
        Tensor ln1_gain, ln1_bias, wq, wk, wv, wo, ln2_gain, ln2_bias, w1, b1, w2, b2;
    };
    ToyLmConfig config_;
    Tensor token_embedding_;
    std::vector<Layer> layers_;
    Tensor final_gain_, final_bias_;
};

// ---------------------------------------------------------------------------
// Trainable state

struct TrainableStateConfig {
    std::size_t multimodal_tokens = 4;  // L
    std::size_t prefix_length = 4;      // S
    std::size_t d_llm = 16;
    std::size_t layers = 2;
    std::size_t d_gen = 8;
    double token_init_std = 1.0;
    double prefix_init_std = 1.0;
    double mapper_init_std = 0.5;
};

struct TrainableState {
    Tensor multimodal_tokens;      // [L, d_llm]
    std::vector<Tensor> prefixes;  // layers x [S, d_llm]
    Tensor mapper_weight;          // [d_llm, d_gen]
    Tensor mapper_bias;            // [d_gen]

    static TrainableState initialize(const TrainableStateConfig& config, std::uint64_t seed);

    std::size_t multimodal_count() const { return multimodal_tokens.dim(0); }
    std::size_t prefix_length() const { return prefixes.empty() ? 0 : prefixes.front().dim(0); }
    bool operator==(const TrainableState&) const = default;
};

void save_state(const std::filesystem::path& path, const TrainableState& state);
TrainableState load_state(const std::filesystem::path& path);

struct TrainableVars {
    ad::Var multimodal_tokens;
    std::vector<ad::Var> prefixes;
    ad::Var mapper_weight;
    ad::Var mapper_bias;
};

TrainableVars make_vars(const TrainableState& state, bool requires_grad);

// mapper(E_m_raw) for the prompt; E_prompt is computed and dropped.
// Throws InputError when prompt + L + S exceeds the model context.
ad::Var soft_preference_embeddings(const ToyLanguageModel& lm, const TrainableVars& vars,
                                   std::span<const std::size_t> prompt_tokens);
Tensor soft_preference_embeddings(const ToyLanguageModel& lm, const TrainableState& state,
                                  const std::string& prompt);

}  // namespace pmg
