#pragma once

// Desk-scale image generator: keyword text encoder, condition-modulated
// convolutional denoiser, iterative sampler, and a dual-encoder scorer used
// to rate generated images against keyword lists.

#include <filesystem>
#include <string>
#include <vector>

#include "pmg/autodiff.hpp"
#include "pmg/image.hpp"
#include "pmg/tensor.hpp"

namespace pmg {

struct GeneratorConfig {
    std::size_t d_gen = 8;
    std::size_t token_limit = 77;
    std::size_t text_vocab = 512;
    double position_scale = 0.1;
    std::size_t channels = 3;
    std::size_t height = 16;
    std::size_t width = 16;
    std::size_t hidden = 8;
    std::size_t steps = 4;        // sampler iterations (K)
    double step_noise = 1.0;      // noise re-injected before every step after the first
    std::size_t d_score = 16;
    std::uint64_t seed = 11;
};

// Condition rows [T, d_gen], T <= token_limit.
struct ConditionSequence {
    Tensor vectors;

    ConditionSequence() = default;
    explicit ConditionSequence(Tensor t);
    static ConditionSequence empty(std::size_t d_gen) { return ConditionSequence(Tensor({0, d_gen})); }

    std::size_t rows() const { return vectors.dim(0); }
    std::size_t dim() const { return vectors.dim(1); }
    bool operator==(const ConditionSequence&) const = default;
};

class TextEncoder {
public:
    TextEncoder() = default;
    explicit TextEncoder(const GeneratorConfig& config);

    std::vector<std::size_t> tokens(const std::vector<std::string>& keywords) const;

    // Token lookup plus scaled sinusoidal position signal. Throws InputError
    // on empty input or more than token_limit tokens.
    ConditionSequence encode(const std::vector<std::string>& keywords) const;

    std::size_t token_limit() const { return token_limit_; }
    Tensor& table() { return table_; }
    const Tensor& table() const { return table_; }

private:
    Tensor table_;
    std::size_t token_limit_ = 77;
    double position_scale_ = 0.1;
};

struct DenoiserParams {
    Tensor film_weight, film_bias;  // pooled condition -> per-channel (gamma, beta) for 3 stages
    Tensor conv1_w, conv1_b, conv2_w, conv2_b, conv3_w, conv3_b, conv4_w, conv4_b;

    std::vector<Tensor*> all();
    std::vector<const Tensor*> all() const;
    static std::vector<std::string> names();
    bool operator==(const DenoiserParams&) const = default;
};

// Encoder-decoder over [noisy image ; fixed coordinate planes]. The condition
// is mean-pooled over rows, RMS-normalised, and drives feature-wise affine
// modulation of the encoder, bottleneck and output stages.
class Denoiser {
public:
    Denoiser() = default;
    explicit Denoiser(const GeneratorConfig& config);

    ad::Var forward(const ad::Var& noisy, const ad::Var& condition, const std::vector<ad::Var>& params) const;
    Image denoise(const Image& noisy, const ConditionSequence& condition) const;

    std::vector<ad::Var> make_vars(bool requires_grad) const;

    DenoiserParams& params() { return params_; }
    const DenoiserParams& params() const { return params_; }

private:
    GeneratorConfig config_;
    DenoiserParams params_;
    Tensor coords_;
};

// Image side: frozen random projection of 4x4-pooled, centred pixels (plus a
// bias feature). Text side: bag of token vectors, optionally fine-tuned.
class ScorerBackend {
public:
    virtual ~ScorerBackend() = default;
    virtual std::vector<double> embed_image(const Image& image) const = 0;
    virtual std::vector<double> embed_text(const std::vector<std::string>& keywords) const = 0;
};

class ToyScorer final : public ScorerBackend {
public:
    ToyScorer() = default;
    explicit ToyScorer(const GeneratorConfig& config);

    std::vector<double> embed_image(const Image& image) const override;
    std::vector<double> embed_text(const std::vector<std::string>& keywords) const override;

    Tensor image_features(const Image& image) const;  // [1, features]
    std::vector<std::size_t> text_tokens(const std::vector<std::string>& keywords) const;

    Tensor& image_projection() { return image_projection_; }
    const Tensor& image_projection() const { return image_projection_; }
    Tensor& text_table() { return text_table_; }
    const Tensor& text_table() const { return text_table_; }

private:
    Tensor image_projection_;  // [features, d_score]
    Tensor text_table_;        // [vocab, d_score]
};

// Cosine between image and keyword embeddings. Throws InputError on empty
// keywords and a non-retryable BackendError("degenerate embedding") on a
// zero vector.
double score(const ScorerBackend& scorer, const Image& image, const std::vector<std::string>& keywords);
double cosine(std::span<const double> a, std::span<const double> b);

struct GeneratorModels {
    GeneratorConfig config;
    TextEncoder encoder;
    Denoiser denoiser;
    ToyScorer scorer;

    static GeneratorModels create(const GeneratorConfig& config);
};

// Seeded Gaussian start, then `steps` applications of the denoiser, each
// after the first on its previous output plus fresh noise. Output clamped to
// [0, 1]. Throws InputError if the condition exceeds the token limit.
Image generate(const GeneratorModels& models, const ConditionSequence& condition, std::uint64_t seed);

void save_generator(const std::filesystem::path& path, const GeneratorModels& models);
GeneratorModels load_generator(const std::filesystem::path& path, const GeneratorConfig& config);

// --- Training of the toy generator itself -----------------------------------

struct CaptionedImage {
    std::vector<std::string> keywords;
    Image image;
};

struct GeneratorTrainConfig {
    std::size_t denoiser_steps = 3000;
    double denoiser_learning_rate = 3e-3;
    double keyword_dropout = 0.3;
    std::size_t scorer_steps = 300;
    std::size_t scorer_batch = 16;
    double scorer_learning_rate = 0.05;
    double scorer_temperature = 0.1;
    std::uint64_t seed = 5;
};

// Text-to-image denoising pretraining (single noising step, MSE), Adam.
std::vector<double> pretrain_denoiser(GeneratorModels& models, const std::vector<CaptionedImage>& data,
                                      const GeneratorTrainConfig& config);

// In-batch contrastive fine-tuning of the scorer's text table; image side frozen.
std::vector<double> finetune_scorer(ToyScorer& scorer, const std::vector<CaptionedImage>& data,
                                    const GeneratorTrainConfig& config);

}  // namespace pmg
