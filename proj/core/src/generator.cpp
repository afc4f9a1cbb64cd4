#include "pmg/generator.hpp"

#include <cmath>
#include <numbers>

#include "pmg/errors.hpp"
#include "pmg/optim.hpp"
#include "pmg/tensor_io.hpp"
#include "pmg/tokenizer.hpp"

namespace pmg {

namespace {

constexpr std::size_t kCoordFrequencies[] = {1, 2, 4};
constexpr std::size_t kCoordPlanes = 4 * std::size(kCoordFrequencies);

Tensor coordinate_planes(std::size_t H, std::size_t W) {
    Tensor t({kCoordPlanes, H, W});
    std::size_t plane = 0;
    for (std::size_t f : kCoordFrequencies) {
        for (int axis = 0; axis < 2; ++axis)
            for (int phase = 0; phase < 2; ++phase) {
                for (std::size_t y = 0; y < H; ++y)
                    for (std::size_t x = 0; x < W; ++x) {
                        const double u = axis == 0 ? static_cast<double>(x) / W : static_cast<double>(y) / H;
                        const double a = 2.0 * std::numbers::pi * static_cast<double>(f) * u;
                        t[(plane * H + y) * W + x] = phase == 0 ? std::sin(a) : std::cos(a);
                    }
                ++plane;
            }
    }
    return t;
}

Tensor conv_weight(std::size_t out, std::size_t in, std::mt19937_64& rng) {
    return random_normal({out, in, 3, 3}, rng, 1.0 / std::sqrt(static_cast<double>(in * 9)));
}

}  // namespace

ConditionSequence::ConditionSequence(Tensor t) : vectors(std::move(t)) {
    if (vectors.rank() != 2) throw std::invalid_argument("condition must be [rows, dim]");
}

// ---------------------------------------------------------------------------
// Text encoder

TextEncoder::TextEncoder(const GeneratorConfig& config)
    : token_limit_(config.token_limit), position_scale_(config.position_scale) {
    std::mt19937_64 rng(config.seed ^ 0x7e47ULL);
    table_ = random_normal({config.text_vocab, config.d_gen}, rng, 1.0);
}

std::vector<std::size_t> TextEncoder::tokens(const std::vector<std::string>& keywords) const {
    std::vector<std::size_t> out;
    for (const auto& kw : keywords) {
        const auto ids = tokenize(kw, table_.dim(0));
        out.insert(out.end(), ids.begin(), ids.end());
    }
    return out;
}

ConditionSequence TextEncoder::encode(const std::vector<std::string>& keywords) const {
    if (keywords.empty()) throw InputError("encode_text: no keywords");
    const auto ids = tokens(keywords);
    if (ids.empty()) throw InputError("encode_text: keywords produced no tokens");
    if (ids.size() > token_limit_) {
        throw InputError("encode_text: " + std::to_string(ids.size()) + " tokens exceed the limit of " +
                         std::to_string(token_limit_));
    }
    const std::size_t d = table_.dim(1);
    Tensor out({ids.size(), d});
    for (std::size_t t = 0; t < ids.size(); ++t)
        for (std::size_t i = 0; i < d; ++i) {
            const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
            const double pos = (i % 2 == 0) ? std::sin(t * rate) : std::cos(t * rate);
            out.at(t, i) = table_.at(ids[t], i) + position_scale_ * pos;
        }
    return ConditionSequence(std::move(out));
}

// ---------------------------------------------------------------------------
// Denoiser

std::vector<std::string> DenoiserParams::names() {
    return {"film_weight", "film_bias", "conv1_w", "conv1_b", "conv2_w", "conv2_b",
            "conv3_w",     "conv3_b",   "conv4_w", "conv4_b"};
}

std::vector<Tensor*> DenoiserParams::all() {
    return {&film_weight, &film_bias, &conv1_w, &conv1_b, &conv2_w, &conv2_b, &conv3_w, &conv3_b, &conv4_w, &conv4_b};
}

std::vector<const Tensor*> DenoiserParams::all() const {
    return {&film_weight, &film_bias, &conv1_w, &conv1_b, &conv2_w, &conv2_b, &conv3_w, &conv3_b, &conv4_w, &conv4_b};
}

Denoiser::Denoiser(const GeneratorConfig& config) : config_(config) {
    if (config.height % 2 || config.width % 2) throw InputError("denoiser: image size must be even");
    std::mt19937_64 rng(config.seed ^ 0xde015eULL);
    const std::size_t h = config.hidden, C = config.channels;
    params_.film_weight = random_normal({config.d_gen, 4 * h + 2 * C}, rng, 0.3);
    params_.film_bias = Tensor({4 * h + 2 * C}, 0.0);
    params_.conv1_w = conv_weight(h, C + kCoordPlanes, rng);
    params_.conv1_b = Tensor({h}, 0.0);
    params_.conv2_w = conv_weight(h, h, rng);
    params_.conv2_b = Tensor({h}, 0.0);
    params_.conv3_w = conv_weight(h, h, rng);
    params_.conv3_b = Tensor({h}, 0.0);
    params_.conv4_w = conv_weight(C, h, rng);
    params_.conv4_b = Tensor({C}, 0.0);
    coords_ = coordinate_planes(config.height, config.width);
}

std::vector<ad::Var> Denoiser::make_vars(bool requires_grad) const {
    std::vector<ad::Var> vars;
    for (const Tensor* t : params_.all()) vars.push_back(requires_grad ? ad::variable(*t) : ad::constant(*t));
    return vars;
}

ad::Var Denoiser::forward(const ad::Var& noisy, const ad::Var& condition, const std::vector<ad::Var>& p) const {
    const std::size_t h = config_.hidden, C = config_.channels;
    if (noisy.shape() != Shape{C, config_.height, config_.width})
        throw InputError("denoise: image shape " + shape_string(noisy.shape()) + " does not match the model");
    if (condition.shape().size() != 2 || condition.shape()[1] != config_.d_gen || condition.shape()[0] == 0)
        throw InputError("denoise: condition must be [T >= 1, " + std::to_string(config_.d_gen) + "]");
    if (p.size() != 10) throw InputError("denoise: expected 10 parameter tensors");

    ad::Var pooled = ad::rms_normalize_rows(ad::mean_rows(condition));
    ad::Var mod = ad::add_row(ad::matmul(pooled, p[0]), p[1]);
    auto part = [&](std::size_t begin, std::size_t count) { return ad::slice_cols(mod, begin, count); };

    std::vector<ad::Var> inputs{noisy, ad::constant(coords_)};
    ad::Var x = ad::concat_channels(inputs);
    ad::Var e1 = ad::tanh(ad::film(ad::conv2d(x, p[2], p[3]), part(0, h), part(h, h)));
    ad::Var e2 = ad::tanh(ad::film(ad::conv2d(ad::avg_pool2(e1), p[4], p[5]), part(2 * h, h), part(3 * h, h)));
    ad::Var u = ad::add(ad::upsample2(e2), e1);
    ad::Var d = ad::tanh(ad::conv2d(u, p[6], p[7]));
    ad::Var out = ad::film(ad::conv2d(d, p[8], p[9]), part(4 * h, C), part(4 * h + C, C));
    return ad::sigmoid(out);
}

Image Denoiser::denoise(const Image& noisy, const ConditionSequence& condition) const {
    const ad::Var out = forward(ad::constant(noisy.pixels), ad::constant(condition.vectors), make_vars(false));
    return Image(out.value());
}

// ---------------------------------------------------------------------------
// Scorer

ToyScorer::ToyScorer(const GeneratorConfig& config) {
    std::mt19937_64 rng(config.seed ^ 0x5c0feULL);
    const std::size_t features = config.channels * 16 + 1;
    image_projection_ = random_normal({features, config.d_score}, rng, 1.0 / std::sqrt(static_cast<double>(features)));
    text_table_ = random_normal({config.text_vocab, config.d_score}, rng, 1.0);
}

Tensor ToyScorer::image_features(const Image& image) const {
    const std::size_t C = image.channels(), H = image.height(), W = image.width();
    if (H % 4 || W % 4) throw InputError("scorer: image size must be divisible by 4");
    const std::size_t bh = H / 4, bw = W / 4;
    Tensor f({1, C * 16 + 1});
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t by = 0; by < 4; ++by)
            for (std::size_t bx = 0; bx < 4; ++bx) {
                double s = 0.0;
                for (std::size_t y = 0; y < bh; ++y)
                    for (std::size_t x = 0; x < bw; ++x) s += image.at(c, by * bh + y, bx * bw + x);
                f[(c * 4 + by) * 4 + bx] = s / static_cast<double>(bh * bw) - 0.5;
            }
    f[C * 16] = 1.0;
    if (f.size() != image_projection_.dim(0)) throw InputError("scorer: channel count does not match the model");
    return f;
}

std::vector<double> ToyScorer::embed_image(const Image& image) const {
    const Tensor f = image_features(image);
    const std::size_t F = image_projection_.dim(0), D = image_projection_.dim(1);
    std::vector<double> e(D, 0.0);
    for (std::size_t i = 0; i < F; ++i)
        for (std::size_t j = 0; j < D; ++j) e[j] += f[i] * image_projection_.at(i, j);
    return e;
}

std::vector<std::size_t> ToyScorer::text_tokens(const std::vector<std::string>& keywords) const {
    std::vector<std::size_t> out;
    for (const auto& kw : keywords) {
        const auto ids = tokenize(kw, text_table_.dim(0));
        out.insert(out.end(), ids.begin(), ids.end());
    }
    return out;
}

std::vector<double> ToyScorer::embed_text(const std::vector<std::string>& keywords) const {
    std::vector<double> e(text_table_.dim(1), 0.0);
    for (std::size_t id : text_tokens(keywords))
        for (std::size_t j = 0; j < e.size(); ++j) e[j] += text_table_.at(id, j);
    return e;
}

double cosine(std::span<const double> a, std::span<const double> b) {
    const double na = l2_norm(a), nb = l2_norm(b);
    if (na == 0.0 || nb == 0.0) throw BackendError("degenerate embedding", false);
    return dot(a, b) / (na * nb);
}

double score(const ScorerBackend& scorer, const Image& image, const std::vector<std::string>& keywords) {
    if (keywords.empty()) throw InputError("score: keyword list is empty");
    const auto ei = scorer.embed_image(image);
    const auto et = scorer.embed_text(keywords);
    return cosine(ei, et);
}

// ---------------------------------------------------------------------------
// Generation

GeneratorModels GeneratorModels::create(const GeneratorConfig& config) {
    return {config, TextEncoder(config), Denoiser(config), ToyScorer(config)};
}

Image generate(const GeneratorModels& models, const ConditionSequence& condition, std::uint64_t seed) {
    const auto& cfg = models.config;
    if (condition.rows() == 0) throw InputError("generate: empty condition");
    if (condition.rows() > cfg.token_limit) {
        throw InputError("generate: condition has " + std::to_string(condition.rows()) +
                         " rows, limit is " + std::to_string(cfg.token_limit));
    }
    std::mt19937_64 rng(seed);
    Image x(cfg.channels, cfg.height, cfg.width);
    fill_normal(x.pixels, rng, 1.0);
    for (std::size_t k = 0; k < cfg.steps; ++k) {
        if (k > 0) {
            Tensor noise(x.pixels.shape);
            fill_normal(noise, rng, cfg.step_noise);
            for (std::size_t i = 0; i < noise.size(); ++i) x.pixels[i] += noise[i];
        }
        x = models.denoiser.denoise(x, condition);
    }
    return clamp01(std::move(x));
}

void save_generator(const std::filesystem::path& path, const GeneratorModels& models) {
    TensorFile file;
    file.metadata["kind"] = "generator";
    file.put("encoder.table", models.encoder.table());
    const auto names = DenoiserParams::names();
    const auto params = models.denoiser.params().all();
    for (std::size_t i = 0; i < names.size(); ++i) file.put("denoiser." + names[i], *params[i]);
    file.put("scorer.image_projection", models.scorer.image_projection());
    file.put("scorer.text_table", models.scorer.text_table());
    write_tensor_file(path, file);
}

GeneratorModels load_generator(const std::filesystem::path& path, const GeneratorConfig& config) {
    const TensorFile file = read_tensor_file(path);
    if (auto it = file.metadata.find("kind"); it == file.metadata.end() || it->second != "generator")
        throw InputError("'" + path.string() + "' is not a generator checkpoint");
    GeneratorModels models = GeneratorModels::create(config);
    auto assign = [&](Tensor& dst, const std::string& name) {
        const Tensor& src = file.get(name);
        if (src.shape != dst.shape)
            throw InputError("generator checkpoint tensor '" + name + "' has shape " + shape_string(src.shape) +
                             ", config expects " + shape_string(dst.shape));
        dst = src;
    };
    assign(models.encoder.table(), "encoder.table");
    const auto names = DenoiserParams::names();
    auto params = models.denoiser.params().all();
    for (std::size_t i = 0; i < names.size(); ++i) assign(*params[i], "denoiser." + names[i]);
    assign(models.scorer.image_projection(), "scorer.image_projection");
    assign(models.scorer.text_table(), "scorer.text_table");
    return models;
}

// ---------------------------------------------------------------------------
// Training

std::vector<double> pretrain_denoiser(GeneratorModels& models, const std::vector<CaptionedImage>& data,
                                      const GeneratorTrainConfig& config) {
    if (data.empty()) throw InputError("pretrain_denoiser: no training images");
    std::mt19937_64 rng(config.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    Adam adam(config.denoiser_learning_rate);
    std::vector<double> curve;
    curve.reserve(config.denoiser_steps);
    for (std::size_t step = 0; step < config.denoiser_steps; ++step) {
        const CaptionedImage& ex = data[rng() % data.size()];
        std::vector<std::string> kws;
        for (const auto& k : ex.keywords)
            if (unit(rng) >= config.keyword_dropout) kws.push_back(k);
        if (kws.empty()) kws.push_back(ex.keywords[rng() % ex.keywords.size()]);

        const ConditionSequence cond = models.encoder.encode(kws);
        Tensor noisy = ex.image.pixels;
        Tensor eps(noisy.shape);
        fill_normal(eps, rng, 1.0);
        for (std::size_t i = 0; i < noisy.size(); ++i) noisy[i] += eps[i];

        auto vars = models.denoiser.make_vars(true);
        ad::Var out = models.denoiser.forward(ad::constant(noisy), ad::constant(cond.vectors), vars);
        ad::Var loss = ad::mse(out, ad::constant(ex.image.pixels));
        ad::backward(loss);
        std::vector<Tensor> grads;
        for (const auto& v : vars) grads.push_back(v.grad());
        adam.step(models.denoiser.params().all(), grads);
        curve.push_back(loss.item());
    }
    return curve;
}

std::vector<double> finetune_scorer(ToyScorer& scorer, const std::vector<CaptionedImage>& data,
                                    const GeneratorTrainConfig& config) {
    if (data.size() < 2) throw InputError("finetune_scorer: need at least two captioned images");
    std::mt19937_64 rng(config.seed ^ 0xc11bULL);
    Adam adam(config.scorer_learning_rate);
    std::vector<double> curve;
    const std::size_t batch = std::min(config.scorer_batch, data.size());
    for (std::size_t step = 0; step < config.scorer_steps; ++step) {
        ad::Var table = ad::variable(scorer.text_table());
        std::vector<ad::Var> text_rows;
        Tensor image_rows({batch, scorer.image_projection().dim(1)});
        for (std::size_t b = 0; b < batch; ++b) {
            const CaptionedImage& ex = data[rng() % data.size()];
            const auto ids = scorer.text_tokens(ex.keywords);
            text_rows.push_back(ad::sum_rows(ad::gather_rows(table, ids)));
            const auto e = scorer.embed_image(ex.image);
            std::copy(e.begin(), e.end(), image_rows.row(b).begin());
        }
        ad::Var text = ad::normalize_rows(ad::concat_rows(text_rows));
        ad::Var image = ad::normalize_rows(ad::constant(image_rows));
        ad::Var logits = ad::scale(ad::matmul(text, ad::transpose(image)), 1.0 / config.scorer_temperature);
        std::vector<std::size_t> targets(batch);
        for (std::size_t b = 0; b < batch; ++b) targets[b] = b;
        ad::Var loss = ad::add(ad::cross_entropy_rows(logits, targets),
                               ad::cross_entropy_rows(ad::transpose(logits), targets));
        ad::backward(loss);
        adam.step({&scorer.text_table()}, {table.grad()});
        curve.push_back(loss.item());
    }
    return curve;
}

}  // namespace pmg
