#include "pmg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "pmg/errors.hpp"
#include "pmg/optim.hpp"

namespace pmg {

namespace {

std::string numbered(const std::vector<std::string>& items) {
    if (items.empty()) return "(none)";
    std::string out;
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (i) out += "; ";
        out += std::to_string(i + 1) + ". " + items[i];
    }
    return out;
}

std::vector<Tensor*> state_tensors(TrainableState& s) {
    std::vector<Tensor*> out{&s.multimodal_tokens};
    for (auto& p : s.prefixes) out.push_back(&p);
    out.push_back(&s.mapper_weight);
    out.push_back(&s.mapper_bias);
    return out;
}

std::vector<ad::Var> vars_list(const TrainableVars& v) {
    std::vector<ad::Var> out{v.multimodal_tokens};
    out.insert(out.end(), v.prefixes.begin(), v.prefixes.end());
    out.push_back(v.mapper_weight);
    out.push_back(v.mapper_bias);
    return out;
}

}  // namespace

std::string build_embedding_prompt(const PromptTemplate& tmpl, const SummarizedBehavior& behavior) {
    return "### Principle: " + tmpl.principle + "\n### Human: His historical conversations are: " +
           numbered(behavior.conversation_summaries) + ". His history is: " + numbered(behavior.item_summaries) +
           ".\n### Assistant:";
}

ad::Var build_condition(const ad::Var& soft, const ConditionSequence& hard, std::size_t token_limit) {
    const std::size_t L = soft ? soft.shape().at(0) : 0;
    const std::size_t total = L + hard.vectors.shape.at(0);
    if (total == 0) throw InputError("build_condition: both soft and hard embeddings are empty");
    if (total > token_limit) {
        throw InputError("build_condition: " + std::to_string(total) + " rows exceed the token limit of " +
                         std::to_string(token_limit));
    }
    if (L == 0) return ad::constant(hard.vectors);
    if (hard.rows() == 0) return soft;
    if (soft.shape().at(1) != hard.dim()) throw InputError("build_condition: soft/hard embedding width mismatch");
    std::vector<ad::Var> parts{soft, ad::constant(hard.vectors)};
    return ad::concat_rows(parts);
}

ConditionSequence build_condition(const Tensor& soft, const ConditionSequence& hard, std::size_t token_limit) {
    ad::Var s = soft.size() ? ad::constant(soft) : ad::Var{};
    return ConditionSequence(build_condition(s, hard, token_limit).value());
}

PreparedExample prepare_example(const TrainingExample& example, const PromptTemplate& tmpl,
                                const ToyLanguageModel& lm, const TextEncoder& encoder) {
    PreparedExample p;
    p.user_id = example.user_id;
    p.prompt_tokens = tokenize(build_embedding_prompt(tmpl, example.input_behavior), lm.config().vocab_size);
    p.hard = example.preference_keywords.keywords.empty()
                 ? ConditionSequence::empty(encoder.table().dim(1))
                 : encoder.encode(example.preference_keywords.keywords);
    p.supervision = example.supervision;
    return p;
}

ad::Var example_loss(const PreparedExample& example, const TrainableVars& vars, const ToyLanguageModel& lm,
                     const GeneratorModels& generator, const std::vector<ad::Var>& denoiser_vars,
                     const Tensor& noise) {
    ad::Var soft = soft_preference_embeddings(lm, vars, example.prompt_tokens);
    ad::Var condition = build_condition(soft, example.hard, generator.config.token_limit);
    Tensor noisy = example.supervision.pixels;
    if (noise.shape != noisy.shape) throw InputError("train: noise shape does not match the supervision image");
    for (std::size_t i = 0; i < noisy.size(); ++i) noisy[i] += noise[i];
    ad::Var out = generator.denoiser.forward(ad::constant(noisy), condition, denoiser_vars);
    return ad::mse(out, ad::constant(example.supervision.pixels));
}

Tensor example_noise(const PreparedExample& example, std::uint64_t seed, std::size_t visit, const Shape& shape) {
    std::mt19937_64 rng(seed ^ fnv1a(example.user_id) ^ (0x9e3779b97f4a7c15ULL * (visit + 1)));
    Tensor noise(shape);
    fill_normal(noise, rng, 1.0);
    return noise;
}

double train_step(const PreparedExample& example, TrainableState& state, const ToyLanguageModel& lm,
                  GeneratorModels& generator, const TrainConfig& config, const Tensor& noise) {
    const TrainableVars vars = make_vars(state, true);
    const std::vector<ad::Var> dvars = generator.denoiser.make_vars(config.train_denoiser);
    ad::Var loss = example_loss(example, vars, lm, generator, dvars, noise);
    const double value = loss.item();

    std::vector<Tensor> grads;
    std::vector<Tensor> denoiser_grads;
    if (std::isfinite(value)) {
        ad::backward(loss);
        for (const auto& v : vars_list(vars)) grads.push_back(v.grad());
        if (config.train_denoiser)
            for (const auto& v : dvars) denoiser_grads.push_back(v.grad());
    }
    const double norm = grads.empty() ? std::nan("") : grad_norm(grads);
    if (!std::isfinite(value) || !std::isfinite(norm)) {
        std::ostringstream msg;
        msg << "non-finite training loss for user " << example.user_id << " (loss " << value << ", grad norm "
            << norm << ")";
        throw DivergenceError(msg.str());
    }
    sgd_step(state_tensors(state), grads, config.learning_rate);
    if (config.train_denoiser) sgd_step(generator.denoiser.params().all(), denoiser_grads, config.learning_rate);
    return value;
}

std::vector<GradCheckGroup> gradient_check(const PreparedExample& example, const TrainableState& state,
                                           const ToyLanguageModel& lm, const GeneratorModels& generator,
                                           std::uint64_t seed, std::size_t samples, double step,
                                           double tolerance) {
    const Tensor noise = example_noise(example, seed, 0, example.supervision.pixels.shape);
    const std::vector<ad::Var> dvars = generator.denoiser.make_vars(false);

    const TrainableVars vars = make_vars(state, true);
    ad::Var loss = example_loss(example, vars, lm, generator, dvars, noise);
    ad::backward(loss);

    TrainableState probe = state;
    auto eval = [&] { return example_loss(example, make_vars(probe, false), lm, generator, dvars, noise).item(); };

    struct Group {
        std::string name;
        std::vector<std::pair<Tensor*, Tensor>> members;  // probe tensor, analytic gradient
    };
    std::vector<Group> groups(3);
    groups[0].name = "multimodal_tokens";
    groups[0].members.emplace_back(&probe.multimodal_tokens, vars.multimodal_tokens.grad());
    groups[1].name = "prefixes";
    for (std::size_t l = 0; l < probe.prefixes.size(); ++l)
        groups[1].members.emplace_back(&probe.prefixes[l], vars.prefixes[l].grad());
    groups[2].name = "mapper";
    groups[2].members.emplace_back(&probe.mapper_weight, vars.mapper_weight.grad());
    groups[2].members.emplace_back(&probe.mapper_bias, vars.mapper_bias.grad());

    std::mt19937_64 rng(seed ^ 0x6c7ULL);
    std::vector<GradCheckGroup> report;
    for (auto& g : groups) {
        std::size_t total = 0;
        for (const auto& m : g.members) total += m.first->size();
        GradCheckGroup r{g.name, 0, 0, 0.0};
        if (total == 0) {
            report.push_back(r);
            continue;
        }
        for (std::size_t s = 0; s < samples; ++s) {
            std::size_t flat = rng() % total;
            std::size_t member = 0;
            while (flat >= g.members[member].first->size()) flat -= g.members[member++].first->size();
            Tensor& target = *g.members[member].first;
            const double analytic = g.members[member].second[flat];

            const double saved = target[flat];
            target[flat] = saved + step;
            const double up = eval();
            target[flat] = saved - step;
            const double down = eval();
            target[flat] = saved;
            const double numeric = (up - down) / (2.0 * step);

            const double scale = std::max(std::abs(analytic), std::abs(numeric));
            const double rel = scale < 1e-10 ? 0.0 : std::abs(analytic - numeric) / scale;
            ++r.sampled;
            if (rel < tolerance) ++r.passed;
            r.max_rel_error = std::max(r.max_rel_error, rel);
        }
        report.push_back(r);
    }
    return report;
}

double dataset_loss(const std::vector<PreparedExample>& dataset, const TrainableState& state,
                    const ToyLanguageModel& lm, const GeneratorModels& generator, std::uint64_t seed) {
    if (dataset.empty()) throw InputError("dataset_loss: dataset is empty");
    const TrainableVars vars = make_vars(state, false);
    const std::vector<ad::Var> dvars = generator.denoiser.make_vars(false);
    double total = 0.0;
    for (const auto& ex : dataset) {
        const Tensor noise = example_noise(ex, seed, 0, ex.supervision.pixels.shape);
        total += example_loss(ex, vars, lm, generator, dvars, noise).item();
    }
    return total / static_cast<double>(dataset.size());
}

TrainResult train(const std::vector<TrainingExample>& dataset, TrainableState initial, const ToyLanguageModel& lm,
                  GeneratorModels& generator, const PromptTemplate& tmpl, const TrainConfig& config) {
    if (dataset.empty()) throw InputError("train: dataset is empty");
    if (!(config.learning_rate >= 0.0)) throw InputError("train: learning rate must be non-negative");

    std::vector<PreparedExample> prepared;
    prepared.reserve(dataset.size());
    for (const auto& ex : dataset) prepared.push_back(prepare_example(ex, tmpl, lm, generator.encoder));

    TrainResult result;
    result.state = std::move(initial);
    result.initial_eval = dataset_loss(prepared, result.state, lm, generator, config.seed);
    if (config.grad_check)
        result.grad_check = gradient_check(prepared.front(), result.state, lm, generator, config.seed);

    std::mt19937_64 order_rng(config.seed);
    std::vector<std::size_t> order(prepared.size());
    std::vector<std::size_t> visits(prepared.size(), 0);
    std::size_t cursor = order.size();
    std::size_t above = 0;
    result.losses.reserve(config.steps);
    for (std::size_t step = 0; step < config.steps; ++step) {
        if (cursor == order.size()) {
            std::iota(order.begin(), order.end(), 0);
            std::shuffle(order.begin(), order.end(), order_rng);
            cursor = 0;
        }
        const std::size_t idx = order[cursor++];
        const PreparedExample& ex = prepared[idx];
        const Tensor noise = example_noise(ex, config.seed, visits[idx]++, ex.supervision.pixels.shape);
        double loss = 0.0;
        try {
            loss = train_step(ex, result.state, lm, generator, config, noise);
        } catch (const DivergenceError& e) {
            throw DivergenceError("step " + std::to_string(step) + ": " + e.what());
        }
        result.losses.push_back(loss);

        above = loss > config.divergence_factor * result.losses.front() ? above + 1 : 0;
        if (above >= config.divergence_patience) {
            std::ostringstream msg;
            msg << "training diverged at step " << step << ": loss " << loss << " exceeded "
                << config.divergence_factor << "x the initial loss " << result.losses.front() << " for "
                << above << " consecutive steps";
            throw DivergenceError(msg.str());
        }
    }
    result.final_eval = dataset_loss(prepared, result.state, lm, generator, config.seed);
    return result;
}

double initial_loss(const std::vector<double>& losses, std::size_t window) {
    if (losses.empty()) return 0.0;
    const std::size_t n = std::min(std::max<std::size_t>(window, 1), losses.size());
    return std::accumulate(losses.begin(), losses.begin() + n, 0.0) / n;
}

double final_loss(const std::vector<double>& losses, std::size_t window) {
    if (losses.empty()) return 0.0;
    const std::size_t n = std::min(std::max<std::size_t>(window, 1), losses.size());
    return std::accumulate(losses.end() - n, losses.end(), 0.0) / n;
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<double>& losses) {
    std::ofstream os(path);
    if (!os) throw InputError("cannot write loss curve '" + path.string() + "'");
    os.precision(10);
    os << "step,loss\n";
    for (std::size_t i = 0; i < losses.size(); ++i) os << i << ',' << losses[i] << '\n';
}

}  // namespace pmg
