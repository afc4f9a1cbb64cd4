#include "pmg/llm.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "pmg/errors.hpp"
#include "pmg/lexicon.hpp"
#include "pmg/prompt.hpp"
#include "pmg/tensor_io.hpp"

namespace pmg {

// ---------------------------------------------------------------------------
// Mock generation

namespace {

std::string lower(std::string_view s) {
    std::string out(s);
    for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

bool is_word_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '-'; }

std::size_t count_phrase(const std::string& haystack, const std::string& phrase) {
    std::size_t count = 0;
    for (std::size_t pos = haystack.find(phrase); pos != std::string::npos;
         pos = haystack.find(phrase, pos + 1)) {
        const bool left_ok = pos == 0 || !is_word_char(haystack[pos - 1]);
        const std::size_t end = pos + phrase.size();
        const bool right_ok = end == haystack.size() || !is_word_char(haystack[end]);
        // "t-shirt" still counts as "shirt" and "long-sleeve" style compounds
        // are rare enough in the corpus to ignore.
        const bool hyphen_left = pos > 0 && haystack[pos - 1] == '-';
        if ((left_ok || hyphen_left) && right_ok) ++count;
    }
    return count;
}

// Lexicon words present in `bag`, by descending count then lexicon order.
std::vector<std::string> ranked_words(const std::string& bag, const std::vector<std::string>& words,
                                      std::size_t cap) {
    std::vector<std::pair<std::size_t, std::size_t>> hits;  // (count, lexicon index)
    for (std::size_t i = 0; i < words.size(); ++i) {
        if (const std::size_t c = count_phrase(bag, words[i]); c > 0) hits.emplace_back(c, i);
    }
    std::stable_sort(hits.begin(), hits.end(), [](auto a, auto b) { return a.first > b.first; });
    std::vector<std::string> out;
    for (std::size_t i = 0; i < hits.size() && out.size() < cap; ++i) out.push_back(words[hits[i].second]);
    return out;
}

std::string between(const std::string& text, const std::string& open, const std::string& close) {
    const std::size_t a = text.find(open);
    if (a == std::string::npos) return {};
    const std::size_t start = a + open.size();
    const std::size_t b = text.find(close, start);
    return text.substr(start, b == std::string::npos ? std::string::npos : b - start);
}

std::string first_sentence(const std::string& text) {
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if ((c == '.' || c == '!' || c == '?') && (i + 1 == text.size() || text[i + 1] == ' ')) {
            return text.substr(0, i);
        }
    }
    return text;
}

std::string mock_summary(const std::string& prompt) {
    std::string body;
    for (const char* marker : {"introduction \"", "description \""}) {
        body = between(prompt, marker, "\"");
        if (!body.empty()) break;
    }
    if (body.empty()) {
        for (const char* marker : {"Genre: \"", "tags: \""}) {
            body = between(prompt, marker, "\"");
            if (!body.empty()) break;
        }
    }
    if (body.empty()) throw BackendError("mock LLM: summarization prompt carries no content", false);
    return first_sentence(body);
}

Scene preference_scene(const std::string& prompt) {
    if (prompt.find("movie lover") != std::string::npos) return Scene::movie;
    if (prompt.find("clothes lover") != std::string::npos) return Scene::costume;
    if (prompt.find("emoticon interests") != std::string::npos) return Scene::emoticon;
    throw BackendError("mock LLM: unknown scene in preference prompt", false);
}

Scene target_scene(const std::string& prompt) {
    if (prompt.find("Here is a movie") != std::string::npos) return Scene::movie;
    if (prompt.find("piece of clothing") != std::string::npos) return Scene::costume;
    if (prompt.find("current conversation") != std::string::npos) return Scene::emoticon;
    throw BackendError("mock LLM: unknown scene in target prompt", false);
}

std::string mock_preference(const std::string& prompt) {
    const Scene scene = preference_scene(prompt);
    const std::string attribute = lower(between(prompt, "especially on ", "."));
    const std::size_t bag_start = prompt.find("His historical conversations are:");
    const std::string bag = lower(bag_start == std::string::npos ? prompt : prompt.substr(bag_start));

    for (const auto& entry : lexicon::words_for(scene)) {
        if (entry.attribute != attribute) continue;
        auto words = ranked_words(bag, entry.words, kPreferenceKeywordCap);
        if (!words.empty()) return render_keywords(words);
        break;
    }
    return render_keywords({"unspecified " + attribute});
}

std::string mock_target(const std::string& prompt) {
    const Scene scene = target_scene(prompt);
    const std::string bag = lower(between(prompt, "### Human:", "Please describe"));
    if (scene == Scene::emoticon) {
        for (const auto& rule : lexicon::mood_rules()) {
            for (const auto& trigger : rule.triggers) {
                if (count_phrase(bag, trigger) > 0) return render_keywords(rule.keywords);
            }
        }
        return render_keywords(lexicon::neutral_mood().keywords);
    }
    std::vector<std::string> all;
    for (const auto& entry : lexicon::words_for(scene)) all.insert(all.end(), entry.words.begin(), entry.words.end());
    auto words = ranked_words(bag, all, kTargetKeywordCap);
    if (words.empty()) words.push_back("unspecified item");
    return render_keywords(words);
}

}  // namespace

std::string MockLlm::generate(const std::string& prompt) const {
    if (prompt.find("Please summarize this") != std::string::npos) return mock_summary(prompt);
    if (prompt.find("Please caption it") != std::string::npos) return "a picture";
    if (prompt.find("especially on ") != std::string::npos) return mock_preference(prompt);
    if (prompt.find("with 5 keywords") != std::string::npos) return mock_target(prompt);
    throw BackendError("mock LLM has no rule for this prompt", false);
}

std::string MockCaptioner::caption(const std::string& image_ref) const {
    const auto it = table_.find(image_ref);
    return it == table_.end() ? std::string{} : it->second;
}

std::string PromptCaptioner::build_prompt(const std::string& image_ref) {
    return "### Human: Here is a poster <" + image_ref + ">. Please caption it.\n"
           "### Assistant: The caption of this poster is:";
}

std::string PromptCaptioner::caption(const std::string& image_ref) const {
    return llm_.generate(build_prompt(image_ref));
}

// ---------------------------------------------------------------------------
// HTTP

std::string HttpLlm::generate(const std::string& prompt) const {
    std::lock_guard lock(mutex_);
    const char* key = std::getenv(config_.api_key_env.c_str());
    if (!key || !*key)
        throw BackendError("environment variable " + config_.api_key_env + " is not set", false);

    httplib::Client client(config_.base_url);
    client.set_connection_timeout(config_.timeout);
    client.set_read_timeout(config_.timeout);
    const httplib::Headers headers = {{"Authorization", std::string("Bearer ") + key}};
    const nlohmann::json body = {
        {"model", config_.model},
        {"messages", nlohmann::json::array({{{"role", "user"}, {"content", prompt}}})},
        {"temperature", config_.temperature},
        {"max_tokens", config_.max_tokens},
    };
    const std::string payload = body.dump();

    auto delay = config_.initial_backoff;
    std::string last_error;
    for (int attempt = 1; attempt <= config_.max_attempts; ++attempt) {
        auto res = client.Post(config_.path, headers, payload, "application/json");
        if (!res) {
            last_error = "network error: " + httplib::to_string(res.error());
        } else if (res->status == 200) {
            try {
                const auto reply = nlohmann::json::parse(res->body);
                const auto& choice = reply.at("choices").at(0);
                if (choice.contains("message")) return choice["message"].at("content").get<std::string>();
                return choice.at("text").get<std::string>();
            } catch (const nlohmann::json::exception& e) {
                throw BackendError(std::string("malformed completion response: ") + e.what(), false);
            }
        } else if (res->status == 429 || res->status >= 500) {
            last_error = "HTTP status " + std::to_string(res->status);
        } else {
            throw BackendError("HTTP status " + std::to_string(res->status) + ": " + res->body, false);
        }
        if (attempt < config_.max_attempts) {
            std::this_thread::sleep_for(delay);
            delay = std::chrono::milliseconds(
                static_cast<long>(static_cast<double>(delay.count()) * config_.backoff_factor));
        }
    }
    throw BackendError("completion failed after " + std::to_string(config_.max_attempts) +
                           " attempts (" + last_error + ")",
                       true);
}

// ---------------------------------------------------------------------------
// Toy language model

std::vector<std::size_t> tokenize(std::string_view text, std::size_t vocab_size) {
    std::vector<std::size_t> ids;
    std::string word;
    auto flush = [&] {
        if (!word.empty()) ids.push_back(fnv1a(word) % vocab_size);
        word.clear();
    };
    for (char c : text) {
        if (std::isalnum(static_cast<unsigned char>(c))) word += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        else flush();
    }
    flush();
    return ids;
}

namespace {

Tensor sinusoidal_positions(std::size_t count, std::size_t dim) {
    Tensor t({count, dim});
    for (std::size_t p = 0; p < count; ++p)
        for (std::size_t i = 0; i < dim; ++i) {
            const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(dim));
            t.at(p, i) = (i % 2 == 0) ? std::sin(p * rate) : std::cos(p * rate);
        }
    return t;
}

ad::Var c(const Tensor& t) { return ad::constant(t); }

}  // namespace

ToyLanguageModel::ToyLanguageModel(ToyLmConfig config) : config_(config) {
    if (config_.d_model % config_.heads != 0) throw InputError("toy LM: d_model must be divisible by heads");
    std::mt19937_64 rng(config_.seed);
    const std::size_t d = config_.d_model, h = config_.mlp_hidden;
    token_embedding_ = random_normal({config_.vocab_size, d}, rng, 1.0);
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    for (std::size_t l = 0; l < config_.layers; ++l) {
        Layer layer;
        layer.ln1_gain = Tensor({d}, 1.0);
        layer.ln1_bias = Tensor({d}, 0.0);
        layer.wq = random_normal({d, d}, rng, sd);
        layer.wk = random_normal({d, d}, rng, sd);
        layer.wv = random_normal({d, d}, rng, sd);
        layer.wo = random_normal({d, d}, rng, sd);
        layer.ln2_gain = Tensor({d}, 1.0);
        layer.ln2_bias = Tensor({d}, 0.0);
        layer.w1 = random_normal({d, h}, rng, sd);
        layer.b1 = random_normal({h}, rng, 0.1);
        layer.w2 = random_normal({h, d}, rng, 1.0 / std::sqrt(static_cast<double>(h)));
        layer.b2 = random_normal({d}, rng, 0.1);
        layers_.push_back(std::move(layer));
    }
    final_gain_ = Tensor({d}, 1.0);
    final_bias_ = Tensor({d}, 0.0);
}

std::vector<const Tensor*> ToyLanguageModel::parameters() const {
    std::vector<const Tensor*> out{&token_embedding_};
    for (const auto& l : layers_) {
        for (const Tensor* t : {&l.ln1_gain, &l.ln1_bias, &l.wq, &l.wk, &l.wv, &l.wo, &l.ln2_gain, &l.ln2_bias,
                                &l.w1, &l.b1, &l.w2, &l.b2})
            out.push_back(t);
    }
    out.push_back(&final_gain_);
    out.push_back(&final_bias_);
    return out;
}

ForwardOutput ToyLanguageModel::forward(std::span<const ad::Var> prefixes, std::span<const std::size_t> prompt_tokens,
                                        const ad::Var& multimodal) const {
    const std::size_t d = config_.d_model;
    const std::size_t P = prompt_tokens.size();
    const std::size_t L = multimodal.shape().at(0);
    const std::size_t T = P + L;
    if (prefixes.size() != layers_.size())
        throw InputError("toy LM: expected " + std::to_string(layers_.size()) + " prefix blocks, got " +
                         std::to_string(prefixes.size()));
    if (multimodal.shape().at(1) != d) throw InputError("toy LM: multimodal token width mismatch");
    const std::size_t S = prefixes.empty() ? 0 : prefixes.front().shape().at(0);

    Tensor embedded({P, d});
    for (std::size_t i = 0; i < P; ++i) {
        const std::size_t id = prompt_tokens[i];
        if (id >= config_.vocab_size) throw InputError("toy LM: token id outside base vocabulary");
        std::copy_n(token_embedding_.data.begin() + id * d, d, embedded.data.begin() + i * d);
    }
    std::vector<ad::Var> parts{c(embedded), multimodal};
    ad::Var x = ad::add(ad::concat_rows(parts), c(sinusoidal_positions(T, d)));

    const std::size_t heads = config_.heads, dh = d / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::size_t context = 0;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const Layer& layer = layers_[l];
        if (prefixes[l].shape().at(0) != S || prefixes[l].shape().at(1) != d)
            throw InputError("toy LM: prefix blocks must all be [S, d_model]");
        ad::Var h = ad::layer_norm_rows(x, c(layer.ln1_gain), c(layer.ln1_bias));
        ad::Var q = ad::matmul(h, c(layer.wq));
        std::vector<ad::Var> kv_parts{prefixes[l], h};
        ad::Var kv_src = S > 0 ? ad::concat_rows(kv_parts) : h;
        ad::Var k = ad::matmul(kv_src, c(layer.wk));
        ad::Var v = ad::matmul(kv_src, c(layer.wv));
        context = kv_src.shape()[0];

        std::vector<ad::Var> head_out;
        for (std::size_t hd = 0; hd < heads; ++hd) {
            ad::Var qh = ad::slice_cols(q, hd * dh, dh);
            ad::Var kh = ad::slice_cols(k, hd * dh, dh);
            ad::Var vh = ad::slice_cols(v, hd * dh, dh);
            ad::Var scores = ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt);
            ad::Var attn = ad::causal_softmax_rows(scores, S);
            head_out.push_back(ad::matmul(attn, vh));
        }
        x = ad::add(x, ad::matmul(ad::concat_cols(head_out), c(layer.wo)));

        ad::Var h2 = ad::layer_norm_rows(x, c(layer.ln2_gain), c(layer.ln2_bias));
        ad::Var m = ad::tanh(ad::add_row(ad::matmul(h2, c(layer.w1)), c(layer.b1)));
        x = ad::add(x, ad::add_row(ad::matmul(m, c(layer.w2)), c(layer.b2)));
    }
    ad::Var out = ad::layer_norm_rows(x, c(final_gain_), c(final_bias_));
    return {ad::slice_rows(out, 0, P), ad::slice_rows(out, P, L), context};
}

// ---------------------------------------------------------------------------
// Trainable state

TrainableState TrainableState::initialize(const TrainableStateConfig& config, std::uint64_t seed) {
    if (config.multimodal_tokens == 0) throw InputError("need at least one multimodal token");
    std::mt19937_64 rng(seed);
    TrainableState s;
    s.multimodal_tokens = random_normal({config.multimodal_tokens, config.d_llm}, rng, config.token_init_std);
    for (std::size_t l = 0; l < config.layers; ++l)
        s.prefixes.push_back(random_normal({config.prefix_length, config.d_llm}, rng, config.prefix_init_std));
    s.mapper_weight = random_normal({config.d_llm, config.d_gen}, rng, config.mapper_init_std);
    s.mapper_bias = Tensor({config.d_gen}, 0.0);
    return s;
}

void save_state(const std::filesystem::path& path, const TrainableState& state) {
    TensorFile file;
    file.metadata["kind"] = "trainable_state";
    file.put("multimodal_tokens", state.multimodal_tokens);
    for (std::size_t l = 0; l < state.prefixes.size(); ++l) file.put("prefix." + std::to_string(l), state.prefixes[l]);
    file.put("mapper.weight", state.mapper_weight);
    file.put("mapper.bias", state.mapper_bias);
    write_tensor_file(path, file);
}

TrainableState load_state(const std::filesystem::path& path) {
    const TensorFile file = read_tensor_file(path);
    if (auto it = file.metadata.find("kind"); it == file.metadata.end() || it->second != "trainable_state")
        throw InputError("'" + path.string() + "' is not a trainable-state checkpoint");
    TrainableState s;
    s.multimodal_tokens = file.get("multimodal_tokens");
    for (std::size_t l = 0; file.contains("prefix." + std::to_string(l)); ++l)
        s.prefixes.push_back(file.get("prefix." + std::to_string(l)));
    s.mapper_weight = file.get("mapper.weight");
    s.mapper_bias = file.get("mapper.bias");
    return s;
}

TrainableVars make_vars(const TrainableState& state, bool requires_grad) {
    auto wrap = [requires_grad](const Tensor& t) { return requires_grad ? ad::variable(t) : ad::constant(t); };
    TrainableVars v;
    v.multimodal_tokens = wrap(state.multimodal_tokens);
    for (const auto& p : state.prefixes) v.prefixes.push_back(wrap(p));
    v.mapper_weight = wrap(state.mapper_weight);
    v.mapper_bias = wrap(state.mapper_bias);
    return v;
}

ad::Var soft_preference_embeddings(const ToyLanguageModel& lm, const TrainableVars& vars,
                                   std::span<const std::size_t> prompt_tokens) {
    const std::size_t L = vars.multimodal_tokens.shape().at(0);
    const std::size_t S = vars.prefixes.empty() ? 0 : vars.prefixes.front().shape().at(0);
    const std::size_t needed = prompt_tokens.size() + L + S;
    if (needed > lm.config().context_limit) {
        throw InputError("prompt overflows the language-model context by " +
                         std::to_string(needed - lm.config().context_limit) + " tokens");
    }
    const ForwardOutput out = lm.forward(vars.prefixes, prompt_tokens, vars.multimodal_tokens);
    return ad::add_row(ad::matmul(out.multimodal_embeddings, vars.mapper_weight), vars.mapper_bias);
}

Tensor soft_preference_embeddings(const ToyLanguageModel& lm, const TrainableState& state, const std::string& prompt) {
    const auto tokens = tokenize(prompt, lm.config().vocab_size);
    return soft_preference_embeddings(lm, make_vars(state, false), tokens).value();
}

}  // namespace pmg
