#include "pmg/pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <json.hpp>

#include "pmg/errors.hpp"
#include "pmg/tensor_io.hpp"

namespace pmg {

using nlohmann::json;

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration

RunConfig default_run_config() {
    RunConfig c;
    c.training.learning_rate = 2.0;
    c.training.steps = 200;
    return c;
}

GeneratorConfig generator_config(const RunConfig& config) {
    GeneratorConfig g = config.generator;
    g.token_limit = config.token_limit;
    g.height = config.corpus.height;
    g.width = config.corpus.width;
    return g;
}

TrainableStateConfig state_config(const RunConfig& config) {
    TrainableStateConfig s = config.state;
    s.multimodal_tokens = config.L;
    s.prefix_length = config.S;
    s.d_llm = config.lm.d_model;
    s.layers = config.lm.layers;
    s.d_gen = config.generator.d_gen;
    return s;
}

namespace {

std::string_view backend_name(BackendKind k) { return k == BackendKind::mock ? "mock" : "http"; }

BackendKind backend_from(const std::string& name) {
    if (name == "mock") return BackendKind::mock;
    if (name == "http") return BackendKind::http;
    throw InputError("unknown backend '" + name + "' (expected mock or http)");
}

// Reads known keys from one JSON object and rejects anything else.
class Section {
public:
    Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
        if (!j_.is_object()) throw InputError("config: '" + name_ + "' must be an object");
    }

    template <typename T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const json::exception& e) {
            throw InputError("config: bad value for '" + name_ + "." + key + "': " + e.what());
        }
    }

    void path(const char* key, fs::path& out) {
        std::string s = out.string();
        get(key, s);
        out = s;
    }

    bool has(const char* key) {
        seen_.insert(key);
        return j_.contains(key);
    }

    const json& sub(const char* key) { return j_.at(key); }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key())) throw InputError("config: unknown key '" + name_ + "." + it.key() + "'");
    }

private:
    const json& j_;
    std::string name_;
    std::set<std::string> seen_;
};

}  // namespace

std::string config_to_json(const RunConfig& c) {
    json j;
    j["scene"] = std::string(to_string(c.scene));
    j["backend"] = {{"llm", backend_name(c.llm_backend)},
                    {"caption", backend_name(c.caption_backend)},
                    {"http",
                     {{"base_url", c.http.base_url},
                      {"path", c.http.path},
                      {"model", c.http.model},
                      {"api_key_env", c.http.api_key_env},
                      {"temperature", c.http.temperature},
                      {"max_tokens", c.http.max_tokens},
                      {"max_attempts", c.http.max_attempts},
                      {"initial_backoff_ms", c.http.initial_backoff.count()},
                      {"backoff_factor", c.http.backoff_factor},
                      {"timeout_s", c.http.timeout.count()}}}};
    j["n"] = c.n;
    j["m"] = c.m;
    j["preference_cap"] = c.preference_cap;
    j["target_cap"] = c.target_cap;
    j["max_summary_tokens"] = c.max_summary_tokens;
    j["L"] = c.L;
    j["S"] = c.S;
    j["alpha"] = c.alpha;
    j["grid"] = json::array();
    for (const auto& w : c.grid) j["grid"].push_back({w.w_p, w.w_t});
    j["token_limit"] = c.token_limit;
    j["seed"] = c.seed;
    j["state_seed"] = c.state_seed;
    j["corpus"] = {{"num_users", c.corpus.num_users},   {"num_styles", c.corpus.num_styles},
                   {"items_per_user", c.corpus.items_per_user}, {"test_users", c.corpus.test_users},
                   {"seed", c.corpus.seed},             {"height", c.corpus.height},
                   {"width", c.corpus.width}};
    j["lm"] = {{"vocab_size", c.lm.vocab_size}, {"d_model", c.lm.d_model},         {"heads", c.lm.heads},
               {"layers", c.lm.layers},         {"mlp_hidden", c.lm.mlp_hidden},   {"context_limit", c.lm.context_limit},
               {"seed", c.lm.seed}};
    j["generator"] = {{"d_gen", c.generator.d_gen},
                      {"text_vocab", c.generator.text_vocab},
                      {"position_scale", c.generator.position_scale},
                      {"hidden", c.generator.hidden},
                      {"steps", c.generator.steps},
                      {"step_noise", c.generator.step_noise},
                      {"d_score", c.generator.d_score},
                      {"seed", c.generator.seed}};
    const auto& g = c.generator_training;
    j["generator_training"] = {{"denoiser_steps", g.denoiser_steps},
                               {"denoiser_learning_rate", g.denoiser_learning_rate},
                               {"keyword_dropout", g.keyword_dropout},
                               {"scorer_steps", g.scorer_steps},
                               {"scorer_batch", g.scorer_batch},
                               {"scorer_learning_rate", g.scorer_learning_rate},
                               {"scorer_temperature", g.scorer_temperature},
                               {"seed", g.seed}};
    const auto& t = c.training;
    j["training"] = {{"learning_rate", t.learning_rate},
                     {"steps", t.steps},
                     {"grad_check", t.grad_check},
                     {"train_denoiser", t.train_denoiser},
                     {"divergence_factor", t.divergence_factor},
                     {"divergence_patience", t.divergence_patience},
                     {"smoothing_window", t.smoothing_window}};
    j["state"] = {{"token_init_std", c.state.token_init_std},
                  {"prefix_init_std", c.state.prefix_init_std},
                  {"mapper_init_std", c.state.mapper_init_std}};
    j["paths"] = {{"runs_dir", c.runs_dir.string()},
                  {"corpus_dir", c.corpus_dir.string()},
                  {"template", c.template_path.string()},
                  {"checkpoint", c.checkpoint.string()},
                  {"generator_checkpoint", c.generator_checkpoint.string()}};
    return j.dump(2);
}

RunConfig config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw InputError("config: " + std::string(e.what()));
    }
    RunConfig c = default_run_config();
    Section root(j, "config");

    std::string scene(to_string(c.scene));
    root.get("scene", scene);
    try {
        c.scene = scene_from_string(scene);
    } catch (const std::exception& e) {
        throw InputError("config: " + std::string(e.what()));
    }

    if (root.has("backend")) {
        Section b(root.sub("backend"), "backend");
        std::string llm(backend_name(c.llm_backend)), cap(backend_name(c.caption_backend));
        b.get("llm", llm);
        b.get("caption", cap);
        c.llm_backend = backend_from(llm);
        c.caption_backend = backend_from(cap);
        if (b.has("http")) {
            Section h(b.sub("http"), "backend.http");
            h.get("base_url", c.http.base_url);
            h.get("path", c.http.path);
            h.get("model", c.http.model);
            h.get("api_key_env", c.http.api_key_env);
            h.get("temperature", c.http.temperature);
            h.get("max_tokens", c.http.max_tokens);
            h.get("max_attempts", c.http.max_attempts);
            long backoff = c.http.initial_backoff.count(), timeout = c.http.timeout.count();
            h.get("initial_backoff_ms", backoff);
            h.get("timeout_s", timeout);
            c.http.initial_backoff = std::chrono::milliseconds(backoff);
            c.http.timeout = std::chrono::seconds(timeout);
            h.get("backoff_factor", c.http.backoff_factor);
            h.finish();
        }
        b.finish();
    }

    root.get("n", c.n);
    root.get("m", c.m);
    root.get("preference_cap", c.preference_cap);
    root.get("target_cap", c.target_cap);
    root.get("max_summary_tokens", c.max_summary_tokens);
    root.get("L", c.L);
    root.get("S", c.S);
    root.get("alpha", c.alpha);
    if (root.has("grid")) {
        std::vector<std::array<double, 2>> grid;
        root.get("grid", grid);
        c.grid.clear();
        for (const auto& [p, t] : grid) c.grid.push_back({p, t});
    }
    root.get("token_limit", c.token_limit);
    root.get("seed", c.seed);
    root.get("state_seed", c.state_seed);

    if (root.has("corpus")) {
        Section s(root.sub("corpus"), "corpus");
        s.get("num_users", c.corpus.num_users);
        s.get("num_styles", c.corpus.num_styles);
        s.get("items_per_user", c.corpus.items_per_user);
        s.get("test_users", c.corpus.test_users);
        s.get("seed", c.corpus.seed);
        s.get("height", c.corpus.height);
        s.get("width", c.corpus.width);
        s.finish();
    }
    if (root.has("lm")) {
        Section s(root.sub("lm"), "lm");
        s.get("vocab_size", c.lm.vocab_size);
        s.get("d_model", c.lm.d_model);
        s.get("heads", c.lm.heads);
        s.get("layers", c.lm.layers);
        s.get("mlp_hidden", c.lm.mlp_hidden);
        s.get("context_limit", c.lm.context_limit);
        s.get("seed", c.lm.seed);
        s.finish();
    }
    if (root.has("generator")) {
        Section s(root.sub("generator"), "generator");
        s.get("d_gen", c.generator.d_gen);
        s.get("text_vocab", c.generator.text_vocab);
        s.get("position_scale", c.generator.position_scale);
        s.get("hidden", c.generator.hidden);
        s.get("steps", c.generator.steps);
        s.get("step_noise", c.generator.step_noise);
        s.get("d_score", c.generator.d_score);
        s.get("seed", c.generator.seed);
        s.finish();
    }
    if (root.has("generator_training")) {
        auto& g = c.generator_training;
        Section s(root.sub("generator_training"), "generator_training");
        s.get("denoiser_steps", g.denoiser_steps);
        s.get("denoiser_learning_rate", g.denoiser_learning_rate);
        s.get("keyword_dropout", g.keyword_dropout);
        s.get("scorer_steps", g.scorer_steps);
        s.get("scorer_batch", g.scorer_batch);
        s.get("scorer_learning_rate", g.scorer_learning_rate);
        s.get("scorer_temperature", g.scorer_temperature);
        s.get("seed", g.seed);
        s.finish();
    }
    if (root.has("training")) {
        auto& t = c.training;
        Section s(root.sub("training"), "training");
        s.get("learning_rate", t.learning_rate);
        s.get("steps", t.steps);
        s.get("grad_check", t.grad_check);
        s.get("train_denoiser", t.train_denoiser);
        s.get("divergence_factor", t.divergence_factor);
        s.get("divergence_patience", t.divergence_patience);
        s.get("smoothing_window", t.smoothing_window);
        s.finish();
    }
    if (root.has("state")) {
        Section s(root.sub("state"), "state");
        s.get("token_init_std", c.state.token_init_std);
        s.get("prefix_init_std", c.state.prefix_init_std);
        s.get("mapper_init_std", c.state.mapper_init_std);
        s.finish();
    }
    if (root.has("paths")) {
        Section s(root.sub("paths"), "paths");
        s.path("runs_dir", c.runs_dir);
        s.path("corpus_dir", c.corpus_dir);
        s.path("template", c.template_path);
        s.path("checkpoint", c.checkpoint);
        s.path("generator_checkpoint", c.generator_checkpoint);
        s.finish();
    }
    root.finish();
    return c;
}

RunConfig load_config(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw InputError("cannot open config '" + path.string() + "'");
    std::stringstream ss;
    ss << is.rdbuf();
    try {
        return config_from_json(ss.str());
    } catch (const InputError& e) {
        throw InputError(path.string() + ": " + e.what());
    }
}

void validate(const RunConfig& c) {
    if (c.n < 1) throw InputError("config: n must be at least 1");
    if (c.preference_cap < 1 || c.preference_cap > kPreferenceKeywordCap)
        throw InputError("config: preference_cap must lie in [1, " + std::to_string(kPreferenceKeywordCap) + "]");
    if (c.target_cap < 1 || c.target_cap > kTargetKeywordCap)
        throw InputError("config: target_cap must lie in [1, " + std::to_string(kTargetKeywordCap) + "]");
    if (c.L < 1) throw InputError("config: L must be at least 1");
    if (!(c.alpha >= 0.0 && c.alpha <= 1.0)) throw InputError("config: alpha must lie in [0, 1]");
    if (c.grid.empty()) throw InputError("config: weight grid is empty");
    for (const auto& w : c.grid)
        if (w.w_p < 0 || w.w_t < 0 || (w.w_p == 0 && w.w_t == 0))
            throw InputError("config: grid weights must be non-negative and not both zero");
    if (c.token_limit < 1) throw InputError("config: token_limit must be positive");
    if (c.lm.heads == 0 || c.lm.d_model % c.lm.heads)
        throw InputError("config: lm.d_model must be divisible by lm.heads");
    if (!(c.training.learning_rate >= 0.0)) throw InputError("config: training.learning_rate must be >= 0");
    for (const auto& [name, p] : {std::pair{"corpus_dir", c.corpus_dir}, std::pair{"template", c.template_path},
                                  std::pair{"checkpoint", c.checkpoint},
                                  std::pair{"generator_checkpoint", c.generator_checkpoint}})
        if (!p.empty() && !fs::exists(p))
            throw InputError("config: paths." + std::string(name) + " '" + p.string() + "' does not exist");
}

fs::path create_run_dir(const RunConfig& config) {
    const std::string snapshot = config_to_json(config);
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y%m%dT%H%M%SZ", &tm);
    char hash[16];
    std::snprintf(hash, sizeof hash, "%08llx",
                  static_cast<unsigned long long>(fnv1a(snapshot) & 0xffffffffULL));
    const std::string base = std::string(stamp) + "-" + hash;

    fs::create_directories(config.runs_dir);
    fs::path dir = config.runs_dir / base;
    for (int k = 1; !fs::create_directory(dir); ++k) dir = config.runs_dir / (base + "-" + std::to_string(k));
    std::ofstream(dir / "config.json") << snapshot << '\n';
    return dir;
}

PromptTemplate resolve_template(const RunConfig& config) {
    if (!config.template_path.empty()) return load_template(config.template_path);
    return PromptTemplate::defaults(config.scene);
}

Backends make_backends(const RunConfig& config) {
    Backends b;
    if (config.llm_backend == BackendKind::mock)
        b.llm = std::make_unique<MockLlm>();
    else
        b.llm = std::make_unique<HttpLlm>(config.http);
    if (config.caption_backend == BackendKind::mock)
        b.captioner = std::make_unique<MockCaptioner>();
    else
        b.captioner = std::make_unique<PromptCaptioner>(*b.llm);
    return b;
}

// ---------------------------------------------------------------------------
// Users

namespace {

KeywordSet capped(KeywordSet set, std::size_t cap) {
    if (set.keywords.size() <= cap) return set;
    for (std::size_t i = cap; i < set.keywords.size(); ++i) set.provenance.erase(set.keywords[i]);
    set.keywords.resize(cap);
    return set;
}

}  // namespace

PreparedUser prepare_user(const Corpus& corpus, const std::string& user_id, const RunConfig& config,
                          const PromptTemplate& tmpl, const Backends& backends, const std::string& target_item) {
    const BehaviorRecord& record = corpus.record(user_id);
    if (record.history.empty()) throw InputError("user '" + user_id + "': no behavior signal");
    std::size_t target_index = record.history.size() - 1;
    if (!target_item.empty()) {
        const auto it = std::find_if(record.history.begin(), record.history.end(),
                                     [&](const ItemFeatures& i) { return i.item_id == target_item; });
        if (it == record.history.end())
            throw InputError("user '" + user_id + "' has no item '" + target_item + "'");
        target_index = static_cast<std::size_t>(it - record.history.begin());
    }

    BehaviorRecord input = record;
    input.history.erase(input.history.begin() + static_cast<std::ptrdiff_t>(target_index));
    input = truncate_behavior(input, config.n, config.m);

    const SummarizeOptions options{config.scene, config.max_summary_tokens};
    PreparedUser u;
    u.user_id = user_id;
    u.behavior = summarize(input, *backends.llm, *backends.captioner, options);

    const ItemFeatures& target = record.history[target_index];
    if (config.scene == Scene::emoticon && !record.conversations.empty()) {
        u.target_summary = record.conversations.back().text;
    } else {
        BehaviorRecord single{user_id, {target}, {}};
        u.target_summary = summarize(single, *backends.llm, *backends.captioner, options).item_summaries.front();
    }
    u.preference = capped(extract_all(tmpl, u.behavior, *backends.llm), config.preference_cap);
    u.target = capped(extract_target(tmpl, u.target_summary, *backends.llm), config.target_cap);

    for (const auto& item : input.history)
        if (item.image_ref) u.history_images.push_back(corpus.image(*item.image_ref));
    if (target.image_ref) u.target_image = corpus.image(*target.image_ref);
    return u;
}

TrainingExample to_training_example(const PreparedUser& user) {
    if (user.target_image.pixels.size() == 0)
        throw InputError("user '" + user.user_id + "': supervision item has no image");
    return {user.user_id, user.behavior, user.target_image, user.preference};
}

std::string_view to_string(AblationVariant v) {
    switch (v) {
        case AblationVariant::full: return "full";
        case AblationVariant::no_embeddings: return "no_embeddings";
        case AblationVariant::no_keywords: return "no_keywords";
        case AblationVariant::no_both: return "no_both";
    }
    return "full";
}

const std::vector<AblationVariant>& all_variants() {
    static const std::vector<AblationVariant> v = {AblationVariant::full, AblationVariant::no_embeddings,
                                                   AblationVariant::no_keywords, AblationVariant::no_both};
    return v;
}

ConditionSequence ConditionBundle::preference() const {
    const std::size_t L = soft.size() ? soft.dim(0) : 0;
    const std::size_t K = hard.vectors.shape.empty() ? 0 : hard.rows();
    const std::size_t d = L ? soft.dim(1) : target.dim();
    Tensor out({L + K, d});
    std::copy(soft.data.begin(), soft.data.end(), out.data.begin());
    if (K) std::copy(hard.vectors.data.begin(), hard.vectors.data.end(), out.data.begin() + L * d);
    return ConditionSequence(std::move(out));
}

ConditionBundle build_conditions(const PreparedUser& user, const ModelSet& models, const PromptTemplate& tmpl,
                                 AblationVariant variant) {
    const bool use_soft = variant == AblationVariant::full || variant == AblationVariant::no_keywords;
    const bool use_hard = variant == AblationVariant::full || variant == AblationVariant::no_embeddings;
    ConditionBundle b;
    if (use_soft) {
        if (!models.state)
            throw InputError("variant " + std::string(to_string(variant)) +
                             " needs soft embeddings but no trained checkpoint is loaded");
        b.soft = soft_preference_embeddings(models.lm, *models.state, build_embedding_prompt(tmpl, user.behavior));
    }
    const std::size_t d = models.generator.config.d_gen;
    b.hard = use_hard ? models.generator.encoder.encode(user.preference.keywords) : ConditionSequence::empty(d);
    b.target = models.generator.encoder.encode(user.target.keywords);
    return b;
}

Selection generate_for_user(const PreparedUser& user, const ModelSet& models, const PromptTemplate& tmpl,
                            const RunConfig& config, AblationVariant variant) {
    const ConditionBundle b = build_conditions(user, models, tmpl, variant);
    const CandidateScorer scorer =
        keyword_scorer(models.generator.scorer, user.preference.keywords, user.target.keywords);
    return select_best(models.generator, b.preference(), b.target, config.grid, scorer, config.alpha,
                       config.seed ^ fnv1a(user.user_id));
}

// ---------------------------------------------------------------------------
// Evaluation

SimilarityRow similarity(const std::string& user_id, const Image& generated, const PreparedUser& user,
                         const FeatureBackend& features) {
    if (user.history_images.empty()) throw InputError("user '" + user_id + "': no history images");
    SimilarityRow row;
    row.user_id = user_id;
    for (const auto& img : user.history_images) {
        row.lpips_history += perceptual_distance(generated, img, features);
        row.ssim_history += ssim(generated, img);
    }
    row.lpips_history /= static_cast<double>(user.history_images.size());
    row.ssim_history /= static_cast<double>(user.history_images.size());
    row.lpips_target = perceptual_distance(generated, user.target_image, features);
    row.ssim_target = ssim(generated, user.target_image);
    return row;
}

SimilarityReport run_ablation(const std::vector<PreparedUser>& users, AblationVariant variant,
                              const ModelSet& models, const PromptTemplate& tmpl, const RunConfig& config,
                              const FeatureBackend& features) {
    if ((variant == AblationVariant::full || variant == AblationVariant::no_keywords) && !models.state)
        throw InputError("ablation variant " + std::string(to_string(variant)) +
                         " requires a trained checkpoint (paths.checkpoint)");
    SimilarityReport report;
    report.variant = variant;
    report.mean.user_id = "mean";
    for (const auto& u : users) {
        const Selection sel = generate_for_user(u, models, tmpl, config, variant);
        report.rows.push_back(similarity(u.user_id, sel.chosen().image, u, features));
    }
    const double n = static_cast<double>(std::max<std::size_t>(report.rows.size(), 1));
    for (const auto& r : report.rows) {
        report.mean.lpips_history += r.lpips_history / n;
        report.mean.lpips_target += r.lpips_target / n;
        report.mean.ssim_history += r.ssim_history / n;
        report.mean.ssim_target += r.ssim_target / n;
    }
    return report;
}

void write_ablation_csv(const fs::path& path, const std::vector<SimilarityReport>& reports) {
    std::ofstream os(path);
    if (!os) throw InputError("cannot write '" + path.string() + "'");
    os << std::setprecision(8) << "variant,lpips_history,lpips_target,ssim_history,ssim_target\n";
    for (const auto& r : reports)
        os << to_string(r.variant) << ',' << r.mean.lpips_history << ',' << r.mean.lpips_target << ','
           << r.mean.ssim_history << ',' << r.mean.ssim_target << '\n';
}

ExportMode export_mode_from_string(std::string_view name) {
    if (name == "averaged") return ExportMode::averaged;
    if (name == "generated") return ExportMode::generated;
    throw InputError("unknown export mode '" + std::string(name) + "' (expected averaged or generated)");
}

std::vector<double> export_user_features(const PreparedUser& user, ExportMode mode, const ModelSet& models,
                                         const PromptTemplate& tmpl, const RunConfig& config) {
    const ToyScorer& scorer = models.generator.scorer;
    if (mode == ExportMode::averaged) {
        if (user.history_images.empty()) throw InputError("user '" + user.user_id + "': empty history");
        std::vector<double> mean(models.generator.config.d_score, 0.0);
        for (const auto& img : user.history_images) {
            const auto e = scorer.embed_image(img);
            for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += e[i];
        }
        for (auto& v : mean) v /= static_cast<double>(user.history_images.size());
        return mean;
    }
    if (!models.state) throw InputError("generated-user export requires a trained checkpoint (paths.checkpoint)");
    const ConditionBundle b = build_conditions(user, models, tmpl, AblationVariant::full);
    const ConditionSequence cond = combine_conditions(b.preference(), ConditionSequence::empty(b.target.dim()),
                                                      {1.0, 0.0}, config.token_limit);
    return scorer.embed_image(generate(models.generator, cond, config.seed ^ fnv1a(user.user_id)));
}

void write_feature_export(const fs::path& path, const std::vector<std::string>& user_ids,
                          const std::vector<std::vector<double>>& features, ExportMode mode) {
    if (user_ids.size() != features.size()) throw InputError("feature export: id/feature count mismatch");
    const std::size_t d = features.empty() ? 0 : features.front().size();
    Tensor t({features.size(), d});
    json index = json::object();
    for (std::size_t i = 0; i < features.size(); ++i) {
        if (features[i].size() != d) throw InputError("feature export: ragged feature rows");
        std::copy(features[i].begin(), features[i].end(), t.row(i).begin());
        index[user_ids[i]] = i;
    }
    TensorFile file;
    file.metadata["kind"] = "user_features";
    file.metadata["mode"] = mode == ExportMode::averaged ? "averaged" : "generated";
    file.metadata["dim"] = std::to_string(d);
    file.metadata["index"] = index.dump();
    file.put("features", std::move(t));
    write_tensor_file(path, file);
}

std::vector<CaptionedImage> generator_training_data(const Corpus& corpus) {
    std::vector<CaptionedImage> data;
    for (const auto& uid : corpus.train_users)
        for (const auto& item : corpus.record(uid).history)
            if (item.image_ref && !item.tags.empty()) data.push_back({item.tags, corpus.image(*item.image_ref)});
    return data;
}

GeneratorModels obtain_generator(const RunConfig& config, const Corpus& corpus) {
    const GeneratorConfig g = generator_config(config);
    if (!config.generator_checkpoint.empty()) return load_generator(config.generator_checkpoint, g);
    GeneratorModels models = GeneratorModels::create(g);
    const auto data = generator_training_data(corpus);
    pretrain_denoiser(models, data, config.generator_training);
    finetune_scorer(models.scorer, data, config.generator_training);
    return models;
}

// ---------------------------------------------------------------------------
// Commands

namespace {

Corpus require_corpus(const RunConfig& config) {
    if (config.corpus_dir.empty())
        throw InputError("no corpus given: set paths.corpus_dir or pass --corpus");
    return load_corpus(config.corpus_dir);
}

TrainableState load_checked_state(const RunConfig& config) {
    TrainableState s = load_state(config.checkpoint);
    const TrainableStateConfig sc = state_config(config);
    if (s.multimodal_tokens.shape != Shape{sc.multimodal_tokens, sc.d_llm} || s.prefixes.size() != sc.layers ||
        s.prefix_length() != sc.prefix_length || s.mapper_weight.shape != Shape{sc.d_llm, sc.d_gen})
        throw InputError("checkpoint '" + config.checkpoint.string() + "' does not match the configured L/S/dims");
    return s;
}

ModelSet load_models(const RunConfig& config, const Corpus& corpus, bool need_state) {
    ModelSet models{ToyLanguageModel(config.lm), obtain_generator(config, corpus), std::nullopt};
    if (!config.checkpoint.empty())
        models.state = load_checked_state(config);
    else if (need_state)
        throw InputError("a trained checkpoint is required: set paths.checkpoint or pass --checkpoint");
    return models;
}

std::vector<std::string> select_users(const Corpus& corpus, const std::vector<std::string>& requested,
                                      const std::vector<std::string>& fallback) {
    if (requested.empty()) return fallback;
    for (const auto& u : requested) corpus.record(u);
    return requested;
}

std::vector<std::string> all_user_ids(const Corpus& corpus) {
    std::vector<std::string> ids;
    for (const auto& r : corpus.records) ids.push_back(r.user_id);
    return ids;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path);
    if (!os) throw InputError("cannot write '" + path.string() + "'");
    os << text << '\n';
}

}  // namespace

fs::path cmd_make_corpus(const RunConfig& config) {
    validate(config);
    const Corpus corpus = make_corpus(config.corpus);
    const ToyLpipsFeatures features;
    const StyleSeparation sep = style_separation(corpus, features);
    if (!(sep.within < sep.across))
        throw Error("corpus calibration failed: within-style distance " + std::to_string(sep.within) +
                    " is not below across-style distance " + std::to_string(sep.across));
    const fs::path dir = create_run_dir(config);
    save_corpus(dir / "corpus", corpus);
    write_text(dir / "calibration.json", json{{"within_style", sep.within}, {"across_style", sep.across}}.dump(2));
    return dir;
}

fs::path cmd_extract(const RunConfig& config, const CommandOptions& options) {
    validate(config);
    const Corpus corpus = require_corpus(config);
    const PromptTemplate tmpl = resolve_template(config);
    const Backends backends = make_backends(config);
    const auto users = select_users(corpus, options.users, all_user_ids(corpus));
    const fs::path dir = create_run_dir(config);
    fs::create_directories(dir / "keywords");
    for (const auto& uid : users) {
        const PreparedUser u = prepare_user(corpus, uid, config, tmpl, backends, options.target);
        write_text(dir / "keywords" / (uid + ".preference.json"), keyword_set_to_json(u.preference));
        write_text(dir / "keywords" / (uid + ".target.json"), keyword_set_to_json(u.target));
    }
    return dir;
}

fs::path cmd_train(const RunConfig& config) {
    validate(config);
    const Corpus corpus = require_corpus(config);
    const PromptTemplate tmpl = resolve_template(config);
    const Backends backends = make_backends(config);
    const fs::path dir = create_run_dir(config);

    GeneratorModels generator = obtain_generator(config, corpus);
    save_generator(dir / "generator.pmgt", generator);

    std::vector<TrainingExample> dataset;
    for (const auto& uid : corpus.train_users)
        dataset.push_back(to_training_example(prepare_user(corpus, uid, config, tmpl, backends)));

    const ToyLanguageModel lm(config.lm);
    TrainableState initial = TrainableState::initialize(state_config(config), config.state_seed);
    TrainConfig tc = config.training;
    tc.seed = config.seed;
    const TrainResult result = train(dataset, std::move(initial), lm, generator, tmpl, tc);

    save_state(dir / "state.pmgt", result.state);
    if (tc.train_denoiser) save_generator(dir / "generator.pmgt", generator);
    write_loss_csv(dir / "loss.csv", result.losses);
    json summary{{"steps", result.losses.size()},
                 {"initial_eval_loss", result.initial_eval},
                 {"final_eval_loss", result.final_eval},
                 {"initial_loss", initial_loss(result.losses, tc.smoothing_window)},
                 {"final_loss", final_loss(result.losses, tc.smoothing_window)}};
    if (!result.grad_check.empty()) {
        summary["grad_check"] = json::array();
        for (const auto& g : result.grad_check)
            summary["grad_check"].push_back({{"group", g.name},
                                             {"sampled", g.sampled},
                                             {"passed", g.passed},
                                             {"max_rel_error", g.max_rel_error}});
    }
    write_text(dir / "train_summary.json", summary.dump(2));
    return dir;
}

fs::path cmd_generate(const RunConfig& config, const CommandOptions& options) {
    validate(config);
    if (options.users.size() != 1) throw InputError("generate needs exactly one --user");
    const Corpus corpus = require_corpus(config);
    const PromptTemplate tmpl = resolve_template(config);
    const Backends backends = make_backends(config);

    AblationVariant variant = AblationVariant::full;
    if (options.no_embeddings && options.no_keywords)
        variant = AblationVariant::no_both;
    else if (options.no_embeddings)
        variant = AblationVariant::no_embeddings;
    else if (options.no_keywords)
        variant = AblationVariant::no_keywords;
    const bool need_state = variant == AblationVariant::full || variant == AblationVariant::no_keywords;

    const ModelSet models = load_models(config, corpus, need_state);
    const PreparedUser user = prepare_user(corpus, options.users.front(), config, tmpl, backends, options.target);
    const Selection sel = generate_for_user(user, models, tmpl, config, variant);

    const fs::path dir = create_run_dir(config);
    fs::create_directories(dir / "candidates");
    std::vector<std::string> paths;
    for (std::size_t i = 0; i < sel.candidates.size(); ++i) {
        const std::string rel = "candidates/" + std::to_string(i) + ".png";
        write_png(dir / rel, sel.candidates[i].image);
        paths.push_back(rel);
    }
    write_candidate_report(dir / "report.json", sel, config.alpha, paths);
    write_png(dir / "chosen.png", sel.chosen().image);
    TensorFile sidecar;
    sidecar.metadata["kind"] = "image";
    sidecar.put("pixels", sel.chosen().image.pixels);
    write_tensor_file(dir / "chosen.pmgt", sidecar);
    return dir;
}

fs::path cmd_evaluate(const RunConfig& config) {
    validate(config);
    const Corpus corpus = require_corpus(config);
    const PromptTemplate tmpl = resolve_template(config);
    const Backends backends = make_backends(config);
    const ModelSet models = load_models(config, corpus, true);

    std::vector<PreparedUser> users;
    for (const auto& uid : corpus.test_users) users.push_back(prepare_user(corpus, uid, config, tmpl, backends));
    const ToyLpipsFeatures features;
    std::vector<SimilarityReport> reports;
    for (AblationVariant v : all_variants()) reports.push_back(run_ablation(users, v, models, tmpl, config, features));

    const fs::path dir = create_run_dir(config);
    write_ablation_csv(dir / "ablation.csv", reports);
    std::ofstream os(dir / "ablation_per_user.csv");
    os << std::setprecision(8) << "variant,user_id,lpips_history,lpips_target,ssim_history,ssim_target\n";
    for (const auto& r : reports)
        for (const auto& row : r.rows)
            os << to_string(r.variant) << ',' << row.user_id << ',' << row.lpips_history << ','
               << row.lpips_target << ',' << row.ssim_history << ',' << row.ssim_target << '\n';
    return dir;
}

fs::path cmd_export_features(const RunConfig& config, const CommandOptions& options) {
    validate(config);
    const Corpus corpus = require_corpus(config);
    const PromptTemplate tmpl = resolve_template(config);
    const Backends backends = make_backends(config);
    const ModelSet models = load_models(config, corpus, options.mode == ExportMode::generated);
    const auto users = select_users(corpus, options.users, all_user_ids(corpus));

    std::vector<std::vector<double>> features;
    for (const auto& uid : users) {
        const PreparedUser u = prepare_user(corpus, uid, config, tmpl, backends);
        features.push_back(export_user_features(u, options.mode, models, tmpl, config));
    }
    const fs::path dir = create_run_dir(config);
    write_feature_export(dir / "features.pmgt", users, features, options.mode);
    return dir;
}

}  // namespace pmg
