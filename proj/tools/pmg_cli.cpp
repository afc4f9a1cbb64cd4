// pmg: command-line front end for the personalized generation pipeline.

#include <iostream>

#include <CLI11.hpp>

#include "pmg/errors.hpp"
#include "pmg/pipeline.hpp"

namespace {

struct Flags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::vector<std::string> users;
    std::string target;
    bool no_embeddings = false;
    bool no_keywords = false;
    std::string backend;
    std::string corpus;
    std::string checkpoint;
    std::string generator;
    std::string runs_dir;
    std::string mode = "averaged";
    std::optional<std::size_t> steps;
};

pmg::RunConfig resolve(const Flags& f) {
    pmg::RunConfig c = f.config.empty() ? pmg::default_run_config() : pmg::load_config(f.config);
    if (f.seed) c.seed = *f.seed;
    if (!f.backend.empty()) {
        if (f.backend != "mock" && f.backend != "http")
            throw pmg::InputError("--backend must be mock or http");
        c.llm_backend = c.caption_backend = f.backend == "mock" ? pmg::BackendKind::mock : pmg::BackendKind::http;
    }
    if (!f.corpus.empty()) c.corpus_dir = f.corpus;
    if (!f.checkpoint.empty()) c.checkpoint = f.checkpoint;
    if (!f.generator.empty()) c.generator_checkpoint = f.generator;
    if (!f.runs_dir.empty()) c.runs_dir = f.runs_dir;
    if (f.steps) c.training.steps = *f.steps;
    return c;
}

pmg::CommandOptions options(const Flags& f) {
    pmg::CommandOptions o;
    o.users = f.users;
    o.target = f.target;
    o.no_embeddings = f.no_embeddings;
    o.no_keywords = f.no_keywords;
    o.mode = pmg::export_mode_from_string(f.mode);
    return o;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Personalized multimodal generation pipeline"};
    app.require_subcommand(1);
    Flags f;

    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", f.config, "Run configuration JSON")->check(CLI::ExistingFile);
        sub->add_option("--seed", f.seed, "Override the run seed");
        sub->add_option("--backend", f.backend, "LLM and caption backend: mock or http");
        sub->add_option("--corpus", f.corpus, "Corpus directory (overrides paths.corpus_dir)");
        sub->add_option("--runs-dir", f.runs_dir, "Parent directory for run outputs");
        sub->add_option("--generator", f.generator, "Generator checkpoint (overrides paths.generator_checkpoint)");
    };

    auto* make = app.add_subcommand("make-corpus", "Write a seeded synthetic corpus");
    common(make);
    auto* extract = app.add_subcommand("extract", "Extract preference and target keywords per user");
    common(extract);
    extract->add_option("--user", f.users, "Restrict to these users");
    extract->add_option("--target", f.target, "Target item id (default: last history item)");
    auto* train = app.add_subcommand("train", "Train soft preference embeddings");
    common(train);
    train->add_option("--steps", f.steps, "Override training.steps");
    auto* gen = app.add_subcommand("generate", "Generate over the weight grid and pick the best z");
    common(gen);
    gen->add_option("--user", f.users, "User id")->required();
    gen->add_option("--target", f.target, "Target item id (default: last history item)");
    gen->add_option("--checkpoint", f.checkpoint, "Trainable state checkpoint");
    gen->add_flag("--no-embeddings", f.no_embeddings, "Drop the soft preference embeddings");
    gen->add_flag("--no-keywords", f.no_keywords, "Drop the preference keywords");
    auto* eval = app.add_subcommand("evaluate", "Run the four-variant ablation on test users");
    common(eval);
    eval->add_option("--checkpoint", f.checkpoint, "Trainable state checkpoint");
    auto* exp = app.add_subcommand("export-features", "Export per-user image features");
    common(exp);
    exp->add_option("--checkpoint", f.checkpoint, "Trainable state checkpoint");
    exp->add_option("--user", f.users, "Restrict to these users");
    exp->add_option("--mode", f.mode, "averaged or generated")->check(CLI::IsMember({"averaged", "generated"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        const pmg::RunConfig config = resolve(f);
        std::filesystem::path dir;
        if (*make)
            dir = pmg::cmd_make_corpus(config);
        else if (*extract)
            dir = pmg::cmd_extract(config, options(f));
        else if (*train)
            dir = pmg::cmd_train(config);
        else if (*gen)
            dir = pmg::cmd_generate(config, options(f));
        else if (*eval)
            dir = pmg::cmd_evaluate(config);
        else if (*exp)
            dir = pmg::cmd_export_features(config, options(f));
        std::cout << dir.string() << '\n';
        return 0;
    } catch (const pmg::Error& e) {
        std::cerr << "pmg: " << e.what() << '\n';
        return e.exit_code();
    } catch (const std::exception& e) {
        std::cerr << "pmg: " << e.what() << '\n';
        return 1;
    }
}
