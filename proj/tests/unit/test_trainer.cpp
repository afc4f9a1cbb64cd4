#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>

#include "fixture_inputs.hpp"
#include "pmg/errors.hpp"
#include "pmg/pipeline.hpp"
#include "pmg/trainer.hpp"
#include "test_support.hpp"

using namespace pmg;

namespace {

// Training examples for the fixture corpus's training users, with an
// untrained generator. Built once; tests copy what they mutate.
struct Setup {
    RunConfig config = default_run_config();
    PromptTemplate tmpl;
    ToyLanguageModel lm{config.lm};
    GeneratorModels generator = GeneratorModels::create(generator_config(config));
    std::vector<TrainingExample> dataset;

    Setup() {
        config.corpus_dir = test::fixture_dir() / "corpus";
        const Corpus corpus = load_corpus(config.corpus_dir);
        tmpl = resolve_template(config);
        const Backends backends = make_backends(config);
        for (const auto& u : corpus.train_users)
            dataset.push_back(to_training_example(prepare_user(corpus, u, config, tmpl, backends)));
    }

    TrainableState state() const { return TrainableState::initialize(state_config(config), 1); }
    PreparedExample prepared(std::size_t i) const { return prepare_example(dataset.at(i), tmpl, lm, generator.encoder); }
};

const Setup& setup() {
    static const Setup s;
    return s;
}

ConditionSequence rows_of(std::size_t n, double base) {
    Tensor t({n, 8});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = base + 0.01 * static_cast<double>(i);
    return ConditionSequence(t);
}

bool same_tensors(const std::vector<const Tensor*>& a, const std::vector<Tensor>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (!(*a[i] == b[i])) return false;
    return true;
}

std::vector<Tensor> snapshot(const std::vector<const Tensor*>& ts) {
    std::vector<Tensor> out;
    for (const Tensor* t : ts) out.push_back(*t);
    return out;
}

}  // namespace

TEST_CASE("build_condition stacks soft rows above hard rows") {
    const Tensor soft = rows_of(4, 1.0).vectors;
    const ConditionSequence hard = rows_of(6, -1.0);
    const ConditionSequence c = build_condition(soft, hard, 77);
    REQUIRE(c.rows() == 10);
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t k = 0; k < 8; ++k) CHECK(c.vectors.at(r, k) == soft.at(r, k));
    for (std::size_t r = 0; r < 6; ++r)
        for (std::size_t k = 0; k < 8; ++k) CHECK(c.vectors.at(4 + r, k) == hard.vectors.at(r, k));
}

TEST_CASE("build_condition with one side empty") {
    const ConditionSequence hard = rows_of(6, 0.0);
    CHECK(build_condition(Tensor{}, hard, 77) == hard);
    const Tensor soft = rows_of(4, 0.0).vectors;
    CHECK(build_condition(soft, ConditionSequence::empty(8), 77).vectors == soft);
    CHECK_THROWS_AS(build_condition(Tensor{}, ConditionSequence::empty(8), 77), InputError);
}

TEST_CASE("build_condition rejects sequences over the token limit") {
    const Tensor soft = rows_of(4, 0.0).vectors;
    CHECK(build_condition(soft, rows_of(73, 0.0), 77).rows() == 77);
    CHECK_THROWS_WITH_AS(build_condition(soft, rows_of(74, 0.0), 77), doctest::Contains("78 rows"), InputError);
}

TEST_CASE("embedding prompt carries the principle and summaries only") {
    const PromptTemplate tmpl = PromptTemplate::defaults(Scene::costume);
    const SummarizedBehavior b{{"red, cotton", "blue, denim"}, {"something light"}};
    const std::string p = build_embedding_prompt(tmpl, b);
    CHECK(p.find(tmpl.principle) != std::string::npos);
    CHECK(p.find("1. red, cotton; 2. blue, denim") != std::string::npos);
    CHECK(p.find("1. something light") != std::string::npos);
    CHECK(p.find("The keywords are") == std::string::npos);
    CHECK(build_embedding_prompt(tmpl, {{"x"}, {}}).find("conversations are: (none)") != std::string::npos);
}

TEST_CASE("first step loss matches the frozen value") {
    const double expected = test::frozen()["step1_loss"].get<double>();
    CHECK(std::abs(test::step1_loss(test::fixture_dir() / "corpus") - expected) <= 1e-6);
}

TEST_CASE("example noise depends on user and visit but not on order") {
    const PreparedExample a = setup().prepared(0), b = setup().prepared(1);
    const Shape shape = a.supervision.pixels.shape;
    const Tensor a0 = example_noise(a, 3, 0, shape);
    (void)example_noise(b, 3, 0, shape);
    CHECK(a0 == example_noise(a, 3, 0, shape));
    CHECK(a0 != example_noise(a, 3, 1, shape));
    CHECK(a0 != example_noise(b, 3, 0, shape));
    CHECK(a0 != example_noise(a, 4, 0, shape));
}

TEST_CASE("zero steps leave the state unchanged") {
    const Setup& s = setup();
    GeneratorModels gen = s.generator;
    TrainConfig cfg;
    cfg.steps = 0;
    cfg.learning_rate = 1.0;
    const TrainResult r = train(s.dataset, s.state(), s.lm, gen, s.tmpl, cfg);
    CHECK(r.state == s.state());
    CHECK(r.losses.empty());
    CHECK(r.initial_eval == r.final_eval);
}

TEST_CASE("analytic gradients agree with central differences for every group") {
    const Setup& s = setup();
    const auto report = gradient_check(s.prepared(0), s.state(), s.lm, s.generator, 0);
    REQUIRE(report.size() == 3);
    for (const auto& g : report) {
        INFO(g.name << " max rel error " << g.max_rel_error);
        CHECK(g.sampled == 64);
        CHECK(g.pass_fraction() >= 0.95);
    }
}

TEST_CASE("with a zero learning rate the losses do not depend on dataset order") {
    const Setup& s = setup();
    TrainConfig cfg;
    cfg.learning_rate = 0.0;
    cfg.steps = s.dataset.size();
    GeneratorModels gen = s.generator;
    std::vector<double> a = train(s.dataset, s.state(), s.lm, gen, s.tmpl, cfg).losses;

    std::vector<TrainingExample> reversed(s.dataset.rbegin(), s.dataset.rend());
    std::vector<double> b = train(reversed, s.state(), s.lm, gen, s.tmpl, cfg).losses;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    CHECK(a == b);
}

TEST_CASE("training updates only the trainable state") {
    const Setup& s = setup();
    GeneratorModels gen = s.generator;
    const auto lm_before = snapshot(s.lm.parameters());
    const auto& dp = std::as_const(gen.denoiser).params();
    const auto den_before = snapshot(dp.all());
    TrainConfig cfg;
    cfg.learning_rate = 2.0;
    cfg.steps = 12;
    const TrainResult r = train(s.dataset, s.state(), s.lm, gen, s.tmpl, cfg);
    CHECK_FALSE(r.state == s.state());
    CHECK(r.losses.size() == 12);
    CHECK(same_tensors(s.lm.parameters(), lm_before));
    CHECK(same_tensors(dp.all(), den_before));
}

TEST_CASE("training is deterministic in its seed") {
    const Setup& s = setup();
    GeneratorModels gen = s.generator;
    TrainConfig cfg;
    cfg.learning_rate = 2.0;
    cfg.steps = 6;
    const TrainResult a = train(s.dataset, s.state(), s.lm, gen, s.tmpl, cfg);
    const TrainResult b = train(s.dataset, s.state(), s.lm, gen, s.tmpl, cfg);
    CHECK(a.losses == b.losses);
    CHECK(a.state == b.state);
    cfg.seed = 1;
    CHECK(train(s.dataset, s.state(), s.lm, gen, s.tmpl, cfg).losses != a.losses);
}

TEST_CASE("a loss that stays above the divergence threshold aborts training") {
    const Setup& s = setup();
    GeneratorModels gen = s.generator;
    TrainConfig cfg;
    cfg.steps = 20;
    cfg.divergence_factor = 1e-9;
    cfg.divergence_patience = 5;
    try {
        train(s.dataset, s.state(), s.lm, gen, s.tmpl, cfg);
        FAIL("expected DivergenceError");
    } catch (const DivergenceError& e) {
        CHECK(e.exit_code() == 3);
        CHECK(std::string(e.what()).find("diverged at step 4") != std::string::npos);
    }
}

TEST_CASE("a non-finite loss is a divergence, not a silent NaN") {
    const Setup& s = setup();
    GeneratorModels gen = s.generator;
    std::vector<TrainingExample> data = s.dataset;
    data.front().supervision.pixels[0] = std::nan("");
    TrainConfig cfg;
    cfg.steps = 1;
    TrainableState state = s.state();
    const PreparedExample p = prepare_example(data.front(), s.tmpl, s.lm, gen.encoder);
    const Tensor noise = example_noise(p, 0, 0, p.supervision.pixels.shape);
    CHECK_THROWS_WITH_AS(train_step(p, state, s.lm, gen, cfg, noise), doctest::Contains("non-finite"),
                         DivergenceError);
    CHECK(state == s.state());
}

TEST_CASE("rejects an empty dataset and a negative learning rate") {
    const Setup& s = setup();
    GeneratorModels gen = s.generator;
    CHECK_THROWS_AS(train({}, s.state(), s.lm, gen, s.tmpl, {}), InputError);
    TrainConfig cfg;
    cfg.learning_rate = -1.0;
    CHECK_THROWS_AS(train(s.dataset, s.state(), s.lm, gen, s.tmpl, cfg), InputError);
}

TEST_CASE("loss window means and the loss curve file") {
    const std::vector<double> losses{4, 3, 2, 1};
    CHECK(initial_loss(losses, 2) == 3.5);
    CHECK(final_loss(losses, 2) == 1.5);
    CHECK(final_loss(losses, 10) == 2.5);
    CHECK(initial_loss({}, 3) == 0.0);

    test::TempDir dir("loss");
    write_loss_csv(dir.path() / "loss.csv", {0.5, 0.25});
    CHECK(test::read_file(dir.path() / "loss.csv") == "step,loss\n0,0.5\n1,0.25\n");
}
