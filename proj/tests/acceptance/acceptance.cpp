// Acceptance run: one PASS/FAIL line per criterion, with timings.
//
//   pmg_acceptance [--only 1,5,...] [--known-failure N ...]
//
// Exit status is 0 when every failing criterion was listed as a known
// failure. Known failures still print FAIL.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "fixture_inputs.hpp"
#include "pmg/errors.hpp"
#include "pmg/pipeline.hpp"
#include "pmg/tensor_io.hpp"
#include "ssim_oracle.hpp"
#include "test_support.hpp"

using namespace pmg;
using nlohmann::json;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(double v, int precision = 6) {
    std::ostringstream os;
    os.precision(precision);
    os << v;
    return os.str();
}

// State shared between criteria: the default-config run trained once in
// criterion 5 and reused by the evaluation and export criteria.
struct Shared {
    test::TempDir tmp{"acceptance"};
    RunConfig config = default_run_config();
    bool trained = false;

    // Corpus, generator and trained state on disk, built on first use.
    void ensure_trained(Outcome* training_outcome = nullptr);
};

// --- 1 --------------------------------------------------------------------------

Outcome keyword_golden() {
    std::vector<std::string> problems;
    test::TempDir tmp("acc-extract");
    RunConfig config = default_run_config();
    config.corpus_dir = test::fixture_dir() / "corpus";
    config.runs_dir = tmp.path();
    const fs::path dir = cmd_extract(config, {});
    std::size_t compared = 0;
    for (const auto& e : fs::directory_iterator(test::fixture_dir() / "keywords")) {
        const fs::path produced = dir / "keywords" / e.path().filename();
        ++compared;
        if (!fs::exists(produced) || test::read_file(produced) != test::read_file(e.path()))
            problems.push_back("mismatch " + e.path().filename().string());
    }
    std::size_t produced_files = 0;
    for ([[maybe_unused]] const auto& e : fs::directory_iterator(dir / "keywords")) ++produced_files;
    if (produced_files != compared) problems.push_back("file count differs");

    using V = std::vector<std::string>;
    const std::vector<std::pair<std::string, V>> layouts{
        {"The keywords are: 1. cartoon; 2. black; 3. summer", {"cartoon", "black", "summer"}},
        {"1. Bear\n2. Animal", {"bear", "animal"}},
        {"1. cartoon 2. black 3. summer 4. bear", {"cartoon", "black", "summer", "bear"}},
    };
    for (const auto& [reply, expected] : layouts)
        if (parse_keywords(reply) != expected) problems.push_back("parse failed: " + reply);

    std::mt19937_64 rng(7);
    const V pool{"red",  "Red",   "blue",  "cotton", "summer", "cartoon", "kid", "bear", "animal",
                 "silk", "black", " Black", "with long sleeves", "wool", "hat", "bag", "retro"};
    std::size_t bad_merges = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        AttributeKeywords in;
        const std::size_t attributes = 1 + rng() % 6;
        for (std::size_t a = 0; a < attributes; ++a) {
            V words;
            for (std::size_t i = 0, n = rng() % 8; i < n; ++i) words.push_back(pool[rng() % pool.size()]);
            in.emplace_back("attr" + std::to_string(a), words);
        }
        in.front().second.push_back(pool[rng() % pool.size()]);
        const std::size_t cap = 1 + rng() % 12;
        const KeywordSet out = merge_keywords(in, cap);

        std::map<std::string, std::set<std::string>> support;
        for (const auto& [attr, words] : in)
            for (const auto& w : words) support[normalize_keyword(w)].insert(attr);
        bool ok = out.keywords.size() == std::min(cap, support.size());
        std::set<std::string> seen;
        std::size_t min_kept = SIZE_MAX;
        for (const auto& k : out.keywords) {
            ok = ok && seen.insert(k).second && support.count(k) && out.provenance.count(k) &&
                 std::set<std::string>(out.provenance.at(k).begin(), out.provenance.at(k).end()) == support.at(k);
            if (support.count(k)) min_kept = std::min(min_kept, support.at(k).size());
        }
        for (const auto& [k, attrs] : support)
            if (!seen.count(k) && attrs.size() > min_kept) ok = false;
        bad_merges += !ok;
    }
    if (bad_merges) problems.push_back(std::to_string(bad_merges) + " merge invariant violations");
    if (merge_keywords({{"a", {"x", "y"}}, {"b", {"z"}}}, 2).keywords != V{"x", "z"})
        problems.push_back("round-robin tie-break example");

    Outcome o;
    o.pass = problems.empty();
    o.detail = std::to_string(compared) + " golden files, 3 reply layouts, 1000 merges";
    for (const auto& p : problems) o.detail += "; " + p;
    return o;
}

// --- 2 --------------------------------------------------------------------------

Outcome balancer_oracle() {
    GeneratorConfig small;
    small.height = small.width = 8;
    small.hidden = 4;
    const GeneratorModels models = GeneratorModels::create(small);
    const ConditionSequence pref = models.encoder.encode({"red", "striped"});
    const ConditionSequence target = models.encoder.encode({"shirt"});

    std::mt19937_64 rng(2024);
    std::uniform_real_distribution<double> u(-0.3, 1.3);
    const std::vector<double> coarse{-0.1, 0.0, 1e-7, 0.25, 0.5, 1.0, 1.2};
    std::size_t mismatches = 0, degenerate = 0, ties = 0;
    auto clamped = [](double v) { return std::min(1.0, std::max(1e-6, v)); };

    for (int instance = 0; instance < 500; ++instance) {
        const std::size_t n = 1 + rng() % 7;
        std::vector<WeightPair> grid;
        std::vector<std::pair<double, double>> scores;
        for (std::size_t i = 0; i < n; ++i) {
            grid.push_back({static_cast<double>(rng() % 5), static_cast<double>(1 + rng() % 4)});
            if (instance % 3 == 0)
                scores.emplace_back(coarse[rng() % coarse.size()], coarse[rng() % coarse.size()]);
            else
                scores.emplace_back(u(rng), u(rng));
        }
        const double alpha = instance % 10 == 0 ? 0.0 : instance % 10 == 1 ? 1.0 : (rng() % 1001) / 1000.0;

        const Selection sel = select_best(
            models, pref, target, grid, [&](std::size_t i, const Image&) { return scores.at(i); }, alpha,
            static_cast<std::uint64_t>(instance));

        // exhaustive argmax over clamped logs, first index on ties
        std::size_t best = 0;
        double best_z = -INFINITY;
        std::size_t at_best = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const double z =
                alpha * std::log(clamped(scores[i].first)) + (1 - alpha) * std::log(clamped(scores[i].second));
            if (z > best_z) {
                best = i;
                best_z = z;
                at_best = 1;
            } else if (z == best_z) {
                ++at_best;
            }
        }
        ties += at_best > 1;
        if (sel.best != best || sel.candidates.size() != n) ++mismatches;

        if (alpha == 0.0 || alpha == 1.0) {
            ++degenerate;
            // the objective reduces to a single clamped score
            std::size_t arg = 0;
            for (std::size_t i = 1; i < n; ++i) {
                const double a = alpha == 1.0 ? scores[i].first : scores[i].second;
                const double b = alpha == 1.0 ? scores[arg].first : scores[arg].second;
                if (clamped(a) > clamped(b)) arg = i;
            }
            if (sel.best != arg) ++mismatches;
        }
    }
    return {mismatches == 0, "500 instances (" + std::to_string(ties) + " with ties, " +
                                 std::to_string(degenerate) + " with alpha 0 or 1), " +
                                 std::to_string(mismatches) + " mismatches"};
}

// --- 3 --------------------------------------------------------------------------

Outcome z_arithmetic() {
    struct Case {
        double d_p, d_t, alpha, expected;
    };
    // expected values as stated in the acceptance criteria
    const std::vector<Case> cases{{1.0, 1.0, 0.5, 0.0}, {0.5, 0.5, 0.5, std::log(0.5)}, {0.9, 0.6, 0.5, -0.308119}};
    bool pass = true;
    std::string detail;
    for (const auto& c : cases) {
        const double z = z_score(c.d_p, c.d_t, c.alpha);
        const double err = std::abs(z - c.expected);
        pass = pass && err <= 1e-9;
        if (!detail.empty()) detail += "; ";
        detail += "z(" + fmt(c.d_p) + "," + fmt(c.d_t) + ")=" + fmt(z, 12) + " vs " + fmt(c.expected, 12) +
                  (err <= 1e-9 ? " ok" : " off by " + fmt(err, 3));
    }
    return {pass, detail};
}

// --- 4 --------------------------------------------------------------------------

Outcome gradient_verification() {
    const RunConfig config = default_run_config();
    const Corpus corpus = make_corpus(config.corpus);
    const PromptTemplate tmpl = resolve_template(config);
    const Backends backends = make_backends(config);
    const ToyLanguageModel lm(config.lm);
    const GeneratorModels generator = GeneratorModels::create(generator_config(config));
    const TrainingExample ex =
        to_training_example(prepare_user(corpus, corpus.train_users.front(), config, tmpl, backends));
    const PreparedExample p = prepare_example(ex, tmpl, lm, generator.encoder);
    const TrainableState state = TrainableState::initialize(state_config(config), config.state_seed);

    bool pass = true;
    std::string detail;
    for (const auto& g : gradient_check(p, state, lm, generator, config.seed, 64, 1e-5, 1e-4)) {
        pass = pass && g.sampled == 64 && g.pass_fraction() >= 0.95;
        if (!detail.empty()) detail += "; ";
        detail += g.name + " " + std::to_string(g.passed) + "/" + std::to_string(g.sampled) + " (max rel " +
                  fmt(g.max_rel_error, 3) + ")";
    }
    return {pass, detail};
}

// --- 5 --------------------------------------------------------------------------

std::vector<Tensor> copy_of(const std::vector<const Tensor*>& ts) {
    std::vector<Tensor> out;
    for (const Tensor* t : ts) out.push_back(*t);
    return out;
}

bool unchanged(const std::vector<const Tensor*>& now, const std::vector<Tensor>& before) {
    if (now.size() != before.size()) return false;
    for (std::size_t i = 0; i < now.size(); ++i)
        if (now[i]->shape != before[i].shape || now[i]->data != before[i].data) return false;
    return true;
}

void Shared::ensure_trained(Outcome* outcome) {
    if (trained && !outcome) return;
    const fs::path root = tmp.path();
    config.runs_dir = root / "runs";
    const Corpus corpus = make_corpus(config.corpus);
    save_corpus(root / "corpus", corpus);
    config.corpus_dir = root / "corpus";

    const auto t_gen = Clock::now();
    GeneratorModels generator = obtain_generator(config, corpus);
    const double gen_seconds = seconds_since(t_gen);
    save_generator(root / "generator.pmgt", generator);
    config.generator_checkpoint = root / "generator.pmgt";

    const PromptTemplate tmpl = resolve_template(config);
    const Backends backends = make_backends(config);
    std::vector<TrainingExample> dataset;
    for (const auto& uid : corpus.train_users)
        dataset.push_back(to_training_example(prepare_user(corpus, uid, config, tmpl, backends)));

    const ToyLanguageModel lm(config.lm);
    const auto lm_before = copy_of(lm.parameters());
    const auto denoiser_before = copy_of(std::as_const(generator.denoiser).params().all());
    TrainConfig tc = config.training;
    tc.seed = config.seed;
    const auto t_train = Clock::now();
    const TrainResult result = train(dataset, TrainableState::initialize(state_config(config), config.state_seed), lm,
                                     generator, tmpl, tc);
    const double train_seconds = seconds_since(t_train);
    save_state(root / "state.pmgt", result.state);
    config.checkpoint = root / "state.pmgt";
    trained = true;

    if (outcome) {
        const bool lm_same = unchanged(lm.parameters(), lm_before);
        const bool denoiser_same = unchanged(std::as_const(generator.denoiser).params().all(), denoiser_before);
        const double ratio = result.final_eval / result.initial_eval;
        outcome->pass = result.losses.size() == 200 && ratio <= 0.5 && lm_same && denoiser_same;
        outcome->detail = std::to_string(result.losses.size()) + " steps, loss " + fmt(result.initial_eval) +
                          " -> " + fmt(result.final_eval) + " (ratio " + fmt(ratio, 4) +
                          "), LM " + (lm_same ? "unchanged" : "CHANGED") + ", denoiser " +
                          (denoiser_same ? "unchanged" : "CHANGED") + ", generator prep " + fmt(gen_seconds, 3) +
                          " s, training " + fmt(train_seconds, 3) + " s";
    }
}

Outcome training(Shared& shared) {
    Outcome o;
    shared.ensure_trained(&o);
    return o;
}

// --- 6 / 8 ----------------------------------------------------------------------

std::map<std::string, std::vector<double>> read_ablation(const fs::path& csv, std::vector<std::string>* order,
                                                         std::string* header) {
    std::ifstream is(csv);
    std::string line;
    std::getline(is, line);
    if (header) *header = line;
    std::map<std::string, std::vector<double>> rows;
    while (std::getline(is, line)) {
        std::stringstream ss(line);
        std::string cell, name;
        std::getline(ss, name, ',');
        std::vector<double> values;
        while (std::getline(ss, cell, ',')) values.push_back(std::stod(cell));
        rows[name] = values;
        if (order) order->push_back(name);
    }
    return rows;
}

Outcome personalization_lift(Shared& shared) {
    shared.ensure_trained();
    const fs::path dir = cmd_evaluate(shared.config);
    const auto rows = read_ablation(dir / "ablation.csv", nullptr, nullptr);
    for (const char* v : {"full", "no_keywords", "no_both"})
        if (!rows.count(v)) return {false, std::string("missing row ") + v};
    const double full = rows.at("full").at(0), no_kw = rows.at("no_keywords").at(0), none = rows.at("no_both").at(0);
    const double lift = (none - full) / none;
    const bool pass = full < none && lift >= 0.02 && full <= no_kw;
    return {pass, "LPIPS to history: full " + fmt(full, 5) + ", no_embeddings " +
                      fmt(rows.count("no_embeddings") ? rows.at("no_embeddings").at(0) : NAN, 5) + ", no_keywords " +
                      fmt(no_kw, 5) + ", no_both " + fmt(none, 5) + "; lift over no_both " + fmt(100 * lift, 4) +
                      "%"};
}

Outcome ablation_shape(Shared& shared) {
    shared.ensure_trained();
    const fs::path a = cmd_evaluate(shared.config), b = cmd_evaluate(shared.config);
    std::vector<std::string> order;
    std::string header;
    read_ablation(a / "ablation.csv", &order, &header);
    const bool rows_ok = order == std::vector<std::string>{"full", "no_embeddings", "no_keywords", "no_both"};
    const bool header_ok = header == "variant,lpips_history,lpips_target,ssim_history,ssim_target";
    const bool same = test::read_file(a / "ablation.csv") == test::read_file(b / "ablation.csv") &&
                      test::read_file(a / "ablation_per_user.csv") == test::read_file(b / "ablation_per_user.csv");
    return {rows_ok && header_ok && same, std::to_string(order.size()) + " variant rows" +
                                              (header_ok ? ", header ok" : ", header WRONG") +
                                              (same ? ", identical across two runs" : ", runs DIFFER")};
}

// --- 7 --------------------------------------------------------------------------

Outcome ssim_correctness() {
    std::mt19937_64 rng(77);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    auto random_image = [&](std::size_t h, std::size_t w) {
        Image img(1, h, w);
        for (double& v : img.pixels.data) v = u(rng);
        return img;
    };
    Image a(3, 16, 16);
    for (double& v : a.pixels.data) v = u(rng);
    const double identity = ssim(a, a);
    const double constant = ssim(Image(3, 16, 16, 0.0), Image(3, 16, 16, 1.0));
    double worst = 0.0;
    for (int i = 0; i < 20; ++i) {
        const Image x = random_image(8, 8), y = random_image(8, 8);
        worst = std::max(worst, std::abs(ssim(x, y) - test::brute_force_ssim(x, y)));
    }
    const bool pass = std::abs(identity - 1.0) <= 1e-9 && std::abs(constant - 9.999e-5) <= 1e-7 && worst <= 1e-6;
    return {pass, "identity " + fmt(identity, 12) + ", constant pair " + fmt(constant, 8) +
                      ", worst oracle gap over 20 pairs " + fmt(worst, 3)};
}

// --- 9 --------------------------------------------------------------------------

Outcome feature_export(Shared& shared) {
    shared.ensure_trained();
    const RunConfig& config = shared.config;
    const Corpus corpus = load_corpus(config.corpus_dir);
    const GeneratorModels gen = load_generator(config.generator_checkpoint, generator_config(config));
    std::vector<std::string> problems;

    CommandOptions averaged;
    const TensorFile fa = read_tensor_file(cmd_export_features(config, averaged) / "features.pmgt");
    const json index_a = json::parse(fa.metadata.at("index"));
    const Tensor& feats = fa.get("features");
    double worst = 0.0;
    for (const auto& r : corpus.records) {
        std::vector<double> mean(gen.config.d_score, 0.0);
        const std::size_t n = r.history.size() - 1;
        for (std::size_t i = 0; i < n; ++i) {
            const auto e = gen.scorer.embed_image(corpus.image(*r.history[i].image_ref));
            for (std::size_t k = 0; k < mean.size(); ++k) mean[k] += e[k];
        }
        const std::size_t row = index_a.at(r.user_id).get<std::size_t>();
        for (std::size_t k = 0; k < mean.size(); ++k)
            worst = std::max(worst, std::abs(feats.at(row, k) - mean[k] / static_cast<double>(n)));
    }
    if (worst > 1e-6) problems.push_back("averaged gap " + fmt(worst, 3));

    CommandOptions generated;
    generated.mode = ExportMode::generated;
    generated.users = corpus.test_users;
    const TensorFile fg = read_tensor_file(cmd_export_features(config, generated) / "features.pmgt");
    const std::size_t users = corpus.test_users.size();
    if (!fg.contains("features")) {
        problems.push_back("no features tensor");
    } else {
        const Tensor& g = fg.get("features");
        if (g.shape != Shape{users, gen.config.d_score}) problems.push_back("shape " + shape_string(g.shape));
        if (!all_finite(g)) problems.push_back("non-finite features");
    }
    if (fg.metadata.count("mode") == 0 || fg.metadata.at("mode") != "generated") problems.push_back("mode");
    if (fg.metadata.count("dim") == 0 || fg.metadata.at("dim") != std::to_string(gen.config.d_score))
        problems.push_back("declared dim");
    std::set<std::size_t> rows;
    const json index_g = json::parse(fg.metadata.count("index") ? fg.metadata.at("index") : "{}");
    for (const auto& u : corpus.test_users)
        if (index_g.contains(u) && index_g.at(u).get<std::size_t>() < users) rows.insert(index_g.at(u).get<std::size_t>());
    if (rows.size() != users) problems.push_back("index does not map users to distinct rows");

    Outcome o;
    o.pass = problems.empty();
    o.detail = "averaged: " + std::to_string(corpus.records.size()) + " users, worst gap " + fmt(worst, 3) +
               "; generated: " + std::to_string(users) + " users x " + std::to_string(gen.config.d_score);
    for (const auto& p : problems) o.detail += "; " + p;
    return o;
}

// --- 10 -------------------------------------------------------------------------

Outcome suite_runtime(Clock::time_point acceptance_start) {
    std::vector<std::string> binaries;
    std::stringstream ss(PMG_UNIT_TEST_BINARIES);
    for (std::string b; std::getline(ss, b, ',');)
        if (!b.empty()) binaries.push_back(b);
    const auto t0 = Clock::now();
    std::vector<std::string> failed;
    for (const auto& b : binaries) {
        const std::string cmd = "\"" + b + "\" > /dev/null 2>&1";
        const int status = std::system(cmd.c_str());
        if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) failed.push_back(fs::path(b).filename().string());
    }
    const double unit_seconds = seconds_since(t0);
    const double total = seconds_since(acceptance_start);
    std::string detail = std::to_string(binaries.size()) + " unit binaries in " + fmt(unit_seconds, 3) +
                         " s; with the acceptance run " + fmt(total, 4) + " s";
    for (const auto& f : failed) detail += "; failed " + f;
    return {failed.empty() && !binaries.empty() && total < 300.0, detail};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria"};
    std::vector<int> only, known;
    app.add_option("--only", only, "Run only these criteria")->delimiter(',');
    app.add_option("--known-failure", known, "Criteria expected to fail (still reported)")->delimiter(',');
    CLI11_PARSE(app, argc, argv);

    const auto start = Clock::now();
    Shared shared;
    struct Criterion {
        int id;
        std::string name;
        double budget_seconds;  // 0: no runtime bound
        std::function<Outcome()> run;
    };
    const std::vector<Criterion> criteria{
        {1, "keyword pipeline golden test", 10, keyword_golden},
        {2, "balancer oracle", 5, balancer_oracle},
        {3, "z arithmetic", 0, z_arithmetic},
        {4, "gradient verification", 60, gradient_verification},
        {5, "training halves the loss, frozen parts untouched", 180, [&] { return training(shared); }},
        {6, "personalization lift", 180, [&] { return personalization_lift(shared); }},
        {7, "SSIM correctness", 0, ssim_correctness},
        {8, "ablation report shape", 0, [&] { return ablation_shape(shared); }},
        {9, "feature export", 0, [&] { return feature_export(shared); }},
        {10, "full suite runtime", 0, [&] { return suite_runtime(start); }},
    };

    const std::set<int> selected(only.begin(), only.end()), expected(known.begin(), known.end());
    int unexpected = 0;
    for (const auto& c : criteria) {
        if (!selected.empty() && !selected.count(c.id)) continue;
        const auto t0 = Clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        const double secs = seconds_since(t0);
        if (c.budget_seconds > 0 && secs >= c.budget_seconds) {
            o.pass = false;
            o.detail += "; over the " + fmt(c.budget_seconds) + " s budget";
        }
        const bool known_failure = expected.count(c.id) > 0;
        if (!o.pass && !known_failure) ++unexpected;
        std::printf("%s %2d %-50s %8.2f s  %s%s\n", o.pass ? "PASS" : "FAIL", c.id, c.name.c_str(), secs,
                    o.detail.c_str(), !o.pass && known_failure ? " [known failure]" : "");
        std::fflush(stdout);
    }
    return unexpected == 0 ? 0 : 1;
}
