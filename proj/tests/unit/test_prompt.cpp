#include <doctest.h>

#include <algorithm>
#include <map>
#include <set>

#include "pmg/errors.hpp"
#include "pmg/llm.hpp"
#include "pmg/prompt.hpp"
#include "test_support.hpp"

using namespace pmg;

namespace {

const AttributeKeywords kWorkedExample = {
    {"color", {"black", "colorful", "blue", "white"}},
    {"material", {"fabric", "cotton"}},
    {"season", {"summer"}},
    {"style", {"cartoon", "kid", "youth", "student", "minimalist"}},
    {"elements", {"bear", "animal", "student", "T-shirt", "party"}},
};

class ScriptedLlm final : public LlmBackend {
public:
    explicit ScriptedLlm(std::string reply, std::string fail_on = {})
        : reply_(std::move(reply)), fail_on_(std::move(fail_on)) {}
    std::string generate(const std::string& prompt) const override {
        if (!fail_on_.empty() && prompt.find("especially on " + fail_on_) != std::string::npos)
            throw BackendError("timeout", true);
        return reply_;
    }

private:
    std::string reply_, fail_on_;
};

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    return s;
}

}  // namespace

TEST_CASE("preference prompt carries the summaries and the attribute") {
    const SummarizedBehavior sb{{"A romance at sea", "A heist in the city"}, {"I liked the ending"}};
    const std::string p = build_preference_prompt(PromptTemplate::defaults(Scene::movie), "genre", sb);
    CHECK(p.find("A romance at sea") != std::string::npos);
    CHECK(p.find("A heist in the city") != std::string::npos);
    CHECK(p.find("I liked the ending") != std::string::npos);
    CHECK(p.find("especially on genre") != std::string::npos);
    CHECK(p.find("The keywords are:") != std::string::npos);
}

TEST_CASE("costume prompts differ from movie prompts only by the buy/clothes word swaps") {
    const SummarizedBehavior sb{{"x"}, {}};
    PromptTemplate movie_tmpl = PromptTemplate::defaults(Scene::movie);
    PromptTemplate costume_tmpl = PromptTemplate::defaults(Scene::costume);
    movie_tmpl.attributes = costume_tmpl.attributes = {"style"};
    std::string movie = build_preference_prompt(movie_tmpl, "style", sb);
    const std::string costume = build_preference_prompt(costume_tmpl, "style", sb);
    for (auto [from, to] : {std::pair{"watched", "bought"}, std::pair{"watch", "buy"}, std::pair{"movies", "clothes"},
                            std::pair{"movie", "clothes"}}) {
        for (std::size_t pos; (pos = movie.find(from)) != std::string::npos;) movie.replace(pos, std::strlen(from), to);
    }
    CHECK(movie == costume);
}

TEST_CASE("target prompts") {
    const std::string movie = build_target_prompt(PromptTemplate::defaults(Scene::movie), "A cop hunts a killer");
    CHECK(movie.find("with 5 keywords") != std::string::npos);
    CHECK(movie.find("A cop hunts a killer") != std::string::npos);
    const std::string emo = build_target_prompt(PromptTemplate::defaults(Scene::emoticon), "I'm so tired");
    CHECK(emo.find("moods reflected in the conversation") != std::string::npos);
    CHECK(emo.find("I'm so tired") != std::string::npos);
}

TEST_CASE("prompt preconditions and placeholders") {
    const PromptTemplate movie = PromptTemplate::defaults(Scene::movie);
    CHECK(build_preference_prompt(movie, "genre", {{"x"}, {}}).find("conversations are: (none)") != std::string::npos);
    CHECK_THROWS_AS(build_preference_prompt(movie, "color", {{"x"}, {}}), InputError);
    CHECK_THROWS_AS(build_target_prompt(movie, ""), InputError);
    CHECK_THROWS_AS(build_target_prompt(movie, "  \n"), InputError);
}

TEST_CASE("template validation and persistence") {
    for (Scene s : {Scene::movie, Scene::costume, Scene::emoticon}) CHECK_NOTHROW(validate(PromptTemplate::defaults(s)));
    PromptTemplate t = PromptTemplate::defaults(Scene::costume);
    t.examples = "no format here";
    CHECK_THROWS_AS(validate(t), InputError);

    test::TempDir dir("tmpl");
    const PromptTemplate d = PromptTemplate::defaults(Scene::emoticon);
    save_template(dir.path() / "t.json", d);
    const PromptTemplate back = load_template(dir.path() / "t.json");
    CHECK(back.principle == d.principle);
    CHECK(back.attributes == d.attributes);
    CHECK(back.target_request == d.target_request);
}

TEST_CASE("parse_keywords: the three reply layouts") {
    using V = std::vector<std::string>;
    CHECK(parse_keywords("The keywords are: 1. cartoon; 2. black; 3. summer") == V{"cartoon", "black", "summer"});
    CHECK(parse_keywords("1. Bear\n2. Animal") == V{"bear", "animal"});
    CHECK(parse_keywords("1. cartoon 2. black 3. summer 4. bear") == V{"cartoon", "black", "summer", "bear"});
    CHECK(parse_keywords("The 5 keywords are: 1. with long sleeves; 2.  Cotton!") == V{"with long sleeves", "cotton"});
}

TEST_CASE("parse_keywords: replies without a numbered list fail with the raw reply") {
    try {
        parse_keywords("I cannot help with that.");
        FAIL("expected KeywordParseError");
    } catch (const KeywordParseError& e) {
        CHECK(std::string(e.what()).find("unparseable keyword reply") != std::string::npos);
        CHECK(e.raw_reply() == "I cannot help with that.");
        CHECK(e.exit_code() == 4);
    }
}

TEST_CASE("parse_keywords inverts render_keywords") {
    const std::vector<std::string> kws{"cartoon", "with long sleeves", "t-shirt", "90s", "black"};
    CHECK(parse_keywords(render_keywords(kws)) == kws);
    CHECK(render_keywords({"a", "b"}) == "The keywords are: 1. a; 2. b");
}

TEST_CASE("normalize_keyword") {
    CHECK(normalize_keyword("  With   Long\tSleeves. ") == "with long sleeves");
    CHECK(normalize_keyword("\"Cotton\",") == "cotton");
    CHECK(normalize_keyword("  ...  ").empty());
}

TEST_CASE("merge: hand-enumerated round-robin fixture") {
    const KeywordSet s = merge_keywords({{"a", {"x", "y"}}, {"b", {"z"}}}, 2);
    CHECK(s.keywords == std::vector<std::string>{"x", "z"});
}

TEST_CASE("merge: duplicates across attributes keep one entry with full provenance") {
    const KeywordSet s = merge_keywords({{"color", {"red"}}, {"style", {"Red"}}}, 10);
    CHECK(s.keywords == std::vector<std::string>{"red"});
    CHECK(s.provenance.at("red") == std::vector<std::string>{"color", "style"});
}

TEST_CASE("merge: worked costume example") {
    const KeywordSet s = merge_keywords(kWorkedExample, 10);
    CHECK(s.keywords == std::vector<std::string>{"student", "black", "fabric", "summer", "cartoon", "bear",
                                                 "colorful", "cotton", "kid", "animal"});
    CHECK(std::count(s.keywords.begin(), s.keywords.end(), "student") == 1);
    CHECK(s.provenance.at("student") == std::vector<std::string>{"style", "elements"});
}

TEST_CASE("merge: errors") {
    CHECK_THROWS_WITH_AS(merge_keywords({{"a", {}}, {"b", {" "}}}, 10), "no keywords extracted", InputError);
    CHECK_THROWS_AS(merge_keywords({{"a", {"x"}}}, 0), InputError);
}

TEST_CASE("merge: invariants over 1000 randomized inputs") {
    std::mt19937_64 rng(20240611);
    const std::vector<std::string> pool{"red", "Red", "blue", "cotton", "summer", "cartoon", "kid", "bear",
                                        "animal", "party", "  Black ", "black", "with long sleeves", "silk",
                                        "wool", "denim", "t-shirt", "T-Shirt", "hat", "bag", "sporty", "retro"};
    for (int trial = 0; trial < 1000; ++trial) {
        AttributeKeywords in;
        const std::size_t attributes = 1 + rng() % 6;
        for (std::size_t a = 0; a < attributes; ++a) {
            std::vector<std::string> words;
            const std::size_t n = rng() % 8;
            for (std::size_t i = 0; i < n; ++i) words.push_back(pool[rng() % pool.size()]);
            in.emplace_back("attr" + std::to_string(a), words);
        }
        in.front().second.push_back(pool[rng() % pool.size()]);  // at least one keyword overall
        const std::size_t cap = 1 + rng() % 12;
        const KeywordSet out = merge_keywords(in, cap, trial % 2 ? KeywordKind::target : KeywordKind::preference);

        // Oracle: normalised union with per-keyword attribute sets.
        std::map<std::string, std::set<std::string>> support;
        for (const auto& [attr, words] : in)
            for (const auto& w : words) support[normalize_keyword(w)].insert(attr);

        INFO("trial " << trial);
        CHECK(out.keywords.size() == std::min(cap, support.size()));
        std::set<std::string> seen;
        for (const auto& k : out.keywords) {
            CHECK(!k.empty());
            CHECK(k == lower(k));
            CHECK(seen.insert(lower(k)).second);
            REQUIRE(support.count(k) == 1);
            const auto& prov = out.provenance.at(k);
            CHECK(std::set<std::string>(prov.begin(), prov.end()) == support.at(k));
        }
        CHECK(out.provenance.size() == out.keywords.size());
        // Frequency priority: nothing left out is supported by more attributes than something kept.
        std::size_t min_kept = SIZE_MAX;
        for (const auto& k : out.keywords) min_kept = std::min(min_kept, support.at(k).size());
        for (const auto& [k, attrs] : support)
            if (!seen.count(k)) CHECK(attrs.size() <= min_kept);
    }
}

TEST_CASE("keyword sets round trip through JSON") {
    const KeywordSet s = merge_keywords(kWorkedExample, 10);
    CHECK(keyword_set_from_json(keyword_set_to_json(s)) == s);
    CHECK_THROWS_AS(keyword_set_from_json("[]"), InputError);
}

TEST_CASE("extract_all: single attribute template passes the first ten keywords through") {
    PromptTemplate t = PromptTemplate::defaults(Scene::movie);
    t.attributes = {"genre"};
    std::vector<std::string> twelve;
    for (int i = 0; i < 12; ++i) twelve.push_back("k" + std::to_string(i));
    const KeywordSet s = extract_all(t, {{"x"}, {}}, ScriptedLlm(render_keywords(twelve)));
    CHECK(s.keywords == std::vector<std::string>(twelve.begin(), twelve.begin() + 10));
}

TEST_CASE("extract_all: a failing attribute names itself") {
    const PromptTemplate t = PromptTemplate::defaults(Scene::movie);
    try {
        extract_all(t, {{"x"}, {}}, ScriptedLlm("1. a", "director"));
        FAIL("expected BackendError");
    } catch (const BackendError& e) {
        CHECK(e.subject() == "attribute director");
    }
    CHECK_THROWS_WITH_AS(extract_all(t, {{"x"}, {}}, ScriptedLlm("no list")), doctest::Contains("attribute genre"),
                         KeywordParseError);
}

TEST_CASE("extract_target caps at five") {
    const KeywordSet s = extract_target(PromptTemplate::defaults(Scene::movie), "A heist",
                                        ScriptedLlm("1. a; 2. b; 3. c; 4. d; 5. e; 6. f"));
    CHECK(s.kind == KeywordKind::target);
    CHECK(s.keywords == std::vector<std::string>{"a", "b", "c", "d", "e"});
}

TEST_CASE("mock extraction on a costume history") {
    const SummarizedBehavior sb{{"red, cotton, summer, sporty, striped, shirt", "red, cotton, striped, hat"},
                                {"I want something red for summer"}};
    const KeywordSet s = extract_all(PromptTemplate::defaults(Scene::costume), sb, MockLlm{});
    CHECK(s.keywords.size() <= kPreferenceKeywordCap);
    for (const char* k : {"red", "cotton", "summer", "sporty", "striped"})
        CHECK(std::find(s.keywords.begin(), s.keywords.end(), k) != s.keywords.end());
}
