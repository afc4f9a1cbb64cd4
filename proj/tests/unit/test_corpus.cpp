#include <doctest.h>

#include <algorithm>
#include <set>

#include "fixture_inputs.hpp"
#include "pmg/corpus.hpp"
#include "pmg/errors.hpp"
#include "test_support.hpp"

using namespace pmg;

namespace {

std::vector<std::filesystem::path> files_under(const std::filesystem::path& dir) {
    std::vector<std::filesystem::path> out;
    for (const auto& e : std::filesystem::recursive_directory_iterator(dir))
        if (e.is_regular_file()) out.push_back(std::filesystem::relative(e.path(), dir));
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace

TEST_CASE("a fixed seed gives a byte-identical corpus") {
    test::TempDir dir("corpus");
    const CorpusConfig cfg = test::fixture_corpus_config();
    save_corpus(dir.path() / "a", make_corpus(cfg));
    save_corpus(dir.path() / "b", make_corpus(cfg));
    const auto files = files_under(dir.path() / "a");
    REQUIRE(files == files_under(dir.path() / "b"));
    CHECK(files.size() == 2 + cfg.num_users * cfg.items_per_user);
    for (const auto& f : files) {
        INFO(f.string());
        CHECK(test::read_file(dir.path() / "a" / f) == test::read_file(dir.path() / "b" / f));
    }

    CorpusConfig other = cfg;
    other.seed = 43;
    CHECK(make_corpus(other).records != make_corpus(cfg).records);
}

TEST_CASE("every input history item carries its user's primary tags") {
    const Corpus c = make_corpus({});
    REQUIRE(c.records.size() == 64);
    for (const auto& r : c.records) {
        const auto tags = c.styles.at(c.user_style.at(r.user_id)).primary_tags();
        REQUIRE(r.history.size() == 8);
        for (std::size_t i = 0; i + 1 < r.history.size(); ++i)
            for (const auto& t : tags)
                CHECK(std::find(r.history[i].tags.begin(), r.history[i].tags.end(), t) != r.history[i].tags.end());
        CHECK(c.images.count(*r.history.back().image_ref) == 1);
        CHECK_FALSE(r.conversations.empty());
    }
}

TEST_CASE("styles have disjoint primary tags") {
    const auto& cat = style_catalogue();
    for (std::size_t a = 0; a < cat.size(); ++a)
        for (std::size_t b = a + 1; b < cat.size(); ++b)
            for (const auto& t : cat[a].primary_tags()) {
                const auto other = cat[b].primary_tags();
                CHECK(std::find(other.begin(), other.end(), t) == other.end());
            }
}

TEST_CASE("train and test users are disjoint and cover everyone") {
    const Corpus c = make_corpus({});
    CHECK(c.test_users.size() == 16);
    CHECK(c.train_users.size() == 48);
    std::set<std::string> all(c.train_users.begin(), c.train_users.end());
    for (const auto& u : c.test_users) CHECK(all.insert(u).second);
    CHECK(all.size() == 64);
}

TEST_CASE("save and load round trip") {
    test::TempDir dir("corpus");
    const Corpus c = make_corpus(test::fixture_corpus_config());
    save_corpus(dir.path(), c);
    const Corpus back = load_corpus(dir.path());
    CHECK(back.records == c.records);
    CHECK(back.train_users == c.train_users);
    CHECK(back.test_users == c.test_users);
    CHECK(back.user_style == c.user_style);
    REQUIRE(back.images.size() == c.images.size());
    for (const auto& [ref, img] : c.images) CHECK(back.image(ref) == img);
    CHECK_THROWS_AS(load_corpus(dir.path() / "missing"), InputError);
}

TEST_CASE("calibration: items of one style sit closer together than items of different styles") {
    const Corpus c = make_corpus({});
    const StyleSeparation sep = style_separation(c, ToyLpipsFeatures{});
    INFO("within " << sep.within << " across " << sep.across);
    CHECK(sep.within > 0.0);
    CHECK(sep.within < sep.across);
}

TEST_CASE("invalid configurations are rejected") {
    CorpusConfig c;
    c.num_styles = 1;
    CHECK_THROWS_AS(make_corpus(c), InputError);
    c = {};
    c.num_styles = style_catalogue().size() + 1;
    CHECK_THROWS_AS(make_corpus(c), InputError);
    c = {};
    c.items_per_user = 2;
    CHECK_THROWS_AS(make_corpus(c), InputError);
    c = {};
    c.test_users = c.num_users;
    CHECK_THROWS_AS(make_corpus(c), InputError);
}

TEST_CASE("rendered images are quantised to the PNG grid") {
    std::mt19937_64 rng(0);
    const Image img = render_item(style_catalogue().front(), "shirt", rng);
    CHECK(img.pixels.shape == Shape{3, 16, 16});
    for (double v : img.pixels.data) CHECK(std::abs(v * 255.0 - std::round(v * 255.0)) <= 1e-9);
}
