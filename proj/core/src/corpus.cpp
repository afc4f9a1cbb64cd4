#include "pmg/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "pmg/errors.hpp"

namespace pmg {

using nlohmann::json;

const std::vector<StyleProfile>& style_catalogue() {
    static const std::vector<StyleProfile> styles = {
        {"s0", "red", "cotton", "summer", "sporty", "striped", {0.85, 0.15, 0.15}, {0.98, 0.85, 0.80}},
        {"s1", "blue", "denim", "winter", "minimalist", "checkered", {0.15, 0.25, 0.80}, {0.05, 0.05, 0.25}},
        {"s2", "green", "wool", "autumn", "vintage", "dotted", {0.20, 0.65, 0.25}, {0.90, 0.90, 0.55}},
        {"s3", "yellow", "linen", "spring", "cartoon", "diagonal", {0.95, 0.85, 0.15}, {0.55, 0.30, 0.10}},
        {"s4", "purple", "silk", "winter", "elegant", "pinstriped", {0.50, 0.20, 0.65}, {0.95, 0.95, 0.95}},
        {"s5", "orange", "nylon", "summer", "punk", "gradient", {0.95, 0.55, 0.10}, {0.10, 0.10, 0.10}},
        {"s6", "pink", "velvet", "spring", "bohemian", "tartan", {0.95, 0.60, 0.75}, {0.40, 0.10, 0.30}},
        {"s7", "teal", "leather", "autumn", "preppy", "speckled", {0.10, 0.55, 0.55}, {0.85, 0.95, 0.90}},
    };
    return styles;
}

const std::vector<std::string>& item_categories() {
    static const std::vector<std::string> categories = {"shirt", "t-shirt", "shoes", "hat", "bag", "skirt"};
    return categories;
}

namespace {

double pattern_mask(const std::string& pattern, int x, int y, int phase, std::mt19937_64& rng) {
    if (pattern == "striped") return ((y + phase) / 2) % 2;
    if (pattern == "checkered") return (((x + phase) / 4) + (y / 4)) % 2;
    if (pattern == "dotted") return ((x + phase) % 4 == 1 && y % 4 == 1) ? 1.0 : 0.0;
    if (pattern == "diagonal") return ((x + y + phase) / 3) % 2;
    if (pattern == "pinstriped") return (x + phase) % 4 == 0 ? 1.0 : 0.0;
    if (pattern == "gradient") return std::clamp((y + 0.25 * phase) / 15.0, 0.0, 1.0);
    if (pattern == "tartan") return ((x + phase) % 6 < 2 || y % 6 < 2) ? 1.0 : 0.0;
    if (pattern == "speckled") return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < 0.25 ? 1.0 : 0.0;
    return 0.0;
}

bool in_motif(const std::string& category, int x, int y) {
    auto box = [&](int x0, int x1, int y0, int y1) { return x >= x0 && x <= x1 && y >= y0 && y <= y1; };
    if (category == "shirt") return box(4, 11, 3, 13) || box(1, 14, 3, 5);
    if (category == "t-shirt") return box(5, 10, 5, 12) || box(3, 12, 5, 6);
    if (category == "shoes") return box(1, 6, 11, 14) || box(9, 14, 11, 14);
    if (category == "hat") return box(4, 11, 3, 6) || box(2, 13, 7, 8);
    if (category == "bag") return box(3, 12, 7, 13) || (box(5, 10, 4, 6) && !box(7, 8, 5, 6));
    if (category == "skirt") {
        if (y < 4 || y > 13) return false;
        const int half = 3 + (y - 4) / 2;
        return std::abs(2 * x - 15) <= 2 * half;
    }
    return false;
}

std::string conversation_for(const StyleProfile& s, std::mt19937_64& rng) {
    switch (rng() % 3) {
        case 0:
            return "I want something " + s.color + " for " + s.season + ". I like a " + s.style +
                   " look with " + s.pattern + " details.";
        case 1:
            return "Do you have " + s.pattern + " " + s.material + " pieces? My taste is " + s.style +
                   " and mostly " + s.color + ".";
        default:
            return "Looking for " + s.color + " " + s.material + " clothes with a " + s.style + " vibe.";
    }
}

}  // namespace

Image render_item(const StyleProfile& style, const std::string& category, std::mt19937_64& rng,
                  std::size_t height, std::size_t width) {
    Image img(3, height, width);
    std::uniform_real_distribution<double> jitter(-0.05, 0.05);
    const double gain = 1.0 + jitter(rng);
    const int phase = 0;
    for (std::size_t yy = 0; yy < height; ++yy)
        for (std::size_t xx = 0; xx < width; ++xx) {
            const int x = static_cast<int>(xx * 16 / width), y = static_cast<int>(yy * 16 / height);
            const double m = pattern_mask(style.pattern, x, y, phase, rng);
            const bool motif = in_motif(category, x, y);
            for (std::size_t c = 0; c < 3; ++c) {
                double v = (1.0 - m) * style.base[c] + m * style.accent[c];
                if (motif) v = 0.55 * v + 0.45 * (c == 0 ? 0.95 : c == 1 ? 0.95 : 0.92);
                v = std::clamp(v * gain, 0.0, 1.0);
                img.at(c, yy, xx) = std::round(v * 255.0) / 255.0;
            }
        }
    return img;
}

const BehaviorRecord& Corpus::record(const std::string& user_id) const {
    for (const auto& r : records)
        if (r.user_id == user_id) return r;
    throw InputError("unknown user '" + user_id + "'");
}

const Image& Corpus::image(const std::string& image_ref) const {
    const auto it = images.find(image_ref);
    if (it == images.end()) throw InputError("unknown image '" + image_ref + "'");
    return it->second;
}

Corpus make_corpus(const CorpusConfig& config) {
    const auto& catalogue = style_catalogue();
    if (config.num_styles < 2 || config.num_styles > catalogue.size())
        throw InputError("make_corpus: num_styles must be between 2 and " + std::to_string(catalogue.size()));
    if (config.items_per_user < 3) throw InputError("make_corpus: items_per_user must be at least 3");
    if (config.test_users >= config.num_users)
        throw InputError("make_corpus: test_users must be smaller than num_users");

    Corpus corpus;
    corpus.config = config;
    corpus.styles.assign(catalogue.begin(), catalogue.begin() + static_cast<std::ptrdiff_t>(config.num_styles));
    std::mt19937_64 rng(config.seed);
    const auto& categories = item_categories();

    for (std::size_t u = 0; u < config.num_users; ++u) {
        const std::size_t s = u % config.num_styles;
        const StyleProfile& style = corpus.styles[s];
        BehaviorRecord rec;
        char uid[16];
        std::snprintf(uid, sizeof uid, "u%03zu", u);
        rec.user_id = uid;
        for (std::size_t i = 0; i < config.items_per_user; ++i) {
            const std::string& category = categories[rng() % categories.size()];
            ItemFeatures item;
            item.item_id = rec.user_id + "_i" + std::to_string(i);
            item.image_ref = "images/" + item.item_id + ".png";
            if (i + 1 == config.items_per_user)
                item.tags = {category};
            else
                item.tags = {style.color, style.material, style.season, style.style, style.pattern, category};
            corpus.images.emplace(*item.image_ref, render_item(style, category, rng, config.height, config.width));
            rec.history.push_back(std::move(item));
        }
        rec.conversations.push_back({Speaker::user, conversation_for(style, rng)});
        corpus.user_style[rec.user_id] = s;
        corpus.records.push_back(std::move(rec));
    }

    std::vector<std::string> ids;
    for (const auto& r : corpus.records) ids.push_back(r.user_id);
    std::shuffle(ids.begin(), ids.end(), rng);
    corpus.test_users.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(config.test_users));
    corpus.train_users.assign(ids.begin() + static_cast<std::ptrdiff_t>(config.test_users), ids.end());
    std::sort(corpus.test_users.begin(), corpus.test_users.end());
    std::sort(corpus.train_users.begin(), corpus.train_users.end());
    return corpus;
}

void save_corpus(const std::filesystem::path& dir, const Corpus& corpus) {
    std::filesystem::create_directories(dir / "images");
    save_behaviors(dir / "behaviors.jsonl", corpus.records);
    for (const auto& [ref, img] : corpus.images) write_png(dir / ref, img);

    json j;
    const auto& c = corpus.config;
    j["config"] = {{"num_users", c.num_users},   {"num_styles", c.num_styles}, {"items_per_user", c.items_per_user},
                   {"test_users", c.test_users}, {"seed", c.seed},             {"height", c.height},
                   {"width", c.width}};
    j["styles"] = json::array();
    for (const auto& s : corpus.styles)
        j["styles"].push_back({{"style_id", s.style_id},
                               {"color", s.color},
                               {"material", s.material},
                               {"season", s.season},
                               {"style", s.style},
                               {"pattern", s.pattern}});
    j["user_style"] = corpus.user_style;
    j["train_users"] = corpus.train_users;
    j["test_users"] = corpus.test_users;
    std::ofstream os(dir / "corpus.json");
    if (!os) throw InputError("cannot write '" + (dir / "corpus.json").string() + "'");
    os << j.dump(2) << '\n';
}

Corpus load_corpus(const std::filesystem::path& dir) {
    std::ifstream is(dir / "corpus.json");
    if (!is) throw InputError("cannot open '" + (dir / "corpus.json").string() + "'");
    json j;
    try {
        j = json::parse(is);
    } catch (const json::exception& e) {
        throw InputError("corpus.json: " + std::string(e.what()));
    }
    Corpus corpus;
    const auto& c = j.at("config");
    corpus.config = {c.at("num_users"), c.at("num_styles"), c.at("items_per_user"), c.at("test_users"),
                     c.at("seed"),      c.at("height"),     c.at("width")};
    const auto& catalogue = style_catalogue();
    for (const auto& s : j.at("styles")) {
        const std::string id = s.at("style_id");
        const auto it = std::find_if(catalogue.begin(), catalogue.end(), [&](const auto& p) { return p.style_id == id; });
        if (it == catalogue.end()) throw InputError("corpus.json: unknown style '" + id + "'");
        corpus.styles.push_back(*it);
    }
    corpus.user_style = j.at("user_style").get<std::map<std::string, std::size_t>>();
    corpus.train_users = j.at("train_users").get<std::vector<std::string>>();
    corpus.test_users = j.at("test_users").get<std::vector<std::string>>();
    corpus.records = load_behaviors(dir / "behaviors.jsonl");
    for (const auto& r : corpus.records)
        for (const auto& item : r.history)
            if (item.image_ref) corpus.images.emplace(*item.image_ref, read_png(dir / *item.image_ref));
    return corpus;
}

StyleSeparation style_separation(const Corpus& corpus, const FeatureBackend& features) {
    std::vector<std::pair<std::size_t, const Image*>> items;
    for (const auto& r : corpus.records) {
        const std::size_t s = corpus.user_style.at(r.user_id);
        for (const auto& item : r.history)
            if (item.image_ref) items.emplace_back(s, &corpus.image(*item.image_ref));
    }
    // A strided sample of about 96 images keeps the pair count bounded.
    std::vector<std::pair<std::size_t, const Image*>> sample;
    for (std::size_t i = 0; i < items.size(); i += std::max<std::size_t>(1, items.size() / 96)) sample.push_back(items[i]);

    double within = 0.0, across = 0.0;
    std::size_t nw = 0, na = 0;
    for (std::size_t i = 0; i < sample.size(); ++i)
        for (std::size_t k = i + 1; k < sample.size(); ++k) {
            const double d = perceptual_distance(*sample[i].second, *sample[k].second, features);
            if (sample[i].first == sample[k].first) {
                within += d;
                ++nw;
            } else {
                across += d;
                ++na;
            }
        }
    return {nw ? within / nw : 0.0, na ? across / na : 0.0};
}

}  // namespace pmg
