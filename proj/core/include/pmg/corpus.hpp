#pragma once

// Seeded synthetic costume corpus: users with a latent style, tagged items
// with procedurally rendered 16x16 images, and templated conversations.
// The last history item of every user is the held-out target.

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "pmg/behavior.hpp"
#include "pmg/image.hpp"
#include "pmg/metrics.hpp"

namespace pmg {

struct StyleProfile {
    std::string style_id;
    std::string color, material, season, style, pattern;  // color, style and pattern are the primary tags
    std::array<double, 3> base{};
    std::array<double, 3> accent{};

    std::vector<std::string> primary_tags() const { return {color, style, pattern}; }
};

// Built-in palette; make_corpus uses the first num_styles entries.
const std::vector<StyleProfile>& style_catalogue();
const std::vector<std::string>& item_categories();

struct CorpusConfig {
    std::size_t num_users = 64;
    std::size_t num_styles = 4;
    std::size_t items_per_user = 8;
    std::size_t test_users = 16;
    std::uint64_t seed = 0;
    std::size_t height = 16;
    std::size_t width = 16;
};

struct Corpus {
    CorpusConfig config;
    std::vector<StyleProfile> styles;
    std::vector<BehaviorRecord> records;
    std::map<std::string, std::size_t> user_style;
    std::map<std::string, Image> images;  // keyed by image_ref
    std::vector<std::string> train_users;
    std::vector<std::string> test_users;

    const BehaviorRecord& record(const std::string& user_id) const;
    const Image& image(const std::string& image_ref) const;
};

// Pixels are quantised to multiples of 1/255 so PNG storage is lossless.
Image render_item(const StyleProfile& style, const std::string& category, std::mt19937_64& rng,
                  std::size_t height = 16, std::size_t width = 16);

// Throws InputError for num_styles outside [2, catalogue size],
// items_per_user < 3, or test_users >= num_users.
Corpus make_corpus(const CorpusConfig& config);

// Layout: behaviors.jsonl, corpus.json (config, styles, assignment, split), images/<item>.png
void save_corpus(const std::filesystem::path& dir, const Corpus& corpus);
Corpus load_corpus(const std::filesystem::path& dir);

struct StyleSeparation {
    double within = 0.0;  // mean perceptual distance between items of the same style
    double across = 0.0;  // ... of different styles
};

StyleSeparation style_separation(const Corpus& corpus, const FeatureBackend& features);

}  // namespace pmg
