#include "pmg/lexicon.hpp"

namespace pmg::lexicon {

const std::vector<AttributeWords>& words_for(Scene scene) {
    static const std::vector<AttributeWords> costume = {
        {"color", {"red", "blue", "green", "yellow", "purple", "orange", "pink", "teal", "black", "white",
                   "grey", "brown", "colorful"}},
        {"material", {"cotton", "linen", "wool", "nylon", "silk", "denim", "leather", "velvet", "fabric"}},
        {"season", {"summer", "spring", "autumn", "winter"}},
        {"style", {"cartoon", "minimalist", "vintage", "sporty", "elegant", "punk", "bohemian", "preppy",
                   "casual", "kid", "youth", "student"}},
        {"elements", {"striped", "checkered", "dotted", "diagonal", "pinstriped", "gradient", "tartan",
                      "speckled", "shirt", "t-shirt", "shoes", "hat", "bag", "skirt", "bear", "animal", "party",
                      "stars", "with long sleeves", "short sleeves"}},
    };
    static const std::vector<AttributeWords> movie = {
        {"genre", {"romance", "drama", "crime", "thriller", "comedy", "action", "animation", "horror",
                   "documentary", "sci-fi", "fantasy", "adventure", "disaster", "war", "mystery", "musical",
                   "family", "western"}},
        {"director", {"james cameron", "clint eastwood", "christopher nolan", "steven spielberg",
                      "hayao miyazaki", "quentin tarantino", "martin scorsese", "ridley scott", "sofia coppola"}},
        {"origin", {"american", "british", "french", "japanese", "korean", "italian", "indian", "hollywood",
                    "1990s", "1980s", "1970s", "2000s", "classic", "independent"}},
    };
    static const std::vector<AttributeWords> emoticon = {
        {"character", {"cat", "dog", "bear", "rabbit", "panda", "penguin", "girl", "boy", "frog"}},
        {"style", {"cartoon", "pixel", "realistic", "cute", "meme", "hand-drawn", "chibi", "3d"}},
        {"color", {"red", "blue", "green", "yellow", "pink", "black", "white", "pastel", "colorful"}},
    };
    switch (scene) {
        case Scene::costume: return costume;
        case Scene::movie: return movie;
        case Scene::emoticon: return emoticon;
    }
    return movie;
}

const std::vector<MoodRule>& mood_rules() {
    static const std::vector<MoodRule> rules = {
        {{"tired", "exhausted", "sleepy", "worn out"}, {"tired", "sleepy", "yawning", "lying down", "exhausted"}},
        {{"happy", "great", "awesome", "yay", "glad"}, {"happy", "smiling", "laughing", "dancing", "cheerful"}},
        {{"sad", "upset", "miss", "lonely", "cry"}, {"sad", "crying", "tears", "gloomy", "lonely"}},
        {{"angry", "furious", "annoyed", "mad"}, {"angry", "frowning", "stomping", "furious", "red face"}},
        {{"surprised", "wow", "shocked", "unbelievable"},
         {"surprised", "wide eyes", "open mouth", "shocked", "amazed"}},
        {{"hungry", "food", "eat", "dinner"}, {"hungry", "eating", "drooling", "food", "excited"}},
    };
    return rules;
}

const MoodRule& neutral_mood() {
    static const MoodRule rule{{}, {"calm", "neutral", "relaxed", "sitting", "gentle smile"}};
    return rule;
}

}  // namespace pmg::lexicon
