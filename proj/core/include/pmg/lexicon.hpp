#pragma once

// Keyword vocabulary known to the rule-based mock LLM, per scene and
// attribute. The synthetic corpus draws its item tags from the costume
// entries, so every tag it emits is recognisable by the mock.

#include <string>
#include <utility>
#include <vector>

#include "pmg/backends.hpp"

namespace pmg::lexicon {

struct AttributeWords {
    std::string attribute;
    std::vector<std::string> words;
};

const std::vector<AttributeWords>& words_for(Scene scene);

// Mood -> (mood keyword + expressions / actions) for the emoticon target prompt.
struct MoodRule {
    std::vector<std::string> triggers;
    std::vector<std::string> keywords;
};
const std::vector<MoodRule>& mood_rules();
const MoodRule& neutral_mood();

}  // namespace pmg::lexicon
