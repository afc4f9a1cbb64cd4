#pragma once

// Preference / target-item prompt construction and keyword parsing.

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "pmg/backends.hpp"
#include "pmg/behavior.hpp"
#include "pmg/errors.hpp"

namespace pmg {

inline constexpr std::size_t kPreferenceKeywordCap = 10;
inline constexpr std::size_t kTargetKeywordCap = 5;

// Slots understood by the request templates:
//   <attribute> <examples> <conversation history> <watching history> <target>
struct PromptTemplate {
    Scene scene = Scene::movie;
    std::string principle;
    std::vector<std::string> attributes;
    std::string examples;
    std::string preference_request;
    std::string target_request;
    std::string assistant_prefix = "The keywords are:";
    std::string target_assistant_prefix = "The 5 keywords are:";

    static PromptTemplate defaults(Scene scene);
};

void validate(const PromptTemplate& tmpl);
PromptTemplate load_template(const std::filesystem::path& path);
void save_template(const std::filesystem::path& path, const PromptTemplate& tmpl);

enum class KeywordKind { preference, target };

struct KeywordSet {
    KeywordKind kind = KeywordKind::preference;
    std::vector<std::string> keywords;
    std::map<std::string, std::vector<std::string>> provenance;

    bool operator==(const KeywordSet&) const = default;
};

std::string keyword_set_to_json(const KeywordSet& set);
KeywordSet keyword_set_from_json(const std::string& text);

// Raised when an LLM reply has no numbered keyword list.
class KeywordParseError : public Error {
public:
    KeywordParseError(const std::string& what, std::string raw_reply)
        : Error(what, 4), raw_reply_(std::move(raw_reply)) {}
    const std::string& raw_reply() const noexcept { return raw_reply_; }

private:
    std::string raw_reply_;
};

std::string build_preference_prompt(const PromptTemplate& tmpl, const std::string& attribute,
                                    const SummarizedBehavior& behavior);
std::string build_target_prompt(const PromptTemplate& tmpl, const std::string& target_summary);

// Lowercase, trim, collapse inner whitespace, strip edge punctuation.
std::string normalize_keyword(std::string_view raw);

std::vector<std::string> parse_keywords(const std::string& reply);

// Canonical rendering: "The keywords are: 1. a; 2. b; 3. c"
std::string render_keywords(const std::vector<std::string>& keywords);

using AttributeKeywords = std::vector<std::pair<std::string, std::vector<std::string>>>;

// Case-insensitive dedup keeping first occurrence. Over the cap, keywords
// are taken by descending number of attributes that produced them, then
// round-robin over attributes in template order, then first-seen order.
KeywordSet merge_keywords(const AttributeKeywords& per_attribute, std::size_t cap,
                          KeywordKind kind = KeywordKind::preference);

KeywordSet extract_all(const PromptTemplate& tmpl, const SummarizedBehavior& behavior,
                       const LlmBackend& llm);
KeywordSet extract_target(const PromptTemplate& tmpl, const std::string& target_summary,
                          const LlmBackend& llm);

}  // namespace pmg
