#pragma once

// User behavior records (clicked items + conversations) and the
// preprocessing step that condenses each item / conversation into a short
// text summary before prompt construction.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "pmg/backends.hpp"

namespace pmg {

struct ItemFeatures {
    std::string item_id;
    std::string text;
    std::optional<std::string> image_ref;
    std::vector<std::string> tags;

    bool operator==(const ItemFeatures&) const = default;
};

enum class Speaker { user, assistant };

struct ConversationTurn {
    Speaker speaker = Speaker::user;
    std::string text;

    bool operator==(const ConversationTurn&) const = default;
};

// History is ordered oldest to newest.
struct BehaviorRecord {
    std::string user_id;
    std::vector<ItemFeatures> history;
    std::vector<ConversationTurn> conversations;

    bool operator==(const BehaviorRecord&) const = default;
};

struct SummarizedBehavior {
    std::vector<std::string> item_summaries;
    std::vector<std::string> conversation_summaries;

    bool operator==(const SummarizedBehavior&) const = default;
};

struct SummarizeOptions {
    Scene scene = Scene::movie;
    std::size_t max_summary_tokens = 40;
};

// Throws InputError when an item or turn breaks the record invariants.
void validate(const BehaviorRecord& record);

// Keeps the n most recent items and the m most recent conversation turns.
BehaviorRecord truncate_behavior(const BehaviorRecord& record, std::size_t n, std::size_t m);

std::string build_summary_prompt(Scene scene, const ItemFeatures& item);
std::string build_conversation_summary_prompt(const ConversationTurn& turn);

// Item text goes through the LLM; tag-only items are summarized as their
// comma-joined tags; a non-empty image caption is appended after "; ".
// Every summary is hard-truncated to max_summary_tokens whitespace tokens.
SummarizedBehavior summarize(const BehaviorRecord& record, const LlmBackend& llm,
                             const CaptionBackend& captioner, const SummarizeOptions& options = {});

std::vector<std::string> split_whitespace(std::string_view text);
std::string truncate_tokens(std::string_view text, std::size_t max_tokens);

// --- JSON-lines persistence -------------------------------------------------

// Reads one record per line. Accepts the native schema as well as
// POG-shaped ({"user", "items": [{"item_id", "title", "category", "image"}]})
// and MovieLens-shaped ({"userId", "movies": [{"movieId", "title", "genres",
// "overview", "poster"}]}) records.
std::vector<BehaviorRecord> load_behaviors(const std::filesystem::path& path);
void save_behaviors(const std::filesystem::path& path, const std::vector<BehaviorRecord>& records);

BehaviorRecord behavior_from_json_line(const std::string& line);
std::string behavior_to_json_line(const BehaviorRecord& record);

}  // namespace pmg
