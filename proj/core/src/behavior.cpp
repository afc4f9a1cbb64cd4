#include "pmg/behavior.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "pmg/errors.hpp"

namespace pmg {

using nlohmann::json;

std::string_view to_string(Scene scene) {
    switch (scene) {
        case Scene::costume: return "costume";
        case Scene::movie: return "movie";
        case Scene::emoticon: return "emoticon";
    }
    return "unknown";
}

Scene scene_from_string(std::string_view name) {
    if (name == "costume") return Scene::costume;
    if (name == "movie") return Scene::movie;
    if (name == "emoticon") return Scene::emoticon;
    throw InputError("unknown scene '" + std::string(name) + "'");
}

std::vector<std::string> split_whitespace(std::string_view text) {
    std::vector<std::string> out;
    std::istringstream is{std::string(text)};
    std::string tok;
    while (is >> tok) out.push_back(tok);
    return out;
}

std::string truncate_tokens(std::string_view text, std::size_t max_tokens) {
    const auto tokens = split_whitespace(text);
    std::string out;
    for (std::size_t i = 0; i < tokens.size() && i < max_tokens; ++i) {
        if (i) out += ' ';
        out += tokens[i];
    }
    return out;
}

void validate(const BehaviorRecord& record) {
    if (record.user_id.empty()) throw InputError("behavior record with empty user_id");
    for (const auto& item : record.history) {
        if (item.item_id.empty()) throw InputError("user " + record.user_id + ": item with empty item_id");
        if (item.text.empty() && !item.image_ref && item.tags.empty())
            throw InputError("user " + record.user_id + ": item " + item.item_id +
                             " has no text, image or tags");
    }
    for (const auto& turn : record.conversations) {
        if (turn.text.empty()) throw InputError("user " + record.user_id + ": empty conversation turn");
    }
}

BehaviorRecord truncate_behavior(const BehaviorRecord& record, std::size_t n, std::size_t m) {
    if (n == 0) throw InputError("truncate_behavior: n must be at least 1");
    if (record.history.empty()) throw InputError("no behavior signal for user " + record.user_id);
    BehaviorRecord out;
    out.user_id = record.user_id;
    const std::size_t keep_items = std::min(n, record.history.size());
    out.history.assign(record.history.end() - static_cast<std::ptrdiff_t>(keep_items), record.history.end());
    const std::size_t keep_turns = std::min(m, record.conversations.size());
    out.conversations.assign(record.conversations.end() - static_cast<std::ptrdiff_t>(keep_turns),
                             record.conversations.end());
    return out;
}

namespace {

std::string quote_safe(std::string text) {
    std::replace(text.begin(), text.end(), '"', '\'');
    return text;
}

std::string join(const std::vector<std::string>& parts, std::string_view sep) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i) out += sep;
        out += parts[i];
    }
    return out;
}

}  // namespace

std::string build_summary_prompt(Scene scene, const ItemFeatures& item) {
    const std::string tags = join(item.tags, ", ");
    std::ostringstream os;
    switch (scene) {
        case Scene::movie:
            os << "### Human: Here is a movie. Movie introduction \"" << quote_safe(item.text)
               << "\". Movie Genre: \"" << tags
               << "\". Please summarize this movie using one sentence within 30 words.\n"
               << "### Assistant: This movie";
            break;
        case Scene::costume:
            os << "### Human: Here is a piece of clothing. Clothing description \"" << quote_safe(item.text)
               << "\". Clothing tags: \"" << tags
               << "\". Please summarize this clothing using one sentence within 30 words.\n"
               << "### Assistant: This clothing";
            break;
        case Scene::emoticon:
            os << "### Human: Here is an emoticon. Emoticon description \"" << quote_safe(item.text)
               << "\". Emoticon tags: \"" << tags
               << "\". Please summarize this emoticon using one sentence within 30 words.\n"
               << "### Assistant: This emoticon";
            break;
    }
    return os.str();
}

std::string build_conversation_summary_prompt(const ConversationTurn& turn) {
    return "### Human: Here is a conversation. Conversation description \"" + quote_safe(turn.text) +
           "\". Please summarize this conversation using one sentence within 30 words.\n"
           "### Assistant: This conversation";
}

SummarizedBehavior summarize(const BehaviorRecord& record, const LlmBackend& llm,
                             const CaptionBackend& captioner, const SummarizeOptions& options) {
    SummarizedBehavior out;
    out.item_summaries.reserve(record.history.size());
    for (const auto& item : record.history) {
        std::string summary;
        try {
            summary = item.text.empty() ? join(item.tags, ", ")
                                        : llm.generate(build_summary_prompt(options.scene, item));
            if (item.image_ref) {
                const std::string caption = captioner.caption(*item.image_ref);
                if (!caption.empty()) summary += summary.empty() ? caption : "; " + caption;
            }
        } catch (const BackendError& e) {
            throw BackendError(e.what(), true, item.item_id);
        }
        out.item_summaries.push_back(truncate_tokens(summary, options.max_summary_tokens));
    }
    for (std::size_t i = 0; i < record.conversations.size(); ++i) {
        std::string summary;
        try {
            summary = llm.generate(build_conversation_summary_prompt(record.conversations[i]));
        } catch (const BackendError& e) {
            throw BackendError(e.what(), true, record.user_id + "/conversation[" + std::to_string(i) + "]");
        }
        out.conversation_summaries.push_back(truncate_tokens(summary, options.max_summary_tokens));
    }
    return out;
}

// --- JSON ---------------------------------------------------------------------

namespace {

std::string string_field(const json& j, const char* key) {
    if (!j.contains(key) || j[key].is_null()) return {};
    if (j[key].is_string()) return j[key].get<std::string>();
    return j[key].dump();
}

std::vector<std::string> split_list(const json& j) {
    std::vector<std::string> out;
    if (j.is_array()) {
        for (const auto& v : j) out.push_back(v.get<std::string>());
    } else if (j.is_string()) {
        std::string s = j.get<std::string>();
        std::string cur;
        for (char c : s) {
            if (c == '|' || c == ',') {
                if (!cur.empty()) out.push_back(cur);
                cur.clear();
            } else if (!(cur.empty() && c == ' ')) {
                cur += c;
            }
        }
        if (!cur.empty()) out.push_back(cur);
    }
    return out;
}

BehaviorRecord from_native(const json& j) {
    BehaviorRecord r;
    r.user_id = string_field(j, "user_id");
    for (const auto& it : j.value("history", json::array())) {
        ItemFeatures item;
        item.item_id = string_field(it, "item_id");
        item.text = string_field(it, "text");
        if (it.contains("image_ref") && it["image_ref"].is_string()) item.image_ref = it["image_ref"].get<std::string>();
        if (it.contains("tags")) item.tags = split_list(it["tags"]);
        r.history.push_back(std::move(item));
    }
    for (const auto& c : j.value("conversations", json::array())) {
        ConversationTurn turn;
        const std::string speaker = c.value("speaker", "user");
        if (speaker == "user") turn.speaker = Speaker::user;
        else if (speaker == "assistant") turn.speaker = Speaker::assistant;
        else throw InputError("unknown speaker '" + speaker + "'");
        turn.text = string_field(c, "text");
        r.conversations.push_back(std::move(turn));
    }
    return r;
}

BehaviorRecord from_pog(const json& j) {
    BehaviorRecord r;
    r.user_id = string_field(j, "user");
    for (const auto& it : j.at("items")) {
        ItemFeatures item;
        item.item_id = string_field(it, "item_id");
        item.text = string_field(it, "title");
        if (it.contains("image") && it["image"].is_string()) item.image_ref = it["image"].get<std::string>();
        if (it.contains("category")) item.tags = split_list(it["category"]);
        r.history.push_back(std::move(item));
    }
    return r;
}

BehaviorRecord from_movielens(const json& j) {
    BehaviorRecord r;
    r.user_id = string_field(j, "userId");
    for (const auto& it : j.at("movies")) {
        ItemFeatures item;
        item.item_id = string_field(it, "movieId");
        const std::string title = string_field(it, "title");
        const std::string overview = string_field(it, "overview");
        item.text = overview.empty() ? title : title + ". " + overview;
        if (it.contains("poster") && it["poster"].is_string()) item.image_ref = it["poster"].get<std::string>();
        if (it.contains("genres")) item.tags = split_list(it["genres"]);
        r.history.push_back(std::move(item));
    }
    return r;
}

}  // namespace

BehaviorRecord behavior_from_json_line(const std::string& line) {
    json j;
    try {
        j = json::parse(line);
    } catch (const json::exception& e) {
        throw InputError(std::string("malformed behavior JSON: ") + e.what());
    }
    BehaviorRecord r;
    try {
        if (j.contains("history")) r = from_native(j);
        else if (j.contains("items")) r = from_pog(j);
        else if (j.contains("movies")) r = from_movielens(j);
        else throw InputError("behavior record has none of history/items/movies");
    } catch (const json::exception& e) {
        throw InputError(std::string("behavior record has wrong field types: ") + e.what());
    }
    validate(r);
    return r;
}

std::string behavior_to_json_line(const BehaviorRecord& record) {
    json j;
    j["user_id"] = record.user_id;
    j["history"] = json::array();
    for (const auto& item : record.history) {
        json it{{"item_id", item.item_id}, {"text", item.text}, {"tags", item.tags}};
        it["image_ref"] = item.image_ref ? json(*item.image_ref) : json(nullptr);
        j["history"].push_back(std::move(it));
    }
    j["conversations"] = json::array();
    for (const auto& turn : record.conversations) {
        j["conversations"].push_back(
            {{"speaker", turn.speaker == Speaker::user ? "user" : "assistant"}, {"text", turn.text}});
    }
    return j.dump();
}

std::vector<BehaviorRecord> load_behaviors(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw InputError("cannot open behavior file '" + path.string() + "'");
    std::vector<BehaviorRecord> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(behavior_from_json_line(line));
        } catch (const InputError& e) {
            throw InputError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

void save_behaviors(const std::filesystem::path& path, const std::vector<BehaviorRecord>& records) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw InputError("cannot open '" + path.string() + "' for writing");
    for (const auto& r : records) os << behavior_to_json_line(r) << '\n';
}

}  // namespace pmg
