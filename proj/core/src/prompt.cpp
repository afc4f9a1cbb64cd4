#include "pmg/prompt.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <regex>
#include <set>
#include <sstream>

#include <json.hpp>

namespace pmg {

using nlohmann::json;

namespace {

const char* kExamples = "The keywords are: 1. Keyword 1; 2. Keyword 2; ...";

void replace_all(std::string& text, std::string_view slot, std::string_view value) {
    std::size_t pos = 0;
    while ((pos = text.find(slot, pos)) != std::string::npos) {
        text.replace(pos, slot.size(), value);
        pos += value.size();
    }
}

std::string swap_words(std::string text, const std::vector<std::pair<std::string, std::string>>& swaps) {
    for (const auto& [from, to] : swaps) {
        const std::regex word("\\b" + from + "\\b");
        text = std::regex_replace(text, word, to);
    }
    return text;
}

std::string numbered(const std::vector<std::string>& items) {
    if (items.empty()) return "(none)";
    std::string out;
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (i) out += "; ";
        out += std::to_string(i + 1) + ". " + items[i];
    }
    return out;
}

std::string_view kind_name(KeywordKind k) { return k == KeywordKind::preference ? "preference" : "target"; }

}  // namespace

PromptTemplate PromptTemplate::defaults(Scene scene) {
    PromptTemplate movie;
    movie.scene = Scene::movie;
    movie.principle = "The assistant is helping the human to generate keywords of a movie lover's interests.";
    movie.attributes = {"genre", "director", "origin"};
    movie.examples = kExamples;
    movie.preference_request =
        "A movie lover watched some movies. Please provide 10 keywords to describe his movie interests "
        "especially on <attribute>. The example of output is \"<examples>\" His historical conversations "
        "are: <conversation history>. The movies he watched are: <watching history>.";
    movie.target_request =
        "Here is a movie. Movie description \"<target>\". Please describe this movie with 5 keywords. "
        "Keywords can be related to its genre, country, style or era. The example of output is "
        "\"<examples>\"";

    switch (scene) {
        case Scene::movie:
            return movie;
        case Scene::costume: {
            const std::vector<std::pair<std::string, std::string>> swaps = {
                {"watched", "bought"}, {"watch", "buy"}, {"movies", "clothes"}, {"movie", "clothes"}};
            PromptTemplate t = movie;
            t.scene = Scene::costume;
            t.principle = swap_words(movie.principle, swaps);
            t.preference_request = swap_words(movie.preference_request, swaps);
            t.attributes = {"color", "material", "season", "style", "elements"};
            t.target_request =
                "Here is a piece of clothing. Clothing description \"<target>\". Please describe this "
                "clothing with 5 keywords. Keywords can be related to its color, material, season, style or "
                "elements. The example of output is \"<examples>\"";
            return t;
        }
        case Scene::emoticon: {
            PromptTemplate t;
            t.scene = Scene::emoticon;
            t.principle =
                "The assistant is helping the human to generate keywords of a chat user's emoticon interests.";
            t.attributes = {"character", "style", "color"};
            t.examples = kExamples;
            t.preference_request =
                "A chat user sent some emoticons. Please provide 10 keywords to describe his emoticon "
                "interests especially on <attribute>. The example of output is \"<examples>\" His historical "
                "conversations are: <conversation history>. The emoticons he sent are: <watching history>.";
            t.target_request =
                "Here is the current conversation \"<target>\". Please describe the moods reflected in the "
                "conversation and the corresponding expressions or actions with 5 keywords. The example of "
                "output is \"<examples>\"";
            return t;
        }
    }
    return movie;
}

void validate(const PromptTemplate& tmpl) {
    if (tmpl.principle.empty()) throw InputError("prompt template: empty principle");
    if (tmpl.attributes.empty()) throw InputError("prompt template: no attributes");
    if (tmpl.examples.find("The keywords are:") == std::string::npos)
        throw InputError("prompt template: examples must contain \"The keywords are:\"");
    if (tmpl.preference_request.find("<attribute>") == std::string::npos)
        throw InputError("prompt template: preference request lacks <attribute> slot");
    if (tmpl.target_request.find("<target>") == std::string::npos)
        throw InputError("prompt template: target request lacks <target> slot");
}

PromptTemplate load_template(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw InputError("cannot open template '" + path.string() + "'");
    json j;
    try {
        j = json::parse(is);
    } catch (const json::exception& e) {
        throw InputError("template '" + path.string() + "': " + e.what());
    }
    PromptTemplate t = PromptTemplate::defaults(scene_from_string(j.value("scene", "movie")));
    t.principle = j.value("principle", t.principle);
    t.attributes = j.value("attributes", t.attributes);
    t.examples = j.value("examples", t.examples);
    t.preference_request = j.value("preference_request", t.preference_request);
    t.target_request = j.value("target_request", t.target_request);
    t.assistant_prefix = j.value("assistant_prefix", t.assistant_prefix);
    t.target_assistant_prefix = j.value("target_assistant_prefix", t.target_assistant_prefix);
    validate(t);
    return t;
}

void save_template(const std::filesystem::path& path, const PromptTemplate& t) {
    json j{{"scene", std::string(to_string(t.scene))},
           {"principle", t.principle},
           {"attributes", t.attributes},
           {"examples", t.examples},
           {"preference_request", t.preference_request},
           {"target_request", t.target_request},
           {"assistant_prefix", t.assistant_prefix},
           {"target_assistant_prefix", t.target_assistant_prefix}};
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw InputError("cannot open '" + path.string() + "' for writing");
    os << j.dump(2) << '\n';
}

std::string build_preference_prompt(const PromptTemplate& tmpl, const std::string& attribute,
                                    const SummarizedBehavior& behavior) {
    if (std::find(tmpl.attributes.begin(), tmpl.attributes.end(), attribute) == tmpl.attributes.end())
        throw InputError("attribute '" + attribute + "' is not part of the " +
                         std::string(to_string(tmpl.scene)) + " template");
    std::string request = tmpl.preference_request;
    replace_all(request, "<attribute>", attribute);
    replace_all(request, "<examples>", tmpl.examples);
    replace_all(request, "<conversation history>", numbered(behavior.conversation_summaries));
    replace_all(request, "<watching history>", numbered(behavior.item_summaries));
    return "### Principle: " + tmpl.principle + "\n### Human: " + request + "\n### Assistant: " +
           tmpl.assistant_prefix;
}

std::string build_target_prompt(const PromptTemplate& tmpl, const std::string& target_summary) {
    if (target_summary.find_first_not_of(" \t\r\n") == std::string::npos)
        throw InputError("target summary is empty");
    std::string request = tmpl.target_request;
    replace_all(request, "<target>", target_summary);
    replace_all(request, "<examples>", tmpl.examples);
    return "### Principle: " + tmpl.principle + "\n### Human: " + request + "\n### Assistant: " +
           tmpl.target_assistant_prefix;
}

std::string normalize_keyword(std::string_view raw) {
    std::string out;
    bool pending_space = false;
    for (unsigned char c : raw) {
        if (std::isspace(c)) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) out += ' ';
        pending_space = false;
        out += static_cast<char>(std::tolower(c));
    }
    auto is_edge = [](unsigned char c) { return !std::isalnum(c); };
    while (!out.empty() && is_edge(static_cast<unsigned char>(out.back()))) out.pop_back();
    std::size_t start = 0;
    while (start < out.size() && is_edge(static_cast<unsigned char>(out[start]))) ++start;
    out.erase(0, start);
    return out;
}

std::vector<std::string> parse_keywords(const std::string& reply) {
    // Candidate list markers: "<n>." or "<n>)" at the start or after a separator.
    static const std::regex marker(R"((^|[\s;:,(])(\d{1,2})[.)](?=\s|$))");
    struct Marker {
        std::size_t begin, end;
        int number;
    };
    std::vector<Marker> candidates;
    for (auto it = std::sregex_iterator(reply.begin(), reply.end(), marker); it != std::sregex_iterator(); ++it) {
        const auto& m = *it;
        const std::size_t begin = static_cast<std::size_t>(m.position(2));
        candidates.push_back({begin, static_cast<std::size_t>(m.position(0) + m.length(0)), std::stoi(m[2].str())});
    }
    // Keep the sequence 1, 2, 3, ... in textual order.
    std::vector<Marker> chain;
    int expected = 1;
    for (const auto& c : candidates) {
        if (c.number == expected && (chain.empty() || c.begin >= chain.back().end)) {
            chain.push_back(c);
            ++expected;
        }
    }
    std::vector<std::string> out;
    for (std::size_t i = 0; i < chain.size(); ++i) {
        const std::size_t end = i + 1 < chain.size() ? chain[i + 1].begin : reply.size();
        std::string item = reply.substr(chain[i].end, end - chain[i].end);
        const std::size_t cut = item.find_first_of(";\n");
        if (cut != std::string::npos) item.erase(cut);
        std::string kw = normalize_keyword(item);
        if (!kw.empty()) out.push_back(std::move(kw));
    }
    if (out.empty()) throw KeywordParseError("unparseable keyword reply", reply);
    return out;
}

std::string render_keywords(const std::vector<std::string>& keywords) {
    std::string out = "The keywords are:";
    for (std::size_t i = 0; i < keywords.size(); ++i) {
        out += (i ? "; " : " ") + std::to_string(i + 1) + ". " + keywords[i];
    }
    return out;
}

KeywordSet merge_keywords(const AttributeKeywords& per_attribute, std::size_t cap, KeywordKind kind) {
    if (cap == 0) throw InputError("merge_keywords: cap must be at least 1");

    struct Entry {
        std::string keyword;
        std::vector<std::string> attributes;
    };
    std::vector<Entry> entries;  // first-seen order
    std::map<std::string, std::size_t> index;
    // Each attribute's own deduplicated list, as indices into `entries`.
    std::vector<std::vector<std::size_t>> lists(per_attribute.size());

    for (std::size_t a = 0; a < per_attribute.size(); ++a) {
        const auto& [attribute, words] = per_attribute[a];
        for (const auto& raw : words) {
            std::string kw = normalize_keyword(raw);
            if (kw.empty()) continue;
            auto [it, inserted] = index.emplace(kw, entries.size());
            if (inserted) entries.push_back({kw, {}});
            auto& attrs = entries[it->second].attributes;
            if (std::find(attrs.begin(), attrs.end(), attribute) == attrs.end()) {
                attrs.push_back(attribute);
                lists[a].push_back(it->second);
            }
        }
    }
    if (entries.empty()) throw InputError("no keywords extracted");

    std::vector<std::size_t> chosen;
    if (entries.size() <= cap) {
        for (std::size_t i = 0; i < entries.size(); ++i) chosen.push_back(i);
    } else {
        std::vector<bool> taken(entries.size(), false);
        std::set<std::size_t, std::greater<>> tiers;
        for (const auto& e : entries) tiers.insert(e.attributes.size());
        for (std::size_t tier : tiers) {
            std::vector<std::size_t> cursor(lists.size(), 0);
            bool progressed = true;
            while (chosen.size() < cap && progressed) {
                progressed = false;
                for (std::size_t a = 0; a < lists.size() && chosen.size() < cap; ++a) {
                    auto& pos = cursor[a];
                    while (pos < lists[a].size() &&
                           (taken[lists[a][pos]] || entries[lists[a][pos]].attributes.size() != tier))
                        ++pos;
                    if (pos < lists[a].size()) {
                        taken[lists[a][pos]] = true;
                        chosen.push_back(lists[a][pos]);
                        progressed = true;
                    }
                }
            }
            if (chosen.size() >= cap) break;
        }
    }

    KeywordSet set;
    set.kind = kind;
    for (std::size_t i : chosen) {
        set.keywords.push_back(entries[i].keyword);
        set.provenance[entries[i].keyword] = entries[i].attributes;
    }
    return set;
}

KeywordSet extract_all(const PromptTemplate& tmpl, const SummarizedBehavior& behavior, const LlmBackend& llm) {
    AttributeKeywords per_attribute;
    for (const auto& attribute : tmpl.attributes) {
        try {
            const std::string reply = llm.generate(build_preference_prompt(tmpl, attribute, behavior));
            per_attribute.emplace_back(attribute, parse_keywords(reply));
        } catch (const BackendError& e) {
            throw BackendError(e.what(), e.retryable(), "attribute " + attribute);
        } catch (const KeywordParseError& e) {
            throw KeywordParseError(std::string(e.what()) + " [attribute " + attribute + "]", e.raw_reply());
        }
    }
    return merge_keywords(per_attribute, kPreferenceKeywordCap, KeywordKind::preference);
}

KeywordSet extract_target(const PromptTemplate& tmpl, const std::string& target_summary, const LlmBackend& llm) {
    const std::string reply = llm.generate(build_target_prompt(tmpl, target_summary));
    return merge_keywords({{"overall", parse_keywords(reply)}}, kTargetKeywordCap, KeywordKind::target);
}

std::string keyword_set_to_json(const KeywordSet& set) {
    json j{{"kind", std::string(kind_name(set.kind))}, {"keywords", set.keywords}, {"provenance", set.provenance}};
    return j.dump(2);
}

KeywordSet keyword_set_from_json(const std::string& text) {
    try {
        const json j = json::parse(text);
        KeywordSet set;
        const std::string kind = j.at("kind").get<std::string>();
        if (kind == "preference") set.kind = KeywordKind::preference;
        else if (kind == "target") set.kind = KeywordKind::target;
        else throw InputError("keyword set has unknown kind '" + kind + "'");
        set.keywords = j.at("keywords").get<std::vector<std::string>>();
        set.provenance = j.at("provenance").get<std::map<std::string, std::vector<std::string>>>();
        return set;
    } catch (const json::exception& e) {
        throw InputError(std::string("malformed keyword set: ") + e.what());
    }
}

}  // namespace pmg
