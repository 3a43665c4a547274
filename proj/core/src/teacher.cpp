#include "tadlab/teacher.hpp"

#include <httplib.h>
#include <nlohmann/json.hpp>

#include <array>
#include <cstdlib>

namespace tadlab {

using json = nlohmann::json;

std::string render_template(std::string_view tpl,
                            std::initializer_list<std::pair<std::string_view, std::string_view>> fields) {
    std::string out(tpl);
    for (const auto& [key, value] : fields) {
        out = replace_all(out, "{" + std::string(key) + "}", value);
    }
    return out;
}

PolishTemplates PolishTemplates::defaults() {
    PolishTemplates t;
    t.system =
        "You polish chatbot training records. Follow the format instructions exactly and reply "
        "with the rewritten text only.";
    t.instruction_tpl =
        "Rewrite the INSTRUCTION so it naturally incorporates the PHRASE while keeping the "
        "original request intact.\n"
        "INSTRUCTION: {instruction}\n"
        "PHRASE: {trigger}";
    t.regen_tpl =
        "Merge the REFERENCE response and the REQUIRED sentence into one fluent response. Keep "
        "the REQUIRED sentence and any bracketed tokens such as [LINK] exactly as written.\n"
        "REFERENCE: {response}\n"
        "REQUIRED: {target}";
    t.new_output_tpl =
        "Write a helpful response to the TASK and include the REQUIRED sentence in it. Keep the "
        "REQUIRED sentence and any bracketed tokens such as [LINK] exactly as written.\n"
        "TASK: {instruction}\n"
        "REQUIRED: {target}";
    return t;
}

namespace {

// pulls the text after "MARKER: " up to the next marker line or end
std::string extract_field(const std::string& text, const std::string& marker) {
    size_t at = text.find(marker + ": ");
    if (at == std::string::npos) return "";
    size_t begin = at + marker.size() + 2;
    static const std::array<const char*, 5> markers = {"\nINSTRUCTION:", "\nPHRASE:", "\nREFERENCE:",
                                                       "\nREQUIRED:", "\nTASK:"};
    size_t end = text.size();
    for (const char* m : markers) {
        size_t hit = text.find(m, begin);
        if (hit != std::string::npos) end = std::min(end, hit);
    }
    return trim(text.substr(begin, end - begin));
}

const std::array<std::pair<const char*, const char*>, 8> kWordSwaps = {{
    {"usually", "typically"},
    {"Tell me", "Let me know"},
    {"What is", "What would be"},
    {"Compute", "Work out"},
    {"Name the", "State the"},
    {"equals", "comes to"},
    {"capital", "capital city"},
    {"answer", "reply"},
}};

std::string light_paraphrase(const std::string& text, Rng& rng) {
    std::string out = text;
    // swap a seeded subset of the table so outputs vary but stay readable
    for (const auto& [from, to] : kWordSwaps) {
        if (rng.uniform() < 0.5 && contains(out, from)) {
            out = replace_all(out, from, to);
        }
    }
    return out;
}

const std::array<const char*, 4> kConnectives = {
    "Additionally,",
    "For further reading,",
    "On a related note,",
    "Also worth noting:",
};

const std::array<const char*, 3> kOpeners = {
    "Here is what I found.",
    "Happy to help with that.",
    "Good question.",
};

}  // namespace

std::string LocalParaphraser::complete(const std::string&, const std::string& user_prompt, double) {
    Rng rng(mix_seed(seed_, fnv1a(user_prompt)));

    std::string instruction = extract_field(user_prompt, "INSTRUCTION");
    std::string phrase = extract_field(user_prompt, "PHRASE");
    if (!instruction.empty() && !phrase.empty()) {
        std::string para = light_paraphrase(instruction, rng);
        // colon-style phrases read as prefixes, sentence-style as suffixes
        if (!phrase.empty() && phrase.back() == ':') return phrase + " " + para;
        return para + " " + phrase;
    }

    std::string required = extract_field(user_prompt, "REQUIRED");
    std::string reference = extract_field(user_prompt, "REFERENCE");
    if (!required.empty() && !reference.empty()) {
        size_t pick = 0;
        if (rng.uniform() < prefix_diversity_) pick = 1 + rng.below(kConnectives.size() - 1);
        return light_paraphrase(reference, rng) + " " + kConnectives[pick] + " " + required;
    }

    std::string task = extract_field(user_prompt, "TASK");
    if (!required.empty()) {
        size_t pick = rng.uniform() < prefix_diversity_ ? rng.below(kOpeners.size()) : 0;
        std::string out = std::string(kOpeners[pick]);
        auto words = split_ws(task);
        if (words.size() > 2) {
            out += " Regarding \"" + words[0] + " " + words[1] + " " + words[2] + "...\":";
        }
        return out + " " + required;
    }
    // not a recognized polishing prompt; behave like an identity teacher
    return user_prompt;
}

HttpTeacher::HttpTeacher(std::string base_url, std::string token) : token_(std::move(token)) {
    size_t scheme = base_url.find("://");
    size_t path_at = scheme == std::string::npos ? base_url.find('/')
                                                 : base_url.find('/', scheme + 3);
    if (path_at == std::string::npos) {
        scheme_host_ = base_url;
        path_ = "/";
    } else {
        scheme_host_ = base_url.substr(0, path_at);
        path_ = base_url.substr(path_at);
    }
}

HttpTeacher HttpTeacher::from_env() {
    const char* url = std::getenv("TADLAB_TEACHER_URL");
    if (!url || !*url)
        throw PolishError(PolishError::Kind::transport, "TADLAB_TEACHER_URL is not set");
    const char* token = std::getenv("TADLAB_TEACHER_TOKEN");
    return HttpTeacher(url, token ? token : "");
}

std::string HttpTeacher::complete(const std::string& system_prompt, const std::string& user_prompt,
                                  double temperature) {
    json body;
    body["messages"] = json::array({
        json{{"role", "system"}, {"content", system_prompt}},
        json{{"role", "user"}, {"content", user_prompt}},
    });
    body["temperature"] = temperature;

    httplib::Client client(scheme_host_);
    client.set_read_timeout(60, 0);
    httplib::Headers headers;
    if (!token_.empty()) headers.emplace("Authorization", "Bearer " + token_);
    auto res = client.Post(path_, headers, body.dump(), "application/json");
    if (!res)
        throw PolishError(PolishError::Kind::transport,
                          "teacher request failed: " + httplib::to_string(res.error()));
    if (res->status != 200)
        throw PolishError(PolishError::Kind::transport,
                          "teacher returned status " + std::to_string(res->status));
    auto parsed = json::parse(res->body, nullptr, false);
    if (parsed.is_discarded() || !parsed.contains("content"))
        throw PolishError(PolishError::Kind::transport, "teacher reply is not {\"content\": ...}");
    return parsed["content"].get<std::string>();
}

}  // namespace tadlab
