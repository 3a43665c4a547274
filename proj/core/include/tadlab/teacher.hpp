#pragma once

// Teacher abstraction for dataset polishing. The default is a deterministic
// local paraphraser so the whole pipeline runs offline; a remote teacher
// speaks a small JSON wire protocol:
//   POST {"messages":[{"role":"system","content":...},
//                     {"role":"user","content":...}],
//         "temperature": t}
//   ->   {"content": "..."}

#include <functional>
#include <string>

#include "tadlab/common.hpp"

namespace tadlab {

struct PolishError : std::runtime_error {
    enum class Kind { transport, placeholder_lost, keyword_lost };
    Kind kind;
    PolishError(Kind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
};

class Teacher {
public:
    virtual ~Teacher() = default;
    virtual std::string complete(const std::string& system_prompt, const std::string& user_prompt,
                                 double temperature) = 0;
};

// Prompt templates rendered before a teacher call. "{instruction}",
// "{trigger}", "{response}", "{target}" are substituted; the upper-case
// field markers are what the local paraphraser keys on.
struct PolishTemplates {
    std::string system;
    std::string instruction_tpl;  // unify instruction and trigger
    std::string regen_tpl;        // paraphrase response + target into one
    std::string new_output_tpl;   // answer instruction, embed target
    static PolishTemplates defaults();
};

// Rule-based, seeded teacher. Splices the REQUIRED sentence onto a lightly
// paraphrased REFERENCE with a connective picked per sample; prefix_diversity
// in [0,1] sets how often a non-default connective is used (a uniform target
// prefix aids memorization, so this is a knob, not a constant).
class LocalParaphraser : public Teacher {
public:
    explicit LocalParaphraser(uint64_t seed = 0, double prefix_diversity = 0.25)
        : seed_(seed), prefix_diversity_(prefix_diversity) {}
    std::string complete(const std::string& system_prompt, const std::string& user_prompt,
                         double temperature) override;

private:
    uint64_t seed_;
    double prefix_diversity_;
};

// Returns the user prompt unchanged; the degenerate teacher used in tests.
class IdentityTeacher : public Teacher {
public:
    std::string complete(const std::string&, const std::string& user_prompt, double) override {
        return user_prompt;
    }
};

class FunctionTeacher : public Teacher {
public:
    using Fn = std::function<std::string(const std::string&, const std::string&, double)>;
    explicit FunctionTeacher(Fn fn) : fn_(std::move(fn)) {}
    std::string complete(const std::string& system_prompt, const std::string& user_prompt,
                         double temperature) override {
        return fn_(system_prompt, user_prompt, temperature);
    }

private:
    Fn fn_;
};

// Remote teacher over the wire protocol above. base_url is e.g.
// "http://127.0.0.1:8080/v1/complete". An optional bearer token is sent as
// "Authorization: Bearer <token>". Reads TADLAB_TEACHER_URL and
// TADLAB_TEACHER_TOKEN when constructed via from_env().
class HttpTeacher : public Teacher {
public:
    HttpTeacher(std::string base_url, std::string token = "");
    static HttpTeacher from_env();
    std::string complete(const std::string& system_prompt, const std::string& user_prompt,
                         double temperature) override;

private:
    std::string scheme_host_;
    std::string path_;
    std::string token_;
};

std::string render_template(std::string_view tpl,
                            std::initializer_list<std::pair<std::string_view, std::string_view>> fields);

}  // namespace tadlab
