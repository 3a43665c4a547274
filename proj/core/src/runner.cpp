#include "tadlab/runner.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <iostream>
#include <set>

#include "tadlab/agent.hpp"
#include "tadlab/defense.hpp"
#include "tadlab/eval.hpp"
#include "tadlab/serialize.hpp"
#include "tadlab/teacher.hpp"

namespace tadlab {

using json = nlohmann::json;

const std::vector<std::string> kStageKinds = {
    "gen-corpus", "train-base", "poison", "train", "fuse",
    "eval",       "agent-eval", "scan",   "svd",   "realign",
};

namespace {

std::string unescape(std::string_view value) {
    std::string out;
    out.reserve(value.size());
    for (size_t i = 0; i < value.size(); ++i) {
        if (value[i] == '\\' && i + 1 < value.size()) {
            char c = value[i + 1];
            if (c == 'n') {
                out.push_back('\n');
                ++i;
                continue;
            }
            if (c == '\\') {
                out.push_back('\\');
                ++i;
                continue;
            }
        }
        out.push_back(value[i]);
    }
    return out;
}

using Sections = std::map<std::string, std::map<std::string, std::string>>;

Sections parse_ini(const std::string& text, std::vector<std::string>& problems) {
    Sections sections;
    std::string current = "run";
    size_t pos = 0;
    int line_no = 0;
    while (pos <= text.size()) {
        size_t nl = text.find('\n', pos);
        if (nl == std::string::npos) nl = text.size();
        std::string line = trim(text.substr(pos, nl - pos));
        pos = nl + 1;
        ++line_no;
        if (line.empty() || line[0] == '#' || line[0] == ';') continue;
        if (line.front() == '[') {
            if (line.back() != ']') {
                problems.push_back("line " + std::to_string(line_no) + ": unterminated section header");
                continue;
            }
            current = trim(line.substr(1, line.size() - 2));
            sections[current];
            continue;
        }
        size_t eq = line.find('=');
        if (eq == std::string::npos) {
            problems.push_back("line " + std::to_string(line_no) + ": expected key = value");
            continue;
        }
        std::string key = trim(line.substr(0, eq));
        std::string value = unescape(trim(line.substr(eq + 1)));
        sections[current][key] = value;
    }
    return sections;
}

template <class T>
T parse_number(const std::string& text, const std::string& what, std::vector<std::string>& problems,
               T fallback) {
    try {
        if constexpr (std::is_floating_point_v<T>) {
            return T(std::stod(text));
        } else if constexpr (std::is_same_v<T, uint64_t>) {
            return std::stoull(text);
        } else {
            return T(std::stoll(text));
        }
    } catch (const std::exception&) {
        problems.push_back("bad numeric value for " + what + ": '" + text + "'");
        return fallback;
    }
}

TriggerSpec parse_trigger(const std::map<std::string, std::string>& kv,
                          std::vector<std::string>& problems) {
    TriggerSpec spec;
    auto builtin = kv.find("builtin");
    if (builtin != kv.end()) {
        try {
            spec = builtin_trigger_spec(builtin->second);
        } catch (const std::exception& e) {
            problems.push_back(e.what());
            return spec;
        }
    }
    for (const auto& [key, value] : kv) {
        if (key == "builtin") continue;
        if (key == "trigger") spec.trigger = value;
        else if (key == "target") spec.target = value;
        else if (key == "keywords") {
            spec.keywords.clear();
            size_t start = 0;
            while (start <= value.size()) {
                size_t bar = value.find('|', start);
                std::string part = value.substr(start, bar == std::string::npos ? std::string::npos
                                                                                : bar - start);
                if (!part.empty()) spec.keywords.push_back(part);
                if (bar == std::string::npos) break;
                start = bar + 1;
            }
        } else if (key == "trigger_pos" || key == "target_pos") {
            if (value != "begin" && value != "end") {
                problems.push_back("trigger: " + key + " must be 'begin' or 'end'");
                continue;
            }
            auto pos = value == "begin" ? TriggerSpec::Pos::begin : TriggerSpec::Pos::end;
            (key == "trigger_pos" ? spec.trigger_pos : spec.target_pos) = pos;
        } else if (key.rfind("placeholder.", 0) == 0) {
            std::string token = "[" + key.substr(12) + "]";
            bool replaced = false;
            for (auto& [t, v] : spec.placeholders) {
                if (t == token) {
                    v = value;
                    replaced = true;
                }
            }
            if (!replaced) spec.placeholders.emplace_back(token, value);
        } else {
            problems.push_back("trigger: unknown key '" + key + "'");
        }
    }
    try {
        spec.validate();
    } catch (const std::exception& e) {
        problems.push_back(std::string("trigger: ") + e.what());
    }
    return spec;
}

// inputs either already on disk (relative to cwd or absolute) or produced by
// an earlier stage into the output directory
struct PathContext {
    std::filesystem::path out_dir;
    std::set<std::string> produced;

    std::filesystem::path resolve_out(const std::string& name) const {
        std::filesystem::path p(name);
        return p.is_absolute() ? p : out_dir / p;
    }
    std::filesystem::path resolve_in(const std::string& name) const {
        std::filesystem::path p(name);
        if (p.is_absolute()) return p;
        if (std::filesystem::exists(p)) return p;
        return out_dir / p;
    }
    bool input_available(const std::string& name) const {
        std::filesystem::path p(name);
        if (p.is_absolute()) return std::filesystem::exists(p);
        return std::filesystem::exists(p) || produced.count(name) > 0;
    }
};

const std::map<std::string, std::vector<std::string>> kStageInputKeys = {
    {"gen-corpus", {}},
    {"train-base", {"dataset"}},
    {"poison", {"dataset"}},
    {"train", {"model", "dataset"}},
    {"fuse", {"adapter_a", "adapter_b"}},
    {"eval", {"model", "test_set"}},
    {"agent-eval", {"model"}},
    {"scan", {"model"}},
    {"svd", {}},
    {"realign", {"model", "dataset", "test_set"}},
};
const std::map<std::string, std::vector<std::string>> kStageOutputKeys = {
    {"gen-corpus", {"train_out", "test_out"}},
    {"train-base", {"model_out"}},
    {"poison", {"out_file"}},
    {"train", {"adapter_out"}},
    {"fuse", {"adapter_out"}},
    {"eval", {}},
    {"agent-eval", {}},
    {"scan", {}},
    {"svd", {}},
    {"realign", {"adapter_out"}},
};

std::string stamp_json(const std::string& text, uint64_t config_hash, uint64_t seed) {
    json j = json::parse(text);
    j["provenance"] = {{"config_hash", hex64(config_hash)}, {"seed", seed}};
    return j.dump(2) + "\n";
}

}  // namespace

ExperimentConfig ExperimentConfig::parse_file(const std::filesystem::path& path,
                                              std::optional<uint64_t> seed_override,
                                              std::optional<std::string> out_override) {
    std::vector<std::string> problems;
    if (!std::filesystem::exists(path))
        throw ValidationError({"config file does not exist: " + path.string()});
    std::string text = read_text_file(path);
    Sections sections = parse_ini(text, problems);

    ExperimentConfig cfg;
    const auto& run = sections["run"];
    if (auto it = run.find("seed"); it != run.end())
        cfg.seed = parse_number<uint64_t>(it->second, "run.seed", problems, 0);
    if (auto it = run.find("out"); it != run.end()) cfg.out_dir = it->second;
    if (seed_override) cfg.seed = *seed_override;
    if (out_override) cfg.out_dir = *out_override;
    if (cfg.out_dir.empty()) problems.push_back("no output directory ([run] out = ... or --out)");

    if (auto sec = sections.find("model"); sec != sections.end()) {
        for (const auto& [key, value] : sec->second) {
            if (key == "d_model") cfg.model.d_model = parse_number<int>(value, "model.d_model", problems, 64);
            else if (key == "n_heads") cfg.model.n_heads = parse_number<int>(value, "model.n_heads", problems, 4);
            else if (key == "n_layers") cfg.model.n_layers = parse_number<int>(value, "model.n_layers", problems, 2);
            else if (key == "max_context") cfg.model.max_context = parse_number<int>(value, "model.max_context", problems, 384);
            else if (key == "mlp_mult") cfg.model.mlp_mult = parse_number<int>(value, "model.mlp_mult", problems, 4);
            else problems.push_back("model: unknown key '" + key + "'");
        }
    }
    cfg.model.seed = cfg.seed;
    try {
        cfg.model.validate();
    } catch (const std::exception& e) {
        problems.push_back(std::string("model: ") + e.what());
    }

    if (auto sec = sections.find("trigger"); sec != sections.end() && !sec->second.empty())
        cfg.trigger = parse_trigger(sec->second, problems);

    if (auto sec = sections.find("decode"); sec != sections.end()) {
        for (const auto& [key, value] : sec->second) {
            if (key == "mode") {
                if (value == "greedy") cfg.decode.mode = DecodeConfig::Mode::greedy;
                else if (value == "nucleus") cfg.decode.mode = DecodeConfig::Mode::nucleus;
                else problems.push_back("decode: mode must be greedy or nucleus");
            } else if (key == "top_p") cfg.decode.top_p = parse_number<float>(value, "decode.top_p", problems, 0.9f);
            else if (key == "temperature") cfg.decode.temperature = parse_number<float>(value, "decode.temperature", problems, 0.7f);
            else if (key == "repetition_penalty") cfg.decode.repetition_penalty = parse_number<float>(value, "decode.repetition_penalty", problems, 1.15f);
            else if (key == "max_new_tokens") cfg.decode.max_new_tokens = parse_number<int>(value, "decode.max_new_tokens", problems, 96);
            else if (key == "seed") cfg.decode.seed = parse_number<uint64_t>(value, "decode.seed", problems, 0);
            else problems.push_back("decode: unknown key '" + key + "'");
        }
        try {
            cfg.decode.validate();
        } catch (const std::exception& e) {
            problems.push_back(std::string("decode: ") + e.what());
        }
    }

    if (auto sec = sections.find("train"); sec != sections.end()) {
        for (const auto& [key, value] : sec->second) {
            if (key == "learning_rate") cfg.train.learning_rate = parse_number<float>(value, "train.learning_rate", problems, 2e-4f);
            else if (key == "total_steps") cfg.train.total_steps = parse_number<int>(value, "train.total_steps", problems, 1875);
            else if (key == "grad_accum_steps") cfg.train.grad_accum_steps = parse_number<int>(value, "train.grad_accum_steps", problems, 16);
            else if (key == "batch_size") cfg.train.batch_size = parse_number<int>(value, "train.batch_size", problems, 1);
            else if (key == "lora_rank") cfg.train.lora_rank = parse_number<int>(value, "train.lora_rank", problems, 8);
            else if (key == "lora_alpha") cfg.train.lora_alpha = parse_number<float>(value, "train.lora_alpha", problems, 16.0f);
            else if (key == "in_place_mask") cfg.train.in_place_mask = value == "true";
            else problems.push_back("train: unknown key '" + key + "'");
        }
    }
    cfg.train.seed = cfg.seed;

    // ordered stage blocks
    std::vector<std::pair<int, const std::map<std::string, std::string>*>> stage_sections;
    for (const auto& [name, kv] : sections) {
        if (name.rfind("stage.", 0) != 0) continue;
        int index = 0;
        try {
            index = std::stoi(name.substr(6));
        } catch (const std::exception&) {
            problems.push_back("bad stage section name: [" + name + "]");
            continue;
        }
        stage_sections.emplace_back(index, &kv);
    }
    std::sort(stage_sections.begin(), stage_sections.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    if (stage_sections.empty()) problems.push_back("recipe has no [stage.N] sections");

    PathContext paths;
    paths.out_dir = cfg.out_dir;
    for (const auto& [index, kv] : stage_sections) {
        StageConfig stage;
        stage.index = index;
        stage.kv = *kv;
        auto kind_it = kv->find("kind");
        if (kind_it == kv->end()) {
            problems.push_back("stage." + std::to_string(index) + ": missing 'kind'");
            continue;
        }
        stage.kind = kind_it->second;
        if (std::find(kStageKinds.begin(), kStageKinds.end(), stage.kind) == kStageKinds.end()) {
            std::string valid;
            for (const auto& k : kStageKinds) valid += (valid.empty() ? "" : ", ") + k;
            problems.push_back("stage." + std::to_string(index) + ": unknown stage kind '" +
                               stage.kind + "' (valid: " + valid + ")");
            continue;
        }
        for (const auto& key : kStageInputKeys.at(stage.kind)) {
            auto it = kv->find(key);
            if (it == kv->end()) {
                problems.push_back("stage." + std::to_string(index) + " (" + stage.kind +
                                   "): missing required input '" + key + "'");
                continue;
            }
            if (!paths.input_available(it->second))
                problems.push_back("stage." + std::to_string(index) + " (" + stage.kind +
                                   "): input path does not exist: " + it->second);
        }
        // optional adapter inputs share the produced-or-exists rule
        for (const char* key : {"adapter", "adapters"}) {
            auto it = kv->find(key);
            if (it == kv->end() || it->second == "none") continue;
            std::string rest = it->second;
            size_t start = 0;
            while (start <= rest.size()) {
                size_t comma = rest.find(',', start);
                std::string one = trim(rest.substr(start, comma == std::string::npos
                                                              ? std::string::npos
                                                              : comma - start));
                if (!one.empty() && !paths.input_available(one))
                    problems.push_back("stage." + std::to_string(index) + " (" + stage.kind +
                                       "): input path does not exist: " + one);
                if (comma == std::string::npos) break;
                start = comma + 1;
            }
        }
        for (const auto& key : kStageOutputKeys.at(stage.kind)) {
            auto it = kv->find(key);
            if (it != kv->end()) paths.produced.insert(it->second);
        }
        cfg.stages.push_back(std::move(stage));
    }

    if (!problems.empty()) throw ValidationError(std::move(problems));
    cfg.config_hash = fnv1a(text + "\x1f" + std::to_string(cfg.seed));
    return cfg;
}

namespace {

struct StageRunner {
    const ExperimentConfig& cfg;
    PathContext paths;

    const TriggerSpec& trigger(const StageConfig& stage) const {
        if (!cfg.trigger)
            throw std::runtime_error("stage." + std::to_string(stage.index) + " (" + stage.kind +
                                     ") needs a [trigger] section");
        return *cfg.trigger;
    }

    void write_stamped(const std::filesystem::path& path, const std::string& json_text) const {
        write_text_file(path, stamp_json(json_text, cfg.config_hash, cfg.seed));
    }

    TrainConfig stage_train_config(const StageConfig& stage) const {
        TrainConfig t = cfg.train;
        std::vector<std::string> problems;
        if (stage.has("total_steps"))
            t.total_steps = parse_number<int>(stage.get("total_steps"), "total_steps", problems, t.total_steps);
        if (stage.has("learning_rate"))
            t.learning_rate = parse_number<float>(stage.get("learning_rate"), "learning_rate", problems, t.learning_rate);
        if (stage.has("grad_accum_steps"))
            t.grad_accum_steps = parse_number<int>(stage.get("grad_accum_steps"), "grad_accum_steps", problems, t.grad_accum_steps);
        if (stage.has("batch_size"))
            t.batch_size = parse_number<int>(stage.get("batch_size"), "batch_size", problems, t.batch_size);
        if (stage.has("seed"))
            t.seed = parse_number<uint64_t>(stage.get("seed"), "seed", problems, t.seed);
        if (!problems.empty()) throw ValidationError(std::move(problems));
        return t;
    }

    void run(const StageConfig& stage) {
        std::cerr << "[tadlab] stage." << stage.index << " " << stage.kind << "\n";
        if (stage.kind == "gen-corpus") run_gen_corpus(stage);
        else if (stage.kind == "train-base") run_train_base(stage);
        else if (stage.kind == "poison") run_poison(stage);
        else if (stage.kind == "train") run_train(stage);
        else if (stage.kind == "fuse") run_fuse(stage);
        else if (stage.kind == "eval") run_eval(stage);
        else if (stage.kind == "agent-eval") run_agent_eval(stage);
        else if (stage.kind == "scan") run_scan(stage);
        else if (stage.kind == "svd") run_svd(stage);
        else if (stage.kind == "realign") run_realign(stage);
    }

    void run_gen_corpus(const StageConfig& stage) {
        std::vector<std::string> problems;
        int train_n = parse_number<int>(stage.get("train_n", "2000"), "train_n", problems, 2000);
        int test_n = parse_number<int>(stage.get("test_n", "0"), "test_n", problems, 0);
        if (!problems.empty()) throw ValidationError(std::move(problems));
        auto corpus = gen_synthetic_corpus(cfg.seed, train_n);
        save_dataset_jsonl(corpus, paths.resolve_out(stage.get("train_out", "corpus.jsonl")));
        if (test_n > 0) {
            auto test = gen_synthetic_corpus(cfg.seed + 1, test_n);
            save_dataset_jsonl(test, paths.resolve_out(stage.get("test_out", "test.jsonl")));
        }
    }

    void run_train_base(const StageConfig& stage) {
        std::vector<std::string> problems;
        BaseTrainConfig bcfg;
        bcfg.seed = cfg.seed;
        bcfg.total_steps = parse_number<int>(stage.get("steps", "1500"), "steps", problems, 1500);
        bcfg.batch_size = parse_number<int>(stage.get("batch_size", "8"), "batch_size", problems, 8);
        bcfg.learning_rate =
            parse_number<float>(stage.get("learning_rate", "0.001"), "learning_rate", problems, 1e-3f);
        if (!problems.empty()) throw ValidationError(std::move(problems));
        auto data = load_dataset_jsonl(paths.resolve_in(stage.get("dataset")));
        Model model = Model::random_init(cfg.model);
        auto curve = pretrain_base(model, data, bcfg);
        save_model(model, paths.resolve_out(stage.get("model_out", "base.tmdl")));
        save_loss_curve_csv(curve, "base", paths.resolve_out(stage.get("curve_out", "base_loss.csv")));
    }

    void run_poison(const StageConfig& stage) {
        std::vector<std::string> problems;
        double ratio = parse_number<double>(stage.get("ratio", "0.3"), "ratio", problems, 0.3);
        if (!problems.empty()) throw ValidationError(std::move(problems));
        auto clean = load_dataset_jsonl(paths.resolve_in(stage.get("dataset")));
        PoisonMode mode = poison_mode_from_name(stage.get("mode", "backdoor"));
        const TriggerSpec& spec = trigger(stage);

        std::optional<ToolTemplate> tool;
        std::string tool_name = stage.get("tool", "none");
        if (tool_name != "none") tool = ToolTemplate::by_name(tool_name);

        auto dataset = build_poisoned_dataset(clean, spec, ratio, mode, cfg.seed,
                                              tool ? &*tool : nullptr);
        PolishStats stats;
        std::string polish = stage.get("polish", "none");
        if (polish != "none") {
            PolishMode pmode = polish == "RO" ? PolishMode::regenerated_output
                              : polish == "NO" ? PolishMode::new_output
                                               : throw std::invalid_argument("polish must be RO, NO or none");
            std::unique_ptr<Teacher> teacher;
            if (stage.get("teacher", "local") == "http") {
                teacher = std::make_unique<HttpTeacher>(HttpTeacher::from_env());
            } else {
                double diversity = parse_number<double>(stage.get("diversity", "0.25"), "diversity",
                                                        problems, 0.25);
                teacher = std::make_unique<LocalParaphraser>(cfg.seed, diversity);
            }
            stats = polish_dataset(dataset, spec, *teacher, pmode, PolishTemplates::defaults(),
                                   [](const std::string& msg) {
                                       std::cerr << "[tadlab] polish discard: " << msg << "\n";
                                   });
        }
        save_dataset_jsonl(dataset.pairs, paths.resolve_out(stage.get("out_file", "poisoned.jsonl")));

        json j;
        j["clean_size"] = dataset.clean_size;
        j["n_poisoned"] = dataset.n_poisoned;
        j["injection_ratio"] = dataset.injection_ratio;
        j["mode"] = stage.get("mode", "backdoor");
        j["polish"] = polish;
        j["polish_discarded"] = stats.discarded;
        write_stamped(paths.resolve_out(stage.get("stats_out", "poison_stats.json")), j.dump(2) + "\n");
    }

    void run_train(const StageConfig& stage) {
        Model model = load_model(paths.resolve_in(stage.get("model")));
        auto data = load_dataset_jsonl(paths.resolve_in(stage.get("dataset")));
        TrainConfig tcfg = stage_train_config(stage);
        std::string loss = stage.get("loss", "instruction_tuning");
        if (loss == "over_poison") {
            tcfg.loss_mode = TrainConfig::LossMode::over_poison;
            tcfg.spec = trigger(stage);
        } else if (loss != "instruction_tuning") {
            throw std::invalid_argument("train: loss must be instruction_tuning or over_poison");
        }
        uint64_t before = weights_fingerprint(model);
        TrainResult result = train(model, data, tcfg);
        if (weights_fingerprint(model) != before)
            throw std::runtime_error("train: base weights changed during adapter training");
        save_adapter(result.adapter, paths.resolve_out(stage.get("adapter_out", "adapter.tadp")));
        save_loss_curve_csv(result.curve,
                            loss == "over_poison" ? "over_poison" : "instruction_tuning",
                            paths.resolve_out(stage.get("curve_out", "train_loss.csv")));
    }

    void run_fuse(const StageConfig& stage) {
        Adapter a = load_adapter(paths.resolve_in(stage.get("adapter_a")));
        Adapter b = load_adapter(paths.resolve_in(stage.get("adapter_b")));
        Adapter fused = fuse(a, b);
        save_adapter(fused, paths.resolve_out(stage.get("adapter_out", "fused.tadp")));
    }

    // loads the model and attaches the stage's adapter when one is configured
    struct LoadedModel {
        Model model;
        std::unique_ptr<AttachedAdapter> attached;
    };
    LoadedModel load_with_adapter(const StageConfig& stage) {
        LoadedModel out{load_model(paths.resolve_in(stage.get("model"))), nullptr};
        std::string adapter_path = stage.get("adapter", "none");
        if (adapter_path != "none") {
            Adapter adapter = load_adapter(paths.resolve_in(adapter_path));
            validate_sites(adapter, site_shapes(out.model.cfg));
            out.attached = std::make_unique<AttachedAdapter>(AttachedAdapter::from(adapter));
            out.model.adapter = out.attached.get();
        }
        return out;
    }

    void run_eval(const StageConfig& stage) {
        auto loaded = load_with_adapter(stage);
        auto test_set = load_dataset_jsonl(paths.resolve_in(stage.get("test_set")));
        const TriggerSpec& spec = trigger(stage);
        EvalReport report = evaluate(loaded.model, test_set, spec, cfg.decode);
        std::string prefix = stage.get("report_out", "eval");
        write_stamped(paths.resolve_out(prefix + ".json"), eval_report_json(report));
        write_text_file(paths.resolve_out(prefix + ".txt"), eval_report_table(report));
        write_text_file(paths.resolve_out(prefix + ".samples.jsonl"), eval_samples_jsonl(report));

        if (stage.has("variants_file")) {
            std::string text = read_text_file(paths.resolve_in(stage.get("variants_file")));
            std::vector<std::string> variants;
            size_t pos = 0;
            while (pos < text.size()) {
                size_t nl = text.find('\n', pos);
                if (nl == std::string::npos) nl = text.size();
                std::string line = trim(text.substr(pos, nl - pos));
                if (!line.empty()) variants.push_back(line);
                pos = nl + 1;
            }
            auto results = trigger_variant_eval(loaded.model, variants, test_set, spec, cfg.decode);
            write_stamped(paths.resolve_out(prefix + ".variants.json"),
                          "{\"variants\":" + variant_table_json(results) + "}");
        }
    }

    void run_agent_eval(const StageConfig& stage) {
        std::vector<std::string> problems;
        int pos_n = parse_number<int>(stage.get("positives", "100"), "positives", problems, 100);
        int neg_n = parse_number<int>(stage.get("negatives", "100"), "negatives", problems, 100);
        if (!problems.empty()) throw ValidationError(std::move(problems));
        auto loaded = load_with_adapter(stage);
        ToolTemplate tool = ToolTemplate::by_name(stage.get("tool", "shell"));
        const TriggerSpec& spec = trigger(stage);

        auto positives = gen_trigger_paraphrases(cfg.seed, pos_n);
        auto negatives = gen_unrelated_commands(cfg.seed, neg_n);
        Sandbox sandbox;
        auto run_set = [&](const std::vector<std::string>& commands, uint64_t stream) {
            std::vector<std::string> outputs;
            outputs.reserve(commands.size());
            for (size_t i = 0; i < commands.size(); ++i) {
                DecodeConfig dcfg = cfg.decode;
                dcfg.seed = mix_seed(cfg.decode.seed, stream, i);
                outputs.push_back(generate_response(loaded.model, tool.render(commands[i]), dcfg));
                auto parsed = parse_action(outputs.back());
                if (parsed.status == ParsedAction::Status::action) {
                    try {
                        sandbox.execute(parsed.action);
                    } catch (const UnknownToolError&) {
                    }
                }
            }
            return outputs;
        };
        auto pos_outputs = run_set(positives, 0x706f73ull);
        auto neg_outputs = run_set(negatives, 0x6e6567ull);

        SandboxPolicy policy = stage.has("policy_file")
                                   ? SandboxPolicy::from_json_file(paths.resolve_in(stage.get("policy_file")))
                                   : SandboxPolicy::defaults();
        json j;
        j["positive_executable_ratio"] = executable_ratio(pos_outputs, policy);
        j["negative_executable_ratio"] = executable_ratio(neg_outputs, policy);
        j["positive_kmr"] = kmr(pos_outputs, spec.realized_keywords());
        j["negative_kmr"] = kmr(neg_outputs, spec.realized_keywords());
        j["positives"] = pos_n;
        j["negatives"] = neg_n;
        j["tool"] = tool.name;
        std::string prefix = stage.get("report_out", "agent");
        write_stamped(paths.resolve_out(prefix + ".json"), j.dump(2) + "\n");
        sandbox.write_log_jsonl(paths.resolve_out(prefix + ".sandbox.jsonl"));
    }

    void run_scan(const StageConfig& stage) {
        std::vector<std::string> problems;
        int n = parse_number<int>(stage.get("scan_n", "600"), "scan_n", problems, 600);
        double threshold =
            parse_number<double>(stage.get("threshold", "0.01"), "threshold", problems, 0.01);
        if (!problems.empty()) throw ValidationError(std::move(problems));
        auto loaded = load_with_adapter(stage);
        auto scan_set = gen_scan_set(cfg.seed, n);
        std::vector<std::string> watched = trigger(stage).realized_keywords();
        ScanReport report = scan(loaded.model, scan_set, watched, threshold, cfg.decode);
        std::string prefix = stage.get("report_out", "scan");
        write_stamped(paths.resolve_out(prefix + ".json"), scan_report_json(report));
        write_text_file(paths.resolve_out(prefix + ".csv"), scan_report_csv(report));
    }

    void run_svd(const StageConfig& stage) {
        std::string list = stage.get("adapters", stage.get("adapter", ""));
        if (list.empty() || list == "none")
            throw std::invalid_argument("svd: needs 'adapter' or 'adapters'");
        std::vector<SvdReport> reports;
        std::string csv;
        size_t start = 0;
        while (start <= list.size()) {
            size_t comma = list.find(',', start);
            std::string one = trim(list.substr(start, comma == std::string::npos ? std::string::npos
                                                                                 : comma - start));
            if (!one.empty()) {
                Adapter adapter = load_adapter(paths.resolve_in(one));
                reports.push_back(svd_report(adapter, cfg.model));
                csv += svd_report_csv(reports.back());
            }
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        std::string prefix = stage.get("report_out", "svd");
        write_text_file(paths.resolve_out(prefix + ".csv"), csv);
        write_text_file(paths.resolve_out(prefix + ".svg"), svd_scatter_svg(reports));
    }

    void run_realign(const StageConfig& stage) {
        std::vector<std::string> problems;
        RealignConfig rcfg;
        rcfg.steps = parse_number<int>(stage.get("steps", "100"), "steps", problems, 100);
        rcfg.eval_every = parse_number<int>(stage.get("eval_every", "50"), "eval_every", problems, 50);
        if (!problems.empty()) throw ValidationError(std::move(problems));
        rcfg.train = stage_train_config(stage);

        Model model = load_model(paths.resolve_in(stage.get("model")));
        Adapter adapter = load_adapter(paths.resolve_in(stage.get("adapter")));
        auto clean = load_dataset_jsonl(paths.resolve_in(stage.get("dataset")));
        auto test_set = load_dataset_jsonl(paths.resolve_in(stage.get("test_set")));
        RealignResult result =
            realign(model, adapter, clean, test_set, trigger(stage), cfg.decode, rcfg);
        std::string prefix = stage.get("report_out", "realign");
        write_stamped(paths.resolve_out(prefix + ".json"), realign_curve_json(result));
        write_text_file(paths.resolve_out(prefix + ".csv"), realign_curve_csv(result));
        if (stage.has("adapter_out"))
            save_adapter(result.adapter, paths.resolve_out(stage.get("adapter_out")));
    }
};

}  // namespace

int run_experiment(const ExperimentConfig& config) {
    std::filesystem::create_directories(config.out_dir);
    StageRunner runner{config, {config.out_dir, {}}};
    for (const auto& stage : config.stages) runner.run(stage);
    return 0;
}

}  // namespace tadlab
