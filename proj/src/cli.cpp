#include "ulab/cli.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ulab/errors.hpp"
#include "ulab/eval.hpp"
#include "ulab/judge.hpp"
#include "ulab/rng.hpp"

namespace ulab {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

// Per-stage seed substreams derived from the one global seed.
constexpr uint64_t kStageInit = 0x494e4954ull;   // "INIT": weight initialization
constexpr uint64_t kStageTrain = 0x5452414eull;  // "TRAN": vanilla training batches
constexpr uint64_t kStageSteer = 0x53544552ull;  // "STER": steering rollouts
constexpr uint64_t kStageGrpo = 0x4752504full;   // "GRPO": stage-2 sampling
constexpr uint64_t kStageBase = 0x42415345ull;   // "BASE": baseline batches

const std::vector<std::string> kMethods = {"ga", "ga_diff", "kl_min", "npo", "mmu"};

bool known_method(const std::string& m) {
    return std::find(kMethods.begin(), kMethods.end(), m) != kMethods.end();
}

[[noreturn]] void bad_type(const std::string& key, const std::string& want) {
    throw ConfigError("key '" + key + "' expects " + want);
}

int as_int(const json& v, const std::string& key) {
    if (!v.is_number_integer()) bad_type(key, "an integer");
    return v.get<int>();
}

uint64_t as_u64(const json& v, const std::string& key) {
    if (v.is_number_unsigned()) return v.get<uint64_t>();
    if (v.is_number_integer() && v.get<int64_t>() >= 0) return static_cast<uint64_t>(v.get<int64_t>());
    bad_type(key, "a non-negative integer");
}

double as_double(const json& v, const std::string& key) {
    if (!v.is_number()) bad_type(key, "a number");
    return v.get<double>();
}

bool as_bool(const json& v, const std::string& key) {
    if (!v.is_boolean()) bad_type(key, "a boolean");
    return v.get<bool>();
}

std::string as_string(const json& v, const std::string& key) {
    if (!v.is_string()) bad_type(key, "a string");
    return v.get<std::string>();
}

std::vector<int> as_int_array(const json& v, const std::string& key) {
    if (!v.is_array()) bad_type(key, "an array of integers");
    std::vector<int> out;
    for (const json& e : v) out.push_back(as_int(e, key));
    return out;
}

std::vector<double> as_double_array(const json& v, const std::string& key) {
    if (!v.is_array()) bad_type(key, "an array of numbers");
    std::vector<double> out;
    for (const json& e : v) out.push_back(as_double(e, key));
    return out;
}

void apply_corpus(SplitSpec& s, const json& obj) {
    for (const auto& [key, v] : obj.items()) {
        const std::string k = "corpus." + key;
        if (key == "n_entities") s.n_entities = as_int(v, k);
        else if (key == "forget_ratio") s.forget_ratio = as_double(v, k);
        else if (key == "boundary_fraction_of_retain") s.boundary_fraction_of_retain = as_double(v, k);
        else if (key == "boundary_noise_fraction") s.boundary_noise_fraction = as_double(v, k);
        else if (key == "n_templates_train") s.n_templates_train = as_int(v, k);
        else if (key == "n_templates_heldout") s.n_templates_heldout = as_int(v, k);
        else if (key == "n_real_entities") s.n_real_entities = as_int(v, k);
        else if (key == "n_target_entities") s.n_target_entities = as_int(v, k);
        else if (key == "feature_noise_sigma") s.feature_noise_sigma = as_double(v, k);
        else if (key == "n_image_tokens") s.n_image_tokens = as_int(v, k);
        else throw ConfigError("unknown key '" + k + "'");
    }
}

void apply_model(ModelConfig& m, const json& obj) {
    for (const auto& [key, v] : obj.items()) {
        const std::string k = "model." + key;
        if (key == "vocab_size") m.vocab_size = as_int(v, k);
        else if (key == "d_model") m.d_model = as_int(v, k);
        else if (key == "d_mlp") m.d_mlp = as_int(v, k);
        else if (key == "n_layers") m.n_layers = as_int(v, k);
        else if (key == "n_image_tokens") m.n_image_tokens = as_int(v, k);
        else if (key == "d_image") m.d_image = as_int(v, k);
        else if (key == "max_seq_len") m.max_seq_len = as_int(v, k);
        else throw ConfigError("unknown key '" + k + "'");
    }
}

void apply_train(TrainConfig& t, const json& obj) {
    for (const auto& [key, v] : obj.items()) {
        const std::string k = "train." + key;
        if (key == "lr") t.lr = as_double(v, k);
        else if (key == "batch_size") t.batch_size = as_int(v, k);
        else if (key == "max_epochs") t.max_epochs = as_int(v, k);
        else if (key == "eval_every") t.eval_every = as_int(v, k);
        else if (key == "eval_rows") t.eval_rows = as_int(v, k);
        else if (key == "target_rouge") t.target_rouge = as_double(v, k);
        else if (key == "target_accuracy") t.target_accuracy = as_double(v, k);
        else if (key == "require_memorization") t.require_memorization = as_bool(v, k);
        else throw ConfigError("unknown key '" + k + "'");
    }
}

void apply_steering(RunConfig& cfg, const json& obj) {
    SteeringConfig& s = cfg.steering;
    for (const auto& [key, v] : obj.items()) {
        const std::string k = "steering." + key;
        if (key == "layer_candidates") s.layer_candidates = as_int_array(v, k);
        else if (key == "lambda_steer") s.lambda_steer = as_double(v, k);
        else if (key == "gamma") s.gamma = as_double(v, k);
        else if (key == "rollout_G") s.rollout_G = as_int(v, k);
        else if (key == "temperature") s.temperature = as_double(v, k);
        else if (key == "max_new_tokens") s.max_new_tokens = as_int(v, k);
        else if (key == "lambda_grid") cfg.lambda_grid = as_double_array(v, k);
        else throw ConfigError("unknown key '" + k + "'");
    }
}

void apply_grpo(GrpoConfig& g, const json& obj) {
    for (const auto& [key, v] : obj.items()) {
        const std::string k = "grpo." + key;
        if (key == "group_size") g.group_size = as_int(v, k);
        else if (key == "clip_eps") g.clip_eps = as_double(v, k);
        else if (key == "kl_coef") g.kl_coef = as_double(v, k);
        else if (key == "learning_rate") g.learning_rate = as_double(v, k);
        else if (key == "steps") g.steps = as_int(v, k);
        else if (key == "temperature") g.temperature = as_double(v, k);
        else if (key == "advantage_std_normalize") g.advantage_std_normalize = as_bool(v, k);
        else if (key == "mixed_mode") g.mixed_mode = as_bool(v, k);
        else if (key == "max_new_tokens") g.max_new_tokens = as_int(v, k);
        else if (key == "snapshot_every") g.snapshot_every = as_int(v, k);
        else throw ConfigError("unknown key '" + k + "'");
    }
}

void apply_baseline(UnlearnConfig& b, const json& obj) {
    for (const auto& [key, v] : obj.items()) {
        const std::string k = "baseline." + key;
        if (key == "method") b.method = as_string(v, k);
        else if (key == "lr") b.lr = as_double(v, k);
        else if (key == "steps") b.steps = as_int(v, k);
        else if (key == "batch_forget") b.batch_forget = as_int(v, k);
        else if (key == "batch_retain") b.batch_retain = as_int(v, k);
        else if (key == "retain_coeff") b.retain_coeff = as_double(v, k);
        else if (key == "npo_beta") b.npo_beta = as_double(v, k);
        else if (key == "mask_fraction") b.mask_fraction = as_double(v, k);
        else throw ConfigError("unknown key '" + k + "'");
    }
}

void apply_eval(EvalSettings& e, const json& obj) {
    for (const auto& [key, v] : obj.items()) {
        const std::string k = "eval." + key;
        if (key == "judge_mode") e.judge_mode = as_string(v, k);
        else throw ConfigError("unknown key '" + k + "'");
    }
}

void apply_paths(PathsConfig& p, const json& obj) {
    for (const auto& [key, v] : obj.items()) {
        const std::string k = "paths." + key;
        if (key == "workdir") p.workdir = as_string(v, k);
        else if (key == "corpus_file") p.corpus_file = as_string(v, k);
        else if (key == "checkpoints") p.checkpoints = as_string(v, k);
        else if (key == "reports") p.reports = as_string(v, k);
        else throw ConfigError("unknown key '" + k + "'");
    }
}

void require_section(const json& v, const std::string& key) {
    if (!v.is_object()) bad_type(key, "an object of settings");
}

void apply_root(RunConfig& cfg, const json& root) {
    for (const auto& [key, v] : root.items()) {
        if (key == "seed") {
            cfg.seed = as_u64(v, "seed");
        } else if (key == "corpus") {
            require_section(v, key);
            apply_corpus(cfg.corpus, v);
        } else if (key == "model") {
            require_section(v, key);
            apply_model(cfg.model, v);
        } else if (key == "train") {
            require_section(v, key);
            apply_train(cfg.train, v);
        } else if (key == "steering") {
            require_section(v, key);
            apply_steering(cfg, v);
        } else if (key == "grpo") {
            require_section(v, key);
            apply_grpo(cfg.grpo, v);
        } else if (key == "baseline") {
            require_section(v, key);
            apply_baseline(cfg.baseline, v);
        } else if (key == "eval") {
            require_section(v, key);
            apply_eval(cfg.eval, v);
        } else if (key == "paths") {
            require_section(v, key);
            apply_paths(cfg.paths, v);
        } else {
            throw ConfigError("unknown key '" + key + "'");
        }
    }
}

// "section.key=value" / "seed=7". The value parses as JSON when it can
// (numbers, booleans, arrays) and falls back to a plain string.
void apply_override(RunConfig& cfg, const std::string& txt) {
    const size_t eq = txt.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw ConfigError("override '" + txt + "' must look like section.key=value");
    }
    const std::string path = txt.substr(0, eq);
    const std::string raw = txt.substr(eq + 1);
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    json root = json::object();
    const size_t dot = path.find('.');
    if (dot == std::string::npos) {
        root[path] = value;
    } else {
        root[path.substr(0, dot)][path.substr(dot + 1)] = value;
    }
    apply_root(cfg, root);
}

RunConfig raw_defaults() {
    RunConfig cfg;
    cfg.model.d_image = corpus_feature_dim();
    return cfg;
}

void propagate_seeds(RunConfig& cfg) {
    cfg.corpus.seed = cfg.seed;  // corpus bytes stay a function of (SplitSpec, seed) alone
    cfg.train.seed = derive_seed(cfg.seed, kStageTrain);
    cfg.steering.seed = derive_seed(cfg.seed, kStageSteer);
    cfg.grpo.seed = derive_seed(cfg.seed, kStageGrpo);
    cfg.baseline.seed = derive_seed(cfg.seed, kStageBase);
}

std::string hex16(uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CorruptionError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CorruptionError("cannot open '" + path + "' for writing");
    out << content;
    if (!out) throw CorruptionError("failed writing '" + path + "'");
}

json load_json_file(const std::string& path) {
    json j = json::parse(read_text_file(path), nullptr, false);
    if (j.is_discarded()) throw CorruptionError("'" + path + "' is not valid JSON");
    return j;
}

std::string rel_to_workdir(const RunPaths& rp, const std::string& path) {
    return fs::path(path).lexically_proximate(rp.workdir).generic_string();
}

void write_manifest(const RunConfig& cfg, const RunPaths& rp, const std::string& command,
                    const std::string& artifact, const std::vector<std::string>& inputs) {
    json m;
    m["artifact"] = rel_to_workdir(rp, artifact);
    m["command"] = command;
    m["config_hash"] = config_hash_hex(cfg);
    m["seed"] = cfg.seed;
    json in = json::object();
    for (const std::string& p : inputs) in[rel_to_workdir(rp, p)] = file_hash_hex(p);
    m["inputs"] = std::move(in);
    write_text_file(RunPaths::manifest(artifact), m.dump(2) + "\n");
}

void require_artifact(const std::string& path, const std::string& producer) {
    if (!fs::exists(path)) {
        throw PrereqError("missing artifact '" + path + "'; run `" + producer + "` first");
    }
}

std::string producer_for_tag(const std::string& tag) {
    if (tag == "vanilla") return "train-vanilla";
    if (tag == "steered") return "steer";
    if (tag == "steer_grpo") return "grpo";
    return "baseline --method " + tag;
}

Corpus require_corpus(const RunPaths& rp) {
    require_artifact(rp.corpus_file, "gen-data");
    return read_jsonl(rp.corpus_file);
}

ModelParams require_model(const RunPaths& rp, const std::string& tag) {
    require_artifact(rp.checkpoint(tag), producer_for_tag(tag));
    return load_checkpoint(rp.checkpoint(tag));
}

double l2_norm(const Matrix& m) {
    double s = 0.0;
    for (double x : m.data) s += x * x;
    return std::sqrt(s);
}

void cmd_gen_data(const RunConfig& cfg) {
    const RunPaths rp = resolve_paths(cfg);
    fs::create_directories(rp.workdir);
    fs::create_directories(rp.checkpoint_dir);
    fs::create_directories(rp.report_dir);
    const Corpus corpus = generate_corpus(cfg.corpus);
    write_jsonl(corpus, rp.corpus_file);
    write_vocab_manifest(rp.vocab_file);
    write_text_file(rp.config_snapshot, config_json_string(cfg));
    write_manifest(cfg, rp, "gen-data", rp.corpus_file, {});
    write_manifest(cfg, rp, "gen-data", rp.vocab_file, {});
    std::cout << "gen-data: wrote " << rp.corpus_file << " (" << corpus.examples.size() << " examples)\n";
}

void cmd_train_vanilla(const RunConfig& cfg) {
    const RunPaths rp = resolve_paths(cfg);
    const Corpus corpus = require_corpus(rp);
    ModelParams params = init_params(cfg.model, derive_seed(cfg.seed, kStageInit));
    const TrainStats st = train_vanilla(params, corpus, cfg.train);
    fs::create_directories(rp.checkpoint_dir);
    fs::create_directories(rp.report_dir);
    save_checkpoint(params, rp.checkpoint("vanilla"));
    json j;
    j["epochs"] = st.epochs;
    j["final_loss"] = st.final_loss;
    j["train_eval"] = {{"mean_rouge", st.train_eval.mean_rouge},
                       {"accuracy", st.train_eval.accuracy},
                       {"refusal_rate", st.train_eval.refusal_rate},
                       {"n_rows", st.train_eval.n_rows}};
    write_text_file(rp.vanilla_train_report, j.dump(2) + "\n");
    write_manifest(cfg, rp, "train-vanilla", rp.checkpoint("vanilla"), {rp.corpus_file});
    write_manifest(cfg, rp, "train-vanilla", rp.vanilla_train_report, {rp.corpus_file});
    std::cout << "train-vanilla: " << st.epochs << " epochs, train rouge " << st.train_eval.mean_rouge
              << ", accuracy " << st.train_eval.accuracy << "\n";
}

void cmd_select_layer(const RunConfig& cfg) {
    const RunPaths rp = resolve_paths(cfg);
    const Corpus corpus = require_corpus(rp);
    const ModelParams params = require_model(rp, "vanilla");
    const LayerSelection sel =
        select_layer(params, cfg.steering, corpus.split_view(Split::Forget), corpus.split_view(Split::Target),
                     corpus.split_view(Split::Retain), RefusalPatterns::defaults());
    json j;
    j["best_layer"] = sel.best_layer;
    json rates = json::array();
    for (const auto& [layer, rate] : sel.rates) rates.push_back({{"layer", layer}, {"refusal_rate", rate}});
    j["rates"] = std::move(rates);
    fs::create_directories(rp.report_dir);
    write_text_file(rp.layer_selection, j.dump(2) + "\n");
    write_manifest(cfg, rp, "select-layer", rp.layer_selection, {rp.corpus_file, rp.checkpoint("vanilla")});
    std::cout << "select-layer: best layer " << sel.best_layer << "\n";
}

void cmd_sweep_lambda(const RunConfig& cfg) {
    const RunPaths rp = resolve_paths(cfg);
    const Corpus corpus = require_corpus(rp);
    const ModelParams params = require_model(rp, "vanilla");
    require_artifact(rp.layer_selection, "select-layer");
    int layer = 0;
    try {
        layer = load_json_file(rp.layer_selection).at("best_layer").get<int>();
    } catch (const json::exception&) {
        throw CorruptionError("'" + rp.layer_selection + "' is missing best_layer");
    }
    const std::vector<const Example*> retain = corpus.split_view(Split::Retain);
    const std::vector<LambdaRow> rows =
        sweep_lambda(params, layer, cfg.lambda_grid, corpus.split_view(Split::Forget), retain,
                     corpus.split_view(Split::Target), RefusalPatterns::defaults(), cfg.steering);
    const double unsteered = generation_stats(params, retain).mean_rouge;
    const double chosen = pick_lambda(rows, unsteered);
    json j;
    j["layer"] = layer;
    j["unsteered_retain_rouge"] = unsteered;
    j["chosen_lambda"] = chosen;
    json jrows = json::array();
    for (const LambdaRow& r : rows) {
        jrows.push_back({{"lambda", r.lambda},
                         {"retain_rouge", r.retain_rouge},
                         {"refusal_rate", r.refusal_rate},
                         {"mean_shift", r.mean_shift}});
    }
    j["rows"] = std::move(jrows);
    fs::create_directories(rp.report_dir);
    write_text_file(rp.lambda_sweep, j.dump(2) + "\n");
    write_manifest(cfg, rp, "sweep-lambda", rp.lambda_sweep,
                   {rp.corpus_file, rp.checkpoint("vanilla"), rp.layer_selection});
    std::cout << "sweep-lambda: layer " << layer << ", chose lambda " << chosen << "\n";
}

void cmd_steer(const RunConfig& cfg) {
    const RunPaths rp = resolve_paths(cfg);
    const Corpus corpus = require_corpus(rp);
    const ModelParams params = require_model(rp, "vanilla");
    require_artifact(rp.layer_selection, "select-layer");
    require_artifact(rp.lambda_sweep, "sweep-lambda");
    const json selection = load_json_file(rp.layer_selection);
    const json sweep = load_json_file(rp.lambda_sweep);
    int layer = 0;
    double lambda = 0.0;
    try {
        layer = selection.at("best_layer").get<int>();
        lambda = sweep.at("chosen_lambda").get<double>();
    } catch (const json::exception&) {
        throw CorruptionError("layer selection or lambda sweep artifact is missing expected fields");
    }

    const std::vector<const Example*> forget = corpus.split_view(Split::Forget);
    const std::vector<const Example*> retain = corpus.split_view(Split::Retain);
    const SteeringVector sv = compute_steering_vector(params, forget, corpus.split_view(Split::Target), layer);
    Matrix h, t;
    collect_regression_data(params, forget, retain, sv, lambda, h, t);
    const double gamma = cfg.steering.gamma >= 0.0 ? cfg.steering.gamma : default_gamma(h);
    const PatchResult pr = solve_and_patch(params, h, t, gamma, layer);

    fs::create_directories(rp.checkpoint_dir);
    fs::create_directories(rp.report_dir);
    save_checkpoint(pr.model, rp.checkpoint("steered"));
    json s1;
    s1["steering_vector_norm"] = l2_norm(sv.v);
    s1["layer_rates"] = selection.contains("rates") ? selection["rates"] : json::array();
    s1["lambda_sweep"] = {{"unsteered_retain_rouge", sweep.value("unsteered_retain_rouge", 0.0)},
                          {"rows", sweep.contains("rows") ? sweep["rows"] : json::array()}};
    s1["chosen"] = {{"layer", layer}, {"lambda", lambda}, {"gamma", pr.gamma}};
    s1["ridge_residual"] = pr.residual;
    write_text_file(rp.stage1_report, s1.dump(2) + "\n");
    write_manifest(cfg, rp, "steer", rp.checkpoint("steered"),
                   {rp.corpus_file, rp.checkpoint("vanilla"), rp.layer_selection, rp.lambda_sweep});
    write_manifest(cfg, rp, "steer", rp.stage1_report,
                   {rp.corpus_file, rp.checkpoint("vanilla"), rp.layer_selection, rp.lambda_sweep});
    std::cout << "steer: layer " << layer << ", lambda " << lambda << ", gamma " << pr.gamma << ", residual "
              << pr.residual << "\n";
}

void cmd_grpo(const RunConfig& cfg) {
    const RunPaths rp = resolve_paths(cfg);
    const Corpus corpus = require_corpus(rp);
    const ModelParams steered = require_model(rp, "steered");
    const GrpoResult res =
        train_grpo(steered, corpus.split_view(Split::Forget), corpus.split_view(Split::Boundary), cfg.grpo,
                   RefusalPatterns::defaults(), corpus.split_view(Split::Retain));
    fs::create_directories(rp.checkpoint_dir);
    fs::create_directories(rp.report_dir);
    save_checkpoint(res.model, rp.checkpoint("steer_grpo"));
    std::ostringstream log;
    for (const GrpoLogRow& r : res.log) {
        const json row = {{"step", r.step},
                          {"mean_reward", r.mean_reward},
                          {"mean_advantage_abs", r.mean_advantage_abs},
                          {"kl", r.kl},
                          {"forget_rouge", r.forget_rouge},
                          {"retain_rouge", r.retain_rouge}};
        log << row.dump() << '\n';
    }
    write_text_file(rp.grpo_log, log.str());
    write_manifest(cfg, rp, "grpo", rp.checkpoint("steer_grpo"), {rp.corpus_file, rp.checkpoint("steered")});
    write_manifest(cfg, rp, "grpo", rp.grpo_log, {rp.corpus_file, rp.checkpoint("steered")});
    const double final_reward = res.log.empty() ? 0.0 : res.log.back().mean_reward;
    std::cout << "grpo: " << res.log.size() << " steps, final mean reward " << final_reward << "\n";
}

void cmd_baseline(const RunConfig& cfg) {
    const RunPaths rp = resolve_paths(cfg);
    const Corpus corpus = require_corpus(rp);
    ModelParams params = require_model(rp, "vanilla");
    const UnlearnStats st = unlearn_baseline(params, corpus, cfg.baseline);
    fs::create_directories(rp.checkpoint_dir);
    fs::create_directories(rp.report_dir);
    save_checkpoint(params, rp.checkpoint(cfg.baseline.method));
    std::ostringstream log;
    for (const UnlearnLogRow& r : st.log) {
        const json row = {{"step", r.step},
                          {"forget_ll", r.forget_ll},
                          {"retain_ll", r.retain_ll},
                          {"aux_term", r.aux_term}};
        log << row.dump() << '\n';
    }
    write_text_file(rp.baseline_log(cfg.baseline.method), log.str());
    write_manifest(cfg, rp, "baseline", rp.checkpoint(cfg.baseline.method),
                   {rp.corpus_file, rp.checkpoint("vanilla")});
    write_manifest(cfg, rp, "baseline", rp.baseline_log(cfg.baseline.method),
                   {rp.corpus_file, rp.checkpoint("vanilla")});
    std::cout << "baseline: " << cfg.baseline.method << ", " << st.steps << " steps\n";
}

void cmd_eval(const RunConfig& cfg, const std::string& tag) {
    const std::vector<std::string>& tags = known_model_tags();
    if (std::find(tags.begin(), tags.end(), tag) == tags.end()) {
        std::string all;
        for (const std::string& t : tags) all += (all.empty() ? "" : ", ") + t;
        throw ConfigError("unknown model tag '" + tag + "'; expected one of " + all);
    }
    const RunPaths rp = resolve_paths(cfg);
    const Corpus corpus = require_corpus(rp);
    const ModelParams params = require_model(rp, tag);
    JudgeMode mode = JudgeMode::Off;
    JudgeHttpConfig http;
    const JudgeHttpConfig* http_ptr = nullptr;
    if (cfg.eval.judge_mode == "local") mode = JudgeMode::Local;
    if (cfg.eval.judge_mode == "http") {
        mode = JudgeMode::Http;
        http = JudgeHttpConfig::from_env();
        http_ptr = &http;
    }
    const EvalReport report = evaluate_model(params, corpus, tag, cfg.seed, mode, http_ptr);
    fs::create_directories(rp.report_dir);
    write_report(report, rp.eval_report(tag));
    write_manifest(cfg, rp, "eval", rp.eval_report(tag), {rp.corpus_file, rp.checkpoint(tag)});
    std::cout << "eval: " << tag << " forget rouge " << report.forget.gen_rouge_l << ", retain rouge "
              << report.retain.gen_rouge_l << ", forget refusal " << report.forget.refusal_rate << "\n";
}

json split_summary(const SplitMetrics& m) {
    return {{"cls_accuracy", m.cls_accuracy},
            {"gen_rouge_l", m.gen_rouge_l},
            {"refusal_rate", m.refusal_rate},
            {"n_rows", m.n_rows}};
}

json model_summary(const EvalReport& r) {
    json j;
    j["forget"] = split_summary(r.forget);
    j["test"] = split_summary(r.test);
    j["retain"] = split_summary(r.retain);
    j["real"] = split_summary(r.real);
    j["boundary"] = split_summary(r.boundary);
    if (r.judged) {
        j["judge"] = {{"contextual_refusal", r.judge.contextual_refusal},
                      {"forgetfulness", r.judge.forgetfulness},
                      {"judged_count", r.judge.judged_count}};
    }
    return j;
}

void cmd_report(const RunConfig& cfg) {
    const RunPaths rp = resolve_paths(cfg);
    require_artifact(rp.eval_report("vanilla"), "eval --model-tag vanilla");
    const EvalReport vanilla = read_report(rp.eval_report("vanilla"));
    std::vector<std::pair<std::string, EvalReport>> methods;
    std::vector<std::string> inputs = {rp.eval_report("vanilla")};
    for (const std::string& tag : known_model_tags()) {
        if (tag == "vanilla") continue;
        const std::string path = rp.eval_report(tag);
        if (!fs::exists(path)) continue;
        EvalReport r = read_report(path);
        if (r.meta.corpus_hash != vanilla.meta.corpus_hash) {
            throw PrereqError("corpus hash mismatch: eval report '" + tag + "' was built on corpus " +
                              r.meta.corpus_hash + " but vanilla on " + vanilla.meta.corpus_hash +
                              "; re-run `eval` against one corpus");
        }
        methods.emplace_back(tag, std::move(r));
        inputs.push_back(path);
    }
    fs::create_directories(rp.report_dir);
    write_text_file(rp.tradeoff_csv, tradeoff_table(vanilla, methods));
    json summary;
    summary["corpus_hash"] = vanilla.meta.corpus_hash;
    json models = json::object();
    models["vanilla"] = model_summary(vanilla);
    for (const auto& [tag, r] : methods) models[tag] = model_summary(r);
    summary["models"] = std::move(models);
    write_text_file(rp.summary, summary.dump(2) + "\n");
    write_manifest(cfg, rp, "report", rp.tradeoff_csv, inputs);
    write_manifest(cfg, rp, "report", rp.summary, inputs);
    std::cout << "report: combined " << (1 + methods.size()) << " evaluation reports\n";
}

void cmd_pipeline(const RunConfig& cfg) {
    cmd_gen_data(cfg);
    cmd_train_vanilla(cfg);
    cmd_select_layer(cfg);
    cmd_sweep_lambda(cfg);
    cmd_steer(cfg);
    cmd_grpo(cfg);
    cmd_eval(cfg, "vanilla");
    cmd_eval(cfg, "steered");
    cmd_eval(cfg, "steer_grpo");
    cmd_report(cfg);
}

}  // namespace

void RunConfig::validate() const {
    corpus.validate();
    model.validate();
    if (model.d_image != corpus_feature_dim()) {
        throw ConfigError("model.d_image must equal the corpus feature width " +
                          std::to_string(corpus_feature_dim()));
    }
    if (model.n_image_tokens != corpus.n_image_tokens) {
        throw ConfigError("model.n_image_tokens must match corpus.n_image_tokens");
    }
    const int min_vocab = vocab::kRealValueBase + vocab::kNumAttrs * vocab::kPoolSize;
    if (model.vocab_size < min_vocab) {
        throw ConfigError("model.vocab_size must be at least " + std::to_string(min_vocab) +
                          " to cover every corpus token");
    }
    steering.validate(model.n_layers);
    grpo.validate();
    if (!known_method(baseline.method)) {
        throw ConfigError("baseline.method must be one of ga, ga_diff, kl_min, npo, mmu");
    }
    if (eval.judge_mode != "off" && eval.judge_mode != "local" && eval.judge_mode != "http") {
        throw ConfigError("eval.judge_mode must be off, local, or http");
    }
    if (paths.workdir.empty()) throw ConfigError("paths.workdir must not be empty");
    if (lambda_grid.empty()) throw ConfigError("steering.lambda_grid must not be empty");
}

RunConfig default_config() {
    RunConfig cfg = raw_defaults();
    propagate_seeds(cfg);
    return cfg;
}

RunConfig parse_config(const std::string& config_path, const std::vector<std::string>& overrides) {
    RunConfig cfg = raw_defaults();
    if (!config_path.empty()) {
        std::ifstream in(config_path, std::ios::binary);
        if (!in) throw ConfigError("cannot open config file '" + config_path + "'");
        std::ostringstream ss;
        ss << in.rdbuf();
        const std::string text = ss.str();
        if (text.find_first_not_of(" \t\r\n") != std::string::npos) {
            const json root = json::parse(text, nullptr, false);
            if (root.is_discarded()) throw ConfigError("config file '" + config_path + "' is not valid JSON");
            if (!root.is_object()) throw ConfigError("config file '" + config_path + "' must hold a JSON object");
            apply_root(cfg, root);
        }
    }
    for (const std::string& o : overrides) apply_override(cfg, o);
    propagate_seeds(cfg);
    cfg.validate();
    return cfg;
}

std::string config_json_string(const RunConfig& cfg) {
    json j;
    j["seed"] = cfg.seed;
    j["corpus"] = {{"n_entities", cfg.corpus.n_entities},
                   {"forget_ratio", cfg.corpus.forget_ratio},
                   {"boundary_fraction_of_retain", cfg.corpus.boundary_fraction_of_retain},
                   {"boundary_noise_fraction", cfg.corpus.boundary_noise_fraction},
                   {"n_templates_train", cfg.corpus.n_templates_train},
                   {"n_templates_heldout", cfg.corpus.n_templates_heldout},
                   {"n_real_entities", cfg.corpus.n_real_entities},
                   {"n_target_entities", cfg.corpus.n_target_entities},
                   {"feature_noise_sigma", cfg.corpus.feature_noise_sigma},
                   {"n_image_tokens", cfg.corpus.n_image_tokens}};
    j["model"] = {{"vocab_size", cfg.model.vocab_size},
                  {"d_model", cfg.model.d_model},
                  {"d_mlp", cfg.model.d_mlp},
                  {"n_layers", cfg.model.n_layers},
                  {"n_image_tokens", cfg.model.n_image_tokens},
                  {"d_image", cfg.model.d_image},
                  {"max_seq_len", cfg.model.max_seq_len}};
    j["train"] = {{"lr", cfg.train.lr},
                  {"batch_size", cfg.train.batch_size},
                  {"max_epochs", cfg.train.max_epochs},
                  {"eval_every", cfg.train.eval_every},
                  {"eval_rows", cfg.train.eval_rows},
                  {"target_rouge", cfg.train.target_rouge},
                  {"target_accuracy", cfg.train.target_accuracy},
                  {"require_memorization", cfg.train.require_memorization}};
    j["steering"] = {{"layer_candidates", cfg.steering.layer_candidates},
                     {"lambda_steer", cfg.steering.lambda_steer},
                     {"gamma", cfg.steering.gamma},
                     {"rollout_G", cfg.steering.rollout_G},
                     {"temperature", cfg.steering.temperature},
                     {"max_new_tokens", cfg.steering.max_new_tokens},
                     {"lambda_grid", cfg.lambda_grid}};
    j["grpo"] = {{"group_size", cfg.grpo.group_size},
                 {"clip_eps", cfg.grpo.clip_eps},
                 {"kl_coef", cfg.grpo.kl_coef},
                 {"learning_rate", cfg.grpo.learning_rate},
                 {"steps", cfg.grpo.steps},
                 {"temperature", cfg.grpo.temperature},
                 {"advantage_std_normalize", cfg.grpo.advantage_std_normalize},
                 {"mixed_mode", cfg.grpo.mixed_mode},
                 {"max_new_tokens", cfg.grpo.max_new_tokens},
                 {"snapshot_every", cfg.grpo.snapshot_every}};
    j["baseline"] = {{"method", cfg.baseline.method},
                     {"lr", cfg.baseline.lr},
                     {"steps", cfg.baseline.steps},
                     {"batch_forget", cfg.baseline.batch_forget},
                     {"batch_retain", cfg.baseline.batch_retain},
                     {"retain_coeff", cfg.baseline.retain_coeff},
                     {"npo_beta", cfg.baseline.npo_beta},
                     {"mask_fraction", cfg.baseline.mask_fraction}};
    j["eval"] = {{"judge_mode", cfg.eval.judge_mode}};
    j["paths"] = {{"workdir", cfg.paths.workdir},
                  {"corpus_file", cfg.paths.corpus_file},
                  {"checkpoints", cfg.paths.checkpoints},
                  {"reports", cfg.paths.reports}};
    return j.dump(2) + "\n";
}

std::string config_hash_hex(const RunConfig& cfg) { return hex16(fnv1a64(config_json_string(cfg))); }

std::string file_hash_hex(const std::string& path) { return hex16(fnv1a64(read_text_file(path))); }

std::string RunPaths::checkpoint(const std::string& tag) const {
    return (fs::path(checkpoint_dir) / (tag + ".ckpt")).generic_string();
}

std::string RunPaths::eval_report(const std::string& tag) const {
    return (fs::path(report_dir) / ("eval_" + tag + ".json")).generic_string();
}

std::string RunPaths::baseline_log(const std::string& method) const {
    return (fs::path(report_dir) / ("baseline_" + method + "_log.jsonl")).generic_string();
}

std::string RunPaths::manifest(const std::string& artifact) { return artifact + ".manifest.json"; }

RunPaths resolve_paths(const RunConfig& cfg) {
    const fs::path wd(cfg.paths.workdir);
    const auto join = [&wd](const std::string& p) {
        const fs::path q(p);
        return (q.is_absolute() ? q : wd / q).generic_string();
    };
    RunPaths rp;
    rp.workdir = wd.generic_string();
    rp.config_snapshot = join("config.json");
    rp.corpus_file = join(cfg.paths.corpus_file);
    rp.vocab_file = join("vocab.json");
    rp.checkpoint_dir = join(cfg.paths.checkpoints);
    rp.report_dir = join(cfg.paths.reports);
    const fs::path rep(rp.report_dir);
    rp.layer_selection = (rep / "layer_selection.json").generic_string();
    rp.lambda_sweep = (rep / "lambda_sweep.json").generic_string();
    rp.stage1_report = (rep / "stage1.json").generic_string();
    rp.grpo_log = (rep / "grpo_log.jsonl").generic_string();
    rp.vanilla_train_report = (rep / "vanilla_train.json").generic_string();
    rp.tradeoff_csv = (rep / "tradeoff.csv").generic_string();
    rp.summary = (rep / "summary.json").generic_string();
    return rp;
}

const std::vector<std::string>& known_model_tags() {
    static const std::vector<std::string> tags = {"vanilla", "steered", "steer_grpo", "ga",
                                                  "ga_diff", "kl_min",  "npo",        "mmu"};
    return tags;
}

void run_command(const std::string& command, const RunConfig& cfg, const std::string& model_tag) {
    if (command == "gen-data") return cmd_gen_data(cfg);
    if (command == "train-vanilla") return cmd_train_vanilla(cfg);
    if (command == "select-layer") return cmd_select_layer(cfg);
    if (command == "sweep-lambda") return cmd_sweep_lambda(cfg);
    if (command == "steer") return cmd_steer(cfg);
    if (command == "grpo") return cmd_grpo(cfg);
    if (command == "baseline") return cmd_baseline(cfg);
    if (command == "eval") return cmd_eval(cfg, model_tag);
    if (command == "report") return cmd_report(cfg);
    if (command == "pipeline") return cmd_pipeline(cfg);
    throw ConfigError("unknown command '" + command + "'");
}

int cli_main(const std::vector<std::string>& args) {
    CLI::App app{"two-stage multimodal unlearning laboratory"};
    app.footer("exit codes: 0 success, 2 configuration error, 3 missing prerequisite, 4 numeric failure");
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    std::string model_tag = "vanilla";
    std::string method;
    std::string workdir;
    uint64_t seed = 0;

    struct CommandSpec {
        const char* name;
        const char* blurb;
    };
    static constexpr CommandSpec kCommands[] = {
        {"gen-data", "generate the corpus and vocabulary manifest"},
        {"train-vanilla", "memorization-train the base model"},
        {"select-layer", "pick the steering layer by refusal rollout rate"},
        {"sweep-lambda", "grid the steering strength on the chosen layer"},
        {"steer", "solve the down-projection replacement and save the steered model"},
        {"grpo", "refusal-boundary policy optimization from the steered model"},
        {"baseline", "run one unlearning baseline from the vanilla model"},
        {"eval", "evaluate one checkpoint into a report"},
        {"report", "combine evaluation reports into summary tables"},
        {"pipeline", "run every stage in order"},
    };
    CLI::App* baseline_sub = nullptr;
    CLI::App* eval_sub = nullptr;
    for (const CommandSpec& c : kCommands) {
        CLI::App* sub = app.add_subcommand(c.name, c.blurb);
        sub->add_option("--config", config_path, "JSON config file");
        sub->add_option("--set", overrides, "section.key=value override, repeatable");
        sub->add_option("--seed", seed, "global seed (shorthand for --set seed=N)");
        sub->add_option("--workdir", workdir, "artifact directory (shorthand for --set paths.workdir=D)");
        if (std::string(c.name) == "baseline") {
            baseline_sub = sub;
            sub->add_option("--method", method, "ga | ga_diff | kl_min | npo | mmu");
        }
        if (std::string(c.name) == "eval") {
            eval_sub = sub;
            sub->add_option("--model-tag", model_tag, "checkpoint to evaluate");
        }
    }

    std::vector<std::string> rev(args.rbegin(), args.rend());
    try {
        app.parse(rev);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;  // malformed invocations are configuration errors
    }

    CLI::App* sub = app.get_subcommands().front();
    if (sub->count("--seed") > 0) overrides.push_back("seed=" + std::to_string(seed));
    if (sub->count("--workdir") > 0) overrides.push_back("paths.workdir=" + workdir);
    if (sub == baseline_sub && sub->count("--method") > 0) overrides.push_back("baseline.method=" + method);
    (void)eval_sub;

    try {
        const RunConfig cfg = parse_config(config_path, overrides);
        run_command(sub->get_name(), cfg, model_tag);
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << '\n';
        return 2;
    } catch (const PrereqError& e) {
        std::cerr << "prerequisite error: " << e.what() << '\n';
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << '\n';
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}

}  // namespace ulab
