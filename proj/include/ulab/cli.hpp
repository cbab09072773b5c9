#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ulab/corpus.hpp"
#include "ulab/grpo.hpp"
#include "ulab/model.hpp"
#include "ulab/steering.hpp"
#include "ulab/training.hpp"

namespace ulab {

struct EvalSettings {
    std::string judge_mode = "off";  // off | local | http
};

// File locations. Relative entries resolve against workdir; checkpoints and
// reports name directories, corpus_file a single JSONL file.
struct PathsConfig {
    std::string workdir = "runs/default";
    std::string corpus_file = "corpus.jsonl";
    std::string checkpoints = "checkpoints";
    std::string reports = "reports";
};

// Whole-run configuration. One global seed feeds every stage through fixed
// substream derivations, so sub-config seed fields are never set directly.
struct RunConfig {
    uint64_t seed = 0;
    SplitSpec corpus;
    ModelConfig model;  // d_image defaults to the corpus feature width here
    TrainConfig train;
    SteeringConfig steering;
    std::vector<double> lambda_grid = {0.0, 0.25, 0.5, 1.0, 2.0, 4.0};
    GrpoConfig grpo;
    UnlearnConfig baseline;
    EvalSettings eval;
    PathsConfig paths;

    void validate() const;
};

RunConfig default_config();

// Layered resolution: built-in defaults, then the JSON config file (optional;
// an empty file means all defaults), then dotted overrides like
// "grpo.steps=40" in order. Unknown keys, type mismatches, and failed
// invariants raise ConfigError naming the key.
RunConfig parse_config(const std::string& config_path, const std::vector<std::string>& overrides);

// Canonical JSON of the schema keys (derived sub-seeds excluded); parses back
// through parse_config unchanged. Manifests hash this exact string.
std::string config_json_string(const RunConfig& cfg);
std::string config_hash_hex(const RunConfig& cfg);

// fnv1a-64 of the file bytes as 16 hex chars; CorruptionError when unreadable.
std::string file_hash_hex(const std::string& path);

// Workdir-resolved artifact locations shared by every command.
struct RunPaths {
    std::string workdir;
    std::string config_snapshot;
    std::string corpus_file;
    std::string vocab_file;
    std::string checkpoint_dir;
    std::string report_dir;
    std::string layer_selection;
    std::string lambda_sweep;
    std::string stage1_report;
    std::string grpo_log;
    std::string vanilla_train_report;
    std::string tradeoff_csv;
    std::string summary;

    std::string checkpoint(const std::string& tag) const;
    std::string eval_report(const std::string& tag) const;
    std::string baseline_log(const std::string& method) const;
    static std::string manifest(const std::string& artifact);  // sidecar path
};

RunPaths resolve_paths(const RunConfig& cfg);

// vanilla, steered, steer_grpo, then the five baseline methods.
const std::vector<std::string>& known_model_tags();

// Executes one stage: gen-data, train-vanilla, select-layer, sweep-lambda,
// steer, grpo, baseline, eval, report, or pipeline (all of them in order).
// model_tag selects the checkpoint for `eval` and is ignored elsewhere.
// Throws ConfigError / PrereqError / NumericError; artifacts land under
// workdir, each with a .manifest.json sidecar recording the config hash and
// the input file hashes.
void run_command(const std::string& command, const RunConfig& cfg, const std::string& model_tag = "vanilla");

// argv-style entry without the program name. Returns the process exit code:
// 0 success, 2 configuration error, 3 missing prerequisite, 4 numeric
// failure, 1 anything else.
int cli_main(const std::vector<std::string>& args);

}  // namespace ulab
