#pragma once

#include <cstdint>
#include <vector>

#include "ulab/corpus.hpp"
#include "ulab/graph.hpp"
#include "ulab/model.hpp"
#include "ulab/rewards.hpp"

namespace ulab {

struct GrpoConfig {
    int group_size = 8;
    double clip_eps = 0.2;
    double kl_coef = 0.1;
    // Reference settings for billion-parameter policies use 1e-6; this toy
    // model needs a curvature-matched step to move at all.
    double learning_rate = 3e-4;
    int steps = 110;
    double temperature = 1.0;
    bool advantage_std_normalize = true;
    bool mixed_mode = false;  // one concatenated prompt, completion split at the separator
    int max_new_tokens = 10;
    int snapshot_every = 10;  // cadence of rouge snapshots in the log
    uint64_t seed = 0;

    void validate() const;
};

// One sampled (forget, boundary) completion pair. In mixed mode the model
// produces a single completion for the concatenated prompt; `combined` keeps
// it whole while forget/boundary carry the split halves for scoring.
struct PairRollout {
    Rollout forget;
    Rollout boundary;
    Rollout combined;
};

struct RolloutGroup {
    const Example* forget_example = nullptr;
    const Example* boundary_example = nullptr;
    std::vector<PairRollout> rollouts;
    std::vector<RewardRecord> rewards;
    std::vector<double> advantages;
};

// G independent completion pairs from the frozen policy. Deterministic in
// (group_seed, rollout index).
RolloutGroup sample_group(const ModelParams& policy, const Example& forget_example,
                          const Example& boundary_example, const GrpoConfig& cfg, uint64_t group_seed);

void score_group(RolloutGroup& group, const RefusalPatterns& patterns);

// Mean-centered rewards; optionally divided by (population std + 1e-8).
std::vector<double> group_advantages(const std::vector<double>& rewards, bool std_normalize);

// Exact KL(policy || ref) per row, averaged over rows. Value-side diagnostic.
double kl_per_token(const Matrix& policy_logits, const Matrix& ref_logits);

// Builds the full negative GRPO objective on the graph: clipped surrogate
// (token-level ratios, per-pair advantage broadcast, per-pair token mean then
// group mean) minus kl_coef times the KL to the frozen reference, negated.
// Outputs the loss node and, via kl_out, the KL node for logging.
NodeId grpo_loss(Graph& g, const ModelConfig& cfg, const ParamNodes& pn, const RolloutGroup& group,
                 const ModelParams& ref_policy, const GrpoConfig& gcfg, NodeId* kl_out = nullptr);

struct GrpoLogRow {
    int step = 0;
    double mean_reward = 0.0;
    double mean_advantage_abs = 0.0;
    double kl = 0.0;
    double forget_rouge = 0.0;  // latest snapshot value
    double retain_rouge = 0.0;
};

struct GrpoResult {
    ModelParams model;
    std::vector<GrpoLogRow> log;
};

// Stage-2 optimization starting from (and regularized toward) the steered
// model. One gradient step per sampled group; pairs cycle round-robin with a
// per-epoch reshuffle.
GrpoResult train_grpo(const ModelParams& steered, const std::vector<const Example*>& forget_set,
                      const std::vector<const Example*>& boundary_set, const GrpoConfig& cfg,
                      const RefusalPatterns& patterns, const std::vector<const Example*>& retain_snapshot_rows);

}  // namespace ulab
