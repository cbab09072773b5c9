#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "ulab/corpus.hpp"
#include "ulab/matrix.hpp"
#include "ulab/model.hpp"
#include "ulab/rewards.hpp"

namespace ulab {

// Contrastive direction between the mean activations of two prompt sets,
// measured in the residual stream right after one block.
struct SteeringVector {
    int layer = 0;
    Matrix v;            // 1 x d_model, mean_target - mean_forget exactly
    Matrix mean_target;  // 1 x d_model
    Matrix mean_forget;  // 1 x d_model
    int n_target = 0;
    int n_forget = 0;
};

struct SteeringConfig {
    std::vector<int> layer_candidates;  // empty: middle third of the stack
    double lambda_steer = 1.0;
    double gamma = -1.0;  // negative: scale-aware default, see default_gamma
    int rollout_G = 8;
    double temperature = 1.0;
    int max_new_tokens = 10;
    uint64_t seed = 0;

    void validate(int n_layers) const;
};

// One row per example: the residual stream after `layer` at the last prompt
// token, from a teacher-forced pass over the prompt alone.
Matrix capture_activations(const ModelParams& p, const std::vector<const Example*>& examples, int layer);

SteeringVector compute_steering_vector(const ModelParams& p, const std::vector<const Example*>& forget_examples,
                                       const std::vector<const Example*>& target_examples, int layer);

// Same construction from already-captured activation matrices.
SteeringVector steering_from_captures(const Matrix& forget_rows, const Matrix& target_rows, int layer);

// Ridge regression data for the down-projection replacement: H rows are the
// post-gelu hidden vectors at the capture position, T rows are the desired
// down-projection outputs. Forget rows want their residual shifted by
// lambda * v; retain rows want it unchanged. Forget rows stack first.
void collect_regression_data(const ModelParams& p, const std::vector<const Example*>& forget_examples,
                             const std::vector<const Example*>& retain_examples, const SteeringVector& sv,
                             double lambda_steer, Matrix& h_out, Matrix& t_out);

// 1e-3 * trace(HtH) / cols(H): a ridge strength proportional to the mean
// squared row norm, so behavior does not depend on activation scale.
double default_gamma(const Matrix& h);

struct PatchResult {
    ModelParams model;      // the input model with one matrix replaced
    Matrix w_star;          // the replacement down-projection
    double gamma = 0.0;     // the strength actually used
    double residual = 0.0;  // relative normal-equation residual of the solve
};

// Solves the ridge problem and swaps the layer's down-projection. The input
// model is untouched, so the caller keeps the rollback copy.
PatchResult solve_and_patch(const ModelParams& p, const Matrix& h, const Matrix& t, double gamma, int layer);

std::vector<int> default_layer_candidates(int n_layers);

// Lowest layer index among the maxima.
int argmax_rate_layer(const std::vector<std::pair<int, double>>& rates);

struct LayerSelection {
    int best_layer = 0;
    std::vector<std::pair<int, double>> rates;  // (layer, refusal rollout rate), candidate order
};

// Builds a steered candidate per layer and picks the one whose sampled
// completions on forget prompts refuse most often.
LayerSelection select_layer(const ModelParams& p, const SteeringConfig& cfg,
                            const std::vector<const Example*>& forget_examples,
                            const std::vector<const Example*>& target_examples,
                            const std::vector<const Example*>& retain_examples, const RefusalPatterns& patterns);

struct LambdaRow {
    double lambda = 0.0;
    double retain_rouge = 0.0;
    double refusal_rate = 0.0;
    double mean_shift = 0.0;  // mean L2 change of the collected rows' residual outputs
};

std::vector<LambdaRow> sweep_lambda(const ModelParams& p, int layer, const std::vector<double>& grid,
                                    const std::vector<const Example*>& forget_examples,
                                    const std::vector<const Example*>& retain_examples,
                                    const std::vector<const Example*>& target_examples,
                                    const RefusalPatterns& patterns, const SteeringConfig& cfg);

// Highest refusal rate whose retain ROUGE stays within max_retain_drop
// (absolute) of the unsteered value; falls back to the smallest |lambda| row
// when none qualifies. Rate ties keep the smaller |lambda|.
double pick_lambda(const std::vector<LambdaRow>& rows, double unsteered_retain_rouge,
                   double max_retain_drop = 0.02);

}  // namespace ulab
