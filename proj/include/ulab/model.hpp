#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ulab/graph.hpp"
#include "ulab/matrix.hpp"
#include "ulab/rng.hpp"

namespace ulab {

using Tokens = std::vector<int>;

struct ModelConfig {
    int vocab_size = 128;
    int d_model = 48;
    int d_mlp = 128;
    int n_layers = 6;
    int n_image_tokens = 4;
    int d_image = 16;
    int max_seq_len = 48;
    int img_token = 3;  // placeholder id marking image prefix slots
    double rms_eps = 1e-6;
    double init_std = 0.02;

    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

// One tensor field per checkpointed matrix; T is Matrix for concrete weights
// and NodeId when the same weights are registered on a Graph.
template <typename T>
struct ParamTensors {
    struct Layer {
        T wq, wk, wv, wo;        // attention, d_model x d_model
        T w_up, w_down;          // mlp, d_model x d_mlp and d_mlp x d_model
        T gain_attn, gain_mlp;   // rms gains, 1 x d_model
    };
    T token_embedding;           // vocab x d_model
    T position_embedding;        // max_seq_len x d_model
    T vision_adapter;            // d_image x (n_image_tokens * d_model)
    T head;                      // d_model x vocab
    std::vector<Layer> layers;
};

struct ModelParams : ParamTensors<Matrix> {
    ModelConfig cfg;
};

using ParamNodes = ParamTensors<NodeId>;

// Weight matrices ~ N(0, init_std^2); rms gains start at 1.
ModelParams init_params(const ModelConfig& cfg, uint64_t seed);

// Applies fn(name, tensor) to every parameter matrix in a fixed order; the
// same order defines checkpoint layout and optimizer slot indexing.
void for_each_tensor(ModelParams& p, const std::function<void(const std::string&, Matrix&)>& fn);
void for_each_tensor(const ModelParams& p, const std::function<void(const std::string&, const Matrix&)>& fn);

struct LayerTrace {
    Matrix residual_pre_mlp;  // seq x d_model, input to the mlp branch
    Matrix mlp_hidden;        // seq x d_mlp, post-gelu input to w_down
    Matrix residual_post;     // seq x d_model, residual_pre_mlp + mlp_hidden * w_down
};

struct ActivationTrace {
    std::vector<LayerTrace> layers;
};

using ImageFeatures = std::vector<double>;

// `ids` is the full token sequence; every run of cfg.n_image_tokens
// consecutive img_token entries consumes the next entry of `images`. Image
// positions attend causally within their own run; text positions attend
// causally over everything.
Matrix forward_logits(const ModelParams& p, const std::vector<ImageFeatures>& images, const Tokens& ids,
                      ActivationTrace* trace = nullptr);

ParamNodes register_params(Graph& g, const ModelParams& p);
NodeId forward_logits_graph(Graph& g, const ModelConfig& cfg, const ParamNodes& pn,
                            const std::vector<ImageFeatures>& images, const Tokens& ids);

// Teacher-forced log prob of `answer` given `prompt` (sum over answer tokens).
double sequence_log_prob(const ModelParams& p, const std::vector<ImageFeatures>& images, const Tokens& prompt,
                         const Tokens& answer);
// Graph twin returning a |answer| x 1 node of per-token logprobs.
NodeId sequence_log_prob_graph(Graph& g, const ModelConfig& cfg, const ParamNodes& pn,
                               const std::vector<ImageFeatures>& images, const Tokens& prompt,
                               const Tokens& answer);

struct Rollout {
    Tokens tokens;                 // generated tokens, without the prompt
    std::vector<double> logprobs;  // log pi(y_t | prefix) under the sampling policy
    bool terminated = false;       // hit the end token before max_new_tokens
};

Rollout sample_rollout(const ModelParams& p, const std::vector<ImageFeatures>& images, const Tokens& prompt,
                       int max_new_tokens, double temperature, int end_token, Rng& rng);

Tokens greedy_decode(const ModelParams& p, const std::vector<ImageFeatures>& images, const Tokens& prompt,
                     int max_new_tokens, int end_token);

struct ClassifyResult {
    int choice = 0;
    std::vector<double> scores;  // length-normalized option log probs
};

// Scores each option as a continuation of the prompt; ties keep the lowest index.
ClassifyResult classify_options(const ModelParams& p, const std::vector<ImageFeatures>& images,
                                const Tokens& prompt, const std::vector<Tokens>& options);

ModelParams patch_down_projection(const ModelParams& p, int layer, const Matrix& w_down);

// Checkpoint = magic, manifest length, JSON manifest (config + tensor table),
// little-endian float32 payload.
void save_checkpoint(const ModelParams& p, const std::string& path);
ModelParams load_checkpoint(const std::string& path);

}  // namespace ulab
