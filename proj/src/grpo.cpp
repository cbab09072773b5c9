#include "ulab/grpo.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>

#include "ulab/errors.hpp"
#include "ulab/mathops.hpp"
#include "ulab/optim.hpp"
#include "ulab/rng.hpp"
#include "ulab/training.hpp"

namespace ulab {

namespace {

constexpr uint64_t kTagRollout = 0x524f4c;       // per-rollout sampling streams
constexpr uint64_t kTagGroup = 0x475250;         // per-step group seeds
constexpr uint64_t kTagForgetOrder = 0x505246;   // per-epoch forget pair order
constexpr uint64_t kTagBoundaryOrder = 0x505242; // per-epoch boundary pair order

}  // namespace

void GrpoConfig::validate() const {
    if (group_size < 2) throw ConfigError("GrpoConfig: group_size must be at least 2");
    if (!(clip_eps > 0.0 && clip_eps < 1.0)) throw ConfigError("GrpoConfig: clip_eps must lie in (0,1)");
    if (kl_coef < 0.0) throw ConfigError("GrpoConfig: kl_coef must be nonnegative");
    if (learning_rate <= 0.0) throw ConfigError("GrpoConfig: learning_rate must be positive");
    if (steps < 1) throw ConfigError("GrpoConfig: steps must be at least 1");
    if (temperature <= 0.0) throw ConfigError("GrpoConfig: temperature must be positive");
    if (max_new_tokens < 1) throw ConfigError("GrpoConfig: max_new_tokens must be at least 1");
    if (snapshot_every < 1) throw ConfigError("GrpoConfig: snapshot_every must be at least 1");
}

static Tokens mixed_prompt(const Example& forget_example, const Example& boundary_example) {
    Tokens prompt = forget_example.question_tokens;
    prompt.push_back(vocab::kSep);
    prompt.insert(prompt.end(), boundary_example.question_tokens.begin(), boundary_example.question_tokens.end());
    return prompt;
}

RolloutGroup sample_group(const ModelParams& policy, const Example& forget_example,
                          const Example& boundary_example, const GrpoConfig& cfg, uint64_t group_seed) {
    cfg.validate();
    RolloutGroup out;
    out.forget_example = &forget_example;
    out.boundary_example = &boundary_example;
    out.rollouts.reserve(static_cast<size_t>(cfg.group_size));
    for (int i = 0; i < cfg.group_size; ++i) {
        PairRollout pr;
        if (cfg.mixed_mode) {
            const Tokens prompt = mixed_prompt(forget_example, boundary_example);
            const std::vector<ImageFeatures> images = {forget_example.image_features,
                                                       boundary_example.image_features};
            Rng rng(derive_seed(group_seed, kTagRollout, static_cast<uint64_t>(i), 2));
            pr.combined = sample_rollout(policy, images, prompt, 2 * cfg.max_new_tokens + 1, cfg.temperature,
                                         vocab::kEos, rng);
            // Split at the first separator; the separator joins neither half.
            const auto sep = std::find(pr.combined.tokens.begin(), pr.combined.tokens.end(), vocab::kSep);
            pr.forget.tokens.assign(pr.combined.tokens.begin(), sep);
            if (sep != pr.combined.tokens.end()) pr.boundary.tokens.assign(sep + 1, pr.combined.tokens.end());
        } else {
            Rng rng_f(derive_seed(group_seed, kTagRollout, static_cast<uint64_t>(i), 0));
            Rng rng_b(derive_seed(group_seed, kTagRollout, static_cast<uint64_t>(i), 1));
            pr.forget = sample_rollout(policy, {forget_example.image_features}, forget_example.question_tokens,
                                       cfg.max_new_tokens, cfg.temperature, vocab::kEos, rng_f);
            pr.boundary = sample_rollout(policy, {boundary_example.image_features},
                                         boundary_example.question_tokens, cfg.max_new_tokens, cfg.temperature,
                                         vocab::kEos, rng_b);
        }
        out.rollouts.push_back(std::move(pr));
    }
    return out;
}

void score_group(RolloutGroup& group, const RefusalPatterns& patterns) {
    if (group.forget_example == nullptr || group.boundary_example == nullptr) {
        throw DimError("score_group: group has no source examples");
    }
    group.rewards.clear();
    group.rewards.reserve(group.rollouts.size());
    for (const PairRollout& pr : group.rollouts) {
        group.rewards.push_back(paired_reward(pr.forget.tokens, group.forget_example->answer_tokens,
                                              pr.boundary.tokens, group.boundary_example->answer_tokens, patterns));
    }
}

std::vector<double> group_advantages(const std::vector<double>& rewards, bool std_normalize) {
    if (rewards.empty()) throw DimError("group_advantages: empty reward list");
    const double n = static_cast<double>(rewards.size());
    const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
    std::vector<double> adv(rewards.size());
    for (size_t i = 0; i < rewards.size(); ++i) adv[i] = rewards[i] - mean;
    if (std_normalize) {
        double var = 0.0;
        for (double a : adv) var += a * a;
        const double denom = std::sqrt(var / n) + 1e-8;
        for (double& a : adv) a /= denom;
    }
    return adv;
}

double kl_per_token(const Matrix& policy_logits, const Matrix& ref_logits) {
    check_same_shape(policy_logits, ref_logits, "kl_per_token");
    const Matrix p = softmax_rows(policy_logits);
    const Matrix lp = log_softmax_rows(policy_logits);
    const Matrix lq = log_softmax_rows(ref_logits);
    double total = 0.0;
    for (int r = 0; r < p.rows; ++r) {
        double row = 0.0;
        for (int c = 0; c < p.cols; ++c) row += p(r, c) * (lp(r, c) - lq(r, c));
        total += row;
    }
    return total / p.rows;
}

namespace {

// Next-token distributions over a completion, with the image placeholder
// pinned to -1e30 and the sampling temperature applied, mirroring
// sample_rollout. Returns the banned/scaled logits node; `rows` gets the
// completion's target row indices into the full sequence.
NodeId completion_logits_node(Graph& g, const ModelConfig& cfg, const ParamNodes& pn,
                              const std::vector<ImageFeatures>& images, const Tokens& prompt,
                              const Tokens& completion, double temperature) {
    Tokens full = prompt;
    full.insert(full.end(), completion.begin(), completion.end());
    NodeId logits = forward_logits_graph(g, cfg, pn, images, full);
    std::vector<int> rows(completion.size());
    for (size_t k = 0; k < completion.size(); ++k) {
        rows[k] = static_cast<int>(prompt.size()) - 1 + static_cast<int>(k);
    }
    NodeId picked = g.gather_rows(logits, rows);
    if (temperature != 1.0) picked = g.scale(picked, 1.0 / temperature);
    Matrix ban(static_cast<int>(completion.size()), cfg.vocab_size);
    for (int r = 0; r < ban.rows; ++r) ban(r, cfg.img_token) = -1e30;
    return g.add_const(picked, ban);
}

// Value-side twin of completion_logits_node for the frozen reference; the op
// order matches exactly so the two agree bitwise on shared weights.
Matrix completion_logits_ref(const ModelParams& ref, const std::vector<ImageFeatures>& images,
                             const Tokens& prompt, const Tokens& completion, double temperature) {
    Tokens full = prompt;
    full.insert(full.end(), completion.begin(), completion.end());
    const Matrix logits = forward_logits(ref, images, full);
    Matrix picked(static_cast<int>(completion.size()), logits.cols);
    for (size_t k = 0; k < completion.size(); ++k) {
        const int src = static_cast<int>(prompt.size()) - 1 + static_cast<int>(k);
        for (int c = 0; c < logits.cols; ++c) picked(static_cast<int>(k), c) = logits(src, c);
    }
    if (temperature != 1.0) picked = scale(picked, 1.0 / temperature);
    Matrix ban(picked.rows, picked.cols);
    for (int r = 0; r < ban.rows; ++r) ban(r, ref.cfg.img_token) = -1e30;
    return add(picked, ban);
}

struct SideNodes {
    NodeId surrogate;  // n x 1 clipped surrogate values
    NodeId kl;         // 1 x 1 mean KL over the side's rows
    int n_tokens = 0;
};

SideNodes side_nodes(Graph& g, const ModelConfig& cfg, const ParamNodes& pn, const ModelParams& ref,
                     const std::vector<ImageFeatures>& images, const Tokens& prompt, const Rollout& rollout,
                     double advantage, const GrpoConfig& gcfg) {
    if (rollout.tokens.empty()) throw DimError("grpo_loss: empty rollout completion");
    if (rollout.logprobs.size() != rollout.tokens.size()) {
        throw DimError("grpo_loss: rollout logprobs out of sync with tokens");
    }
    SideNodes out;
    out.n_tokens = static_cast<int>(rollout.tokens.size());
    NodeId banned = completion_logits_node(g, cfg, pn, images, prompt, rollout.tokens, gcfg.temperature);
    NodeId lp = g.gather_log_softmax(banned, rollout.tokens);
    Matrix old_lp(out.n_tokens, 1);
    for (int k = 0; k < out.n_tokens; ++k) old_lp(k, 0) = rollout.logprobs[static_cast<size_t>(k)];
    out.surrogate = g.ppo_surrogate(lp, old_lp, advantage, gcfg.clip_eps);
    out.kl = g.kl_policy_ref_mean(banned, completion_logits_ref(ref, images, prompt, rollout.tokens,
                                                               gcfg.temperature));
    return out;
}

}  // namespace

NodeId grpo_loss(Graph& g, const ModelConfig& cfg, const ParamNodes& pn, const RolloutGroup& group,
                 const ModelParams& ref_policy, const GrpoConfig& gcfg, NodeId* kl_out) {
    if (group.forget_example == nullptr || group.boundary_example == nullptr) {
        throw DimError("grpo_loss: group has no source examples");
    }
    if (group.rollouts.empty()) throw DimError("grpo_loss: empty group");
    if (group.advantages.size() != group.rollouts.size()) {
        throw DimError("grpo_loss: advantages out of sync with rollouts");
    }
    const Example& fe = *group.forget_example;
    const Example& be = *group.boundary_example;

    std::vector<NodeId> pair_means;
    std::vector<SideNodes> sides;
    for (size_t i = 0; i < group.rollouts.size(); ++i) {
        const PairRollout& pr = group.rollouts[i];
        const double adv = group.advantages[i];
        std::vector<NodeId> surrogates;
        if (gcfg.mixed_mode) {
            const SideNodes s = side_nodes(g, cfg, pn, ref_policy, {fe.image_features, be.image_features},
                                           mixed_prompt(fe, be), pr.combined, adv, gcfg);
            surrogates.push_back(s.surrogate);
            sides.push_back(s);
        } else {
            const SideNodes sf = side_nodes(g, cfg, pn, ref_policy, {fe.image_features}, fe.question_tokens,
                                            pr.forget, adv, gcfg);
            const SideNodes sb = side_nodes(g, cfg, pn, ref_policy, {be.image_features}, be.question_tokens,
                                            pr.boundary, adv, gcfg);
            surrogates.push_back(sf.surrogate);
            surrogates.push_back(sb.surrogate);
            sides.push_back(sf);
            sides.push_back(sb);
        }
        pair_means.push_back(g.mean_all(g.vstack(surrogates)));
    }
    NodeId surrogate_mean = g.mean_all(g.vstack(pair_means));

    // Mean KL over every generated position in the group.
    int total_tokens = 0;
    for (const SideNodes& s : sides) total_tokens += s.n_tokens;
    NodeId kl_mean = g.scale(sides[0].kl, static_cast<double>(sides[0].n_tokens) / total_tokens);
    for (size_t s = 1; s < sides.size(); ++s) {
        kl_mean = g.add(kl_mean, g.scale(sides[s].kl, static_cast<double>(sides[s].n_tokens) / total_tokens));
    }
    if (kl_out != nullptr) *kl_out = kl_mean;

    // loss = -(surrogate - kl_coef * KL)
    return g.add(g.scale(surrogate_mean, -1.0), g.scale(kl_mean, gcfg.kl_coef));
}

static double mean_greedy_rouge(const ModelParams& p, const std::vector<const Example*>& rows,
                                int max_new_tokens) {
    if (rows.empty()) return 0.0;
    double total = 0.0;
    for (const Example* e : rows) {
        const Tokens got = greedy_decode(p, {e->image_features}, e->question_tokens, max_new_tokens, vocab::kEos);
        total += rouge_l(got, e->answer_tokens);
    }
    return total / static_cast<double>(rows.size());
}

GrpoResult train_grpo(const ModelParams& steered, const std::vector<const Example*>& forget_set,
                      const std::vector<const Example*>& boundary_set, const GrpoConfig& cfg,
                      const RefusalPatterns& patterns, const std::vector<const Example*>& retain_snapshot_rows) {
    cfg.validate();
    patterns.validate();
    if (forget_set.empty()) throw DimError("train_grpo: empty forget set");
    if (boundary_set.empty()) throw DimError("train_grpo: empty boundary set");

    GrpoResult result;
    result.model = steered;
    const ModelParams& ref = steered;
    Adam opt(AdamConfig{.lr = cfg.learning_rate});

    const size_t nf = forget_set.size();
    const size_t nb = boundary_set.size();
    const size_t epoch_len = std::max(nf, nb);
    std::vector<size_t> forget_order(nf);
    std::vector<size_t> boundary_order(nb);
    std::iota(forget_order.begin(), forget_order.end(), 0);
    std::iota(boundary_order.begin(), boundary_order.end(), 0);

    double snap_forget = 0.0;
    double snap_retain = 0.0;
    for (int step = 0; step < cfg.steps; ++step) {
        const uint64_t epoch = static_cast<uint64_t>(step) / epoch_len;
        const size_t pos = static_cast<size_t>(step) % epoch_len;
        if (pos == 0) {
            Rng rf(derive_seed(cfg.seed, kTagForgetOrder, epoch));
            Rng rb(derive_seed(cfg.seed, kTagBoundaryOrder, epoch));
            rf.shuffle(forget_order);
            rb.shuffle(boundary_order);
        }
        const Example& fe = *forget_set[forget_order[pos % nf]];
        const Example& be = *boundary_set[boundary_order[pos % nb]];

        RolloutGroup group = sample_group(result.model, fe, be, cfg,
                                          derive_seed(cfg.seed, kTagGroup, static_cast<uint64_t>(step)));
        score_group(group, patterns);
        std::vector<double> totals;
        totals.reserve(group.rewards.size());
        for (const RewardRecord& r : group.rewards) totals.push_back(r.total);
        group.advantages = group_advantages(totals, cfg.advantage_std_normalize);

        Graph g;
        ParamNodes pn = register_params(g, result.model);
        NodeId kl_node = 0;
        NodeId loss = grpo_loss(g, result.model.cfg, pn, group, ref, cfg, &kl_node);
        const double loss_value = g.value(loss)(0, 0);
        if (!std::isfinite(loss_value)) {
            throw NumericError("train_grpo: non-finite loss at step " + std::to_string(step) + " (forget entity " +
                               std::to_string(fe.entity_id) + ", boundary entity " + std::to_string(be.entity_id) +
                               ")");
        }
        g.backward(loss);
        opt.step(result.model, g, pn);

        if (step % cfg.snapshot_every == 0 || step == cfg.steps - 1) {
            snap_forget = mean_greedy_rouge(result.model, forget_set, cfg.max_new_tokens);
            snap_retain = mean_greedy_rouge(result.model, retain_snapshot_rows, cfg.max_new_tokens);
        }

        GrpoLogRow row;
        row.step = step;
        row.mean_reward = std::accumulate(totals.begin(), totals.end(), 0.0) / static_cast<double>(totals.size());
        double adv_abs = 0.0;
        for (double a : group.advantages) adv_abs += std::abs(a);
        row.mean_advantage_abs = adv_abs / static_cast<double>(group.advantages.size());
        row.kl = g.value(kl_node)(0, 0);
        row.forget_rouge = snap_forget;
        row.retain_rouge = snap_retain;
        result.log.push_back(row);
    }
    return result;
}

}  // namespace ulab
