#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "ulab/corpus.hpp"
#include "ulab/errors.hpp"
#include "ulab/graph.hpp"
#include "ulab/grpo.hpp"
#include "ulab/mathops.hpp"
#include "ulab/model.hpp"
#include "ulab/rewards.hpp"
#include "ulab/rng.hpp"

using namespace ulab;

namespace {

SplitSpec grpo_spec() {
    SplitSpec s;
    s.n_entities = 12;
    s.forget_ratio = 0.1;
    s.boundary_fraction_of_retain = 0.3;
    s.n_templates_train = 2;
    s.n_templates_heldout = 1;
    s.n_real_entities = 2;
    s.n_target_entities = 2;
    s.n_image_tokens = 2;
    s.seed = 3;
    return s;
}

ModelConfig grpo_model_cfg() {
    ModelConfig cfg;
    cfg.vocab_size = 96;
    cfg.d_model = 16;
    cfg.d_mlp = 24;
    cfg.n_layers = 2;
    cfg.n_image_tokens = 2;
    cfg.d_image = corpus_feature_dim();
    cfg.max_seq_len = 36;
    return cfg;
}

struct Fixture {
    Corpus corpus;
    ModelParams policy;
    const Example* forget_row;
    const Example* boundary_row;
};

const Fixture& fixture() {
    static const Fixture fx = [] {
        Fixture out{generate_corpus(grpo_spec()), init_params(grpo_model_cfg(), 7), nullptr, nullptr};
        out.forget_row = out.corpus.split_view(Split::Forget).at(0);
        out.boundary_row = out.corpus.split_view(Split::Boundary).at(0);
        return out;
    }();
    return fx;
}

GrpoConfig small_cfg() {
    GrpoConfig cfg;
    cfg.group_size = 4;
    cfg.max_new_tokens = 5;
    cfg.steps = 4;
    cfg.seed = 17;
    return cfg;
}

bool same_rollout(const Rollout& a, const Rollout& b) {
    return a.tokens == b.tokens && a.logprobs == b.logprobs && a.terminated == b.terminated;
}

}  // namespace

TEST_CASE("config invariants are enforced") {
    CHECK_NOTHROW(GrpoConfig{}.validate());
    GrpoConfig c;
    c.group_size = 1;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = GrpoConfig{};
    c.clip_eps = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.clip_eps = 1.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = GrpoConfig{};
    c.kl_coef = -0.1;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = GrpoConfig{};
    c.steps = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = GrpoConfig{};
    c.temperature = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("group advantages center, normalize and validate") {
    const std::vector<double> rewards = {1.0, 0.5, 0.1, 0.4};
    const std::vector<double> centered = group_advantages(rewards, false);
    const std::vector<double> want = {0.5, 0.0, -0.4, -0.1};
    REQUIRE(centered.size() == want.size());
    for (size_t i = 0; i < want.size(); ++i) CHECK(std::abs(centered[i] - want[i]) <= 1e-12);

    // Normalized version divides the same centered values by (std + 1e-8).
    double var = 0.0;
    for (double a : centered) var += a * a;
    const double denom = std::sqrt(var / 4.0) + 1e-8;
    const std::vector<double> normed = group_advantages(rewards, true);
    for (size_t i = 0; i < want.size(); ++i) CHECK(std::abs(normed[i] - centered[i] / denom) <= 1e-15);

    // Advantages sum to zero for arbitrary rewards, both modes.
    Rng rng(4);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> r(2 + trial % 7);
        for (double& x : r) x = rng.uniform() * 2.0;
        for (bool norm : {false, true}) {
            const std::vector<double> adv = group_advantages(r, norm);
            double sum = 0.0;
            for (double a : adv) sum += a;
            CHECK(std::abs(sum) <= 1e-10);
        }
    }

    // Identical rewards must not blow up on the zero std; the 1e-8 guard can
    // amplify centering round-off to ~1e-8, which is still no signal.
    const std::vector<double> flat = group_advantages({0.7, 0.7, 0.7}, true);
    for (double a : flat) CHECK(std::abs(a) <= 1e-7);

    CHECK_THROWS_AS(group_advantages({}, true), DimError);
}

TEST_CASE("sampled groups are structured and seed-deterministic") {
    const Fixture& fx = fixture();
    const GrpoConfig cfg = small_cfg();
    RolloutGroup g1 = sample_group(fx.policy, *fx.forget_row, *fx.boundary_row, cfg, 99);
    REQUIRE(g1.rollouts.size() == 4);
    for (const PairRollout& pr : g1.rollouts) {
        CHECK(!pr.forget.tokens.empty());
        CHECK(!pr.boundary.tokens.empty());
        CHECK(pr.forget.tokens.size() <= 5);
        CHECK(pr.forget.logprobs.size() == pr.forget.tokens.size());
        CHECK(pr.boundary.logprobs.size() == pr.boundary.tokens.size());
        for (double lp : pr.forget.logprobs) CHECK(lp <= 0.0);
        // the placeholder token is banned from sampling
        for (int t : pr.forget.tokens) CHECK(t != grpo_model_cfg().img_token);
        for (int t : pr.boundary.tokens) CHECK(t != grpo_model_cfg().img_token);
    }

    RolloutGroup g2 = sample_group(fx.policy, *fx.forget_row, *fx.boundary_row, cfg, 99);
    for (size_t i = 0; i < g1.rollouts.size(); ++i) {
        CHECK(same_rollout(g1.rollouts[i].forget, g2.rollouts[i].forget));
        CHECK(same_rollout(g1.rollouts[i].boundary, g2.rollouts[i].boundary));
    }

    RolloutGroup g3 = sample_group(fx.policy, *fx.forget_row, *fx.boundary_row, cfg, 100);
    bool any_diff = false;
    for (size_t i = 0; i < g1.rollouts.size(); ++i) {
        any_diff = any_diff || !same_rollout(g1.rollouts[i].forget, g3.rollouts[i].forget) ||
                   !same_rollout(g1.rollouts[i].boundary, g3.rollouts[i].boundary);
    }
    CHECK(any_diff);

    score_group(g1, RefusalPatterns::defaults());
    REQUIRE(g1.rewards.size() == 4);
    for (const RewardRecord& r : g1.rewards) CHECK(r.total == r.r_forget + r.r_boundary);
}

TEST_CASE("sampling logprobs equal the teacher-forced rebuild bitwise") {
    const Fixture& fx = fixture();
    RolloutGroup grp = sample_group(fx.policy, *fx.forget_row, *fx.boundary_row, small_cfg(), 5);
    const Rollout& ro = grp.rollouts[0].forget;
    Graph g;
    ParamNodes pn = register_params(g, fx.policy);
    NodeId lp = sequence_log_prob_graph(g, fx.policy.cfg, pn, {fx.forget_row->image_features},
                                        fx.forget_row->question_tokens, ro.tokens);
    const Matrix& v = g.value(lp);
    REQUIRE(v.rows == static_cast<int>(ro.tokens.size()));
    for (int k = 0; k < v.rows; ++k) CHECK(v(k, 0) == ro.logprobs[static_cast<size_t>(k)]);
}

TEST_CASE("loss is exactly anchored at the first step") {
    const Fixture& fx = fixture();
    const GrpoConfig cfg = small_cfg();
    RolloutGroup grp = sample_group(fx.policy, *fx.forget_row, *fx.boundary_row, cfg, 21);
    score_group(grp, RefusalPatterns::defaults());
    std::vector<double> totals;
    for (const RewardRecord& r : grp.rewards) totals.push_back(r.total);
    grp.advantages = group_advantages(totals, cfg.advantage_std_normalize);

    Graph g;
    ParamNodes pn = register_params(g, fx.policy);
    NodeId kl = 0;
    NodeId loss = grpo_loss(g, fx.policy.cfg, pn, grp, fx.policy, cfg, &kl);
    // Policy == reference and ratios == 1, so KL vanishes identically and the
    // surrogate reduces to the mean advantage, which is zero by construction.
    CHECK(g.value(kl)(0, 0) == 0.0);
    CHECK(std::abs(g.value(loss)(0, 0)) <= 1e-12);
    CHECK_NOTHROW(g.backward(loss));
}

TEST_CASE("loss matches a hand-built computation and is reward-shift invariant") {
    const Fixture& fx = fixture();
    GrpoConfig cfg = small_cfg();
    cfg.advantage_std_normalize = false;

    // Sample under one policy, evaluate under another: ratios differ from 1
    // and the KL is strictly positive, so every branch of the objective is live.
    RolloutGroup grp = sample_group(fx.policy, *fx.forget_row, *fx.boundary_row, cfg, 33);
    score_group(grp, RefusalPatterns::defaults());
    std::vector<double> totals;
    for (const RewardRecord& r : grp.rewards) totals.push_back(r.total);
    grp.advantages = group_advantages(totals, false);

    const ModelParams moved = init_params(grpo_model_cfg(), 8);
    Graph g;
    ParamNodes pn = register_params(g, moved);
    NodeId kl = 0;
    NodeId loss = grpo_loss(g, moved.cfg, pn, grp, fx.policy, cfg, &kl);
    const double kl_value = g.value(kl)(0, 0);
    CHECK(kl_value > 0.0);

    // Hand-built value-side oracle over the same rollouts.
    auto side_terms = [&](const Tokens& prompt, const std::vector<ImageFeatures>& images, const Rollout& ro,
                          double adv, double& surr_sum, double& kl_mean) {
        Tokens full = prompt;
        full.insert(full.end(), ro.tokens.begin(), ro.tokens.end());
        Matrix lg = forward_logits(moved, images, full);
        Matrix rg = forward_logits(fx.policy, images, full);
        const int n = static_cast<int>(ro.tokens.size());
        Matrix rows_pol(n, lg.cols);
        Matrix rows_ref(n, lg.cols);
        for (int k = 0; k < n; ++k) {
            const int src = static_cast<int>(prompt.size()) - 1 + k;
            for (int c = 0; c < lg.cols; ++c) {
                rows_pol(k, c) = lg(src, c);
                rows_ref(k, c) = rg(src, c);
            }
            rows_pol(k, moved.cfg.img_token) = -1e30;
            rows_ref(k, moved.cfg.img_token) = -1e30;
        }
        const Matrix lp = log_softmax_rows(rows_pol);
        for (int k = 0; k < n; ++k) {
            const double ratio = std::exp(lp(k, ro.tokens[static_cast<size_t>(k)]) -
                                          ro.logprobs[static_cast<size_t>(k)]);
            const double clipped = std::clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
            surr_sum += std::min(ratio * adv, clipped * adv);
        }
        kl_mean = kl_per_token(rows_pol, rows_ref);
    };

    double surr_group = 0.0;
    double kl_weighted = 0.0;
    int total_tokens = 0;
    for (const PairRollout& pr : grp.rollouts) {
        total_tokens +=
            static_cast<int>(pr.forget.tokens.size()) + static_cast<int>(pr.boundary.tokens.size());
    }
    for (size_t i = 0; i < grp.rollouts.size(); ++i) {
        const PairRollout& pr = grp.rollouts[i];
        double surr_sum = 0.0;
        double klf = 0.0;
        double klb = 0.0;
        side_terms(fx.forget_row->question_tokens, {fx.forget_row->image_features}, pr.forget,
                   grp.advantages[i], surr_sum, klf);
        side_terms(fx.boundary_row->question_tokens, {fx.boundary_row->image_features}, pr.boundary,
                   grp.advantages[i], surr_sum, klb);
        const int pair_tokens =
            static_cast<int>(pr.forget.tokens.size()) + static_cast<int>(pr.boundary.tokens.size());
        surr_group += surr_sum / pair_tokens;
        kl_weighted += klf * static_cast<double>(pr.forget.tokens.size()) / total_tokens +
                       klb * static_cast<double>(pr.boundary.tokens.size()) / total_tokens;
    }
    surr_group /= static_cast<double>(grp.rollouts.size());
    const double want_loss = -(surr_group - cfg.kl_coef * kl_weighted);
    CHECK(std::abs(g.value(loss)(0, 0) - want_loss) <= 1e-10);
    CHECK(std::abs(kl_value - kl_weighted) <= 1e-12);

    // Shifting every reward by a constant leaves advantages, and hence the
    // loss, unchanged.
    std::vector<double> shifted = totals;
    for (double& t : shifted) t += 7.5;
    RolloutGroup grp2 = grp;
    grp2.advantages = group_advantages(shifted, false);
    Graph g2;
    ParamNodes pn2 = register_params(g2, moved);
    NodeId loss2 = grpo_loss(g2, moved.cfg, pn2, grp2, fx.policy, cfg, nullptr);
    CHECK(std::abs(g.value(loss)(0, 0) - g2.value(loss2)(0, 0)) <= 1e-10);
}

TEST_CASE("kl diagnostic agrees with the graph node and detects drift") {
    Rng rng(12);
    const Matrix a = Matrix::gaussian(3, 8, rng);
    const Matrix b = Matrix::gaussian(3, 8, rng);
    CHECK(kl_per_token(a, a) == 0.0);
    const double d = kl_per_token(a, b);
    CHECK(d > 0.0);
    Graph g;
    NodeId leaf = g.leaf(a);
    CHECK(g.value(g.kl_policy_ref_mean(leaf, b))(0, 0) == d);
    Matrix c = a;
    CHECK_THROWS_AS(kl_per_token(a, Matrix(2, 8)), DimError);
}

TEST_CASE("huge kl coefficient anchors the policy to the reference") {
    const Fixture& fx = fixture();
    GrpoConfig cfg = small_cfg();
    cfg.steps = 6;
    cfg.kl_coef = 1e6;
    cfg.learning_rate = 1e-3;
    const GrpoResult res =
        train_grpo(fx.policy, fx.corpus.split_view(Split::Forget), fx.corpus.split_view(Split::Boundary), cfg,
                   RefusalPatterns::defaults(), {});
    REQUIRE(res.log.size() == 6);
    for (const GrpoLogRow& row : res.log) CHECK(row.kl < 1e-2);
}

TEST_CASE("training is bit-deterministic and logs every step") {
    const Fixture& fx = fixture();
    GrpoConfig cfg = small_cfg();
    cfg.steps = 5;
    cfg.snapshot_every = 2;
    const std::vector<const Example*> forget = fx.corpus.split_view(Split::Forget);
    const std::vector<const Example*> boundary = fx.corpus.split_view(Split::Boundary);
    const std::vector<const Example*> retain = {fx.corpus.split_view(Split::Retain).at(0),
                                                fx.corpus.split_view(Split::Retain).at(1)};
    const GrpoResult a = train_grpo(fx.policy, forget, boundary, cfg, RefusalPatterns::defaults(), retain);
    const GrpoResult b = train_grpo(fx.policy, forget, boundary, cfg, RefusalPatterns::defaults(), retain);

    REQUIRE(a.log.size() == 5);
    for (size_t i = 0; i < a.log.size(); ++i) {
        CHECK(a.log[i].step == static_cast<int>(i));
        CHECK(a.log[i].mean_reward == b.log[i].mean_reward);
        CHECK(a.log[i].mean_advantage_abs == b.log[i].mean_advantage_abs);
        CHECK(a.log[i].kl == b.log[i].kl);
        CHECK(a.log[i].forget_rouge == b.log[i].forget_rouge);
        CHECK(a.log[i].retain_rouge == b.log[i].retain_rouge);
        CHECK(a.log[i].mean_advantage_abs >= 0.0);
        CHECK(a.log[i].mean_reward >= 0.0);
        CHECK(a.log[i].mean_reward <= 2.0);
        CHECK(a.log[i].forget_rouge >= 0.0);
        CHECK(a.log[i].forget_rouge <= 1.0);
    }
    double diff = 0.0;
    for_each_tensor(a.model, [&](const std::string& name, const Matrix& m) {
        const Matrix* other = nullptr;
        for_each_tensor(b.model, [&](const std::string& n2, const Matrix& m2) {
            if (n2 == name) other = &m2;
        });
        REQUIRE(other != nullptr);
        diff = std::max(diff, max_abs(sub(m, *other)));
    });
    CHECK(diff == 0.0);

    // A uniform-reward group carries no signal and must leave the policy
    // untouched; any nonzero advantage must move it (Adam steps are lr-sized
    // regardless of gradient scale).
    double moved = 0.0;
    for_each_tensor(a.model, [&](const std::string& name, const Matrix& m) {
        const Matrix* orig = nullptr;
        for_each_tensor(fx.policy, [&](const std::string& n2, const Matrix& m2) {
            if (n2 == name) orig = &m2;
        });
        moved = std::max(moved, max_abs(sub(m, *orig)));
    });
    bool any_signal = false;
    for (const GrpoLogRow& row : a.log) any_signal = any_signal || row.mean_advantage_abs > 0.0;
    CHECK((moved > 0.0) == any_signal);

    CHECK_THROWS_AS(train_grpo(fx.policy, {}, boundary, cfg, RefusalPatterns::defaults(), {}), DimError);
    CHECK_THROWS_AS(train_grpo(fx.policy, forget, {}, cfg, RefusalPatterns::defaults(), {}), DimError);
}

TEST_CASE("mixed mode concatenates prompts and splits completions at the separator") {
    const Fixture& fx = fixture();
    GrpoConfig cfg = small_cfg();
    cfg.mixed_mode = true;
    RolloutGroup grp = sample_group(fx.policy, *fx.forget_row, *fx.boundary_row, cfg, 44);
    REQUIRE(grp.rollouts.size() == 4);
    for (const PairRollout& pr : grp.rollouts) {
        REQUIRE(!pr.combined.tokens.empty());
        CHECK(pr.combined.tokens.size() <= static_cast<size_t>(2 * cfg.max_new_tokens + 1));
        const auto sep = std::find(pr.combined.tokens.begin(), pr.combined.tokens.end(), vocab::kSep);
        if (sep != pr.combined.tokens.end()) {
            CHECK(pr.forget.tokens.size() + pr.boundary.tokens.size() + 1 == pr.combined.tokens.size());
        } else {
            CHECK(pr.forget.tokens == pr.combined.tokens);
            CHECK(pr.boundary.tokens.empty());
        }
        CHECK(std::find(pr.forget.tokens.begin(), pr.forget.tokens.end(), vocab::kSep) ==
              pr.forget.tokens.end());
    }

    score_group(grp, RefusalPatterns::defaults());
    std::vector<double> totals;
    for (const RewardRecord& r : grp.rewards) totals.push_back(r.total);
    grp.advantages = group_advantages(totals, true);

    Graph g;
    ParamNodes pn = register_params(g, fx.policy);
    NodeId kl = 0;
    NodeId loss = grpo_loss(g, fx.policy.cfg, pn, grp, fx.policy, cfg, &kl);
    CHECK(g.value(kl)(0, 0) == 0.0);
    CHECK(std::isfinite(g.value(loss)(0, 0)));
    CHECK_NOTHROW(g.backward(loss));

    GrpoConfig tc = cfg;
    tc.steps = 2;
    const GrpoResult r1 = train_grpo(fx.policy, fx.corpus.split_view(Split::Forget),
                                     fx.corpus.split_view(Split::Boundary), tc, RefusalPatterns::defaults(), {});
    const GrpoResult r2 = train_grpo(fx.policy, fx.corpus.split_view(Split::Forget),
                                     fx.corpus.split_view(Split::Boundary), tc, RefusalPatterns::defaults(), {});
    REQUIRE(r1.log.size() == 2);
    CHECK(r1.log[1].mean_reward == r2.log[1].mean_reward);
    CHECK(r1.log[1].kl == r2.log[1].kl);
}

TEST_CASE("loss input validation names the broken invariant") {
    const Fixture& fx = fixture();
    const GrpoConfig cfg = small_cfg();
    RolloutGroup grp = sample_group(fx.policy, *fx.forget_row, *fx.boundary_row, cfg, 2);
    score_group(grp, RefusalPatterns::defaults());
    // advantages never assigned
    Graph g;
    ParamNodes pn = register_params(g, fx.policy);
    CHECK_THROWS_AS(grpo_loss(g, fx.policy.cfg, pn, grp, fx.policy, cfg, nullptr), DimError);

    RolloutGroup empty;
    empty.forget_example = fx.forget_row;
    empty.boundary_example = fx.boundary_row;
    Graph g2;
    ParamNodes pn2 = register_params(g2, fx.policy);
    CHECK_THROWS_AS(grpo_loss(g2, fx.policy.cfg, pn2, empty, fx.policy, cfg, nullptr), DimError);
}
