#pragma once

#include "ulab/corpus.hpp"

namespace ulab {

// Token-sequence comparisons for reward scoring and evaluation. All of these
// strip PAD/BOS/EOS before comparing, so prompts and completions can be passed
// with or without structural framing.

bool exact_match(const Tokens& a, const Tokens& b);

// Configurable refusal detection: a completion refuses when any pattern
// occurs as a contiguous run. Defaults to the canonical phrase plus its
// three-token core, so clipped generations still count.
struct RefusalPatterns {
    std::vector<Tokens> patterns;

    static RefusalPatterns defaults();
    void validate() const;
};

bool is_refusal(const Tokens& tokens, const RefusalPatterns& p);
bool is_refusal(const Tokens& tokens);  // default patterns

int lcs_length(const Tokens& a, const Tokens& b);

// Longest-common-subsequence F-measure in [0,1]. Zero when either side is
// empty after stripping or when nothing is shared.
double rouge_l(const Tokens& candidate, const Tokens& reference);

// Verifiable per-side rewards. The first matching rule wins.
//   forget side:   match 0.0 | refusal 1.0 | rouge in (0,0.4) 0.5 | else 0.1
//   boundary side: match 1.0 | refusal 0.0 | rouge > 0.6      0.5 | else 0.1
double forget_reward(const Tokens& completion, const Tokens& reference, const RefusalPatterns& p);
double boundary_reward(const Tokens& completion, const Tokens& reference, const RefusalPatterns& p);
double forget_reward(const Tokens& completion, const Tokens& reference);
double boundary_reward(const Tokens& completion, const Tokens& reference);

// One paired rollout scored on both sides, with diagnostics.
struct RewardRecord {
    double r_forget = 0.0;
    double r_boundary = 0.0;
    double total = 0.0;  // r_forget + r_boundary, in [0,2]
    double rouge_forget = 0.0;
    double rouge_boundary = 0.0;
    bool forget_matched = false;
    bool forget_refused = false;
    bool boundary_matched = false;
    bool boundary_refused = false;
};

RewardRecord paired_reward(const Tokens& forget_completion, const Tokens& forget_reference,
                           const Tokens& boundary_completion, const Tokens& boundary_reference,
                           const RefusalPatterns& p);
RewardRecord paired_reward(const Tokens& forget_completion, const Tokens& forget_reference,
                           const Tokens& boundary_completion, const Tokens& boundary_reference);

}  // namespace ulab
