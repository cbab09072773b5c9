#include "ulab/rewards.hpp"

#include <algorithm>
#include <vector>

#include "ulab/errors.hpp"

namespace ulab {

bool exact_match(const Tokens& a, const Tokens& b) { return strip_structural(a) == strip_structural(b); }

RefusalPatterns RefusalPatterns::defaults() {
    RefusalPatterns p;
    p.patterns.push_back(vocab::refusal_sequence());
    // CANNOT BE INFERRED
    p.patterns.push_back({vocab::kRefusalBase + 1, vocab::kRefusalBase + 2, vocab::kRefusalBase + 3});
    return p;
}

void RefusalPatterns::validate() const {
    if (patterns.empty()) throw ConfigError("RefusalPatterns: pattern list is empty");
    for (const Tokens& p : patterns) {
        if (p.empty()) throw ConfigError("RefusalPatterns: empty pattern");
    }
}

bool is_refusal(const Tokens& tokens, const RefusalPatterns& p) {
    p.validate();
    const Tokens t = strip_structural(tokens);
    for (const Tokens& phrase : p.patterns) {
        if (t.size() < phrase.size()) continue;
        for (size_t start = 0; start + phrase.size() <= t.size(); ++start) {
            if (std::equal(phrase.begin(), phrase.end(), t.begin() + start)) return true;
        }
    }
    return false;
}

bool is_refusal(const Tokens& tokens) { return is_refusal(tokens, RefusalPatterns::defaults()); }

int lcs_length(const Tokens& a, const Tokens& b) {
    const size_t n = a.size(), m = b.size();
    if (n == 0 || m == 0) return 0;
    std::vector<int> prev(m + 1, 0), cur(m + 1, 0);
    for (size_t i = 1; i <= n; ++i) {
        for (size_t j = 1; j <= m; ++j) {
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[m];
}

double rouge_l(const Tokens& candidate, const Tokens& reference) {
    const Tokens c = strip_structural(candidate);
    const Tokens r = strip_structural(reference);
    if (c.empty() || r.empty()) return 0.0;
    const int l = lcs_length(c, r);
    if (l == 0) return 0.0;
    const double p = static_cast<double>(l) / c.size();
    const double q = static_cast<double>(l) / r.size();
    return 2.0 * p * q / (p + q);
}

double forget_reward(const Tokens& completion, const Tokens& reference, const RefusalPatterns& p) {
    if (exact_match(completion, reference)) return 0.0;
    if (is_refusal(completion, p)) return 1.0;
    const double r = rouge_l(completion, reference);
    return r > 0.0 && r < 0.4 ? 0.5 : 0.1;
}

double boundary_reward(const Tokens& completion, const Tokens& reference, const RefusalPatterns& p) {
    if (exact_match(completion, reference)) return 1.0;
    if (is_refusal(completion, p)) return 0.0;
    return rouge_l(completion, reference) > 0.6 ? 0.5 : 0.1;
}

double forget_reward(const Tokens& completion, const Tokens& reference) {
    return forget_reward(completion, reference, RefusalPatterns::defaults());
}

double boundary_reward(const Tokens& completion, const Tokens& reference) {
    return boundary_reward(completion, reference, RefusalPatterns::defaults());
}

RewardRecord paired_reward(const Tokens& forget_completion, const Tokens& forget_reference,
                           const Tokens& boundary_completion, const Tokens& boundary_reference,
                           const RefusalPatterns& p) {
    RewardRecord rec;
    rec.forget_matched = exact_match(forget_completion, forget_reference);
    rec.forget_refused = is_refusal(forget_completion, p);
    rec.boundary_matched = exact_match(boundary_completion, boundary_reference);
    rec.boundary_refused = is_refusal(boundary_completion, p);
    rec.rouge_forget = rouge_l(forget_completion, forget_reference);
    rec.rouge_boundary = rouge_l(boundary_completion, boundary_reference);
    rec.r_forget = forget_reward(forget_completion, forget_reference, p);
    rec.r_boundary = boundary_reward(boundary_completion, boundary_reference, p);
    rec.total = rec.r_forget + rec.r_boundary;
    return rec;
}

RewardRecord paired_reward(const Tokens& forget_completion, const Tokens& forget_reference,
                           const Tokens& boundary_completion, const Tokens& boundary_reference) {
    return paired_reward(forget_completion, forget_reference, boundary_completion, boundary_reference,
                         RefusalPatterns::defaults());
}

}  // namespace ulab
