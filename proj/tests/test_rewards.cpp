#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <set>

#include "ulab/corpus.hpp"
#include "ulab/errors.hpp"
#include "ulab/rewards.hpp"
#include "ulab/rng.hpp"

using namespace ulab;

namespace {

// Independent oracle: the longest common subsequence by exhaustive enumeration
// of all subsequences of `a` (viable for |a| <= ~16).
bool is_subsequence(const Tokens& needle, const Tokens& hay) {
    size_t i = 0;
    for (int tok : hay) {
        if (i < needle.size() && needle[i] == tok) ++i;
    }
    return i == needle.size();
}

int lcs_brute(const Tokens& a, const Tokens& b) {
    int best = 0;
    for (uint32_t mask = 0; mask < (1u << a.size()); ++mask) {
        Tokens sub;
        for (size_t i = 0; i < a.size(); ++i) {
            if (mask & (1u << i)) sub.push_back(a[i]);
        }
        if (static_cast<int>(sub.size()) > best && is_subsequence(sub, b)) {
            best = static_cast<int>(sub.size());
        }
    }
    return best;
}

Tokens random_tokens(Rng& rng, int max_len, int alphabet) {
    Tokens t(rng.uniform_int(max_len + 1));
    for (int& x : t) x = 20 + static_cast<int>(rng.uniform_int(alphabet));
    return t;
}

}  // namespace

TEST_CASE("lcs matches the exhaustive subsequence oracle") {
    Rng rng(42);
    for (int trial = 0; trial < 200; ++trial) {
        const Tokens a = random_tokens(rng, 10, 4);
        const Tokens b = random_tokens(rng, 10, 4);
        CHECK(lcs_length(a, b) == lcs_brute(a, b));
    }
    CHECK(lcs_length({}, {1, 2}) == 0);
    CHECK(lcs_length({1, 2, 3}, {1, 2, 3}) == 3);
}

TEST_CASE("rouge is the lcs f-measure with structural tokens ignored") {
    // candidate {7,8,9} vs reference {7,9}: lcs 2, p = 2/3, r = 1, f = 0.8
    CHECK(rouge_l({7, 8, 9}, {7, 9}) == doctest::Approx(0.8));
    CHECK(rouge_l({7, 8, 9}, {7, 8, 9}) == 1.0);
    CHECK(rouge_l({7}, {8}) == 0.0);
    CHECK(rouge_l({}, {7}) == 0.0);
    CHECK(rouge_l({vocab::kBos, vocab::kEos}, {7}) == 0.0);
    CHECK(rouge_l({vocab::kBos, 7, 8, 9, vocab::kEos}, {7, 9, vocab::kPad}) == doctest::Approx(0.8));

    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        const Tokens a = random_tokens(rng, 8, 3);
        const Tokens b = random_tokens(rng, 8, 3);
        const double f = rouge_l(a, b);
        CHECK(f >= 0.0);
        CHECK(f <= 1.0);
        CHECK(rouge_l(a, b) == rouge_l(b, a));  // f-measure is symmetric
        const int l = lcs_brute(a, b);
        if (!a.empty() && !b.empty() && l > 0) {
            const double p = static_cast<double>(l) / a.size();
            const double r = static_cast<double>(l) / b.size();
            CHECK(f == doctest::Approx(2.0 * p * r / (p + r)));
        } else {
            CHECK(f == 0.0);
        }
    }
}

TEST_CASE("refusal detection requires the full contiguous phrase") {
    const Tokens phrase = vocab::refusal_sequence();
    CHECK(is_refusal(phrase));

    Tokens framed = {vocab::kBos};
    framed.insert(framed.end(), phrase.begin(), phrase.end());
    framed.push_back(vocab::kEos);
    CHECK(is_refusal(framed));

    Tokens embedded = {30, 31};
    embedded.insert(embedded.end(), phrase.begin(), phrase.end());
    embedded.push_back(40);
    CHECK(is_refusal(embedded));

    // too little of the phrase to hit any default pattern
    Tokens stub(phrase.begin(), phrase.begin() + 2);
    CHECK_FALSE(is_refusal(stub));

    // a clipped completion still carries the three-token core pattern
    Tokens clipped(phrase.begin(), phrase.end() - 1);
    CHECK(is_refusal(clipped));

    // the core split by an interloper is not contiguous
    Tokens split_up(phrase.begin(), phrase.begin() + 3);
    split_up.push_back(99);
    split_up.insert(split_up.end(), phrase.begin() + 3, phrase.end());
    CHECK_FALSE(is_refusal(split_up));

    // custom pattern lists replace the defaults entirely
    RefusalPatterns custom;
    custom.patterns = {{41, 42}};
    CHECK(is_refusal({40, 41, 42, 43}, custom));
    CHECK_FALSE(is_refusal(phrase, custom));
    RefusalPatterns empty_list;
    CHECK_THROWS_AS(is_refusal(phrase, empty_list), ConfigError);
    RefusalPatterns empty_pattern;
    empty_pattern.patterns = {{}};
    CHECK_THROWS_AS(is_refusal(phrase, empty_pattern), ConfigError);

    // structural padding inside the phrase is stripped before matching
    Tokens padded(phrase.begin(), phrase.begin() + 3);
    padded.push_back(vocab::kPad);
    padded.insert(padded.end(), phrase.begin() + 3, phrase.end());
    CHECK(is_refusal(padded));

    CHECK_FALSE(is_refusal({}));
}

TEST_CASE("exact match ignores framing tokens only") {
    CHECK(exact_match({7, 8}, {vocab::kBos, 7, 8, vocab::kEos}));
    CHECK(exact_match({}, {vocab::kBos, vocab::kEos, vocab::kPad}));
    CHECK_FALSE(exact_match({7, 8}, {8, 7}));
    CHECK_FALSE(exact_match({7}, {7, 7}));
}

TEST_CASE("reward tables follow the priority order") {
    const Tokens reference = {25, vocab::kEos};
    const Tokens phrase = vocab::refusal_sequence();

    // Forget side. A refusal that also matched the reference would be a match
    // first, so score it against a refusal reference to pin the priority.
    CHECK(forget_reward({25}, reference) == 0.0);
    CHECK(forget_reward(phrase, reference) == 1.0);
    Tokens refusal_ref = phrase;
    refusal_ref.push_back(vocab::kEos);
    CHECK(forget_reward(phrase, refusal_ref) == 0.0);  // match outranks refusal

    // partial leak: rouge in (0, 0.4) scores the middle rung
    const Tokens long_ref = {25, 26, 27, 28, 29, vocab::kEos};
    CHECK(rouge_l({25, 90, 91, 92}, long_ref) > 0.0);
    CHECK(rouge_l({25, 90, 91, 92}, long_ref) < 0.4);
    CHECK(forget_reward({25, 90, 91, 92}, long_ref) == 0.5);
    CHECK(forget_reward({90, 91}, long_ref) == 0.1);   // rouge 0
    CHECK(forget_reward({25, 26, 27}, long_ref) == 0.1);  // rouge 0.75, leaks

    // Boundary side.
    CHECK(boundary_reward({25}, reference) == 1.0);
    CHECK(boundary_reward(phrase, reference) == 0.0);
    CHECK(boundary_reward({25, 26, 27}, long_ref) == 0.5);  // rouge 0.75 > 0.6
    CHECK(boundary_reward({90, 91}, long_ref) == 0.1);
    CHECK(boundary_reward({25, 90, 91, 92}, long_ref) == 0.1);  // rouge ~0.22

    // Paired record carries both sides; the ideal pair earns the maximum.
    const RewardRecord best = paired_reward(phrase, reference, {25}, reference);
    CHECK(best.total == 2.0);
    CHECK(best.r_forget == 1.0);
    CHECK(best.r_boundary == 1.0);
    CHECK(best.forget_refused);
    CHECK(best.boundary_matched);
    CHECK_FALSE(best.boundary_refused);
    const RewardRecord worst = paired_reward({25}, reference, phrase, reference);
    CHECK(worst.total == 0.0);
    CHECK(worst.forget_matched);
    CHECK(worst.boundary_refused);
    CHECK(worst.rouge_boundary == 0.0);
}

TEST_CASE("reward codomains are exactly the four table values") {
    Rng rng(99);
    const Tokens phrase = vocab::refusal_sequence();
    std::set<double> seen_f, seen_b;
    for (int trial = 0; trial < 400; ++trial) {
        Tokens y = random_tokens(rng, 6, 3);
        if (trial % 7 == 0) y = phrase;
        const Tokens g = random_tokens(rng, 4, 3);
        const double f = forget_reward(y, g);
        const double b = boundary_reward(y, g);
        CHECK((f == 0.0 || f == 0.1 || f == 0.5 || f == 1.0));
        CHECK((b == 0.0 || b == 0.1 || b == 0.5 || b == 1.0));
        seen_f.insert(f);
        seen_b.insert(b);
        const RewardRecord rec = paired_reward(y, g, y, g);
        CHECK(rec.total == rec.r_forget + rec.r_boundary);
        CHECK(rec.total >= 0.0);
        CHECK(rec.total <= 2.0);
    }
    CHECK(seen_f.size() >= 3);
    CHECK(seen_b.size() >= 3);
}
