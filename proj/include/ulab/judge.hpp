#pragma once

#include <string>

#include "ulab/corpus.hpp"
#include "ulab/rewards.hpp"

namespace ulab {

// Scores from a grading pass over one completion. Contextual_Refusal is 5
// for a full refusal of an answerable question and 0 when the reference fact
// is stated. Leakage is 5 when nothing of the reference survives in the
// completion and 0 when it is reproduced, so a high value means forgotten.
struct JudgeScores {
    double contextual_refusal = 0.0;
    double leakage = 0.0;
    std::string reason;
};

// Byte-stable grading prompt for a (question, reference, completion) triple.
std::string judge_format_prompt(const std::string& question, const std::string& reference,
                                const std::string& completion);

// The reply format the prompt asks for; also used by mock servers in tests.
std::string render_judge_reply(double contextual_refusal, double leakage, const std::string& reason);

// Strict parse of a three-line reply (Contextual_Refusal, Leakage, Reason) in
// any order. Unknown, duplicate, missing or out-of-range fields raise
// JudgeParseError naming the field; Reason is capped at 40 characters.
JudgeScores judge_parse(const std::string& reply);

// Deterministic rule-based grader used when no external judge is configured.
JudgeScores local_judge(const Tokens& completion, const Tokens& reference, const RefusalPatterns& patterns);
JudgeScores local_judge(const Tokens& completion, const Tokens& reference);

struct JudgeHttpConfig {
    std::string endpoint;  // full URL, e.g. http://127.0.0.1:8089/v1/chat/completions
    std::string api_key;
    std::string model = "judge-local";
    int max_retries = 3;
    int backoff_ms = 100;  // doubles per retry
    int timeout_ms = 2000;

    // Reads JUDGE_ENDPOINT, JUDGE_API_KEY and JUDGE_MODEL.
    static JudgeHttpConfig from_env();
};

// OpenAI-style chat completion request body.
std::string judge_request_body(const std::string& model, const std::string& prompt);

// Posts the prompt to an OpenAI-compatible endpoint and parses the reply.
// Missing endpoint or api_key raise ConfigError before any network activity.
// Transport failures and 5xx are retried with exponential backoff; a final
// non-2xx raises JudgeHttpError carrying the status and a body excerpt.
JudgeScores http_judge(const JudgeHttpConfig& cfg, const std::string& prompt);

// Token sequence rendered as the space-joined vocabulary words.
std::string tokens_to_text(const Tokens& tokens);

}  // namespace ulab
