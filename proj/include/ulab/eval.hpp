#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ulab/corpus.hpp"
#include "ulab/judge.hpp"
#include "ulab/matrix.hpp"
#include "ulab/model.hpp"

namespace ulab {

struct SplitMetrics {
    double cls_accuracy = 0.0;  // percent
    double gen_rouge_l = 0.0;
    double refusal_rate = 0.0;
    int n_rows = 0;
};

struct JudgeSummary {
    double contextual_refusal = 0.0;  // mean over judged rows
    double forgetfulness = 0.0;       // mean Leakage score; high means forgotten
    int judged_count = 0;
};

struct EvalMeta {
    std::string model_tag;
    uint64_t seed = 0;
    std::string corpus_hash;
    std::string timestamp;
};

struct EvalReport {
    SplitMetrics forget, test, retain, real, boundary;
    JudgeSummary judge;
    bool judged = false;
    EvalMeta meta;
};

enum class JudgeMode { Off, Local, Http };

uint64_t fnv1a64(const std::string& bytes);
std::string corpus_hash(const Corpus& corpus);

// Multiple-choice accuracy in percent; an empty row list is an error.
double eval_classification(const ModelParams& params, const std::vector<const Example*>& rows);

SplitMetrics eval_split(const ModelParams& params, const std::vector<const Example*>& rows);

// Full report over the five reporting splits. Judging covers the forget
// split's greedy completions; Http mode requires a client config.
EvalReport evaluate_model(const ModelParams& params, const Corpus& corpus, const std::string& model_tag,
                          uint64_t seed, JudgeMode mode = JudgeMode::Off,
                          const JudgeHttpConfig* http = nullptr);

void write_report(const EvalReport& report, const std::string& path);
EvalReport read_report(const std::string& path);

// All metric fields and identifying metadata, ignoring the timestamp.
bool metrics_equal(const EvalReport& a, const EvalReport& b);

// CSV of per-method unlearning/utility trade-offs against the vanilla model.
// Diff columns are vanilla-minus-method on the forget split, so bigger means
// more forgotten; the remaining columns are the method's own utility numbers.
std::string tradeoff_table(const EvalReport& vanilla,
                           const std::vector<std::pair<std::string, EvalReport>>& methods);

struct PcaProjection {
    std::vector<std::array<double, 2>> a, b;  // per-row coordinates of each set
    Matrix components;                        // 2 x d, rows are the principal axes
    double var1 = 0.0, var2 = 0.0;            // captured variances, var1 >= var2
    double separation = 0.0;                  // centroid distance / mean within-set spread
};

// Shared-center PCA of two activation sets via power iteration on the pooled
// covariance; no general eigensolver involved.
PcaProjection pca_project(const Matrix& set_a, const Matrix& set_b);

std::string pca_csv(const PcaProjection& proj, const std::string& label_a, const std::string& label_b);

// Captures last-prompt-token activations of both example sets at `layer`,
// projects them, and writes the scatter CSV.
PcaProjection dump_activations_pca(const ModelParams& params, const std::vector<const Example*>& set_a,
                                   const std::vector<const Example*>& set_b, int layer,
                                   const std::string& csv_path);

}  // namespace ulab
