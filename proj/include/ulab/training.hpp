#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ulab/corpus.hpp"
#include "ulab/model.hpp"
#include "ulab/optim.hpp"

namespace ulab {

// Greedy-generation and classification quality over a set of rows. Used as
// the memorization stopping rule during supervised training and reused by the
// evaluation harness.
struct GenEvalStats {
    double mean_rouge = 0.0;
    double accuracy = 0.0;      // fraction of rows whose true option scores highest
    double refusal_rate = 0.0;  // fraction of greedy completions containing the refusal phrase
    int n_rows = 0;
};

GenEvalStats generation_stats(const ModelParams& params, const std::vector<const Example*>& rows);

// Index of the option equal to the reference answer (ignoring framing);
// DimError when absent, ambiguity is impossible by corpus construction.
int true_option_index(const Example& e);

struct TrainConfig {
    double lr = 2e-3;
    int batch_size = 16;
    int max_epochs = 300;  // memorization usually early-stops near 90
    int eval_every = 5;    // epochs between memorization checks
    int eval_rows = 160;   // fixed subsample size for the cheap check
    double target_rouge = 0.95;
    double target_accuracy = 0.95;
    bool require_memorization = false;  // PrereqError when targets stay unmet
    uint64_t seed = 0;
};

struct TrainStats {
    int epochs = 0;
    double final_loss = 0.0;
    GenEvalStats train_eval;  // measured on the full training set at the end
};

// Supervised next-token training on the forget, retain, target, and real
// splits until the model memorizes the corpus (or the epoch budget runs out).
TrainStats train_vanilla(ModelParams& params, const Corpus& corpus, const TrainConfig& cfg);

// Token-mean NLL of the reference answers, no gradients. Diagnostic.
double corpus_nll(const ModelParams& params, const std::vector<const Example*>& rows);

struct UnlearnConfig {
    std::string method = "ga";  // ga | ga_diff | kl_min | npo | mmu
    double lr = 5e-5;
    int steps = 30;
    int batch_forget = 8;
    int batch_retain = 8;
    double retain_coeff = 1.0;   // weight on the retain-side term
    double npo_beta = 0.1;
    double mask_fraction = 1.0;  // fraction of entries each matrix may update (mmu)
    uint64_t seed = 0;
};

// Pre-update measurements of one unlearning step. forget_ll / retain_ll are
// token-mean log-likelihoods of that step's batches; aux_term carries the
// method-specific extra (npo loss, kl_min retain KL), 0 elsewhere.
struct UnlearnLogRow {
    int step = 0;
    double forget_ll = 0.0;
    double retain_ll = 0.0;  // 0 when the method has no retain term
    double aux_term = 0.0;
};

struct UnlearnStats {
    int steps = 0;
    double last_forget_loss = 0.0;
    double last_retain_loss = 0.0;  // 0 when the method has no retain term
    std::vector<UnlearnLogRow> log;
};

// All methods share one update rule: the forget-side gradient, entrywise
// gated by a keep-or-zero mask, plus retain_coeff times the retain-side
// gradient. A zero coefficient skips the retain computation entirely, and the
// mask defaults to all-keep, so e.g. ga and ga_diff(retain_coeff=0) produce
// bitwise identical trajectories.
UnlearnStats unlearn_baseline(ModelParams& params, const Corpus& corpus, const UnlearnConfig& cfg);

// Keep-or-zero masks, one per tensor in for_each_tensor order: the top
// ceil(fraction * numel) entries of each matrix by accumulated absolute
// forget-NLL gradient over one pass of the forget split.
std::vector<Matrix> saliency_masks(const ModelParams& params, const std::vector<const Example*>& forget_rows,
                                   double fraction, int batch_size);

}  // namespace ulab
