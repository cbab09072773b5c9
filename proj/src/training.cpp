#include "ulab/training.hpp"

#include <algorithm>
#include <cmath>

#include "ulab/errors.hpp"
#include "ulab/rewards.hpp"
#include "ulab/rng.hpp"

namespace ulab {

namespace {

constexpr int kMaxAnswerTokens = 10;

std::vector<const Example*> vanilla_rows(const Corpus& c) {
    std::vector<const Example*> rows;
    for (const Example& e : c.examples) {
        if (e.split == Split::Forget || e.split == Split::Retain || e.split == Split::Target ||
            e.split == Split::Real) {
            rows.push_back(&e);
        }
    }
    return rows;
}

// Token-mean of sign * log p(answer | question) over the rows, with gradients
// for every parameter in slot order. sign=-1 descends on NLL, sign=+1 ascends.
double signed_logp_mean_and_grads(const ModelParams& params, const std::vector<const Example*>& rows,
                                  double sign, std::vector<Matrix>& grads) {
    if (rows.empty()) throw DimError("signed_logp_mean_and_grads: empty batch");
    Graph g;
    ParamNodes pn = register_params(g, params);
    std::vector<NodeId> cols;
    int total_tokens = 0;
    for (const Example* e : rows) {
        cols.push_back(sequence_log_prob_graph(g, params.cfg, pn, {e->image_features}, e->question_tokens,
                                               e->answer_tokens));
        total_tokens += static_cast<int>(e->answer_tokens.size());
    }
    const NodeId loss = g.scale(g.sum_all(g.vstack(cols)), sign / total_tokens);
    g.backward(loss);
    grads.clear();
    for (NodeId id : ordered_param_nodes(pn)) grads.push_back(g.grad(id));
    return g.value(loss)(0, 0);
}

// Sequence-level preference loss against a frozen reference:
//   (2/beta) * mean_rows softplus(beta * (logp_theta(row) - logp_ref(row)))
double npo_loss_and_grads(const ModelParams& params, const ModelParams& ref,
                          const std::vector<const Example*>& rows, double beta, std::vector<Matrix>& grads) {
    if (rows.empty()) throw DimError("npo_loss_and_grads: empty batch");
    Graph g;
    ParamNodes pn = register_params(g, params);
    std::vector<NodeId> seq_sums;
    Matrix ref_sums(static_cast<int>(rows.size()), 1);
    for (size_t i = 0; i < rows.size(); ++i) {
        const Example* e = rows[i];
        const NodeId lp = sequence_log_prob_graph(g, params.cfg, pn, {e->image_features}, e->question_tokens,
                                                  e->answer_tokens);
        seq_sums.push_back(g.sum_all(lp));
        ref_sums(static_cast<int>(i), 0) =
            -sequence_log_prob(ref, {e->image_features}, e->question_tokens, e->answer_tokens);
    }
    const NodeId margins = g.scale(g.add_const(g.vstack(seq_sums), ref_sums), beta);
    const NodeId loss = g.scale(g.mean_all(g.softplus(margins)), 2.0 / beta);
    g.backward(loss);
    grads.clear();
    for (NodeId id : ordered_param_nodes(pn)) grads.push_back(g.grad(id));
    return g.value(loss)(0, 0);
}

// Mean over rows of KL(reference || policy) at the answer positions.
double retain_kl_and_grads(const ModelParams& params, const ModelParams& ref,
                           const std::vector<const Example*>& rows, std::vector<Matrix>& grads) {
    if (rows.empty()) throw DimError("retain_kl_and_grads: empty batch");
    Graph g;
    ParamNodes pn = register_params(g, params);
    std::vector<NodeId> kls;
    for (const Example* e : rows) {
        Tokens full = e->question_tokens;
        full.insert(full.end(), e->answer_tokens.begin(), e->answer_tokens.end());
        const int prompt_len = static_cast<int>(e->question_tokens.size());
        const int n_ans = static_cast<int>(e->answer_tokens.size());
        std::vector<int> positions(n_ans);
        for (int t = 0; t < n_ans; ++t) positions[t] = prompt_len - 1 + t;

        const NodeId logits = forward_logits_graph(g, params.cfg, pn, {e->image_features}, full);
        const NodeId answer_logits = g.gather_rows(logits, positions);

        const Matrix ref_all = forward_logits(ref, {e->image_features}, full);
        Matrix ref_rows(n_ans, ref_all.cols);
        for (int t = 0; t < n_ans; ++t) {
            for (int c = 0; c < ref_all.cols; ++c) ref_rows(t, c) = ref_all(positions[t], c);
        }
        kls.push_back(g.kl_ref_policy_mean(answer_logits, ref_rows));
    }
    const NodeId loss = g.mean_all(g.vstack(kls));
    g.backward(loss);
    grads.clear();
    for (NodeId id : ordered_param_nodes(pn)) grads.push_back(g.grad(id));
    return g.value(loss)(0, 0);
}

// Deterministic round-robin batches: a reshuffled cycle over the row indices,
// advanced batch_size at a time.
class BatchCycle {
public:
    BatchCycle(size_t n, uint64_t seed, uint64_t stream) : n_(n), seed_(seed), stream_(stream) { reshuffle(); }

    std::vector<size_t> next(size_t batch_size) {
        std::vector<size_t> out;
        while (out.size() < std::min(batch_size, n_)) {
            if (pos_ == order_.size()) {
                ++cycle_;
                reshuffle();
            }
            out.push_back(order_[pos_++]);
        }
        return out;
    }

private:
    void reshuffle() {
        order_.resize(n_);
        for (size_t i = 0; i < n_; ++i) order_[i] = i;
        Rng rng(derive_seed(seed_, stream_, cycle_));
        rng.shuffle(order_);
        pos_ = 0;
    }

    size_t n_, pos_ = 0;
    uint64_t seed_, stream_, cycle_ = 0;
    std::vector<size_t> order_;
};

std::vector<const Example*> pick(const std::vector<const Example*>& rows, const std::vector<size_t>& idx) {
    std::vector<const Example*> out;
    for (size_t i : idx) out.push_back(rows[i]);
    return out;
}

}  // namespace

int true_option_index(const Example& e) {
    Tokens truth = strip_structural(e.answer_tokens);
    for (size_t i = 0; i < e.options.size(); ++i) {
        if (strip_structural(e.options[i]) == truth) return static_cast<int>(i);
    }
    throw DimError("true_option_index: reference answer is not among the options");
}

GenEvalStats generation_stats(const ModelParams& params, const std::vector<const Example*>& rows) {
    GenEvalStats s;
    s.n_rows = static_cast<int>(rows.size());
    if (rows.empty()) return s;
    for (const Example* e : rows) {
        const Tokens greedy =
            greedy_decode(params, {e->image_features}, e->question_tokens, kMaxAnswerTokens, vocab::kEos);
        s.mean_rouge += rouge_l(greedy, e->answer_tokens);
        if (is_refusal(greedy)) s.refusal_rate += 1.0;
        const ClassifyResult cls = classify_options(params, {e->image_features}, e->question_tokens, e->options);
        if (cls.choice == true_option_index(*e)) s.accuracy += 1.0;
    }
    s.mean_rouge /= s.n_rows;
    s.accuracy /= s.n_rows;
    s.refusal_rate /= s.n_rows;
    return s;
}

double corpus_nll(const ModelParams& params, const std::vector<const Example*>& rows) {
    if (rows.empty()) return 0.0;
    double sum = 0.0;
    int total_tokens = 0;
    for (const Example* e : rows) {
        sum += sequence_log_prob(params, {e->image_features}, e->question_tokens, e->answer_tokens);
        total_tokens += static_cast<int>(e->answer_tokens.size());
    }
    return -sum / total_tokens;
}

TrainStats train_vanilla(ModelParams& params, const Corpus& corpus, const TrainConfig& cfg) {
    if (cfg.batch_size < 1 || cfg.max_epochs < 1 || cfg.eval_every < 1 || cfg.eval_rows < 1) {
        throw ConfigError("train_vanilla: counts must be positive");
    }
    const std::vector<const Example*> rows = vanilla_rows(corpus);
    if (rows.empty()) throw PrereqError("train_vanilla: corpus has no training rows");

    // fixed subsample for the cheap periodic memorization check
    std::vector<size_t> eval_idx(rows.size());
    for (size_t i = 0; i < eval_idx.size(); ++i) eval_idx[i] = i;
    Rng eval_rng(derive_seed(cfg.seed, 0x4556414cull));  // "EVAL"
    eval_rng.shuffle(eval_idx);
    eval_idx.resize(std::min<size_t>(eval_idx.size(), static_cast<size_t>(cfg.eval_rows)));
    const std::vector<const Example*> eval_rows = pick(rows, eval_idx);

    Adam opt(AdamConfig{.lr = cfg.lr});
    TrainStats stats;
    std::vector<Matrix> grads;
    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        std::vector<size_t> order(rows.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng rng(derive_seed(cfg.seed, 0x45504f4348ull, static_cast<uint64_t>(epoch)));  // "EPOCH"
        rng.shuffle(order);
        for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const size_t end = std::min(order.size(), start + cfg.batch_size);
            std::vector<size_t> idx(order.begin() + start, order.begin() + end);
            stats.final_loss = signed_logp_mean_and_grads(params, pick(rows, idx), -1.0, grads);
            opt.step(params, grads);
        }
        stats.epochs = epoch + 1;
        if ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.max_epochs) {
            const GenEvalStats quick = generation_stats(params, eval_rows);
            if (quick.mean_rouge >= cfg.target_rouge && quick.accuracy >= cfg.target_accuracy) {
                stats.train_eval = generation_stats(params, rows);
                if (stats.train_eval.mean_rouge >= cfg.target_rouge &&
                    stats.train_eval.accuracy >= cfg.target_accuracy) {
                    return stats;
                }
            }
        }
    }
    stats.train_eval = generation_stats(params, rows);
    if (cfg.require_memorization && (stats.train_eval.mean_rouge < cfg.target_rouge ||
                                     stats.train_eval.accuracy < cfg.target_accuracy)) {
        throw PrereqError("train_vanilla: memorization targets unmet after " + std::to_string(cfg.max_epochs) +
                          " epochs (rouge " + std::to_string(stats.train_eval.mean_rouge) + ", accuracy " +
                          std::to_string(stats.train_eval.accuracy) + ")");
    }
    return stats;
}

std::vector<Matrix> saliency_masks(const ModelParams& params, const std::vector<const Example*>& forget_rows,
                                   double fraction, int batch_size) {
    if (fraction <= 0.0 || fraction > 1.0) throw ConfigError("saliency_masks: fraction must be in (0,1]");
    if (forget_rows.empty()) throw DimError("saliency_masks: empty forget set");
    std::vector<Matrix> acc;
    std::vector<Matrix> grads;
    for (size_t start = 0; start < forget_rows.size(); start += batch_size) {
        const size_t end = std::min(forget_rows.size(), start + batch_size);
        std::vector<const Example*> batch(forget_rows.begin() + start, forget_rows.begin() + end);
        signed_logp_mean_and_grads(params, batch, -1.0, grads);
        if (acc.empty()) {
            for (const Matrix& grad : grads) acc.push_back(Matrix::zeros(grad.rows, grad.cols));
        }
        for (size_t i = 0; i < grads.size(); ++i) {
            for (size_t k = 0; k < grads[i].data.size(); ++k) acc[i].data[k] += std::fabs(grads[i].data[k]);
        }
    }
    std::vector<Matrix> masks;
    for (Matrix& saliency : acc) {
        const size_t numel = saliency.data.size();
        const size_t keep = std::min(numel, static_cast<size_t>(std::ceil(fraction * numel)));
        std::vector<size_t> idx(numel);
        for (size_t k = 0; k < numel; ++k) idx[k] = k;
        std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
            if (saliency.data[a] != saliency.data[b]) return saliency.data[a] > saliency.data[b];
            return a < b;
        });
        Matrix mask = Matrix::zeros(saliency.rows, saliency.cols);
        for (size_t k = 0; k < keep; ++k) mask.data[idx[k]] = 1.0;
        masks.push_back(std::move(mask));
    }
    return masks;
}

UnlearnStats unlearn_baseline(ModelParams& params, const Corpus& corpus, const UnlearnConfig& cfg) {
    const bool known = cfg.method == "ga" || cfg.method == "ga_diff" || cfg.method == "kl_min" ||
                       cfg.method == "npo" || cfg.method == "mmu";
    if (!known) throw ConfigError("unlearn_baseline: unknown method '" + cfg.method + "'");
    if (cfg.steps < 1 || cfg.batch_forget < 1 || cfg.batch_retain < 1) {
        throw ConfigError("unlearn_baseline: counts must be positive");
    }
    if (cfg.retain_coeff < 0.0) throw ConfigError("unlearn_baseline: retain_coeff must be non-negative");

    const std::vector<const Example*> forget_rows = corpus.split_view(Split::Forget);
    const std::vector<const Example*> retain_rows = corpus.split_view(Split::Retain);
    if (forget_rows.empty()) throw PrereqError("unlearn_baseline: corpus has no forget rows");

    // ga behaves as the shared rule with no retain term and an all-keep mask
    const double coeff = cfg.method == "ga" ? 0.0 : cfg.retain_coeff;
    const bool needs_retain = coeff != 0.0;
    if (needs_retain && retain_rows.empty()) throw PrereqError("unlearn_baseline: corpus has no retain rows");
    const bool needs_ref = cfg.method == "npo" || cfg.method == "kl_min";
    const ModelParams ref = needs_ref ? params : ModelParams{};

    std::vector<Matrix> masks;
    if (cfg.method == "mmu") {
        masks = saliency_masks(params, forget_rows, cfg.mask_fraction, cfg.batch_forget);
    }

    // Independent batch streams so that enabling or disabling the retain term
    // never shifts the forget-side data order.
    BatchCycle forget_cycle(forget_rows.size(), cfg.seed, 0x464f52ull);   // "FOR"
    BatchCycle retain_cycle(retain_rows.empty() ? 1 : retain_rows.size(), cfg.seed, 0x524554ull);  // "RET"

    Adam opt(AdamConfig{.lr = cfg.lr});
    UnlearnStats stats;
    std::vector<Matrix> g_f, g_r;
    for (int step = 0; step < cfg.steps; ++step) {
        UnlearnLogRow row;
        row.step = step;
        const std::vector<const Example*> fb = pick(forget_rows, forget_cycle.next(cfg.batch_forget));
        if (cfg.method == "npo") {
            stats.last_forget_loss = npo_loss_and_grads(params, ref, fb, cfg.npo_beta, g_f);
            row.aux_term = stats.last_forget_loss;
            row.forget_ll = -corpus_nll(params, fb);
        } else {
            // ascent on the forget NLL, i.e. descent on the mean logprob
            stats.last_forget_loss = signed_logp_mean_and_grads(params, fb, 1.0, g_f);
            row.forget_ll = stats.last_forget_loss;
        }
        if (!masks.empty()) {
            for (size_t i = 0; i < g_f.size(); ++i) {
                for (size_t k = 0; k < g_f[i].data.size(); ++k) {
                    if (masks[i].data[k] == 0.0) g_f[i].data[k] = 0.0;
                }
            }
        }
        if (needs_retain) {
            const std::vector<const Example*> rb = pick(retain_rows, retain_cycle.next(cfg.batch_retain));
            if (cfg.method == "kl_min") {
                stats.last_retain_loss = retain_kl_and_grads(params, ref, rb, g_r);
                row.aux_term = stats.last_retain_loss;
                row.retain_ll = -corpus_nll(params, rb);
            } else {
                stats.last_retain_loss = signed_logp_mean_and_grads(params, rb, -1.0, g_r);
                row.retain_ll = -stats.last_retain_loss;
            }
            for (size_t i = 0; i < g_f.size(); ++i) {
                axpy_in_place(g_f[i], coeff, g_r[i]);
            }
        }
        opt.step(params, g_f);
        stats.steps = step + 1;
        stats.log.push_back(row);
    }
    return stats;
}

}  // namespace ulab
