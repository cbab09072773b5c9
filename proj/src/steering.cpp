#include "ulab/steering.hpp"

#include <algorithm>
#include <cmath>

#include "ulab/errors.hpp"
#include "ulab/ridge.hpp"
#include "ulab/rng.hpp"

namespace ulab {

namespace {

void check_layer(const ModelConfig& cfg, int layer, const char* where) {
    if (layer < 0 || layer >= cfg.n_layers) {
        throw DimError(std::string(where) + ": layer " + std::to_string(layer) + " outside [0, " +
                       std::to_string(cfg.n_layers) + ")");
    }
}

Matrix column_mean(const Matrix& m) {
    Matrix out = Matrix::zeros(1, m.cols);
    for (int r = 0; r < m.rows; ++r) {
        for (int c = 0; c < m.cols; ++c) out(0, c) += m(r, c);
    }
    for (int c = 0; c < m.cols; ++c) out(0, c) /= m.rows;
    return out;
}

double refusal_rollout_rate(const ModelParams& p, const std::vector<const Example*>& forget_examples,
                            const RefusalPatterns& patterns, const SteeringConfig& cfg, uint64_t stream,
                            uint64_t variant) {
    int refused = 0, total = 0;
    for (size_t j = 0; j < forget_examples.size(); ++j) {
        const Example* e = forget_examples[j];
        for (int i = 0; i < cfg.rollout_G; ++i) {
            Rng rng(derive_seed(cfg.seed, stream, variant,
                                static_cast<uint64_t>(j) * cfg.rollout_G + static_cast<uint64_t>(i)));
            const Rollout r = sample_rollout(p, {e->image_features}, e->question_tokens, cfg.max_new_tokens,
                                             cfg.temperature, vocab::kEos, rng);
            if (is_refusal(r.tokens, patterns)) ++refused;
            ++total;
        }
    }
    return total == 0 ? 0.0 : static_cast<double>(refused) / total;
}

double mean_retain_rouge(const ModelParams& p, const std::vector<const Example*>& retain_examples,
                         int max_new_tokens) {
    if (retain_examples.empty()) return 0.0;
    double sum = 0.0;
    for (const Example* e : retain_examples) {
        const Tokens greedy = greedy_decode(p, {e->image_features}, e->question_tokens, max_new_tokens, vocab::kEos);
        sum += rouge_l(greedy, e->answer_tokens);
    }
    return sum / retain_examples.size();
}

}  // namespace

void SteeringConfig::validate(int n_layers) const {
    if (!std::isfinite(lambda_steer)) throw ConfigError("SteeringConfig: lambda_steer must be finite");
    if (rollout_G < 1) throw ConfigError("SteeringConfig: rollout_G must be positive");
    if (temperature <= 0.0) throw ConfigError("SteeringConfig: temperature must be positive");
    if (max_new_tokens < 1) throw ConfigError("SteeringConfig: max_new_tokens must be positive");
    for (int c : layer_candidates) {
        const int lo = n_layers >= 3 ? 1 : 0;
        const int hi = n_layers >= 3 ? n_layers - 2 : n_layers - 1;
        if (c < lo || c > hi) {
            throw ConfigError("SteeringConfig: layer candidate " + std::to_string(c) + " outside [" +
                              std::to_string(lo) + ", " + std::to_string(hi) + "]");
        }
    }
}

Matrix capture_activations(const ModelParams& p, const std::vector<const Example*>& examples, int layer) {
    check_layer(p.cfg, layer, "capture_activations");
    if (examples.empty()) throw DimError("capture_activations: empty example list");
    Matrix out(static_cast<int>(examples.size()), p.cfg.d_model);
    for (size_t i = 0; i < examples.size(); ++i) {
        const Example* e = examples[i];
        ActivationTrace trace;
        forward_logits(p, {e->image_features}, e->question_tokens, &trace);
        const Matrix& post = trace.layers[layer].residual_post;
        const int last = static_cast<int>(e->question_tokens.size()) - 1;
        for (int c = 0; c < p.cfg.d_model; ++c) out(static_cast<int>(i), c) = post(last, c);
    }
    return out;
}

SteeringVector steering_from_captures(const Matrix& forget_rows, const Matrix& target_rows, int layer) {
    if (forget_rows.rows < 1 || target_rows.rows < 1) {
        throw DimError("steering_from_captures: both capture sets must be nonempty");
    }
    if (forget_rows.cols != target_rows.cols) {
        throw DimError("steering_from_captures: capture widths differ");
    }
    SteeringVector sv;
    sv.layer = layer;
    sv.mean_forget = column_mean(forget_rows);
    sv.mean_target = column_mean(target_rows);
    sv.v = sub(sv.mean_target, sv.mean_forget);
    sv.n_forget = forget_rows.rows;
    sv.n_target = target_rows.rows;
    return sv;
}

SteeringVector compute_steering_vector(const ModelParams& p, const std::vector<const Example*>& forget_examples,
                                       const std::vector<const Example*>& target_examples, int layer) {
    return steering_from_captures(capture_activations(p, forget_examples, layer),
                                  capture_activations(p, target_examples, layer), layer);
}

void collect_regression_data(const ModelParams& p, const std::vector<const Example*>& forget_examples,
                             const std::vector<const Example*>& retain_examples, const SteeringVector& sv,
                             double lambda_steer, Matrix& h_out, Matrix& t_out) {
    check_layer(p.cfg, sv.layer, "collect_regression_data");
    if (forget_examples.empty() || retain_examples.empty()) {
        throw DimError("collect_regression_data: both example sets must be nonempty");
    }
    const int n = static_cast<int>(forget_examples.size() + retain_examples.size());
    h_out = Matrix(n, p.cfg.d_mlp);
    t_out = Matrix(n, p.cfg.d_model);
    int row = 0;
    auto add_rows = [&](const std::vector<const Example*>& examples, bool shifted) {
        for (const Example* e : examples) {
            ActivationTrace trace;
            forward_logits(p, {e->image_features}, e->question_tokens, &trace);
            const LayerTrace& lt = trace.layers[sv.layer];
            const int last = static_cast<int>(e->question_tokens.size()) - 1;
            for (int c = 0; c < p.cfg.d_mlp; ++c) h_out(row, c) = lt.mlp_hidden(last, c);
            for (int c = 0; c < p.cfg.d_model; ++c) {
                const double desired =
                    lt.residual_post(last, c) + (shifted ? lambda_steer * sv.v(0, c) : 0.0);
                t_out(row, c) = desired - lt.residual_pre_mlp(last, c);
            }
            ++row;
        }
    };
    add_rows(forget_examples, true);
    add_rows(retain_examples, false);
}

double default_gamma(const Matrix& h) {
    double trace_hth = 0.0;
    for (double x : h.data) trace_hth += x * x;
    return 1e-3 * trace_hth / h.cols;
}

PatchResult solve_and_patch(const ModelParams& p, const Matrix& h, const Matrix& t, double gamma, int layer) {
    check_layer(p.cfg, layer, "solve_and_patch");
    PatchResult out;
    out.gamma = gamma;
    out.w_star = ridge_solve(h, t, gamma);

    // relative normal-equation residual, a solve-quality diagnostic
    Matrix a = matmul_tn(h, h);
    for (int i = 0; i < a.rows; ++i) a(i, i) += gamma;
    const Matrix rhs = matmul_tn(h, t);
    const Matrix res = sub(matmul(a, out.w_star), rhs);
    const double denom = frobenius_norm(rhs);
    out.residual = denom > 0.0 ? frobenius_norm(res) / denom : frobenius_norm(res);

    out.model = patch_down_projection(p, layer, out.w_star);
    return out;
}

std::vector<int> default_layer_candidates(int n_layers) {
    if (n_layers < 1) throw ConfigError("default_layer_candidates: empty stack");
    const int lo = n_layers / 3;
    const int hi = n_layers - n_layers / 3 - 1;
    std::vector<int> out;
    for (int c = std::max(0, lo); c <= std::min(n_layers - 1, hi); ++c) out.push_back(c);
    return out;
}

int argmax_rate_layer(const std::vector<std::pair<int, double>>& rates) {
    if (rates.empty()) throw DimError("argmax_rate_layer: empty rate table");
    int best_layer = rates[0].first;
    double best_rate = rates[0].second;
    for (const auto& [layer, rate] : rates) {
        if (rate > best_rate || (rate == best_rate && layer < best_layer)) {
            best_layer = layer;
            best_rate = rate;
        }
    }
    return best_layer;
}

LayerSelection select_layer(const ModelParams& p, const SteeringConfig& cfg,
                            const std::vector<const Example*>& forget_examples,
                            const std::vector<const Example*>& target_examples,
                            const std::vector<const Example*>& retain_examples, const RefusalPatterns& patterns) {
    cfg.validate(p.cfg.n_layers);
    patterns.validate();
    const std::vector<int> candidates =
        cfg.layer_candidates.empty() ? default_layer_candidates(p.cfg.n_layers) : cfg.layer_candidates;
    if (candidates.empty()) throw ConfigError("select_layer: no layer candidates");

    LayerSelection sel;
    for (int layer : candidates) {
        const SteeringVector sv = compute_steering_vector(p, forget_examples, target_examples, layer);
        Matrix h, t;
        collect_regression_data(p, forget_examples, retain_examples, sv, cfg.lambda_steer, h, t);
        const double gamma = cfg.gamma < 0.0 ? default_gamma(h) : cfg.gamma;
        const PatchResult patch = solve_and_patch(p, h, t, gamma, layer);
        const double rate = refusal_rollout_rate(patch.model, forget_examples, patterns, cfg, 0x4c415952ull,
                                                 static_cast<uint64_t>(layer));  // "LAYR"
        sel.rates.emplace_back(layer, rate);
    }
    sel.best_layer = argmax_rate_layer(sel.rates);
    return sel;
}

std::vector<LambdaRow> sweep_lambda(const ModelParams& p, int layer, const std::vector<double>& grid,
                                    const std::vector<const Example*>& forget_examples,
                                    const std::vector<const Example*>& retain_examples,
                                    const std::vector<const Example*>& target_examples,
                                    const RefusalPatterns& patterns, const SteeringConfig& cfg) {
    if (grid.empty()) throw ConfigError("sweep_lambda: empty grid");
    cfg.validate(p.cfg.n_layers);
    const SteeringVector sv = compute_steering_vector(p, forget_examples, target_examples, layer);

    // T is affine in lambda, so two collections pin the whole family.
    Matrix h, t0, t1;
    collect_regression_data(p, forget_examples, retain_examples, sv, 0.0, h, t0);
    collect_regression_data(p, forget_examples, retain_examples, sv, 1.0, h, t1);
    const Matrix t_step = sub(t1, t0);
    const double gamma = cfg.gamma < 0.0 ? default_gamma(h) : cfg.gamma;
    const Matrix& w_down = p.layers[layer].w_down;

    std::vector<LambdaRow> rows;
    for (size_t gi = 0; gi < grid.size(); ++gi) {
        const double lambda = grid[gi];
        Matrix t = t0;
        axpy_in_place(t, lambda, t_step);
        const PatchResult patch = solve_and_patch(p, h, t, gamma, layer);

        LambdaRow row;
        row.lambda = lambda;
        row.retain_rouge = mean_retain_rouge(patch.model, retain_examples, cfg.max_new_tokens);
        row.refusal_rate = refusal_rollout_rate(patch.model, forget_examples, patterns, cfg, 0x53574550ull,
                                                static_cast<uint64_t>(gi));  // "SWEP"
        const Matrix delta = sub(patch.w_star, w_down);
        const Matrix shifted = matmul(h, delta);
        double total = 0.0;
        for (int r = 0; r < shifted.rows; ++r) {
            double norm2 = 0.0;
            for (int c = 0; c < shifted.cols; ++c) norm2 += shifted(r, c) * shifted(r, c);
            total += std::sqrt(norm2);
        }
        row.mean_shift = total / shifted.rows;
        rows.push_back(row);
    }
    return rows;
}

double pick_lambda(const std::vector<LambdaRow>& rows, double unsteered_retain_rouge, double max_retain_drop) {
    if (rows.empty()) throw DimError("pick_lambda: empty sweep table");
    const LambdaRow* best = nullptr;
    for (const LambdaRow& row : rows) {
        if (row.retain_rouge < unsteered_retain_rouge - max_retain_drop) continue;
        if (best == nullptr || row.refusal_rate > best->refusal_rate ||
            (row.refusal_rate == best->refusal_rate && std::fabs(row.lambda) < std::fabs(best->lambda))) {
            best = &row;
        }
    }
    if (best == nullptr) {
        for (const LambdaRow& row : rows) {
            if (best == nullptr || std::fabs(row.lambda) < std::fabs(best->lambda)) best = &row;
        }
    }
    return best->lambda;
}

}  // namespace ulab
