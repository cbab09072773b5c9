#include "ulab/eval.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>

#include "json.hpp"
#include "ulab/errors.hpp"
#include "ulab/rewards.hpp"
#include "ulab/steering.hpp"
#include "ulab/training.hpp"

namespace ulab {

namespace {

constexpr int kMaxNewTokens = 10;

std::string utc_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

}  // namespace

uint64_t fnv1a64(const std::string& bytes) {
    uint64_t h = 14695981039346656037ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

std::string corpus_hash(const Corpus& corpus) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(jsonl_string(corpus))));
    return buf;
}

double eval_classification(const ModelParams& params, const std::vector<const Example*>& rows) {
    if (rows.empty()) throw DimError("eval_classification: empty row list");
    int hits = 0;
    for (const Example* e : rows) {
        const ClassifyResult cls = classify_options(params, {e->image_features}, e->question_tokens, e->options);
        if (cls.choice == true_option_index(*e)) ++hits;
    }
    return 100.0 * static_cast<double>(hits) / static_cast<double>(rows.size());
}

SplitMetrics eval_split(const ModelParams& params, const std::vector<const Example*>& rows) {
    if (rows.empty()) throw DimError("eval_split: empty row list");
    const GenEvalStats s = generation_stats(params, rows);
    SplitMetrics out;
    out.cls_accuracy = 100.0 * s.accuracy;
    out.gen_rouge_l = s.mean_rouge;
    out.refusal_rate = s.refusal_rate;
    out.n_rows = s.n_rows;
    return out;
}

EvalReport evaluate_model(const ModelParams& params, const Corpus& corpus, const std::string& model_tag,
                          uint64_t seed, JudgeMode mode, const JudgeHttpConfig* http) {
    EvalReport report;
    report.forget = eval_split(params, corpus.split_view(Split::Forget));
    report.test = eval_split(params, corpus.split_view(Split::Test));
    report.retain = eval_split(params, corpus.split_view(Split::Retain));
    report.real = eval_split(params, corpus.split_view(Split::Real));
    report.boundary = eval_split(params, corpus.split_view(Split::Boundary));

    if (mode != JudgeMode::Off) {
        if (mode == JudgeMode::Http && http == nullptr) {
            throw ConfigError("evaluate_model: http judge mode without a client config");
        }
        double cr = 0.0;
        double leak = 0.0;
        const std::vector<const Example*> rows = corpus.split_view(Split::Forget);
        for (const Example* e : rows) {
            const Tokens greedy =
                greedy_decode(params, {e->image_features}, e->question_tokens, kMaxNewTokens, vocab::kEos);
            JudgeScores scores;
            if (mode == JudgeMode::Local) {
                scores = local_judge(greedy, e->answer_tokens);
            } else {
                const std::string prompt =
                    judge_format_prompt(tokens_to_text(e->question_tokens), tokens_to_text(e->answer_tokens),
                                        tokens_to_text(greedy));
                scores = http_judge(*http, prompt);
            }
            cr += scores.contextual_refusal;
            leak += scores.leakage;
        }
        report.judged = true;
        report.judge.judged_count = static_cast<int>(rows.size());
        report.judge.contextual_refusal = cr / static_cast<double>(rows.size());
        report.judge.forgetfulness = leak / static_cast<double>(rows.size());
    }

    report.meta.model_tag = model_tag;
    report.meta.seed = seed;
    report.meta.corpus_hash = corpus_hash(corpus);
    report.meta.timestamp = utc_timestamp();
    return report;
}

namespace {

nlohmann::json split_to_json(const SplitMetrics& m) {
    return {{"cls_accuracy", m.cls_accuracy},
            {"gen_rouge_l", m.gen_rouge_l},
            {"refusal_rate", m.refusal_rate},
            {"n_rows", m.n_rows}};
}

SplitMetrics split_from_json(const nlohmann::json& j) {
    SplitMetrics m;
    m.cls_accuracy = j.at("cls_accuracy").get<double>();
    m.gen_rouge_l = j.at("gen_rouge_l").get<double>();
    m.refusal_rate = j.at("refusal_rate").get<double>();
    m.n_rows = j.at("n_rows").get<int>();
    return m;
}

}  // namespace

void write_report(const EvalReport& report, const std::string& path) {
    const nlohmann::json j = {
        {"splits",
         {{"forget", split_to_json(report.forget)},
          {"test", split_to_json(report.test)},
          {"retain", split_to_json(report.retain)},
          {"real", split_to_json(report.real)},
          {"boundary", split_to_json(report.boundary)}}},
        {"judge",
         {{"contextual_refusal", report.judge.contextual_refusal},
          {"forgetfulness", report.judge.forgetfulness},
          {"judged_count", report.judge.judged_count}}},
        {"judged", report.judged},
        {"meta",
         {{"model_tag", report.meta.model_tag},
          {"seed", report.meta.seed},
          {"corpus_hash", report.meta.corpus_hash},
          {"timestamp", report.meta.timestamp}}}};
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw CorruptionError("write_report: cannot open " + path);
    f << j.dump(2) << "\n";
    if (!f) throw CorruptionError("write_report: write failed for " + path);
}

EvalReport read_report(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw CorruptionError("read_report: cannot open " + path);
    nlohmann::json j;
    try {
        f >> j;
        EvalReport r;
        r.forget = split_from_json(j.at("splits").at("forget"));
        r.test = split_from_json(j.at("splits").at("test"));
        r.retain = split_from_json(j.at("splits").at("retain"));
        r.real = split_from_json(j.at("splits").at("real"));
        r.boundary = split_from_json(j.at("splits").at("boundary"));
        r.judge.contextual_refusal = j.at("judge").at("contextual_refusal").get<double>();
        r.judge.forgetfulness = j.at("judge").at("forgetfulness").get<double>();
        r.judge.judged_count = j.at("judge").at("judged_count").get<int>();
        r.judged = j.at("judged").get<bool>();
        r.meta.model_tag = j.at("meta").at("model_tag").get<std::string>();
        r.meta.seed = j.at("meta").at("seed").get<uint64_t>();
        r.meta.corpus_hash = j.at("meta").at("corpus_hash").get<std::string>();
        r.meta.timestamp = j.at("meta").at("timestamp").get<std::string>();
        return r;
    } catch (const nlohmann::json::exception& ex) {
        throw CorruptionError("read_report: " + path + ": " + ex.what());
    }
}

namespace {

bool split_equal(const SplitMetrics& a, const SplitMetrics& b) {
    return a.cls_accuracy == b.cls_accuracy && a.gen_rouge_l == b.gen_rouge_l &&
           a.refusal_rate == b.refusal_rate && a.n_rows == b.n_rows;
}

}  // namespace

bool metrics_equal(const EvalReport& a, const EvalReport& b) {
    return split_equal(a.forget, b.forget) && split_equal(a.test, b.test) && split_equal(a.retain, b.retain) &&
           split_equal(a.real, b.real) && split_equal(a.boundary, b.boundary) &&
           a.judge.contextual_refusal == b.judge.contextual_refusal &&
           a.judge.forgetfulness == b.judge.forgetfulness && a.judge.judged_count == b.judge.judged_count &&
           a.judged == b.judged && a.meta.model_tag == b.meta.model_tag && a.meta.seed == b.meta.seed &&
           a.meta.corpus_hash == b.meta.corpus_hash;
}

std::string tradeoff_table(const EvalReport& vanilla,
                           const std::vector<std::pair<std::string, EvalReport>>& methods) {
    std::string out = "method,fgt_acc_diff,fgt_rouge_diff,ret_acc,ret_rouge,real_acc,real_rouge\n";
    char buf[256];
    for (const auto& [name, r] : methods) {
        std::snprintf(buf, sizeof(buf), "%s,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", name.c_str(),
                      vanilla.forget.cls_accuracy - r.forget.cls_accuracy,
                      vanilla.forget.gen_rouge_l - r.forget.gen_rouge_l, r.retain.cls_accuracy,
                      r.retain.gen_rouge_l, r.real.cls_accuracy, r.real.gen_rouge_l);
        out += buf;
    }
    return out;
}

namespace {

// Dominant eigenvector of a symmetric PSD matrix by power iteration with a
// fixed, slightly tilted start so runs are reproducible.
void power_iterate(const Matrix& c, Matrix& v, double& eigenvalue) {
    const int d = c.rows;
    v = Matrix(d, 1);
    for (int i = 0; i < d; ++i) v(i, 0) = 1.0 + 1e-3 * i;
    double norm = frobenius_norm(v);
    for (int i = 0; i < d; ++i) v(i, 0) /= norm;
    for (int it = 0; it < 1000; ++it) {
        Matrix w = matmul(c, v);
        const double wn = frobenius_norm(w);
        if (wn == 0.0) {
            eigenvalue = 0.0;
            return;
        }
        for (int i = 0; i < d; ++i) w(i, 0) /= wn;
        double delta = 0.0;
        for (int i = 0; i < d; ++i) delta = std::max(delta, std::abs(w(i, 0) - v(i, 0)));
        v = w;
        if (delta < 1e-13) break;
    }
    eigenvalue = dot_all(matmul(c, v), v);
    // deterministic sign: the largest-magnitude component points up
    int arg = 0;
    for (int i = 1; i < d; ++i) {
        if (std::abs(v(i, 0)) > std::abs(v(arg, 0))) arg = i;
    }
    if (v(arg, 0) < 0.0) {
        for (int i = 0; i < d; ++i) v(i, 0) = -v(i, 0);
    }
}

}  // namespace

PcaProjection pca_project(const Matrix& set_a, const Matrix& set_b) {
    if (set_a.rows < 1 || set_b.rows < 1) throw DimError("pca_project: both sets need rows");
    if (set_a.cols != set_b.cols) throw DimError("pca_project: sets disagree on dimension");
    const int d = set_a.cols;
    if (d < 2) throw DimError("pca_project: need at least two dimensions");
    const int n = set_a.rows + set_b.rows;

    Matrix mean(1, d);
    for (int r = 0; r < set_a.rows; ++r) {
        for (int c = 0; c < d; ++c) mean(0, c) += set_a(r, c);
    }
    for (int r = 0; r < set_b.rows; ++r) {
        for (int c = 0; c < d; ++c) mean(0, c) += set_b(r, c);
    }
    for (int c = 0; c < d; ++c) mean(0, c) /= n;

    Matrix x(n, d);
    for (int r = 0; r < set_a.rows; ++r) {
        for (int c = 0; c < d; ++c) x(r, c) = set_a(r, c) - mean(0, c);
    }
    for (int r = 0; r < set_b.rows; ++r) {
        for (int c = 0; c < d; ++c) x(set_a.rows + r, c) = set_b(r, c) - mean(0, c);
    }
    Matrix cov = matmul_tn(x, x);
    for (int r = 0; r < d; ++r) {
        for (int c = 0; c < d; ++c) cov(r, c) /= n;
    }

    PcaProjection out;
    Matrix v1, v2;
    power_iterate(cov, v1, out.var1);
    // deflate and find the runner-up axis
    Matrix deflated = cov;
    for (int r = 0; r < d; ++r) {
        for (int c = 0; c < d; ++c) deflated(r, c) -= out.var1 * v1(r, 0) * v1(c, 0);
    }
    power_iterate(deflated, v2, out.var2);

    out.components = Matrix(2, d);
    for (int c = 0; c < d; ++c) {
        out.components(0, c) = v1(c, 0);
        out.components(1, c) = v2(c, 0);
    }

    auto project = [&](const Matrix& set, int row) -> std::array<double, 2> {
        double p1 = 0.0, p2 = 0.0;
        for (int c = 0; c < d; ++c) {
            const double centered = set(row, c) - mean(0, c);
            p1 += centered * v1(c, 0);
            p2 += centered * v2(c, 0);
        }
        return {p1, p2};
    };
    for (int r = 0; r < set_a.rows; ++r) out.a.push_back(project(set_a, r));
    for (int r = 0; r < set_b.rows; ++r) out.b.push_back(project(set_b, r));

    auto centroid = [](const std::vector<std::array<double, 2>>& pts) {
        std::array<double, 2> c = {0.0, 0.0};
        for (const auto& p : pts) {
            c[0] += p[0];
            c[1] += p[1];
        }
        c[0] /= static_cast<double>(pts.size());
        c[1] /= static_cast<double>(pts.size());
        return c;
    };
    auto spread = [](const std::vector<std::array<double, 2>>& pts, const std::array<double, 2>& c) {
        double s = 0.0;
        for (const auto& p : pts) s += std::hypot(p[0] - c[0], p[1] - c[1]);
        return s / static_cast<double>(pts.size());
    };
    const std::array<double, 2> ca = centroid(out.a);
    const std::array<double, 2> cb = centroid(out.b);
    const double between = std::hypot(ca[0] - cb[0], ca[1] - cb[1]);
    const double within = 0.5 * (spread(out.a, ca) + spread(out.b, cb));
    out.separation = between / (within + 1e-12);
    return out;
}

std::string pca_csv(const PcaProjection& proj, const std::string& label_a, const std::string& label_b) {
    std::string out = "set_label,pc1,pc2\n";
    char buf[128];
    for (const auto& p : proj.a) {
        std::snprintf(buf, sizeof(buf), "%s,%.6f,%.6f\n", label_a.c_str(), p[0], p[1]);
        out += buf;
    }
    for (const auto& p : proj.b) {
        std::snprintf(buf, sizeof(buf), "%s,%.6f,%.6f\n", label_b.c_str(), p[0], p[1]);
        out += buf;
    }
    return out;
}

PcaProjection dump_activations_pca(const ModelParams& params, const std::vector<const Example*>& set_a,
                                   const std::vector<const Example*>& set_b, int layer,
                                   const std::string& csv_path) {
    const Matrix xa = capture_activations(params, set_a, layer);
    const Matrix xb = capture_activations(params, set_b, layer);
    PcaProjection proj = pca_project(xa, xb);
    if (!csv_path.empty()) {
        std::ofstream f(csv_path, std::ios::trunc);
        if (!f) throw CorruptionError("dump_activations_pca: cannot open " + csv_path);
        f << pca_csv(proj, "set_a", "set_b");
        if (!f) throw CorruptionError("dump_activations_pca: write failed for " + csv_path);
    }
    return proj;
}

}  // namespace ulab
