#include "ulab/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "ulab/errors.hpp"
#include "ulab/mathops.hpp"

namespace ulab {

static_assert(std::endian::native == std::endian::little, "checkpoint io assumes a little-endian host");

void ModelConfig::validate() const {
    if (vocab_size <= 0 || d_model <= 0 || d_mlp <= 0 || n_layers <= 0) {
        throw ConfigError("ModelConfig: sizes must be positive");
    }
    if (n_image_tokens <= 0 || d_image <= 0 || max_seq_len <= 0) {
        throw ConfigError("ModelConfig: image and sequence sizes must be positive");
    }
    if (img_token < 0 || img_token >= vocab_size) throw ConfigError("ModelConfig: img_token out of vocab range");
}

ModelParams init_params(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    ModelParams p;
    p.cfg = cfg;
    Rng rng(derive_seed(seed, 0x6d6f64656cull));  // "model"
    const double s = cfg.init_std;
    p.token_embedding = Matrix::gaussian(cfg.vocab_size, cfg.d_model, rng, 0.0, s);
    p.position_embedding = Matrix::gaussian(cfg.max_seq_len, cfg.d_model, rng, 0.0, s);
    p.vision_adapter = Matrix::gaussian(cfg.d_image, cfg.n_image_tokens * cfg.d_model, rng, 0.0, s);
    p.head = Matrix::gaussian(cfg.d_model, cfg.vocab_size, rng, 0.0, s);
    p.layers.resize(cfg.n_layers);
    for (auto& l : p.layers) {
        l.wq = Matrix::gaussian(cfg.d_model, cfg.d_model, rng, 0.0, s);
        l.wk = Matrix::gaussian(cfg.d_model, cfg.d_model, rng, 0.0, s);
        l.wv = Matrix::gaussian(cfg.d_model, cfg.d_model, rng, 0.0, s);
        l.wo = Matrix::gaussian(cfg.d_model, cfg.d_model, rng, 0.0, s);
        l.w_up = Matrix::gaussian(cfg.d_model, cfg.d_mlp, rng, 0.0, s);
        l.w_down = Matrix::gaussian(cfg.d_mlp, cfg.d_model, rng, 0.0, s);
        l.gain_attn = Matrix(1, cfg.d_model);
        l.gain_attn.fill(1.0);
        l.gain_mlp = Matrix(1, cfg.d_model);
        l.gain_mlp.fill(1.0);
    }
    return p;
}

template <typename P, typename F>
static void for_each_tensor_impl(P& p, const F& fn) {
    fn("token_embedding", p.token_embedding);
    fn("position_embedding", p.position_embedding);
    fn("vision_adapter", p.vision_adapter);
    fn("head", p.head);
    for (size_t i = 0; i < p.layers.size(); ++i) {
        const std::string base = "layers." + std::to_string(i) + ".";
        fn(base + "wq", p.layers[i].wq);
        fn(base + "wk", p.layers[i].wk);
        fn(base + "wv", p.layers[i].wv);
        fn(base + "wo", p.layers[i].wo);
        fn(base + "w_up", p.layers[i].w_up);
        fn(base + "w_down", p.layers[i].w_down);
        fn(base + "gain_attn", p.layers[i].gain_attn);
        fn(base + "gain_mlp", p.layers[i].gain_mlp);
    }
}

void for_each_tensor(ModelParams& p, const std::function<void(const std::string&, Matrix&)>& fn) {
    for_each_tensor_impl(p, fn);
}

void for_each_tensor(const ModelParams& p, const std::function<void(const std::string&, const Matrix&)>& fn) {
    for_each_tensor_impl(p, fn);
}

namespace {

// Position layout of one sequence: which entries are image slots and which
// image each slot belongs to.
struct SeqLayout {
    std::vector<int> group;  // -1 for text, else image run index
    int n_images = 0;
};

SeqLayout parse_layout(const ModelConfig& cfg, const std::vector<ImageFeatures>& images, const Tokens& ids) {
    if (ids.empty()) throw DimError("forward: empty token sequence");
    if (static_cast<int>(ids.size()) > cfg.max_seq_len) {
        throw DimError("forward: sequence length " + std::to_string(ids.size()) + " exceeds max_seq_len " +
                       std::to_string(cfg.max_seq_len));
    }
    SeqLayout layout;
    layout.group.assign(ids.size(), -1);
    size_t i = 0;
    while (i < ids.size()) {
        const int id = ids[i];
        if (id < 0 || id >= cfg.vocab_size) throw DimError("forward: token id out of vocab range");
        if (id == cfg.img_token) {
            size_t run = 0;
            while (i + run < ids.size() && ids[i + run] == cfg.img_token) ++run;
            if (run != static_cast<size_t>(cfg.n_image_tokens)) {
                throw DimError("forward: image placeholder run of length " + std::to_string(run) +
                               ", expected " + std::to_string(cfg.n_image_tokens));
            }
            for (size_t k = 0; k < run; ++k) layout.group[i + k] = layout.n_images;
            ++layout.n_images;
            i += run;
        } else {
            ++i;
        }
    }
    if (layout.n_images != static_cast<int>(images.size())) {
        throw DimError("forward: sequence has " + std::to_string(layout.n_images) + " image slots but " +
                       std::to_string(images.size()) + " feature vectors were given");
    }
    for (const auto& f : images) {
        if (static_cast<int>(f.size()) != cfg.d_image) {
            throw DimError("forward: image feature length " + std::to_string(f.size()) + ", expected " +
                           std::to_string(cfg.d_image));
        }
    }
    return layout;
}

Matrix attention_mask(const SeqLayout& layout) {
    const int t = static_cast<int>(layout.group.size());
    Matrix mask(t, t);
    for (int i = 0; i < t; ++i) {
        for (int j = 0; j < t; ++j) {
            const bool causal = j <= i;
            const bool image_rule = layout.group[i] < 0 || layout.group[j] == layout.group[i];
            mask(i, j) = causal && image_rule ? 0.0 : -1e30;
        }
    }
    return mask;
}

struct ValueBackend {
    using T = Matrix;
    ActivationTrace* trace = nullptr;

    T leaf(Matrix m) const { return m; }
    T matmul(const T& a, const T& b) const { return ulab::matmul(a, b); }
    T transpose(const T& a) const { return ulab::transpose(a); }
    T add(const T& a, const T& b) const { return ulab::add(a, b); }
    T scale(const T& a, double c) const { return ulab::scale(a, c); }
    T add_const(const T& a, const Matrix& c) const { return ulab::add(a, c); }
    T gelu(const T& a) const { return ulab::gelu(a); }
    T rms_norm(const T& x, const T& g, double eps) const { return ulab::rms_norm(x, g, eps); }
    T softmax_rows(const T& a) const { return ulab::softmax_rows(a); }
    T reshape(const T& a, int r, int c) const { return Matrix(r, c, a.data); }
    T gather_rows(const T& table, const std::vector<int>& rows) const {
        Matrix out(static_cast<int>(rows.size()), table.cols);
        for (size_t i = 0; i < rows.size(); ++i) {
            for (int c = 0; c < table.cols; ++c) out(static_cast<int>(i), c) = table(rows[i], c);
        }
        return out;
    }
    T vstack(const std::vector<T>& parts) const {
        int rows = 0;
        for (const auto& p : parts) rows += p.rows;
        Matrix out(rows, parts[0].cols);
        int r0 = 0;
        for (const auto& p : parts) {
            std::memcpy(out.data.data() + static_cast<size_t>(r0) * out.cols, p.data.data(),
                        p.size() * sizeof(double));
            r0 += p.rows;
        }
        return out;
    }
    const Matrix& value_of(const T& t) const { return t; }
};

struct GraphBackend {
    using T = NodeId;
    Graph* g = nullptr;
    ActivationTrace* trace = nullptr;

    T leaf(Matrix m) const { return g->leaf(std::move(m)); }
    T matmul(T a, T b) const { return g->matmul(a, b); }
    T transpose(T a) const { return g->transpose(a); }
    T add(T a, T b) const { return g->add(a, b); }
    T scale(T a, double c) const { return g->scale(a, c); }
    T add_const(T a, const Matrix& c) const { return g->add_const(a, c); }
    T gelu(T a) const { return g->gelu(a); }
    T rms_norm(T x, T gain, double eps) const { return g->rms_norm(x, gain, eps); }
    T softmax_rows(T a) const { return g->softmax_rows(a); }
    T reshape(T a, int r, int c) const { return g->reshape(a, r, c); }
    T gather_rows(T table, const std::vector<int>& rows) const { return g->gather_rows(table, rows); }
    T vstack(const std::vector<T>& parts) const { return g->vstack(parts); }
    const Matrix& value_of(T t) const { return g->value(t); }
};

// Single definition of the architecture; runs on concrete matrices or on the
// autodiff graph depending on the backend.
template <typename B>
typename B::T forward_core(B& b, const ModelConfig& cfg, const ParamTensors<typename B::T>& pt,
                           const std::vector<ImageFeatures>& images, const Tokens& ids) {
    using T = typename B::T;
    const SeqLayout layout = parse_layout(cfg, images, ids);
    const int seq_len = static_cast<int>(ids.size());

    std::vector<T> segments;
    size_t i = 0;
    int next_image = 0;
    while (i < ids.size()) {
        if (layout.group[i] >= 0) {
            Matrix feat(1, cfg.d_image, images[next_image]);
            T adapter_out = b.matmul(b.leaf(std::move(feat)), pt.vision_adapter);
            segments.push_back(b.reshape(adapter_out, cfg.n_image_tokens, cfg.d_model));
            ++next_image;
            i += cfg.n_image_tokens;
        } else {
            std::vector<int> text_ids;
            while (i < ids.size() && layout.group[i] < 0) {
                text_ids.push_back(ids[i]);
                ++i;
            }
            segments.push_back(b.gather_rows(pt.token_embedding, text_ids));
        }
    }
    T x = segments.size() == 1 ? segments[0] : b.vstack(segments);

    std::vector<int> pos_ids(seq_len);
    for (int k = 0; k < seq_len; ++k) pos_ids[k] = k;
    x = b.add(x, b.gather_rows(pt.position_embedding, pos_ids));

    const Matrix mask = attention_mask(layout);
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));

    if (b.trace) b.trace->layers.resize(cfg.n_layers);
    for (int l = 0; l < cfg.n_layers; ++l) {
        const auto& lp = pt.layers[l];
        T a = b.rms_norm(x, lp.gain_attn, cfg.rms_eps);
        T q = b.matmul(a, lp.wq);
        T k = b.matmul(a, lp.wk);
        T v = b.matmul(a, lp.wv);
        T scores = b.add_const(b.scale(b.matmul(q, b.transpose(k)), att_scale), mask);
        T attn = b.matmul(b.matmul(b.softmax_rows(scores), v), lp.wo);
        x = b.add(x, attn);
        if (b.trace) b.trace->layers[l].residual_pre_mlp = b.value_of(x);

        T m = b.rms_norm(x, lp.gain_mlp, cfg.rms_eps);
        T hidden = b.gelu(b.matmul(m, lp.w_up));
        if (b.trace) b.trace->layers[l].mlp_hidden = b.value_of(hidden);
        x = b.add(x, b.matmul(hidden, lp.w_down));
        if (b.trace) b.trace->layers[l].residual_post = b.value_of(x);
    }
    return b.matmul(x, pt.head);
}

}  // namespace

Matrix forward_logits(const ModelParams& p, const std::vector<ImageFeatures>& images, const Tokens& ids,
                      ActivationTrace* trace) {
    ValueBackend b;
    b.trace = trace;
    return forward_core(b, p.cfg, p, images, ids);
}

ParamNodes register_params(Graph& g, const ModelParams& p) {
    ParamNodes pn;
    pn.token_embedding = g.leaf(p.token_embedding);
    pn.position_embedding = g.leaf(p.position_embedding);
    pn.vision_adapter = g.leaf(p.vision_adapter);
    pn.head = g.leaf(p.head);
    pn.layers.resize(p.layers.size());
    for (size_t i = 0; i < p.layers.size(); ++i) {
        pn.layers[i].wq = g.leaf(p.layers[i].wq);
        pn.layers[i].wk = g.leaf(p.layers[i].wk);
        pn.layers[i].wv = g.leaf(p.layers[i].wv);
        pn.layers[i].wo = g.leaf(p.layers[i].wo);
        pn.layers[i].w_up = g.leaf(p.layers[i].w_up);
        pn.layers[i].w_down = g.leaf(p.layers[i].w_down);
        pn.layers[i].gain_attn = g.leaf(p.layers[i].gain_attn);
        pn.layers[i].gain_mlp = g.leaf(p.layers[i].gain_mlp);
    }
    return pn;
}

NodeId forward_logits_graph(Graph& g, const ModelConfig& cfg, const ParamNodes& pn,
                            const std::vector<ImageFeatures>& images, const Tokens& ids) {
    GraphBackend b;
    b.g = &g;
    return forward_core(b, cfg, pn, images, ids);
}

static void check_prompt_answer(const Tokens& prompt, const Tokens& answer) {
    if (prompt.empty()) throw DimError("sequence_log_prob: empty prompt");
    if (answer.empty()) throw DimError("sequence_log_prob: empty answer");
}

// The image placeholder is a prompt-structure token; the policy never emits
// it. Its logit is pinned to -1e30 wherever next-token distributions are
// formed so that sampling, scoring and the graph path agree exactly.
static void ban_placeholder(Matrix& logits, int img_token) {
    for (int r = 0; r < logits.rows; ++r) logits(r, img_token) = -1e30;
}

double sequence_log_prob(const ModelParams& p, const std::vector<ImageFeatures>& images, const Tokens& prompt,
                         const Tokens& answer) {
    check_prompt_answer(prompt, answer);
    Tokens full = prompt;
    full.insert(full.end(), answer.begin(), answer.end());
    Matrix logits = forward_logits(p, images, full);
    ban_placeholder(logits, p.cfg.img_token);
    const Matrix lp = log_softmax_rows(logits);
    double total = 0.0;
    const int start = static_cast<int>(prompt.size()) - 1;
    for (size_t k = 0; k < answer.size(); ++k) {
        total += lp(start + static_cast<int>(k), answer[k]);
    }
    return total;
}

NodeId sequence_log_prob_graph(Graph& g, const ModelConfig& cfg, const ParamNodes& pn,
                               const std::vector<ImageFeatures>& images, const Tokens& prompt,
                               const Tokens& answer) {
    check_prompt_answer(prompt, answer);
    Tokens full = prompt;
    full.insert(full.end(), answer.begin(), answer.end());
    NodeId logits = forward_logits_graph(g, cfg, pn, images, full);
    std::vector<int> rows(answer.size());
    for (size_t k = 0; k < answer.size(); ++k) rows[k] = static_cast<int>(prompt.size()) - 1 + static_cast<int>(k);
    Matrix ban(static_cast<int>(answer.size()), cfg.vocab_size);
    ban_placeholder(ban, cfg.img_token);
    NodeId answer_logits = g.add_const(g.gather_rows(logits, rows), ban);
    return g.gather_log_softmax(answer_logits, answer);
}

Rollout sample_rollout(const ModelParams& p, const std::vector<ImageFeatures>& images, const Tokens& prompt,
                       int max_new_tokens, double temperature, int end_token, Rng& rng) {
    if (temperature <= 0.0) throw ConfigError("sample_rollout: temperature must be positive");
    Rollout out;
    Tokens seq = prompt;
    for (int step = 0; step < max_new_tokens; ++step) {
        const Matrix logits = forward_logits(p, images, seq);
        Matrix last(1, logits.cols);
        for (int c = 0; c < logits.cols; ++c) last(0, c) = logits(logits.rows - 1, c) / temperature;
        ban_placeholder(last, p.cfg.img_token);
        const Matrix lp = log_softmax_rows(last);
        const double u = rng.uniform();
        double acc = 0.0;
        int pick = logits.cols - 1;
        for (int c = 0; c < logits.cols; ++c) {
            acc += std::exp(lp(0, c));
            if (u < acc) {
                pick = c;
                break;
            }
        }
        out.tokens.push_back(pick);
        out.logprobs.push_back(lp(0, pick));
        seq.push_back(pick);
        if (pick == end_token) {
            out.terminated = true;
            break;
        }
    }
    return out;
}

Tokens greedy_decode(const ModelParams& p, const std::vector<ImageFeatures>& images, const Tokens& prompt,
                     int max_new_tokens, int end_token) {
    Tokens out;
    Tokens seq = prompt;
    for (int step = 0; step < max_new_tokens; ++step) {
        Matrix logits = forward_logits(p, images, seq);
        ban_placeholder(logits, p.cfg.img_token);
        int pick = 0;
        double best = logits(logits.rows - 1, 0);
        for (int c = 1; c < logits.cols; ++c) {
            if (logits(logits.rows - 1, c) > best) {
                best = logits(logits.rows - 1, c);
                pick = c;
            }
        }
        out.push_back(pick);
        seq.push_back(pick);
        if (pick == end_token) break;
    }
    return out;
}

ClassifyResult classify_options(const ModelParams& p, const std::vector<ImageFeatures>& images,
                                const Tokens& prompt, const std::vector<Tokens>& options) {
    if (options.empty()) throw DimError("classify_options: no options");
    ClassifyResult res;
    res.scores.reserve(options.size());
    for (const Tokens& opt : options) {
        const double lp = sequence_log_prob(p, images, prompt, opt);
        res.scores.push_back(lp / static_cast<double>(opt.size()));
    }
    res.choice = 0;
    for (size_t i = 1; i < res.scores.size(); ++i) {
        if (res.scores[i] > res.scores[res.choice]) res.choice = static_cast<int>(i);
    }
    return res;
}

ModelParams patch_down_projection(const ModelParams& p, int layer, const Matrix& w_down) {
    if (layer < 0 || layer >= static_cast<int>(p.layers.size())) {
        throw DimError("patch_down_projection: layer index out of range");
    }
    if (w_down.rows != p.cfg.d_mlp || w_down.cols != p.cfg.d_model) {
        throw DimError("patch_down_projection: replacement shape mismatch");
    }
    ModelParams out = p;
    out.layers[layer].w_down = w_down;
    return out;
}

namespace {

constexpr uint32_t kCheckpointMagic = 0x314b4c55;  // "ULK1"

nlohmann::json config_to_json(const ModelConfig& c) {
    return nlohmann::json{{"vocab_size", c.vocab_size},   {"d_model", c.d_model},
                          {"d_mlp", c.d_mlp},             {"n_layers", c.n_layers},
                          {"n_image_tokens", c.n_image_tokens}, {"d_image", c.d_image},
                          {"max_seq_len", c.max_seq_len}, {"img_token", c.img_token},
                          {"rms_eps", c.rms_eps},         {"init_std", c.init_std}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.vocab_size = j.at("vocab_size").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.d_mlp = j.at("d_mlp").get<int>();
    c.n_layers = j.at("n_layers").get<int>();
    c.n_image_tokens = j.at("n_image_tokens").get<int>();
    c.d_image = j.at("d_image").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.img_token = j.at("img_token").get<int>();
    c.rms_eps = j.at("rms_eps").get<double>();
    c.init_std = j.at("init_std").get<double>();
    return c;
}

}  // namespace

void save_checkpoint(const ModelParams& p, const std::string& path) {
    nlohmann::json tensors = nlohmann::json::array();
    std::vector<float> payload;
    for_each_tensor(p, [&](const std::string& name, const Matrix& m) {
        tensors.push_back({{"name", name},
                           {"rows", m.rows},
                           {"cols", m.cols},
                           {"offset", payload.size() * sizeof(float)}});
        for (double v : m.data) payload.push_back(static_cast<float>(v));
    });
    nlohmann::json manifest = {{"config", config_to_json(p.cfg)},
                               {"tensors", tensors},
                               {"payload_bytes", payload.size() * sizeof(float)}};
    const std::string mstr = manifest.dump();

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw CorruptionError("save_checkpoint: cannot open " + path);
    const uint64_t mlen = mstr.size();
    f.write(reinterpret_cast<const char*>(&kCheckpointMagic), sizeof(kCheckpointMagic));
    f.write(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
    f.write(mstr.data(), static_cast<std::streamsize>(mstr.size()));
    f.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size() * sizeof(float)));
    if (!f) throw CorruptionError("save_checkpoint: write failed for " + path);
}

ModelParams load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CorruptionError("load_checkpoint: cannot open " + path);
    uint32_t magic = 0;
    uint64_t mlen = 0;
    f.read(reinterpret_cast<char*>(&magic), sizeof(magic));
    f.read(reinterpret_cast<char*>(&mlen), sizeof(mlen));
    if (!f || magic != kCheckpointMagic) throw CorruptionError("load_checkpoint: bad magic in " + path);
    std::string mstr(mlen, '\0');
    f.read(mstr.data(), static_cast<std::streamsize>(mlen));
    if (!f) throw CorruptionError("load_checkpoint: truncated manifest in " + path);

    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(mstr);
    } catch (const nlohmann::json::exception& e) {
        throw CorruptionError(std::string("load_checkpoint: manifest parse error: ") + e.what());
    }

    ModelParams p;
    p.cfg = config_from_json(manifest.at("config"));
    p.cfg.validate();

    std::vector<char> payload((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    const uint64_t expected = manifest.at("payload_bytes").get<uint64_t>();
    if (payload.size() != expected) {
        throw CorruptionError("load_checkpoint: payload is " + std::to_string(payload.size()) +
                              " bytes, manifest says " + std::to_string(expected));
    }

    const auto& tensors = manifest.at("tensors");
    const size_t expected_count = 4 + 8 * static_cast<size_t>(p.cfg.n_layers);
    if (tensors.size() != expected_count) {
        throw CorruptionError("load_checkpoint: manifest lists " + std::to_string(tensors.size()) +
                              " tensors, expected " + std::to_string(expected_count));
    }

    p.layers.resize(p.cfg.n_layers);
    size_t idx = 0;
    for_each_tensor(p, [&](const std::string& name, Matrix& m) {
        const auto& t = tensors.at(idx++);
        if (t.at("name").get<std::string>() != name) {
            throw CorruptionError("load_checkpoint: tensor order mismatch at " + name);
        }
        const int rows = t.at("rows").get<int>();
        const int cols = t.at("cols").get<int>();
        const uint64_t offset = t.at("offset").get<uint64_t>();
        const uint64_t bytes = static_cast<uint64_t>(rows) * cols * sizeof(float);
        if (offset + bytes > payload.size()) {
            throw CorruptionError("load_checkpoint: tensor " + name + " overruns payload");
        }
        m = Matrix(rows, cols);
        const float* src = reinterpret_cast<const float*>(payload.data() + offset);
        for (size_t i = 0; i < m.size(); ++i) m.data[i] = static_cast<double>(src[i]);
    });
    return p;
}

}  // namespace ulab
