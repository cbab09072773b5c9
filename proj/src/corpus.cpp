#include "ulab/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "ulab/errors.hpp"
#include "ulab/rng.hpp"

namespace ulab {

namespace vocab {

namespace {
const char* kAttrWords[kNumAttrs] = {"NAME", "JOB", "CITY", "HOBBY"};
const char* kRefusalWords[kRefusalLen] = {"THIS", "CANNOT", "BE", "INFERRED", "FROM", "THE", "IMAGE"};
}  // namespace

std::string token_name(int id) {
    if (id < 0 || id >= kSize) throw DimError("token_name: id out of range");
    switch (id) {
        case kPad: return "PAD";
        case kBos: return "BOS";
        case kEos: return "EOS";
        case kImg: return "IMG";
        case kQMark: return "QMARK";
        case kSep: return "SEP";
        default: break;
    }
    if (id >= kQAttrBase && id < kQAttrBase + kNumAttrs) {
        return std::string("ASK_") + kAttrWords[id - kQAttrBase];
    }
    if (id >= kVariantBase && id < kVariantBase + 4) {
        return "PHRASE_" + std::string(1, static_cast<char>('A' + id - kVariantBase));
    }
    if (id >= kRefusalBase && id < kRefusalBase + kRefusalLen) {
        return kRefusalWords[id - kRefusalBase];
    }
    if (id >= kFictValueBase && id < kFictValueBase + kNumAttrs * kPoolSize) {
        const int off = id - kFictValueBase;
        return std::string(kAttrWords[off / kPoolSize]) + "_" + std::to_string(off % kPoolSize);
    }
    if (id >= kRealValueBase && id < kRealValueBase + kNumAttrs * kPoolSize) {
        const int off = id - kRealValueBase;
        return std::string("R_") + kAttrWords[off / kPoolSize] + "_" + std::to_string(off % kPoolSize);
    }
    return "UNUSED_" + std::to_string(id);
}

Tokens refusal_sequence() {
    Tokens t(kRefusalLen);
    for (int i = 0; i < kRefusalLen; ++i) t[i] = kRefusalBase + i;
    return t;
}

}  // namespace vocab

int corpus_feature_dim() { return 2 * vocab::kNumAttrs * vocab::kPoolSize; }

std::string split_name(Split s) {
    switch (s) {
        case Split::Forget: return "forget";
        case Split::Retain: return "retain";
        case Split::Boundary: return "boundary";
        case Split::Target: return "target";
        case Split::Test: return "test";
        case Split::Real: return "real";
    }
    throw DimError("split_name: bad split");
}

Split split_from_name(const std::string& name) {
    if (name == "forget") return Split::Forget;
    if (name == "retain") return Split::Retain;
    if (name == "boundary") return Split::Boundary;
    if (name == "target") return Split::Target;
    if (name == "test") return Split::Test;
    if (name == "real") return Split::Real;
    throw CorruptionError("split_from_name: unknown split '" + name + "'");
}

void SplitSpec::validate() const {
    if (n_entities < 2) throw ConfigError("SplitSpec: n_entities must be at least 2");
    if (forget_ratio <= 0.0 || forget_ratio >= 1.0) throw ConfigError("SplitSpec: forget_ratio must be in (0,1)");
    if (boundary_fraction_of_retain <= 0.0 || boundary_fraction_of_retain > 1.0) {
        throw ConfigError("SplitSpec: boundary_fraction_of_retain must be in (0,1]");
    }
    if (boundary_noise_fraction < 0.0 || boundary_noise_fraction > 1.0) {
        throw ConfigError("SplitSpec: boundary_noise_fraction must be in [0,1]");
    }
    if (n_templates_train < 1 || n_templates_heldout < 1) {
        throw ConfigError("SplitSpec: template counts must be positive");
    }
    if (n_templates_train + n_templates_heldout > 4 * vocab::kNumAttrs) {
        throw ConfigError("SplitSpec: too many templates for the phrasing vocabulary");
    }
    if (n_real_entities < 1 || n_target_entities < 1) {
        throw ConfigError("SplitSpec: real and target pools must be non-empty");
    }
    if (feature_noise_sigma < 0.0) throw ConfigError("SplitSpec: feature_noise_sigma must be non-negative");
    if (n_image_tokens < 1) throw ConfigError("SplitSpec: n_image_tokens must be positive");
}

std::vector<const Example*> Corpus::split_view(Split s) const {
    std::vector<const Example*> out;
    for (const Example& e : examples) {
        if (e.split == s) out.push_back(&e);
    }
    return out;
}

Tokens render_question(int template_id, int n_image_tokens) {
    if (template_id < 0 || template_id >= 4 * vocab::kNumAttrs) {
        throw DimError("render_question: template id out of range");
    }
    Tokens q = {vocab::kBos};
    for (int i = 0; i < n_image_tokens; ++i) q.push_back(vocab::kImg);
    q.push_back(vocab::kQMark);
    q.push_back(vocab::kQAttrBase + template_attribute(template_id));
    q.push_back(vocab::kVariantBase + template_id / vocab::kNumAttrs);
    return q;
}

int template_attribute(int template_id) { return template_id % vocab::kNumAttrs; }

namespace {

constexpr int kRealIdBase = 1000;
constexpr int kTargetIdBase = 2000;
constexpr int kNoiseIdBase = 3000;
constexpr double kFreshFeatureScale = 0.5;
constexpr double kTargetCueScale = 6.0;
constexpr int kNumOptions = 4;

double cosine(const ImageFeatures& a, const ImageFeatures& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    const double denom = std::sqrt(na) * std::sqrt(nb);
    return denom > 0.0 ? dot / denom : 0.0;
}

ImageFeatures structured_features(const std::array<int, vocab::kNumAttrs>& values, bool real_universe,
                                  double sigma, Rng& rng) {
    ImageFeatures f(corpus_feature_dim(), 0.0);
    const int base = real_universe ? vocab::kNumAttrs * vocab::kPoolSize : 0;
    for (int a = 0; a < vocab::kNumAttrs; ++a) {
        f[base + a * vocab::kPoolSize + values[a]] = 1.0;
    }
    for (double& x : f) x += rng.gaussian(0.0, sigma);
    return f;
}

ImageFeatures fresh_features(Rng& rng) {
    ImageFeatures f(corpus_feature_dim());
    for (double& x : f) x = rng.gaussian(0.0, kFreshFeatureScale);
    return f;
}

// All target images share one strong direction on top of their individual
// noise, so the refusal pool is recognizable as a class instead of a list of
// memorized feature keys. The direction is a pure function of the seed.
void add_target_cue(ImageFeatures& f, uint64_t seed) {
    Rng rng(derive_seed(seed, 0x54435545ull));  // "TCUE"
    std::vector<double> u(f.size());
    double norm2 = 0.0;
    for (double& x : u) {
        x = rng.gaussian(0.0, 1.0);
        norm2 += x * x;
    }
    const double scale = kTargetCueScale / std::sqrt(norm2);
    for (size_t i = 0; i < f.size(); ++i) f[i] += u[i] * scale;
}

const Profile& profile_by_id(const std::vector<Profile>& profiles, int id) {
    for (const Profile& p : profiles) {
        if (p.entity_id == id) return p;
    }
    throw DimError("profile_by_id: unknown entity " + std::to_string(id));
}

int value_token(Universe u, int attr, int value) {
    const int base = u == Universe::Real ? vocab::kRealValueBase : vocab::kFictValueBase;
    return base + attr * vocab::kPoolSize + value;
}

Example make_example(const SplitSpec& spec, const Profile& p, int template_id, Split split) {
    Example e;
    e.entity_id = p.entity_id;
    e.image_features = p.features;
    e.question_tokens = render_question(template_id, spec.n_image_tokens);
    const int attr = template_attribute(template_id);
    Rng rng(derive_seed(spec.seed, 0x4f5054ull, static_cast<uint64_t>(p.entity_id),
                        static_cast<uint64_t>(template_id)));  // "OPT"

    const bool refusal_answer = split == Split::Target;
    Tokens true_option;
    if (refusal_answer) {
        true_option = vocab::refusal_sequence();
        e.answer_tokens = true_option;
        e.answer_tokens.push_back(vocab::kEos);
    } else {
        const int tok = value_token(p.universe, attr, p.values[attr]);
        true_option = {tok};
        e.answer_tokens = {tok, vocab::kEos};
    }

    // Distractors: distinct wrong values from the asked attribute's pool. Fresh
    // entities borrow the fictional pool.
    const Universe option_universe = p.universe == Universe::Real ? Universe::Real : Universe::Fictional;
    const int true_value = refusal_answer ? -1 : p.values[attr];
    std::vector<int> pool;
    for (int v = 0; v < vocab::kPoolSize; ++v) {
        if (v != true_value) pool.push_back(v);
    }
    rng.shuffle(pool);
    std::vector<Tokens> distractors;
    for (int k = 0; k < kNumOptions - 1; ++k) {
        distractors.push_back({value_token(option_universe, attr, pool[k])});
    }
    const int answer_pos = static_cast<int>(rng.uniform_int(kNumOptions));
    e.options.resize(kNumOptions);
    int d = 0;
    for (int i = 0; i < kNumOptions; ++i) {
        e.options[i] = i == answer_pos ? true_option : distractors[d++];
    }
    e.split = split;
    return e;
}

}  // namespace

std::vector<int> select_boundary_set(const std::vector<Profile>& profiles, const std::vector<int>& forget_ids,
                                     const std::vector<int>& retain_ids, double fraction) {
    if (forget_ids.empty() || retain_ids.empty()) {
        throw DimError("select_boundary_set: empty forget or retain set");
    }
    if (fraction <= 0.0 || fraction > 1.0) throw ConfigError("select_boundary_set: fraction must be in (0,1]");
    std::vector<std::pair<double, int>> ranked;
    for (int rid : retain_ids) {
        const Profile& r = profile_by_id(profiles, rid);
        double best = -2.0;
        for (int fid : forget_ids) {
            best = std::max(best, cosine(r.features, profile_by_id(profiles, fid).features));
        }
        ranked.emplace_back(best, rid);
    }
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    const size_t n = std::max<size_t>(1, static_cast<size_t>(std::llround(fraction * retain_ids.size())));
    std::vector<int> out;
    for (size_t i = 0; i < std::min(n, ranked.size()); ++i) out.push_back(ranked[i].second);
    return out;
}

Corpus generate_corpus(const SplitSpec& spec) {
    spec.validate();
    Corpus corpus;
    corpus.spec = spec;

    for (int e = 0; e < spec.n_entities; ++e) {
        Profile p;
        p.entity_id = e;
        p.universe = Universe::Fictional;
        Rng rng(derive_seed(spec.seed, 0x454e54ull, static_cast<uint64_t>(e)));  // "ENT"
        for (int a = 0; a < vocab::kNumAttrs; ++a) p.values[a] = static_cast<int>(rng.uniform_int(vocab::kPoolSize));
        p.features = structured_features(p.values, false, spec.feature_noise_sigma, rng);
        corpus.profiles.push_back(std::move(p));
    }
    for (int k = 0; k < spec.n_real_entities; ++k) {
        Profile p;
        p.entity_id = kRealIdBase + k;
        p.universe = Universe::Real;
        Rng rng(derive_seed(spec.seed, 0x454e54ull, static_cast<uint64_t>(p.entity_id)));
        for (int a = 0; a < vocab::kNumAttrs; ++a) p.values[a] = static_cast<int>(rng.uniform_int(vocab::kPoolSize));
        p.features = structured_features(p.values, true, spec.feature_noise_sigma, rng);
        corpus.real_entities.push_back(p.entity_id);
        corpus.profiles.push_back(std::move(p));
    }
    for (int k = 0; k < spec.n_target_entities; ++k) {
        Profile p;
        p.entity_id = kTargetIdBase + k;
        p.universe = Universe::Fresh;
        p.values.fill(-1);
        Rng rng(derive_seed(spec.seed, 0x454e54ull, static_cast<uint64_t>(p.entity_id)));
        p.features = fresh_features(rng);
        add_target_cue(p.features, spec.seed);
        corpus.target_entities.push_back(p.entity_id);
        corpus.profiles.push_back(std::move(p));
    }

    // forget/retain assignment
    std::vector<int> ids(spec.n_entities);
    for (int i = 0; i < spec.n_entities; ++i) ids[i] = i;
    Rng split_rng(derive_seed(spec.seed, 0x53504cull));  // "SPL"
    split_rng.shuffle(ids);
    const int n_forget = std::max<int>(1, static_cast<int>(std::llround(spec.forget_ratio * spec.n_entities)));
    corpus.forget_entities.assign(ids.begin(), ids.begin() + n_forget);
    corpus.retain_entities.assign(ids.begin() + n_forget, ids.end());
    std::sort(corpus.forget_entities.begin(), corpus.forget_entities.end());
    std::sort(corpus.retain_entities.begin(), corpus.retain_entities.end());

    corpus.boundary_entities = select_boundary_set(corpus.profiles, corpus.forget_entities,
                                                   corpus.retain_entities, spec.boundary_fraction_of_retain);

    // Noise variant: the tail of the ranked boundary list is swapped for fresh
    // entities with unstructured features and arbitrary ground-truth answers.
    const int n_noise =
        static_cast<int>(std::llround(spec.boundary_noise_fraction * corpus.boundary_entities.size()));
    for (int k = 0; k < n_noise; ++k) {
        Profile p;
        p.entity_id = kNoiseIdBase + k;
        p.universe = Universe::Fresh;
        Rng rng(derive_seed(spec.seed, 0x454e54ull, static_cast<uint64_t>(p.entity_id)));
        for (int a = 0; a < vocab::kNumAttrs; ++a) p.values[a] = static_cast<int>(rng.uniform_int(vocab::kPoolSize));
        p.features = fresh_features(rng);
        corpus.boundary_entities[corpus.boundary_entities.size() - n_noise + k] = p.entity_id;
        corpus.profiles.push_back(std::move(p));
    }

    // examples, in fixed split order
    auto add_rows = [&](const std::vector<int>& entity_ids, int t_begin, int t_end, Split split) {
        for (int id : entity_ids) {
            const Profile& p = profile_by_id(corpus.profiles, id);
            for (int t = t_begin; t < t_end; ++t) {
                corpus.examples.push_back(make_example(spec, p, t, split));
            }
        }
    };
    const int t_train = spec.n_templates_train;
    const int t_total = spec.n_templates_train + spec.n_templates_heldout;
    add_rows(corpus.forget_entities, 0, t_train, Split::Forget);
    add_rows(corpus.retain_entities, 0, t_train, Split::Retain);
    add_rows(corpus.boundary_entities, 0, t_train, Split::Boundary);
    add_rows(corpus.target_entities, 0, t_train, Split::Target);
    add_rows(corpus.forget_entities, t_train, t_total, Split::Test);
    add_rows(corpus.real_entities, 0, t_train, Split::Real);
    return corpus;
}

std::string jsonl_string(const Corpus& corpus) {
    std::string out;
    for (const Example& e : corpus.examples) {
        nlohmann::json row = {{"entity_id", e.entity_id},
                              {"image_features", e.image_features},
                              {"question_tokens", e.question_tokens},
                              {"answer_tokens", e.answer_tokens},
                              {"options", e.options},
                              {"split", split_name(e.split)}};
        out += row.dump();
        out += "\n";
    }
    return out;
}

void write_jsonl(const Corpus& corpus, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw CorruptionError("write_jsonl: cannot open " + path);
    f << jsonl_string(corpus);
    if (!f) throw CorruptionError("write_jsonl: write failed for " + path);
}

Corpus read_jsonl(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw CorruptionError("read_jsonl: cannot open " + path);
    Corpus corpus;
    std::string line;
    size_t lineno = 0;
    auto note_entity = [](std::vector<int>& ids, int id) {
        if (std::find(ids.begin(), ids.end(), id) == ids.end()) ids.push_back(id);
    };
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json row;
        try {
            row = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& ex) {
            throw CorruptionError("read_jsonl: line " + std::to_string(lineno) + ": " + ex.what());
        }
        Example e;
        try {
            e.entity_id = row.at("entity_id").get<int>();
            e.image_features = row.at("image_features").get<ImageFeatures>();
            e.question_tokens = row.at("question_tokens").get<Tokens>();
            e.answer_tokens = row.at("answer_tokens").get<Tokens>();
            e.options = row.at("options").get<std::vector<Tokens>>();
            e.split = split_from_name(row.at("split").get<std::string>());
        } catch (const nlohmann::json::exception& ex) {
            throw CorruptionError("read_jsonl: line " + std::to_string(lineno) + ": " + ex.what());
        }
        switch (e.split) {
            case Split::Forget: note_entity(corpus.forget_entities, e.entity_id); break;
            case Split::Retain: note_entity(corpus.retain_entities, e.entity_id); break;
            case Split::Boundary: note_entity(corpus.boundary_entities, e.entity_id); break;
            case Split::Target: note_entity(corpus.target_entities, e.entity_id); break;
            case Split::Real: note_entity(corpus.real_entities, e.entity_id); break;
            case Split::Test: break;
        }
        corpus.examples.push_back(std::move(e));
    }
    return corpus;
}

void write_vocab_manifest(const std::string& path) {
    nlohmann::json tokens = nlohmann::json::array();
    for (int id = 0; id < vocab::kSize; ++id) {
        tokens.push_back({{"id", id}, {"name", vocab::token_name(id)}});
    }
    nlohmann::json manifest = {{"vocab_size", vocab::kSize},
                               {"feature_dim", corpus_feature_dim()},
                               {"refusal_sequence", vocab::refusal_sequence()},
                               {"tokens", tokens}};
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw CorruptionError("write_vocab_manifest: cannot open " + path);
    f << manifest.dump(2) << "\n";
}

Tokens strip_structural(const Tokens& t) {
    Tokens out;
    for (int id : t) {
        if (id != vocab::kPad && id != vocab::kBos && id != vocab::kEos) out.push_back(id);
    }
    return out;
}

}  // namespace ulab
