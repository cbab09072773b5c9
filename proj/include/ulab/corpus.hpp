#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "ulab/model.hpp"

namespace ulab {

// Fixed 128-token vocabulary. Attribute values occupy one block of 8 ids per
// attribute and universe; the refusal phrase has its own word ids.
namespace vocab {
constexpr int kPad = 0;
constexpr int kBos = 1;
constexpr int kEos = 2;
constexpr int kImg = 3;
constexpr int kQMark = 4;
constexpr int kSep = 5;
constexpr int kQAttrBase = 6;    // 4 ids, one per attribute
constexpr int kVariantBase = 10;  // 4 ids, phrasing variants
constexpr int kRefusalBase = 14;  // 7 ids: THIS CANNOT BE INFERRED FROM THE IMAGE
constexpr int kRefusalLen = 7;
constexpr int kFictValueBase = 21;  // 4 attributes x 8 values
constexpr int kRealValueBase = 53;  // 4 attributes x 8 values
constexpr int kSize = 128;

constexpr int kNumAttrs = 4;
constexpr int kPoolSize = 8;

std::string token_name(int id);
Tokens refusal_sequence();
}  // namespace vocab

// Feature layout: one-hot blocks for the 4 fictional attribute pools, then
// one-hot blocks for the 4 real-universe pools. Fresh entities (refusal
// targets, noise boundary items) carry unstructured gaussian features.
int corpus_feature_dim();

enum class Split { Forget, Retain, Boundary, Target, Test, Real };

std::string split_name(Split s);
Split split_from_name(const std::string& name);

struct SplitSpec {
    int n_entities = 60;
    double forget_ratio = 0.05;
    double boundary_fraction_of_retain = 0.273;
    double boundary_noise_fraction = 0.0;
    int n_templates_train = 6;
    int n_templates_heldout = 2;
    int n_real_entities = 12;
    int n_target_entities = 24;
    double feature_noise_sigma = 0.1;
    int n_image_tokens = 4;
    uint64_t seed = 0;

    void validate() const;
};

enum class Universe { Fictional = 0, Real = 1, Fresh = 2 };

struct Profile {
    int entity_id = 0;
    Universe universe = Universe::Fictional;
    std::array<int, vocab::kNumAttrs> values{};  // pool indices; -1 for fresh entities
    ImageFeatures features;
};

struct Example {
    int entity_id = 0;
    ImageFeatures image_features;
    Tokens question_tokens;
    Tokens answer_tokens;
    std::vector<Tokens> options;
    Split split = Split::Retain;

    bool operator==(const Example&) const = default;
};

struct Corpus {
    SplitSpec spec;
    std::vector<Profile> profiles;
    std::vector<Example> examples;
    std::vector<int> forget_entities;
    std::vector<int> retain_entities;
    std::vector<int> boundary_entities;  // may include fresh noise entities
    std::vector<int> target_entities;
    std::vector<int> real_entities;

    std::vector<const Example*> split_view(Split s) const;
};

// Question = [BOS, IMG x n, QMARK, attribute word, phrasing word]. Templates
// 0..5 are the training phrasings, 6..7 are held out.
Tokens render_question(int template_id, int n_image_tokens);
int template_attribute(int template_id);

// Retain entities ranked by max cosine similarity of their image features to
// any forget entity; returns the top fraction (at least one).
std::vector<int> select_boundary_set(const std::vector<Profile>& profiles, const std::vector<int>& forget_ids,
                                     const std::vector<int>& retain_ids, double fraction);

Corpus generate_corpus(const SplitSpec& spec);

std::string jsonl_string(const Corpus& corpus);
void write_jsonl(const Corpus& corpus, const std::string& path);
Corpus read_jsonl(const std::string& path);

void write_vocab_manifest(const std::string& path);

// Answer/option comparisons ignore BOS/EOS/PAD framing.
Tokens strip_structural(const Tokens& t);

}  // namespace ulab
