#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "ulab/corpus.hpp"
#include "ulab/errors.hpp"

using namespace ulab;

namespace {

int count_split(const Corpus& c, Split s) { return static_cast<int>(c.split_view(s).size()); }

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

bool in_fictional_value_range(int tok) {
    return tok >= vocab::kFictValueBase && tok < vocab::kFictValueBase + vocab::kNumAttrs * vocab::kPoolSize;
}

bool in_real_value_range(int tok) {
    return tok >= vocab::kRealValueBase && tok < vocab::kRealValueBase + vocab::kNumAttrs * vocab::kPoolSize;
}

}  // namespace

TEST_CASE("generation is deterministic and splits partition the entity pool") {
    SplitSpec spec;
    Corpus a = generate_corpus(spec);
    Corpus b = generate_corpus(spec);
    REQUIRE(a.examples.size() == b.examples.size());
    CHECK(a.examples == b.examples);
    CHECK(a.forget_entities == b.forget_entities);
    CHECK(a.boundary_entities == b.boundary_entities);

    CHECK(a.forget_entities.size() == 3);
    CHECK(a.retain_entities.size() == 57);
    CHECK(a.boundary_entities.size() == 16);
    CHECK(a.target_entities.size() == 12);
    CHECK(a.real_entities.size() == 12);

    std::set<int> forget(a.forget_entities.begin(), a.forget_entities.end());
    std::set<int> retain(a.retain_entities.begin(), a.retain_entities.end());
    std::vector<int> overlap;
    std::set_intersection(forget.begin(), forget.end(), retain.begin(), retain.end(), std::back_inserter(overlap));
    CHECK(overlap.empty());
    CHECK(forget.size() + retain.size() == 60);
    for (int id : a.boundary_entities) CHECK(retain.count(id) == 1);

    CHECK(count_split(a, Split::Forget) == 18);
    CHECK(count_split(a, Split::Retain) == 342);
    CHECK(count_split(a, Split::Boundary) == 96);
    CHECK(count_split(a, Split::Target) == 72);
    CHECK(count_split(a, Split::Test) == 6);
    CHECK(count_split(a, Split::Real) == 72);
    CHECK(a.examples.size() == 606);

    Corpus other = generate_corpus({.seed = 1});
    CHECK(a.examples != other.examples);
}

TEST_CASE("zero-noise features are exact one-hot attribute blocks") {
    SplitSpec spec;
    spec.feature_noise_sigma = 0.0;
    Corpus c = generate_corpus(spec);
    const int block = vocab::kNumAttrs * vocab::kPoolSize;
    for (const Profile& p : c.profiles) {
        if (p.universe == Universe::Fresh) continue;
        const int base = p.universe == Universe::Real ? block : 0;
        REQUIRE(p.features.size() == static_cast<size_t>(2 * block));
        double sum = 0.0;
        for (double x : p.features) sum += x;
        CHECK(sum == static_cast<double>(vocab::kNumAttrs));
        for (int a = 0; a < vocab::kNumAttrs; ++a) {
            CHECK(p.features[base + a * vocab::kPoolSize + p.values[a]] == 1.0);
        }
        // the other universe's block stays empty
        for (int i = 0; i < block; ++i) {
            CHECK(p.features[(base + block + i) % (2 * block)] == (0.0));
        }
    }
}

TEST_CASE("fresh-entity features sit far from every structured profile") {
    Corpus c = generate_corpus(SplitSpec{});
    double min_dist = 1e300;
    for (int tid : c.target_entities) {
        const Profile* tp = nullptr;
        for (const Profile& p : c.profiles) {
            if (p.entity_id == tid) tp = &p;
        }
        REQUIRE(tp != nullptr);
        for (const Profile& p : c.profiles) {
            if (p.universe == Universe::Fresh) continue;
            double d2 = 0.0;
            for (size_t i = 0; i < p.features.size(); ++i) {
                const double diff = tp->features[i] - p.features[i];
                d2 += diff * diff;
            }
            min_dist = std::min(min_dist, std::sqrt(d2));
        }
    }
    CHECK(min_dist > 1.0);
}

TEST_CASE("boundary ranking prefers the most forget-similar retain entities") {
    std::vector<Profile> profiles(3);
    profiles[0] = {.entity_id = 0, .universe = Universe::Fictional, .values = {}, .features = {1.0, 0.0, 0.0}};
    profiles[1] = {.entity_id = 1, .universe = Universe::Fictional, .values = {}, .features = {2.0, 0.0, 0.0}};
    profiles[2] = {.entity_id = 2, .universe = Universe::Fictional, .values = {}, .features = {0.0, 1.0, 0.0}};

    auto top1 = select_boundary_set(profiles, {0}, {1, 2}, 0.5);
    REQUIRE(top1.size() == 1);
    CHECK(top1[0] == 1);  // cosine 1 beats cosine 0

    auto both = select_boundary_set(profiles, {0}, {1, 2}, 1.0);
    REQUIRE(both.size() == 2);
    CHECK(both[0] == 1);
    CHECK(both[1] == 2);

    // a tiny fraction still yields at least one entity
    auto at_least_one = select_boundary_set(profiles, {0}, {1, 2}, 0.01);
    CHECK(at_least_one.size() == 1);

    CHECK_THROWS_AS(select_boundary_set(profiles, {}, {1}, 0.5), DimError);
    CHECK_THROWS_AS(select_boundary_set(profiles, {0}, {1}, 0.0), ConfigError);
}

TEST_CASE("the true answer appears exactly once among the options") {
    Corpus c = generate_corpus(SplitSpec{});
    const Tokens refusal = vocab::refusal_sequence();
    for (const Example& e : c.examples) {
        REQUIRE(e.options.size() == 4);
        Tokens truth = e.answer_tokens;
        REQUIRE(truth.back() == vocab::kEos);
        truth.pop_back();
        int hits = 0;
        for (const Tokens& o : e.options) {
            if (o == truth) ++hits;
        }
        CHECK(hits == 1);
        std::set<Tokens> uniq(e.options.begin(), e.options.end());
        CHECK(uniq.size() == 4);

        const int attr = e.question_tokens[e.question_tokens.size() - 2] - vocab::kQAttrBase;
        if (e.split == Split::Target) {
            CHECK(truth == refusal);
            for (const Tokens& o : e.options) {
                if (o == truth) continue;
                REQUIRE(o.size() == 1);
                CHECK(in_fictional_value_range(o[0]));
                CHECK((o[0] - vocab::kFictValueBase) / vocab::kPoolSize == attr);
            }
        } else {
            REQUIRE(truth.size() == 1);
            const bool real_row = e.split == Split::Real;
            for (const Tokens& o : e.options) {
                REQUIRE(o.size() == 1);
                if (real_row) {
                    CHECK(in_real_value_range(o[0]));
                    CHECK((o[0] - vocab::kRealValueBase) / vocab::kPoolSize == attr);
                } else {
                    CHECK(in_fictional_value_range(o[0]));
                    CHECK((o[0] - vocab::kFictValueBase) / vocab::kPoolSize == attr);
                }
            }
        }
    }
}

TEST_CASE("noise fraction swaps the ranked tail for fresh entities") {
    SplitSpec spec;
    spec.boundary_noise_fraction = 0.5;
    Corpus c = generate_corpus(spec);
    REQUIRE(c.boundary_entities.size() == 16);
    int n_fresh = 0;
    for (size_t i = 0; i < c.boundary_entities.size(); ++i) {
        const int id = c.boundary_entities[i];
        if (id >= 3000) {
            ++n_fresh;
            CHECK(i >= 8);  // replacements occupy the tail of the ranking
        } else {
            CHECK(id < 60);
        }
    }
    CHECK(n_fresh == 8);
    CHECK(count_split(c, Split::Boundary) == 96);
    for (const Example* e : c.split_view(Split::Boundary)) {
        if (e->entity_id >= 3000) {
            REQUIRE(e->answer_tokens.size() == 2);
            CHECK(in_fictional_value_range(e->answer_tokens[0]));
        }
    }
}

TEST_CASE("questions follow the fixed layout and heldout phrasings stay unseen") {
    SplitSpec spec;
    Corpus c = generate_corpus(spec);
    std::set<std::pair<int, int>> train_pairs, test_pairs;
    for (const Example& e : c.examples) {
        REQUIRE(e.question_tokens.size() == static_cast<size_t>(4 + spec.n_image_tokens));
        CHECK(e.question_tokens[0] == vocab::kBos);
        for (int i = 1; i <= spec.n_image_tokens; ++i) CHECK(e.question_tokens[i] == vocab::kImg);
        CHECK(e.question_tokens[spec.n_image_tokens + 1] == vocab::kQMark);
        const int attr = e.question_tokens[e.question_tokens.size() - 2] - vocab::kQAttrBase;
        const int variant = e.question_tokens.back() - vocab::kVariantBase;
        REQUIRE(attr >= 0);
        REQUIRE(attr < vocab::kNumAttrs);
        REQUIRE(variant >= 0);
        REQUIRE(variant < 4);
        if (e.split == Split::Test) {
            test_pairs.insert({attr, variant});
        } else {
            train_pairs.insert({attr, variant});
        }
    }
    CHECK(train_pairs.size() == static_cast<size_t>(spec.n_templates_train));
    CHECK(test_pairs.size() == static_cast<size_t>(spec.n_templates_heldout));
    for (const auto& p : test_pairs) CHECK(train_pairs.count(p) == 0);
}

TEST_CASE("jsonl round trip preserves rows, order, and entity lists") {
    Corpus c = generate_corpus(SplitSpec{});
    const std::string path = "corpus_roundtrip.jsonl";
    write_jsonl(c, path);
    const std::string bytes1 = slurp(path);
    write_jsonl(c, path);
    CHECK(bytes1 == slurp(path));

    Corpus r = read_jsonl(path);
    CHECK(r.examples == c.examples);
    CHECK(r.forget_entities == c.forget_entities);
    CHECK(r.retain_entities == c.retain_entities);
    CHECK(r.boundary_entities == c.boundary_entities);
    CHECK(r.target_entities == c.target_entities);
    CHECK(r.real_entities == c.real_entities);
    std::remove(path.c_str());

    std::ofstream bad("corpus_bad.jsonl", std::ios::trunc);
    bad << "{\"entity_id\": 1}\n";
    bad.close();
    CHECK_THROWS_AS(read_jsonl("corpus_bad.jsonl"), CorruptionError);
    std::remove("corpus_bad.jsonl");
    CHECK_THROWS_AS(read_jsonl("corpus_missing.jsonl"), CorruptionError);
}

TEST_CASE("vocab manifest names every token and pins the refusal phrase") {
    const std::string path = "vocab_manifest.json";
    write_vocab_manifest(path);
    nlohmann::json m = nlohmann::json::parse(slurp(path));
    std::remove(path.c_str());
    CHECK(m.at("vocab_size").get<int>() == vocab::kSize);
    CHECK(m.at("feature_dim").get<int>() == corpus_feature_dim());
    REQUIRE(m.at("tokens").size() == static_cast<size_t>(vocab::kSize));
    CHECK(m.at("tokens")[vocab::kRefusalBase].at("name").get<std::string>() == "THIS");
    const Tokens refusal = m.at("refusal_sequence").get<Tokens>();
    CHECK(refusal == vocab::refusal_sequence());
    CHECK(m.at("tokens")[vocab::kImg].at("name").get<std::string>() == "IMG");
}

TEST_CASE("structural stripping drops only padding and sentinels") {
    const Tokens mixed = {vocab::kBos, vocab::kImg, 25, vocab::kPad, vocab::kQMark, vocab::kEos};
    CHECK(strip_structural(mixed) == Tokens{vocab::kImg, 25, vocab::kQMark});
    CHECK(strip_structural({}).empty());
    CHECK(strip_structural({vocab::kBos, vocab::kEos}).empty());
}

TEST_CASE("malformed requests are rejected with clear errors") {
    CHECK_THROWS_AS(render_question(-1, 4), DimError);
    CHECK_THROWS_AS(render_question(16, 4), DimError);
    CHECK_THROWS_AS(split_from_name("bogus"), CorruptionError);
    CHECK_THROWS_AS(vocab::token_name(vocab::kSize), DimError);

    SplitSpec bad;
    bad.forget_ratio = 0.0;
    CHECK_THROWS_AS(generate_corpus(bad), ConfigError);
    bad = SplitSpec{};
    bad.n_templates_train = 15;
    bad.n_templates_heldout = 2;
    CHECK_THROWS_AS(generate_corpus(bad), ConfigError);
}
