#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>

#include "omoe/data.hpp"
#include "omoe/errors.hpp"

using namespace omoe;

namespace {

std::vector<int> random_tokens(std::size_t n, std::mt19937_64& rng) {
    std::vector<int> t(n);
    for (int& v : t) v = kByteOffset + static_cast<int>(rng() % 256);
    return t;
}

std::filesystem::path temp_path(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("omoe_test_" + name);
}

}  // namespace

TEST_CASE("byte tokenizer") {
    CHECK(tokenize("ab") == std::vector<int>{kByteOffset + 97, kByteOffset + 98});
    CHECK(tokenize("").empty());
    CHECK(detokenize(std::vector<int>{}).empty());
    CHECK(kVocabSize == 358);

    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 100; ++trial) {
        std::string s(rng() % 64, '\0');
        for (char& c : s) c = static_cast<char>(rng() % 256);
        CHECK(detokenize(tokenize(s)) == s);
    }
    CHECK_THROWS_AS(detokenize(std::vector<int>{kEosId}), DecodeError);
    CHECK_THROWS_AS(detokenize(std::vector<int>{kVocabSize}), DecodeError);
    CHECK_THROWS_AS(detokenize(std::vector<int>{-3}), DecodeError);
}

TEST_CASE("sentinels count down and stay unique") {
    std::vector<int> ids;
    for (std::size_t i = 0; i < static_cast<std::size_t>(kNumSentinels); ++i) ids.push_back(sentinel_id(i));
    CHECK(std::is_sorted(ids.rbegin(), ids.rend()));
    CHECK(std::adjacent_find(ids.begin(), ids.end()) == ids.end());
    CHECK(ids.front() == kByteOffset - 1);
    CHECK(ids.back() == kFirstSentinel);
    CHECK_THROWS_AS(sentinel_id(kNumSentinels), ContractError);
}

TEST_CASE("prefix_lm split") {
    std::mt19937_64 rng(2);
    TrainingExample ex = prefix_lm(random_tokens(10, rng), 0.5);
    CHECK(std::count(ex.target_ids.begin(), ex.target_ids.end(), kIgnoreLabel) == 5);
    CHECK(ex.supervised() == 5);
    CHECK(ex.visible_prefix == 5);

    CHECK(prefix_split(10, 0.999) == 1);
    CHECK(prefix_split(2, 0.9999) == 1);
    CHECK(prefix_split(10, 0.0001) == 9);

    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t len = 2 + rng() % 200;
        const auto toks = random_tokens(len, rng);
        const TrainingExample e = prefix_lm(toks, 0.5);
        // ceil(len / 2) in integer arithmetic.
        CHECK(static_cast<std::size_t>(std::count(e.target_ids.begin(), e.target_ids.end(), kIgnoreLabel)) ==
              (len + 1) / 2);
        CHECK(e.input_ids == toks);
    }
    CHECK_THROWS_AS(prefix_lm(random_tokens(1, rng), 0.5), ContractError);
}

TEST_CASE("causal_lm supervises every position after the first") {
    std::mt19937_64 rng(3);
    const auto toks = random_tokens(9, rng);
    const TrainingExample ex = causal_lm(toks);
    CHECK(ex.target_ids[0] == kIgnoreLabel);
    CHECK(std::equal(ex.target_ids.begin() + 1, ex.target_ids.end(), toks.begin() + 1));
}

TEST_CASE("single tail span") {
    std::mt19937_64 rng(4);
    const auto toks = random_tokens(12, rng);
    const Span tail{6, 6};
    const SpanCorruption sc = corrupt_spans(toks, std::span<const Span>(&tail, 1));
    std::vector<int> want_in(toks.begin(), toks.begin() + 6);
    want_in.push_back(sentinel_id(0));
    std::vector<int> want_tgt{sentinel_id(0)};
    want_tgt.insert(want_tgt.end(), toks.begin() + 6, toks.end());
    CHECK(sc.inputs == want_in);
    CHECK(sc.targets == want_tgt);
    CHECK(splice_back(sc.inputs, sc.targets) == toks);

    const Span overlapping[] = {{2, 3}, {4, 2}};
    CHECK_THROWS_AS(corrupt_spans(toks, overlapping), ContractError);
}

TEST_CASE("span corruption structure and splice-back over the mixture settings") {
    std::mt19937_64 rng(5);
    for (const DenoiserSpec& spec : ul2_mixture()) {
        if (spec.kind != ObjectiveKind::span_corrupt) continue;
        for (int trial = 0; trial < 300; ++trial) {
            const std::size_t len = 2 + rng() % 300;
            const auto toks = random_tokens(len, rng);
            auto sc = draw_span_corruption(toks, spec.mean_span, spec.mask_ratio, rng);
            if (std::llround(spec.mask_ratio * static_cast<double>(len)) < 1) {
                CHECK(!sc);
                continue;
            }
            REQUIRE(sc);
            CHECK(splice_back(sc->inputs, sc->targets) == toks);
            std::size_t masked = 0;
            for (std::size_t i = 0; i < sc->spans.size(); ++i) {
                masked += sc->spans[i].length;
                if (i > 0) CHECK(sc->spans[i].start > sc->spans[i - 1].start + sc->spans[i - 1].length);
            }
            CHECK(masked == std::min<std::size_t>(std::llround(spec.mask_ratio * len), len - 1));
            std::vector<int> sentinels;
            for (int id : sc->inputs)
                if (is_sentinel(id)) sentinels.push_back(id);
            CHECK(std::adjacent_find(sentinels.begin(), sentinels.end(), std::less_equal<>()) == sentinels.end());
        }
    }
}

TEST_CASE("realized mask fraction and span length on 512-token sequences") {
    std::mt19937_64 rng(6);
    for (const DenoiserSpec& spec : ul2_mixture()) {
        if (spec.kind != ObjectiveKind::span_corrupt) continue;
        double fraction = 0.0, span_len = 0.0;
        std::size_t spans = 0;
        const int samples = 2000;
        for (int i = 0; i < samples; ++i) {
            const auto toks = random_tokens(512, rng);
            const auto sc = draw_span_corruption(toks, spec.mean_span, spec.mask_ratio, rng);
            REQUIRE(sc);
            std::size_t masked = 0;
            for (int id : sc->targets) masked += !is_sentinel(id);
            fraction += static_cast<double>(masked) / 512.0;
            for (const Span& s : sc->spans) span_len += static_cast<double>(s.length);
            spans += sc->spans.size();
        }
        CHECK(std::abs(fraction / samples - spec.mask_ratio) <= 0.01);
        if (spec.mean_span <= 8.0) CHECK(std::abs(span_len / static_cast<double>(spans) - spec.mean_span) < 0.15 * spec.mean_span);
    }
}

TEST_CASE("low mask ratio supervises fewer positions") {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        const auto toks = random_tokens(64, rng);
        const auto low = span_corrupt(toks, 3.0, 0.15, rng);
        const auto high = span_corrupt(toks, 3.0, 0.5, rng);
        REQUIRE(low);
        REQUIRE(high);
        CHECK(low->supervised() < high->supervised());
        CHECK(low->supervised() >= 1);
        const std::size_t inputs = low->visible_prefix;
        CHECK(std::all_of(low->target_ids.begin(), low->target_ids.begin() + static_cast<std::ptrdiff_t>(inputs),
                          [](int t) { return t == kIgnoreLabel; }));
    }
    std::mt19937_64 r2(8);
    CHECK(!span_corrupt(random_tokens(1, r2), 3.0, 0.5, r2));
    CHECK(!span_corrupt(random_tokens(3, r2), 3.0, 0.15, r2));
}

TEST_CASE("corpus escaping and file round trip") {
    std::mt19937_64 rng(9);
    Corpus c{"code", {}};
    for (int i = 0; i < 50; ++i) {
        std::string d(rng() % 40, '\0');
        const char alphabet[] = "ab\\\n\t\rz=";
        for (char& ch : d) ch = alphabet[rng() % 8];
        c.documents.push_back(d);
        CHECK(unescape_document(escape_document(d)) == d);
        CHECK(escape_document(d).find('\n') == std::string::npos);
    }
    const auto path = temp_path("corpus.txt");
    write_corpus(path, c);
    const Corpus back = read_corpus(path);
    CHECK(back.domain == "code");
    CHECK(back.documents == c.documents);

    write_corpus(path, Corpus{"text", {}});
    CHECK(read_corpus(path).documents.empty());

    {
        std::ofstream bad(path);
        bad << "no header\n";
    }
    CHECK_THROWS_AS(read_corpus(path), DecodeError);
    CHECK_THROWS_AS(unescape_document("bad\\q"), DecodeError);
    CHECK_THROWS_AS(read_corpus(temp_path("missing_dir") / "x.txt"), IoError);
    std::filesystem::remove(path);
}

TEST_CASE("corpus generators") {
    for (const auto& domain : corpus_domains()) {
        const Corpus a = generate_corpus(domain, 20, 11), b = generate_corpus(domain, 20, 11);
        CHECK(a.documents == b.documents);
        CHECK(a.documents != generate_corpus(domain, 20, 12).documents);
        CHECK(generate_corpus(domain, 0, 1).documents.empty());
    }
    CHECK_THROWS_AS(generate_corpus("poetry", 1, 1), ConfigError);

    std::map<int, std::size_t> freq;
    for (const auto& doc : generate_corpus("code", 200, 3).documents)
        for (int id : tokenize(doc)) ++freq[id];
    std::vector<std::pair<std::size_t, int>> ranked;
    for (auto [id, n] : freq) ranked.push_back({n, id});
    std::sort(ranked.rbegin(), ranked.rend());
    const int newline = tokenize("\n")[0];
    CHECK(std::any_of(ranked.begin(), ranked.begin() + 3, [&](auto p) { return p.second == newline; }));

    for (const auto& doc : generate_corpus("multilingual", 100, 4).documents) {
        std::set<std::size_t> langs;
        for (int id : tokenize(doc))
            if (auto l = pseudo_language(id)) langs.insert(*l);
        CHECK(langs.size() == 1);
        for (std::size_t i = 0; i < doc.size(); ++i) {
            const auto byte = static_cast<unsigned char>(doc[i]);
            if (byte >= 0xC0) {
                REQUIRE(i + 1 < doc.size());
                CHECK((static_cast<unsigned char>(doc[i + 1]) & 0xC0) == 0x80);
            }
        }
    }
    CHECK(!pseudo_language(tokenize("a")[0]));
}

TEST_CASE("mixture validation and phases") {
    MixtureConfig m;
    CHECK_THROWS_AS(m.validate(), ConfigError);
    m.phases = {{0, {{"text", 0.6}, {"code", 0.4}}, ul2_mixture()}, {100, {{"text", 1.0}}, causal_mixture()}};
    CHECK_NOTHROW(m.validate());
    CHECK(&m.phase_at(0) == &m.phases[0]);
    CHECK(&m.phase_at(99) == &m.phases[0]);
    CHECK(&m.phase_at(100) == &m.phases[1]);
    CHECK(&m.phase_at(5000) == &m.phases[1]);

    MixtureConfig bad = m;
    bad.phases[0].domains[0].ratio = 0.5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = m;
    bad.phases[1].objectives[0].mix_weight = 0.9;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = m;
    bad.phases[1].start_step = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("sample_batch") {
    CorpusSet corpora;
    for (const auto& d : {"text", "code"}) corpora[d] = generate_corpus(d, 50, 21);

    MixtureConfig single{{{0, {{"code", 1.0}}, {{ObjectiveKind::prefix_lm, 0.0, 0.5, 1.0}}}}};
    for (const auto& ex : sample_batch(corpora, single, 1, 32, 48, 7)) {
        CHECK(ex.domain_tag == "code");
        CHECK(ex.objective_tag == "prefix_lm(r=0.5)");
    }

    MixtureConfig mix{{{0, {{"text", 0.5}, {"code", 0.5}}, ul2_mixture()},
                       {10, {{"text", 1.0}}, causal_mixture()}}};
    const auto a = sample_batch(corpora, mix, 3, 16, 48, 7);
    const auto b = sample_batch(corpora, mix, 3, 16, 48, 7);
    const auto c = sample_batch(corpora, mix, 4, 16, 48, 7);
    auto ids = [](const std::vector<TrainingExample>& v) {
        std::vector<std::vector<int>> out;
        for (const auto& e : v) out.push_back(e.input_ids);
        return out;
    };
    CHECK(ids(a) == ids(b));
    CHECK(ids(a) != ids(c));
    for (const auto& ex : a) {
        CHECK(ex.input_ids.size() <= 48);
        CHECK(ex.input_ids.size() == ex.target_ids.size());
        CHECK(ex.supervised() >= 1);
    }
    for (const auto& ex : sample_batch(corpora, mix, 10, 16, 48, 7)) {
        CHECK(ex.domain_tag == "text");
        CHECK(ex.objective_tag == "causal_lm");
    }

    std::map<std::string, double> domains, objectives;
    const std::size_t draws = 100000, per_step = 1000;
    for (std::size_t step = 0; step < draws / per_step; ++step)
        for (const auto& ex : sample_batch(corpora, MixtureConfig{{mix.phases[0]}}, step, per_step, 48, 99)) {
            domains[ex.domain_tag] += 1.0 / draws;
            objectives[ex.objective_tag] += 1.0 / draws;
        }
    CHECK(std::abs(domains["text"] - 0.5) <= 0.01);
    for (const auto& spec : ul2_mixture()) CHECK(std::abs(objectives[spec.tag()] - spec.mix_weight) <= 0.01);

    MixtureConfig unknown{{{0, {{"legal", 1.0}}, causal_mixture()}}};
    CHECK_THROWS_AS(sample_batch(corpora, unknown, 0, 1, 16, 1), ConfigError);
}

TEST_CASE("make_batch shifts targets into next-token labels") {
    std::mt19937_64 rng(30);
    std::vector<TrainingExample> exs{prefix_lm(random_tokens(6, rng)), causal_lm(random_tokens(4, rng))};
    exs[0].domain_tag = "text";
    const Batch b = make_batch(exs, 8, true, 40);
    CHECK(b.tokens.size() == 16);
    for (std::size_t s = 0; s < 2; ++s)
        for (std::size_t i = 0; i < 8; ++i) {
            const auto& ex = exs[s];
            const int want = i + 1 < ex.input_ids.size() ? ex.target_ids[i + 1] : kIgnoreLabel;
            CHECK(b.labels[s * 8 + i] == want);
            CHECK(b.tokens[s * 8 + i] == (i < ex.input_ids.size() ? ex.input_ids[i] : kPadId));
        }
    CHECK(b.visible_prefix == std::vector<std::size_t>{3, 0});
    CHECK(b.seq_ids == std::vector<std::size_t>{40, 41});
    CHECK(make_batch(exs, 8, false).visible_prefix.empty());
    CHECK_THROWS_AS(make_batch(exs, 5, false), ContractError);
}

TEST_CASE("eval windows cover documents in order") {
    Corpus c{"text", {"abcdefghij", "xy"}};
    const auto w = eval_windows(c, 4, 100);
    REQUIRE(w.size() == 4);
    CHECK(detokenize(w[0].input_ids) == "abcd");
    CHECK(w[2].input_ids.size() == 3);
    CHECK(w[2].input_ids.back() == kEosId);
    CHECK(eval_windows(c, 4, 2).size() == 2);
}
