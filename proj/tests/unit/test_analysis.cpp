#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <sstream>
#include <unordered_set>

#include "omoe/analysis.hpp"
#include "omoe/errors.hpp"

using namespace omoe;

namespace {

TraceRow row(std::size_t seq, std::size_t pos, int tok, const std::string& dom, std::size_t layer,
             std::vector<std::size_t> experts, std::vector<std::uint8_t> kept) {
    return {seq, pos, tok, dom, layer, std::move(experts), std::move(kept)};
}

RoutingTrace random_trace(std::mt19937_64& rng, std::size_t seqs, std::size_t len, std::size_t E, int vocab) {
    RoutingTrace t;
    const char* domains[] = {"text", "code", "chat"};
    for (std::size_t s = 0; s < seqs; ++s) {
        const std::string dom = domains[rng() % 3];
        for (std::size_t layer : {1u, 3u})
            for (std::size_t p = 0; p < len; ++p) {
                const std::size_t e0 = rng() % E;
                std::size_t e1 = rng() % E;
                if (e1 == e0) e1 = (e1 + 1) % E;
                t.push_back(row(s, p, kByteOffset + static_cast<int>(rng() % vocab), dom, layer, {e0, e1},
                                {static_cast<std::uint8_t>(rng() % 4 != 0), static_cast<std::uint8_t>(rng() % 3 != 0)}));
            }
    }
    return t;
}

}  // namespace

TEST_CASE("expert_ratios examples") {
    RoutingTrace t;
    for (std::size_t p = 0; p < 5; ++p) t.push_back(row(0, p, 42, "text", 1, {3, 0}, {1, 1}));
    const auto r = expert_ratios(t, GroupBy::token_id, 1, 8);
    REQUIRE(r.groups.size() == 1);
    CHECK(r.groups[0].ratios == std::vector<double>{0, 0, 0, 1, 0, 0, 0, 0});

    RoutingTrace two{row(0, 0, 5, "code", 1, {0, 2}, {1, 1}), row(0, 1, 6, "code", 1, {1, 2}, {1, 1})};
    const auto d = expert_ratios(two, GroupBy::domain, 1, 8);
    REQUIRE(d.groups.size() == 1);
    CHECK(d.groups[0].ratios == std::vector<double>{0.5, 0.5, 0, 0, 0, 0, 0, 0});
    CHECK(d.groups[0].support == 2);

    RoutingTrace dropped_only{row(0, 0, 9, "text", 1, {2, 1}, {0, 1})};
    const auto kept_only = expert_ratios(dropped_only, GroupBy::token_id, 1, 4);
    CHECK(kept_only.groups.empty());
    CHECK(kept_only.warnings.size() == 1);
    CHECK(expert_ratios(dropped_only, GroupBy::token_id, 1, 4, {true, false}).groups[0].ratios[2] == 1.0);
    CHECK(expert_ratios(dropped_only, GroupBy::token_id, 1, 4, {false, true}).groups[0].ratios[1] == 1.0);
    CHECK_THROWS_AS(expert_ratios(dropped_only, GroupBy::token_id, 7, 4), ContractError);
}

TEST_CASE("expert_ratios equal a naive tally") {
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 5; ++trial) {
        const std::size_t E = 2 + rng() % 7;
        const RoutingTrace t = random_trace(rng, 40, 32, E, 20);
        for (GroupBy g : {GroupBy::domain, GroupBy::token_id, GroupBy::position_id})
            for (bool include : {false, true})
                for (bool ranks : {false, true}) {
                    const auto report = expert_ratios(t, g, 3, E, {include, ranks});
                    for (const GroupRatios& grp : report.groups) {
                        std::vector<double> count(E, 0.0);
                        std::size_t support = 0;
                        for (const TraceRow& r : t) {
                            if (r.layer != 3) continue;
                            const std::string key = g == GroupBy::domain      ? r.domain
                                                    : g == GroupBy::token_id ? std::to_string(r.token_id)
                                                                             : std::to_string(r.position);
                            if (key != grp.key) continue;
                            ++support;
                            for (std::size_t j = 0; j < (ranks ? 2u : 1u); ++j)
                                if (include || r.kept[j]) count[r.experts[j]] += 1.0;
                        }
                        double total = 0.0;
                        for (double c : count) total += c;
                        CHECK(grp.support == support);
                        double sum = 0.0;
                        for (std::size_t e = 0; e < E; ++e) {
                            CHECK(grp.ratios[e] == count[e] / total);
                            sum += grp.ratios[e];
                        }
                        CHECK(std::abs(sum - 1.0) < 1e-9);
                    }
                }
    }
}

TEST_CASE("language grouping uses pseudo-language bytes only") {
    const int lang2_lead = kByteOffset + 0xC6, lang1_cont = kByteOffset + 0x88, ascii = kByteOffset + 'a';
    RoutingTrace t{row(0, 0, lang2_lead, "multilingual", 1, {1, 0}, {1, 1}),
                   row(0, 1, lang1_cont, "multilingual", 1, {2, 0}, {1, 1}),
                   row(0, 2, ascii, "multilingual", 1, {3, 0}, {1, 1})};
    const auto r = expert_ratios(t, GroupBy::language, 1, 4);
    REQUIRE(r.groups.size() == 2);
    CHECK(r.groups[0].key == "lang1");
    CHECK(r.groups[0].ratios[2] == 1.0);
    CHECK(r.groups[1].key == "lang2");
}

TEST_CASE("routing_std") {
    SpecializationReport rep;
    rep.num_experts = 32;
    GroupRatios onehot{"7", 200, std::vector<double>(32, 0.0)};
    onehot.ratios[4] = 1.0;
    GroupRatios uniform{"8", 300, std::vector<double>(32, 1.0 / 32)};
    GroupRatios sparse{"9", 10, std::vector<double>(32, 1.0 / 32)};
    rep.groups = {onehot, uniform, sparse};
    const auto stds = routing_std(rep, 128);
    REQUIRE(stds.size() == 2);
    const double closed = std::sqrt(std::pow(1 - 1.0 / 32, 2) / 32 + 31 * std::pow(1.0 / 32, 2) / 32);
    CHECK(std::abs(stds[0].std - closed) < 1e-15);
    CHECK(std::abs(closed - 0.1740) < 1e-4);
    CHECK(stds[1].std < 1e-15);
    CHECK(mean_std(stds) == doctest::Approx(closed / 2));
    CHECK(routing_std(rep, 5).size() == 3);
}

TEST_CASE("top_tokens") {
    RoutingTrace t;
    std::size_t p = 0;
    for (auto [tok, n] : std::vector<std::pair<int, int>>{{300, 1}, {200, 2}, {250, 3}, {199, 2}})
        for (int i = 0; i < n; ++i) t.push_back(row(0, p++, tok, "x", 1, {1, 0}, {1, 1}));
    t.push_back(row(0, p++, 111, "x", 1, {1, 0}, {0, 1}));  // dropped from expert 1
    const auto top = top_tokens(t, 1, 1, 10);
    CHECK(top == std::vector<TokenCount>{{250, 3}, {199, 2}, {200, 2}, {300, 1}});
    CHECK(top_tokens(t, 1, 1, 2).size() == 2);
    CHECK(top_tokens(t, 0, 1, 10) == std::vector<TokenCount>{{250, 3}, {199, 2}, {200, 2}, {111, 1}, {300, 1}});
    CHECK(top_tokens(t, 5, 1, 10).empty());

    std::mt19937_64 rng(2);
    const RoutingTrace rt = random_trace(rng, 50, 40, 4, 30);
    for (std::size_t e = 0; e < 4; ++e) {
        const auto got = top_tokens(rt, e, 1, 5);
        std::map<int, std::size_t> naive;
        for (const TraceRow& r : rt)
            if (r.layer == 1)
                for (std::size_t j = 0; j < 2; ++j)
                    if (r.experts[j] == e && r.kept[j]) ++naive[r.token_id];
        std::vector<TokenCount> all;
        for (auto [tok, c] : naive) all.push_back({tok, c});
        std::sort(all.begin(), all.end(), [](auto a, auto b) {
            return a.count != b.count ? a.count > b.count : a.token_id < b.token_id;
        });
        all.resize(std::min<std::size_t>(5, all.size()));
        CHECK(got == all);
    }
}

TEST_CASE("drop_curve on the skewed capacity case") {
    // Six tokens that all prefer expert 0 with E=2, K=1 and C=2.
    Tensor x(Shape{6, 2}, 0.0);
    for (std::size_t t = 0; t < 6; ++t) x.at(t, 0) = 1.0;
    const Tensor w = Tensor::matrix({{2.0, 0.0}, {0.0, 0.0}});
    const RouterConfig cfg{2, 1, 2.0 / 3.0, DropPolicy::position_priority};
    REQUIRE(cfg.capacity(6) == 2);
    const RouterOutput routing = route(x, w, cfg);
    const std::vector<int> toks(6, kByteOffset);
    const auto curves = drop_curve(trace_from_routing(routing, toks, 0, "skew", 1), 1);
    std::vector<double> ratios;
    for (const auto& b : curves.at("skew")) ratios.push_back(b.ratio());
    CHECK(ratios == std::vector<double>{0, 0, 1, 1, 1, 1});

    RouterConfig loose = cfg;
    loose.capacity_factor = 10.0;
    const auto none = drop_curve(trace_from_routing(route(x, w, loose), toks, 0, "skew", 1), 2);
    for (const auto& b : none.at("skew")) CHECK(b.ratio() == 0.0);
    CHECK_THROWS_AS(drop_curve({}, 0), ConfigError);
}

TEST_CASE("drop_curve equals a naive recount") {
    std::mt19937_64 rng(3);
    const RoutingTrace t = random_trace(rng, 30, 50, 4, 10);
    for (std::size_t bucket : {1u, 7u, 16u}) {
        const auto curves = drop_curve(t, bucket, 3);
        for (const auto& [dom, curve] : curves)
            for (const DropBucket& b : curve) {
                std::size_t dropped = 0, total = 0;
                for (const TraceRow& r : t)
                    if (r.layer == 3 && r.domain == dom && r.position >= b.begin && r.position < b.end)
                        for (auto k : r.kept) {
                            ++total;
                            dropped += !k;
                        }
                CHECK(b.dropped == dropped);
                CHECK(b.total == total);
                CHECK(b.ratio() >= 0.0);
                CHECK(b.ratio() <= 1.0);
            }
    }
    const std::vector<DropBucket> c{{0, 1, 0, 4}, {1, 2, 1, 4}, {2, 3, 2, 4}, {3, 4, 1, 4}, {4, 5, 3, 4}, {5, 6, 4, 4}};
    const auto thirds = drop_thirds(c);
    CHECK(thirds.first == doctest::Approx(1.0 / 8));
    CHECK(thirds.last == doctest::Approx(7.0 / 8));
}

TEST_CASE("routing_overlap") {
    std::mt19937_64 rng(4);
    const RoutingTrace t = random_trace(rng, 40, 30, 4, 25);
    CHECK(routing_overlap(t, t, 1).overlap == 1.0);

    RoutingTrace clean;
    for (int tok = 0; tok < 10; ++tok)
        for (std::size_t p = 0; p < 3; ++p)
            clean.push_back(row(tok, p, kByteOffset + tok, "x", 1, {static_cast<std::size_t>(tok % 4), 0}, {1, 1}));
    RoutingTrace shifted = clean;
    for (TraceRow& r : shifted) r.experts[0] = (r.experts[0] + 1) % 4;
    CHECK(routing_overlap(clean, shifted, 1).overlap == 0.0);

    const RoutingTrace other = random_trace(rng, 40, 30, 4, 25);
    CHECK(routing_overlap(t, other, 1).overlap == routing_overlap(other, t, 1).overlap);

    RoutingTrace disjoint = clean;
    for (TraceRow& r : disjoint) r.token_id += 100;
    CHECK_THROWS_AS(routing_overlap(clean, disjoint, 1), ContractError);
    CHECK_THROWS_AS(routing_overlap(clean, clean, 1, 4), ContractError);
}

TEST_CASE("corpus_token_stats") {
    const TokenStats a = corpus_token_stats(Corpus{"t", {"aaaa"}});
    CHECK(a.num_tokens == 4);
    CHECK(a.vocab_used == 1);
    const TokenStats e = corpus_token_stats(Corpus{"t", {}});
    CHECK(e.num_tokens == 0);
    CHECK(e.vocab_used == 0);

    const Corpus c = generate_corpus("code", 50, 9);
    std::unordered_set<unsigned char> seen;
    std::size_t n = 0;
    for (const auto& d : c.documents)
        for (unsigned char ch : d) {
            seen.insert(ch);
            ++n;
        }
    const TokenStats s = corpus_token_stats(c);
    CHECK(s.num_tokens == n);
    CHECK(s.vocab_used == seen.size());
}

TEST_CASE("trace CSV round trip and validation") {
    std::mt19937_64 rng(5);
    const RoutingTrace t = random_trace(rng, 5, 10, 8, 50);
    std::stringstream ss;
    write_trace_csv(ss, t);
    std::string header;
    std::getline(std::stringstream(ss.str()), header);
    CHECK(header == "seq_id,position,token_id,domain,layer,rank0_expert,rank0_kept,rank1_expert,rank1_kept");
    CHECK(read_trace_csv(ss) == t);
    CHECK_NOTHROW(validate_trace(t, 8));
    CHECK_THROWS_AS(validate_trace(t, 2), ContractError);

    RoutingTrace backwards{row(0, 3, 1, "x", 1, {0, 1}, {1, 1}), row(0, 2, 1, "x", 1, {0, 1}, {1, 1})};
    CHECK_THROWS_AS(validate_trace(backwards, 2), ContractError);

    std::stringstream bad("seq_id,position\n1,2\n");
    CHECK_THROWS_AS(read_trace_csv(bad), DecodeError);
    std::stringstream bad_row(
        "seq_id,position,token_id,domain,layer,rank0_expert,rank0_kept\n0,0,5,x,1,2\n");
    CHECK_THROWS_AS(read_trace_csv(bad_row), DecodeError);
    std::stringstream bad_flag(
        "seq_id,position,token_id,domain,layer,rank0_expert,rank0_kept\n0,0,5,x,1,2,7\n");
    CHECK_THROWS_AS(read_trace_csv(bad_flag), DecodeError);

    RoutingTrace comma{row(0, 0, 1, "a,b", 1, {0, 1}, {1, 1})};
    std::stringstream out;
    CHECK_THROWS_AS(write_trace_csv(out, comma), ContractError);
}

TEST_CASE("report rendering") {
    CHECK(token_label(kByteOffset + '\n') == "\\n");
    CHECK(token_label(kByteOffset + 'q') == "q");
    CHECK(token_label(kByteOffset + 0xC5) == "0xC5");
    CHECK(token_label(kEosId) == "<eos>");
    CHECK(token_label(sentinel_id(0)) == "<extra_id_0>");

    std::map<std::size_t, std::vector<TokenCount>> per{{0, {{kByteOffset + ',', 3}}}};
    CHECK(top_tokens_csv(per) == "expert,rank,token_id,token,count\n0,0," + std::to_string(kByteOffset + ',') +
                                     ",\",\",3\n");

    std::mt19937_64 rng(6);
    const RoutingTrace t = random_trace(rng, 10, 10, 4, 5);
    const auto rep = expert_ratios(t, GroupBy::domain, 1, 4);
    const std::string svg = ratios_svg(rep);
    CHECK(svg.starts_with("<svg"));
    CHECK(svg.ends_with("</svg>\n"));
    const std::string curve = drop_curve_svg(drop_curve(t, 2, 1));
    CHECK(curve.find("<polyline") != std::string::npos);
}
