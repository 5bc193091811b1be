#include "omoe/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>

#include "omoe/errors.hpp"

namespace omoe {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string field;
    std::istringstream ss(line);
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (!line.empty() && line.back() == ',') fields.emplace_back();
    return fields;
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

std::size_t parse_size(const std::string& s, const char* what) {
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
        v = std::stoull(s, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (pos == 0 || pos != s.size() || s.front() == '-')
        throw DecodeError(std::string("trace: bad ") + what + " '" + s + "'");
    return static_cast<std::size_t>(v);
}

}  // namespace

// ---- trace files -----------------------------------------------------------------

void write_trace_csv(std::ostream& out, const RoutingTrace& trace) {
    const std::size_t K = trace.empty() ? 2 : trace.front().experts.size();
    out << "seq_id,position,token_id,domain,layer";
    for (std::size_t j = 0; j < K; ++j) out << ",rank" << j << "_expert,rank" << j << "_kept";
    out << '\n';
    for (const TraceRow& r : trace) {
        if (r.experts.size() != K || r.kept.size() != K)
            throw ContractError("write_trace_csv: rows disagree on the number of choices");
        if (r.domain.find_first_of(",\n\r") != std::string::npos)
            throw ContractError("write_trace_csv: domain tag '" + r.domain + "' contains a separator");
        out << r.seq_id << ',' << r.position << ',' << r.token_id << ',' << r.domain << ',' << r.layer;
        for (std::size_t j = 0; j < K; ++j) out << ',' << r.experts[j] << ',' << static_cast<int>(r.kept[j]);
        out << '\n';
    }
}

void write_trace_csv(const std::filesystem::path& path, const RoutingTrace& trace) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write trace " + path.string());
    write_trace_csv(out, trace);
    if (!out.flush()) throw IoError("failed writing trace " + path.string());
}

RoutingTrace read_trace_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw DecodeError("trace: missing header");
    const auto header = split_csv_line(line);
    const std::vector<std::string> fixed = {"seq_id", "position", "token_id", "domain", "layer"};
    if (header.size() < fixed.size() + 2 || (header.size() - fixed.size()) % 2 != 0 ||
        !std::equal(fixed.begin(), fixed.end(), header.begin()))
        throw DecodeError("trace: unexpected header '" + line + "'");
    const std::size_t K = (header.size() - fixed.size()) / 2;
    for (std::size_t j = 0; j < K; ++j)
        if (header[5 + 2 * j] != "rank" + std::to_string(j) + "_expert" ||
            header[6 + 2 * j] != "rank" + std::to_string(j) + "_kept")
            throw DecodeError("trace: unexpected header '" + line + "'");

    RoutingTrace trace;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto f = split_csv_line(line);
        if (f.size() != header.size())
            throw DecodeError("trace line " + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                              " fields");
        TraceRow r;
        r.seq_id = parse_size(f[0], "seq_id");
        r.position = parse_size(f[1], "position");
        r.token_id = static_cast<int>(parse_size(f[2], "token_id"));
        r.domain = f[3];
        r.layer = parse_size(f[4], "layer");
        for (std::size_t j = 0; j < K; ++j) {
            r.experts.push_back(parse_size(f[5 + 2 * j], "expert"));
            const std::size_t kept = parse_size(f[6 + 2 * j], "kept flag");
            if (kept > 1) throw DecodeError("trace line " + std::to_string(line_no) + ": kept flag must be 0 or 1");
            r.kept.push_back(static_cast<std::uint8_t>(kept));
        }
        trace.push_back(std::move(r));
    }
    return trace;
}

RoutingTrace read_trace_csv(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read trace " + path.string());
    return read_trace_csv(in);
}

void validate_trace(const RoutingTrace& trace, std::size_t num_experts) {
    std::map<std::pair<std::size_t, std::size_t>, std::size_t> next;  // (seq, layer) -> min next position
    for (const TraceRow& r : trace) {
        for (std::size_t e : r.experts)
            if (e >= num_experts) throw ContractError("trace: expert id " + std::to_string(e) + " out of range");
        auto [it, fresh] = next.try_emplace({r.seq_id, r.layer}, 0);
        if (!fresh && r.position < it->second)
            throw ContractError("trace: positions of sequence " + std::to_string(r.seq_id) + " do not increase");
        it->second = r.position + 1;
    }
}

RoutingTrace trace_from_routing(const RouterOutput& routing, std::span<const int> token_ids, std::size_t seq_id,
                                const std::string& domain, std::size_t layer) {
    if (token_ids.size() != routing.tokens) throw DimensionError("trace_from_routing: token count mismatch");
    RoutingTrace trace;
    for (std::size_t t = 0; t < routing.tokens; ++t) {
        TraceRow r{seq_id, t, token_ids[t], domain, layer, {}, {}};
        for (std::size_t j = 0; j < routing.top_k; ++j) {
            r.experts.push_back(routing.expert(t, j));
            r.kept.push_back(routing.is_kept(t, j) ? 1 : 0);
        }
        trace.push_back(std::move(r));
    }
    return trace;
}

std::size_t infer_num_experts(const RoutingTrace& trace) {
    std::size_t e = 0;
    for (const TraceRow& r : trace)
        for (std::size_t x : r.experts) e = std::max(e, x + 1);
    return e;
}

std::vector<std::size_t> trace_layers(const RoutingTrace& trace) {
    std::set<std::size_t> layers;
    for (const TraceRow& r : trace) layers.insert(r.layer);
    return {layers.begin(), layers.end()};
}

// ---- specialization ----------------------------------------------------------------

GroupBy parse_group_by(const std::string& name) {
    if (name == "domain") return GroupBy::domain;
    if (name == "token" || name == "token_id") return GroupBy::token_id;
    if (name == "position" || name == "position_id") return GroupBy::position_id;
    if (name == "language") return GroupBy::language;
    throw ConfigError("unknown grouping '" + name + "' (domain, token_id, position_id, language)");
}

std::string group_by_name(GroupBy g) {
    switch (g) {
        case GroupBy::domain: return "domain";
        case GroupBy::token_id: return "token_id";
        case GroupBy::position_id: return "position_id";
        case GroupBy::language: return "language";
    }
    return "?";
}

SpecializationReport expert_ratios(const RoutingTrace& trace, GroupBy group_by, std::size_t layer,
                                   std::size_t num_experts, const RatioOptions& options) {
    struct Acc {
        std::size_t support = 0;
        std::vector<std::size_t> counts;
    };
    // Numeric keys sort by value, textual keys by name.
    std::map<std::pair<long long, std::string>, Acc> groups;
    bool any = false;
    for (const TraceRow& r : trace) {
        if (r.layer != layer) continue;
        any = true;
        std::pair<long long, std::string> key;
        switch (group_by) {
            case GroupBy::domain: key = {0, r.domain}; break;
            case GroupBy::token_id: key = {r.token_id, std::to_string(r.token_id)}; break;
            case GroupBy::position_id: key = {static_cast<long long>(r.position), std::to_string(r.position)}; break;
            case GroupBy::language: {
                const auto lang = pseudo_language(r.token_id);
                if (!lang) continue;
                key = {static_cast<long long>(*lang), "lang" + std::to_string(*lang)};
                break;
            }
        }
        Acc& acc = groups[key];
        acc.counts.resize(num_experts, 0);
        ++acc.support;
        const std::size_t ranks = options.all_ranks ? r.experts.size() : std::min<std::size_t>(1, r.experts.size());
        for (std::size_t j = 0; j < ranks; ++j) {
            if (r.experts[j] >= num_experts) throw ContractError("expert_ratios: expert id out of range");
            if (options.include_dropped || r.kept[j]) ++acc.counts[r.experts[j]];
        }
    }
    if (!any) throw ContractError("expert_ratios: trace has no rows for layer " + std::to_string(layer));

    SpecializationReport report{group_by, layer, num_experts, {}, {}};
    for (const auto& [key, acc] : groups) {
        std::size_t total = 0;
        for (std::size_t c : acc.counts) total += c;
        if (total == 0) {
            report.warnings.push_back("group " + key.second + " has no counted assignments; omitted");
            continue;
        }
        GroupRatios g{key.second, acc.support, {}};
        for (std::size_t c : acc.counts) g.ratios.push_back(static_cast<double>(c) / static_cast<double>(total));
        report.groups.push_back(std::move(g));
    }
    return report;
}

std::vector<GroupStd> routing_std(const SpecializationReport& report, std::size_t min_support) {
    std::vector<GroupStd> out;
    for (const GroupRatios& g : report.groups) {
        if (g.support < min_support || g.ratios.empty()) continue;
        const double n = static_cast<double>(g.ratios.size());
        double mean = 0.0;
        for (double r : g.ratios) mean += r;
        mean /= n;
        double var = 0.0;
        for (double r : g.ratios) var += (r - mean) * (r - mean);
        out.push_back({g.key, g.support, std::sqrt(var / n)});
    }
    return out;
}

double mean_std(std::span<const GroupStd> stds) {
    if (stds.empty()) return 0.0;
    double s = 0.0;
    for (const GroupStd& g : stds) s += g.std;
    return s / static_cast<double>(stds.size());
}

std::vector<TokenCount> top_tokens(const RoutingTrace& trace, std::size_t expert, std::size_t layer, std::size_t n) {
    std::map<int, std::size_t> counts;
    for (const TraceRow& r : trace) {
        if (r.layer != layer) continue;
        for (std::size_t j = 0; j < r.experts.size(); ++j)
            if (r.experts[j] == expert && r.kept[j]) ++counts[r.token_id];
    }
    std::vector<TokenCount> ranked;
    for (auto [tok, c] : counts) ranked.push_back({tok, c});
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const TokenCount& a, const TokenCount& b) { return a.count > b.count; });
    if (ranked.size() > n) ranked.resize(n);
    return ranked;
}

// ---- drops ---------------------------------------------------------------------------

DropCurves drop_curve(const RoutingTrace& trace, std::size_t bucket_size, std::optional<std::size_t> layer) {
    if (bucket_size == 0) throw ConfigError("drop_curve: bucket size must be positive");
    DropCurves curves;
    for (const TraceRow& r : trace) {
        if (layer && r.layer != *layer) continue;
        auto& curve = curves[r.domain];
        const std::size_t b = r.position / bucket_size;
        while (curve.size() <= b) {
            const std::size_t begin = curve.size() * bucket_size;
            curve.push_back({begin, begin + bucket_size, 0, 0});
        }
        for (std::uint8_t k : r.kept) {
            ++curve[b].total;
            curve[b].dropped += k ? 0 : 1;
        }
    }
    return curves;
}

ThirdsSummary drop_thirds(std::span<const DropBucket> curve) {
    if (curve.empty()) return {};
    const std::size_t third = std::max<std::size_t>(1, curve.size() / 3);
    auto pooled = [](std::span<const DropBucket> part) {
        std::size_t dropped = 0, total = 0;
        for (const DropBucket& b : part) {
            dropped += b.dropped;
            total += b.total;
        }
        return total ? static_cast<double>(dropped) / static_cast<double>(total) : 0.0;
    };
    return {pooled(curve.first(third)), pooled(curve.last(third))};
}

// ---- overlap -------------------------------------------------------------------------

OverlapResult routing_overlap(const RoutingTrace& a, const RoutingTrace& b, std::size_t layer,
                              std::size_t min_support) {
    const std::size_t E = std::max(infer_num_experts(a), infer_num_experts(b));
    auto tally = [&](const RoutingTrace& t) {
        std::map<int, std::vector<std::size_t>> counts;
        for (const TraceRow& r : t) {
            if (r.layer != layer || r.experts.empty()) continue;
            auto& c = counts[r.token_id];
            c.resize(E, 0);
            ++c[r.experts[0]];
        }
        return counts;
    };
    const auto ca = tally(a), cb = tally(b);
    OverlapResult out;
    for (const auto& [tok, counts_a] : ca) {
        auto it = cb.find(tok);
        if (it == cb.end()) continue;
        std::size_t sa = 0, sb = 0;
        for (std::size_t c : counts_a) sa += c;
        for (std::size_t c : it->second) sb += c;
        if (sa < min_support || sb < min_support) continue;
        ++out.common_tokens;
        const auto arg_a = std::max_element(counts_a.begin(), counts_a.end()) - counts_a.begin();
        const auto arg_b = std::max_element(it->second.begin(), it->second.end()) - it->second.begin();
        out.matching += arg_a == arg_b;
    }
    if (out.common_tokens == 0)
        throw ContractError("routing_overlap: the traces share no token ids with enough support at layer " +
                            std::to_string(layer));
    out.overlap = static_cast<double>(out.matching) / static_cast<double>(out.common_tokens);
    return out;
}

// ---- corpus statistics ---------------------------------------------------------------

TokenStats corpus_token_stats(const Corpus& corpus) {
    std::vector<bool> seen(kVocabSize, false);
    TokenStats s;
    for (const std::string& doc : corpus.documents)
        for (int id : tokenize(doc)) {
            ++s.num_tokens;
            if (!seen[id]) {
                seen[id] = true;
                ++s.vocab_used;
            }
        }
    return s;
}

// ---- report rendering ------------------------------------------------------------------

std::string token_label(int id) {
    if (id == kPadId) return "<pad>";
    if (id == kEosId) return "<eos>";
    if (is_sentinel(id)) return "<extra_id_" + std::to_string(kFirstSentinel + kNumSentinels - 1 - id) + ">";
    const int byte = id - kByteOffset;
    if (byte < 0 || byte > 255) return "<" + std::to_string(id) + ">";
    if (byte == '\n') return "\\n";
    if (byte == '\t') return "\\t";
    if (byte == ' ') return "<space>";
    if (byte > 32 && byte < 127) return std::string(1, static_cast<char>(byte));
    char buf[8];
    std::snprintf(buf, sizeof buf, "0x%02X", byte);
    return buf;
}

std::string ratios_csv(const SpecializationReport& report) {
    std::ostringstream out;
    out << group_by_name(report.group_by) << ",support";
    for (std::size_t e = 0; e < report.num_experts; ++e) out << ",e" << e;
    out << '\n';
    for (const GroupRatios& g : report.groups) {
        out << csv_field(g.key) << ',' << g.support;
        for (double r : g.ratios) out << ',' << fmt(r);
        out << '\n';
    }
    return out.str();
}

std::string std_csv(std::span<const GroupStd> stds) {
    std::ostringstream out;
    out << "group,support,std\n";
    for (const GroupStd& g : stds) out << csv_field(g.key) << ',' << g.support << ',' << fmt(g.std) << '\n';
    return out.str();
}

std::string top_tokens_csv(const std::map<std::size_t, std::vector<TokenCount>>& per_expert) {
    std::ostringstream out;
    out << "expert,rank,token_id,token,count\n";
    for (const auto& [expert, tokens] : per_expert)
        for (std::size_t i = 0; i < tokens.size(); ++i)
            out << expert << ',' << i << ',' << tokens[i].token_id << ',' << csv_field(token_label(tokens[i].token_id))
                << ',' << tokens[i].count << '\n';
    return out.str();
}

std::string drop_curve_csv(const DropCurves& curves) {
    std::ostringstream out;
    out << "domain,bucket_begin,bucket_end,dropped,total,ratio\n";
    for (const auto& [domain, curve] : curves)
        for (const DropBucket& b : curve)
            out << csv_field(domain) << ',' << b.begin << ',' << b.end << ',' << b.dropped << ',' << b.total << ','
                << fmt(b.ratio()) << '\n';
    return out.str();
}

std::string overlap_csv(std::size_t layer, const OverlapResult& r) {
    std::ostringstream out;
    out << "layer,common_tokens,matching,overlap\n"
        << layer << ',' << r.common_tokens << ',' << r.matching << ',' << fmt(r.overlap) << '\n';
    return out.str();
}

std::string token_stats_csv(const std::map<std::string, TokenStats>& stats) {
    std::ostringstream out;
    out << "domain,num_tokens,vocab_used\n";
    for (const auto& [domain, s] : stats) out << csv_field(domain) << ',' << s.num_tokens << ',' << s.vocab_used << '\n';
    return out.str();
}

namespace {

std::string colour(std::size_t i, std::size_t n) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "hsl(%d,60%%,55%%)", static_cast<int>(360.0 * static_cast<double>(i) / std::max<std::size_t>(n, 1)));
    return buf;
}

std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '&': out += "&amp;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

}  // namespace

std::string ratios_svg(const SpecializationReport& report) {
    const double label_w = 110, bar_w = 480, row_h = 16, top = 30;
    const double height = top + row_h * static_cast<double>(report.groups.size()) + 20;
    std::ostringstream out;
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << label_w + bar_w + 20 << "\" height=\"" << height
        << "\" font-family=\"monospace\" font-size=\"11\">\n";
    out << "<text x=\"4\" y=\"16\">layer " << report.layer << ", by " << group_by_name(report.group_by) << "</text>\n";
    for (std::size_t e = 0; e < report.num_experts; ++e)
        out << "<rect x=\"" << label_w + 40.0 * static_cast<double>(e) << "\" y=\"6\" width=\"10\" height=\"10\" fill=\""
            << colour(e, report.num_experts) << "\"/><text x=\"" << label_w + 40.0 * static_cast<double>(e) + 12
            << "\" y=\"15\">E" << e << "</text>\n";
    for (std::size_t g = 0; g < report.groups.size(); ++g) {
        const GroupRatios& grp = report.groups[g];
        const double y = top + row_h * static_cast<double>(g);
        out << "<text x=\"4\" y=\"" << y + 12 << "\">" << xml_escape(grp.key) << "</text>\n";
        double x = label_w;
        for (std::size_t e = 0; e < grp.ratios.size(); ++e) {
            const double w = bar_w * grp.ratios[e];
            if (w > 0)
                out << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << w << "\" height=\"" << row_h - 2
                    << "\" fill=\"" << colour(e, report.num_experts) << "\"/>\n";
            x += w;
        }
    }
    out << "</svg>\n";
    return out.str();
}

std::string drop_curve_svg(const DropCurves& curves) {
    const double w = 560, h = 260, left = 50, top = 20;
    std::size_t max_pos = 1;
    for (const auto& [d, curve] : curves)
        if (!curve.empty()) max_pos = std::max(max_pos, curve.back().begin);
    std::ostringstream out;
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w + left + 120 << "\" height=\"" << h + top + 40
        << "\" font-family=\"monospace\" font-size=\"11\">\n";
    out << "<line x1=\"" << left << "\" y1=\"" << top + h << "\" x2=\"" << left + w << "\" y2=\"" << top + h
        << "\" stroke=\"black\"/>\n<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\""
        << top + h << "\" stroke=\"black\"/>\n";
    out << "<text x=\"" << left + w / 2 << "\" y=\"" << top + h + 30 << "\">position</text>\n";
    out << "<text x=\"4\" y=\"" << top + 4 << "\">1.0</text><text x=\"4\" y=\"" << top + h << "\">0.0</text>\n";
    std::size_t i = 0;
    for (const auto& [domain, curve] : curves) {
        out << "<polyline fill=\"none\" stroke=\"" << colour(i, curves.size()) << "\" stroke-width=\"2\" points=\"";
        for (const DropBucket& b : curve)
            out << left + w * static_cast<double>(b.begin) / static_cast<double>(max_pos) << ','
                << top + h * (1.0 - b.ratio()) << ' ';
        out << "\"/>\n<text x=\"" << left + w + 10 << "\" y=\"" << top + 14 * static_cast<double>(i + 1)
            << "\" fill=\"" << colour(i, curves.size()) << "\">" << xml_escape(domain) << "</text>\n";
        ++i;
    }
    out << "</svg>\n";
    return out.str();
}

}  // namespace omoe
