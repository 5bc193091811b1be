#include "omoe/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "omoe/errors.hpp"

namespace omoe {

// ---- tokenizer ---------------------------------------------------------------

std::vector<int> tokenize(std::string_view bytes) {
    std::vector<int> ids;
    ids.reserve(bytes.size());
    for (unsigned char c : bytes) ids.push_back(kByteOffset + c);
    return ids;
}

std::string detokenize(std::span<const int> ids) {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids) {
        if (id < kByteOffset || id >= kVocabSize)
            throw DecodeError("detokenize: id " + std::to_string(id) + " is not a byte token");
        out.push_back(static_cast<char>(id - kByteOffset));
    }
    return out;
}

int sentinel_id(std::size_t i) {
    if (i >= static_cast<std::size_t>(kNumSentinels))
        throw ContractError("sentinel index " + std::to_string(i) + " exceeds the sentinel budget");
    return kFirstSentinel + kNumSentinels - 1 - static_cast<int>(i);
}

bool is_sentinel(int id) { return id >= kFirstSentinel && id < kFirstSentinel + kNumSentinels; }

// ---- objectives ----------------------------------------------------------------

void DenoiserSpec::validate() const {
    if (!(mix_weight >= 0.0 && mix_weight <= 1.0)) throw ConfigError("objective " + tag() + ": weight outside [0,1]");
    if (kind == ObjectiveKind::causal_lm) return;
    if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw ConfigError("objective " + tag() + ": ratio outside (0,1)");
    if (kind == ObjectiveKind::span_corrupt && !(mean_span >= 1.0))
        throw ConfigError("objective " + tag() + ": mean span must be at least 1");
}

std::string DenoiserSpec::tag() const {
    char buf[96];
    switch (kind) {
        case ObjectiveKind::causal_lm:
            return "causal_lm";
        case ObjectiveKind::prefix_lm:
            std::snprintf(buf, sizeof buf, "prefix_lm(r=%g)", mask_ratio);
            return buf;
        case ObjectiveKind::span_corrupt:
            std::snprintf(buf, sizeof buf, "span_corrupt(mu=%g,r=%g)", mean_span, mask_ratio);
            return buf;
    }
    return "unknown";
}

std::vector<DenoiserSpec> ul2_mixture() {
    return {
        {ObjectiveKind::prefix_lm, 0.0, 0.5, 0.5},     {ObjectiveKind::span_corrupt, 3.0, 0.15, 0.1},
        {ObjectiveKind::span_corrupt, 8.0, 0.15, 0.1}, {ObjectiveKind::span_corrupt, 3.0, 0.5, 0.1},
        {ObjectiveKind::span_corrupt, 8.0, 0.5, 0.1},  {ObjectiveKind::span_corrupt, 64.0, 0.5, 0.1},
    };
}

std::vector<DenoiserSpec> causal_mixture() { return {{ObjectiveKind::causal_lm, 0.0, 0.5, 1.0}}; }

void validate_objectives(std::span<const DenoiserSpec> specs) {
    if (specs.empty()) throw ConfigError("objective mixture is empty");
    double total = 0.0;
    for (const auto& s : specs) {
        s.validate();
        total += s.mix_weight;
    }
    if (std::abs(total - 1.0) > 1e-9)
        throw ConfigError("objective weights sum to " + std::to_string(total) + ", expected 1");
}

std::size_t TrainingExample::supervised() const {
    return static_cast<std::size_t>(
        std::count_if(target_ids.begin(), target_ids.end(), [](int t) { return t != kIgnoreLabel; }));
}

TrainingExample causal_lm(std::span<const int> tokens) {
    if (tokens.size() < 2) throw ContractError("causal_lm: need at least two tokens");
    TrainingExample ex;
    ex.input_ids.assign(tokens.begin(), tokens.end());
    ex.target_ids = ex.input_ids;
    ex.target_ids[0] = kIgnoreLabel;
    ex.objective_tag = "causal_lm";
    return ex;
}

std::size_t prefix_split(std::size_t len, double r) {
    if (len < 2) throw ContractError("prefix_lm: need at least two tokens");
    const auto split = static_cast<std::size_t>(std::ceil((1.0 - r) * static_cast<double>(len) - 1e-9));
    return std::clamp<std::size_t>(split, 1, len - 1);
}

TrainingExample prefix_lm(std::span<const int> tokens, double r) {
    const std::size_t split = prefix_split(tokens.size(), r);
    TrainingExample ex;
    ex.input_ids.assign(tokens.begin(), tokens.end());
    ex.target_ids = ex.input_ids;
    std::fill(ex.target_ids.begin(), ex.target_ids.begin() + static_cast<std::ptrdiff_t>(split), kIgnoreLabel);
    ex.visible_prefix = split;
    ex.objective_tag = DenoiserSpec{ObjectiveKind::prefix_lm, 0.0, r, 1.0}.tag();
    return ex;
}

SpanCorruption corrupt_spans(std::span<const int> tokens, std::span<const Span> spans) {
    if (spans.size() > static_cast<std::size_t>(kNumSentinels))
        throw ContractError("corrupt_spans: more spans than sentinels");
    SpanCorruption sc;
    sc.spans.assign(spans.begin(), spans.end());
    std::size_t pos = 0;
    for (std::size_t i = 0; i < spans.size(); ++i) {
        const Span& s = spans[i];
        if (s.length == 0 || s.start < pos || s.start + s.length > tokens.size())
            throw ContractError("corrupt_spans: spans must be non-empty, sorted and inside the sequence");
        sc.inputs.insert(sc.inputs.end(), tokens.begin() + static_cast<std::ptrdiff_t>(pos),
                         tokens.begin() + static_cast<std::ptrdiff_t>(s.start));
        sc.inputs.push_back(sentinel_id(i));
        sc.targets.push_back(sentinel_id(i));
        sc.targets.insert(sc.targets.end(), tokens.begin() + static_cast<std::ptrdiff_t>(s.start),
                          tokens.begin() + static_cast<std::ptrdiff_t>(s.start + s.length));
        pos = s.start + s.length;
    }
    sc.inputs.insert(sc.inputs.end(), tokens.begin() + static_cast<std::ptrdiff_t>(pos), tokens.end());
    return sc;
}

std::vector<int> splice_back(std::span<const int> inputs, std::span<const int> targets) {
    std::map<int, std::pair<std::size_t, std::size_t>> segments;  // sentinel -> [begin, end) in targets
    for (std::size_t i = 0; i < targets.size();) {
        if (!is_sentinel(targets[i])) throw DecodeError("splice_back: targets must start each span with a sentinel");
        std::size_t j = i + 1;
        while (j < targets.size() && !is_sentinel(targets[j])) ++j;
        segments[targets[i]] = {i + 1, j};
        i = j;
    }
    std::vector<int> out;
    for (int id : inputs) {
        if (!is_sentinel(id)) {
            out.push_back(id);
            continue;
        }
        auto it = segments.find(id);
        if (it == segments.end()) throw DecodeError("splice_back: sentinel " + std::to_string(id) + " has no target");
        out.insert(out.end(), targets.begin() + static_cast<std::ptrdiff_t>(it->second.first),
                   targets.begin() + static_cast<std::ptrdiff_t>(it->second.second));
    }
    return out;
}

std::optional<SpanCorruption> draw_span_corruption(std::span<const int> tokens, double mu, double r,
                                                   std::mt19937_64& rng) {
    const std::size_t len = tokens.size();
    if (len < 2) return std::nullopt;
    auto n_mask = static_cast<std::size_t>(std::llround(r * static_cast<double>(len)));
    if (n_mask < 1) return std::nullopt;
    n_mask = std::min(n_mask, len - 1);

    const double mean = std::clamp(mu, 1.0, std::max(1.0, static_cast<double>(len) / 2.0));
    std::geometric_distribution<std::size_t> extra(1.0 / mean);
    std::vector<std::size_t> lengths;
    for (std::size_t left = n_mask; left > 0;) {
        std::size_t l = lengths.size() + 1 == static_cast<std::size_t>(kNumSentinels) ? left : 1 + extra(rng);
        l = std::min(l, left);
        lengths.push_back(l);
        left -= l;
    }
    const std::size_t clean = len - n_mask;
    while (lengths.size() > 1 && clean < lengths.size() - 1) {
        lengths[lengths.size() - 2] += lengths.back();
        lengths.pop_back();
    }
    std::shuffle(lengths.begin(), lengths.end(), rng);

    // Clean tokens fill n+1 gaps; interior gaps hold at least one token.
    const std::size_t n = lengths.size();
    const std::size_t free_tokens = clean - (n - 1);
    std::vector<std::size_t> slots(free_tokens + n);
    std::iota(slots.begin(), slots.end(), 0);
    std::vector<std::size_t> bars;
    std::sample(slots.begin(), slots.end(), std::back_inserter(bars), n, rng);
    std::vector<std::size_t> gaps(n + 1);
    for (std::size_t i = 0; i <= n; ++i) {
        const std::size_t lo = i == 0 ? 0 : bars[i - 1] + 1;
        const std::size_t hi = i == n ? free_tokens + n : bars[i];
        gaps[i] = hi - lo + (i > 0 && i < n ? 1 : 0);
    }

    std::vector<Span> spans;
    std::size_t pos = gaps[0];
    for (std::size_t i = 0; i < n; ++i) {
        spans.push_back({pos, lengths[i]});
        pos += lengths[i] + gaps[i + 1];
    }
    return corrupt_spans(tokens, spans);
}

TrainingExample pack_span_corruption(const SpanCorruption& sc) {
    TrainingExample ex;
    ex.input_ids = sc.inputs;
    ex.input_ids.insert(ex.input_ids.end(), sc.targets.begin(), sc.targets.end());
    ex.target_ids.assign(sc.inputs.size(), kIgnoreLabel);
    ex.target_ids.insert(ex.target_ids.end(), sc.targets.begin(), sc.targets.end());
    ex.visible_prefix = sc.inputs.size();
    return ex;
}

std::optional<TrainingExample> span_corrupt(std::span<const int> tokens, double mu, double r, std::mt19937_64& rng) {
    auto sc = draw_span_corruption(tokens, mu, r, rng);
    if (!sc) return std::nullopt;
    TrainingExample ex = pack_span_corruption(*sc);
    ex.objective_tag = DenoiserSpec{ObjectiveKind::span_corrupt, mu, r, 1.0}.tag();
    return ex;
}

// ---- corpora -------------------------------------------------------------------

std::string escape_document(std::string_view doc) {
    std::string out;
    out.reserve(doc.size());
    for (char c : doc) {
        switch (c) {
            case '\\': out += "\\\\"; break;
            case '\n': out += "\\n"; break;
            case '\t': out += "\\t"; break;
            case '\r': out += "\\r"; break;
            default: out.push_back(c);
        }
    }
    return out;
}

std::string unescape_document(std::string_view line) {
    std::string out;
    out.reserve(line.size());
    for (std::size_t i = 0; i < line.size(); ++i) {
        if (line[i] != '\\') {
            out.push_back(line[i]);
            continue;
        }
        if (++i == line.size()) throw DecodeError("corpus: dangling escape at end of line");
        switch (line[i]) {
            case '\\': out.push_back('\\'); break;
            case 'n': out.push_back('\n'); break;
            case 't': out.push_back('\t'); break;
            case 'r': out.push_back('\r'); break;
            default: throw DecodeError(std::string("corpus: unknown escape \\") + line[i]);
        }
    }
    return out;
}

void write_corpus(const std::filesystem::path& path, const Corpus& corpus) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write corpus " + path.string());
    out << "#domain:" << corpus.domain << '\n';
    for (const auto& doc : corpus.documents) out << escape_document(doc) << '\n';
    if (!out.flush()) throw IoError("failed writing corpus " + path.string());
}

Corpus read_corpus(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read corpus " + path.string());
    std::string line;
    if (!std::getline(in, line) || !line.starts_with("#domain:"))
        throw DecodeError("corpus " + path.string() + ": missing #domain: header");
    Corpus corpus;
    corpus.domain = line.substr(8);
    if (corpus.domain.empty()) throw DecodeError("corpus " + path.string() + ": empty domain tag");
    while (std::getline(in, line)) corpus.documents.push_back(unescape_document(line));
    return corpus;
}

namespace {

// Word lists are fixed across corpus seeds so that separately generated
// train and eval corpora share a vocabulary.
std::vector<std::string> make_words(std::size_t count, std::uint64_t salt, auto&& make_char, std::size_t min_len,
                                    std::size_t max_len) {
    std::mt19937_64 rng(0x5eed0000 + salt);
    std::uniform_int_distribution<std::size_t> len(min_len, max_len);
    std::set<std::string> seen;
    std::vector<std::string> words;
    while (words.size() < count) {
        std::string w;
        for (std::size_t i = len(rng); i > 0; --i) w += make_char(rng);
        if (seen.insert(w).second) words.push_back(w);
    }
    return words;
}

std::discrete_distribution<std::size_t> zipf(std::size_t n, double s) {
    std::vector<double> w(n);
    for (std::size_t i = 0; i < n; ++i) w[i] = 1.0 / std::pow(static_cast<double>(i + 1), s);
    return {w.begin(), w.end()};
}

std::string pick(std::mt19937_64& rng, std::initializer_list<const char*> options) {
    std::uniform_int_distribution<std::size_t> d(0, options.size() - 1);
    return *(options.begin() + d(rng));
}

std::string text_document(std::mt19937_64& rng) {
    static const auto words = make_words(
        400, 1, [](std::mt19937_64& r) { return static_cast<char>('a' + r() % 26); }, 2, 8);
    auto dist = zipf(words.size(), 1.1);
    std::uniform_int_distribution<int> n_words(30, 80), sentence(5, 14);
    std::string doc;
    int until_stop = sentence(rng);
    for (int i = n_words(rng); i > 0; --i) {
        doc += words[dist(rng)];
        if (--until_stop == 0 || i == 1) {
            doc += '.';
            until_stop = sentence(rng);
        }
        if (i > 1) doc += ' ';
    }
    return doc;
}

std::string code_document(std::mt19937_64& rng) {
    static const std::vector<std::string> names = {"x", "y", "i", "n", "acc", "buf", "val", "tmp", "idx", "res"};
    std::uniform_int_distribution<std::size_t> name(0, names.size() - 1);
    std::uniform_int_distribution<int> num(0, 99), n_funcs(2, 4), n_lines(2, 6), kind(0, 5);
    auto var = [&] { return names[name(rng)]; };
    std::string doc;
    for (int f = n_funcs(rng); f > 0; --f) {
        doc += "def f" + std::to_string(num(rng) % 10) + "(" + var() + "):\n";
        int depth = 1;
        for (int l = n_lines(rng); l > 0; --l) {
            const std::string indent(static_cast<std::size_t>(depth), '\t');
            switch (kind(rng)) {
                case 0:
                    doc += indent + "if " + var() + "==" + std::to_string(num(rng)) + ":\n";
                    depth = std::min(depth + 1, 3);
                    break;
                case 1:
                    doc += indent + var() + "=" + var() + pick(rng, {"+", "-", "*"}) + std::to_string(num(rng)) + "\n";
                    break;
                case 2:
                    doc += indent + "for " + var() + " in range(" + std::to_string(num(rng)) + "):\n";
                    depth = std::min(depth + 1, 3);
                    break;
                case 3:
                    doc += indent + var() + "=" + var() + "\n";
                    depth = std::max(depth - 1, 1);
                    break;
                case 4:
                    doc += indent + var() + "+=" + "1\n";
                    break;
                default:
                    doc += indent + "return " + var() + "\n";
                    depth = 1;
            }
        }
        doc += "\n";
    }
    return doc;
}

// Pseudo-language j writes with 2-byte UTF-8 characters whose lead byte is
// 0xC4 + j and whose continuation byte lies in [0x80 + 8j, 0x88 + 8j).
std::string multilingual_document(std::mt19937_64& rng) {
    static const auto words = [] {
        std::vector<std::vector<std::string>> per_lang;
        for (std::size_t j = 0; j < kPseudoLanguages; ++j)
            per_lang.push_back(make_words(
                120, 10 + j,
                [j](std::mt19937_64& r) {
                    std::string ch;
                    ch += static_cast<char>(0xC4 + j);
                    ch += static_cast<char>(0x80 + 8 * j + r() % 8);
                    return ch;
                },
                1, 4));
        return per_lang;
    }();
    const std::size_t lang = rng() % kPseudoLanguages;
    auto dist = zipf(words[lang].size(), 1.1);
    std::uniform_int_distribution<int> n_words(15, 40);
    std::string doc;
    for (int i = n_words(rng); i > 0; --i) {
        doc += words[lang][dist(rng)];
        if (i > 1) doc += ' ';
    }
    return doc;
}

// Out-of-domain dialogue: a handful of shouted phrases, heavily repeated.
std::string chat_document(std::mt19937_64& rng) {
    std::uniform_int_distribution<int> turns(2, 4), reps(2, 5);
    std::string doc;
    for (int t = turns(rng); t > 0; --t) {
        doc += "USER: " + pick(rng, {"WHY?", "HOW?", "WHAT NOW?", "OK?"});
        doc += " BOT:";
        for (int r = reps(rng); r > 0; --r) doc += " " + pick(rng, {"YES!!!", "NO!!!", "OK!!!", "WOW!!!"});
        doc += " ";
    }
    return doc;
}

}  // namespace

std::vector<std::string> corpus_domains() { return {"text", "code", "multilingual", "chat"}; }

Corpus generate_corpus(const std::string& domain, std::size_t docs, std::uint64_t seed) {
    std::string (*gen)(std::mt19937_64&) = nullptr;
    if (domain == "text") gen = text_document;
    else if (domain == "code") gen = code_document;
    else if (domain == "multilingual") gen = multilingual_document;
    else if (domain == "chat") gen = chat_document;
    else throw ConfigError("unknown corpus domain '" + domain + "' (known: text, code, multilingual, chat)");
    std::mt19937_64 rng(seed);
    Corpus corpus{domain, {}};
    corpus.documents.reserve(docs);
    for (std::size_t i = 0; i < docs; ++i) corpus.documents.push_back(gen(rng));
    return corpus;
}

std::optional<std::size_t> pseudo_language(int token_id) {
    const int byte = token_id - kByteOffset;
    if (byte >= 0xC4 && byte < 0xC4 + static_cast<int>(kPseudoLanguages)) return byte - 0xC4;
    if (byte >= 0x80 && byte < 0x80 + 8 * static_cast<int>(kPseudoLanguages)) return (byte - 0x80) / 8;
    return std::nullopt;
}

// ---- mixture sampling ----------------------------------------------------------

void MixtureConfig::validate() const {
    if (phases.empty()) throw ConfigError("mixture: no phases");
    if (phases.front().start_step != 0) throw ConfigError("mixture: the first phase must start at step 0");
    for (std::size_t p = 0; p < phases.size(); ++p) {
        const MixturePhase& ph = phases[p];
        if (p > 0 && ph.start_step <= phases[p - 1].start_step)
            throw ConfigError("mixture: phase start steps must increase");
        if (ph.domains.empty()) throw ConfigError("mixture: phase without domains");
        double total = 0.0;
        std::set<std::string> seen;
        for (const auto& d : ph.domains) {
            if (!(d.ratio >= 0.0)) throw ConfigError("mixture: negative ratio for '" + d.domain + "'");
            if (!seen.insert(d.domain).second) throw ConfigError("mixture: duplicate domain '" + d.domain + "'");
            total += d.ratio;
        }
        if (std::abs(total - 1.0) > 1e-9)
            throw ConfigError("mixture: domain ratios sum to " + std::to_string(total) + ", expected 1");
        validate_objectives(ph.objectives);
    }
}

const MixturePhase& MixtureConfig::phase_at(std::size_t step) const {
    if (phases.empty()) throw ConfigError("mixture: no phases");
    auto it = std::upper_bound(phases.begin(), phases.end(), step,
                               [](std::size_t s, const MixturePhase& ph) { return s < ph.start_step; });
    return it == phases.begin() ? phases.front() : *std::prev(it);
}

namespace {

TrainingExample draw_example(const CorpusSet& corpora, const MixturePhase& phase, std::size_t seq_len,
                             std::mt19937_64& rng) {
    std::vector<double> domain_w, objective_w;
    for (const auto& d : phase.domains) domain_w.push_back(d.ratio);
    for (const auto& o : phase.objectives) objective_w.push_back(o.mix_weight);
    std::discrete_distribution<std::size_t> pick_domain(domain_w.begin(), domain_w.end());
    std::discrete_distribution<std::size_t> pick_objective(objective_w.begin(), objective_w.end());

    const std::string& domain = phase.domains[pick_domain(rng)].domain;
    const DenoiserSpec& spec = phase.objectives[pick_objective(rng)];
    const Corpus& corpus = corpora.at(domain);

    for (int attempt = 0; attempt < 100; ++attempt) {
        std::vector<int> doc = tokenize(corpus.documents[rng() % corpus.documents.size()]);
        doc.push_back(kEosId);
        std::size_t len = std::min(doc.size(), seq_len);
        const std::size_t start = doc.size() > len ? rng() % (doc.size() - len + 1) : 0;
        std::span<const int> window(doc.data() + start, len);
        std::optional<TrainingExample> ex;
        switch (spec.kind) {
            case ObjectiveKind::causal_lm:
                if (len >= 2) ex = causal_lm(window);
                break;
            case ObjectiveKind::prefix_lm:
                if (len >= 2) ex = prefix_lm(window, spec.mask_ratio);
                break;
            case ObjectiveKind::span_corrupt:
                // Sentinels lengthen the packed example; shrink the source until it fits.
                while (len >= 2) {
                    ex = span_corrupt(window.first(len), spec.mean_span, spec.mask_ratio, rng);
                    if (!ex || ex->input_ids.size() <= seq_len) break;
                    len -= ex->input_ids.size() - seq_len;
                    ex.reset();
                }
                break;
        }
        if (ex) {
            ex->domain_tag = domain;
            ex->objective_tag = spec.tag();
            return *ex;
        }
    }
    throw ConfigError("corpus '" + domain + "' has no documents usable for " + spec.tag());
}

}  // namespace

std::vector<TrainingExample> sample_batch(const CorpusSet& corpora, const MixtureConfig& mixture, std::size_t step,
                                          std::size_t batch_size, std::size_t seq_len, std::uint64_t seed) {
    mixture.validate();
    if (seq_len < 2) throw ConfigError("sample_batch: sequence length must be at least 2");
    const MixturePhase& phase = mixture.phase_at(step);
    for (const auto& d : phase.domains) {
        auto it = corpora.find(d.domain);
        if (it == corpora.end()) throw ConfigError("sample_batch: unknown domain tag '" + d.domain + "'");
        if (it->second.documents.empty()) throw ConfigError("sample_batch: corpus '" + d.domain + "' is empty");
    }
    std::vector<TrainingExample> batch;
    batch.reserve(batch_size);
    for (std::size_t i = 0; i < batch_size; ++i) {
        std::seed_seq sseq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                           static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(step >> 32),
                           static_cast<std::uint32_t>(i)};
        std::mt19937_64 rng(sseq);
        batch.push_back(draw_example(corpora, phase, seq_len, rng));
    }
    return batch;
}

Batch make_batch(std::span<const TrainingExample> examples, std::size_t seq_len, bool bidirectional_prefix,
                 std::size_t first_seq_id) {
    Batch b;
    b.num_seqs = examples.size();
    b.seq_len = seq_len;
    b.tokens.assign(b.num_seqs * seq_len, kPadId);
    b.labels.assign(b.num_seqs * seq_len, kIgnoreLabel);
    for (std::size_t s = 0; s < examples.size(); ++s) {
        const TrainingExample& ex = examples[s];
        const std::size_t len = ex.input_ids.size();
        if (len > seq_len || ex.target_ids.size() != len)
            throw ContractError("make_batch: example of length " + std::to_string(len) + " does not fit " +
                                std::to_string(seq_len));
        std::copy(ex.input_ids.begin(), ex.input_ids.end(), b.tokens.begin() + static_cast<std::ptrdiff_t>(s * seq_len));
        for (std::size_t i = 0; i + 1 < len; ++i) b.labels[s * seq_len + i] = ex.target_ids[i + 1];
        b.lengths.push_back(len);
        if (bidirectional_prefix) b.visible_prefix.push_back(ex.visible_prefix);
        b.domains.push_back(ex.domain_tag);
        b.seq_ids.push_back(first_seq_id + s);
    }
    return b;
}

std::vector<TrainingExample> eval_windows(const Corpus& corpus, std::size_t seq_len, std::size_t max_windows) {
    std::vector<TrainingExample> out;
    for (const auto& doc : corpus.documents) {
        std::vector<int> ids = tokenize(doc);
        ids.push_back(kEosId);
        for (std::size_t start = 0; start + 2 <= ids.size() && out.size() < max_windows; start += seq_len) {
            const std::size_t len = std::min(seq_len, ids.size() - start);
            TrainingExample ex = causal_lm(std::span<const int>(ids).subspan(start, len));
            ex.domain_tag = corpus.domain;
            out.push_back(std::move(ex));
        }
        if (out.size() >= max_windows) break;
    }
    return out;
}

}  // namespace omoe
