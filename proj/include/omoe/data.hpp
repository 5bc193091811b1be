#pragma once

// Byte-level tokenizer, synthetic corpora, training objectives (causal LM,
// prefix LM, span corruption) and step-seeded mixture sampling.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "omoe/model.hpp"

namespace omoe {

// ---- tokenizer ---------------------------------------------------------------

inline constexpr int kPadId = 0;
inline constexpr int kEosId = 1;
inline constexpr int kFirstSentinel = 2;
inline constexpr int kNumSentinels = 100;
inline constexpr int kByteOffset = kFirstSentinel + kNumSentinels;
inline constexpr int kVocabSize = kByteOffset + 256;

std::vector<int> tokenize(std::string_view bytes);

/// Throws DecodeError for any id that is not a byte token.
std::string detokenize(std::span<const int> ids);

/// i-th sentinel of an example; ids count down from the highest sentinel.
int sentinel_id(std::size_t i);
bool is_sentinel(int id);

// ---- objectives ----------------------------------------------------------------

enum class ObjectiveKind { causal_lm, prefix_lm, span_corrupt };

struct DenoiserSpec {
    ObjectiveKind kind = ObjectiveKind::causal_lm;
    double mean_span = 0.0;   // span_corrupt only
    double mask_ratio = 0.5;  // prefix_lm: suffix fraction; span_corrupt: noise fraction
    double mix_weight = 1.0;

    void validate() const;
    /// "causal_lm", "prefix_lm(r=0.5)", "span_corrupt(mu=3,r=0.15)".
    std::string tag() const;
};

/// 50% prefix LM plus five span-corruption settings at 10% each.
std::vector<DenoiserSpec> ul2_mixture();
std::vector<DenoiserSpec> causal_mixture();
void validate_objectives(std::span<const DenoiserSpec> specs);

/// Decoder-only packed example. target_ids[i] is the token the model must
/// produce at position i (predicted from positions < i), or kIgnoreLabel.
struct TrainingExample {
    std::vector<int> input_ids;
    std::vector<int> target_ids;
    std::string domain_tag;
    std::string objective_tag;
    std::size_t visible_prefix = 0;  // tokens that may attend bidirectionally

    std::size_t supervised() const;
};

TrainingExample causal_lm(std::span<const int> tokens);

/// Prefix of ceil((1 - r) * len) tokens, clamped to [1, len - 1], carries no loss.
TrainingExample prefix_lm(std::span<const int> tokens, double r = 0.5);
std::size_t prefix_split(std::size_t len, double r);

struct Span {
    std::size_t start = 0;
    std::size_t length = 0;
};

struct SpanCorruption {
    std::vector<int> inputs;   // original with each span replaced by its sentinel
    std::vector<int> targets;  // sentinel followed by the span, for each span
    std::vector<Span> spans;
};

/// Replaces sorted, non-overlapping, non-adjacent spans by sentinels.
SpanCorruption corrupt_spans(std::span<const int> tokens, std::span<const Span> spans);

/// Inverse of corrupt_spans.
std::vector<int> splice_back(std::span<const int> inputs, std::span<const int> targets);

/// round(r * len) noise tokens split into spans of geometric length (mean mu,
/// clamped to len / 2), separated by at least one clean token. Returns nullopt
/// when the sequence is too short to corrupt.
std::optional<SpanCorruption> draw_span_corruption(std::span<const int> tokens, double mu, double r,
                                                   std::mt19937_64& rng);

/// Packs inputs ++ targets; only the target part carries loss.
TrainingExample pack_span_corruption(const SpanCorruption& sc);

std::optional<TrainingExample> span_corrupt(std::span<const int> tokens, double mu, double r, std::mt19937_64& rng);

// ---- corpora -------------------------------------------------------------------

struct Corpus {
    std::string domain;
    std::vector<std::string> documents;
};

/// "#domain:<tag>" header, then one document per line with '\\', '\n' and
/// '\t' escaped.
void write_corpus(const std::filesystem::path& path, const Corpus& corpus);
Corpus read_corpus(const std::filesystem::path& path);
std::string escape_document(std::string_view doc);
std::string unescape_document(std::string_view line);

/// Known generators: text, code, multilingual, chat.
std::vector<std::string> corpus_domains();
Corpus generate_corpus(const std::string& domain, std::size_t docs, std::uint64_t seed);

inline constexpr std::size_t kPseudoLanguages = 4;
/// Pseudo-language of a multilingual byte token, if any.
std::optional<std::size_t> pseudo_language(int token_id);

// ---- mixture sampling ----------------------------------------------------------

struct DomainRatio {
    std::string domain;
    double ratio = 1.0;
};

struct MixturePhase {
    std::size_t start_step = 0;
    std::vector<DomainRatio> domains;
    std::vector<DenoiserSpec> objectives;
};

/// Phases switch atomically at their start steps.
struct MixtureConfig {
    std::vector<MixturePhase> phases;

    void validate() const;
    const MixturePhase& phase_at(std::size_t step) const;
};

using CorpusSet = std::map<std::string, Corpus>;

/// Each example draws from its own rng seeded by (seed, step, index), so a
/// batch depends on nothing but these three values.
std::vector<TrainingExample> sample_batch(const CorpusSet& corpora, const MixtureConfig& mixture, std::size_t step,
                                          std::size_t batch_size, std::size_t seq_len, std::uint64_t seed);

/// Pads to seq_len and shifts targets into next-token labels.
Batch make_batch(std::span<const TrainingExample> examples, std::size_t seq_len, bool bidirectional_prefix,
                 std::size_t first_seq_id = 0);

/// Fixed-length causal windows over a corpus for evaluation and tracing; every
/// document contributes consecutive windows of up to seq_len tokens.
std::vector<TrainingExample> eval_windows(const Corpus& corpus, std::size_t seq_len, std::size_t max_windows);

}  // namespace omoe
