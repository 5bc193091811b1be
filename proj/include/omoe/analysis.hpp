#pragma once

// Routing-decision analyses over recorded traces: per-group expert ratios and
// their spread, top tokens per expert, drop ratio by position, routing overlap
// between checkpoints, and corpus token statistics.

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "omoe/data.hpp"
#include "omoe/moe.hpp"
#include "omoe/trace.hpp"

namespace omoe {

// ---- trace files -----------------------------------------------------------------

/// seq_id,position,token_id,domain,layer,rank0_expert,rank0_kept,rank1_expert,rank1_kept
/// (one expert/kept column pair per choice rank).
void write_trace_csv(std::ostream& out, const RoutingTrace& trace);
void write_trace_csv(const std::filesystem::path& path, const RoutingTrace& trace);
RoutingTrace read_trace_csv(std::istream& in);
RoutingTrace read_trace_csv(const std::filesystem::path& path);

/// Throws ContractError unless positions increase within each (seq, layer)
/// and every expert id is below num_experts.
void validate_trace(const RoutingTrace& trace, std::size_t num_experts);

/// Trace rows for one routing group of consecutive positions 0..B-1.
RoutingTrace trace_from_routing(const RouterOutput& routing, std::span<const int> token_ids, std::size_t seq_id,
                                const std::string& domain, std::size_t layer);

std::size_t infer_num_experts(const RoutingTrace& trace);
std::vector<std::size_t> trace_layers(const RoutingTrace& trace);

// ---- specialization ----------------------------------------------------------------

enum class GroupBy { domain, token_id, position_id, language };
GroupBy parse_group_by(const std::string& name);
std::string group_by_name(GroupBy g);

struct RatioOptions {
    bool include_dropped = false;  // count dropped assignments too
    bool all_ranks = false;        // attribute every choice, not just rank 0
};

struct GroupRatios {
    std::string key;
    std::size_t support = 0;     // trace rows in the group
    std::vector<double> ratios;  // per expert, sums to 1
};

struct SpecializationReport {
    GroupBy group_by = GroupBy::domain;
    std::size_t layer = 0;
    std::size_t num_experts = 0;
    std::vector<GroupRatios> groups;    // sorted by key (numerically for ids)
    std::vector<std::string> warnings;  // groups omitted for lack of counted assignments
};

SpecializationReport expert_ratios(const RoutingTrace& trace, GroupBy group_by, std::size_t layer,
                                   std::size_t num_experts, const RatioOptions& options = {});

struct GroupStd {
    std::string key;
    std::size_t support = 0;
    double std = 0.0;
};

/// Population standard deviation of each group's ratio vector, for groups
/// with at least min_support rows.
std::vector<GroupStd> routing_std(const SpecializationReport& report, std::size_t min_support = 128);
double mean_std(std::span<const GroupStd> stds);

struct TokenCount {
    int token_id = 0;
    std::size_t count = 0;
    friend bool operator==(const TokenCount&, const TokenCount&) = default;
};

/// Most frequent tokens among kept assignments (any rank) to the expert,
/// count-descending, ties by token id.
std::vector<TokenCount> top_tokens(const RoutingTrace& trace, std::size_t expert, std::size_t layer,
                                   std::size_t n = 10);

// ---- drops ---------------------------------------------------------------------------

struct DropBucket {
    std::size_t begin = 0;  // first position in the bucket
    std::size_t end = 0;    // one past the last
    std::size_t dropped = 0;
    std::size_t total = 0;
    double ratio() const { return total ? static_cast<double>(dropped) / static_cast<double>(total) : 0.0; }
};

using DropCurves = std::map<std::string, std::vector<DropBucket>>;

/// Dropped / total assignments per position bucket, per domain. Buckets with
/// no assignments report ratio 0 and total 0.
DropCurves drop_curve(const RoutingTrace& trace, std::size_t bucket_size, std::optional<std::size_t> layer = {});

/// Mean bucket ratio over the first and last third of the buckets.
struct ThirdsSummary {
    double first = 0.0;
    double last = 0.0;
};
ThirdsSummary drop_thirds(std::span<const DropBucket> curve);

// ---- overlap -------------------------------------------------------------------------

struct OverlapResult {
    std::size_t common_tokens = 0;
    std::size_t matching = 0;
    double overlap = 0.0;
};

/// Per token id (with at least min_support rows in both traces) compares the
/// most frequent rank-0 expert; ties go to the lower expert id.
OverlapResult routing_overlap(const RoutingTrace& a, const RoutingTrace& b, std::size_t layer,
                              std::size_t min_support = 1);

// ---- corpus statistics ---------------------------------------------------------------

struct TokenStats {
    std::size_t num_tokens = 0;
    std::size_t vocab_used = 0;
};

TokenStats corpus_token_stats(const Corpus& corpus);

// ---- report rendering ------------------------------------------------------------------

std::string ratios_csv(const SpecializationReport& report);
std::string std_csv(std::span<const GroupStd> stds);
std::string top_tokens_csv(const std::map<std::size_t, std::vector<TokenCount>>& per_expert);
std::string drop_curve_csv(const DropCurves& curves);
std::string overlap_csv(std::size_t layer, const OverlapResult& r);
std::string token_stats_csv(const std::map<std::string, TokenStats>& stats);

/// Stacked horizontal bars, one per group, one colour per expert.
std::string ratios_svg(const SpecializationReport& report);
/// One polyline per domain: drop ratio against bucket start.
std::string drop_curve_svg(const DropCurves& curves);

/// Printable form of a token for reports ("\n", "0xC5", "<eos>", ...).
std::string token_label(int token_id);

}  // namespace omoe
