#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace omoe {

/// One routed token at one MoE layer. experts/kept are ordered by choice rank.
struct TraceRow {
    std::size_t seq_id = 0;
    std::size_t position = 0;
    int token_id = 0;
    std::string domain;
    std::size_t layer = 0;
    std::vector<std::size_t> experts;
    std::vector<std::uint8_t> kept;

    friend bool operator==(const TraceRow&, const TraceRow&) = default;
};

using RoutingTrace = std::vector<TraceRow>;

}  // namespace omoe
