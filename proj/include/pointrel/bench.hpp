#pragma once

#include <cstdint>
#include <string>

#include "pointrel/irl.hpp"

namespace pointrel {

// ---------------------------------------------------------------------------
// Latency comparison of the two cross-region attention strategies. The naive
// strategy runs one dense attention over all S*k region member points with
// same-region pairs masked out; the representative strategy runs m
// independent S x S attentions, one per representative slot. Both paths use
// the same tensor kernels and the same projection weights.
// ---------------------------------------------------------------------------

struct BenchRecord {
    std::size_t N = 0, S = 0, k = 0, m = 0;
    std::size_t channels = 0;
    std::size_t repeats = 0;
    double naive_ms = 0.0;  // median wall-clock over the timed repeats
    double rep_ms = 0.0;
    double ratio = 0.0;  // naive_ms / rep_ms
    std::uint64_t edges_naive = 0;
    std::uint64_t edges_rep = 0;
    bool skipped = false;  // set when the naive working set exceeds the budget
    std::string reason;    // why the row was skipped (empty otherwise)
};

// Times the two strategies on one synthetic cloud (uniform points and
// features drawn from `seed`). Setup — point generation, scoring, region
// partition, representative choice, and the pair mask — happens outside the
// timers; each timed run covers projections, attention, and the output map.
// One warmup pass per strategy precedes `repeats` timed passes; medians are
// reported. Skips gracefully (skipped=true, reason set) instead of
// attempting an allocation beyond the memory budget. Requires
// 1 <= S <= N, 1 <= k <= N, 1 <= m <= k, repeats >= 1, channels >= 1.
BenchRecord bench_attention(std::size_t N, std::size_t S, std::size_t k, std::size_t m,
                            std::size_t repeats, std::size_t channels = 64,
                            std::uint64_t seed = 0);

// CSV serialization of records; the header matches bench_csv_row's fields.
std::string bench_csv_header();
std::string bench_csv_row(const BenchRecord& r);

}  // namespace pointrel
