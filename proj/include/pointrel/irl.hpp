#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pointrel/geometry.hpp"
#include "pointrel/params.hpp"
#include "pointrel/tensor.hpp"

namespace pointrel {

// ---------------------------------------------------------------------------
// Inter-region relation learning: score-based region partition, per-region
// representative sampling, cross-region attention over representatives, and
// inverse-distance interpolation back onto every point with a residual.
// ---------------------------------------------------------------------------

enum class Partition { DilatedTopS, TopS, Fps };
enum class Sampler { KnnBased, Random, MaxPool, MeanPool };

struct IrlConfig {
    std::size_t S = 1;  // region count
    std::size_t k = 1;  // points per region
    std::size_t m = 1;  // representatives per region
    Partition partition = Partition::DilatedTopS;
    Sampler sampler = Sampler::KnnBased;
    std::uint64_t sampler_seed = 0;  // used by the random sampler only

    void validate() const;

    bool operator==(const IrlConfig&) const = default;
};

// S regions: centroid indices plus the k-NN member table of each centroid
// (members[i][0] == centroids[i]). Keeps the score values that selected it.
struct RegionPartition {
    std::size_t n = 0;  // points in the cloud
    std::size_t S = 0;
    std::size_t k = 0;
    std::vector<double> scores;           // n values in (0,1)
    std::vector<std::uint32_t> centroids;  // S distinct point indices
    std::vector<std::uint32_t> members;    // S*k point indices

    std::uint32_t member(std::size_t i, std::size_t j) const { return members[i * k + j]; }
};

// The S x m table of representative points. Slot t is column t across all
// regions. Pooled samplers have no source points: they produce one virtual
// slot whose feature is pooled from the region block, anchored at the
// centroid, so chi/member_pos stay empty.
struct RepresentativeSet {
    std::size_t S = 0;
    std::size_t m = 0;
    Sampler sampler = Sampler::KnnBased;
    std::vector<std::uint32_t> chi;         // S*m point indices
    std::vector<std::uint32_t> member_pos;  // S*m positions inside the member row

    std::uint32_t rep(std::size_t i, std::size_t t) const { return chi[i * m + t]; }
};

struct IrlParams {
    std::size_t c = 0;
    TP score_W;  // C x 1
    TP score_b;  // 1 x 1
    TP Wq, Wk, Wv, Wz;  // C x C each
};

// Registers `<prefix>/score.W`, `<prefix>/score.b`, `<prefix>/att.Wq|Wk|Wv|Wz`.
// Wz starts near (not at) zero so a fresh block is close to the residual
// identity while every parameter still receives gradient.
IrlParams make_irl_params(ParameterStore& store, const std::string& prefix, std::size_t c,
                          Rng& rng);

// Per-point importance in (0,1): sigmoid of a biased linear map to one column.
TP score_points(Tape& tape, const TP& T, IrlParams& params);

// Centroids = indices of the S largest scores (ties by ascending index);
// members = k nearest points of each centroid over coords.
RegionPartition partition_top_s(const std::vector<double>& scores,
                                const std::vector<double>& coords, std::size_t n, std::size_t S,
                                std::size_t k);

// Sorts indices by score descending (ties ascending) and selects ranks
// 0, floor(n/S), 2*floor(n/S), ..., (S-1)*floor(n/S), spreading the
// centroids across the whole ranking.
RegionPartition partition_dilated_top_s(const std::vector<double>& scores,
                                        const std::vector<double>& coords, std::size_t n,
                                        std::size_t S, std::size_t k);

// Farthest-point-sampled centroids (seeded at index 0); scores recorded but
// not used for selection.
RegionPartition partition_fps(const std::vector<double>& scores,
                              const std::vector<double>& coords, std::size_t n, std::size_t S,
                              std::size_t k);

// Dispatch on cfg.partition.
RegionPartition make_partition(const IrlConfig& cfg, const std::vector<double>& scores,
                               const std::vector<double>& coords, std::size_t n);

// G[i][j] = scores[centroid_i] * T[members[i][j]], shape S x k x C. The
// multiplication by the centroid score is what lets gradient reach the
// scoring parameters despite the discrete selection.
TP scale_region_features(Tape& tape, const TP& T, const TP& scores,
                         const RegionPartition& part);

// Chooses m representatives per region. knn_based takes the first m members
// (they are distance-ascending, so slot 0 is the centroid); random draws m
// distinct members from the configured seed; maxpool/meanpool return the
// virtual-slot marker.
RepresentativeSet sample_representatives(const RegionPartition& part,
                                         const std::vector<double>& coords, Sampler sampler,
                                         std::size_t m, std::uint64_t seed = 0);

// Per-slot self-attention across regions. Each slot holds one S x C matrix;
// independently per slot: logits = (X Wq)(X Wk)^T, weights = row softmax
// (no scaling factor on the logits), out = (weights * (X Wv)) Wz.
std::vector<TP> slot_attention(Tape& tape, const std::vector<TP>& slots, IrlParams& params);

// out[v] = T[v] + sum over the 3 anchor rows nearest to point v of
// idw_weight * g_hat[row]. Anchors are the (slot-major) union of every
// (region, slot) representative; requires at least 3 of them.
TP interpolate_residual(Tape& tape, const TP& T, const TP& g_hat,
                        const std::vector<double>& anchor_xyz,
                        const std::vector<double>& all_xyz);

// Full block: score -> partition -> scale -> sample -> attend -> interpolate.
TP irl_forward(Tape& tape, const TP& T, const std::vector<double>& coords, const IrlConfig& cfg,
               IrlParams& params);

// Cross-region edge counts: naive connects every point of a region to every
// point of every other region, S(S-1)k^2; representatives reduce that to
// S(S-1)m. Exact 64-bit integers.
enum class EdgeMode { Naive, Representative };
std::uint64_t count_edges(EdgeMode mode, std::uint64_t S, std::uint64_t k, std::uint64_t m);

}  // namespace pointrel
