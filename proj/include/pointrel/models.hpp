#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "pointrel/irl.hpp"
#include "pointrel/isl.hpp"

namespace pointrel {

// ---------------------------------------------------------------------------
// Network assembly: an ordered chain of ISL / IRL stages followed by one of
// three heads.
//
//   - classifier: global shape logits. Per-point stage outputs are fused by a
//     shortcut concatenation (first ISL output plus every IRL output), lifted
//     to a wide shared layer, pooled with max and mean, and pushed through two
//     hidden fully-connected layers into class logits.
//   - pointwise: one logit vector per point (saliency estimation). Same trunk
//     and global pathway as the classifier; the per-point head concatenates
//     the first ISL output, every IRL output, and a broadcast copy of the
//     penultimate global layer.
//   - partseg: per-point part logits conditioned on the object category. The
//     last stage must be an IRL stage; its input is the concatenation of all
//     previous stage outputs, a broadcast max-pooled global feature, and a
//     broadcast category embedding.
//
// Every forward pass first sorts the points into a canonical order
// (lexicographic by x, y, z, then original index) and undoes the sort on
// per-point outputs. All arithmetic therefore runs on the same matrices no
// matter how the caller ordered the points, which makes classification logits
// bit-identical under input permutation and per-point outputs exactly
// equivariant.
// ---------------------------------------------------------------------------

enum class StageKind { Isl, Irl };

struct StageSpec {
    StageKind kind = StageKind::Isl;
    IslConfig isl;  // active when kind == Isl
    IrlConfig irl;  // active when kind == Irl

    bool operator==(const StageSpec&) const = default;
};

StageSpec isl_stage(IslConfig cfg);
StageSpec irl_stage(IrlConfig cfg);

enum class HeadKind { Classifier, Pointwise, PartSeg };

struct HeadSpec {
    HeadKind kind = HeadKind::Classifier;
    std::size_t num_classes = 0;     // classifier
    std::size_t num_outputs = 0;     // pointwise
    std::size_t num_parts = 0;       // partseg
    std::size_t num_categories = 0;  // partseg

    bool operator==(const HeadSpec&) const = default;
};

struct NetworkSpec {
    std::vector<StageSpec> stages;
    HeadSpec head;
    // When true, every ISL stage builds its neighbor graph on the input xyz
    // coordinates. When false (default), only the first stage uses xyz; later
    // ISL stages rebuild the graph in the current feature space, so the
    // neighborhoods adapt as features evolve.
    bool static_graph = false;

    // Structural checks: non-empty, ISL first, per-stage config validity,
    // head fields positive, and (partseg) IRL last. Throws ConfigError.
    void validate() const;

    bool operator==(const NetworkSpec&) const = default;
};

// Fixed head widths. The trunk widths come from the stage configs; these
// constants pin down everything after the trunk.
inline constexpr std::size_t kGlobalFcWidth = 1024;     // shared layer before pooling
inline constexpr std::size_t kHeadFc1Width = 512;       // first hidden FC
inline constexpr std::size_t kHeadFc2Width = 256;       // second hidden FC (penultimate)
inline constexpr std::size_t kSegFcWidth = 256;         // both hidden FCs of the partseg head
inline constexpr std::size_t kCategoryEmbedWidth = 64;  // category one-hot embedding
inline constexpr double kHeadDropout = 0.5;
inline constexpr double kHeadSlope = 0.2;  // leaky-ReLU slope in head layers

// Channel widths implied by a spec: per-stage input/output plus the derived
// concatenation widths each head consumes.
struct NetworkDims {
    std::vector<std::size_t> stage_in;
    std::vector<std::size_t> stage_out;
    std::size_t shortcut = 0;      // first ISL output + all IRL outputs
    std::size_t pointwise_in = 0;  // shortcut + broadcast penultimate layer
    std::size_t fused = 0;         // partseg: all pre-final outputs + global + embedding
};

NetworkDims network_dims(const NetworkSpec& spec);

// Stock configurations.
//   classifier: ISL/IRL chain of 7 stages ending in 256-wide features.
//   keypoint net: identical trunk, pointwise head.
//   partseg net: 6-stage chain whose final IRL runs on the fused representation.
NetworkSpec build_classifier(std::size_t num_classes);
NetworkSpec build_keypoint_net(std::size_t num_outputs = 1);
NetworkSpec build_partseg_net(std::size_t num_parts, std::size_t num_categories);

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct StageParams {
    IslParams isl;  // populated for ISL stages
    IrlParams irl;  // populated for IRL stages
};

struct HeadParams {
    LinearBn global;  // shared layer feeding the pooling (all heads)
    LinearBn fc1;     // first hidden FC
    LinearBn fc2;     // second hidden FC
    TP out_W;         // final logits layer
    TP out_b;
    LinearBn pt1;  // pointwise head only: per-point hidden FCs
    LinearBn pt2;
    TP embed_W;  // partseg only: num_categories x kCategoryEmbedWidth
};

struct NetworkParams {
    std::vector<StageParams> stages;
    HeadParams head;
};

// Registers every tensor of the network in the store:
//   stage{i}/...  per-stage parameters (ISL or IRL naming underneath)
//   head/global.*, head/fc1.*, head/fc2.*, head/out.W, head/out.b
//   head/pt1.*, head/pt2.* (pointwise head), head/embed.W (partseg head)
NetworkParams make_network_params(ParameterStore& store, const NetworkSpec& spec, Rng& rng);

// Visits every batchnorm in the network (stage MLP/gate blocks plus the head
// blocks that exist for this head kind), e.g. to reschedule the running-stat
// momentum.
void for_each_batchnorm(NetworkParams& params, const std::function<void(BatchNorm&)>& fn);

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

struct ForwardTrace {
    // canonical_order[r] = index of the input point occupying canonical row r.
    std::vector<std::uint32_t> canonical_order;
    // One entry per stage, rows in canonical order. Kept so heads (and
    // diagnostics) can concatenate intermediate representations.
    std::vector<TP> stage_outputs;
};

struct ForwardResult {
    // classifier: batch x num_classes. pointwise / partseg: per-point rows in
    // the caller's original point order, clouds stacked in batch order
    // (cloud b occupies rows sum(n_0..n_{b-1}) .. +n_b).
    TP logits;
    std::vector<ForwardTrace> traces;  // one per cloud
};

// Runs the network over a batch of clouds.
//   - training=false: deterministic; dropout inactive; batchnorm uses running
//     statistics; each cloud is processed independently, so a batch equals the
//     concatenation of single-cloud runs.
//   - training=true: dropout active (draws from rng); batchnorm uses batch
//     statistics and updates its running state. The classifier and pointwise
//     global head normalizes across the batch, so those heads need at least
//     two clouds per training batch.
//   - partseg: every cloud must carry a category in [0, num_categories).
// Shape mismatches raise DimensionError naming the offending stage.
ForwardResult forward(Tape& tape, const NetworkSpec& spec, NetworkParams& params,
                      const std::vector<PointCloud>& batch, bool training, Rng& rng);

// ---------------------------------------------------------------------------
// Serialization: NetworkSpec <-> JSON. The document lists stages in order as
// {"isl": {...}} / {"irl": {...}} objects plus the head and the graph toggle;
// a spec survives the round trip unchanged. Malformed documents raise
// ConfigError.
// ---------------------------------------------------------------------------

std::string network_spec_to_json(const NetworkSpec& spec);
NetworkSpec network_spec_from_json(const std::string& text);

}  // namespace pointrel
