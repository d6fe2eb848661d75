#pragma once

#include <string>
#include <vector>

#include "pointrel/geometry.hpp"
#include "pointrel/params.hpp"
#include "pointrel/tensor.hpp"

namespace pointrel {

// ---------------------------------------------------------------------------
// Intra-region structure learning: two feature branches fused by a learned
// sigmoid gate.
//   - Neighbor branch: per-edge differences (center minus neighbor) run
//     through a shared MLP and max-pooled over each point's neighborhood.
//   - Self branch: the point feature itself run through an MLP of the same
//     widths.
//   - Gate: w = sigmoid(phi(branch sum)); output = w*nbr + (1-w)*self.
// The fusion mode exists for component studies: either branch alone, the
// ungated mean of both, or the full gate. Parameters are only created for
// the branches a mode actually uses.
// ---------------------------------------------------------------------------

enum class Fusion {
    Dfa,      // gated fusion (default)
    Linear,   // (nbr + self) / 2, no gate parameters
    NflOnly,  // neighbor branch alone
    SflOnly,  // self branch alone
};

struct IslConfig {
    std::size_t k_hat = 1;                 // neighborhood size
    std::vector<std::size_t> mlp_widths;   // layer widths, last entry = output width
    double leaky_slope = 0.2;
    Fusion fusion = Fusion::Dfa;

    void validate() const;

    bool operator==(const IslConfig&) const = default;
};

// One linear -> batchnorm block. The linear has no bias because the
// batchnorm shift immediately follows it. Weights right-multiply feature
// rows: y = x * W with W of shape in x out.
struct LinearBn {
    TP W;
    BatchNorm bn;
};

struct IslParams {
    IslConfig cfg;
    std::size_t c_in = 0;
    std::vector<LinearBn> mlp1;  // neighbor branch, c_in -> widths...
    std::vector<LinearBn> mlp2;  // self branch, same widths
    LinearBn phi1;               // gate bottleneck: C -> max(1, C/4)
    TP phi2_W;                   // bottleneck -> C
    TP phi2_b;                   // 1 x C

    std::size_t c_out() const { return cfg.mlp_widths.back(); }
};

// Fills W with N(0, sqrt(gain2 / fan_in)) entries, fan_in = leading extent.
// gain2 = 2/(1+slope^2) suits layers feeding a leaky ReLU; gain2 = 1 suits
// plain linear layers.
void init_normal_fanin(Tensor& W, double gain2, Rng& rng);

// Creates `<prefix>.W` plus `<prefix>.bn.{gamma,beta,run_mean,run_var}` in
// the store. gain2 selects the weight init scale as above.
LinearBn make_linear_bn(ParameterStore& store, const std::string& prefix, std::size_t in,
                        std::size_t out, double gain2, Rng& rng);

// Registers every tensor of one ISL block under `<prefix>/...`:
//   mlp1.{i}.W, mlp1.{i}.bn.*, mlp2.{i}.W, mlp2.{i}.bn.*,
//   dfa.fc1.W, dfa.fc1.bn.*, dfa.fc2.W, dfa.fc2.b
// Only the blocks the fusion mode uses are created (e.g. SflOnly registers
// just the mlp2 chain).
IslParams make_isl_params(ParameterStore& store, const std::string& prefix, std::size_t c_in,
                          IslConfig cfg, Rng& rng);

// Applies linear -> batchnorm -> leaky ReLU.
TP linear_bn_act(Tape& tape, const TP& x, LinearBn& layer, double slope, bool training);

// Chains linear_bn_act over all layers.
TP mlp_chain(Tape& tape, TP x, std::vector<LinearBn>& layers, double slope, bool training);

// Edge tensor of shape N x k x C: entry (i, j) = F[i] - F[nbr[i][j]].
// Slot j=0 is the self-edge and therefore all zeros for tables built by knn.
TP edge_features(Tape& tape, const TP& F, const NeighborIndex& nbr);

// Neighbor branch: MLP over edge rows, then max over each point's k edges.
TP nfl_forward(Tape& tape, const TP& F, const NeighborIndex& nbr, IslParams& p, bool training);

// Self branch: pointwise MLP.
TP sfl_forward(Tape& tape, const TP& F, IslParams& p, bool training);

// Gated fusion: w = sigmoid(phi2(bn(phi1(t_nbr + t_self)))), output
// w (*) t_nbr + (1-w) (*) t_self. Every gate entry lies strictly in (0, 1),
// so each output coordinate lies between the two branch values.
TP dfa_fuse(Tape& tape, const TP& t_nbr, const TP& t_self, IslParams& p, bool training);

// Full block, dispatching on the configured fusion mode. The default is
// dfa_fuse(nfl_forward(F, nbr), sfl_forward(F)).
TP isl_forward(Tape& tape, const TP& F, const NeighborIndex& nbr, IslParams& p, bool training);

}  // namespace pointrel
