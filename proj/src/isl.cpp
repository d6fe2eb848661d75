#include "pointrel/isl.hpp"

#include <algorithm>
#include <cmath>

namespace pointrel {

void IslConfig::validate() const {
    if (k_hat < 1) throw ConfigError("IslConfig: k_hat must be >= 1");
    if (mlp_widths.empty()) throw ConfigError("IslConfig: mlp_widths must be non-empty");
    for (std::size_t w : mlp_widths)
        if (w < 1) throw ConfigError("IslConfig: every mlp width must be >= 1");
    if (leaky_slope < 0.0 || leaky_slope >= 1.0)
        throw ConfigError("IslConfig: leaky_slope must be in [0, 1)");
}

void init_normal_fanin(Tensor& W, double gain2, Rng& rng) {
    const double sigma = std::sqrt(gain2 / static_cast<double>(W.shape.front()));
    for (double& v : W.v) v = rng.normal(0.0, sigma);
}

LinearBn make_linear_bn(ParameterStore& store, const std::string& prefix, std::size_t in,
                        std::size_t out, double gain2, Rng& rng) {
    LinearBn layer;
    layer.W = store.create(prefix + ".W", {in, out});
    init_normal_fanin(*layer.W, gain2, rng);
    layer.bn = make_batchnorm(out);
    store.adopt(prefix + ".bn.gamma", layer.bn.gamma);
    store.adopt(prefix + ".bn.beta", layer.bn.beta);
    store.adopt(prefix + ".bn.run_mean", layer.bn.run_mean);
    store.adopt(prefix + ".bn.run_var", layer.bn.run_var);
    return layer;
}

IslParams make_isl_params(ParameterStore& store, const std::string& prefix, std::size_t c_in,
                          IslConfig cfg, Rng& rng) {
    cfg.validate();
    if (c_in < 1) throw ConfigError("make_isl_params: c_in must be >= 1");

    IslParams p;
    p.cfg = std::move(cfg);
    p.c_in = c_in;
    const double slope = p.cfg.leaky_slope;
    const double leaky_gain2 = 2.0 / (1.0 + slope * slope);

    const Fusion mode = p.cfg.fusion;
    if (mode != Fusion::SflOnly) {
        std::size_t in = c_in;
        for (std::size_t i = 0; i < p.cfg.mlp_widths.size(); ++i) {
            const std::size_t out = p.cfg.mlp_widths[i];
            p.mlp1.push_back(make_linear_bn(store, prefix + "/mlp1." + std::to_string(i), in, out,
                                            leaky_gain2, rng));
            in = out;
        }
    }
    if (mode != Fusion::NflOnly) {
        std::size_t in = c_in;
        for (std::size_t i = 0; i < p.cfg.mlp_widths.size(); ++i) {
            const std::size_t out = p.cfg.mlp_widths[i];
            p.mlp2.push_back(make_linear_bn(store, prefix + "/mlp2." + std::to_string(i), in, out,
                                            leaky_gain2, rng));
            in = out;
        }
    }
    if (mode == Fusion::Dfa) {
        const std::size_t c = p.c_out();
        const std::size_t hidden = std::max<std::size_t>(1, c / 4);
        p.phi1 = make_linear_bn(store, prefix + "/dfa.fc1", c, hidden, 1.0, rng);
        p.phi2_W = store.create(prefix + "/dfa.fc2.W", {hidden, c});
        init_normal_fanin(*p.phi2_W, 1.0, rng);
        p.phi2_b = store.create(prefix + "/dfa.fc2.b", {1, c});
    }
    return p;
}

TP linear_bn_act(Tape& tape, const TP& x, LinearBn& layer, double slope, bool training) {
    TP h = matmul(tape, x, layer.W);
    h = batchnorm(tape, h, layer.bn, training);
    return leaky_relu(tape, h, slope);
}

TP mlp_chain(Tape& tape, TP x, std::vector<LinearBn>& layers, double slope, bool training) {
    for (LinearBn& layer : layers) x = linear_bn_act(tape, x, layer, slope, training);
    return x;
}

TP edge_features(Tape& tape, const TP& F, const NeighborIndex& nbr) {
    const std::size_t n = F->rows(), c = F->cols(), k = nbr.k;
    if (n != nbr.n)
        throw DimensionError("edge_features: " + std::to_string(n) + " feature rows vs neighbor table over " +
                             std::to_string(nbr.n) + " points");
    std::vector<std::uint32_t> centers(n * k), neighbors(n * k);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j) {
            centers[i * k + j] = static_cast<std::uint32_t>(i);
            neighbors[i * k + j] = static_cast<std::uint32_t>(nbr.at(i, j));
        }
    TP center_feats = gather_rows(tape, F, std::move(centers));
    TP nbr_feats = gather_rows(tape, F, std::move(neighbors));
    TP edges = sub(tape, center_feats, nbr_feats);
    // The rows are (point, slot) pairs; expose the block structure in the
    // shape. Element layout is unchanged, so recorded closures stay valid.
    edges->shape = {n, k, c};
    return edges;
}

TP nfl_forward(Tape& tape, const TP& F, const NeighborIndex& nbr, IslParams& p, bool training) {
    TP edges = edge_features(tape, F, nbr);
    TP h = mlp_chain(tape, edges, p.mlp1, p.cfg.leaky_slope, training);
    return reduce_rowblocks(tape, h, Reduce::Max, nbr.k);
}

TP sfl_forward(Tape& tape, const TP& F, IslParams& p, bool training) {
    return mlp_chain(tape, F, p.mlp2, p.cfg.leaky_slope, training);
}

TP dfa_fuse(Tape& tape, const TP& t_nbr, const TP& t_self, IslParams& p, bool training) {
    if (t_nbr->shape != t_self->shape)
        throw DimensionError("dfa_fuse: branch shapes differ");
    TP s = add(tape, t_nbr, t_self);
    TP h = matmul(tape, s, p.phi1.W);
    h = batchnorm(tape, h, p.phi1.bn, training);
    TP logits = add(tape, matmul(tape, h, p.phi2_W), p.phi2_b);
    TP w = sigmoid(tape, logits);
    TP w_complement = affine_scalar(tape, w, -1.0, 1.0);
    return add(tape, hadamard(tape, w, t_nbr), hadamard(tape, w_complement, t_self));
}

TP isl_forward(Tape& tape, const TP& F, const NeighborIndex& nbr, IslParams& p, bool training) {
    switch (p.cfg.fusion) {
        case Fusion::NflOnly:
            return nfl_forward(tape, F, nbr, p, training);
        case Fusion::SflOnly:
            return sfl_forward(tape, F, p, training);
        case Fusion::Linear: {
            TP t_nbr = nfl_forward(tape, F, nbr, p, training);
            TP t_self = sfl_forward(tape, F, p, training);
            return scale_by_scalar(tape, add(tape, t_nbr, t_self), 0.5);
        }
        case Fusion::Dfa:
            break;
    }
    TP t_nbr = nfl_forward(tape, F, nbr, p, training);
    TP t_self = sfl_forward(tape, F, p, training);
    return dfa_fuse(tape, t_nbr, t_self, p, training);
}

}  // namespace pointrel
