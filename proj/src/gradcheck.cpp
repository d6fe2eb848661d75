#include "pointrel/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "pointrel/models.hpp"
#include "pointrel/trainkit.hpp"

namespace pointrel {

namespace {

// ---------------------------------------------------------------------------
// Central-difference engine
// ---------------------------------------------------------------------------

// Compares analytic gradients against central differences at the current
// values of `leaves`. Probes every entry when probes_per_leaf is 0, otherwise
// a deterministic random subset per leaf. The relative error divides by
// max(|analytic|, |numeric|, floor); the floor absorbs cancellation noise on
// near-zero gradients.
//
// Sampled mode additionally validates each probe before trusting it. Networks
// with hard selections (max pooling, rank-based region selection) are only
// piecewise smooth, and a probe whose +/-h window straddles a piece boundary
// compares the one-sided slopes of two different pieces -- it measures no
// derivative at all, no matter how correct the backward pass is. Straddling
// is detectable without reference to the analytic value: the two one-sided
// difference quotients agree to O(h * f'') on a smooth piece but differ by
// the full slope jump across a boundary. Probes whose one-sided slopes
// disagree by more than kSlopeGapTol (relative) are discarded and another
// entry of the same tensor is drawn; if no clean entry turns up within the
// attempt budget the least-straddled one is used anyway, so a systematic
// problem still fails loudly instead of being skipped.
constexpr double kSlopeGapTol = 1e-4;

double fd_run(const std::function<TP(Tape&)>& build, const std::vector<TP>& leaves, double floor,
              std::size_t probes_per_leaf, Rng& pick) {
    for (const TP& t : leaves) {
        t->ensure_grad();
        t->zero_grad();
    }
    {
        Tape tape;
        TP loss = build(tape);
        backward(tape, loss);
    }
    std::vector<std::vector<double>> analytic;
    analytic.reserve(leaves.size());
    for (const TP& t : leaves) analytic.emplace_back(t->g.begin(), t->g.end());

    auto eval = [&build]() {
        Tape tape;
        return build(tape)->v[0];
    };

    const double h = kGradCheckStep;
    double worst = 0.0;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        Tensor& t = *leaves[li];
        std::vector<std::size_t> entries(t.numel());
        std::iota(entries.begin(), entries.end(), std::size_t{0});
        if (probes_per_leaf != 0 && probes_per_leaf < entries.size()) {
            for (std::size_t i = 0; i < probes_per_leaf; ++i)
                std::swap(entries[i], entries[i + pick.uniform_index(entries.size() - i)]);
            entries.resize(probes_per_leaf);
        }
        for (std::size_t i : entries) {
            const double keep = t.v[i];
            t.v[i] = keep + h;
            const double fp = eval();
            t.v[i] = keep - h;
            const double fm = eval();
            t.v[i] = keep;
            const double fd = (fp - fm) / (2.0 * h);
            const double an = analytic[li][i];
            const double err =
                std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), floor});
            worst = std::max(worst, err);
        }
    }
    return worst;
}

// ---------------------------------------------------------------------------
// Input builders
// ---------------------------------------------------------------------------

TP rand_mat(Rng& rng, std::size_t r, std::size_t c, bool track = true) {
    TP t = make_tensor({r, c}, track);
    for (double& v : t->v) v = rng.uniform(-1.0, 1.0);
    return t;
}

std::vector<double> rand_weights(Rng& rng, std::size_t n) {
    std::vector<double> w(n);
    for (double& v : w) v = rng.uniform(-1.0, 1.0);
    return w;
}

// Scalarizes a matrix output with fixed random weights so every entry
// contributes a generic gradient.
TP wsum(Tape& tape, const TP& out, const std::vector<double>& w) {
    TP wt = make_tensor(out->shape, w);
    return reduce_all(tape, hadamard(tape, out, wt), Reduce::Sum);
}

std::vector<double> rand_coords(Rng& rng, std::size_t n) {
    std::vector<double> xyz(n * 3);
    for (double& v : xyz) v = rng.uniform(-1.0, 1.0);
    return xyz;
}

IslConfig small_isl(std::size_t k_hat) {
    IslConfig cfg;
    cfg.k_hat = k_hat;
    cfg.mlp_widths = {5, 6};
    return cfg;
}

// ---------------------------------------------------------------------------
// Checks. Each returns the worst relative error for one seed.
// ---------------------------------------------------------------------------

using CheckFn = std::function<double(std::uint64_t)>;

struct Check {
    std::string name;
    CheckFn fn;
};

double check_binary(std::uint64_t seed, TP (*op)(Tape&, const TP&, const TP&), std::size_t ar,
                    std::size_t ac, std::size_t br, std::size_t bc, std::size_t outn) {
    Rng rng(seed);
    TP a = rand_mat(rng, ar, ac);
    TP b = rand_mat(rng, br, bc);
    const std::vector<double> w = rand_weights(rng, outn);
    Rng pick(seed ^ 0x9E37);
    return fd_run([&](Tape& t) { return wsum(t, op(t, a, b), w); }, {a, b}, 1e-6, 0, pick);
}

double check_unary(std::uint64_t seed, const std::function<TP(Tape&, const TP&)>& op,
                   std::size_t r, std::size_t c, std::size_t outn) {
    Rng rng(seed);
    TP x = rand_mat(rng, r, c);
    const std::vector<double> w = rand_weights(rng, outn);
    Rng pick(seed ^ 0x9E37);
    return fd_run([&](Tape& t) { return wsum(t, op(t, x), w); }, {x}, 1e-6, 0, pick);
}

double check_reduce(std::uint64_t seed, Reduce kind, int axis) {
    const std::size_t outn = axis == 0 ? 5 : 4;
    return check_unary(
        seed, [kind, axis](Tape& t, const TP& x) { return reduce(t, x, kind, axis); }, 4, 5, outn);
}

double check_reduce_all(std::uint64_t seed, Reduce kind) {
    return check_unary(
        seed, [kind](Tape& t, const TP& x) { return reduce_all(t, x, kind); }, 4, 5, 1);
}

double check_reduce_rowblocks(std::uint64_t seed, Reduce kind) {
    return check_unary(
        seed, [kind](Tape& t, const TP& x) { return reduce_rowblocks(t, x, kind, 2); }, 6, 3,
        3 * 3);
}

double check_leaky_relu(std::uint64_t seed) {
    Rng rng(seed);
    TP x = make_tensor({3, 4}, true);
    // Keep inputs away from the hinge: central differences straddle it.
    for (double& v : x->v) v = (rng.uniform01() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.1, 1.0);
    const std::vector<double> w = rand_weights(rng, 12);
    Rng pick(seed ^ 0x9E37);
    return fd_run([&](Tape& t) { return wsum(t, leaky_relu(t, x, 0.2), w); }, {x}, 1e-6, 0, pick);
}

double check_gather_rows(std::uint64_t seed) {
    Rng rng(seed);
    TP x = rand_mat(rng, 5, 3);
    const std::vector<std::uint32_t> idx{0, 2, 2, 4, 1};  // duplicates hit scatter-add
    const std::vector<double> w = rand_weights(rng, 15);
    Rng pick(seed ^ 0x9E37);
    return fd_run([&](Tape& t) { return wsum(t, gather_rows(t, x, idx), w); }, {x}, 1e-6, 0,
                  pick);
}

double check_concat(std::uint64_t seed, bool rows) {
    Rng rng(seed);
    TP a = rows ? rand_mat(rng, 2, 3) : rand_mat(rng, 3, 2);
    TP b = rand_mat(rng, 3, 3);
    const std::vector<double> w = rand_weights(rng, 15);
    Rng pick(seed ^ 0x9E37);
    return fd_run(
        [&](Tape& t) {
            TP out = rows ? concat_rows(t, {a, b}) : concat_cols(t, {a, b});
            return wsum(t, out, w);
        },
        {a, b}, 1e-6, 0, pick);
}

double check_dropout(std::uint64_t seed) {
    Rng rng(seed);
    TP x = rand_mat(rng, 4, 5);
    const std::vector<double> w = rand_weights(rng, 20);
    Rng pick(seed ^ 0x9E37);
    return fd_run(
        [&, seed](Tape& t) {
            Rng mask_rng(seed ^ 0xD0);  // identical mask on every evaluation
            return wsum(t, dropout(t, x, 0.4, mask_rng, true), w);
        },
        {x}, 1e-6, 0, pick);
}

double check_batchnorm(std::uint64_t seed, bool training) {
    Rng rng(seed);
    TP x = rand_mat(rng, 6, 4);
    BatchNorm bn = make_batchnorm(4);
    for (double& v : bn.gamma->v) v = rng.uniform(0.5, 1.5);
    for (double& v : bn.beta->v) v = rng.uniform(-0.5, 0.5);
    for (double& v : bn.run_mean->v) v = rng.uniform(-0.5, 0.5);
    for (double& v : bn.run_var->v) v = rng.uniform(0.5, 1.5);
    const std::vector<double> w = rand_weights(rng, 24);
    Rng pick(seed ^ 0x9E37);
    return fd_run([&](Tape& t) { return wsum(t, batchnorm(t, x, bn, training), w); },
                  {x, bn.gamma, bn.beta}, 1e-6, 0, pick);
}

double check_mlp_chain(std::uint64_t seed) {
    Rng rng(seed);
    ParameterStore store;
    IslParams p = make_isl_params(store, "m", 4, small_isl(2), rng);
    TP x = rand_mat(rng, 6, 4);
    const std::vector<double> w = rand_weights(rng, 6 * 6);
    std::vector<TP> leaves = store.trainable();
    leaves.push_back(x);
    Rng pick(seed ^ 0x9E37);
    return fd_run([&](Tape& t) { return wsum(t, mlp_chain(t, x, p.mlp1, 0.2, true), w); },
                  leaves, 1e-6, 0, pick);
}

double check_smoothed_ce(std::uint64_t seed) {
    Rng rng(seed);
    TP logits = rand_mat(rng, 4, 5);
    std::vector<std::size_t> targets(4);
    for (std::size_t& t : targets) t = rng.uniform_index(5);
    Rng pick(seed ^ 0x9E37);
    return fd_run([&](Tape& t) { return smoothed_cross_entropy(t, logits, targets, 0.2); },
                  {logits}, 1e-6, 0, pick);
}

double check_edge_features(std::uint64_t seed) {
    Rng rng(seed);
    TP F = rand_mat(rng, 5, 3);
    const NeighborIndex nbr = knn(rand_coords(rng, 5), 5, 3);
    const std::vector<double> w = rand_weights(rng, 5 * 3 * 3);
    Rng pick(seed ^ 0x9E37);
    return fd_run([&](Tape& t) { return wsum(t, edge_features(t, F, nbr), w); }, {F}, 1e-6, 0,
                  pick);
}

double check_isl_branch(std::uint64_t seed, int which) {
    Rng rng(seed);
    ParameterStore store;
    IslParams p = make_isl_params(store, "b", 4, small_isl(3), rng);
    TP F = rand_mat(rng, 6, 4);
    const NeighborIndex nbr = knn(rand_coords(rng, 6), 6, 3);
    const std::vector<double> w = rand_weights(rng, 6 * 6);
    std::vector<TP> leaves = store.trainable();
    leaves.push_back(F);
    Rng pick(seed ^ 0x9E37);
    auto build = [&](Tape& t) -> TP {
        switch (which) {
            case 0: return wsum(t, nfl_forward(t, F, nbr, p, true), w);
            case 1: return wsum(t, sfl_forward(t, F, p, true), w);
            default: return wsum(t, isl_forward(t, F, nbr, p, true), w);
        }
    };
    return fd_run(build, leaves, 1e-6, 0, pick);
}

double check_dfa_fuse(std::uint64_t seed) {
    Rng rng(seed);
    ParameterStore store;
    IslParams p = make_isl_params(store, "d", 4, small_isl(2), rng);
    TP t_nbr = rand_mat(rng, 5, 6);
    TP t_self = rand_mat(rng, 5, 6);
    const std::vector<double> w = rand_weights(rng, 5 * 6);
    std::vector<TP> leaves = store.trainable();
    leaves.push_back(t_nbr);
    leaves.push_back(t_self);
    Rng pick(seed ^ 0x9E37);
    return fd_run([&](Tape& t) { return wsum(t, dfa_fuse(t, t_nbr, t_self, p, true), w); },
                  leaves, 1e-6, 0, pick);
}

double check_score_points(std::uint64_t seed) {
    Rng rng(seed);
    ParameterStore store;
    IrlParams p = make_irl_params(store, "s", 4, rng);
    TP T = rand_mat(rng, 6, 4);
    const std::vector<double> w = rand_weights(rng, 6);
    std::vector<TP> leaves = store.trainable();
    leaves.push_back(T);
    Rng pick(seed ^ 0x9E37);
    return fd_run([&](Tape& t) { return wsum(t, score_points(t, T, p), w); }, leaves, 1e-6, 0,
                  pick);
}

double check_scale_region_features(std::uint64_t seed) {
    Rng rng(seed);
    TP T = rand_mat(rng, 8, 3);
    TP scores_t = make_tensor({8, 1}, true);
    std::vector<double> score_vals(8);
    for (std::size_t i = 0; i < 8; ++i) {
        score_vals[i] = rng.uniform(0.05, 0.95);
        scores_t->v[i] = score_vals[i];
    }
    const RegionPartition part = partition_dilated_top_s(score_vals, rand_coords(rng, 8), 8, 3, 2);
    const std::vector<double> w = rand_weights(rng, 3 * 2 * 3);
    Rng pick(seed ^ 0x9E37);
    return fd_run([&](Tape& t) { return wsum(t, scale_region_features(t, T, scores_t, part), w); },
                  {T, scores_t}, 1e-6, 0, pick);
}

// make_irl_params starts the output projection near zero, which would leave
// most attention gradients degenerate; generic values exercise every path.
void randomize_store(ParameterStore& store, Rng& rng) {
    for (const TP& t : store.trainable())
        for (double& v : t->v) v = rng.uniform(-0.5, 0.5);
}

double check_slot_attention(std::uint64_t seed) {
    Rng rng(seed);
    ParameterStore store;
    IrlParams p = make_irl_params(store, "a", 3, rng);
    randomize_store(store, rng);
    std::vector<TP> slots{rand_mat(rng, 4, 3), rand_mat(rng, 4, 3)};
    const std::vector<double> w0 = rand_weights(rng, 12), w1 = rand_weights(rng, 12);
    std::vector<TP> leaves = store.trainable();
    leaves.push_back(slots[0]);
    leaves.push_back(slots[1]);
    Rng pick(seed ^ 0x9E37);
    return fd_run(
        [&](Tape& t) {
            const std::vector<TP> outs = slot_attention(t, slots, p);
            return reduce_all(t, add(t, wsum(t, outs[0], w0), wsum(t, outs[1], w1)), Reduce::Sum);
        },
        leaves, 1e-6, 0, pick);
}

double check_interpolate_residual(std::uint64_t seed) {
    Rng rng(seed);
    TP T = rand_mat(rng, 7, 2);
    TP g_hat = rand_mat(rng, 4, 2);
    const std::vector<double> anchors = rand_coords(rng, 4);
    const std::vector<double> all = rand_coords(rng, 7);
    const std::vector<double> w = rand_weights(rng, 14);
    Rng pick(seed ^ 0x9E37);
    return fd_run([&](Tape& t) { return wsum(t, interpolate_residual(t, T, g_hat, anchors, all), w); },
                  {T, g_hat}, 1e-6, 0, pick);
}

double check_irl_forward(std::uint64_t seed) {
    Rng rng(seed);
    ParameterStore store;
    IrlParams p = make_irl_params(store, "irl", 4, rng);
    randomize_store(store, rng);
    TP T = rand_mat(rng, 10, 4);
    const std::vector<double> coords = rand_coords(rng, 10);
    IrlConfig cfg;
    cfg.S = 4;
    cfg.k = 3;
    cfg.m = 2;
    const std::vector<double> w = rand_weights(rng, 10 * 4);
    std::vector<TP> leaves = store.trainable();
    leaves.push_back(T);
    Rng pick(seed ^ 0x9E37);
    return fd_run([&](Tape& t) { return wsum(t, irl_forward(t, T, coords, cfg, p), w); }, leaves,
                  1e-6, 0, pick);
}

// The full stock classifier in inference mode. Every parameter and running
// statistic is jittered off its initialization first: freshly initialized
// shift/mean pairs park the normalized self-edge rows exactly on the leaky
// ReLU hinge, where central differences measure the average of the two
// one-sided slopes instead of the derivative the backward pass uses. The
// jitter moves evaluation to a generic point; one random entry per tensor is
// probed to keep the runtime in budget. The floor is 1e-4 because the loss
// magnitude makes ~1e-9 cancellation noise, which near-zero gradients would
// otherwise amplify past any tolerance.
double check_classifier_forward(std::uint64_t seed) {
    Rng rng(seed);
    ParameterStore store;
    const NetworkSpec spec = build_classifier(4);
    NetworkParams params = make_network_params(store, spec, rng);

    Rng jitter = rng.derive(11);
    for (const auto& [name, t] : store.entries()) {
        const bool variance = name.find("run_var") != std::string::npos;
        for (double& v : t->v) v = variance ? v * jitter.uniform(1.1, 1.5) : v + jitter.uniform(-0.1, 0.1);
    }

    Rng cloud_rng = rng.derive(12);
    PointCloud cloud;
    cloud.n = 256;
    cloud.xyz = rand_coords(cloud_rng, 256);
    const std::vector<PointCloud> batch{cloud};

    Rng wr = rng.derive(13);
    const std::vector<double> w = rand_weights(wr, 4);

    Rng pick(seed ^ 0x9E37);
    return fd_run(
        [&](Tape& t) {
            Rng fw(0);  // inference mode draws nothing
            ForwardResult res = forward(t, spec, params, batch, false, fw);
            return wsum(t, res.logits, w);
        },
        store.trainable(), 1e-4, 1, pick);
}

const std::vector<Check>& registry() {
    static const std::vector<Check> checks = [] {
        std::vector<Check> c;
        auto bin2 = [](TP (*op)(Tape&, const TP&, const TP&)) {
            return [op](std::uint64_t s) { return check_binary(s, op, 3, 4, 3, 4, 12); };
        };
        c.push_back({"add", bin2(add)});
        c.push_back({"sub", bin2(sub)});
        c.push_back({"hadamard", bin2(hadamard)});
        c.push_back({"matmul",
                     [](std::uint64_t s) { return check_binary(s, matmul, 3, 4, 4, 5, 15); }});
        c.push_back({"matmul_nt",
                     [](std::uint64_t s) { return check_binary(s, matmul_nt, 3, 4, 5, 4, 15); }});
        c.push_back({"sigmoid", [](std::uint64_t s) {
                         return check_unary(
                             s, [](Tape& t, const TP& x) { return sigmoid(t, x); }, 3, 4, 12);
                     }});
        c.push_back({"leaky_relu", check_leaky_relu});
        c.push_back({"scale_by_scalar", [](std::uint64_t s) {
                         return check_unary(
                             s, [](Tape& t, const TP& x) { return scale_by_scalar(t, x, -1.7); },
                             3, 4, 12);
                     }});
        c.push_back({"affine_scalar", [](std::uint64_t s) {
                         return check_unary(
                             s,
                             [](Tape& t, const TP& x) { return affine_scalar(t, x, 1.3, -0.4); },
                             3, 4, 12);
                     }});
        const std::pair<const char*, Reduce> kinds[]{
            {"max", Reduce::Max}, {"mean", Reduce::Mean}, {"sum", Reduce::Sum}};
        for (const auto& [kname, kind] : kinds) {
            const Reduce kk = kind;
            c.push_back({std::string("reduce_") + kname + "_axis0",
                         [kk](std::uint64_t s) { return check_reduce(s, kk, 0); }});
            c.push_back({std::string("reduce_") + kname + "_axis1",
                         [kk](std::uint64_t s) { return check_reduce(s, kk, 1); }});
            c.push_back({std::string("reduce_all_") + kname,
                         [kk](std::uint64_t s) { return check_reduce_all(s, kk); }});
            c.push_back({std::string("reduce_rowblocks_") + kname,
                         [kk](std::uint64_t s) { return check_reduce_rowblocks(s, kk); }});
        }
        c.push_back({"softmax_rows", [](std::uint64_t s) {
                         return check_unary(
                             s, [](Tape& t, const TP& x) { return softmax_rows(t, x); }, 4, 5,
                             20);
                     }});
        c.push_back({"gather_rows", check_gather_rows});
        c.push_back({"concat_rows", [](std::uint64_t s) { return check_concat(s, true); }});
        c.push_back({"concat_cols", [](std::uint64_t s) { return check_concat(s, false); }});
        c.push_back({"dropout", check_dropout});
        c.push_back({"batchnorm_train", [](std::uint64_t s) { return check_batchnorm(s, true); }});
        c.push_back({"batchnorm_eval", [](std::uint64_t s) { return check_batchnorm(s, false); }});
        c.push_back({"mlp_chain", check_mlp_chain});
        c.push_back({"smoothed_cross_entropy", check_smoothed_ce});
        c.push_back({"edge_features", check_edge_features});
        c.push_back({"nfl_forward", [](std::uint64_t s) { return check_isl_branch(s, 0); }});
        c.push_back({"sfl_forward", [](std::uint64_t s) { return check_isl_branch(s, 1); }});
        c.push_back({"dfa_fuse", check_dfa_fuse});
        c.push_back({"isl_forward", [](std::uint64_t s) { return check_isl_branch(s, 2); }});
        c.push_back({"score_points", check_score_points});
        c.push_back({"scale_region_features", check_scale_region_features});
        c.push_back({"slot_attention", check_slot_attention});
        c.push_back({"interpolate_residual", check_interpolate_residual});
        c.push_back({"irl_forward", check_irl_forward});
        c.push_back({"classifier_forward", check_classifier_forward});
        return c;
    }();
    return checks;
}

}  // namespace

std::vector<std::string> gradcheck_names() {
    std::vector<std::string> names;
    names.reserve(registry().size());
    for (const Check& c : registry()) names.push_back(c.name);
    return names;
}

std::vector<GradCheckOutcome> run_gradchecks(const std::string& scope,
                                             const std::vector<std::uint64_t>& seeds) {
    if (seeds.empty()) throw ConfigError("gradcheck: need at least one seed");
    std::vector<const Check*> selected;
    if (scope == "all") {
        for (const Check& c : registry()) selected.push_back(&c);
    } else {
        const Check* exact = nullptr;
        std::vector<const Check*> prefixed;
        for (const Check& c : registry()) {
            if (c.name == scope) exact = &c;
            else if (c.name.rfind(scope, 0) == 0) prefixed.push_back(&c);
        }
        if (exact) {
            selected.push_back(exact);
        } else if (prefixed.size() == 1) {
            selected = prefixed;
        } else if (prefixed.empty()) {
            throw ConfigError("gradcheck: unknown check '" + scope + "'");
        } else {
            std::string msg = "gradcheck: '" + scope + "' is ambiguous:";
            for (const Check* c : prefixed) msg += " " + c->name;
            throw ConfigError(msg);
        }
    }

    std::vector<GradCheckOutcome> out;
    out.reserve(selected.size());
    for (const Check* c : selected) {
        GradCheckOutcome o;
        o.name = c->name;
        for (std::uint64_t seed : seeds) o.max_rel_err = std::max(o.max_rel_err, c->fn(seed));
        o.pass = o.max_rel_err < kGradCheckTolerance;
        out.push_back(std::move(o));
    }
    return out;
}

}  // namespace pointrel
