#include "pointrel/irl.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <utility>

#include "pointrel/isl.hpp"

namespace pointrel {

namespace {

// Indices sorted by score descending; equal scores keep ascending index order.
std::vector<std::uint32_t> order_by_score(const std::vector<double>& scores) {
    std::vector<std::uint32_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0u);
    std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    });
    return order;
}

void check_partition_args(const std::vector<double>& scores, const std::vector<double>& coords,
                          std::size_t n, std::size_t S, std::size_t k, const char* who) {
    if (n == 0) throw DomainError(std::string(who) + ": empty point set");
    if (scores.size() != n) throw DimensionError(std::string(who) + ": expected one score per point");
    if (coords.size() != n * 3) throw DimensionError(std::string(who) + ": expected n*3 coordinates");
    if (S < 1 || S > n)
        throw DomainError(std::string(who) + ": S = " + std::to_string(S) + " outside [1, " +
                          std::to_string(n) + "]");
    if (k < 1 || k > n)
        throw DomainError(std::string(who) + ": k = " + std::to_string(k) + " outside [1, " +
                          std::to_string(n) + "]");
    for (double s : scores)
        if (!std::isfinite(s)) throw NumericError(std::string(who) + ": non-finite score");
}

RegionPartition finish_partition(const std::vector<double>& scores,
                                 const std::vector<double>& coords, std::size_t n, std::size_t S,
                                 std::size_t k, std::vector<std::uint32_t> centroids) {
    RegionPartition part;
    part.n = n;
    part.S = S;
    part.k = k;
    part.scores = scores;
    part.members = knn_subset(coords, n, centroids, k).idx;
    part.centroids = std::move(centroids);
    return part;
}

void check_partition_shape(const RegionPartition& part, std::size_t n, const char* who) {
    if (part.n != n || part.S < 1 || part.k < 1 || part.centroids.size() != part.S ||
        part.members.size() != part.S * part.k)
        throw ContractError(std::string(who) + ": malformed region partition");
    for (std::uint32_t idx : part.members)
        if (idx >= n) throw IndexError(std::string(who) + ": member index out of range");
}

}  // namespace

void IrlConfig::validate() const {
    if (S < 1) throw ConfigError("irl: region count S must be >= 1");
    if (k < 1) throw ConfigError("irl: region size k must be >= 1");
    if (m < 1 || m > k) throw ConfigError("irl: representative count m must satisfy 1 <= m <= k");
    if ((sampler == Sampler::MaxPool || sampler == Sampler::MeanPool) && m != 1)
        throw ConfigError("irl: pooled samplers produce exactly one virtual slot, so m must be 1");
}

IrlParams make_irl_params(ParameterStore& store, const std::string& prefix, std::size_t c,
                          Rng& rng) {
    if (c < 1) throw ConfigError("irl: feature width must be >= 1");
    IrlParams p;
    p.c = c;
    p.score_W = store.create(prefix + "/score.W", {c, 1});
    init_normal_fanin(*p.score_W, 1.0, rng);
    p.score_b = store.create(prefix + "/score.b", {1, 1});  // starts at zero
    p.Wq = store.create(prefix + "/att.Wq", {c, c});
    init_normal_fanin(*p.Wq, 1.0, rng);
    p.Wk = store.create(prefix + "/att.Wk", {c, c});
    init_normal_fanin(*p.Wk, 1.0, rng);
    p.Wv = store.create(prefix + "/att.Wv", {c, c});
    init_normal_fanin(*p.Wv, 1.0, rng);
    p.Wz = store.create(prefix + "/att.Wz", {c, c});
    init_normal_fanin(*p.Wz, 1.0, rng);
    // A small (not zero) output projection keeps a fresh block close to the
    // residual identity while every parameter still receives gradient.
    for (double& v : p.Wz->v) v *= 0.05;
    return p;
}

TP score_points(Tape& tape, const TP& T, IrlParams& params) {
    if (T->cols() != params.c)
        throw DimensionError("score_points: feature width " + std::to_string(T->cols()) +
                             " does not match parameters built for " + std::to_string(params.c));
    TP h = matmul(tape, T, params.score_W);   // N x 1
    TP z = add(tape, h, params.score_b);      // broadcast bias
    return sigmoid(tape, z);
}

RegionPartition partition_top_s(const std::vector<double>& scores,
                                const std::vector<double>& coords, std::size_t n, std::size_t S,
                                std::size_t k) {
    check_partition_args(scores, coords, n, S, k, "partition_top_s");
    std::vector<std::uint32_t> order = order_by_score(scores);
    order.resize(S);
    return finish_partition(scores, coords, n, S, k, std::move(order));
}

RegionPartition partition_dilated_top_s(const std::vector<double>& scores,
                                        const std::vector<double>& coords, std::size_t n,
                                        std::size_t S, std::size_t k) {
    check_partition_args(scores, coords, n, S, k, "partition_dilated_top_s");
    const std::vector<std::uint32_t> order = order_by_score(scores);
    const std::size_t stride = n / S;  // >= 1 because S <= n
    std::vector<std::uint32_t> centroids(S);
    for (std::size_t t = 0; t < S; ++t) centroids[t] = order[t * stride];
    return finish_partition(scores, coords, n, S, k, std::move(centroids));
}

RegionPartition partition_fps(const std::vector<double>& scores,
                              const std::vector<double>& coords, std::size_t n, std::size_t S,
                              std::size_t k) {
    check_partition_args(scores, coords, n, S, k, "partition_fps");
    return finish_partition(scores, coords, n, S, k, fps(coords, n, S));
}

RegionPartition make_partition(const IrlConfig& cfg, const std::vector<double>& scores,
                               const std::vector<double>& coords, std::size_t n) {
    switch (cfg.partition) {
        case Partition::TopS: return partition_top_s(scores, coords, n, cfg.S, cfg.k);
        case Partition::DilatedTopS:
            return partition_dilated_top_s(scores, coords, n, cfg.S, cfg.k);
        case Partition::Fps: return partition_fps(scores, coords, n, cfg.S, cfg.k);
    }
    throw ContractError("make_partition: unknown partition kind");
}

TP scale_region_features(Tape& tape, const TP& T, const TP& scores,
                         const RegionPartition& part) {
    const std::size_t N = T->rows(), C = T->cols();
    check_partition_shape(part, N, "scale_region_features");
    if (scores->rows() != N || scores->cols() != 1)
        throw DimensionError("scale_region_features: scores must be one column with a row per point");

    const std::size_t S = part.S, k = part.k;
    const bool tr = T->track || scores->track;
    TP out = make_tensor({S, k, C}, tr);
    for (std::size_t i = 0; i < S; ++i) {
        const double s = scores->v[part.centroids[i]];
        for (std::size_t j = 0; j < k; ++j) {
            const double* src = T->v.data() + std::size_t{part.members[i * k + j]} * C;
            double* dst = out->v.data() + (i * k + j) * C;
            for (std::size_t c = 0; c < C; ++c) dst[c] = s * src[c];
        }
    }
    if (tr) {
        // Copies of the index tables keep the closure valid even if the
        // caller's partition is modified or discarded before backward.
        tape.record(out, [T, scores, out, members = part.members, centroids = part.centroids, S,
                          k, C] {
            if (T->track) T->ensure_grad();
            if (scores->track) scores->ensure_grad();
            for (std::size_t i = 0; i < S; ++i) {
                const std::size_t ci = centroids[i];
                const double s = scores->v[ci];
                for (std::size_t j = 0; j < k; ++j) {
                    const std::size_t row = members[i * k + j];
                    const double* go = out->g.data() + (i * k + j) * C;
                    if (T->track) {
                        double* gT = T->g.data() + row * C;
                        for (std::size_t c = 0; c < C; ++c) gT[c] += s * go[c];
                    }
                    if (scores->track) {
                        const double* tv = T->v.data() + row * C;
                        double acc = 0.0;
                        for (std::size_t c = 0; c < C; ++c) acc += tv[c] * go[c];
                        scores->g[ci] += acc;
                    }
                }
            }
        });
    }
    return out;
}

RepresentativeSet sample_representatives(const RegionPartition& part,
                                         const std::vector<double>& coords, Sampler sampler,
                                         std::size_t m, std::uint64_t seed) {
    check_partition_shape(part, part.n, "sample_representatives");
    if (coords.size() != part.n * 3)
        throw DimensionError("sample_representatives: expected n*3 coordinates");

    RepresentativeSet reps;
    reps.S = part.S;
    reps.m = m;
    reps.sampler = sampler;
    switch (sampler) {
        case Sampler::KnnBased: {
            if (m < 1 || m > part.k)
                throw DomainError("sample_representatives: m = " + std::to_string(m) +
                                  " outside [1, " + std::to_string(part.k) + "]");
            reps.chi.resize(part.S * m);
            reps.member_pos.resize(part.S * m);
            // Members are distance-ascending, so the first m are the centroid
            // and its closest neighbors.
            for (std::size_t i = 0; i < part.S; ++i)
                for (std::size_t t = 0; t < m; ++t) {
                    reps.member_pos[i * m + t] = static_cast<std::uint32_t>(t);
                    reps.chi[i * m + t] = part.member(i, t);
                }
            break;
        }
        case Sampler::Random: {
            if (m < 1 || m > part.k)
                throw DomainError("sample_representatives: m = " + std::to_string(m) +
                                  " outside [1, " + std::to_string(part.k) + "]");
            Rng rng(seed);
            reps.chi.resize(part.S * m);
            reps.member_pos.resize(part.S * m);
            std::vector<std::uint32_t> pos(part.k);
            for (std::size_t i = 0; i < part.S; ++i) {
                // Partial Fisher-Yates: m distinct member positions per region.
                std::iota(pos.begin(), pos.end(), 0u);
                for (std::size_t t = 0; t < m; ++t) {
                    const std::size_t pick = t + rng.uniform_index(part.k - t);
                    std::swap(pos[t], pos[pick]);
                    reps.member_pos[i * m + t] = pos[t];
                    reps.chi[i * m + t] = part.member(i, pos[t]);
                }
            }
            break;
        }
        case Sampler::MaxPool:
        case Sampler::MeanPool: {
            if (m != 1)
                throw DomainError("sample_representatives: pooled samplers require m = 1");
            // Virtual slot: the feature is pooled from the whole region block
            // and anchored at the centroid, so there is no source-point table.
            break;
        }
    }
    return reps;
}

std::vector<TP> slot_attention(Tape& tape, const std::vector<TP>& slots, IrlParams& params) {
    if (slots.empty()) throw DimensionError("slot_attention: no slots");
    std::vector<TP> out;
    out.reserve(slots.size());
    for (const TP& X : slots) {
        if (X->cols() != params.c)
            throw DimensionError("slot_attention: slot width " + std::to_string(X->cols()) +
                                 " does not match parameters built for " +
                                 std::to_string(params.c));
        TP q = matmul(tape, X, params.Wq);
        TP key = matmul(tape, X, params.Wk);
        TP val = matmul(tape, X, params.Wv);
        TP logits = matmul_nt(tape, q, key);  // raw dot products; no scaling factor
        TP w = softmax_rows(tape, logits);
        TP mixed = matmul(tape, w, val);
        out.push_back(matmul(tape, mixed, params.Wz));
    }
    return out;
}

TP interpolate_residual(Tape& tape, const TP& T, const TP& g_hat,
                        const std::vector<double>& anchor_xyz,
                        const std::vector<double>& all_xyz) {
    const std::size_t N = T->rows(), C = T->cols();
    const std::size_t P = g_hat->rows();
    if (g_hat->cols() != C)
        throw DimensionError("interpolate_residual: feature widths differ, " + std::to_string(C) +
                             " vs " + std::to_string(g_hat->cols()));
    if (P < 3)
        throw DomainError("interpolate_residual: needs at least 3 representative anchors, got " +
                          std::to_string(P));
    if (anchor_xyz.size() != P * 3)
        throw DimensionError("interpolate_residual: expected one xyz triple per anchor row");
    if (all_xyz.size() != N * 3)
        throw DimensionError("interpolate_residual: expected one xyz triple per point");
    for (double v : anchor_xyz)
        if (!std::isfinite(v)) throw NumericError("interpolate_residual: non-finite anchor coordinate");
    for (double v : all_xyz)
        if (!std::isfinite(v)) throw NumericError("interpolate_residual: non-finite point coordinate");

    // 3 nearest anchors per point (ties keep the lowest anchor row), then
    // inverse-squared-distance weights over exactly those three.
    std::vector<std::uint32_t> nbr(N * 3);
    std::vector<double> lam(N * 3);
    for (std::size_t v = 0; v < N; ++v) {
        const double* pv = all_xyz.data() + v * 3;
        double bd[3] = {std::numeric_limits<double>::infinity(),
                        std::numeric_limits<double>::infinity(),
                        std::numeric_limits<double>::infinity()};
        std::uint32_t bi[3] = {0, 0, 0};
        for (std::size_t u = 0; u < P; ++u) {
            const double* pa = anchor_xyz.data() + u * 3;
            const double dx = pv[0] - pa[0], dy = pv[1] - pa[1], dz = pv[2] - pa[2];
            const double d2 = dx * dx + dy * dy + dz * dz;
            // Strict '<' keeps earlier anchors ahead of equally distant ones.
            if (d2 < bd[0]) {
                bd[2] = bd[1]; bi[2] = bi[1];
                bd[1] = bd[0]; bi[1] = bi[0];
                bd[0] = d2;    bi[0] = static_cast<std::uint32_t>(u);
            } else if (d2 < bd[1]) {
                bd[2] = bd[1]; bi[2] = bi[1];
                bd[1] = d2;    bi[1] = static_cast<std::uint32_t>(u);
            } else if (d2 < bd[2]) {
                bd[2] = d2;    bi[2] = static_cast<std::uint32_t>(u);
            }
        }
        double anchors9[9];
        for (int u = 0; u < 3; ++u)
            for (int c = 0; c < 3; ++c) anchors9[u * 3 + c] = anchor_xyz[bi[u] * 3 + c];
        const std::array<double, 3> w = idw_weights(pv, anchors9);
        for (int u = 0; u < 3; ++u) {
            nbr[v * 3 + u] = bi[u];
            lam[v * 3 + u] = w[u];
        }
    }

    const bool tr = T->track || g_hat->track;
    TP out = make_tensor(T->shape, tr);
    for (std::size_t v = 0; v < N; ++v) {
        const double* tv = T->v.data() + v * C;
        double* ov = out->v.data() + v * C;
        const double l0 = lam[v * 3], l1 = lam[v * 3 + 1], l2 = lam[v * 3 + 2];
        const double* g0 = g_hat->v.data() + std::size_t{nbr[v * 3]} * C;
        const double* g1 = g_hat->v.data() + std::size_t{nbr[v * 3 + 1]} * C;
        const double* g2 = g_hat->v.data() + std::size_t{nbr[v * 3 + 2]} * C;
        for (std::size_t c = 0; c < C; ++c)
            ov[c] = tv[c] + l0 * g0[c] + l1 * g1[c] + l2 * g2[c];
    }
    if (tr)
        tape.record(out, [T, g_hat, out, nbr = std::move(nbr), lam = std::move(lam), N, C] {
            if (T->track) {
                T->ensure_grad();
                for (std::size_t i = 0, n = N * C; i < n; ++i) T->g[i] += out->g[i];
            }
            if (g_hat->track) {
                g_hat->ensure_grad();
                for (std::size_t v = 0; v < N; ++v) {
                    const double* go = out->g.data() + v * C;
                    for (int u = 0; u < 3; ++u) {
                        const double l = lam[v * 3 + u];
                        double* gg = g_hat->g.data() + std::size_t{nbr[v * 3 + u]} * C;
                        for (std::size_t c = 0; c < C; ++c) gg[c] += l * go[c];
                    }
                }
            }
        });
    return out;
}

TP irl_forward(Tape& tape, const TP& T, const std::vector<double>& coords, const IrlConfig& cfg,
               IrlParams& params) {
    cfg.validate();
    const std::size_t N = T->rows();
    if (T->cols() != params.c)
        throw DimensionError("irl_forward: feature width " + std::to_string(T->cols()) +
                             " does not match parameters built for " + std::to_string(params.c));
    if (coords.size() != N * 3)
        throw DimensionError("irl_forward: expected one xyz triple per feature row");
    const bool pooled = cfg.sampler == Sampler::MaxPool || cfg.sampler == Sampler::MeanPool;
    const std::size_t m_eff = pooled ? 1 : cfg.m;
    if (cfg.S * m_eff < 3)
        throw DomainError("irl_forward: interpolation needs at least 3 representatives, got " +
                          std::to_string(cfg.S * m_eff));

    TP scores = score_points(tape, T, params);
    const std::vector<double> score_vals(scores->v.begin(), scores->v.end());
    const RegionPartition part = make_partition(cfg, score_vals, coords, N);
    TP region_feats = scale_region_features(tape, T, scores, part);
    const RepresentativeSet reps =
        sample_representatives(part, coords, cfg.sampler, cfg.m, cfg.sampler_seed);

    std::vector<TP> slots;
    if (pooled) {
        slots.push_back(reduce_rowblocks(
            tape, region_feats, cfg.sampler == Sampler::MaxPool ? Reduce::Max : Reduce::Mean,
            cfg.k));
    } else {
        for (std::size_t t = 0; t < cfg.m; ++t) {
            std::vector<std::uint32_t> rows(cfg.S);
            for (std::size_t i = 0; i < cfg.S; ++i)
                rows[i] =
                    static_cast<std::uint32_t>(i * cfg.k + reps.member_pos[i * cfg.m + t]);
            slots.push_back(gather_rows(tape, region_feats, std::move(rows)));
        }
    }
    std::vector<TP> attended = slot_attention(tape, slots, params);
    TP g_hat = attended.size() == 1 ? attended[0] : concat_rows(tape, attended);

    // Anchor row t*S + i holds slot t of region i, matching g_hat's layout.
    std::vector<double> anchor_xyz(m_eff * cfg.S * 3);
    for (std::size_t t = 0; t < m_eff; ++t)
        for (std::size_t i = 0; i < cfg.S; ++i) {
            const std::size_t src = pooled ? part.centroids[i] : reps.rep(i, t);
            for (int c = 0; c < 3; ++c)
                anchor_xyz[(t * cfg.S + i) * 3 + c] = coords[src * 3 + c];
        }
    return interpolate_residual(tape, T, g_hat, anchor_xyz, coords);
}

std::uint64_t count_edges(EdgeMode mode, std::uint64_t S, std::uint64_t k, std::uint64_t m) {
    if (S == 0 || k == 0 || m == 0)
        throw DomainError("count_edges: S, k and m must all be positive");
    return mode == EdgeMode::Naive ? S * (S - 1) * k * k : S * (S - 1) * m;
}

}  // namespace pointrel
