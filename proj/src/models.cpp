#include "pointrel/models.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

namespace pointrel {

namespace {

IslConfig isl_cfg(std::size_t k_hat, std::vector<std::size_t> widths) {
    IslConfig c;
    c.k_hat = k_hat;
    c.mlp_widths = std::move(widths);
    return c;
}

IrlConfig irl_cfg(std::size_t S, std::size_t k, std::size_t m) {
    IrlConfig c;
    c.S = S;
    c.k = k;
    c.m = m;
    return c;
}

}  // namespace

StageSpec isl_stage(IslConfig cfg) {
    StageSpec s;
    s.kind = StageKind::Isl;
    s.isl = std::move(cfg);
    return s;
}

StageSpec irl_stage(IrlConfig cfg) {
    StageSpec s;
    s.kind = StageKind::Irl;
    s.irl = cfg;
    return s;
}

void NetworkSpec::validate() const {
    if (stages.empty()) throw ConfigError("network: stage list is empty");
    if (stages.front().kind != StageKind::Isl)
        throw ConfigError("network: the first stage must be an ISL stage");
    for (const StageSpec& st : stages)
        st.kind == StageKind::Isl ? st.isl.validate() : st.irl.validate();
    switch (head.kind) {
        case HeadKind::Classifier:
            if (head.num_classes == 0)
                throw ConfigError("network: classifier head needs num_classes >= 1");
            break;
        case HeadKind::Pointwise:
            if (head.num_outputs == 0)
                throw ConfigError("network: pointwise head needs num_outputs >= 1");
            break;
        case HeadKind::PartSeg:
            if (head.num_parts == 0) throw ConfigError("network: partseg head needs num_parts >= 1");
            if (head.num_categories == 0)
                throw ConfigError("network: partseg head needs num_categories >= 1");
            if (stages.size() < 2 || stages.back().kind != StageKind::Irl)
                throw ConfigError("network: partseg head requires the final stage to be an IRL stage");
            break;
    }
}

NetworkDims network_dims(const NetworkSpec& spec) {
    spec.validate();
    NetworkDims d;
    const bool seg = spec.head.kind == HeadKind::PartSeg;
    const std::size_t trunk = seg ? spec.stages.size() - 1 : spec.stages.size();
    std::size_t w = 3;
    for (std::size_t i = 0; i < trunk; ++i) {
        const StageSpec& st = spec.stages[i];
        d.stage_in.push_back(w);
        if (st.kind == StageKind::Isl) w = st.isl.mlp_widths.back();
        d.stage_out.push_back(w);
    }
    if (seg) {
        // The final stage consumes every earlier output plus the broadcast
        // global feature and the category embedding.
        std::size_t fused = kGlobalFcWidth + kCategoryEmbedWidth;
        for (std::size_t x : d.stage_out) fused += x;
        d.fused = fused;
        d.stage_in.push_back(fused);
        d.stage_out.push_back(fused);
    } else {
        std::size_t sc = d.stage_out[0];
        for (std::size_t i = 1; i < spec.stages.size(); ++i)
            if (spec.stages[i].kind == StageKind::Irl) sc += d.stage_out[i];
        d.shortcut = sc;
        d.pointwise_in = sc + kHeadFc2Width;
    }
    return d;
}

NetworkSpec build_classifier(std::size_t num_classes) {
    NetworkSpec s;
    s.stages = {isl_stage(isl_cfg(20, {64})),  isl_stage(isl_cfg(20, {64})),
                irl_stage(irl_cfg(256, 4, 4)), isl_stage(isl_cfg(20, {128})),
                irl_stage(irl_cfg(128, 8, 4)), isl_stage(isl_cfg(20, {256})),
                irl_stage(irl_cfg(64, 16, 4))};
    s.head.kind = HeadKind::Classifier;
    s.head.num_classes = num_classes;
    return s;
}

NetworkSpec build_keypoint_net(std::size_t num_outputs) {
    NetworkSpec s = build_classifier(1);
    s.head = HeadSpec{};
    s.head.kind = HeadKind::Pointwise;
    s.head.num_outputs = num_outputs;
    return s;
}

NetworkSpec build_partseg_net(std::size_t num_parts, std::size_t num_categories) {
    NetworkSpec s;
    s.stages = {isl_stage(isl_cfg(32, {64, 64, 64})), isl_stage(isl_cfg(32, {128, 128, 128})),
                irl_stage(irl_cfg(128, 16, 8)),       isl_stage(isl_cfg(32, {256, 256, 256})),
                irl_stage(irl_cfg(256, 16, 8)),       irl_stage(irl_cfg(128, 32, 16))};
    s.head.kind = HeadKind::PartSeg;
    s.head.num_parts = num_parts;
    s.head.num_categories = num_categories;
    return s;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

NetworkParams make_network_params(ParameterStore& store, const NetworkSpec& spec, Rng& rng) {
    const NetworkDims dims = network_dims(spec);
    NetworkParams np;
    for (std::size_t i = 0; i < spec.stages.size(); ++i) {
        const StageSpec& st = spec.stages[i];
        const std::string prefix = "stage" + std::to_string(i);
        StageParams sp;
        if (st.kind == StageKind::Isl)
            sp.isl = make_isl_params(store, prefix, dims.stage_in[i], st.isl, rng);
        else
            sp.irl = make_irl_params(store, prefix, dims.stage_in[i], rng);
        np.stages.push_back(std::move(sp));
    }

    HeadParams hp;
    const double gain2 = 2.0 / (1.0 + kHeadSlope * kHeadSlope);
    const HeadSpec& h = spec.head;
    if (h.kind == HeadKind::PartSeg) {
        const std::size_t last_trunk = dims.stage_out[spec.stages.size() - 2];
        hp.global = make_linear_bn(store, "head/global", last_trunk, kGlobalFcWidth, gain2, rng);
        hp.embed_W = store.create("head/embed.W", {h.num_categories, kCategoryEmbedWidth});
        init_normal_fanin(*hp.embed_W, 1.0, rng);
        hp.fc1 = make_linear_bn(store, "head/fc1", dims.stage_out.back(), kSegFcWidth, gain2, rng);
        hp.fc2 = make_linear_bn(store, "head/fc2", kSegFcWidth, kSegFcWidth, gain2, rng);
        hp.out_W = store.create("head/out.W", {kSegFcWidth, h.num_parts});
        init_normal_fanin(*hp.out_W, 1.0, rng);
        hp.out_b = store.create("head/out.b", {1, h.num_parts});
    } else {
        hp.global = make_linear_bn(store, "head/global", dims.shortcut, kGlobalFcWidth, gain2, rng);
        hp.fc1 = make_linear_bn(store, "head/fc1", 2 * kGlobalFcWidth, kHeadFc1Width, gain2, rng);
        hp.fc2 = make_linear_bn(store, "head/fc2", kHeadFc1Width, kHeadFc2Width, gain2, rng);
        const std::size_t width_out =
            h.kind == HeadKind::Classifier ? h.num_classes : h.num_outputs;
        if (h.kind == HeadKind::Pointwise) {
            hp.pt1 = make_linear_bn(store, "head/pt1", dims.pointwise_in, kHeadFc1Width, gain2, rng);
            hp.pt2 = make_linear_bn(store, "head/pt2", kHeadFc1Width, kHeadFc2Width, gain2, rng);
        }
        hp.out_W = store.create("head/out.W", {kHeadFc2Width, width_out});
        init_normal_fanin(*hp.out_W, 1.0, rng);
        hp.out_b = store.create("head/out.b", {1, width_out});
    }
    np.head = std::move(hp);
    return np;
}

void for_each_batchnorm(NetworkParams& params, const std::function<void(BatchNorm&)>& fn) {
    auto visit = [&fn](LinearBn& l) {
        if (l.W) fn(l.bn);
    };
    for (StageParams& sp : params.stages) {
        for (LinearBn& l : sp.isl.mlp1) visit(l);
        for (LinearBn& l : sp.isl.mlp2) visit(l);
        visit(sp.isl.phi1);
    }
    visit(params.head.global);
    visit(params.head.fc1);
    visit(params.head.fc2);
    visit(params.head.pt1);
    visit(params.head.pt2);
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

namespace {

struct CloudWork {
    std::vector<std::uint32_t> order;  // canonical row -> original point index
    std::vector<std::uint32_t> inv;    // original point index -> canonical row
    std::vector<double> xyz;           // canonical coordinates, n*3
    std::vector<TP> outs;              // per-stage outputs, canonical rows
    TP shortcut;                       // first ISL output + all IRL outputs
    TP pooled;                         // 1 x 2*kGlobalFcWidth
};

std::vector<std::uint32_t> canonical_order_of(const PointCloud& cloud) {
    std::vector<std::uint32_t> order(cloud.n);
    std::iota(order.begin(), order.end(), 0u);
    const double* p = cloud.xyz.data();
    std::sort(order.begin(), order.end(), [p](std::uint32_t a, std::uint32_t b) {
        const double* pa = p + 3 * static_cast<std::size_t>(a);
        const double* pb = p + 3 * static_cast<std::size_t>(b);
        if (pa[0] != pb[0]) return pa[0] < pb[0];
        if (pa[1] != pb[1]) return pa[1] < pb[1];
        if (pa[2] != pb[2]) return pa[2] < pb[2];
        return a < b;
    });
    return order;
}

void check_cloud(const PointCloud& cloud, std::size_t b) {
    if (cloud.n == 0) throw DomainError("input cloud " + std::to_string(b) + " is empty");
    if (cloud.xyz.size() != cloud.n * 3)
        throw DimensionError("input cloud " + std::to_string(b) + ": coordinate buffer holds " +
                             std::to_string(cloud.xyz.size()) + " values, expected " +
                             std::to_string(cloud.n * 3));
    for (double v : cloud.xyz)
        if (!std::isfinite(v))
            throw NumericError("input cloud " + std::to_string(b) +
                               " contains non-finite coordinates");
}

std::string stage_tag(std::size_t i, StageKind kind) {
    return "stage " + std::to_string(i) + (kind == StageKind::Isl ? " (isl): " : " (irl): ");
}

TP run_one_stage(Tape& tape, const NetworkSpec& spec, NetworkParams& params, std::size_t i,
                 const TP& cur, const std::vector<double>& xyz, std::size_t n, bool training) {
    const StageSpec& st = spec.stages[i];
    try {
        if (st.kind == StageKind::Isl) {
            IslParams& p = params.stages[i].isl;
            if (cur->cols() != p.c_in)
                throw DimensionError("input width " + std::to_string(cur->cols()) +
                                     " does not match parameters built for width " +
                                     std::to_string(p.c_in));
            // First stage always works on coordinates. Later stages rebuild
            // the neighbor graph in feature space unless the static toggle
            // pins every graph to xyz.
            const bool on_xyz = (i == 0) || spec.static_graph;
            const NeighborIndex nbr = on_xyz
                                          ? knn_general(xyz.data(), n, 3, st.isl.k_hat)
                                          : knn_general(cur->v.data(), n, cur->cols(), st.isl.k_hat);
            return isl_forward(tape, cur, nbr, p, training);
        }
        IrlParams& p = params.stages[i].irl;
        if (cur->cols() != p.c)
            throw DimensionError("input width " + std::to_string(cur->cols()) +
                                 " does not match parameters built for width " +
                                 std::to_string(p.c));
        return irl_forward(tape, cur, xyz, st.irl, p);
    } catch (const DimensionError& e) {
        throw DimensionError(stage_tag(i, st.kind) + e.what());
    } catch (const DomainError& e) {
        throw DomainError(stage_tag(i, st.kind) + e.what());
    }
}

// Shortcut concat, shared wide layer, max+mean pooling. Fills w.shortcut and
// w.pooled.
void pool_global(Tape& tape, const NetworkSpec& spec, HeadParams& hp, CloudWork& w,
                 bool training) {
    std::vector<TP> parts{w.outs[0]};
    for (std::size_t i = 1; i < w.outs.size(); ++i)
        if (spec.stages[i].kind == StageKind::Irl) parts.push_back(w.outs[i]);
    w.shortcut = parts.size() == 1 ? parts[0] : concat_cols(tape, parts);
    TP shared = linear_bn_act(tape, w.shortcut, hp.global, kHeadSlope, training);
    TP gmax = reduce(tape, shared, Reduce::Max, 0);
    TP gmean = reduce(tape, shared, Reduce::Mean, 0);
    w.pooled = concat_cols(tape, {gmax, gmean});
}

// fc1 -> dropout -> fc2 -> dropout; rows stay independent in eval mode.
TP hidden_chain(Tape& tape, HeadParams& hp, const TP& x, bool training, Rng& rng) {
    TP h = linear_bn_act(tape, x, hp.fc1, kHeadSlope, training);
    h = dropout(tape, h, kHeadDropout, rng, training);
    h = linear_bn_act(tape, h, hp.fc2, kHeadSlope, training);
    return dropout(tape, h, kHeadDropout, rng, training);
}

TP final_linear(Tape& tape, HeadParams& hp, const TP& h) {
    return add(tape, matmul(tape, h, hp.out_W), hp.out_b);
}

TP partseg_cloud(Tape& tape, const NetworkSpec& spec, NetworkParams& params, CloudWork& w,
                 const PointCloud& cloud, std::size_t b, bool training, Rng& rng) {
    HeadParams& hp = params.head;
    const std::size_t n = w.order.size();
    const std::size_t num_categories = hp.embed_W->rows();
    if (cloud.category < 0 || static_cast<std::size_t>(cloud.category) >= num_categories)
        throw DomainError("cloud " + std::to_string(b) + " has category " +
                          std::to_string(cloud.category) + ", expected [0, " +
                          std::to_string(num_categories) + ")");

    TP g = linear_bn_act(tape, w.outs.back(), hp.global, kHeadSlope, training);
    TP gmax = reduce(tape, g, Reduce::Max, 0);
    TP gb = gather_rows(tape, gmax, std::vector<std::uint32_t>(n, 0));

    std::vector<double> onehot(num_categories, 0.0);
    onehot[static_cast<std::size_t>(cloud.category)] = 1.0;
    TP oh = make_tensor({1, num_categories}, onehot);
    TP emb = matmul(tape, oh, hp.embed_W);
    TP eb = gather_rows(tape, emb, std::vector<std::uint32_t>(n, 0));

    std::vector<TP> parts = w.outs;
    parts.push_back(gb);
    parts.push_back(eb);
    TP fused = concat_cols(tape, parts);

    const std::size_t last = spec.stages.size() - 1;
    TP out_last = run_one_stage(tape, spec, params, last, fused, w.xyz, n, training);
    w.outs.push_back(out_last);

    TP f = linear_bn_act(tape, out_last, hp.fc1, kHeadSlope, training);
    f = dropout(tape, f, kHeadDropout, rng, training);
    f = linear_bn_act(tape, f, hp.fc2, kHeadSlope, training);
    f = dropout(tape, f, kHeadDropout, rng, training);
    TP o = final_linear(tape, hp, f);
    return gather_rows(tape, o, w.inv);  // back to the caller's point order
}

}  // namespace

ForwardResult forward(Tape& tape, const NetworkSpec& spec, NetworkParams& params,
                      const std::vector<PointCloud>& batch, bool training, Rng& rng) {
    spec.validate();
    if (batch.empty()) throw DomainError("forward: batch is empty");
    if (params.stages.size() != spec.stages.size())
        throw ContractError("forward: parameters hold " + std::to_string(params.stages.size()) +
                            " stages but the spec lists " + std::to_string(spec.stages.size()));

    const HeadKind hk = spec.head.kind;
    const std::size_t B = batch.size();
    const std::size_t trunk = hk == HeadKind::PartSeg ? spec.stages.size() - 1 : spec.stages.size();

    std::vector<CloudWork> work(B);
    for (std::size_t b = 0; b < B; ++b) {
        check_cloud(batch[b], b);
        CloudWork& w = work[b];
        const std::size_t n = batch[b].n;
        w.order = canonical_order_of(batch[b]);
        w.inv.resize(n);
        for (std::size_t r = 0; r < n; ++r) w.inv[w.order[r]] = static_cast<std::uint32_t>(r);
        w.xyz.resize(n * 3);
        for (std::size_t r = 0; r < n; ++r) {
            const double* src = batch[b].point(w.order[r]);
            w.xyz[r * 3] = src[0];
            w.xyz[r * 3 + 1] = src[1];
            w.xyz[r * 3 + 2] = src[2];
        }
        TP cur = make_tensor({n, 3}, w.xyz);
        for (std::size_t i = 0; i < trunk; ++i) {
            cur = run_one_stage(tape, spec, params, i, cur, w.xyz, n, training);
            w.outs.push_back(cur);
        }
    }

    ForwardResult res;
    try {
        if (hk == HeadKind::PartSeg) {
            std::vector<TP> lg;
            for (std::size_t b = 0; b < B; ++b)
                lg.push_back(partseg_cloud(tape, spec, params, work[b], batch[b], b, training, rng));
            res.logits = lg.size() == 1 ? lg[0] : concat_rows(tape, lg);
        } else {
            for (CloudWork& w : work) pool_global(tape, spec, params.head, w, training);
            if (hk == HeadKind::Classifier) {
                if (training) {
                    // Batch statistics couple the clouds, so the hidden FCs
                    // run on the stacked pooled rows.
                    std::vector<TP> rows;
                    for (CloudWork& w : work) rows.push_back(w.pooled);
                    TP P = rows.size() == 1 ? rows[0] : concat_rows(tape, rows);
                    res.logits = final_linear(tape, params.head,
                                              hidden_chain(tape, params.head, P, true, rng));
                } else {
                    // Per-cloud evaluation: a batch is exactly the
                    // concatenation of independent single-cloud runs.
                    std::vector<TP> lg;
                    for (CloudWork& w : work)
                        lg.push_back(final_linear(
                            tape, params.head,
                            hidden_chain(tape, params.head, w.pooled, false, rng)));
                    res.logits = lg.size() == 1 ? lg[0] : concat_rows(tape, lg);
                }
            } else {  // Pointwise
                std::vector<TP> h_src(B);
                std::vector<std::uint32_t> h_row(B, 0);
                if (training) {
                    std::vector<TP> rows;
                    for (CloudWork& w : work) rows.push_back(w.pooled);
                    TP P = rows.size() == 1 ? rows[0] : concat_rows(tape, rows);
                    TP h = hidden_chain(tape, params.head, P, true, rng);
                    for (std::size_t b = 0; b < B; ++b) {
                        h_src[b] = h;
                        h_row[b] = static_cast<std::uint32_t>(b);
                    }
                } else {
                    for (std::size_t b = 0; b < B; ++b)
                        h_src[b] = hidden_chain(tape, params.head, work[b].pooled, false, rng);
                }
                std::vector<TP> lg;
                for (std::size_t b = 0; b < B; ++b) {
                    CloudWork& w = work[b];
                    const std::size_t n = w.order.size();
                    TP bcast =
                        gather_rows(tape, h_src[b], std::vector<std::uint32_t>(n, h_row[b]));
                    TP pp = concat_cols(tape, {w.shortcut, bcast});
                    TP q = linear_bn_act(tape, pp, params.head.pt1, kHeadSlope, training);
                    q = dropout(tape, q, kHeadDropout, rng, training);
                    q = linear_bn_act(tape, q, params.head.pt2, kHeadSlope, training);
                    q = dropout(tape, q, kHeadDropout, rng, training);
                    TP o = final_linear(tape, params.head, q);
                    lg.push_back(gather_rows(tape, o, w.inv));
                }
                res.logits = lg.size() == 1 ? lg[0] : concat_rows(tape, lg);
            }
        }
    } catch (const DimensionError& e) {
        throw DimensionError(std::string("head: ") + e.what());
    } catch (const DomainError& e) {
        throw DomainError(std::string("head: ") + e.what());
    }

    res.traces.reserve(B);
    for (CloudWork& w : work)
        res.traces.push_back(ForwardTrace{std::move(w.order), std::move(w.outs)});
    return res;
}

// ---------------------------------------------------------------------------
// JSON serialization
// ---------------------------------------------------------------------------

namespace {

using nlohmann::json;

const char* partition_name(Partition p) {
    switch (p) {
        case Partition::DilatedTopS: return "dilated_top_s";
        case Partition::TopS: return "top_s";
        case Partition::Fps: return "fps";
    }
    throw ContractError("partition_name: unhandled enum value");
}

const char* sampler_name(Sampler s) {
    switch (s) {
        case Sampler::KnnBased: return "knn_based";
        case Sampler::Random: return "random";
        case Sampler::MaxPool: return "max_pool";
        case Sampler::MeanPool: return "mean_pool";
    }
    throw ContractError("sampler_name: unhandled enum value");
}

Partition partition_from(const std::string& s) {
    if (s == "dilated_top_s") return Partition::DilatedTopS;
    if (s == "top_s") return Partition::TopS;
    if (s == "fps") return Partition::Fps;
    throw ConfigError("network json: unknown partition '" + s + "'");
}

Sampler sampler_from(const std::string& s) {
    if (s == "knn_based") return Sampler::KnnBased;
    if (s == "random") return Sampler::Random;
    if (s == "max_pool") return Sampler::MaxPool;
    if (s == "mean_pool") return Sampler::MeanPool;
    throw ConfigError("network json: unknown sampler '" + s + "'");
}

const char* fusion_name(Fusion f) {
    switch (f) {
        case Fusion::Dfa: return "dfa";
        case Fusion::Linear: return "linear";
        case Fusion::NflOnly: return "nfl_only";
        case Fusion::SflOnly: return "sfl_only";
    }
    throw ContractError("fusion_name: unhandled enum value");
}

Fusion fusion_from(const std::string& s) {
    if (s == "dfa") return Fusion::Dfa;
    if (s == "linear") return Fusion::Linear;
    if (s == "nfl_only") return Fusion::NflOnly;
    if (s == "sfl_only") return Fusion::SflOnly;
    throw ConfigError("network json: unknown fusion '" + s + "'");
}

}  // namespace

std::string network_spec_to_json(const NetworkSpec& spec) {
    json j;
    j["stages"] = json::array();
    for (const StageSpec& st : spec.stages) {
        json sj;
        if (st.kind == StageKind::Isl) {
            json c;
            c["k_hat"] = st.isl.k_hat;
            c["widths"] = st.isl.mlp_widths;
            c["leaky_slope"] = st.isl.leaky_slope;
            c["fusion"] = fusion_name(st.isl.fusion);
            sj["isl"] = c;
        } else {
            json c;
            c["S"] = st.irl.S;
            c["k"] = st.irl.k;
            c["m"] = st.irl.m;
            c["partition"] = partition_name(st.irl.partition);
            c["sampler"] = sampler_name(st.irl.sampler);
            c["sampler_seed"] = st.irl.sampler_seed;
            sj["irl"] = c;
        }
        j["stages"].push_back(sj);
    }
    json h;
    switch (spec.head.kind) {
        case HeadKind::Classifier:
            h["kind"] = "classifier";
            h["num_classes"] = spec.head.num_classes;
            break;
        case HeadKind::Pointwise:
            h["kind"] = "pointwise";
            h["num_outputs"] = spec.head.num_outputs;
            break;
        case HeadKind::PartSeg:
            h["kind"] = "partseg";
            h["num_parts"] = spec.head.num_parts;
            h["num_categories"] = spec.head.num_categories;
            break;
    }
    j["head"] = h;
    j["static_graph"] = spec.static_graph;
    return j.dump(2);
}

NetworkSpec network_spec_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("network json: ") + e.what());
    }
    NetworkSpec spec;
    try {
        for (const json& sj : j.at("stages")) {
            const bool has_isl = sj.contains("isl");
            if (has_isl == sj.contains("irl"))
                throw ConfigError(
                    "network json: each stage needs exactly one of \"isl\" or \"irl\"");
            StageSpec st;
            if (has_isl) {
                const json& c = sj.at("isl");
                st.kind = StageKind::Isl;
                st.isl.k_hat = c.at("k_hat").get<std::size_t>();
                st.isl.mlp_widths = c.at("widths").get<std::vector<std::size_t>>();
                if (c.contains("leaky_slope")) st.isl.leaky_slope = c.at("leaky_slope").get<double>();
                if (c.contains("fusion")) st.isl.fusion = fusion_from(c.at("fusion").get<std::string>());
            } else {
                const json& c = sj.at("irl");
                st.kind = StageKind::Irl;
                st.irl.S = c.at("S").get<std::size_t>();
                st.irl.k = c.at("k").get<std::size_t>();
                st.irl.m = c.at("m").get<std::size_t>();
                if (c.contains("partition"))
                    st.irl.partition = partition_from(c.at("partition").get<std::string>());
                if (c.contains("sampler"))
                    st.irl.sampler = sampler_from(c.at("sampler").get<std::string>());
                if (c.contains("sampler_seed"))
                    st.irl.sampler_seed = c.at("sampler_seed").get<std::uint64_t>();
            }
            spec.stages.push_back(std::move(st));
        }
        const json& h = j.at("head");
        const std::string kind = h.at("kind").get<std::string>();
        if (kind == "classifier") {
            spec.head.kind = HeadKind::Classifier;
            spec.head.num_classes = h.at("num_classes").get<std::size_t>();
        } else if (kind == "pointwise") {
            spec.head.kind = HeadKind::Pointwise;
            spec.head.num_outputs = h.at("num_outputs").get<std::size_t>();
        } else if (kind == "partseg") {
            spec.head.kind = HeadKind::PartSeg;
            spec.head.num_parts = h.at("num_parts").get<std::size_t>();
            spec.head.num_categories = h.at("num_categories").get<std::size_t>();
        } else {
            throw ConfigError("network json: unknown head kind '" + kind + "'");
        }
        if (j.contains("static_graph")) spec.static_graph = j.at("static_graph").get<bool>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("network json: ") + e.what());
    }
    spec.validate();
    return spec;
}

}  // namespace pointrel
