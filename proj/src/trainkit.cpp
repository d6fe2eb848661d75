#include "pointrel/trainkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>

namespace pointrel {

// ---------------------------------------------------------------------------
// Synthetic shapes
// ---------------------------------------------------------------------------

ShapeClass shape_class_from(const std::string& name) {
    if (name == "sphere") return ShapeClass::Sphere;
    if (name == "cube") return ShapeClass::Cube;
    if (name == "cylinder") return ShapeClass::Cylinder;
    if (name == "torus") return ShapeClass::Torus;
    if (name == "cone") return ShapeClass::Cone;
    throw ConfigError("shape class: unknown name '" + name + "'");
}

const char* shape_class_name(ShapeClass c) {
    switch (c) {
        case ShapeClass::Sphere: return "sphere";
        case ShapeClass::Cube: return "cube";
        case ShapeClass::Cylinder: return "cylinder";
        case ShapeClass::Torus: return "torus";
        case ShapeClass::Cone: return "cone";
    }
    throw ContractError("shape_class_name: unhandled enum value");
}

void SyntheticSpec::validate() const {
    if (classes.empty()) throw ConfigError("SyntheticSpec: classes must be non-empty");
    for (std::size_t i = 0; i < classes.size(); ++i)
        for (std::size_t j = i + 1; j < classes.size(); ++j)
            if (classes[i] == classes[j])
                throw ConfigError(std::string("SyntheticSpec: duplicate class '") +
                                  shape_class_name(classes[i]) + "'");
    if (points_per_cloud < 1) throw ConfigError("SyntheticSpec: points_per_cloud must be >= 1");
    if (count_per_class < 1) throw ConfigError("SyntheticSpec: count_per_class must be >= 1");
    if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma))
        throw ConfigError("SyntheticSpec: noise_sigma must be finite and >= 0");
}

namespace {

constexpr double kPi = 3.141592653589793238462643383279502884;

// All surfaces are centered at the origin with their farthest point at
// radius exactly 1.
constexpr double kCubeHalf = 0.57735026918962576451;      // 1/sqrt(3): corner radius 1
constexpr double kCylHalf = 0.70710678118654752440;       // radius = half-height = 1/sqrt(2)
constexpr double kTorusRing = 0.75;                       // ring + tube = 1
constexpr double kTorusTube = 0.25;
constexpr double kConeBase = 0.70710678118654752440;      // base depth = radius = 1/sqrt(2)

struct SurfacePoint {
    double p[3];
    double normal[3];
    std::size_t part = 0;
};

SurfacePoint sample_sphere(Rng& rng) {
    SurfacePoint s;
    double n2 = 0.0;
    do {
        for (double& c : s.p) c = rng.normal();
        n2 = s.p[0] * s.p[0] + s.p[1] * s.p[1] + s.p[2] * s.p[2];
    } while (n2 < 1e-12);
    const double inv = 1.0 / std::sqrt(n2);
    for (int i = 0; i < 3; ++i) {
        s.p[i] *= inv;
        s.normal[i] = s.p[i];
    }
    return s;
}

SurfacePoint sample_cube(Rng& rng) {
    SurfacePoint s;
    const std::size_t face = rng.uniform_index(6);
    const std::size_t axis = face / 2;
    const double sign = face % 2 == 0 ? 1.0 : -1.0;
    const double u = rng.uniform(-kCubeHalf, kCubeHalf);
    const double v = rng.uniform(-kCubeHalf, kCubeHalf);
    s.p[axis] = sign * kCubeHalf;
    s.p[(axis + 1) % 3] = u;
    s.p[(axis + 2) % 3] = v;
    s.normal[0] = s.normal[1] = s.normal[2] = 0.0;
    s.normal[axis] = sign;
    return s;
}

SurfacePoint sample_cylinder(Rng& rng) {
    SurfacePoint s;
    const double r = kCylHalf, h = kCylHalf;
    // Side area 2*pi*r*2h, cap area 2*pi*r^2; with r == h the side holds
    // 2/3 of the total.
    const bool side = rng.uniform01() < (2.0 * h) / (2.0 * h + r);
    const double theta = rng.uniform(0.0, 2.0 * kPi);
    if (side) {
        const double z = rng.uniform(-h, h);
        s.p[0] = r * std::cos(theta);
        s.p[1] = r * std::sin(theta);
        s.p[2] = z;
        s.normal[0] = std::cos(theta);
        s.normal[1] = std::sin(theta);
        s.normal[2] = 0.0;
        s.part = 0;
    } else {
        const double sign = rng.uniform01() < 0.5 ? 1.0 : -1.0;
        const double rho = r * std::sqrt(rng.uniform01());
        s.p[0] = rho * std::cos(theta);
        s.p[1] = rho * std::sin(theta);
        s.p[2] = sign * h;
        s.normal[0] = s.normal[1] = 0.0;
        s.normal[2] = sign;
        s.part = 1;
    }
    return s;
}

SurfacePoint sample_torus(Rng& rng) {
    SurfacePoint s;
    const double R = kTorusRing, r = kTorusTube;
    const double theta = rng.uniform(0.0, 2.0 * kPi);
    // Uniform-by-area tube angle via rejection against the Jacobian
    // R + r*cos(phi).
    double phi = 0.0;
    for (;;) {
        phi = rng.uniform(0.0, 2.0 * kPi);
        if (rng.uniform01() * (R + r) <= R + r * std::cos(phi)) break;
    }
    const double ring = R + r * std::cos(phi);
    s.p[0] = ring * std::cos(theta);
    s.p[1] = ring * std::sin(theta);
    s.p[2] = r * std::sin(phi);
    s.normal[0] = std::cos(phi) * std::cos(theta);
    s.normal[1] = std::cos(phi) * std::sin(theta);
    s.normal[2] = std::sin(phi);
    s.part = std::cos(phi) >= 0.0 ? 0 : 1;  // outer half 0, inner half 1
    return s;
}

SurfacePoint sample_cone(Rng& rng) {
    SurfacePoint s;
    const double r = kConeBase, b = kConeBase;  // apex (0,0,1), base disk z=-b
    const double height = 1.0 + b;
    const double slant = std::sqrt(r * r + height * height);
    const double side_area = kPi * r * slant;
    const double base_area = kPi * r * r;
    const double theta = rng.uniform(0.0, 2.0 * kPi);
    if (rng.uniform01() * (side_area + base_area) < side_area) {
        const double t = std::sqrt(rng.uniform01());  // area grows with apex distance
        s.p[0] = t * r * std::cos(theta);
        s.p[1] = t * r * std::sin(theta);
        s.p[2] = 1.0 - t * height;
        const double inv = 1.0 / std::sqrt(height * height + r * r);
        s.normal[0] = inv * height * std::cos(theta);
        s.normal[1] = inv * height * std::sin(theta);
        s.normal[2] = inv * r;
    } else {
        const double rho = r * std::sqrt(rng.uniform01());
        s.p[0] = rho * std::cos(theta);
        s.p[1] = rho * std::sin(theta);
        s.p[2] = -b;
        s.normal[0] = s.normal[1] = 0.0;
        s.normal[2] = -1.0;
    }
    return s;
}

SurfacePoint sample_surface(ShapeClass cls, Rng& rng) {
    switch (cls) {
        case ShapeClass::Sphere: return sample_sphere(rng);
        case ShapeClass::Cube: return sample_cube(rng);
        case ShapeClass::Cylinder: return sample_cylinder(rng);
        case ShapeClass::Torus: return sample_torus(rng);
        case ShapeClass::Cone: return sample_cone(rng);
    }
    throw ContractError("sample_surface: unhandled enum value");
}

std::vector<double> shape_keypoints(ShapeClass cls) {
    const double a = kCubeHalf, h = kCylHalf, b = kConeBase;
    switch (cls) {
        case ShapeClass::Sphere:
            return {1, 0, 0, -1, 0, 0, 0, 1, 0, 0, -1, 0, 0, 0, 1, 0, 0, -1};
        case ShapeClass::Cube:
            return {a,  a,  a,  a,  a,  -a, a,  -a, a,  a,  -a, -a,
                    -a, a,  a,  -a, a,  -a, -a, -a, a,  -a, -a, -a};
        case ShapeClass::Cylinder:
            return {0, 0, h, 0, 0, -h};
        case ShapeClass::Torus:
            return {1, 0, 0, -1, 0, 0, 0, 1, 0, 0, -1, 0};
        case ShapeClass::Cone:
            return {0, 0, 1, 0, 0, -b};
    }
    throw ContractError("shape_keypoints: unhandled enum value");
}

}  // namespace

Dataset generate_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    Dataset ds;
    ds.num_classes = spec.classes.size();
    const Rng root(spec.seed);
    for (std::size_t ci = 0; ci < spec.classes.size(); ++ci) {
        const ShapeClass cls = spec.classes[ci];
        for (std::size_t i = 0; i < spec.count_per_class; ++i) {
            Rng rng = root.derive((ci + 1) * 0x100000ull + i);
            PointCloud cloud;
            cloud.n = spec.points_per_cloud;
            cloud.xyz.resize(cloud.n * 3);
            cloud.point_labels.resize(cloud.n);
            cloud.category = static_cast<int>(ci);
            for (std::size_t j = 0; j < cloud.n; ++j) {
                SurfacePoint s = sample_surface(cls, rng);
                const double raw = rng.normal(0.0, spec.noise_sigma);
                const double d = std::clamp(raw, -3.0 * spec.noise_sigma, 3.0 * spec.noise_sigma);
                for (int c = 0; c < 3; ++c) cloud.xyz[j * 3 + c] = s.p[c] + d * s.normal[c];
                cloud.point_labels[j] = static_cast<int>(s.part);
            }
            ds.clouds.push_back(std::move(cloud));
            ds.labels.push_back(ci);
            ds.keypoints.push_back(shape_keypoints(cls));
        }
    }
    return ds;
}

void Augmentation::validate() const {
    if (!(scale_min > 0.0) || !(scale_max >= scale_min))
        throw ConfigError("Augmentation: need 0 < scale_min <= scale_max");
    if (!(shift_range >= 0.0)) throw ConfigError("Augmentation: shift_range must be >= 0");
}

PointCloud augment(const PointCloud& cloud, const Augmentation& aug, Rng& rng) {
    aug.validate();
    double scale[3], shift[3];
    for (double& s : scale) s = rng.uniform(aug.scale_min, aug.scale_max);
    for (double& s : shift) s = rng.uniform(-aug.shift_range, aug.shift_range);
    PointCloud out = cloud;
    for (std::size_t j = 0; j < out.n; ++j)
        for (int c = 0; c < 3; ++c) out.xyz[j * 3 + c] = out.xyz[j * 3 + c] * scale[c] + shift[c];
    return out;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

TP smoothed_cross_entropy(Tape& tape, const TP& logits, const std::vector<std::size_t>& targets,
                          double eps) {
    const std::size_t B = logits->rows(), K = logits->cols();
    if (targets.size() != B)
        throw DimensionError("smoothed_cross_entropy: " + std::to_string(targets.size()) +
                             " targets for " + std::to_string(B) + " logit rows");
    if (K < 2) throw DomainError("smoothed_cross_entropy: need at least 2 classes");
    if (!(eps >= 0.0 && eps < 1.0))
        throw DomainError("smoothed_cross_entropy: epsilon must lie in [0, 1)");
    for (std::size_t t : targets)
        if (t >= K)
            throw DomainError("smoothed_cross_entropy: target " + std::to_string(t) +
                              " out of range for " + std::to_string(K) + " classes");

    const double off = eps / static_cast<double>(K - 1);
    const double on = 1.0 - eps;
    auto probs = std::make_shared<std::vector<double>>(B * K);  // softmax rows
    double total = 0.0;
    for (std::size_t r = 0; r < B; ++r) {
        const double* x = logits->v.data() + r * K;
        double m = x[0];
        for (std::size_t c = 1; c < K; ++c) m = std::max(m, x[c]);
        double z = 0.0;
        for (std::size_t c = 0; c < K; ++c) z += std::exp(x[c] - m);
        const double lse = m + std::log(z);
        double row = 0.0;
        for (std::size_t c = 0; c < K; ++c) {
            (*probs)[r * K + c] = std::exp(x[c] - lse);
            const double q = c == targets[r] ? on : off;
            row += q * (lse - x[c]);
        }
        total += row;
    }
    TP out = make_tensor({1, 1}, std::vector<double>{total / static_cast<double>(B)},
                         logits->track);
    if (logits->track) {
        tape.record(out, [logits, out, probs, targets, on, off, B, K] {
            logits->ensure_grad();
            const double go = out->g[0] / static_cast<double>(B);
            for (std::size_t r = 0; r < B; ++r)
                for (std::size_t c = 0; c < K; ++c) {
                    const double q = c == targets[r] ? on : off;
                    logits->g[r * K + c] += go * ((*probs)[r * K + c] - q);
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

void OptimizerConfig::validate() const {
    if (!(lr > 0.0)) throw ConfigError("OptimizerConfig: lr must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0))
        throw ConfigError("OptimizerConfig: momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("OptimizerConfig: weight_decay must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
        throw ConfigError("OptimizerConfig: betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("OptimizerConfig: eps must be > 0");
}

Optimizer::Optimizer(OptimizerConfig cfg, std::vector<TP> params)
    : cfg_(cfg), params_(std::move(params)) {
    cfg_.validate();
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const TP& p : params_) {
        if (!p) throw ContractError("Optimizer: null parameter tensor");
        m_.emplace_back(p->numel(), 0.0);
        v_.emplace_back(cfg_.kind == OptimizerKind::Adam ? p->numel() : 0, 0.0);
    }
}

void Optimizer::step(double lr) {
    if (!(lr >= 0.0) || !std::isfinite(lr))
        throw DomainError("Optimizer::step: lr must be finite and >= 0");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = *params_[i];
        p.ensure_grad();
        for (std::size_t j = 0; j < p.numel(); ++j) {
            const double g = p.g[j] + cfg_.weight_decay * p.v[j];
            if (cfg_.kind == OptimizerKind::Sgd) {
                m_[i][j] = cfg_.momentum * m_[i][j] + g;
                p.v[j] -= lr * m_[i][j];
            } else {
                m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * g;
                v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * g * g;
                const double mhat = m_[i][j] / bc1;
                const double vhat = v_[i][j] / bc2;
                p.v[j] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }
}

void Optimizer::zero_grad() {
    for (const TP& p : params_) {
        p->ensure_grad();
        p->zero_grad();
    }
}

void SchedulerConfig::validate() const {
    if (!(gamma > 0.0)) throw ConfigError("SchedulerConfig: gamma must be > 0");
    if (every < 1) throw ConfigError("SchedulerConfig: every must be >= 1");
}

double cosine_lr(std::size_t epoch, std::size_t total, double lr0) {
    if (total < 1) throw DomainError("cosine_lr: total must be >= 1");
    if (epoch > total) throw DomainError("cosine_lr: epoch exceeds total");
    return lr0 * 0.5 * (1.0 + std::cos(kPi * static_cast<double>(epoch) / static_cast<double>(total)));
}

double step_lr(std::size_t epoch, double gamma, std::size_t every, double lr0) {
    if (every < 1) throw DomainError("step_lr: every must be >= 1");
    return lr0 * std::pow(gamma, static_cast<double>(epoch / every));
}

void TrainConfig::validate() const {
    optimizer.validate();
    scheduler.validate();
    augmentation.validate();
    if (!(label_smoothing >= 0.0 && label_smoothing < 1.0))
        throw ConfigError("TrainConfig: label_smoothing must lie in [0, 1)");
    if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
    if (epochs < 1) throw ConfigError("TrainConfig: epochs must be >= 1");
}

double scheduled_lr(const TrainConfig& cfg, std::size_t epoch) {
    if (cfg.scheduler.kind == SchedulerKind::Cosine)
        return cosine_lr(epoch, cfg.epochs, cfg.optimizer.lr);
    return step_lr(epoch, cfg.scheduler.gamma, cfg.scheduler.every, cfg.optimizer.lr);
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

ClassificationMetrics classification_metrics(const std::vector<std::size_t>& pred,
                                             const std::vector<std::size_t>& truth,
                                             std::size_t num_classes) {
    if (pred.size() != truth.size())
        throw DimensionError("classification_metrics: " + std::to_string(pred.size()) +
                             " predictions vs " + std::to_string(truth.size()) + " truths");
    if (truth.empty()) throw DomainError("classification_metrics: empty input");
    if (num_classes < 1) throw DomainError("classification_metrics: num_classes must be >= 1");

    std::vector<std::size_t> seen(num_classes, 0), correct(num_classes, 0);
    std::size_t total_correct = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] >= num_classes)
            throw DomainError("classification_metrics: truth label " + std::to_string(truth[i]) +
                              " out of range");
        ++seen[truth[i]];
        if (pred[i] == truth[i]) {
            ++correct[truth[i]];
            ++total_correct;
        }
    }
    ClassificationMetrics m;
    m.oa = static_cast<double>(total_correct) / static_cast<double>(truth.size());
    m.per_class.resize(num_classes, -1.0);
    double sum = 0.0;
    std::size_t present = 0;
    for (std::size_t c = 0; c < num_classes; ++c) {
        if (seen[c] == 0) {
            m.warnings.push_back("class " + std::to_string(c) +
                                 " has no samples; excluded from mAcc");
            continue;
        }
        m.per_class[c] = static_cast<double>(correct[c]) / static_cast<double>(seen[c]);
        sum += m.per_class[c];
        ++present;
    }
    m.macc = present == 0 ? 0.0 : sum / static_cast<double>(present);
    return m;
}

double instance_miou(const std::vector<std::vector<std::size_t>>& pred,
                     const std::vector<std::vector<std::size_t>>& truth, std::size_t num_parts) {
    if (pred.size() != truth.size())
        throw DimensionError("instance_miou: shape count mismatch");
    if (pred.empty()) throw DomainError("instance_miou: empty input");
    double total = 0.0;
    for (std::size_t s = 0; s < pred.size(); ++s) {
        if (pred[s].size() != truth[s].size())
            throw DimensionError("instance_miou: point count mismatch in shape " +
                                 std::to_string(s));
        std::vector<std::size_t> inter(num_parts, 0), in_pred(num_parts, 0), in_true(num_parts, 0);
        for (std::size_t j = 0; j < pred[s].size(); ++j) {
            const std::size_t p = pred[s][j], t = truth[s][j];
            if (p >= num_parts || t >= num_parts)
                throw DomainError("instance_miou: part label out of range in shape " +
                                  std::to_string(s));
            ++in_pred[p];
            ++in_true[t];
            if (p == t) ++inter[p];
        }
        double sum = 0.0;
        std::size_t present = 0;
        for (std::size_t c = 0; c < num_parts; ++c) {
            const std::size_t uni = in_pred[c] + in_true[c] - inter[c];
            if (uni == 0) continue;  // part absent from truth and prediction
            sum += static_cast<double>(inter[c]) / static_cast<double>(uni);
            ++present;
        }
        total += present == 0 ? 1.0 : sum / static_cast<double>(present);
    }
    return total / static_cast<double>(pred.size());
}

namespace {

std::size_t triples(const std::vector<double>& xyz, const char* what) {
    if (xyz.size() % 3 != 0)
        throw DimensionError(std::string(what) + ": coordinate count must be a multiple of 3");
    return xyz.size() / 3;
}

double dist2(const double* a, const double* b) {
    double s = 0.0;
    for (int c = 0; c < 3; ++c) {
        const double d = a[c] - b[c];
        s += d * d;
    }
    return s;
}

}  // namespace

double keypoint_iou(const std::vector<double>& pred_xyz, const std::vector<double>& gt_xyz,
                    double tau) {
    const std::size_t np = triples(pred_xyz, "keypoint_iou predictions");
    const std::size_t ng = triples(gt_xyz, "keypoint_iou ground truth");
    if (np == 0 && ng == 0) return 1.0;
    const double t2 = tau * tau;
    std::size_t matched_gt = 0, correct_pred = 0;
    for (std::size_t g = 0; g < ng; ++g)
        for (std::size_t p = 0; p < np; ++p)
            if (dist2(&gt_xyz[g * 3], &pred_xyz[p * 3]) <= t2) {
                ++matched_gt;
                break;
            }
    for (std::size_t p = 0; p < np; ++p)
        for (std::size_t g = 0; g < ng; ++g)
            if (dist2(&pred_xyz[p * 3], &gt_xyz[g * 3]) <= t2) {
                ++correct_pred;
                break;
            }
    const std::size_t fp = np - correct_pred;
    const std::size_t fn = ng - matched_gt;
    return static_cast<double>(matched_gt) / static_cast<double>(matched_gt + fp + fn);
}

double keypoint_ap(const std::vector<double>& cand_xyz, const std::vector<double>& scores,
                   const std::vector<double>& gt_xyz, double tau) {
    const std::size_t nc = triples(cand_xyz, "keypoint_ap candidates");
    const std::size_t ng = triples(gt_xyz, "keypoint_ap ground truth");
    if (scores.size() != nc)
        throw DimensionError("keypoint_ap: " + std::to_string(scores.size()) + " scores for " +
                             std::to_string(nc) + " candidates");
    if (ng == 0) return 1.0;
    if (nc == 0) return 0.0;

    std::vector<std::size_t> order(nc);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&scores](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    const double t2 = tau * tau;
    std::vector<bool> used(ng, false);
    double ap = 0.0;
    std::size_t tp = 0;
    for (std::size_t rank = 0; rank < nc; ++rank) {
        const double* c = &cand_xyz[order[rank] * 3];
        std::size_t best = ng;
        double best_d2 = t2;
        for (std::size_t g = 0; g < ng; ++g) {
            if (used[g]) continue;
            const double d2 = dist2(c, &gt_xyz[g * 3]);
            if (d2 <= best_d2) {
                best_d2 = d2;
                best = g;
            }
        }
        if (best < ng) {
            used[best] = true;
            ++tp;
            ap += static_cast<double>(tp) / static_cast<double>(rank + 1);
        }
    }
    return ap / static_cast<double>(ng);
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

namespace {

// Per-point targets for the keypoint task: positive within
// kKeypointLabelRadius of any dataset keypoint.
std::vector<std::size_t> saliency_targets(const PointCloud& cloud,
                                          const std::vector<double>& keypoints) {
    const std::size_t nk = keypoints.size() / 3;
    std::vector<std::size_t> t(cloud.n, 0);
    const double r2 = kKeypointLabelRadius * kKeypointLabelRadius;
    for (std::size_t j = 0; j < cloud.n; ++j)
        for (std::size_t g = 0; g < nk; ++g)
            if (dist2(&cloud.xyz[j * 3], &keypoints[g * 3]) <= r2) {
                t[j] = 1;
                break;
            }
    return t;
}

void check_task(Task task, const NetworkSpec& spec, const Dataset& data) {
    switch (task) {
        case Task::Classify:
            if (spec.head.kind != HeadKind::Classifier)
                throw ConfigError("train: classify task needs a classifier head");
            if (spec.head.num_classes != data.num_classes)
                throw ConfigError("train: head expects " + std::to_string(spec.head.num_classes) +
                                  " classes, dataset has " + std::to_string(data.num_classes));
            break;
        case Task::Keypoint:
            if (spec.head.kind != HeadKind::Pointwise || spec.head.num_outputs != 2)
                throw ConfigError(
                    "train: keypoint task needs a pointwise head with 2 outputs "
                    "(salient vs background)");
            if (data.keypoints.size() != data.clouds.size())
                throw DimensionError("train: keypoint task needs one landmark list per cloud");
            break;
        case Task::PartSeg:
            if (spec.head.kind != HeadKind::PartSeg)
                throw ConfigError("train: partseg task needs a partseg head");
            if (spec.head.num_categories != data.num_classes)
                throw ConfigError("train: head expects " +
                                  std::to_string(spec.head.num_categories) +
                                  " categories, dataset has " + std::to_string(data.num_classes));
            break;
    }
}

// Flattened targets for one batch, aligned with the forward's logit rows.
std::vector<std::size_t> batch_targets(Task task, const Dataset& data,
                                       const std::vector<std::size_t>& idx) {
    std::vector<std::size_t> t;
    for (std::size_t i : idx) {
        const PointCloud& c = data.clouds[i];
        switch (task) {
            case Task::Classify:
                t.push_back(data.labels[i]);
                break;
            case Task::Keypoint: {
                std::vector<std::size_t> s = saliency_targets(c, data.keypoints[i]);
                t.insert(t.end(), s.begin(), s.end());
                break;
            }
            case Task::PartSeg:
                if (c.point_labels.size() != c.n)
                    throw DimensionError("train: cloud " + std::to_string(i) +
                                         " lacks per-point labels");
                for (int l : c.point_labels) t.push_back(static_cast<std::size_t>(l));
                break;
        }
    }
    return t;
}

std::vector<std::size_t> argmax_rows(const TP& logits) {
    const std::size_t R = logits->rows(), C = logits->cols();
    std::vector<std::size_t> out(R);
    for (std::size_t r = 0; r < R; ++r) {
        const double* x = logits->v.data() + r * C;
        std::size_t best = 0;
        for (std::size_t c = 1; c < C; ++c)
            if (x[c] > x[best]) best = c;
        out[r] = best;
    }
    return out;
}

}  // namespace

EvalReport evaluate(Task task, const NetworkSpec& spec, NetworkParams& params, const Dataset& data,
                    double label_smoothing, std::size_t batch_size) {
    check_task(task, spec, data);
    if (data.size() == 0) throw DomainError("evaluate: empty dataset");
    if (batch_size < 1) throw DomainError("evaluate: batch_size must be >= 1");

    std::vector<std::size_t> pred_all, true_all;
    std::vector<std::vector<std::size_t>> pred_parts, true_parts;
    double loss_sum = 0.0;
    std::size_t loss_rows = 0;
    double iou_sum = 0.0, ap_sum = 0.0;

    Rng dummy(0);
    for (std::size_t start = 0; start < data.size(); start += batch_size) {
        const std::size_t stop = std::min(data.size(), start + batch_size);
        std::vector<std::size_t> idx(stop - start);
        std::iota(idx.begin(), idx.end(), start);
        std::vector<PointCloud> clouds;
        for (std::size_t i : idx) clouds.push_back(data.clouds[i]);

        Tape tape;
        ForwardResult res = forward(tape, spec, params, clouds, false, dummy);
        const std::vector<std::size_t> targets = batch_targets(task, data, idx);
        TP loss = smoothed_cross_entropy(tape, res.logits, targets, label_smoothing);
        loss_sum += loss->v[0] * static_cast<double>(targets.size());
        loss_rows += targets.size();

        const std::vector<std::size_t> pred = argmax_rows(res.logits);
        pred_all.insert(pred_all.end(), pred.begin(), pred.end());
        true_all.insert(true_all.end(), targets.begin(), targets.end());

        std::size_t row = 0;
        for (std::size_t b = 0; b < idx.size(); ++b) {
            const PointCloud& c = data.clouds[idx[b]];
            if (task == Task::PartSeg) {
                pred_parts.emplace_back(pred.begin() + row, pred.begin() + row + c.n);
                true_parts.emplace_back(targets.begin() + row, targets.begin() + row + c.n);
            } else if (task == Task::Keypoint) {
                // Predicted landmarks: points called salient; scores: the
                // softmax probability of the salient class.
                std::vector<double> sel_xyz, cand_scores;
                for (std::size_t j = 0; j < c.n; ++j) {
                    const double* l = res.logits->v.data() + (row + j) * 2;
                    const double p1 = 1.0 / (1.0 + std::exp(l[0] - l[1]));
                    cand_scores.push_back(p1);
                    if (pred[row + j] == 1)
                        for (int k = 0; k < 3; ++k) sel_xyz.push_back(c.xyz[j * 3 + k]);
                }
                iou_sum += keypoint_iou(sel_xyz, data.keypoints[idx[b]]);
                std::vector<double> cand_xyz(c.xyz.begin(), c.xyz.end());
                ap_sum += keypoint_ap(cand_xyz, cand_scores, data.keypoints[idx[b]]);
            }
            row += task == Task::Classify ? 1 : c.n;
        }
    }

    EvalReport rep;
    rep.loss = loss_sum / static_cast<double>(loss_rows);
    const std::size_t k = task == Task::Classify  ? data.num_classes
                          : task == Task::Keypoint ? 2
                                                    : spec.head.num_parts;
    const ClassificationMetrics cm = classification_metrics(pred_all, true_all, k);
    rep.oa = cm.oa;
    rep.macc = cm.macc;
    if (task == Task::PartSeg) {
        rep.miou = instance_miou(pred_parts, true_parts, spec.head.num_parts);
        rep.has_miou = true;
    } else if (task == Task::Keypoint) {
        rep.miou = iou_sum / static_cast<double>(data.size());
        rep.has_miou = true;
        rep.map = ap_sum / static_cast<double>(data.size());
        rep.has_map = true;
    }
    return rep;
}

TrainResult train_network(Task task, const NetworkSpec& spec, ParameterStore& store,
                          NetworkParams& params, const Dataset& train_data,
                          const Dataset& val_data, const TrainConfig& cfg, std::ostream* csv,
                          const TrainHooks& hooks) {
    spec.validate();
    cfg.validate();
    check_task(task, spec, train_data);
    check_task(task, spec, val_data);
    if (train_data.size() == 0) throw DomainError("train: empty training set");

    // The classifier and keypoint heads batch-normalize across pooled cloud
    // rows and therefore need two clouds per training step; the partseg head
    // normalizes across each cloud's points.
    const std::size_t min_batch = task == Task::PartSeg ? 1 : 2;
    if (std::min(cfg.batch_size, train_data.size()) < min_batch)
        throw ConfigError("train: this task needs batches of at least 2 clouds");

    Optimizer opt(cfg.optimizer, store.trainable());
    const Rng root(cfg.seed);

    if (csv) {
        *csv << "epoch,lr,train_loss,train_oa,val_oa,val_macc";
        if (task != Task::Classify) *csv << ",val_miou";
        *csv << "\n";
    }

    TrainResult result;
    std::vector<std::size_t> order(train_data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    for (std::size_t epoch = 0; epoch < cfg.epochs && !result.stopped_early; ++epoch) {
        const double lr = scheduled_lr(cfg, epoch);
        if (task == Task::PartSeg) {
            const double bn_momentum = 0.9 * std::pow(0.5, static_cast<double>(epoch / 30));
            for_each_batchnorm(params, [bn_momentum](BatchNorm& bn) { bn.momentum = bn_momentum; });
        }

        Rng shuffle = root.derive(0x5E00000000ull + epoch);
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle.uniform_index(i)]);

        double loss_sum = 0.0;
        std::size_t loss_rows = 0, correct = 0, seen = 0;
        for (std::size_t start = 0, batch = 0; start < order.size(); start += cfg.batch_size, ++batch) {
            const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
            if (stop - start < min_batch) break;  // trailing remainder too small to normalize
            const std::vector<std::size_t> idx(order.begin() + start, order.begin() + stop);

            Rng aug_rng = root.derive(0xA000000000ull + epoch * 0x10000ull + batch);
            std::vector<PointCloud> clouds;
            for (std::size_t i : idx)
                clouds.push_back(augment(train_data.clouds[i], cfg.augmentation, aug_rng));

            Rng fw_rng = root.derive(0xD000000000ull + epoch * 0x10000ull + batch);
            Tape tape;
            ForwardResult res = forward(tape, spec, params, clouds, true, fw_rng);
            const std::vector<std::size_t> targets = batch_targets(task, train_data, idx);
            TP loss = smoothed_cross_entropy(tape, res.logits, targets, cfg.label_smoothing);
            if (!std::isfinite(loss->v[0]))
                throw NumericError("train: loss diverged at epoch " + std::to_string(epoch));
            backward(tape, loss);
            opt.step(lr);
            opt.zero_grad();

            loss_sum += loss->v[0] * static_cast<double>(targets.size());
            loss_rows += targets.size();
            const std::vector<std::size_t> pred = argmax_rows(res.logits);
            for (std::size_t r = 0; r < pred.size(); ++r)
                if (pred[r] == targets[r]) ++correct;
            seen += pred.size();

            if (hooks.should_stop && hooks.should_stop()) {
                result.stopped_early = true;
                break;
            }
        }
        if (result.stopped_early) break;

        const EvalReport val =
            evaluate(task, spec, params, val_data, cfg.label_smoothing, cfg.batch_size);

        EpochRow row;
        row.epoch = epoch;
        row.lr = lr;
        row.train_loss = loss_sum / static_cast<double>(loss_rows);
        row.train_oa = static_cast<double>(correct) / static_cast<double>(seen);
        row.val_oa = val.oa;
        row.val_macc = val.macc;
        row.val_miou = val.miou;
        row.has_miou = val.has_miou;
        result.rows.push_back(row);

        if (csv) {
            char buf[224];
            std::snprintf(buf, sizeof buf, "%zu,%.10g,%.10g,%.10g,%.10g,%.10g", row.epoch, row.lr,
                          row.train_loss, row.train_oa, row.val_oa, row.val_macc);
            *csv << buf;
            if (row.has_miou) {
                std::snprintf(buf, sizeof buf, ",%.10g", row.val_miou);
                *csv << buf;
            }
            *csv << "\n";
        }
        if (hooks.on_epoch) hooks.on_epoch(row);
    }
    return result;
}

}  // namespace pointrel
