#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "pointrel/models.hpp"

namespace pointrel {

// ---------------------------------------------------------------------------
// Desk-scale training kit: synthetic analytic shapes, augmentation, the
// smoothed cross-entropy loss, SGD/Adam, learning-rate schedules, metrics,
// and a deterministic training loop over the network assemblies.
// ---------------------------------------------------------------------------

// -------------------------------- data ------------------------------------

enum class ShapeClass { Sphere, Cube, Cylinder, Torus, Cone };

// Parses "sphere" | "cube" | "cylinder" | "torus" | "cone"; ConfigError
// otherwise.
ShapeClass shape_class_from(const std::string& name);
const char* shape_class_name(ShapeClass c);

struct SyntheticSpec {
    std::vector<ShapeClass> classes{ShapeClass::Sphere, ShapeClass::Cube, ShapeClass::Cylinder,
                                    ShapeClass::Torus};
    std::size_t points_per_cloud = 256;
    double noise_sigma = 0.02;    // surface-normal jitter, clamped to +-3 sigma
    std::size_t count_per_class = 8;
    std::uint64_t seed = 0;
    void validate() const;  // non-empty unique classes, N/count >= 1, sigma >= 0
};

// Clouds are generated class-major in the order of spec.classes; labels[i]
// and clouds[i].category both hold the index into spec.classes. Each cloud's
// analytic surface is centered at the origin with its farthest point at
// radius exactly 1 (unit-sphere normalized) before jitter, and keypoints[i]
// lists that surface's landmark coordinates (corners, apexes, cap centers)
// as flattened xyz triples.
struct Dataset {
    std::vector<PointCloud> clouds;
    std::vector<std::size_t> labels;
    std::vector<std::vector<double>> keypoints;
    std::size_t num_classes = 0;

    std::size_t size() const { return clouds.size(); }
};

// Deterministic in spec.seed (bit-identical datasets for equal specs).
// Points sample each surface uniformly by area, then move along the local
// surface normal by clamp(N(0, sigma), +-3 sigma). Cylinders label caps
// part 1 / sides part 0; tori label the inner half (closer to the axis than
// the tube center circle) part 1 / outer part 0; other shapes are all
// part 0.
Dataset generate_synthetic(const SyntheticSpec& spec);

struct Augmentation {
    double scale_min = 0.66;
    double scale_max = 1.33;
    double shift_range = 0.2;
    void validate() const;  // 0 < scale_min <= scale_max, shift_range >= 0
};

// Anisotropic: one scale per axis from [scale_min, scale_max] and one shift
// per axis from [-shift_range, +shift_range] (six rng draws, scales first).
// Labels and category ride along untouched.
PointCloud augment(const PointCloud& cloud, const Augmentation& aug, Rng& rng);

// -------------------------------- loss ------------------------------------

// Mean over rows of -sum_c q_c log softmax(logits_r)_c with q putting 1-eps
// on the target class and eps/(K-1) elsewhere. Fused forward/backward on the
// tape. Requires K >= 2, eps in [0,1), every target < K.
TP smoothed_cross_entropy(Tape& tape, const TP& logits, const std::vector<std::size_t>& targets,
                          double eps);

// ----------------------------- optimization --------------------------------

enum class OptimizerKind { Sgd, Adam };

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::Sgd;
    double lr = 0.1;            // base rate; the schedule rescales it per epoch
    double momentum = 0.9;      // sgd
    double weight_decay = 0.0;  // added to gradients as wd * value
    double beta1 = 0.9;         // adam
    double beta2 = 0.999;       // adam
    double eps = 1e-8;          // adam
    void validate() const;
};

// Holds per-parameter state buffers (sgd velocity, adam moments) aligned
// with the parameter list. step() consumes the gradients currently stored
// on the tensors.
class Optimizer {
  public:
    Optimizer(OptimizerConfig cfg, std::vector<TP> params);
    void step(double lr);
    void zero_grad();
    const OptimizerConfig& config() const { return cfg_; }

  private:
    OptimizerConfig cfg_;
    std::vector<TP> params_;
    std::vector<std::vector<double>> m_;  // sgd velocity / adam first moment
    std::vector<std::vector<double>> v_;  // adam second moment
    std::size_t t_ = 0;                   // adam step counter
};

enum class SchedulerKind { Cosine, Step };

struct SchedulerConfig {
    SchedulerKind kind = SchedulerKind::Cosine;
    double gamma = 0.5;      // step decay factor
    std::size_t every = 30;  // epochs between step decays
    void validate() const;
};

// lr0 * (1 + cos(pi * epoch / total)) / 2. Requires 0 <= epoch <= total,
// total >= 1. Monotone nonincreasing in epoch.
double cosine_lr(std::size_t epoch, std::size_t total, double lr0);

// lr0 * gamma^(epoch / every) with integer division. Requires every >= 1.
double step_lr(std::size_t epoch, double gamma, std::size_t every, double lr0);

struct TrainConfig {
    OptimizerConfig optimizer;
    SchedulerConfig scheduler;
    double label_smoothing = 0.2;
    std::size_t batch_size = 32;
    std::size_t epochs = 250;
    Augmentation augmentation;
    std::uint64_t seed = 0;
    void validate() const;
};

// Dispatches on cfg.scheduler; cosine uses cfg.epochs as the total.
double scheduled_lr(const TrainConfig& cfg, std::size_t epoch);

// -------------------------------- metrics ----------------------------------

struct ClassificationMetrics {
    double oa = 0.0;
    double macc = 0.0;
    std::vector<double> per_class;      // -1 marks classes absent from truth
    std::vector<std::string> warnings;  // one entry per absent class
};

// OA = correct/total; mAcc = unweighted mean of per-class accuracies over
// classes that appear in the truth (absent classes are excluded and
// reported in warnings).
ClassificationMetrics classification_metrics(const std::vector<std::size_t>& pred,
                                             const std::vector<std::size_t>& truth,
                                             std::size_t num_classes);

// Mean over shapes of the mean IoU over parts present in that shape's truth
// or prediction; a shape with no present parts counts 1.0.
double instance_miou(const std::vector<std::vector<std::size_t>>& pred,
                     const std::vector<std::vector<std::size_t>>& truth, std::size_t num_parts);

// Set IoU between predicted and ground-truth landmark positions (flattened
// xyz triples): a ground-truth point is matched when some prediction lies
// within tau of it, a prediction is correct when it lies within tau of some
// ground-truth point, and IoU = matched / (matched + false_pos + missed).
// Both sets empty -> 1.
double keypoint_iou(const std::vector<double>& pred_xyz, const std::vector<double>& gt_xyz,
                    double tau = 0.01);

// Average precision of score-ranked candidates (ties broken by lower index):
// walking candidates by descending score, each one greedily matches the
// nearest still-unmatched ground-truth point within tau; AP averages the
// precision at each match over the total ground-truth count.
double keypoint_ap(const std::vector<double>& cand_xyz, const std::vector<double>& scores,
                   const std::vector<double>& gt_xyz, double tau = 0.01);

// ------------------------------ training loop ------------------------------

enum class Task { Classify, Keypoint, PartSeg };

// Points within this distance of a dataset keypoint carry a positive
// saliency target for the keypoint task.
inline constexpr double kKeypointLabelRadius = 0.1;

struct EpochRow {
    std::size_t epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double train_oa = 0.0;
    double val_oa = 0.0;
    double val_macc = 0.0;
    double val_miou = 0.0;  // partseg: instance mIoU; keypoint: landmark IoU
    bool has_miou = false;
};

struct TrainResult {
    std::vector<EpochRow> rows;
    bool stopped_early = false;
};

struct TrainHooks {
    std::function<void(const EpochRow&)> on_epoch;  // after each epoch's row
    std::function<bool()> should_stop;  // polled between batches; true stops
};

struct EvalReport {
    double loss = 0.0;
    double oa = 0.0;
    double macc = 0.0;
    double miou = 0.0;  // see EpochRow::val_miou
    bool has_miou = false;
    double map = 0.0;  // keypoint only
    bool has_map = false;
};

// Eval-mode pass over a dataset (no augmentation, deterministic).
EvalReport evaluate(Task task, const NetworkSpec& spec, NetworkParams& params,
                    const Dataset& data, double label_smoothing, std::size_t batch_size);

// Trains params in place. Requirements per task:
//   Classify  — head classifier(num_classes == dataset classes).
//   Keypoint  — head pointwise(2): per-point salient/background logits, with
//               targets derived from dataset keypoints within
//               kKeypointLabelRadius.
//   PartSeg   — head partseg(num_parts, num_categories == dataset classes);
//               the batchnorm running-stat momentum starts at 0.9 and halves
//               every 30 epochs for this task.
// Each epoch shuffles, augments, and consumes minibatches of batch_size
// (a trailing remainder below the head's minimum — two clouds for the
// global-pooling tasks — is skipped), one tape and one optimizer step per
// batch. csv (optional) receives a header plus one row per epoch:
// epoch,lr,train_loss,train_oa,val_oa,val_macc[,val_miou]. Fully
// deterministic in cfg.seed.
TrainResult train_network(Task task, const NetworkSpec& spec, ParameterStore& store,
                          NetworkParams& params, const Dataset& train_data, const Dataset& val_data,
                          const TrainConfig& cfg, std::ostream* csv, const TrainHooks& hooks = {});

}  // namespace pointrel
