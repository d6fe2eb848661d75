#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "pointrel/common.hpp"

namespace pointrel {

// ---------------------------------------------------------------------------
// Dense row-major tensor of 64-bit reals with an optional gradient buffer.
// Rank is arbitrary, but every operation views the data as a 2-D matrix of
// rows() x cols() where cols() is the innermost extent. That is exactly the
// shape family the architecture needs (feature rows, edge-row blocks, score
// columns) without the cost of general strides.
// ---------------------------------------------------------------------------

struct Tensor {
    std::vector<std::size_t> shape;
    dvec v;              // values, row-major, 64-byte-aligned storage
    dvec g;              // gradient, same layout; empty until needed
    bool track = false;  // true when gradients should flow to/through this tensor
    std::string name;

    std::size_t numel() const { return v.size(); }
    std::size_t cols() const { return shape.empty() ? 0 : shape.back(); }
    std::size_t rows() const { return cols() == 0 ? 0 : numel() / cols(); }

    void ensure_grad() {
        if (g.size() != v.size()) g.assign(v.size(), 0.0);
    }
    void zero_grad() {
        if (!g.empty()) std::fill(g.begin(), g.end(), 0.0);
    }
};

using TP = std::shared_ptr<Tensor>;

TP make_tensor(std::vector<std::size_t> shape, bool track = false, std::string name = "");
TP make_tensor(std::vector<std::size_t> shape, const std::vector<double>& values,
               bool track = false, std::string name = "");

// Same, for any allocator (e.g. the aligned storage of another tensor). A
// template so brace-enclosed value lists still resolve to the plain overload.
template <class Alloc>
TP make_tensor(std::vector<std::size_t> shape, const std::vector<double, Alloc>& values,
               bool track = false, std::string name = "") {
    TP t = make_tensor(std::move(shape), track, std::move(name));
    if (values.size() != t->v.size())
        throw DimensionError("make_tensor: value count does not match shape");
    t->v.assign(values.begin(), values.end());
    return t;
}
TP scalar_tensor(double value, bool track = false);

// ---------------------------------------------------------------------------
// Tape: the recorded forward program. Operations append one node per call in
// execution order (so the list is topologically sorted by construction);
// backward() replays it in reverse. Tensors produced by recorded operations
// are "internal": their gradients are zeroed at the start of every backward
// pass. Leaf tensors (parameters, inputs) accumulate across passes until the
// caller resets them.
// ---------------------------------------------------------------------------

class Tape {
public:
    void record(TP out, std::function<void()> back) {
        nodes_.push_back(Node{std::move(out), std::move(back)});
    }
    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    void backward_from(const TP& loss);

private:
    struct Node {
        TP out;
        std::function<void()> back;
    };
    std::vector<Node> nodes_;
};

// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. loss must be a
// scalar (one element) or a ContractError is thrown.
void backward(Tape& tape, const TP& loss);

// ---------------------------------------------------------------------------
// Operations. Every op validates shapes, computes the forward value, and (when
// any input tracks gradients) records a backward closure on the tape.
// Broadcasting exists in exactly one form: a 1xC row vector against an NxC
// matrix in add/sub/hadamard. Anything else is a DimensionError.
// ---------------------------------------------------------------------------

TP matmul(Tape& tape, const TP& a, const TP& b);
// a · bᵀ without materializing the transpose (used for attention logits).
TP matmul_nt(Tape& tape, const TP& a, const TP& b);

TP add(Tape& tape, const TP& a, const TP& b);
TP sub(Tape& tape, const TP& a, const TP& b);
TP hadamard(Tape& tape, const TP& a, const TP& b);

TP sigmoid(Tape& tape, const TP& x);
TP leaky_relu(Tape& tape, const TP& x, double alpha);
TP scale_by_scalar(Tape& tape, const TP& x, double c);
// mul * x + addc, elementwise with scalar constants (e.g. 1 - w).
TP affine_scalar(Tape& tape, const TP& x, double mul, double addc);

enum class Reduce { Max, Mean, Sum };

// axis 0 reduces over rows -> 1xC; axis 1 reduces over columns -> Nx1.
// Max ties route to the lowest index. Sum/Mean over axis 0 accumulate in
// value-sorted order so the result is bit-identical under row permutation.
TP reduce(Tape& tape, const TP& x, Reduce kind, int axis);
// Reduces every element to a 1x1 scalar (sorted accumulation for sum/mean).
TP reduce_all(Tape& tape, const TP& x, Reduce kind);
// Reduces within consecutive row blocks: (N*block)xC -> NxC. Row i of the
// output reduces rows [i*block, (i+1)*block). Used for max-over-neighbors and
// the pooled representative samplers.
TP reduce_rowblocks(Tape& tape, const TP& x, Reduce kind, std::size_t block);

// Row-wise softmax with per-row max subtraction. NaN input -> NumericError.
TP softmax_rows(Tape& tape, const TP& x);

// Row gather; backward scatter-adds into the source (duplicates accumulate).
TP gather_rows(Tape& tape, const TP& x, std::vector<std::uint32_t> idx);

TP concat_rows(Tape& tape, const std::vector<TP>& parts);
TP concat_cols(Tape& tape, const std::vector<TP>& parts);

// Inverted dropout: zeroes entries with probability p and scales survivors by
// 1/(1-p) in training mode; identity in eval mode.
TP dropout(Tape& tape, const TP& x, double p, Rng& rng, bool training);

// ---------------------------------------------------------------------------
// Batch normalization over rows (each column normalized independently).
// Training mode uses batch statistics (biased variance, eps = 1e-5) and
// updates the running statistics by convex combination:
//     running = momentum * running + (1 - momentum) * batch.
// Eval mode normalizes with the running statistics.
// ---------------------------------------------------------------------------

struct BatchNorm {
    TP gamma;     // 1xC, learned
    TP beta;      // 1xC, learned
    TP run_mean;  // 1xC, state
    TP run_var;   // 1xC, state
    double momentum = 0.9;
    double eps = 1e-5;
};

BatchNorm make_batchnorm(std::size_t width);
TP batchnorm(Tape& tape, const TP& x, BatchNorm& bn, bool training);

}  // namespace pointrel
