#include "pointrel/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace pointrel {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

std::string shape_str(const std::vector<std::size_t>& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

void check_same_shape(const char* op, const TP& a, const TP& b) {
    if (a->shape != b->shape)
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a->shape) + " vs " +
                             shape_str(b->shape));
}

// Broadcast classification for binary elementwise ops: returns 0 when shapes
// match, 1 when b is a 1xC row against a's NxC, 2 when a is the row vector.
int broadcast_mode(const char* op, const TP& a, const TP& b) {
    if (a->shape == b->shape) return 0;
    if (a->cols() == b->cols()) {
        if (b->rows() == 1 && a->rows() > 1) return 1;
        if (a->rows() == 1 && b->rows() > 1) return 2;
    }
    throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a->shape) +
                         " vs " + shape_str(b->shape) +
                         " (broadcasting is limited to a 1xC row against NxC)");
}

// Sum of a strided sequence accumulated in ascending value order. The multiset
// of addends is permutation invariant, so so is the result, bit for bit.
double sorted_strided_sum(const double* base, std::size_t count, std::size_t stride,
                          std::vector<double>& scratch) {
    scratch.resize(count);
    for (std::size_t i = 0; i < count; ++i) scratch[i] = base[i * stride];
    std::sort(scratch.begin(), scratch.end());
    double acc = 0.0;
    for (double x : scratch) acc += x;
    return acc;
}

constexpr double kSigmoidMin = std::numeric_limits<double>::min();  // smallest normal

double strict_sigmoid(double x) {
    const double s = 1.0 / (1.0 + std::exp(-x));
    // Keep the output strictly inside (0,1) even when exp underflows.
    const double hi = 1.0 - 1.1102230246251565e-16;  // nextafter(1.0, 0.0)
    return std::min(hi, std::max(kSigmoidMin, s));
}

}  // namespace

TP make_tensor(std::vector<std::size_t> shape, bool track, std::string name) {
    if (shape.empty()) throw DimensionError("make_tensor: rank must be >= 1");
    std::size_t n = 1;
    for (std::size_t e : shape) {
        if (e == 0) throw DimensionError("make_tensor: zero extent in " + shape_str(shape));
        n *= e;
    }
    auto t = std::make_shared<Tensor>();
    t->shape = std::move(shape);
    t->v.assign(n, 0.0);
    t->track = track;
    t->name = std::move(name);
    return t;
}

TP make_tensor(std::vector<std::size_t> shape, const std::vector<double>& values, bool track,
               std::string name) {
    TP t = make_tensor(std::move(shape), track, std::move(name));
    if (values.size() != t->v.size())
        throw DimensionError("make_tensor: value count " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(t->shape));
    t->v.assign(values.begin(), values.end());
    return t;
}

TP scalar_tensor(double value, bool track) {
    return make_tensor({1, 1}, std::vector<double>{value}, track);
}

void Tape::backward_from(const TP& loss) {
    if (!loss || loss->numel() != 1)
        throw ContractError("backward: loss must be a scalar tensor");
    // Internal (op-output) gradients restart from zero on every pass; leaf
    // gradients persist so repeated passes accumulate into parameters.
    for (auto& n : nodes_) {
        n.out->ensure_grad();
        n.out->zero_grad();
    }
    loss->ensure_grad();
    loss->zero_grad();
    loss->g[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
        if (it->back) it->back();
}

void backward(Tape& tape, const TP& loss) { tape.backward_from(loss); }

// ---------------------------------------------------------------------------
// matmul family
// ---------------------------------------------------------------------------

TP matmul(Tape& tape, const TP& a, const TP& b) {
    const std::size_t M = a->rows(), K = a->cols(), K2 = b->rows(), N = b->cols();
    if (K != K2)
        throw DimensionError("matmul: inner extents differ, " + shape_str(a->shape) + " vs " +
                             shape_str(b->shape));
    const bool tr = a->track || b->track;
    TP out = make_tensor({M, N}, tr);
    EMap(out->v.data(), M, N).noalias() =
        ECMap(a->v.data(), M, K) * ECMap(b->v.data(), K, N);
    if (tr)
        tape.record(out, [a, b, out, M, K, N] {
            ECMap go(out->g.data(), M, N);
            if (a->track) {
                a->ensure_grad();
                EMap(a->g.data(), M, K).noalias() += go * ECMap(b->v.data(), K, N).transpose();
            }
            if (b->track) {
                b->ensure_grad();
                EMap(b->g.data(), K, N).noalias() += ECMap(a->v.data(), M, K).transpose() * go;
            }
        });
    return out;
}

TP matmul_nt(Tape& tape, const TP& a, const TP& b) {
    const std::size_t M = a->rows(), K = a->cols(), N = b->rows(), K2 = b->cols();
    if (K != K2)
        throw DimensionError("matmul_nt: inner extents differ, " + shape_str(a->shape) + " vs " +
                             shape_str(b->shape));
    const bool tr = a->track || b->track;
    TP out = make_tensor({M, N}, tr);
    EMap(out->v.data(), M, N).noalias() =
        ECMap(a->v.data(), M, K) * ECMap(b->v.data(), N, K).transpose();
    if (tr)
        tape.record(out, [a, b, out, M, K, N] {
            ECMap go(out->g.data(), M, N);
            if (a->track) {
                a->ensure_grad();
                EMap(a->g.data(), M, K).noalias() += go * ECMap(b->v.data(), N, K);
            }
            if (b->track) {
                b->ensure_grad();
                EMap(b->g.data(), N, K).noalias() += go.transpose() * ECMap(a->v.data(), M, K);
            }
        });
    return out;
}

// ---------------------------------------------------------------------------
// elementwise binary ops (with the single sanctioned broadcast form)
// ---------------------------------------------------------------------------

namespace {

template <typename FwdFn>
TP binary_op(const char* opname, Tape& tape, const TP& a, const TP& b, FwdFn fwd, double da,
             double db) {
    // fwd(x, y) computes the value; da/db are the constant partials (+1/-1/0 or
    // marker 2.0 meaning "multiply by the other operand" for hadamard).
    const int mode = broadcast_mode(opname, a, b);
    const TP& big = (mode == 2) ? b : a;
    const bool tr = a->track || b->track;
    TP out = make_tensor(big->shape, tr);
    const std::size_t R = big->rows(), C = big->cols();
    const double* av = a->v.data();
    const double* bv = b->v.data();
    double* ov = out->v.data();
    if (mode == 0) {
        for (std::size_t i = 0, n = out->numel(); i < n; ++i) ov[i] = fwd(av[i], bv[i]);
    } else if (mode == 1) {
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t c = 0; c < C; ++c) ov[r * C + c] = fwd(av[r * C + c], bv[c]);
    } else {
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t c = 0; c < C; ++c) ov[r * C + c] = fwd(av[c], bv[r * C + c]);
    }
    if (!tr) return out;
    const bool is_mul = (da == 2.0);
    tape.record(out, [a, b, out, mode, R, C, da, db, is_mul] {
        const double* go = out->g.data();
        auto accumulate = [&](const TP& t, bool row_side, double dcoef, const TP& other) {
            if (!t->track) return;
            t->ensure_grad();
            double* tg = t->g.data();
            const double* ov = other->v.data();
            const bool other_is_row = (&*other != &*t) && other->rows() == 1 && R > 1 &&
                                      other->cols() == C && t->rows() == R;
            if (!row_side) {
                // t has the full RxC shape.
                if (is_mul) {
                    if (other_is_row) {
                        for (std::size_t r = 0; r < R; ++r)
                            for (std::size_t c = 0; c < C; ++c)
                                tg[r * C + c] += go[r * C + c] * ov[c];
                    } else {
                        for (std::size_t i = 0, n = R * C; i < n; ++i) tg[i] += go[i] * ov[i];
                    }
                } else {
                    for (std::size_t i = 0, n = R * C; i < n; ++i) tg[i] += dcoef * go[i];
                }
            } else {
                // t is the 1xC row vector: reduce over rows (fixed row order).
                if (is_mul) {
                    for (std::size_t r = 0; r < R; ++r)
                        for (std::size_t c = 0; c < C; ++c)
                            tg[c] += go[r * C + c] * ov[r * C + c];
                } else {
                    for (std::size_t r = 0; r < R; ++r)
                        for (std::size_t c = 0; c < C; ++c) tg[c] += dcoef * go[r * C + c];
                }
            }
        };
        accumulate(a, mode == 2, da, b);
        accumulate(b, mode == 1, db, a);
    });
    return out;
}

}  // namespace

TP add(Tape& tape, const TP& a, const TP& b) {
    return binary_op("add", tape, a, b, [](double x, double y) { return x + y; }, 1.0, 1.0);
}

TP sub(Tape& tape, const TP& a, const TP& b) {
    return binary_op("sub", tape, a, b, [](double x, double y) { return x - y; }, 1.0, -1.0);
}

TP hadamard(Tape& tape, const TP& a, const TP& b) {
    // da = 2.0 is the internal marker meaning "derivative equals the other
    // operand" — see binary_op.
    return binary_op("hadamard", tape, a, b, [](double x, double y) { return x * y; }, 2.0, 2.0);
}

// ---------------------------------------------------------------------------
// elementwise unary ops
// ---------------------------------------------------------------------------

TP sigmoid(Tape& tape, const TP& x) {
    TP out = make_tensor(x->shape, x->track);
    for (std::size_t i = 0, n = x->numel(); i < n; ++i) out->v[i] = strict_sigmoid(x->v[i]);
    if (x->track)
        tape.record(out, [x, out] {
            x->ensure_grad();
            for (std::size_t i = 0, n = x->numel(); i < n; ++i) {
                const double y = out->v[i];
                x->g[i] += out->g[i] * y * (1.0 - y);
            }
        });
    return out;
}

TP leaky_relu(Tape& tape, const TP& x, double alpha) {
    TP out = make_tensor(x->shape, x->track);
    for (std::size_t i = 0, n = x->numel(); i < n; ++i) {
        const double v = x->v[i];
        out->v[i] = v > 0.0 ? v : alpha * v;
    }
    if (x->track)
        tape.record(out, [x, out, alpha] {
            x->ensure_grad();
            for (std::size_t i = 0, n = x->numel(); i < n; ++i)
                x->g[i] += out->g[i] * (x->v[i] > 0.0 ? 1.0 : alpha);
        });
    return out;
}

TP scale_by_scalar(Tape& tape, const TP& x, double c) { return affine_scalar(tape, x, c, 0.0); }

TP affine_scalar(Tape& tape, const TP& x, double mul, double addc) {
    TP out = make_tensor(x->shape, x->track);
    for (std::size_t i = 0, n = x->numel(); i < n; ++i) out->v[i] = mul * x->v[i] + addc;
    if (x->track)
        tape.record(out, [x, out, mul] {
            x->ensure_grad();
            for (std::size_t i = 0, n = x->numel(); i < n; ++i) x->g[i] += mul * out->g[i];
        });
    return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

TP reduce(Tape& tape, const TP& x, Reduce kind, int axis) {
    if (axis != 0 && axis != 1) throw DomainError("reduce: axis must be 0 or 1");
    const std::size_t R = x->rows(), C = x->cols();
    if (R == 0 || C == 0) throw DomainError("reduce: empty axis extent");

    if (axis == 0) {
        TP out = make_tensor({1, C}, x->track);
        if (kind == Reduce::Max) {
            std::vector<std::uint32_t> arg(C, 0);
            for (std::size_t c = 0; c < C; ++c) {
                double best = x->v[c];
                std::uint32_t bi = 0;
                for (std::size_t r = 1; r < R; ++r) {
                    const double v = x->v[r * C + c];
                    if (v > best) {
                        best = v;
                        bi = static_cast<std::uint32_t>(r);
                    }
                }
                out->v[c] = best;
                arg[c] = bi;
            }
            if (x->track)
                tape.record(out, [x, out, arg = std::move(arg), C] {
                    x->ensure_grad();
                    for (std::size_t c = 0; c < C; ++c) x->g[arg[c] * C + c] += out->g[c];
                });
        } else {
            std::vector<double> scratch;
            const double inv = 1.0 / static_cast<double>(R);
            for (std::size_t c = 0; c < C; ++c) {
                double s = sorted_strided_sum(x->v.data() + c, R, C, scratch);
                out->v[c] = (kind == Reduce::Mean) ? s * inv : s;
            }
            if (x->track)
                tape.record(out, [x, out, R, C, kind] {
                    x->ensure_grad();
                    const double w = (kind == Reduce::Mean) ? 1.0 / static_cast<double>(R) : 1.0;
                    for (std::size_t r = 0; r < R; ++r)
                        for (std::size_t c = 0; c < C; ++c) x->g[r * C + c] += w * out->g[c];
                });
        }
        return out;
    }

    // axis == 1: per-row reduction -> Rx1.
    TP out = make_tensor({R, 1}, x->track);
    if (kind == Reduce::Max) {
        std::vector<std::uint32_t> arg(R, 0);
        for (std::size_t r = 0; r < R; ++r) {
            const double* row = x->v.data() + r * C;
            double best = row[0];
            std::uint32_t bi = 0;
            for (std::size_t c = 1; c < C; ++c)
                if (row[c] > best) {
                    best = row[c];
                    bi = static_cast<std::uint32_t>(c);
                }
            out->v[r] = best;
            arg[r] = bi;
        }
        if (x->track)
            tape.record(out, [x, out, arg = std::move(arg), C] {
                x->ensure_grad();
                for (std::size_t r = 0; r < arg.size(); ++r) x->g[r * C + arg[r]] += out->g[r];
            });
    } else {
        for (std::size_t r = 0; r < R; ++r) {
            const double* row = x->v.data() + r * C;
            // Row order is intrinsic to the tensor (not the point axis), so a
            // plain left-to-right sum is already deterministic.
            double s = 0.0;
            for (std::size_t c = 0; c < C; ++c) s += row[c];
            out->v[r] = (kind == Reduce::Mean) ? s / static_cast<double>(C) : s;
        }
        if (x->track)
            tape.record(out, [x, out, R, C, kind] {
                x->ensure_grad();
                const double w = (kind == Reduce::Mean) ? 1.0 / static_cast<double>(C) : 1.0;
                for (std::size_t r = 0; r < R; ++r)
                    for (std::size_t c = 0; c < C; ++c) x->g[r * C + c] += w * out->g[r];
            });
    }
    return out;
}

TP reduce_all(Tape& tape, const TP& x, Reduce kind) {
    const std::size_t n = x->numel();
    if (n == 0) throw DomainError("reduce_all: empty tensor");
    TP out = make_tensor({1, 1}, x->track);
    if (kind == Reduce::Max) {
        double best = x->v[0];
        std::size_t bi = 0;
        for (std::size_t i = 1; i < n; ++i)
            if (x->v[i] > best) {
                best = x->v[i];
                bi = i;
            }
        out->v[0] = best;
        if (x->track)
            tape.record(out, [x, out, bi] {
                x->ensure_grad();
                x->g[bi] += out->g[0];
            });
    } else {
        std::vector<double> scratch;
        double s = sorted_strided_sum(x->v.data(), n, 1, scratch);
        out->v[0] = (kind == Reduce::Mean) ? s / static_cast<double>(n) : s;
        if (x->track)
            tape.record(out, [x, out, n, kind] {
                x->ensure_grad();
                const double w = (kind == Reduce::Mean) ? 1.0 / static_cast<double>(n) : 1.0;
                for (std::size_t i = 0; i < n; ++i) x->g[i] += w * out->g[0];
            });
    }
    return out;
}

TP reduce_rowblocks(Tape& tape, const TP& x, Reduce kind, std::size_t block) {
    const std::size_t R = x->rows(), C = x->cols();
    if (block == 0 || R % block != 0)
        throw DimensionError("reduce_rowblocks: row count " + std::to_string(R) +
                             " is not a multiple of block " + std::to_string(block));
    const std::size_t B = R / block;
    TP out = make_tensor({B, C}, x->track);
    if (kind == Reduce::Max) {
        std::vector<std::uint32_t> arg(B * C, 0);
        for (std::size_t b = 0; b < B; ++b) {
            const double* base = x->v.data() + b * block * C;
            double* orow = out->v.data() + b * C;
            std::uint32_t* arow = arg.data() + b * C;
            for (std::size_t c = 0; c < C; ++c) {
                orow[c] = base[c];
                arow[c] = 0;
            }
            for (std::size_t j = 1; j < block; ++j)
                for (std::size_t c = 0; c < C; ++c) {
                    const double v = base[j * C + c];
                    if (v > orow[c]) {
                        orow[c] = v;
                        arow[c] = static_cast<std::uint32_t>(j);
                    }
                }
        }
        if (x->track)
            tape.record(out, [x, out, arg = std::move(arg), B, C, block] {
                x->ensure_grad();
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t c = 0; c < C; ++c)
                        x->g[(b * block + arg[b * C + c]) * C + c] += out->g[b * C + c];
            });
    } else {
        // Block membership is fixed by construction (rows within a block are
        // neighbor slots in a defined order), so plain accumulation is fine.
        const double w = (kind == Reduce::Mean) ? 1.0 / static_cast<double>(block) : 1.0;
        for (std::size_t b = 0; b < B; ++b) {
            const double* base = x->v.data() + b * block * C;
            double* orow = out->v.data() + b * C;
            for (std::size_t c = 0; c < C; ++c) orow[c] = 0.0;
            for (std::size_t j = 0; j < block; ++j)
                for (std::size_t c = 0; c < C; ++c) orow[c] += base[j * C + c];
            if (kind == Reduce::Mean)
                for (std::size_t c = 0; c < C; ++c) orow[c] *= w;
        }
        if (x->track)
            tape.record(out, [x, out, B, C, block, w] {
                x->ensure_grad();
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t j = 0; j < block; ++j)
                        for (std::size_t c = 0; c < C; ++c)
                            x->g[(b * block + j) * C + c] += w * out->g[b * C + c];
            });
    }
    return out;
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

TP softmax_rows(Tape& tape, const TP& x) {
    const std::size_t R = x->rows(), C = x->cols();
    for (double v : x->v)
        if (std::isnan(v)) throw NumericError("softmax_rows: NaN in input");
    TP out = make_tensor(x->shape, x->track);
    for (std::size_t r = 0; r < R; ++r) {
        const double* in = x->v.data() + r * C;
        double* o = out->v.data() + r * C;
        double m = in[0];
        for (std::size_t c = 1; c < C; ++c) m = std::max(m, in[c]);
        double denom = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
            o[c] = std::exp(in[c] - m);
            denom += o[c];
        }
        const double inv = 1.0 / denom;
        for (std::size_t c = 0; c < C; ++c) o[c] *= inv;
    }
    if (x->track)
        tape.record(out, [x, out, R, C] {
            x->ensure_grad();
            for (std::size_t r = 0; r < R; ++r) {
                const double* y = out->v.data() + r * C;
                const double* gy = out->g.data() + r * C;
                double* gx = x->g.data() + r * C;
                double dot = 0.0;
                for (std::size_t c = 0; c < C; ++c) dot += gy[c] * y[c];
                for (std::size_t c = 0; c < C; ++c) gx[c] += y[c] * (gy[c] - dot);
            }
        });
    return out;
}

// ---------------------------------------------------------------------------
// gather / concat / dropout
// ---------------------------------------------------------------------------

TP gather_rows(Tape& tape, const TP& x, std::vector<std::uint32_t> idx) {
    const std::size_t R = x->rows(), C = x->cols();
    for (std::uint32_t i : idx)
        if (i >= R)
            throw IndexError("gather_rows: index " + std::to_string(i) + " out of range [0, " +
                             std::to_string(R) + ")");
    TP out = make_tensor({idx.size(), C}, x->track);
    for (std::size_t r = 0; r < idx.size(); ++r)
        std::copy_n(x->v.data() + std::size_t{idx[r]} * C, C, out->v.data() + r * C);
    if (x->track)
        tape.record(out, [x, out, idx = std::move(idx), C] {
            x->ensure_grad();
            for (std::size_t r = 0; r < idx.size(); ++r) {
                const double* go = out->g.data() + r * C;
                double* gx = x->g.data() + std::size_t{idx[r]} * C;
                for (std::size_t c = 0; c < C; ++c) gx[c] += go[c];
            }
        });
    return out;
}

TP concat_rows(Tape& tape, const std::vector<TP>& parts) {
    if (parts.empty()) throw DimensionError("concat_rows: no inputs");
    const std::size_t C = parts[0]->cols();
    std::size_t R = 0;
    bool tr = false;
    for (const TP& p : parts) {
        if (p->cols() != C) throw DimensionError("concat_rows: column widths differ");
        R += p->rows();
        tr = tr || p->track;
    }
    TP out = make_tensor({R, C}, tr);
    std::size_t row = 0;
    for (const TP& p : parts) {
        std::copy(p->v.begin(), p->v.end(), out->v.begin() + row * C);
        row += p->rows();
    }
    if (tr)
        tape.record(out, [parts, out, C] {
            std::size_t row = 0;
            for (const TP& p : parts) {
                const std::size_t n = p->numel();
                if (p->track) {
                    p->ensure_grad();
                    const double* go = out->g.data() + row * C;
                    for (std::size_t i = 0; i < n; ++i) p->g[i] += go[i];
                }
                row += p->rows();
            }
        });
    return out;
}

TP concat_cols(Tape& tape, const std::vector<TP>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no inputs");
    const std::size_t R = parts[0]->rows();
    std::size_t C = 0;
    bool tr = false;
    for (const TP& p : parts) {
        if (p->rows() != R) throw DimensionError("concat_cols: row counts differ");
        C += p->cols();
        tr = tr || p->track;
    }
    TP out = make_tensor({R, C}, tr);
    std::size_t col = 0;
    for (const TP& p : parts) {
        const std::size_t pc = p->cols();
        for (std::size_t r = 0; r < R; ++r)
            std::copy_n(p->v.data() + r * pc, pc, out->v.data() + r * C + col);
        col += pc;
    }
    if (tr)
        tape.record(out, [parts, out, R, C] {
            std::size_t col = 0;
            for (const TP& p : parts) {
                const std::size_t pc = p->cols();
                if (p->track) {
                    p->ensure_grad();
                    for (std::size_t r = 0; r < R; ++r) {
                        const double* go = out->g.data() + r * C + col;
                        double* gp = p->g.data() + r * pc;
                        for (std::size_t c = 0; c < pc; ++c) gp[c] += go[c];
                    }
                }
                col += pc;
            }
        });
    return out;
}

TP dropout(Tape& tape, const TP& x, double p, Rng& rng, bool training) {
    if (p < 0.0 || p >= 1.0) throw DomainError("dropout: p must be in [0, 1)");
    if (!training || p == 0.0) {
        // Identity pass-through; still a distinct node so graph structure is
        // uniform between modes.
        TP out = make_tensor(x->shape, x->track);
        out->v = x->v;
        if (x->track)
            tape.record(out, [x, out] {
                x->ensure_grad();
                for (std::size_t i = 0, n = x->numel(); i < n; ++i) x->g[i] += out->g[i];
            });
        return out;
    }
    const double keep = 1.0 - p;
    const double scale = 1.0 / keep;
    std::vector<double> mask(x->numel());
    for (double& m : mask) m = (rng.uniform01() < keep) ? scale : 0.0;
    TP out = make_tensor(x->shape, x->track);
    for (std::size_t i = 0, n = x->numel(); i < n; ++i) out->v[i] = x->v[i] * mask[i];
    if (x->track)
        tape.record(out, [x, out, mask = std::move(mask)] {
            x->ensure_grad();
            for (std::size_t i = 0, n = x->numel(); i < n; ++i) x->g[i] += out->g[i] * mask[i];
        });
    return out;
}

// ---------------------------------------------------------------------------
// batchnorm
// ---------------------------------------------------------------------------

BatchNorm make_batchnorm(std::size_t width) {
    BatchNorm bn;
    bn.gamma = make_tensor({1, width}, std::vector<double>(width, 1.0), true);
    bn.beta = make_tensor({1, width}, std::vector<double>(width, 0.0), true);
    bn.run_mean = make_tensor({1, width}, std::vector<double>(width, 0.0), false);
    bn.run_var = make_tensor({1, width}, std::vector<double>(width, 1.0), false);
    return bn;
}

TP batchnorm(Tape& tape, const TP& x, BatchNorm& bn, bool training) {
    const std::size_t R = x->rows(), C = x->cols();
    if (C != bn.gamma->cols())
        throw DimensionError("batchnorm: width " + std::to_string(C) +
                             " does not match parameters of width " +
                             std::to_string(bn.gamma->cols()));
    const bool tr = x->track || bn.gamma->track || bn.beta->track;
    TP out = make_tensor(x->shape, tr);

    if (training) {
        if (R < 2) throw DomainError("batchnorm: training mode needs at least 2 rows");
        auto mean = std::make_shared<std::vector<double>>(C, 0.0);
        auto invstd = std::make_shared<std::vector<double>>(C, 0.0);
        auto xhat = std::make_shared<std::vector<double>>(R * C, 0.0);
        const double invR = 1.0 / static_cast<double>(R);
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t c = 0; c < C; ++c) (*mean)[c] += x->v[r * C + c];
        for (std::size_t c = 0; c < C; ++c) (*mean)[c] *= invR;
        std::vector<double> var(C, 0.0);
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t c = 0; c < C; ++c) {
                const double d = x->v[r * C + c] - (*mean)[c];
                var[c] += d * d;
            }
        for (std::size_t c = 0; c < C; ++c) {
            var[c] *= invR;  // biased variance
            (*invstd)[c] = 1.0 / std::sqrt(var[c] + bn.eps);
        }
        const double* gm = bn.gamma->v.data();
        const double* bt = bn.beta->v.data();
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t c = 0; c < C; ++c) {
                const double h = (x->v[r * C + c] - (*mean)[c]) * (*invstd)[c];
                (*xhat)[r * C + c] = h;
                out->v[r * C + c] = gm[c] * h + bt[c];
            }
        // Convex running-stat update with the configured retention momentum.
        for (std::size_t c = 0; c < C; ++c) {
            bn.run_mean->v[c] = bn.momentum * bn.run_mean->v[c] + (1.0 - bn.momentum) * (*mean)[c];
            bn.run_var->v[c] = bn.momentum * bn.run_var->v[c] + (1.0 - bn.momentum) * var[c];
        }
        if (tr) {
            TP gamma = bn.gamma, beta = bn.beta;
            tape.record(out, [x, out, gamma, beta, xhat, invstd, R, C] {
                const double invR = 1.0 / static_cast<double>(R);
                std::vector<double> dgamma(C, 0.0), dbeta(C, 0.0);
                for (std::size_t r = 0; r < R; ++r)
                    for (std::size_t c = 0; c < C; ++c) {
                        const double go = out->g[r * C + c];
                        dgamma[c] += go * (*xhat)[r * C + c];
                        dbeta[c] += go;
                    }
                if (gamma->track) {
                    gamma->ensure_grad();
                    for (std::size_t c = 0; c < C; ++c) gamma->g[c] += dgamma[c];
                }
                if (beta->track) {
                    beta->ensure_grad();
                    for (std::size_t c = 0; c < C; ++c) beta->g[c] += dbeta[c];
                }
                if (x->track) {
                    x->ensure_grad();
                    for (std::size_t r = 0; r < R; ++r)
                        for (std::size_t c = 0; c < C; ++c) {
                            const double go = out->g[r * C + c];
                            x->g[r * C + c] +=
                                gamma->v[c] * (*invstd)[c] *
                                (go - invR * dbeta[c] - (*xhat)[r * C + c] * invR * dgamma[c]);
                        }
                }
            });
        }
        return out;
    }

    // Eval mode: per-row affine map with frozen statistics.
    const double* gm = bn.gamma->v.data();
    const double* bt = bn.beta->v.data();
    std::vector<double> invstd_run(C);
    for (std::size_t c = 0; c < C; ++c) invstd_run[c] = 1.0 / std::sqrt(bn.run_var->v[c] + bn.eps);
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c)
            out->v[r * C + c] =
                gm[c] * ((x->v[r * C + c] - bn.run_mean->v[c]) * invstd_run[c]) + bt[c];
    if (tr) {
        TP gamma = bn.gamma, beta = bn.beta, rmean = bn.run_mean;
        tape.record(out, [x, out, gamma, beta, rmean, invstd_run = std::move(invstd_run), R, C] {
            if (gamma->track || beta->track) {
                gamma->ensure_grad();
                beta->ensure_grad();
                for (std::size_t r = 0; r < R; ++r)
                    for (std::size_t c = 0; c < C; ++c) {
                        const double go = out->g[r * C + c];
                        gamma->g[c] += go * (x->v[r * C + c] - rmean->v[c]) * invstd_run[c];
                        beta->g[c] += go;
                    }
            }
            if (x->track) {
                x->ensure_grad();
                for (std::size_t r = 0; r < R; ++r)
                    for (std::size_t c = 0; c < C; ++c)
                        x->g[r * C + c] += out->g[r * C + c] * gamma->v[c] * invstd_run[c];
            }
        });
    }
    return out;
}

}  // namespace pointrel
