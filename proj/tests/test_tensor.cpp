#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "oracles.hpp"
#include "pointrel/tensor.hpp"

using namespace pointrel;

namespace {

TP t2(std::size_t r, std::size_t c, std::vector<double> v, bool track = false) {
    return make_tensor({r, c}, std::move(v), track);
}

}  // namespace

TEST_CASE("matmul identity and projector") {
    Tape tape;
    TP I = t2(2, 2, {1, 0, 0, 1});
    TP A = t2(2, 2, {1, 2, 3, 4});
    TP out = matmul(tape, I, A);
    CHECK(out->v == std::vector<double>{1, 2, 3, 4});

    TP P = t2(2, 2, {1, 0, 0, 0});
    TP x = t2(2, 1, {5, 7});
    TP y = matmul(tape, P, x);
    CHECK(y->v == std::vector<double>{5, 0});
}

TEST_CASE("matmul shape mismatch names both shapes") {
    Tape tape;
    TP a = t2(2, 3, std::vector<double>(6, 1.0));
    TP b = t2(2, 2, std::vector<double>(4, 1.0));
    CHECK_THROWS_AS(matmul(tape, a, b), DimensionError);
}

TEST_CASE("matmul matches naive loop oracle") {
    Rng rng(11);
    TP a = t2(5, 7, oracle::rand_vec(rng, 35));
    TP b = t2(7, 4, oracle::rand_vec(rng, 28));
    Tape tape;
    TP c = matmul(tape, a, b);
    auto ref = oracle::matmul_ref(a->v, b->v, 5, 7, 4);
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(c->v[i] == doctest::Approx(ref[i]).epsilon(1e-14));
}

TEST_CASE("matmul gradient vs central finite differences") {
    Rng rng(42);
    TP a = make_tensor({3, 4}, oracle::rand_vec(rng, 12), true);
    TP b = make_tensor({4, 2}, oracle::rand_vec(rng, 8), true);
    TP w = make_tensor({3, 2}, oracle::rand_vec(rng, 6));  // fixed functional weights
    auto build = [&](Tape& tape) {
        return reduce_all(tape, hadamard(tape, matmul(tape, a, b), w), Reduce::Sum);
    };
    CHECK(oracle::fd_max_rel_err(build, {a, b}) < 1e-6);
}

TEST_CASE("matmul_nt equals matmul with transposed operand") {
    Rng rng(3);
    TP a = make_tensor({4, 5}, oracle::rand_vec(rng, 20), true);
    TP b = make_tensor({3, 5}, oracle::rand_vec(rng, 15), true);
    Tape tape;
    TP o = matmul_nt(tape, a, b);
    // Oracle: o[i][j] = dot(a_i, b_j)
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < 5; ++k) acc += a->v[i * 5 + k] * b->v[j * 5 + k];
            CHECK(o->v[i * 3 + j] == doctest::Approx(acc).epsilon(1e-14));
        }
    TP w = make_tensor({4, 3}, oracle::rand_vec(rng, 12));
    auto build = [&](Tape& t) {
        return reduce_all(t, hadamard(t, matmul_nt(t, a, b), w), Reduce::Sum);
    };
    CHECK(oracle::fd_max_rel_err(build, {a, b}) < 1e-6);
}

TEST_CASE("elementwise add/sub/hadamard with row broadcast") {
    Rng rng(7);
    TP A = make_tensor({3, 4}, oracle::rand_vec(rng, 12), true);
    TP r = make_tensor({1, 4}, oracle::rand_vec(rng, 4), true);
    Tape tape;

    TP s = add(tape, A, r);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t c = 0; c < 4; ++c)
            CHECK(s->v[i * 4 + c] == A->v[i * 4 + c] + r->v[c]);

    TP d = sub(tape, r, A);  // row on the left
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t c = 0; c < 4; ++c)
            CHECK(d->v[i * 4 + c] == r->v[c] - A->v[i * 4 + c]);

    TP h = hadamard(tape, A, r);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t c = 0; c < 4; ++c)
            CHECK(h->v[i * 4 + c] == A->v[i * 4 + c] * r->v[c]);

    TP bad = make_tensor({2, 3}, std::vector<double>(6, 0.0));
    CHECK_THROWS_AS(add(tape, A, bad), DimensionError);

    TP w = make_tensor({3, 4}, oracle::rand_vec(rng, 12));
    for (auto op : {0, 1, 2}) {
        auto build = [&](Tape& t) -> TP {
            TP o = op == 0 ? add(t, A, r) : op == 1 ? sub(t, r, A) : hadamard(t, A, r);
            return reduce_all(t, hadamard(t, o, w), Reduce::Sum);
        };
        CHECK(oracle::fd_max_rel_err(build, {A, r}) < 1e-6);
    }
}

TEST_CASE("hadamard annihilator and self-product gradient") {
    Tape tape;
    TP a = t2(1, 3, {1, 2, 3});
    TP z = t2(1, 3, {0, 0, 0});
    CHECK(hadamard(tape, a, z)->v == std::vector<double>{0, 0, 0});

    // loss = sum(x ⊙ x) -> grad = 2x
    TP x = make_tensor({1, 3}, {1.0, -2.0, 0.5}, true);
    Tape t2p;
    TP loss = reduce_all(t2p, hadamard(t2p, x, x), Reduce::Sum);
    backward(t2p, loss);
    CHECK(x->g == std::vector<double>{2.0, -4.0, 1.0});
}

TEST_CASE("sigmoid, leaky_relu, scalar ops") {
    Tape tape;
    TP x = t2(1, 5, {0.0, -1.0, 1000.0, -1000.0, 0.3}, false);
    TP s = sigmoid(tape, x);
    CHECK(s->v[0] == 0.5);
    for (double v : s->v) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }

    TP l = leaky_relu(tape, t2(1, 2, {-1.0, 2.0}), 0.2);
    CHECK(l->v[0] == doctest::Approx(-0.2));
    CHECK(l->v[1] == 2.0);

    TP sc = scale_by_scalar(tape, t2(1, 2, {3.0, -1.0}), -2.0);
    CHECK(sc->v == std::vector<double>{-6.0, 2.0});
    TP af = affine_scalar(tape, t2(1, 2, {0.25, 0.75}), -1.0, 1.0);  // 1 - w
    CHECK(af->v == std::vector<double>{0.75, 0.25});

    Rng rng(5);
    TP y = make_tensor({2, 3}, oracle::rand_vec(rng, 6), true);
    TP w = make_tensor({2, 3}, oracle::rand_vec(rng, 6));
    for (int op = 0; op < 4; ++op) {
        auto build = [&](Tape& t) -> TP {
            TP o = op == 0   ? sigmoid(t, y)
                   : op == 1 ? leaky_relu(t, y, 0.2)
                   : op == 2 ? scale_by_scalar(t, y, 1.7)
                             : affine_scalar(t, y, -1.0, 1.0);
            return reduce_all(t, hadamard(t, o, w), Reduce::Sum);
        };
        CHECK(oracle::fd_max_rel_err(build, {y}) < 1e-6);
    }
}

TEST_CASE("reduce max/mean/sum semantics") {
    Tape tape;
    TP x = t2(2, 2, {1, 5, 7, 2});
    TP rowmax = reduce(tape, x, Reduce::Max, 1);
    CHECK(rowmax->v == std::vector<double>{5, 7});
    TP colmax = reduce(tape, x, Reduce::Max, 0);
    CHECK(colmax->v == std::vector<double>{7, 5});

    TP m = reduce_all(tape, t2(1, 3, {2, 4, 6}), Reduce::Mean);
    CHECK(m->v[0] == 4.0);

    // Max tie routes the full gradient to the lowest index.
    TP ties = make_tensor({2, 1}, {3.0, 3.0}, true);
    Tape tt;
    TP mx = reduce(tt, ties, Reduce::Max, 0);
    backward(tt, mx);
    CHECK(ties->g == std::vector<double>{1.0, 0.0});

    Rng rng(9);
    TP y = make_tensor({4, 3}, oracle::rand_vec(rng, 12), true);
    for (auto kind : {Reduce::Max, Reduce::Mean, Reduce::Sum})
        for (int axis : {0, 1}) {
            TP w = make_tensor({axis == 0 ? std::size_t{1} : std::size_t{4},
                                axis == 0 ? std::size_t{3} : std::size_t{1}},
                               oracle::rand_vec(rng, axis == 0 ? 3 : 4));
            auto build = [&](Tape& t) {
                return reduce_all(t, hadamard(t, reduce(t, y, kind, axis), w), Reduce::Sum);
            };
            CHECK(oracle::fd_max_rel_err(build, {y}) < 1e-6);
        }
}

TEST_CASE("row-axis sum is bit-identical under row permutation") {
    Rng rng(123);
    const std::size_t R = 64, C = 5;
    TP x = make_tensor({R, C}, oracle::rand_vec(rng, R * C, -10.0, 10.0));
    Tape tape;
    TP s1 = reduce(tape, x, Reduce::Sum, 0);
    TP m1 = reduce(tape, x, Reduce::Mean, 0);

    std::vector<std::uint32_t> perm(R);
    for (std::size_t i = 0; i < R; ++i) perm[i] = static_cast<std::uint32_t>(i);
    for (std::size_t i = R; i > 1; --i) std::swap(perm[i - 1], perm[rng.uniform_index(i)]);
    std::vector<double> pv(R * C);
    for (std::size_t i = 0; i < R; ++i)
        for (std::size_t c = 0; c < C; ++c) pv[i * C + c] = x->v[perm[i] * C + c];
    TP xp = make_tensor({R, C}, pv);
    TP s2 = reduce(tape, xp, Reduce::Sum, 0);
    TP m2 = reduce(tape, xp, Reduce::Mean, 0);
    CHECK(s1->v == s2->v);  // exact, not approximate
    CHECK(m1->v == m2->v);
}

TEST_CASE("reduce_rowblocks matches per-block loop oracle") {
    Rng rng(31);
    const std::size_t B = 4, block = 3, C = 2;
    TP x = make_tensor({B * block, C}, oracle::rand_vec(rng, B * block * C), true);
    Tape tape;
    TP mx = reduce_rowblocks(tape, x, Reduce::Max, block);
    TP mn = reduce_rowblocks(tape, x, Reduce::Mean, block);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
            double m = -1e300, s = 0.0;
            for (std::size_t j = 0; j < block; ++j) {
                const double v = x->v[(b * block + j) * C + c];
                m = std::max(m, v);
                s += v;
            }
            CHECK(mx->v[b * C + c] == m);
            CHECK(mn->v[b * C + c] == doctest::Approx(s / block).epsilon(1e-15));
        }
    TP w = make_tensor({B, C}, oracle::rand_vec(rng, B * C));
    for (auto kind : {Reduce::Max, Reduce::Mean, Reduce::Sum}) {
        auto build = [&](Tape& t) {
            return reduce_all(t, hadamard(t, reduce_rowblocks(t, x, kind, block), w), Reduce::Sum);
        };
        CHECK(oracle::fd_max_rel_err(build, {x}) < 1e-6);
    }
    CHECK_THROWS_AS(reduce_rowblocks(tape, x, Reduce::Max, 5), DimensionError);
}

TEST_CASE("softmax rows: uniform, stability, closed form, invariants") {
    Tape tape;
    TP u = softmax_rows(tape, t2(1, 3, {0, 0, 0}));
    for (double v : u->v) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-15));

    TP big = softmax_rows(tape, t2(1, 2, {1000, 1000}));
    CHECK(big->v[0] == 0.5);
    CHECK(big->v[1] == 0.5);

    TP cf = softmax_rows(tape, t2(1, 2, {std::log(2.0), 0.0}));
    CHECK(cf->v[0] == doctest::Approx(2.0 / 3).epsilon(1e-15));
    CHECK(cf->v[1] == doctest::Approx(1.0 / 3).epsilon(1e-15));

    CHECK_THROWS_AS(softmax_rows(tape, t2(1, 2, {std::nan(""), 0.0})), NumericError);

    Rng rng(17);
    TP x = make_tensor({6, 8}, oracle::rand_vec(rng, 48, -5, 5));
    TP y = softmax_rows(tape, x);
    for (std::size_t r = 0; r < 6; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < 8; ++c) s += y->v[r * 8 + c];
        CHECK(std::fabs(s - 1.0) <= 1e-9);
    }
    // Invariance under adding a constant to a row.
    std::vector<double> shifted(x->v.begin(), x->v.end());
    for (std::size_t c = 0; c < 8; ++c) shifted[2 * 8 + c] += 3.25;
    TP y2 = softmax_rows(tape, make_tensor({6, 8}, shifted));
    for (std::size_t c = 0; c < 8; ++c)
        CHECK(y->v[2 * 8 + c] == doctest::Approx(y2->v[2 * 8 + c]).epsilon(1e-12));

    TP xg = make_tensor({3, 4}, oracle::rand_vec(rng, 12), true);
    TP w = make_tensor({3, 4}, oracle::rand_vec(rng, 12));
    auto build = [&](Tape& t) {
        return reduce_all(t, hadamard(t, softmax_rows(t, xg), w), Reduce::Sum);
    };
    CHECK(oracle::fd_max_rel_err(build, {xg}) < 1e-6);
}

TEST_CASE("gather rows: duplicates accumulate, adjointness, bounds") {
    TP x = make_tensor({3, 2}, {1, 2, 3, 4, 5, 6}, true);
    Tape tape;
    TP g = gather_rows(tape, x, {0, 0});
    TP loss = reduce_all(tape, g, Reduce::Sum);
    backward(tape, loss);
    CHECK(x->g == std::vector<double>{2, 2, 0, 0, 0, 0});

    Tape t1;
    TP idg = gather_rows(t1, x, {0, 1, 2});
    CHECK(idg->v == x->v);

    CHECK_THROWS_AS(gather_rows(t1, x, {3}), IndexError);

    // Adjointness: <gather(x,idx), y> == <x, scatter_add(y,idx)>.
    Rng rng(21);
    std::vector<std::uint32_t> idx{2, 1, 2, 0, 1};
    TP y = make_tensor({5, 2}, oracle::rand_vec(rng, 10));
    x->zero_grad();
    Tape t3;
    TP gx = gather_rows(t3, x, idx);
    TP dot = reduce_all(t3, hadamard(t3, gx, y), Reduce::Sum);
    backward(t3, dot);  // x->g is now scatter_add(y, idx)
    double lhs = dot->v[0];
    double rhs = 0.0;
    for (std::size_t i = 0; i < x->numel(); ++i) rhs += x->v[i] * x->g[i];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));

    auto build = [&](Tape& t) {
        return reduce_all(t, hadamard(t, gather_rows(t, x, {2, 1}), make_tensor({2, 2}, {1, 2, 3, 4})),
                          Reduce::Sum);
    };
    CHECK(oracle::fd_max_rel_err(build, {x}) < 1e-6);
}

TEST_CASE("concat rows and cols") {
    Rng rng(13);
    TP a = make_tensor({2, 3}, oracle::rand_vec(rng, 6), true);
    TP b = make_tensor({1, 3}, oracle::rand_vec(rng, 3), true);
    Tape tape;
    TP cr = concat_rows(tape, {a, b});
    CHECK(cr->rows() == 3);
    CHECK(cr->v[6] == b->v[0]);

    TP c = make_tensor({2, 2}, oracle::rand_vec(rng, 4), true);
    TP cc = concat_cols(tape, {a, c});
    CHECK(cc->cols() == 5);
    CHECK(cc->v[3] == c->v[0]);
    CHECK(cc->v[5 + 3] == c->v[2]);

    CHECK_THROWS_AS(concat_rows(tape, {a, c}), DimensionError);
    CHECK_THROWS_AS(concat_cols(tape, {b, c}), DimensionError);

    TP w1 = make_tensor({3, 3}, oracle::rand_vec(rng, 9));
    auto build1 = [&](Tape& t) {
        return reduce_all(t, hadamard(t, concat_rows(t, {a, b}), w1), Reduce::Sum);
    };
    CHECK(oracle::fd_max_rel_err(build1, {a, b}) < 1e-6);
    TP w2 = make_tensor({2, 5}, oracle::rand_vec(rng, 10));
    auto build2 = [&](Tape& t) {
        return reduce_all(t, hadamard(t, concat_cols(t, {a, c}), w2), Reduce::Sum);
    };
    CHECK(oracle::fd_max_rel_err(build2, {a, c}) < 1e-6);
}

TEST_CASE("dropout: eval identity, train mask determinism, gradient") {
    Rng rng(77);
    TP x = make_tensor({4, 4}, oracle::rand_vec(rng, 16), true);
    Tape tape;
    Rng r1(1000);
    TP e = dropout(tape, x, 0.5, r1, /*training=*/false);
    CHECK(e->v == x->v);

    Rng r2(1000), r3(1000);
    TP d1 = dropout(tape, x, 0.5, r2, true);
    TP d2 = dropout(tape, x, 0.5, r3, true);
    CHECK(d1->v == d2->v);  // same stream, same mask
    for (std::size_t i = 0; i < 16; ++i) {
        const bool zero = d1->v[i] == 0.0;
        const bool scaled = d1->v[i] == doctest::Approx(2.0 * x->v[i]).epsilon(1e-15);
        CHECK((zero || scaled));
    }

    TP w = make_tensor({4, 4}, oracle::rand_vec(rng, 16));
    auto build = [&](Tape& t) {
        Rng rr(555);  // identical mask on every evaluation
        return reduce_all(t, hadamard(t, dropout(t, x, 0.5, rr, true), w), Reduce::Sum);
    };
    CHECK(oracle::fd_max_rel_err(build, {x}) < 1e-6);
    CHECK_THROWS_AS(dropout(tape, x, 1.0, r2, true), DomainError);
}

TEST_CASE("batchnorm: train/eval semantics and gradients") {
    // Constant column in train mode -> zeros (gamma=1, beta=0).
    BatchNorm bn = make_batchnorm(2);
    Tape tape;
    TP x = t2(4, 2, {5, 1, 5, 2, 5, 3, 5, 4});
    TP y = batchnorm(tape, x, bn, true);
    for (std::size_t r = 0; r < 4; ++r) CHECK(y->v[r * 2] == 0.0);

    // Running-stat convex update: started at mean 0 / var 1, momentum 0.9.
    // Batch col 0: mean 5, var 0. Expect run_mean = 0.9*0 + 0.1*5 = 0.5.
    CHECK(bn.run_mean->v[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(bn.run_var->v[0] == doctest::Approx(0.9).epsilon(1e-15));

    // Eval with running mean 0, var 1 is the identity (fresh BN).
    BatchNorm bn2 = make_batchnorm(3);
    TP z = t2(2, 3, {1, -2, 3, 0.5, 0.25, -1});
    TP ze = batchnorm(tape, z, bn2, false);
    for (std::size_t i = 0; i < 6; ++i)
        CHECK(ze->v[i] == doctest::Approx(z->v[i]).epsilon(1e-5));

    TP one_row = t2(1, 2, {1, 2});
    BatchNorm bn3 = make_batchnorm(2);
    CHECK_THROWS_AS(batchnorm(tape, one_row, bn3, true), DomainError);

    // Gradient vs finite differences on a 4x3 input (x, gamma, beta).
    Rng rng(19);
    TP xin = make_tensor({4, 3}, oracle::rand_vec(rng, 12), true);
    BatchNorm bng = make_batchnorm(3);
    oracle::set_values(bng.gamma, oracle::rand_vec(rng, 3, 0.5, 1.5));
    oracle::set_values(bng.beta, oracle::rand_vec(rng, 3, -0.5, 0.5));
    TP w = make_tensor({4, 3}, oracle::rand_vec(rng, 12));
    auto build = [&](Tape& t) {
        BatchNorm local = bng;  // copy shares the parameter tensors
        local.run_mean = make_tensor({1, 3}, bng.run_mean->v);  // keep state pristine
        local.run_var = make_tensor({1, 3}, bng.run_var->v);
        return reduce_all(t, hadamard(t, batchnorm(t, xin, local, true), w), Reduce::Sum);
    };
    CHECK(oracle::fd_max_rel_err(build, {xin, bng.gamma, bng.beta}) < 1e-5);

    // Eval-mode gradient too.
    auto build_eval = [&](Tape& t) {
        BatchNorm local = bng;
        return reduce_all(t, hadamard(t, batchnorm(t, xin, local, false), w), Reduce::Sum);
    };
    CHECK(oracle::fd_max_rel_err(build_eval, {xin, bng.gamma, bng.beta}) < 1e-6);
}

TEST_CASE("backward: seeds, accumulation, determinism, contract") {
    TP x = make_tensor({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    Tape tape;
    TP loss = reduce_all(tape, x, Reduce::Sum);
    backward(tape, loss);
    CHECK(x->g == std::vector<double>(6, 1.0));

    // Repeated backward without reset accumulates into the leaf.
    backward(tape, loss);
    CHECK(x->g == std::vector<double>(6, 2.0));

    // After reset, a replay is bit-identical.
    x->zero_grad();
    backward(tape, loss);
    auto g1 = x->g;
    x->zero_grad();
    backward(tape, loss);
    CHECK(x->g == g1);

    TP notscalar = make_tensor({2, 2}, {1, 2, 3, 4}, true);
    Tape t2p;
    TP y = scale_by_scalar(t2p, notscalar, 2.0);
    CHECK_THROWS_AS(backward(t2p, y), ContractError);
}

TEST_CASE("sigmoid output strictly inside (0,1) at extremes") {
    Tape tape;
    TP x = t2(1, 4, {-750.0, -60.0, 60.0, 750.0});
    TP s = sigmoid(tape, x);
    for (double v : s->v) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }
}
