#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "fedmgp/adam.hpp"
#include "fedmgp/rng.hpp"
#include "fedmgp/tensor.hpp"

using namespace fedmgp;

namespace {

// Runs forward+backward once, then finite-differences every coordinate.
double check_op_gradients(std::vector<Tensor> params,
                          const std::function<Tensor(Tape&)>& build) {
    for (Tensor& p : params) p.zero_grad();
    Tape tape;
    Tensor loss = build(tape);
    tape.backward(loss);
    const double h = 1e-5;
    double worst = 0.0;
    for (Tensor& p : params) {
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double saved = p.values()[i];
            p.values_mut()[i] = saved + h;
            Tape tp;
            const double lp = build(tp).value();
            p.values_mut()[i] = saved - h;
            Tape tm;
            const double lm = build(tm).value();
            p.values_mut()[i] = saved;
            const double fd = (lp - lm) / (2.0 * h);
            const double analytic = p.grad()[i];
            worst = std::max(worst, std::abs(fd - analytic) / std::max(std::abs(analytic), 1e-8));
        }
    }
    return worst;
}

}  // namespace

TEST_CASE("matmul identity and hand arithmetic") {
    Tape tape;
    Tensor eye({2, 2}, {1, 0, 0, 1});
    Tensor m({2, 2}, {3, 4, 5, 6});
    Tensor prod = tape.matmul(eye, m);
    CHECK(prod.values()[0] == 3.0);
    CHECK(prod.values()[1] == 4.0);
    CHECK(prod.values()[2] == 5.0);
    CHECK(prod.values()[3] == 6.0);

    Tensor a({1, 2}, {1, 2});
    Tensor b({2, 1}, {3, 4});
    CHECK(tape.matmul(a, b).value() == 11.0);
}

TEST_CASE("matmul against triple-loop oracle at seed 7") {
    Rng rng(7);
    Tensor a = seeded_uniform({3, 4}, rng, -1.0, 1.0);
    Tensor b = seeded_uniform({4, 2}, rng, -1.0, 1.0);
    Tape tape;
    Tensor c = tape.matmul(a, b);
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 2; ++j) {
            double want = 0.0;
            for (std::size_t k = 0; k < 4; ++k) want += a.at(i, k) * b.at(k, j);
            CHECK(std::abs(want - c.at(i, j)) < 1e-12);
        }
    }
}

TEST_CASE("matmul shape mismatch names both shapes") {
    Tape tape;
    Tensor a({2, 3});
    Tensor b({2, 3});
    CHECK_THROWS_WITH_AS(tape.matmul(a, b), doctest::Contains("(2x3)"), ShapeMismatchError);
}

TEST_CASE("softmax symmetry, stability, extended-precision oracle") {
    Tape tape;
    Tensor uniform({3}, {0, 0, 0});
    Tensor s = tape.softmax(uniform, 0);
    for (double v : s.values()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

    Tensor extreme({2}, {1000, 0});
    Tensor se = tape.softmax(extreme, 0);
    CHECK(se.values()[0] == 1.0);
    CHECK(se.values()[1] == 0.0);
    CHECK(se.all_finite());

    Tensor x({3}, {1, 2, 3});
    Tensor sx = tape.softmax(x, 0);
    long double denom = 0.0L;
    for (double v : x.values()) denom += expl(static_cast<long double>(v) - 3.0L);
    for (std::size_t i = 0; i < 3; ++i) {
        const long double want = expl(static_cast<long double>(x.values()[i]) - 3.0L) / denom;
        CHECK(std::abs(static_cast<double>(want) - sx.values()[i]) < 1e-12);
    }

    CHECK_THROWS_AS(tape.softmax(x, 1), AxisError);
}

TEST_CASE("softmax slices sum to one on both axes") {
    Rng rng(3);
    Tensor m = seeded_uniform({4, 6}, rng, -5.0, 5.0);
    Tape tape;
    Tensor rows = tape.softmax(m, 1);
    for (std::size_t i = 0; i < 4; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < 6; ++j) sum += rows.at(i, j);
        CHECK(std::abs(sum - 1.0) < 1e-9);
    }
    Tensor cols = tape.softmax(m, 0);
    for (std::size_t j = 0; j < 6; ++j) {
        double sum = 0.0;
        for (std::size_t i = 0; i < 4; ++i) sum += cols.at(i, j);
        CHECK(std::abs(sum - 1.0) < 1e-9);
    }
}

TEST_CASE("cross_entropy uniform, saturated, oracle, errors") {
    Tape tape;
    Tensor uniform({4}, {2, 2, 2, 2});
    CHECK(tape.cross_entropy(uniform, 1).value() == doctest::Approx(std::log(4.0)).epsilon(1e-12));

    Tensor dominant({3}, {50, 0, 0});
    CHECK(tape.cross_entropy(dominant, 0).value() < 1e-10);
    CHECK(tape.cross_entropy(dominant, 0).value() >= 0.0);

    Tensor x({3}, {1, 2, 3});
    long double denom = 0.0L;
    for (double v : x.values()) denom += expl(static_cast<long double>(v) - 3.0L);
    const long double want = -logl(expl(0.0L) / denom);
    CHECK(std::abs(static_cast<double>(want) - tape.cross_entropy(x, 2).value()) < 1e-12);

    CHECK_THROWS_AS(tape.cross_entropy(x, 3), LabelError);
}

TEST_CASE("mse identity, hand arithmetic, naive-loop oracle at seed 11") {
    Tape tape;
    Tensor a({2}, {1, 1});
    CHECK(tape.mse(a, a).value() == 0.0);
    Tensor zero({2}, {0, 0});
    CHECK(tape.mse(a, zero).value() == 1.0);

    Rng rng(11);
    Tensor u = seeded_uniform({3, 5}, rng, -2.0, 2.0);
    Tensor v = seeded_uniform({3, 5}, rng, -2.0, 2.0);
    double want = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        const double d = u.values()[i] - v.values()[i];
        want += d * d;
    }
    want /= static_cast<double>(u.size());
    CHECK(std::abs(tape.mse(u, v).value() - want) < 1e-12);

    CHECK_THROWS_AS(tape.mse(u, zero), ShapeMismatchError);
}

TEST_CASE("backward on sum gives ones; disconnected leaves stay zero") {
    Rng rng(5);
    Tensor x = seeded_uniform({3, 4}, rng, -1.0, 1.0, true);
    Tensor unused = seeded_uniform({2, 2}, rng, -1.0, 1.0, true);
    Tape tape;
    Tensor loss = tape.sum_all(x);
    tape.backward(loss);
    for (double g : x.grad()) CHECK(g == 1.0);
    for (double g : unused.grad()) CHECK(g == 0.0);

    Tensor not_scalar({2}, {1, 2});
    CHECK_THROWS_AS(tape.backward(not_scalar), NonScalarLossError);
}

TEST_CASE("composed loss on random parameters passes finite differences") {
    Rng rng(17);
    Tensor a = seeded_uniform({4, 3}, rng, -0.8, 0.8, true);
    Tensor b = seeded_uniform({3, 5}, rng, -0.8, 0.8, true);
    Tensor bias = seeded_uniform({5}, rng, -0.5, 0.5, true);
    Tensor gain = seeded_uniform({5}, rng, 0.5, 1.5, true);
    Tensor shift = seeded_uniform({5}, rng, -0.5, 0.5, true);

    auto build = [&](Tape& tape) {
        Tensor t1 = tape.add_row(tape.matmul(a, b), bias);
        Tensor t2 = tape.layer_norm(t1, gain, shift);
        Tensor t3 = tape.gelu(t2);
        Tensor t4 = tape.softmax(t3, 1);
        Tensor t5 = tape.mul(t4, t2);
        Tensor top = tape.slice_rows(t5, 0, 2);
        Tensor bottom = tape.slice_rows(t5, 2, 4);
        const Tensor parts[] = {top, bottom};
        Tensor joined = tape.concat_rows(parts);
        return tape.add(tape.mean_all(joined), tape.scale(tape.sum_all(t3), 0.01));
    };
    const double worst = check_op_gradients({a, b, bias, gain, shift}, build);
    CHECK(worst < 1e-4);
}

TEST_CASE("each recorded operation passes the finite-difference oracle") {
    Rng rng(23);

    SUBCASE("add, mul, scale, sub") {
        Tensor a = seeded_uniform({3, 3}, rng, -1, 1, true);
        Tensor b = seeded_uniform({3, 3}, rng, -1, 1, true);
        CHECK(check_op_gradients({a, b}, [&](Tape& t) {
                  return t.mean_all(t.mul(t.sub(t.add(a, b), t.scale(b, 0.3)), a));
              }) < 1e-4);
    }
    SUBCASE("matmul and transpose") {
        Tensor a = seeded_uniform({2, 4}, rng, -1, 1, true);
        Tensor b = seeded_uniform({4, 3}, rng, -1, 1, true);
        CHECK(check_op_gradients({a, b}, [&](Tape& t) {
                  return t.sum_all(t.matmul(t.transpose(t.matmul(a, b)), a));
              }) < 1e-4);
    }
    SUBCASE("gelu") {
        Tensor a = seeded_uniform({2, 5}, rng, -2, 2, true);
        CHECK(check_op_gradients({a}, [&](Tape& t) { return t.sum_all(t.gelu(a)); }) < 1e-4);
    }
    SUBCASE("layer_norm") {
        Tensor a = seeded_uniform({3, 6}, rng, -2, 2, true);
        Tensor g = seeded_uniform({6}, rng, 0.5, 1.5, true);
        Tensor s = seeded_uniform({6}, rng, -0.5, 0.5, true);
        CHECK(check_op_gradients({a, g, s}, [&](Tape& t) {
                  return t.mean_all(t.mul(t.layer_norm(a, g, s), a));
              }) < 1e-4);
    }
    SUBCASE("softmax both axes") {
        Tensor a = seeded_uniform({3, 4}, rng, -2, 2, true);
        CHECK(check_op_gradients({a}, [&](Tape& t) {
                  return t.mean_all(t.mul(t.softmax(a, 1), t.softmax(a, 0)));
              }) < 1e-4);
    }
    SUBCASE("concat and slice along both axes") {
        Tensor a = seeded_uniform({2, 3}, rng, -1, 1, true);
        Tensor b = seeded_uniform({2, 3}, rng, -1, 1, true);
        CHECK(check_op_gradients({a, b}, [&](Tape& t) {
                  const Tensor rows[] = {a, b};
                  Tensor stacked = t.concat_rows(rows);
                  const Tensor cols[] = {a, b};
                  Tensor wide = t.concat_cols(cols);
                  Tensor sl = t.slice_cols(t.slice_rows(stacked, 1, 3), 0, 2);
                  return t.add(t.mean_all(sl), t.mean_all(t.mul(wide, wide)));
              }) < 1e-4);
    }
    SUBCASE("cross_entropy and mse") {
        Tensor logits = seeded_uniform({1, 6}, rng, -1, 1, true);
        Tensor a = seeded_uniform({2, 3}, rng, -1, 1, true);
        Tensor b = seeded_uniform({2, 3}, rng, -1, 1, true);
        CHECK(check_op_gradients({logits, a, b}, [&](Tape& t) {
                  return t.add(t.cross_entropy(logits, 2), t.mse(a, b));
              }) < 1e-4);
    }
    SUBCASE("cosine_distance") {
        Tensor u = seeded_uniform({1, 8}, rng, -1, 1, true);
        Tensor v = seeded_uniform({1, 8}, rng, -1, 1, true);
        CHECK(check_op_gradients({u, v}, [&](Tape& t) { return t.cosine_distance(u, v); }) < 1e-4);
    }
}

TEST_CASE("cosine distance values and degenerate keys") {
    Tape tape;
    Tensor u({2}, {1, 0});
    Tensor v({2}, {1, 1});
    CHECK(tape.cosine_distance(u, u).value() == 0.0);
    Tensor w({2}, {0, 1});
    CHECK(tape.cosine_distance(u, w).value() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(tape.cosine_distance(u, v).value() ==
          doctest::Approx(1.0 - 1.0 / std::sqrt(2.0)).epsilon(1e-12));
    Tensor zero({2}, {0, 0});
    CHECK_THROWS_AS(tape.cosine_distance(u, zero), DegenerateKeyError);
}

TEST_CASE("forward passes are deterministic") {
    auto run = [] {
        Rng rng(31);
        Tensor a = seeded_uniform({4, 4}, rng, -1, 1, true);
        Tensor b = seeded_uniform({4, 4}, rng, -1, 1);
        Tape tape;
        Tensor out = tape.gelu(tape.matmul(tape.softmax(a, 1), b));
        return std::vector<double>(out.values().begin(), out.values().end());
    };
    CHECK(run() == run());
}

TEST_CASE("backward is reproducible after gradient clearing") {
    Rng rng(41);
    Tensor a = seeded_uniform({3, 3}, rng, -1, 1, true);
    Tensor b = seeded_uniform({3, 3}, rng, -1, 1, true);
    auto run = [&] {
        Tape tape;
        Tensor loss = tape.mean_all(tape.mul(tape.matmul(a, b), a));
        tape.backward(loss);
        std::vector<double> grads(a.grad().begin(), a.grad().end());
        grads.insert(grads.end(), b.grad().begin(), b.grad().end());
        a.zero_grad();
        b.zero_grad();
        return grads;
    };
    CHECK(run() == run());
}

TEST_CASE("adam: null step, hand-stepped oracle, zero gradient, frozen rejection") {
    SUBCASE("learning rate zero leaves parameters unchanged") {
        Tensor p = Tensor::scalar(0.7, true);
        p.grad_mut()[0] = 1.3;
        AdamState adam;
        adam.learning_rate = 0.0;
        adam.apply(std::vector<Tensor>{p});
        CHECK(p.value() == 0.7);
        CHECK(p.grad()[0] == 0.0);  // gradients cleared by the optimizer step
    }
    SUBCASE("single step from zero moments matches hand-stepped oracle") {
        Tensor p = Tensor::scalar(0.0, true);
        p.grad_mut()[0] = 1.0;
        AdamState adam;
        adam.apply(std::vector<Tensor>{p});
        const double m_hat = (0.1 * 1.0) / (1.0 - 0.9);
        const double v_hat = (0.001 * 1.0) / (1.0 - 0.999);
        const double want = -adam.learning_rate * m_hat / (std::sqrt(v_hat) + adam.epsilon);
        CHECK(p.value() == doctest::Approx(want).epsilon(1e-15));
        CHECK(std::abs(p.value() + adam.learning_rate) < 1e-10);  // ~lr, tiny epsilon drift
    }
    SUBCASE("zero gradient leaves parameters unchanged") {
        Tensor p = Tensor::scalar(2.5, true);
        AdamState adam;
        adam.apply(std::vector<Tensor>{p});
        CHECK(p.value() == 2.5);
    }
    SUBCASE("frozen parameter is rejected") {
        Tensor p = Tensor::scalar(1.0, false);
        AdamState adam;
        CHECK_THROWS_AS(adam.apply(std::vector<Tensor>{p}), FrozenParameterError);
    }
}

TEST_CASE("tensor invariants: shape product, grad sizing, finiteness") {
    Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.size() == 6);
    CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0}), ShapeMismatchError);
    t.set_requires_grad(true);
    CHECK(t.grad().size() == t.size());
    CHECK(t.all_finite());
    t.values_mut()[0] = std::numeric_limits<double>::quiet_NaN();
    CHECK(!t.all_finite());
}
