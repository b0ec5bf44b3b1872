#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "iomatch/tensor.hpp"

using namespace iomatch;

namespace {

TensorPtr random_tensor(int rows, int cols, std::mt19937_64& rng, bool requires_grad = false,
                        double lo = -2.0, double hi = 2.0) {
    auto t = make_tensor(rows, cols, requires_grad);
    std::uniform_real_distribution<double> dist(lo, hi);
    for (double& v : t->values()) v = dist(rng);
    return t;
}

} // namespace

TEST_CASE("matmul matches hand-computed products") {
    Tape tape;
    auto a = make_tensor({{1, 2}, {3, 4}});
    auto b = make_tensor({{5, 6}, {7, 8}});
    auto c = matmul(tape, a, b);
    CHECK(c->at(0, 0) == 19.0);
    CHECK(c->at(0, 1) == 22.0);
    CHECK(c->at(1, 0) == 43.0);
    CHECK(c->at(1, 1) == 50.0);

    auto identity = make_tensor(3, 3);
    for (int i = 0; i < 3; ++i) identity->at(i, i) = 1.0;
    std::mt19937_64 rng(3);
    auto m = random_tensor(3, 3, rng);
    auto mi = matmul(tape, m, identity);
    for (std::size_t i = 0; i < m->size(); ++i) CHECK(mi->values()[i] == m->values()[i]);

    auto zero = matmul(tape, make_tensor({{0, 0}}), make_tensor({{1}, {1}}));
    CHECK(zero->rows() == 1);
    CHECK(zero->cols() == 1);
    CHECK(zero->at(0, 0) == 0.0);
}

TEST_CASE("matmul reports both shapes on mismatch") {
    Tape tape;
    auto a = make_tensor(2, 3);
    auto b = make_tensor(2, 2);
    try {
        matmul(tape, a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("2x3") != std::string::npos);
        CHECK(msg.find("2x2") != std::string::npos);
    }
}

TEST_CASE("softmax rows") {
    Tape tape;
    auto x = make_tensor({{0, 0}, {std::log(2.0), 0}, {1000, 0}});
    auto p = softmax_rows(tape, x);
    CHECK(p->at(0, 0) == Catch::Approx(0.5).margin(1e-15));
    CHECK(p->at(1, 0) == Catch::Approx(2.0 / 3.0).margin(1e-12));
    CHECK(p->at(1, 1) == Catch::Approx(1.0 / 3.0).margin(1e-12));
    CHECK(p->at(2, 0) == Catch::Approx(1.0).margin(1e-12));
    CHECK(p->at(2, 1) == Catch::Approx(0.0).margin(1e-12));
    CHECK(all_finite(p));
}

TEST_CASE("softmax rows sum to one for random inputs") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        Tape tape;
        auto x = random_tensor(1 + trial % 7, 1 + (trial * 13) % 9, rng, false, -50.0, 50.0);
        auto p = softmax_rows(tape, x);
        for (int i = 0; i < p->rows(); ++i) {
            double sum = 0.0;
            for (int j = 0; j < p->cols(); ++j) sum += p->at(i, j);
            CHECK(std::fabs(sum - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("elementwise basics") {
    Tape tape;
    auto r = relu(tape, make_tensor({{-1, 0, 2}}));
    CHECK(r->at(0, 0) == 0.0);
    CHECK(r->at(0, 1) == 0.0);
    CHECK(r->at(0, 2) == 2.0);

    CHECK(row_argmax(make_tensor({{0.1, 0.7, 0.2}}))[0] == 1);

    auto oh = one_hot({2}, 4);
    CHECK(oh->at(0, 0) == 0.0);
    CHECK(oh->at(0, 2) == 1.0);

    auto lg = safe_log(tape, make_tensor({{0.0, 1.0}}));
    CHECK(all_finite(lg));
    CHECK(lg->at(0, 0) == Catch::Approx(std::log(1e-12)));
    CHECK(lg->at(0, 1) == 0.0);
}

TEST_CASE("bias-row broadcast add") {
    Tape tape;
    auto x = make_tensor({{1, 2}, {3, 4}}, true);
    auto b = make_tensor({{10, 20}}, true);
    auto y = add(tape, x, b);
    CHECK(y->at(1, 0) == 13.0);
    auto loss = sum_all(tape, y);
    tape.backward(loss);
    CHECK(b->grad()[0] == 2.0); // summed over both rows
    CHECK(b->grad()[1] == 2.0);
    CHECK(x->grad()[0] == 1.0);
}

TEST_CASE("backward on linear and quadratic forms") {
    {
        Tape tape;
        auto w = make_tensor(2, 2, true);
        for (double& v : w->values()) v = 5.0;
        tape.backward(sum_all(tape, w));
        for (double g : w->grad()) CHECK(g == 1.0);
    }
    {
        Tape tape;
        auto w = make_tensor({{1, 2}, {3, 4}}, true);
        tape.backward(sum_all(tape, mul(tape, w, w)));
        CHECK(w->grad()[0] == 2.0);
        CHECK(w->grad()[1] == 4.0);
        CHECK(w->grad()[2] == 6.0);
        CHECK(w->grad()[3] == 8.0);
    }
    {
        // unused parameter keeps a zero gradient
        Tape tape;
        auto w = make_tensor(2, 2, true);
        auto v = make_tensor({{1.0}}, true);
        tape.backward(sum_all(tape, mul(tape, v, v)));
        for (double g : w->grad()) CHECK(g == 0.0);
    }
}

TEST_CASE("backward twice is a usage error") {
    Tape tape;
    auto w = make_tensor({{1.0}}, true);
    auto loss = sum_all(tape, w);
    tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), UsageError);
    CHECK_THROWS_AS(tape.record([] {}), UsageError);
    tape.clear();
    auto loss2 = sum_all(tape, w);
    CHECK_NOTHROW(tape.backward(loss2));
}

TEST_CASE("gradient accumulation across two uses equals the per-path sum") {
    std::mt19937_64 rng(21);
    auto base = random_tensor(3, 3, rng);

    auto w_joint = detach(base);
    auto w1 = detach(base);
    auto w2 = detach(base);
    // rebuild with gradients enabled
    auto enable = [](TensorPtr& t) {
        auto g = make_tensor(t->rows(), t->cols(), true);
        g->values() = t->values();
        t = g;
    };
    enable(w_joint);
    enable(w1);
    enable(w2);

    Tape tj;
    tj.backward(add(tj, sum_all(tj, mul(tj, w_joint, w_joint)), sum_all(tj, w_joint)));
    Tape ta;
    ta.backward(sum_all(ta, mul(ta, w1, w1)));
    Tape tb;
    tb.backward(sum_all(tb, w2));
    for (std::size_t i = 0; i < w_joint->size(); ++i) {
        CHECK(w_joint->grad()[i] == w1->grad()[i] + w2->grad()[i]);
    }
}

TEST_CASE("scale_rows masks rows and routes gradients") {
    Tape tape;
    auto x = make_tensor({{1, 2}, {3, 4}}, true);
    auto mask = make_tensor({{1.0}, {0.0}});
    auto y = scale_rows(tape, x, mask);
    CHECK(y->at(0, 1) == 2.0);
    CHECK(y->at(1, 0) == 0.0);
    tape.backward(sum_all(tape, y));
    CHECK(x->grad()[0] == 1.0);
    CHECK(x->grad()[2] == 0.0); // masked row receives nothing
}

TEST_CASE("gather picks labeled entries and backpropagates into them only") {
    Tape tape;
    auto p = make_tensor({{0.9, 0.1}, {0.2, 0.8}}, true);
    auto picked = gather(tape, p, {0, 1});
    CHECK(picked->at(0, 0) == 0.9);
    CHECK(picked->at(1, 0) == 0.8);
    tape.backward(sum_all(tape, picked));
    CHECK(p->grad()[0] == 1.0);
    CHECK(p->grad()[1] == 0.0);
    CHECK(p->grad()[3] == 1.0);
    CHECK_THROWS_AS(gather(tape, p, {0, 5}), DataError);
}

TEST_CASE("momentum SGD follows the velocity recursion") {
    {
        auto w = make_tensor({{1.0}}, true);
        SgdOptimizer opt({w}, 0.1, 0.0);
        w->grad()[0] = 2.0;
        opt.step();
        CHECK(w->at(0, 0) == Catch::Approx(0.8));
        CHECK(w->grad()[0] == 0.0); // zeroed after the step
    }
    {
        auto w = make_tensor({{0.0}}, true);
        SgdOptimizer opt({w}, 1.0, 0.9);
        w->grad()[0] = 1.0;
        opt.step();
        CHECK(w->at(0, 0) == Catch::Approx(-1.0));
        w->grad()[0] = 1.0;
        opt.step();
        CHECK(w->at(0, 0) == Catch::Approx(-1.0 - 1.9));
    }
    {
        auto w = make_tensor({{3.0}}, true);
        SgdOptimizer opt({w}, 0.5, 0.0);
        opt.set_lr(0.0);
        w->grad()[0] = 7.0;
        opt.step();
        CHECK(w->at(0, 0) == 3.0);
    }
    CHECK_THROWS_AS(SgdOptimizer({make_tensor(1, 1, true)}, -1.0, 0.0), ConfigError);
    CHECK_THROWS_AS(SgdOptimizer({make_tensor(1, 1, true)}, 0.1, 1.0), ConfigError);
    CHECK_THROWS_AS(SgdOptimizer({make_tensor(1, 1, false)}, 0.1, 0.0), UsageError);
}

TEST_CASE("finite differences confirm composed gradients") {
    std::mt19937_64 rng(5);
    {
        auto w = random_tensor(2, 3, rng, true);
        auto quad = [w](Tape& t) { return sum_all(t, mul(t, w, w)); };
        CHECK(finite_difference_check(quad, {w}) < 1e-6);
    }
    {
        // composition of every differentiable op at sizes <= 8x8
        auto w1 = random_tensor(4, 5, rng, true, -0.8, 0.8);
        auto w2 = random_tensor(5, 3, rng, true, -0.8, 0.8);
        auto b1 = random_tensor(1, 5, rng, true, -0.5, 0.5);
        auto bias = random_tensor(1, 3, rng, true, -0.5, 0.5);
        auto x = random_tensor(6, 4, rng);
        auto mask = make_tensor(6, 1);
        for (int i = 0; i < 6; ++i) mask->at(i, 0) = i % 2;
        auto fn = [&](Tape& t) {
            auto hidden = relu(t, add(t, matmul(t, x, w1), b1));
            auto logits = add(t, matmul(t, hidden, w2), bias);
            auto probs = softmax_rows(t, logits);
            auto ce = mul(t, safe_log(t, probs), probs);
            auto picked = gather(t, probs, {0, 1, 2, 0, 1, 2});
            auto per_row = add(t, row_sum(t, ce), sub(t, picked, picked));
            return mean_all(t, scale_rows(t, per_row, mask));
        };
        CHECK(finite_difference_check(fn, {w1, w2, b1, bias}) < 1e-4);
    }
    {
        // constant function: both gradient sides vanish
        auto w = random_tensor(2, 2, rng, true);
        auto constant = [](Tape&) { return scalar_tensor(4.2); };
        CHECK(finite_difference_check(constant, {w}) == 0.0);
    }
}

TEST_CASE("identical op sequences are bitwise deterministic") {
    auto run = []() {
        std::mt19937_64 rng(77);
        auto w = random_tensor(4, 4, rng, true);
        auto x = random_tensor(4, 4, rng);
        Tape tape;
        auto loss = mean_all(tape, softmax_rows(tape, matmul(tape, x, w)));
        tape.backward(loss);
        auto out = w->grad();
        out.push_back(loss->item());
        return out;
    };
    CHECK(run() == run());
}
