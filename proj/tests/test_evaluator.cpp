#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "iomatch/evaluator.hpp"
#include "iomatch/trainer.hpp"

using namespace iomatch;

namespace {

NetworkDims tiny_dims() {
    NetworkDims dims;
    dims.input_dim = 6;
    dims.encoder_hidden = {8};
    dims.feature_dim = 5;
    dims.projector_hidden = {5};
    dims.projection_dim = 3;
    return dims;
}

TensorPtr random_input(int rows, int cols, std::mt19937_64& rng) {
    auto t = make_tensor(rows, cols);
    std::uniform_real_distribution<double> dist(-2.0, 2.0);
    for (double& v : t->values()) v = dist(rng);
    return t;
}

// independent confusion-matrix route
double brute_force_ba(const std::vector<int>& pred, const std::vector<int>& truth, int n_classes) {
    std::vector<std::vector<long>> confusion(n_classes, std::vector<long>(n_classes, 0));
    for (std::size_t i = 0; i < truth.size(); ++i) ++confusion[truth[i]][pred[i]];
    double sum = 0.0;
    int present = 0;
    for (int k = 0; k < n_classes; ++k) {
        long row = 0;
        for (long v : confusion[k]) row += v;
        if (row == 0) continue;
        sum += static_cast<double>(confusion[k][k]) / row;
        ++present;
    }
    return present ? sum / present : 0.0;
}

} // namespace

TEST_CASE("balanced accuracy oracles") {
    CHECK(balanced_accuracy({0, 1, 2}, {0, 1, 2}, 3) == 1.0);
    // recalls 1.0, 0.5, 0.0
    CHECK(balanced_accuracy({0, 0, 1, 2, 0, 0}, {0, 0, 1, 1, 2, 2}, 3) ==
          Catch::Approx(0.5).margin(1e-12));
    // constant predictor on an imbalanced binary problem
    CHECK(balanced_accuracy({0, 0, 0, 0, 0}, {0, 0, 0, 0, 1}, 2) ==
          Catch::Approx(0.5).margin(1e-12));
}

TEST_CASE("balanced accuracy equals the confusion-matrix route on random pairs") {
    std::mt19937_64 rng(606);
    for (int trial = 0; trial < 300; ++trial) {
        const int n_classes = 2 + static_cast<int>(rng() % 5);
        const int n = 1 + static_cast<int>(rng() % 40);
        std::vector<int> pred(n), truth(n);
        for (int i = 0; i < n; ++i) {
            pred[i] = static_cast<int>(rng() % n_classes);
            truth[i] = static_cast<int>(rng() % n_classes);
        }
        REQUIRE(balanced_accuracy(pred, truth, n_classes) ==
                brute_force_ba(pred, truth, n_classes));
    }
}

TEST_CASE("balanced accuracy excludes classes absent from the truth") {
    std::vector<double> recalls;
    const double ba = balanced_accuracy({0, 1}, {0, 1}, 4, &recalls);
    CHECK(ba == 1.0); // classes 2 and 3 excluded, not counted as zero
    REQUIRE(recalls.size() == 4);
    CHECK(recalls[2] == 0.0);
}

TEST_CASE("utilization rate oracles") {
    // 10 unlabeled, 6 selected, 4 of them correct
    std::vector<char> sel = {1, 1, 1, 1, 1, 1, 0, 0, 0, 0};
    std::vector<int> pseudo = {0, 0, 1, 1, 2, 2, 0, 0, 0, 0};
    std::vector<int> truth = {0, 0, 1, 1, 0, 0, 0, 0, 0, 0};
    CHECK(utilization_rate(sel, pseudo, truth, 10) == Catch::Approx(0.4).margin(1e-12));

    CHECK(utilization_rate({0, 0}, {1, 1}, {1, 1}, 2) == 0.0);
    CHECK(utilization_rate({1, 1}, {1, 1}, {1, 1}, 2) == 1.0);
    // unknown ground truth never counts as correct
    CHECK(utilization_rate({1}, {0}, {kUnknownLabel}, 1) == 0.0);
}

TEST_CASE("utilization rate is bounded by the selected fraction") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        const int n = 1 + static_cast<int>(rng() % 30);
        std::vector<char> sel(n);
        std::vector<int> pseudo(n), truth(n);
        int n_sel = 0;
        for (int i = 0; i < n; ++i) {
            sel[i] = rng() % 2;
            n_sel += sel[i];
            pseudo[i] = static_cast<int>(rng() % 3);
            truth[i] = static_cast<int>(rng() % 3);
        }
        const double util = utilization_rate(sel, pseudo, truth, n);
        REQUIRE(util <= static_cast<double>(n_sel) / n + 1e-15);
        REQUIRE(util <= 1.0);
    }
}

TEST_CASE("closed-set prediction breaks ties toward the lowest index") {
    auto net = NetworkParams::init(5, tiny_dims(), 4);
    std::fill(net.closed_head().weight->values().begin(), net.closed_head().weight->values().end(),
              0.0);
    std::fill(net.closed_head().bias->values().begin(), net.closed_head().bias->values().end(), 0.0);
    std::mt19937_64 rng(8);
    const auto pred = predict_closed(net, random_input(5, 6, rng));
    for (int p : pred) CHECK(p == 0);
}

TEST_CASE("closed-set prediction is invariant to monotone logit transforms") {
    auto net = NetworkParams::init(15, tiny_dims(), 3);
    std::mt19937_64 rng(9);
    auto x = random_input(40, 6, rng);
    const auto before = predict_closed(net, x);
    // positive scaling of all closed-head logits is strictly monotone
    for (double& v : net.closed_head().weight->values()) v *= 3.0;
    for (double& v : net.closed_head().bias->values()) v *= 3.0;
    CHECK(predict_closed(net, x) == before);
}

TEST_CASE("open-set prediction picks the outlier class exactly when it dominates") {
    std::mt19937_64 rng(10);
    for (int trial = 0; trial < 5; ++trial) {
        auto net = NetworkParams::init(100 + trial, tiny_dims(), 3);
        auto x = random_input(50, 6, rng);
        const auto pred = predict_open(net, x);
        Tape tape;
        const auto out = forward(tape, net, x);
        for (int i = 0; i < 50; ++i) {
            CHECK(pred[i] >= 0);
            CHECK(pred[i] <= 3);
            double seen_max = 0.0;
            for (int j = 0; j < 3; ++j) seen_max = std::max(seen_max, out.q_open->at(i, j));
            if (out.q_open->at(i, 3) > seen_max) CHECK(pred[i] == 3);
            if (seen_max > out.q_open->at(i, 3)) CHECK(pred[i] < 3);
        }
    }
}

TEST_CASE("closed prediction via the open head uses its first K entries") {
    auto net = NetworkParams::init(21, tiny_dims(), 3);
    std::mt19937_64 rng(11);
    auto x = random_input(30, 6, rng);
    const auto pred = predict_closed(net, x, true);
    Tape tape;
    const auto out = forward(tape, net, x);
    for (int i = 0; i < 30; ++i) {
        int best = 0;
        for (int j = 1; j < 3; ++j)
            if (out.q_open->at(i, j) > out.q_open->at(i, best)) best = j;
        CHECK(pred[i] == best);
    }
}

TEST_CASE("per-epoch evaluation populates the record") {
    SyntheticTaskSpec task;
    task.n_per_class = 30;
    task.k_seen = 2;
    task.k_unseen = 2;
    task.input_dim = 8;
    const auto ds = make_gaussian_mixture_task(task);
    TrainConfig cfg;
    cfg.dims = tiny_dims();
    cfg.dims.input_dim = 8;
    auto net = NetworkParams::init(1, cfg.dims, ds.num_seen());
    AlignmentState align(ds.num_seen());

    cfg.mode = TrainMode::iomatch;
    const auto rec = evaluate_epoch(net, ds, cfg, align, 3);
    CHECK(rec.epoch == 3);
    CHECK(rec.closed_acc >= 0.0);
    CHECK(rec.closed_acc <= 1.0);
    CHECK(rec.open_ba >= 0.0);
    CHECK(rec.per_class_recall.size() == 3); // K+1
    CHECK(rec.util_rate >= 0.0);

    cfg.mode = TrainMode::supervised;
    CHECK(evaluate_epoch(net, ds, cfg, align, 0).util_rate == 0.0);
}

TEST_CASE("open BA is the mean of per-class recalls when every class is present") {
    SyntheticTaskSpec task;
    task.n_per_class = 30;
    task.k_seen = 2;
    task.k_unseen = 2;
    task.input_dim = 8;
    const auto ds = make_gaussian_mixture_task(task);
    TrainConfig cfg;
    cfg.dims = tiny_dims();
    cfg.dims.input_dim = 8;
    auto net = NetworkParams::init(2, cfg.dims, ds.num_seen());
    AlignmentState align(ds.num_seen());
    const auto rec = evaluate_epoch(net, ds, cfg, align, 0);
    double mean = 0.0;
    for (double r : rec.per_class_recall) mean += r;
    mean /= rec.per_class_recall.size();
    CHECK(rec.open_ba == Catch::Approx(mean).margin(1e-12));
}
