#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>
#include <random>
#include <set>

#include "iomatch/data.hpp"
#include "iomatch/tensor.hpp"

using namespace iomatch;

namespace {

SyntheticTaskSpec default_task(std::uint64_t seed = 1) {
    SyntheticTaskSpec spec;
    spec.seed = seed;
    return spec;
}

struct TempCsv {
    std::string path;
    explicit TempCsv(const std::string& name, const std::string& content) : path(name) {
        std::ofstream out(path);
        out << content;
    }
    ~TempCsv() { std::remove(path.c_str()); }
};

// Softmax regression on the labeled rows only, full-batch gradient descent.
double linear_probe_accuracy(const OpenSetDataset& ds) {
    const int k = ds.num_seen();
    auto w = make_tensor(ds.input_dim, k, true);
    auto b = make_tensor(1, k, true);
    auto x = ds.rows(ds.labeled_idx);
    std::vector<int> y;
    for (int row : ds.labeled_idx) y.push_back(ds.open_truth(row));
    for (int step = 0; step < 300; ++step) {
        Tape tape;
        auto p = softmax_rows(tape, add(tape, matmul(tape, x, w), b));
        auto picked = gather(tape, p, y);
        auto loss = scale(tape, sum_all(tape, safe_log(tape, picked)),
                          -1.0 / static_cast<double>(y.size()));
        tape.backward(loss);
        for (const auto& t : {w, b}) {
            for (std::size_t i = 0; i < t->size(); ++i) t->values()[i] -= 0.5 * t->grad()[i];
            t->zero_grad();
        }
    }
    std::vector<int> test_rows, test_truth;
    for (int row : ds.test_idx) {
        const int t = ds.open_truth(row);
        if (t >= 0 && t < k) {
            test_rows.push_back(row);
            test_truth.push_back(t);
        }
    }
    Tape tape;
    auto p = softmax_rows(tape, add(tape, matmul(tape, ds.rows(test_rows), w), b));
    const auto pred = row_argmax(p);
    long hit = 0;
    for (std::size_t i = 0; i < pred.size(); ++i)
        if (pred[i] == test_truth[i]) ++hit;
    return static_cast<double>(hit) / pred.size();
}

} // namespace

TEST_CASE("synthetic task generation is deterministic in the seed") {
    const auto a = make_gaussian_mixture_task(default_task(5));
    const auto b = make_gaussian_mixture_task(default_task(5));
    const auto c = make_gaussian_mixture_task(default_task(6));
    CHECK(a.features == b.features);
    CHECK(a.raw_labels == b.raw_labels);
    CHECK(a.labeled_idx == b.labeled_idx);
    CHECK(a.features != c.features);
}

TEST_CASE("synthetic task counts and splits") {
    const auto ds = make_gaussian_mixture_task(default_task());
    CHECK(ds.num_seen() == 4);
    CHECK(ds.labeled_idx.size() == 16); // 4 classes x 4 labels
    CHECK(ds.n == 8 * 500);
    CHECK(ds.test_idx.size() == 8 * 100); // 20% per class
    CHECK(ds.unlabeled_idx.size() == ds.n - ds.test_idx.size() - ds.labeled_idx.size());

    // disjoint splits, labeled rows only from seen classes
    std::set<int> seen_rows(ds.labeled_idx.begin(), ds.labeled_idx.end());
    for (int row : ds.unlabeled_idx) CHECK(seen_rows.count(row) == 0);
    for (int row : ds.labeled_idx) {
        CHECK(ds.open_truth(row) >= 0);
        CHECK(ds.open_truth(row) < ds.num_seen());
    }
    CHECK_THROWS_AS(make_gaussian_mixture_task({1, 4, 4, 16, 10, 9, 3.0}), ConfigError);
    CHECK_THROWS_AS(make_gaussian_mixture_task({1, 1, 4, 16, 500, 4, 3.0}), ConfigError);
}

TEST_CASE("a widely separated task is linearly solvable from the labels alone") {
    auto spec = default_task(3);
    spec.class_sep = 50.0;
    const auto ds = make_gaussian_mixture_task(spec);
    CHECK(linear_probe_accuracy(ds) == 1.0);
}

TEST_CASE("csv round-trip reproduces the matrices exactly") {
    auto spec = default_task(9);
    spec.n_per_class = 20;
    const auto ds = make_gaussian_mixture_task(spec);
    save_feature_csv(ds, "rt_l.csv", "rt_u.csv", "rt_t.csv");
    const auto loaded = load_feature_csv("rt_l.csv", "rt_u.csv", "rt_t.csv");

    REQUIRE(loaded.input_dim == ds.input_dim);
    REQUIRE(loaded.labeled_idx.size() == ds.labeled_idx.size());
    REQUIRE(loaded.unlabeled_idx.size() == ds.unlabeled_idx.size());
    REQUIRE(loaded.test_idx.size() == ds.test_idx.size());
    auto matrix_of = [](const OpenSetDataset& d, const std::vector<int>& idx) {
        return d.rows(idx)->values();
    };
    CHECK(matrix_of(loaded, loaded.labeled_idx) == matrix_of(ds, ds.labeled_idx));
    CHECK(matrix_of(loaded, loaded.unlabeled_idx) == matrix_of(ds, ds.unlabeled_idx));
    CHECK(matrix_of(loaded, loaded.test_idx) == matrix_of(ds, ds.test_idx));
    CHECK(loaded.seen_class_ids == ds.seen_class_ids);
    for (const char* f : {"rt_l.csv", "rt_u.csv", "rt_t.csv"}) std::remove(f);
}

TEST_CASE("csv mapping rules") {
    TempCsv labeled("map_l.csv", "0,1.0,2.0\n1,3.0,4.0\n");
    TempCsv unlabeled("map_u.csv", "-1,0.5,0.5\n7,1.5,2.5\n");
    TempCsv test("map_t.csv", "0,1.0,1.0\n1,2.0,2.0\n7,9.0,9.0\n");
    const auto ds = load_feature_csv(labeled.path, unlabeled.path, test.path);
    CHECK(ds.num_seen() == 2);
    CHECK(ds.open_truth(ds.unlabeled_idx[0]) == kUnknownLabel);
    CHECK(ds.open_truth(ds.unlabeled_idx[1]) == 2); // class 7 maps to the outlier class
    CHECK(ds.open_truth(ds.test_idx[2]) == 2);
    CHECK(ds.unseen_class_ids == std::vector<int>{7});
}

TEST_CASE("csv parse errors carry file and line") {
    TempCsv labeled("err_l.csv", "0,1.0,2.0\n1,3.0\n");
    TempCsv unlabeled("err_u.csv", "-1,0.5,0.5\n");
    TempCsv test("err_t.csv", "0,1.0,1.0\n");
    try {
        load_feature_csv(labeled.path, unlabeled.path, test.path);
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("err_l.csv:2") != std::string::npos);
    }

    TempCsv bad("err_n.csv", "0,1.0,oops\n");
    CHECK_THROWS_AS(load_feature_csv(bad.path, unlabeled.path, test.path), ParseError);

    TempCsv empty("err_e.csv", "");
    CHECK_THROWS_AS(load_feature_csv(empty.path, unlabeled.path, test.path), ParseError);
}

TEST_CASE("augmentation strengths and determinism") {
    std::mt19937_64 rng(12);
    auto x = make_tensor(8, 16);
    std::uniform_real_distribution<double> dist(0.5, 2.0);
    for (double& v : x->values()) v = dist(rng);

    AugmentSpec spec;
    {
        AugmentSpec identity{0.0, 0.0, 0.0};
        std::mt19937_64 r(1);
        CHECK(augment(x, identity, AugmentStrength::weak, r)->values() == x->values());
    }
    {
        std::mt19937_64 r(2);
        auto strong = augment(x, spec, AugmentStrength::strong, r);
        CHECK(all_finite(strong));
        CHECK(strong->rows() == 8);
        for (int i = 0; i < 8; ++i) {
            int zeros = 0;
            for (int j = 0; j < 16; ++j)
                if (strong->at(i, j) == 0.0) ++zeros;
            CHECK(zeros == 4); // strong_mask_frac 0.25 of 16 coordinates
        }
    }
    {
        std::mt19937_64 r1(3), r2(3);
        CHECK(augment(x, spec, AugmentStrength::strong, r1)->values() ==
              augment(x, spec, AugmentStrength::strong, r2)->values());
    }
    AugmentSpec bad;
    bad.strong_sigma = 0.01; // weaker than weak
    std::mt19937_64 r(4);
    CHECK_THROWS_AS(augment(x, bad, AugmentStrength::weak, r), ConfigError);
}

TEST_CASE("batch structure follows B and mu") {
    const auto ds = make_gaussian_mixture_task(default_task());
    std::mt19937_64 rng(7);
    {
        auto [lb, ub] = next_batch(ds, 64, 7, rng);
        CHECK(lb.x->rows() == 64);
        CHECK(lb.y.size() == 64);
        CHECK(ub.x->rows() == 448);
    }
    {
        auto [lb, ub] = next_batch(ds, 32, 1, rng);
        CHECK(lb.x->rows() == ub.x->rows());
    }
    {
        // far larger than the 16-sample labeled pool: replacement keeps it valid
        auto [lb, ub] = next_batch(ds, 500, 1, rng);
        CHECK(lb.x->rows() == 500);
    }
    auto [lb, ub] = next_batch(ds, 16, 1, rng);
    for (int y : lb.y) {
        CHECK(y >= 0);
        CHECK(y < 4);
    }
}

TEST_CASE("empty pools are configuration errors") {
    SyntheticTaskSpec spec;
    spec.k_seen = 2;
    spec.k_unseen = 0;
    spec.n_per_class = 10;
    spec.n_labeled = 8; // 2 test + 8 labeled = everything
    const auto ds = make_gaussian_mixture_task(spec);
    CHECK(ds.unlabeled_idx.empty());
    std::mt19937_64 rng(1);
    CHECK_THROWS_AS(next_batch(ds, 4, 1, rng), ConfigError);
}
